"""Hot numeric kernels, each with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``ATTRADAPT_NUMBA``
environment variable: ``"1"`` forces numba (import failure is an error),
``"0"`` forces the numpy fallback, anything else picks numba when it is
importable. ``ACTIVE_BACKEND`` reports the choice. Matrix products are
deliberately left to numpy's BLAS; only loops numpy cannot fuse live here.
``benchmarks/bench_kernels.py`` times both paths side by side.

Both paths of a kernel implement the same formula; results agree to
floating-point tolerance but are not guaranteed bit-identical across
backends. Within one backend every kernel is deterministic.
"""

import os

import numpy as np

_env = os.environ.get("ATTRADAPT_NUMBA", "auto").strip().lower()
if _env in ("0", "false", "off"):
    _HAVE_NUMBA = False
elif _env in ("1", "true", "on"):
    from numba import njit  # noqa: F401  (hard requirement requested)

    _HAVE_NUMBA = True
else:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False

ACTIVE_BACKEND = "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations (always available; the fallback path)
# ---------------------------------------------------------------------------

def sigmoid_np(x):
    """Elementwise logistic function, stable for |x| up to and beyond 500."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x):
    """Elementwise log(1 + e^x) in the overflow-free form."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_logits_np(z, a):
    """Elementwise sigmoid cross entropy from logits: max(z,0) - z*a + log(1+e^-|z|)."""
    return np.maximum(z, 0.0) - z * a + np.log1p(np.exp(-np.abs(z)))


def adam_update_np(p, g, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam step, in place on flat arrays p, m, v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def dist_matrix_np(q, g):
    """Euclidean distance matrix via ||a||^2 + ||b||^2 - 2ab, clamped at 0 before sqrt."""
    q = q.astype(np.float64, copy=False)
    g = g.astype(np.float64, copy=False)
    sq = np.einsum("ij,ij->i", q, q)
    sg = np.einsum("ij,ij->i", g, g)
    d2 = sq[:, None] + sg[None, :] - 2.0 * (q @ g.T)
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def ranking_stats_np(sorted_pids, sorted_camids, q_pids, q_camids, same_cam_junk):
    """Per-query first-hit rank and average precision over a filtered ranked gallery.

    ``sorted_pids``/``sorted_camids`` are gallery ids re-ordered per query by
    ascending distance. Gallery items sharing both person and camera id with
    the query are dropped when ``same_cam_junk``. Queries with no relevant
    item left get rank 0 and AP nan (rank is 1-based; 0 means "none").
    """
    nq = q_pids.shape[0]
    first_hit = np.zeros(nq, dtype=np.int64)
    ap = np.full(nq, np.nan)
    for i in range(nq):
        row_pids = sorted_pids[i]
        row_cams = sorted_camids[i]
        if same_cam_junk:
            keep = ~((row_pids == q_pids[i]) & (row_cams == q_camids[i]))
            row_pids = row_pids[keep]
        match = row_pids == q_pids[i]
        n_rel = int(match.sum())
        if n_rel == 0:
            continue
        pos = np.nonzero(match)[0]
        first_hit[i] = pos[0] + 1
        hits = np.arange(1, n_rel + 1, dtype=np.float64)
        ap[i] = float(np.sum(hits / (pos + 1.0)) / n_rel)
    return first_hit, ap


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _sigmoid_flat_nb(x, out):
        for i in range(x.shape[0]):
            xi = x[i]
            if xi >= 0.0:
                out[i] = 1.0 / (1.0 + np.exp(-xi))
            else:
                e = np.exp(xi)
                out[i] = e / (1.0 + e)

    def sigmoid_nb(x):
        out = np.empty_like(x)
        _sigmoid_flat_nb(x.ravel(), out.reshape(-1))
        return out

    @njit(cache=True)
    def _softplus_flat_nb(x, out):
        for i in range(x.shape[0]):
            xi = x[i]
            hi = xi if xi > 0.0 else 0.0
            out[i] = hi + np.log1p(np.exp(-abs(xi)))

    def softplus_nb(x):
        out = np.empty_like(x)
        _softplus_flat_nb(x.ravel(), out.reshape(-1))
        return out

    @njit(cache=True)
    def _bce_flat_nb(z, a, out):
        for i in range(z.shape[0]):
            zi = z[i]
            hi = zi if zi > 0.0 else 0.0
            out[i] = hi - zi * a[i] + np.log1p(np.exp(-abs(zi)))

    def bce_logits_nb(z, a):
        out = np.empty_like(z)
        _bce_flat_nb(z.ravel(), a.ravel(), out.reshape(-1))
        return out

    @njit(cache=True)
    def adam_update_nb(p, g, m, v, t, lr, beta1, beta2, eps):
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    @njit(cache=True)
    def dist_matrix_nb(q, g):
        nq, d = q.shape
        ng = g.shape[0]
        sq = np.empty(nq)
        for i in range(nq):
            s = 0.0
            for k in range(d):
                s += q[i, k] * q[i, k]
            sq[i] = s
        sg = np.empty(ng)
        for j in range(ng):
            s = 0.0
            for k in range(d):
                s += g[j, k] * g[j, k]
            sg[j] = s
        out = np.empty((nq, ng))
        for i in range(nq):
            for j in range(ng):
                dot = 0.0
                for k in range(d):
                    dot += q[i, k] * g[j, k]
                d2 = sq[i] + sg[j] - 2.0 * dot
                if d2 < 0.0:
                    d2 = 0.0
                out[i, j] = np.sqrt(d2)
        return out

    @njit(cache=True)
    def ranking_stats_nb(sorted_pids, sorted_camids, q_pids, q_camids, same_cam_junk):
        nq, ng = sorted_pids.shape
        first_hit = np.zeros(nq, dtype=np.int64)
        ap = np.full(nq, np.nan)
        for i in range(nq):
            rank = 0
            hits = 0
            prec_sum = 0.0
            first = 0
            for j in range(ng):
                if same_cam_junk and sorted_pids[i, j] == q_pids[i] and sorted_camids[i, j] == q_camids[i]:
                    continue
                rank += 1
                if sorted_pids[i, j] == q_pids[i]:
                    hits += 1
                    prec_sum += hits / rank
                    if first == 0:
                        first = rank
            if hits > 0:
                first_hit[i] = first
                ap[i] = prec_sum / hits
        return first_hit, ap


# ---------------------------------------------------------------------------
# public aliases bound to the active backend
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:
    sigmoid = sigmoid_nb
    softplus = softplus_nb
    bce_logits = bce_logits_nb
    adam_update = adam_update_nb

    def dist_matrix(q, g):
        return dist_matrix_nb(
            np.ascontiguousarray(q, dtype=np.float64),
            np.ascontiguousarray(g, dtype=np.float64),
        )

    def ranking_stats(sorted_pids, sorted_camids, q_pids, q_camids, same_cam_junk):
        return ranking_stats_nb(
            np.ascontiguousarray(sorted_pids),
            np.ascontiguousarray(sorted_camids),
            np.ascontiguousarray(q_pids),
            np.ascontiguousarray(q_camids),
            same_cam_junk,
        )
else:
    sigmoid = sigmoid_np
    softplus = softplus_np
    bce_logits = bce_logits_np
    adam_update = adam_update_np
    dist_matrix = dist_matrix_np
    ranking_stats = ranking_stats_np
