"""Source pretraining and adversarial adaptation, with Adam and checkpoints.

Both procedures are deterministic: every random draw comes from seeded
generators consumed in a fixed order, so identical configs and seeds give
bit-identical checkpoints and traces.

Checkpoint format (little-endian): magic "ADPT", version u32=1, tensor
count u32, then per tensor: name length u16 + UTF-8 name, rank u8, dims
u32 each, float32 payload. Tensor names are "role/param", e.g.
"target_encoder/w0". Specs are rebuilt from the stored shapes; all roles
use relu hidden layers and a linear output layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor, backward, no_grad
from .errors import ConfigError, ContractError, DataFormatError, NumericalError
from .losses import (LossVariant, adda_losses, adda_mapping_loss, attr_loss,
                     combined_objective, lsgan_losses, lsgan_mapping_loss)
from .networks import MlpSpec, ParamSet, clone_params, default_specs, forward, init_mlp
from .synth import Dataset


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError(f"pretrain config must be positive: {self}")


@dataclass(frozen=True)
class AdaptConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-4
    alpha: float = 0.1
    variant: LossVariant = LossVariant.LSGAN_BOTH
    with_classifier: bool = True
    d_steps_per_m_step: int = 1
    source_fraction_in_union_batch: float = 0.5
    seed: int = 0
    eval_every_n_epochs: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError(f"adapt config must be positive: {self}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.d_steps_per_m_step < 1:
            raise ConfigError("d_steps_per_m_step must be >= 1")
        if self.eval_every_n_epochs < 0:
            raise ConfigError("eval_every_n_epochs must be >= 0")
        variant = LossVariant(self.variant)
        object.__setattr__(self, "variant", variant)
        frac = self.source_fraction_in_union_batch
        if variant is LossVariant.ADDA_LOG:
            # Eq.-2 style adaptation feeds only target samples through M.
            object.__setattr__(self, "source_fraction_in_union_batch", 0.0)
        elif not 0 <= frac < 1:
            raise ConfigError(f"source fraction must be in [0, 1), got {frac}")


@dataclass
class AdamState:
    """First/second moment arrays per parameter plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update over named parameter tensors.

    Tensors with no accumulated gradient are skipped; moments are allocated
    lazily with the parameter's shape.
    """
    state.step_count += 1
    for name, t in params.items():
        if t.grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        kernels.adam_update(
            t.data.reshape(-1), t.grad.reshape(-1),
            state.m[name].reshape(-1), state.v[name].reshape(-1),
            state.step_count, lr, state.beta1, state.beta2, state.eps,
        )


def _named(*paramsets: ParamSet) -> dict:
    out = {}
    for ps in paramsets:
        for name, t in ps.params.items():
            out[f"{ps.role}/{name}"] = t
    return out


def _check_finite(value: float, what: str):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what}")


class _Batcher:
    """Seeded cyclic minibatch index stream with per-epoch reshuffling."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.queue = np.empty(0, dtype=np.int64)

    def draw(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.int64)
        filled = 0
        while filled < k:
            if self.queue.size == 0:
                self.queue = self.rng.permutation(self.n)
            take = min(k - filled, self.queue.size)
            out[filled:filled + take] = self.queue[:take]
            self.queue = self.queue[take:]
            filled += take
        return out


# ---------------------------------------------------------------------------
# source pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    encoder: ParamSet       # M_a
    classifier: ParamSet    # C_a
    history: list           # mean attribute loss per epoch


def pretrain_source(source: Dataset, cfg: PretrainConfig,
                    specs: Optional[dict] = None) -> PretrainResult:
    """Minimize the attribute loss on the labeled source domain with Adam."""
    if not len(source):
        raise ContractError("empty source dataset")
    labels_all = source.attribute_matrix()   # raises if any row lacks labels
    feats_all = source.features

    if specs is None:
        specs = default_specs(source.feature_dim, source.n_attributes)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    encoder = init_mlp(specs["encoder"], int(seeds[0]), role="source_encoder")
    classifier = init_mlp(specs["classifier"], int(seeds[1]), role="source_classifier")
    shuffle_rng = np.random.default_rng(int(seeds[2]))

    opt = AdamState()
    params = _named(encoder, classifier)
    n = len(source)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = Tensor(feats_all[idx])
            y = Tensor(labels_all[idx])
            loss = attr_loss(forward(classifier, forward(encoder, x)), y)
            value = loss.item()
            _check_finite(value, f"pretrain loss at epoch {epoch}, step {start // cfg.batch_size}")
            for t in params.values():
                t.zero_grad()
            backward(loss)
            adam_step(params, opt, cfg.learning_rate)
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    return PretrainResult(encoder=encoder, classifier=classifier, history=history)


# ---------------------------------------------------------------------------
# adversarial adaptation
# ---------------------------------------------------------------------------

@dataclass
class TraceEpoch:
    """Per-epoch record; epoch 0 is the unadapted model (losses are nan)."""

    epoch: int
    d_loss: float
    m_loss: float
    attr_loss: float
    rank1: Optional[float] = None
    map: Optional[float] = None


@dataclass
class AdaptResult:
    encoder: ParamSet        # M
    classifier: ParamSet     # C
    discriminator: ParamSet  # D
    trace: list


EvalHook = Callable[[ParamSet, ParamSet, int], dict]


def adapt(encoder_src: ParamSet, classifier_src: ParamSet, source: Dataset,
          target_train: Dataset, cfg: AdaptConfig,
          eval_hook: Optional[EvalHook] = None) -> AdaptResult:
    """Adversarially align a cloned encoder to the unlabeled target domain.

    Per step: ``d_steps_per_m_step`` discriminator updates on detached
    features, then one mapping update fooling the frozen discriminator,
    with the alpha-weighted source attribute term when the auxiliary
    classifier is enabled. The source networks are frozen throughout.
    """
    if target_train.has_attribute_labels():
        raise ContractError("target training data must not carry attribute labels")
    if not len(target_train):
        raise ContractError("empty target training dataset")
    src_labels = source.attribute_matrix()
    src_feats = source.features
    tgt_feats = target_train.features
    if source.feature_dim != target_train.feature_dim:
        raise ContractError(
            f"source/target feature dims differ: {source.feature_dim} vs {target_train.feature_dim}"
        )

    encoder_src.freeze()
    classifier_src.freeze()
    encoder = clone_params(encoder_src, "target_encoder")
    classifier = clone_params(classifier_src, "adapt_classifier")
    feat_dim = encoder.spec.layer_dims[-1]
    disc_spec = default_specs(source.feature_dim, source.n_attributes,
                              feature_dim=feat_dim,
                              with_classifier=cfg.with_classifier)["discriminator"]
    seeds = np.random.SeedSequence(cfg.seed).generate_state(2)
    disc = init_mlp(disc_spec, int(seeds[0]), role="discriminator")
    batch_rng = np.random.default_rng(int(seeds[1]))

    src_batcher = _Batcher(len(source), batch_rng)
    tgt_batcher = _Batcher(len(target_train), batch_rng)

    m_params = _named(encoder, classifier) if cfg.with_classifier else _named(encoder)
    d_params = _named(disc)
    opt_m = AdamState()
    opt_d = AdamState()

    b = cfg.batch_size
    n_src_union = int(round(b * cfg.source_fraction_in_union_batch))
    n_tgt_union = b - n_src_union
    lsgan = cfg.variant is LossVariant.LSGAN_BOTH
    steps_per_epoch = max(1, -(-len(target_train) // b))

    def union_features(differentiable: bool):
        """Encode one union batch; returns (features, source index array)."""
        idx_s = src_batcher.draw(n_src_union) if n_src_union else None
        idx_t = tgt_batcher.draw(n_tgt_union)
        if differentiable:
            f_t = forward(encoder, Tensor(tgt_feats[idx_t]))
            if idx_s is None:
                return f_t, None
            f_s = forward(encoder, Tensor(src_feats[idx_s]))
            return ad.concat_rows(f_s, f_t), idx_s
        with no_grad():
            f_t = forward(encoder, Tensor(tgt_feats[idx_t]))
            if idx_s is None:
                return f_t, None
            f_s = forward(encoder, Tensor(src_feats[idx_s]))
            return ad.concat_rows(f_s, f_t), idx_s

    def run_hook(epoch):
        if eval_hook is None:
            return None, None
        metrics = eval_hook(encoder, classifier, epoch)
        return metrics.get("rank1"), metrics.get("map")

    trace = []
    rank1, mapv = run_hook(0)
    trace.append(TraceEpoch(0, float("nan"), float("nan"), float("nan"), rank1, mapv))

    for epoch in range(1, cfg.epochs + 1):
        d_vals, m_vals, a_vals = [], [], []
        for step in range(steps_per_epoch):
            where = f"at epoch {epoch}, step {step}"

            for _ in range(cfg.d_steps_per_m_step):
                with no_grad():
                    frozen = forward(encoder_src, Tensor(src_feats[src_batcher.draw(b)]))
                union, _ = union_features(differentiable=False)
                disc.zero_grads()
                d_src_logits = forward(disc, frozen.detach())
                d_union_logits = forward(disc, union.detach())
                pair = lsgan_losses if lsgan else adda_losses
                d_loss, _unused = pair(d_src_logits, d_union_logits)
                value = d_loss.item()
                _check_finite(value, f"discriminator loss {where}")
                backward(d_loss)
                adam_step(d_params, opt_d, cfg.learning_rate)
                d_vals.append(value)

            union, idx_s = union_features(differentiable=True)
            for t in m_params.values():
                t.zero_grad()
            disc.zero_grads()   # mapping update treats D as constant
            d_union_logits = forward(disc, union)
            m_adv = lsgan_mapping_loss(d_union_logits) if lsgan \
                else adda_mapping_loss(d_union_logits)
            if cfg.with_classifier:
                attr_idx = idx_s if idx_s is not None else src_batcher.draw(b)
                logits = forward(classifier, forward(encoder, Tensor(src_feats[attr_idx])))
                a_loss = attr_loss(logits, Tensor(src_labels[attr_idx]))
                total = combined_objective(m_adv, a_loss, cfg.alpha)
                a_vals.append(a_loss.item())
            else:
                total = m_adv
            m_value = m_adv.item()
            _check_finite(m_value, f"mapping loss {where}")
            if a_vals:
                _check_finite(a_vals[-1], f"attribute loss {where}")
            backward(total)
            adam_step(m_params, opt_m, cfg.learning_rate)
            m_vals.append(m_value)
            disc.zero_grads()   # discard gradients that leaked through D

        do_eval = epoch == cfg.epochs or (
            cfg.eval_every_n_epochs and epoch % cfg.eval_every_n_epochs == 0
        )
        rank1, mapv = run_hook(epoch) if do_eval else (None, None)
        trace.append(TraceEpoch(
            epoch, float(np.mean(d_vals)), float(np.mean(m_vals)),
            float(np.mean(a_vals)) if a_vals else float("nan"), rank1, mapv,
        ))
    return AdaptResult(encoder=encoder, classifier=classifier,
                       discriminator=disc, trace=trace)


def trace_to_csv(trace, path):
    """Write the per-epoch adaptation trace: epoch,d_loss,m_loss,attr_loss,rank1,map."""
    def cell(v):
        return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))

    lines = ["epoch,d_loss,m_loss,attr_loss,rank1,map"]
    for rec in trace:
        lines.append(",".join([
            str(rec.epoch), cell(rec.d_loss), cell(rec.m_loss),
            cell(rec.attr_loss), cell(rec.rank1), cell(rec.map),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

_MAGIC = b"ADPT"
_VERSION = 1


def save_checkpoint(paramsets, path):
    """Serialize parameter sets; tensors must be finite float32."""
    tensors = []
    seen = set()
    for ps in paramsets:
        for name in ps.param_names():
            full = f"{ps.role}/{name}"
            if full in seen:
                raise ContractError(f"duplicate tensor name {full}")
            seen.add(full)
            t = ps.params[name]
            if t.data.dtype != np.float32:
                raise ContractError(f"checkpoint tensors must be float32, got {t.data.dtype}")
            if not np.all(np.isfinite(t.data)):
                raise NumericalError(f"non-finite values in {full}")
            tensors.append((full, t.data))

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, data in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise OSError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into {role: ParamSet} with bit-identical tensors."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataFormatError(f"{path}: bad magic, not a checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        by_role = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(fh, 4 * size, f"payload of {name}")
            data = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
            role, _, pname = name.partition("/")
            if role not in by_role:
                by_role[role] = {}
            if not pname or pname in by_role[role]:
                raise DataFormatError(f"{path}: bad or duplicate tensor name {name!r}")
            by_role[role][pname] = data

    out = {}
    for role, params in by_role.items():
        n_layers = sum(1 for k in params if k.startswith("w"))
        dims = []
        for i in range(n_layers):
            if f"w{i}" not in params or f"b{i}" not in params:
                raise DataFormatError(f"{path}: role {role} missing layer {i} tensors")
            w = params[f"w{i}"]
            if not dims:
                dims.append(w.shape[0])
            dims.append(w.shape[1])
        spec = MlpSpec(tuple(dims))
        tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        out[role] = ParamSet(role=role, spec=spec, params=tensors)
    return out
