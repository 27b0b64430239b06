"""Seeded synthetic source/target domain pairs, plus dataset CSV I/O.

The generator uses a linear-Gaussian latent recipe so the ground truth is
exactly known and the domain shift is a single controllable dial:

    x = R_domain · (W·a + u + ε + camera_offset) + t_domain

with W a fixed seeded attribute embedding, u a per-identity nuisance
vector, ε per-sample Gaussian noise, and a per-camera offset for target
samples (both scaled by noise_sigma). The source domain uses R = I, t = 0;
the target domain rotates every consecutive coordinate pair by the shift
angle and translates by a seeded direction times the translation scale.

Source samples are each their own identity (one image per person, as in
attribute-recognition datasets) and always carry attributes. Target train
samples carry no labels at all; target query/gallery samples carry person
and camera ids (and attributes, for evaluation only). The held-out source
rows used for attribute accuracy reuse the 'query' split tag.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataFormatError

_IDENTITY_SIGMA = 0.5    # nuisance scale shared by both domains
_SOURCE_EVAL_FRACTION = 0.25

DOMAINS = ("source", "target")
SPLITS = ("train", "query", "gallery")


@dataclass
class Sample:
    """Row view over one dataset entry; absent labels are None."""

    sample_id: int
    domain: str
    split: str
    person_id: Optional[int]
    camera_id: Optional[int]
    attributes: Optional[np.ndarray]
    features: np.ndarray


class Dataset:
    """Columnar sample store. Absent person/camera ids are -1; an attribute
    row of all -1 means that sample carries no attributes, and
    ``attributes is None`` means the file had no attribute columns at all."""

    def __init__(self, sample_ids, domains, splits, person_ids, camera_ids,
                 attributes, features):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.domains = np.asarray(domains, dtype="U6")
        self.splits = np.asarray(splits, dtype="U7")
        self.person_ids = np.asarray(person_ids, dtype=np.int64)
        self.camera_ids = np.asarray(camera_ids, dtype=np.int64)
        self.attributes = None if attributes is None else np.asarray(attributes, dtype=np.int8)
        self.features = np.asarray(features, dtype=np.float32)
        n = len(self.sample_ids)
        for name in ("domains", "splits", "person_ids", "camera_ids", "features"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"dataset column {name} has length != {n}")
        if self.attributes is not None and len(self.attributes) != n:
            raise ContractError(f"dataset attribute column has length != {n}")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def n_attributes(self) -> int:
        return 0 if self.attributes is None else self.attributes.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def row(self, i: int) -> Sample:
        attrs = None
        if self.attributes is not None and self.attributes[i, 0] >= 0:
            attrs = self.attributes[i].copy()
        return Sample(
            sample_id=int(self.sample_ids[i]),
            domain=str(self.domains[i]),
            split=str(self.splits[i]),
            person_id=int(self.person_ids[i]) if self.person_ids[i] >= 0 else None,
            camera_id=int(self.camera_ids[i]) if self.camera_ids[i] >= 0 else None,
            attributes=attrs,
            features=self.features[i].copy(),
        )

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            self.sample_ids[mask], self.domains[mask], self.splits[mask],
            self.person_ids[mask], self.camera_ids[mask],
            None if self.attributes is None else self.attributes[mask],
            self.features[mask],
        )

    def filter_split(self, split: str) -> "Dataset":
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return self.subset(self.splits == split)

    def has_attribute_labels(self) -> bool:
        """True if any row carries attribute values."""
        return self.attributes is not None and bool(np.any(self.attributes[:, 0] >= 0))

    def attribute_matrix(self) -> np.ndarray:
        """Attributes of all rows as float32 {0,1}; raises if any row lacks them."""
        if self.attributes is None or np.any(self.attributes[:, 0] < 0):
            raise ContractError("dataset rows without attribute labels")
        return self.attributes.astype(np.float32)


@dataclass(frozen=True)
class DomainShiftSpec:
    """All dials for one synthetic source/target pair."""

    m: int = 8
    d_in: int = 32
    shift_rotation_angle: float = 0.5
    shift_translation_scale: float = 1.0
    noise_sigma: float = 0.3
    n_source: int = 2000
    n_identities: int = 100
    samples_per_identity: int = 6
    n_cameras: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.d_in < 1:
            raise ConfigError(f"m and d_in must be positive, got {self.m}, {self.d_in}")
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be >= 2 for cross-camera retrieval")
        if self.samples_per_identity < 2:
            raise ConfigError("samples_per_identity must be >= 2")
        if self.n_source < 1 or self.n_identities < 1:
            raise ConfigError("sample and identity counts must be positive")
        if self.m <= 62 and self.n_identities > 2**self.m:
            raise ConfigError(
                f"{self.n_identities} identities cannot have distinct "
                f"attribute vectors with m={self.m}"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


@dataclass
class DomainPair:
    source: Dataset
    target: Dataset


def _rotation_matrix(d: int, angle: float) -> np.ndarray:
    """Block-diagonal Givens rotation of every consecutive coordinate pair."""
    r = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, d - 1, 2):
        r[i, i] = c
        r[i, i + 1] = -s
        r[i + 1, i] = s
        r[i + 1, i + 1] = c
    return r


def _identity_attributes(rng, n_identities: int, m: int) -> np.ndarray:
    """Distinct binary attribute vectors, one per identity."""
    if m <= 20:
        codes = rng.choice(2**m, size=n_identities, replace=False)
    else:
        seen, codes = set(), []
        while len(codes) < n_identities:
            c = int(rng.integers(0, 2**m))
            if c not in seen:
                seen.add(c)
                codes.append(c)
        codes = np.asarray(codes)
    bits = (codes[:, None] >> np.arange(m)[None, :]) & 1
    return bits.astype(np.int8)


def generate_pair(spec: DomainShiftSpec) -> DomainPair:
    """Build one seeded source/target pair with known latent structure."""
    rng = np.random.default_rng(spec.seed)
    m, d = spec.m, spec.d_in

    w = rng.normal(0.0, 1.0, size=(m, d))
    rot = _rotation_matrix(d, spec.shift_rotation_angle)
    t_dir = rng.normal(0.0, 1.0, size=d)
    t_vec = t_dir / np.linalg.norm(t_dir) * spec.shift_translation_scale
    cam_offsets = rng.normal(0.0, 1.0, size=(spec.n_cameras, d)) * spec.noise_sigma

    def source_block(n):
        a = rng.integers(0, 2, size=(n, m)).astype(np.int8)
        u = rng.normal(0.0, _IDENTITY_SIGMA, size=(n, d))
        eps = rng.normal(0.0, 1.0, size=(n, d)) * spec.noise_sigma
        x = a.astype(np.float64) @ w + u + eps
        return a, x.astype(np.float32)

    n_train = spec.n_source
    n_eval = max(1, int(round(n_train * _SOURCE_EVAL_FRACTION)))
    a_train, x_train = source_block(n_train)
    a_eval, x_eval = source_block(n_eval)
    n_src = n_train + n_eval
    source = Dataset(
        sample_ids=np.arange(n_src),
        domains=np.full(n_src, "source"),
        splits=np.concatenate([np.full(n_train, "train"), np.full(n_eval, "query")]),
        person_ids=np.full(n_src, -1),
        camera_ids=np.full(n_src, -1),
        attributes=np.concatenate([a_train, a_eval], axis=0),
        features=np.concatenate([x_train, x_eval], axis=0),
    )

    a_ids = _identity_attributes(rng, spec.n_identities, m)
    u_ids = rng.normal(0.0, _IDENTITY_SIGMA, size=(spec.n_identities, d))
    s = spec.samples_per_identity
    n_tgt = spec.n_identities * s
    pid = np.repeat(np.arange(spec.n_identities), s)
    within = np.tile(np.arange(s), spec.n_identities)
    cam = within % spec.n_cameras

    # Per identity: sample 0 is the query, the next max(1, (s-1)//2) samples
    # form the gallery (always at least one on a different camera), the rest
    # train. Splits are disjoint in samples, shared in identities.
    n_gallery = max(1, (s - 1) // 2)
    splits = np.full(n_tgt, "train", dtype="U7")
    splits[within == 0] = "query"
    splits[(within >= 1) & (within <= n_gallery)] = "gallery"

    eps = rng.normal(0.0, 1.0, size=(n_tgt, d)) * spec.noise_sigma
    base = a_ids[pid].astype(np.float64) @ w + u_ids[pid] + eps + cam_offsets[cam]
    x_tgt = (base @ rot.T + t_vec).astype(np.float32)

    attrs = a_ids[pid].copy()
    person_ids = pid.astype(np.int64)
    camera_ids = cam.astype(np.int64)
    train_rows = splits == "train"
    attrs[train_rows] = -1           # unsupervised contract: no labels in training rows
    person_ids = np.where(train_rows, -1, person_ids)
    camera_ids = np.where(train_rows, -1, camera_ids)

    target = Dataset(
        sample_ids=np.arange(n_tgt),
        domains=np.full(n_tgt, "target"),
        splits=splits,
        person_ids=person_ids,
        camera_ids=camera_ids,
        attributes=attrs,
        features=x_tgt,
    )
    return DomainPair(source=source, target=target)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _header(m: int, d: int):
    cols = ["sample_id", "domain", "split", "person_id", "camera_id"]
    cols += [f"a_{j}" for j in range(m)]
    cols += [f"x_{j}" for j in range(d)]
    return cols


def _fmt_f32(v: np.float32) -> str:
    # numpy's str() of a float32 scalar is the shortest round-trip decimal
    return str(v)


def write_csv(ds: Dataset, path):
    """Write a dataset in the canonical schema; absent labels become -1."""
    m, d = ds.n_attributes, ds.feature_dim
    lines = [",".join(_header(m, d))]
    attrs = ds.attributes
    for i in range(len(ds)):
        fields = [
            str(int(ds.sample_ids[i])), str(ds.domains[i]), str(ds.splits[i]),
            str(int(ds.person_ids[i])), str(int(ds.camera_ids[i])),
        ]
        if m:
            fields.extend(str(int(a)) for a in attrs[i])
        fields.extend(_fmt_f32(v) for v in ds.features[i])
        lines.append(",".join(fields))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> Dataset:
    """Read a ``.samples.csv`` file; attribute columns may be absent entirely."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file, header row is mandatory")
    header = lines[0].split(",")
    fixed = ["sample_id", "domain", "split", "person_id", "camera_id"]
    if header[:5] != fixed:
        raise DataFormatError(f"{path}: header must start with {','.join(fixed)}")
    rest = header[5:]
    m = 0
    while m < len(rest) and rest[m] == f"a_{m}":
        m += 1
    feat_names = rest[m:]
    if not feat_names or any(name != f"x_{j}" for j, name in enumerate(feat_names)):
        raise DataFormatError(f"{path}: feature columns must be x_0..x_(d-1) after a_*")
    d = len(feat_names)
    ncols = 5 + m + d

    n = len(lines) - 1
    sample_ids = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype="U6")
    splits = np.empty(n, dtype="U7")
    person_ids = np.empty(n, dtype=np.int64)
    camera_ids = np.empty(n, dtype=np.int64)
    attributes = np.empty((n, m), dtype=np.int8) if m else None
    features = np.empty((n, d), dtype=np.float32)

    for r, line in enumerate(lines[1:]):
        lineno = r + 2
        fields = line.split(",")
        if len(fields) != ncols:
            raise DataFormatError(
                f"{path}:{lineno}: expected {ncols} fields, got {len(fields)}"
            )
        try:
            sample_ids[r] = int(fields[0])
            person_ids[r] = int(fields[3])
            camera_ids[r] = int(fields[4])
            if m:
                row = [int(v) for v in fields[5:5 + m]]
            features[r] = [np.float32(v) for v in fields[5 + m:]]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if fields[1] not in DOMAINS:
            raise DataFormatError(f"{path}:{lineno}: unknown domain {fields[1]!r}")
        if fields[2] not in SPLITS:
            raise DataFormatError(f"{path}:{lineno}: unknown split {fields[2]!r}")
        domains[r] = fields[1]
        splits[r] = fields[2]
        if m:
            if all(v == -1 for v in row):
                attributes[r] = -1
            elif all(v in (0, 1) for v in row):
                attributes[r] = row
            else:
                raise DataFormatError(
                    f"{path}:{lineno}: attributes must be all -1 or all 0/1"
                )
    return Dataset(sample_ids, domains, splits, person_ids, camera_ids,
                   attributes, features)
