"""Feed-forward networks for the three adaptation roles.

A ``ParamSet`` bundles the weight/bias tensors of one network role:
source encoder, target encoder, source classifier, adaptation classifier,
or domain discriminator. Classifier and discriminator emit logits; the
losses apply their own sigmoid where needed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

ROLES = (
    "source_encoder",
    "target_encoder",
    "source_classifier",
    "adapt_classifier",
    "discriminator",
)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus activation choices for one MLP."""

    layer_dims: tuple
    hidden_activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must be >=2 positive integers, got {dims}")
        if self.hidden_activation != "relu":
            raise ConfigError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("none", "sigmoid"):
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1


@dataclass
class ParamSet:
    """Named weight/bias tensors for one network role."""

    role: str
    spec: MlpSpec
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}")

    def tensors(self):
        """Tensors in layer order: w0, b0, w1, b1, ..."""
        return [self.params[name] for name in self.param_names()]

    def param_names(self):
        names = []
        for i in range(self.spec.n_layers):
            names.extend((f"w{i}", f"b{i}"))
        return names

    def freeze(self):
        for t in self.params.values():
            t.requires_grad = False

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def checksum(self) -> str:
        """SHA-256 over parameter names and raw bytes, for frozen-weight checks."""
        h = hashlib.sha256()
        for name in self.param_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()


def init_mlp(spec: MlpSpec, seed: int, role: str = "discriminator") -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)
        params[f"w{i}"] = Tensor(w, requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)
    return ParamSet(role=role, spec=spec, params=params)


def forward(params: ParamSet, x: Tensor) -> Tensor:
    """Standard MLP forward pass; differentiable when the params require grad."""
    spec = params.spec
    if x.data.ndim != 2 or x.data.shape[1] != spec.layer_dims[0]:
        raise ShapeError(
            f"{params.role} expects input width {spec.layer_dims[0]}, got {x.data.shape}"
        )
    h = x
    for i in range(spec.n_layers):
        h = ad.add_bias(ad.matmul(h, params.params[f"w{i}"]), params.params[f"b{i}"])
        if i < spec.n_layers - 1:
            h = ad.relu(h)
        elif spec.output_activation == "sigmoid":
            h = ad.sigmoid(h)
    return h


def clone_params(src: ParamSet, new_role: str) -> ParamSet:
    """Deep copy; updates to the clone never touch the source."""
    params = {
        name: Tensor(t.data.copy(), requires_grad=True) for name, t in src.params.items()
    }
    return ParamSet(role=new_role, spec=src.spec, params=params)


def default_specs(d_in: int, n_attributes: int, feature_dim: int = 32,
                  with_classifier: bool = True) -> dict:
    """Encoder/classifier/discriminator specs scaled from the 1024-wide originals.

    Classifier hidden is feature_dim/2 and the discriminator hidden is
    3·feature_dim/8 with the auxiliary classifier, feature_dim/8 without —
    at feature_dim=1024 that reproduces the 1024→512→m classifier and the
    1024→384→1 / 1024→128→1 discriminators.
    """
    if d_in < 1 or n_attributes < 1 or feature_dim < 1:
        raise ConfigError(
            f"degenerate dimensions: d_in={d_in}, m={n_attributes}, feature_dim={feature_dim}"
        )
    disc_hidden = (3 * feature_dim) // 8 if with_classifier else feature_dim // 8
    return {
        "encoder": MlpSpec((d_in, 2 * feature_dim, feature_dim)),
        "classifier": MlpSpec((feature_dim, max(1, feature_dim // 2), n_attributes)),
        "discriminator": MlpSpec((feature_dim, max(1, disc_hidden), 1)),
    }
