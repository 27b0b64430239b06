"""Retrieval evaluation: feature extraction, Euclidean ranking, CMC, mAP,
and attribute accuracy.

The ranking protocol is the standard cross-camera one: gallery items
sharing both person id and camera id with the query are discarded, ties
break stably by gallery index, and queries left without any relevant
gallery item are excluded from the means but counted in the report.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import Tensor, no_grad
from .errors import ConfigError, ContractError
from .networks import ParamSet, forward
from .synth import Dataset


@dataclass(frozen=True)
class RankingProtocol:
    exclude_same_camera_same_id: bool = True
    tie_break: str = "stable-gallery-index"
    max_rank: int = 10

    def __post_init__(self):
        if self.tie_break != "stable-gallery-index":
            raise ConfigError(f"unsupported tie break {self.tie_break!r}")
        if self.max_rank < 1:
            raise ConfigError("max_rank must be >= 1")


@dataclass(frozen=True)
class RetrievalMeta:
    """Person and camera ids for one query or gallery set."""

    person_ids: np.ndarray
    camera_ids: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "RetrievalMeta":
        if np.any(ds.person_ids < 0) or np.any(ds.camera_ids < 0):
            raise ContractError("retrieval metadata requires person and camera ids")
        return cls(ds.person_ids.copy(), ds.camera_ids.copy())


@dataclass
class EvalReport:
    """CMC curve, mAP and optional attribute accuracy for one evaluation run."""

    cmc: np.ndarray
    map: float
    n_queries_evaluated: int
    n_queries_excluded: int
    config_fingerprint: str
    attr_mean_accuracy: Optional[float] = None
    attr_accuracy: Optional[np.ndarray] = None

    def __post_init__(self):
        cmc = np.asarray(self.cmc, dtype=np.float64)
        if np.any(cmc < 0) or np.any(cmc > 1) or not 0 <= self.map <= 1:
            raise ContractError("cmc and map must lie in [0, 1]")
        if np.any(np.diff(cmc) < 0):
            raise ContractError("cmc must be nondecreasing in rank")
        self.cmc = cmc

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_csv(self, path):
        lines = ["metric,name,value"]
        for k, v in enumerate(self.cmc, start=1):
            lines.append(f"cmc,rank{k},{v!r}")
        lines.append(f"map,map,{self.map!r}")
        if self.attr_mean_accuracy is not None:
            lines.append(f"attr,mean_accuracy,{self.attr_mean_accuracy!r}")
            for j, v in enumerate(self.attr_accuracy):
                lines.append(f"attr,acc_{j},{float(v)!r}")
        lines.append(f"meta,n_queries_evaluated,{self.n_queries_evaluated}")
        lines.append(f"meta,n_queries_excluded,{self.n_queries_excluded}")
        lines.append(f"meta,config_fingerprint,{self.config_fingerprint}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> str:
        parts = [f"rank1={self.rank1:.4f}", f"map={self.map:.4f}"]
        for k in (5, 10):
            if k <= len(self.cmc):
                parts.append(f"rank{k}={self.cmc[k - 1]:.4f}")
        if self.attr_mean_accuracy is not None:
            parts.append(f"attr_acc={self.attr_mean_accuracy:.4f}")
        parts.append(f"queries={self.n_queries_evaluated}"
                     f"(+{self.n_queries_excluded} excluded)")
        return "  ".join(parts)


def extract_features(encoder: ParamSet, ds: Dataset) -> np.ndarray:
    """Encode every sample; rows follow dataset order, no classifier applied."""
    with no_grad():
        return forward(encoder, Tensor(ds.features)).data


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances via the clamped norm expansion, in float64."""
    q = np.asarray(q)
    g = np.asarray(g)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"feature dims differ: {q.shape} vs {g.shape}")
    return kernels.dist_matrix(q, g)


def _rank_queries(dist, query_meta: RetrievalMeta, gallery_meta: RetrievalMeta,
                  protocol: RankingProtocol):
    """First-hit rank (1-based, 0 if none) and AP per query."""
    nq, ng = dist.shape
    if len(query_meta.person_ids) != nq or len(gallery_meta.person_ids) != ng:
        raise ContractError("metadata sizes do not match the distance matrix")
    if protocol.max_rank > ng:
        raise ConfigError(f"max_rank {protocol.max_rank} exceeds gallery size {ng}")
    order = np.argsort(dist, axis=1, kind="stable")
    return kernels.ranking_stats(
        gallery_meta.person_ids[order], gallery_meta.camera_ids[order],
        query_meta.person_ids, query_meta.camera_ids,
        protocol.exclude_same_camera_same_id,
    )


def cmc_curve(dist, query_meta, gallery_meta, protocol: RankingProtocol) -> np.ndarray:
    """Fraction of evaluable queries whose first match lands within rank k, k=1..K."""
    first_hit, _ = _rank_queries(dist, query_meta, gallery_meta, protocol)
    valid = first_hit > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("no query has a relevant gallery item under the protocol")
    ranks = np.arange(1, protocol.max_rank + 1)
    return (first_hit[valid][:, None] <= ranks[None, :]).mean(axis=0)


def mean_ap(dist, query_meta, gallery_meta, protocol: RankingProtocol) -> float:
    """Mean over evaluable queries of average precision of the filtered ranking."""
    first_hit, ap = _rank_queries(dist, query_meta, gallery_meta, protocol)
    valid = first_hit > 0
    if not valid.any():
        raise ContractError("no query has a relevant gallery item under the protocol")
    return float(np.mean(ap[valid]))


def attr_accuracy(classifier: ParamSet, encoder: ParamSet, ds: Dataset,
                  threshold: float = 0.5):
    """Per-attribute and mean accuracy of sigmoid(C(M(x))) >= threshold."""
    labels = ds.attribute_matrix()
    with no_grad():
        logits = forward(classifier, forward(encoder, Tensor(ds.features))).data
    preds = kernels.sigmoid(logits.astype(np.float64)) >= threshold
    per_attr = (preds == (labels > 0.5)).mean(axis=0)
    return per_attr, float(per_attr.mean())


def evaluate_retrieval(encoder: ParamSet, query_ds: Dataset, gallery_ds: Dataset,
                       protocol: Optional[RankingProtocol] = None,
                       fingerprint: str = "") -> EvalReport:
    """Full retrieval evaluation of one encoder on a query/gallery pair."""
    protocol = protocol or RankingProtocol()
    qf = extract_features(encoder, query_ds)
    gf = extract_features(encoder, gallery_ds)
    dist = distance_matrix(qf, gf)
    qm = RetrievalMeta.from_dataset(query_ds)
    gm = RetrievalMeta.from_dataset(gallery_ds)
    first_hit, ap = _rank_queries(dist, qm, gm, protocol)
    valid = first_hit > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("no query has a relevant gallery item under the protocol")
    ranks = np.arange(1, protocol.max_rank + 1)
    cmc = (first_hit[valid][:, None] <= ranks[None, :]).mean(axis=0)
    return EvalReport(
        cmc=cmc,
        map=float(np.mean(ap[valid])),
        n_queries_evaluated=n_valid,
        n_queries_excluded=int(len(first_hit) - n_valid),
        config_fingerprint=fingerprint or protocol_fingerprint(protocol),
    )


def protocol_fingerprint(protocol: RankingProtocol, extra: str = "") -> str:
    text = f"{protocol.exclude_same_camera_same_id}|{protocol.tie_break}|{protocol.max_rank}|{extra}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]
