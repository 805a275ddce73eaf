"""Paired truthful/hallucinated features -> second-moment statistics.

The hallucination covariance is the *uncentered* second moment of the
difference vectors, ``sigma = D.T @ D / N``.  Centering is available as an
option but is off by default.  All accumulation happens in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "FeatureMatrix",
    "HallucinationCovariance",
    "MeanDifference",
    "CovarianceAccumulator",
    "pool_tokens",
    "difference_set",
    "hallucination_covariance",
    "mean_difference",
]

ROLES = ("positive", "negative", "difference")


class CovarianceError(ValueError):
    pass


class EmptySequence(CovarianceError):
    pass


class EmptySet(CovarianceError):
    pass


class ShapeMismatch(CovarianceError):
    pass


class RoleMismatch(CovarianceError):
    pass


class NotFinite(CovarianceError):
    pass


@dataclass
class FeatureMatrix:
    """``N x d`` pooled features, one sample per row.

    ``role`` is ``"positive"`` (hallucinated caption), ``"negative"``
    (truthful caption) or ``"difference"``.
    """

    data: np.ndarray
    role: str
    layer: int | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.role not in ROLES:
            raise RoleMismatch(f"unknown role {self.role!r}")
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ShapeMismatch(f"features must be N x d with d >= 1, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NotFinite("feature matrix contains non-finite entries")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class HallucinationCovariance:
    sigma: np.ndarray
    sample_count: int
    layer: int | None = None
    centered: bool = False

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]


@dataclass
class MeanDifference:
    mu: np.ndarray
    layer: int | None = None


def pool_tokens(sequence) -> np.ndarray:
    """Average a ``T x d`` block of hidden states over the token axis."""
    seq = np.asarray(sequence)
    if seq.ndim != 2:
        raise ShapeMismatch(f"expected T x d hidden states, got shape {seq.shape}")
    if seq.shape[0] == 0:
        raise EmptySequence("cannot pool an empty token sequence")
    return seq.mean(axis=0, dtype=np.float64)


def difference_set(pos: FeatureMatrix, neg: FeatureMatrix) -> FeatureMatrix:
    if pos.role != "positive" or neg.role != "negative":
        raise RoleMismatch(f"expected (positive, negative), got ({pos.role}, {neg.role})")
    if pos.data.shape != neg.data.shape:
        raise ShapeMismatch(f"positive {pos.data.shape} vs negative {neg.data.shape}")
    diff = pos.data.astype(np.float64) - neg.data.astype(np.float64)
    return FeatureMatrix(diff, "difference", layer=pos.layer if pos.layer is not None else neg.layer)


def _neumaier_add(total: np.ndarray, comp: np.ndarray, x: np.ndarray) -> None:
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp += np.where(big, (total - t) + x, (x - t) + total)
    total[...] = t


class CovarianceAccumulator:
    """Streaming ``D.T @ D`` and column sums over batches of difference rows.

    Each batch product is formed by BLAS in float64; batch results are
    combined with Neumaier-compensated summation so the batch order has no
    visible effect on the final statistics.  Accumulators over disjoint
    shards can be combined with :meth:`merge`.
    """

    def __init__(self, dim: int | None = None, layer: int | None = None):
        self.dim = dim
        self.layer = layer
        self.count = 0
        self._outer = self._outer_c = None
        self._sum = self._sum_c = None
        if dim is not None:
            self._alloc(dim)

    def _alloc(self, dim: int) -> None:
        self.dim = dim
        self._outer = np.zeros((dim, dim))
        self._outer_c = np.zeros((dim, dim))
        self._sum = np.zeros(dim)
        self._sum_c = np.zeros(dim)

    def add_batch(self, rows) -> "CovarianceAccumulator":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2:
            raise ShapeMismatch(f"batch must be 2-D, got shape {rows.shape}")
        if self._outer is None:
            self._alloc(rows.shape[1])
        if rows.shape[1] != self.dim:
            raise ShapeMismatch(f"batch has d={rows.shape[1]}, accumulator has d={self.dim}")
        if not np.all(np.isfinite(rows)):
            raise NotFinite("batch contains non-finite entries")
        if rows.shape[0] == 0:
            return self
        _neumaier_add(self._outer, self._outer_c, rows.T @ rows)
        _neumaier_add(self._sum, self._sum_c, rows.sum(axis=0))
        self.count += rows.shape[0]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if other.count == 0:
            return self
        if self._outer is None:
            self._alloc(other.dim)
        if other.dim != self.dim:
            raise ShapeMismatch(f"cannot merge d={other.dim} into d={self.dim}")
        _neumaier_add(self._outer, self._outer_c, other._outer)
        _neumaier_add(self._outer, self._outer_c, other._outer_c)
        _neumaier_add(self._sum, self._sum_c, other._sum)
        _neumaier_add(self._sum, self._sum_c, other._sum_c)
        self.count += other.count
        return self

    def mean(self) -> MeanDifference:
        if self.count == 0:
            raise EmptySet("no samples accumulated")
        return MeanDifference((self._sum + self._sum_c) / self.count, layer=self.layer)

    def finalize(self, center: bool = False) -> HallucinationCovariance:
        if self.count == 0:
            raise EmptySet("no samples accumulated")
        sigma = (self._outer + self._outer_c) / self.count
        if center:
            mu = (self._sum + self._sum_c) / self.count
            sigma = sigma - np.outer(mu, mu)
        sigma = 0.5 * (sigma + sigma.T)
        return HallucinationCovariance(sigma, self.count, layer=self.layer, centered=center)


def _rows_of(diffs: FeatureMatrix | np.ndarray) -> tuple[np.ndarray, int | None]:
    if isinstance(diffs, FeatureMatrix):
        if diffs.role != "difference":
            raise RoleMismatch(f"expected difference features, got {diffs.role}")
        return diffs.data, diffs.layer
    arr = np.asarray(diffs)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected N x d differences, got shape {arr.shape}")
    return arr, None


def hallucination_covariance(
    diffs: FeatureMatrix | np.ndarray,
    center: bool = False,
    batch_size: int = 8192,
) -> HallucinationCovariance:
    rows, layer = _rows_of(diffs)
    if rows.shape[0] == 0:
        raise EmptySet("need at least one difference vector")
    acc = CovarianceAccumulator(rows.shape[1], layer=layer)
    for start in range(0, rows.shape[0], batch_size):
        acc.add_batch(rows[start : start + batch_size])
    return acc.finalize(center=center)


def covariance_from_batches(
    batches: Iterable[np.ndarray], center: bool = False, layer: int | None = None
) -> HallucinationCovariance:
    acc = CovarianceAccumulator(layer=layer)
    for batch in batches:
        acc.add_batch(batch)
    return acc.finalize(center=center)


def mean_difference(diffs: FeatureMatrix | np.ndarray) -> MeanDifference:
    rows, layer = _rows_of(diffs)
    if rows.shape[0] == 0:
        raise EmptySet("need at least one difference vector")
    return MeanDifference(rows.mean(axis=0, dtype=np.float64), layer=layer)
