"""Eigen-analysis of the hallucination covariance and suppression operators.

The soft filter damps eigenmode ``j`` by ``1 / (1 + alpha * lambda_j)``::

    P = Q diag(1 / (1 + alpha * Lambda)) Q.T

so strong modes shrink the most while the null space is left alone.  Hard
projection (``I - V_k V_k.T``), the mean-shift baseline and the SVD variant
live here too, all returning :class:`SuppressionOperator`.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .covariance import FeatureMatrix, HallucinationCovariance, MeanDifference, _rows_of

__all__ = [
    "SpectralDecomposition",
    "SuppressionOperator",
    "FilterConfig",
    "PRESETS",
    "DEFAULT_ETA",
    "eigendecompose",
    "damping",
    "suppression_operator",
    "soft_operator",
    "transformed_spectrum",
    "select_alpha",
    "hard_projection",
    "identity_operator",
    "mean_shift_operator",
    "svd_modes",
    "svd_operator",
    "apply_spectral_function",
    "spectrum_rows",
    "write_spectrum_csv",
    "spectrum_summary",
]

# operating points used for captioning (CHAIR / LLaVA-Bench) and VQA (POPE / A-OKVQA)
PRESETS = {"chair": 70.0, "vqa": 6.0}
DEFAULT_ETA = 0.1

CLIP_RTOL = 1e-10
SPECTRUM_CSV_HEADER = ("index", "eigenvalue", "damped", "transformed")


class SpectralError(ValueError):
    pass


class ConvergenceFailure(SpectralError):
    pass


class NotFinite(SpectralError):
    pass


class NegativeEigenvalue(SpectralError):
    """A negative eigenvalue too large to be rounding noise."""


class DegenerateSpectrum(SpectralError):
    pass


class KOutOfRange(SpectralError):
    pass


def _fingerprint(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()[:16]


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # largest-|entry| of each column made positive; near-ties go to the lowest index
    mags = np.abs(basis)
    top = mags.max(axis=0, keepdims=True)
    pivot = np.argmax(mags >= top * (1.0 - 1e-9), axis=0)
    signs = np.sign(basis[pivot, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def _sym_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SpectralError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotFinite("matrix contains non-finite entries")
    a = 0.5 * (a + a.T)
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    order = np.argsort(-values, kind="stable")
    return values[order], _fix_signs(vectors[:, order])


@dataclass
class SpectralDecomposition:
    """Orthonormal eigenbasis (columns of ``basis``) with eigenvalues sorted
    in descending order."""

    basis: np.ndarray
    eigenvalues: np.ndarray
    clipped_count: int = 0
    source: str = "covariance"
    layer: int | None = None

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0]) if self.eigenvalues.size else 0.0

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    def rank(self, rtol: float = 1e-10) -> int:
        if self.lambda1 <= 0:
            return 0
        return int(np.count_nonzero(self.eigenvalues > rtol * self.lambda1))

    def fingerprint(self) -> str:
        return _fingerprint(self.eigenvalues)

    def truncated(self, rtol: float = CLIP_RTOL) -> "SpectralDecomposition":
        """Copy with eigenvalues at or below ``rtol * lambda_1`` set to zero,
        so numerically-null modes are treated as exactly null."""
        values = np.where(self.eigenvalues > rtol * max(self.lambda1, 0.0), self.eigenvalues, 0.0)
        return SpectralDecomposition(self.basis, values, self.clipped_count, self.source, self.layer)

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


def eigendecompose(cov: HallucinationCovariance | np.ndarray) -> SpectralDecomposition:
    """Sorted eigendecomposition of a PSD covariance.

    Negative eigenvalues no larger in magnitude than ``1e-10 * lambda_1`` are
    rounding noise and are clipped to zero; anything more negative means the
    input was not a covariance and raises :class:`NegativeEigenvalue`.
    """
    sigma = cov.sigma if isinstance(cov, HallucinationCovariance) else cov
    layer = cov.layer if isinstance(cov, HallucinationCovariance) else None
    values, vectors = _sym_eigh(sigma)
    floor = -CLIP_RTOL * max(float(values[0]), 0.0) if values.size else 0.0
    negative = values < 0
    if np.any(values < floor):
        raise NegativeEigenvalue(
            f"eigenvalue {values.min():.3e} is below the clipping floor {floor:.3e}"
        )
    clipped = int(np.count_nonzero(negative))
    values = np.where(negative, 0.0, values)
    return SpectralDecomposition(vectors, values, clipped_count=clipped, layer=layer)


def damping(lam, alpha):
    """``1 / (1 + alpha * lam)``; scalar or array ``lam``."""
    lam_arr = np.asarray(lam, dtype=np.float64)
    if alpha < 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
    if np.any(lam_arr < 0):
        raise ValueError("eigenvalues must be >= 0")
    out = 1.0 / (1.0 + alpha * lam_arr)
    return float(out) if out.ndim == 0 else out


def transformed_spectrum(eigenvalues, alpha: float) -> np.ndarray:
    """Eigenvalues of ``P Sigma P``: ``lambda / (1 + alpha * lambda)**2``."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    f = damping(lam, alpha)
    return lam * np.asarray(f) ** 2


def select_alpha(lambda1: float, eta: float = DEFAULT_ETA) -> float:
    """Damping strength that leaves a fraction ``eta`` of the top mode."""
    if not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if not lambda1 > 0 or not math.isfinite(lambda1):
        raise DegenerateSpectrum(f"leading eigenvalue must be positive, got {lambda1}")
    return (1.0 - eta) / (eta * lambda1)


@dataclass
class FilterConfig:
    alpha: float | None = None
    eta: float | None = None
    hard_k: int | None = None

    def __post_init__(self) -> None:
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.eta is not None and not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.hard_k is not None and self.hard_k < 0:
            raise KOutOfRange("hard_k must be >= 0")

    def resolve_alpha(self, spec: SpectralDecomposition) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return select_alpha(spec.lambda1, DEFAULT_ETA if self.eta is None else self.eta)


@dataclass
class SuppressionOperator:
    """A symmetric ``d x d`` operator plus what it was built from.

    ``kind`` is one of ``soft``, ``hard``, ``svd``, ``mean_shift``,
    ``identity``.  A ``mean_shift`` operator keeps ``matrix = I`` and acts
    on features by subtracting ``mu``; it cannot be folded into weights.
    """

    matrix: np.ndarray
    kind: str
    alpha: float | None = None
    k: int | None = None
    eta: float | None = None
    mu: np.ndarray | None = None
    lambda1: float | None = None
    fingerprint: str | None = None
    filter_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def foldable(self) -> bool:
        return self.kind != "mean_shift"

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()).hexdigest()

    def apply(self, features) -> np.ndarray:
        """Filter row-stacked features (``N x d``) or a single vector."""
        x = np.asarray(features, dtype=np.float64)
        if self.kind == "mean_shift":
            return x - self.mu
        return x @ self.matrix  # symmetric, so this is P @ x per row

    def describe(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim, "checksum": self.checksum()}
        for key in ("alpha", "k", "eta", "lambda1", "fingerprint"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _spectral_operator(spec: SpectralDecomposition, values: np.ndarray) -> np.ndarray:
    # I - Q (1 - f) Q.T: modes with f == 1 contribute nothing, so alpha = 0
    # gives the identity exactly rather than Q Q.T up to rounding
    q = spec.basis
    return _sym(np.eye(spec.dim) - (q * (1.0 - values)) @ q.T)


def suppression_operator(
    spec: SpectralDecomposition, alpha: float, eta: float | None = None
) -> SuppressionOperator:
    f = np.asarray(damping(spec.eigenvalues, alpha))
    return SuppressionOperator(
        _spectral_operator(spec, f),
        kind="soft",
        alpha=float(alpha),
        eta=eta,
        lambda1=spec.lambda1,
        fingerprint=spec.fingerprint(),
        filter_values=f,
    )


def soft_operator(spec: SpectralDecomposition, config: FilterConfig) -> SuppressionOperator:
    eta = None if config.alpha is not None else (DEFAULT_ETA if config.eta is None else config.eta)
    return suppression_operator(spec, config.resolve_alpha(spec), eta=eta)


def hard_projection(spec: SpectralDecomposition, k: int) -> SuppressionOperator:
    """``I - V_k V_k.T`` over the top ``k`` eigenvectors."""
    d = spec.dim
    if not 0 <= k <= d:
        raise KOutOfRange(f"k={k} outside [0, {d}]")
    v = spec.basis[:, :k]
    p = np.zeros((d, d)) if k == d else _sym(np.eye(d) - v @ v.T)
    values = np.ones(d)
    values[:k] = 0.0
    return SuppressionOperator(
        p, kind="hard", k=k, lambda1=spec.lambda1, fingerprint=spec.fingerprint(), filter_values=values
    )


def identity_operator(d: int) -> SuppressionOperator:
    return SuppressionOperator(np.eye(d), kind="identity", filter_values=np.ones(d))


def mean_shift_operator(mu: MeanDifference | np.ndarray) -> SuppressionOperator:
    vec = np.asarray(mu.mu if isinstance(mu, MeanDifference) else mu, dtype=np.float64)
    return SuppressionOperator(np.eye(vec.size), kind="mean_shift", mu=vec)


def svd_modes(diffs: FeatureMatrix | np.ndarray) -> SpectralDecomposition:
    """Right singular vectors of the difference matrix, with ``s**2 / N`` as
    pseudo-eigenvalues so the soft filter applies unchanged."""
    rows, layer = _rows_of(diffs)
    rows = np.asarray(rows, dtype=np.float64)
    n, d = rows.shape
    if n == 0:
        raise SpectralError("need at least one difference vector")
    if not np.all(np.isfinite(rows)):
        raise NotFinite("difference matrix contains non-finite entries")
    try:
        _, s, vt = np.linalg.svd(rows, full_matrices=n < d)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    values = np.zeros(d)
    values[: s.size] = s**2 / n
    basis = vt.T
    if basis.shape[1] < d:  # n >= d always yields a full basis; guard anyway
        raise ConvergenceFailure("SVD did not return a full right basis")
    order = np.argsort(-values, kind="stable")
    return SpectralDecomposition(_fix_signs(basis[:, order]), values[order], source="svd", layer=layer)


def svd_operator(spec: SpectralDecomposition, alpha: float, k: int | None = None) -> SuppressionOperator:
    """Soft filter over SVD modes; with ``k`` set only the top ``k`` are damped."""
    d = spec.dim
    k = d if k is None else k
    if not 0 <= k <= d:
        raise KOutOfRange(f"k={k} outside [0, {d}]")
    f = np.ones(d)
    f[:k] = damping(spec.eigenvalues[:k], alpha)
    return SuppressionOperator(
        _spectral_operator(spec, f),
        kind="svd",
        alpha=float(alpha),
        k=k,
        lambda1=spec.lambda1,
        fingerprint=spec.fingerprint(),
        filter_values=f,
    )


def apply_spectral_function(matrix, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """``Q f(Lambda) Q.T`` for a symmetric matrix; ``f`` maps the eigenvalue
    vector elementwise."""
    values, vectors = _sym_eigh(matrix)
    fv = np.broadcast_to(np.asarray(f(values), dtype=np.float64), values.shape)
    return _sym((vectors * fv) @ vectors.T)


# ---------------------------------------------------------------------------
# spectrum export


def spectrum_rows(spec: SpectralDecomposition, alpha: float) -> list[tuple[int, float, float, float]]:
    lam = spec.eigenvalues
    f = np.asarray(damping(lam, alpha))
    g = transformed_spectrum(lam, alpha)
    return [(j + 1, float(lam[j]), float(f[j]), float(g[j])) for j in range(lam.size)]


def write_spectrum_csv(path: str | Path, spec: SpectralDecomposition, alpha: float) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPECTRUM_CSV_HEADER)
        for idx, lam, f, g in spectrum_rows(spec, alpha):
            writer.writerow([idx, repr(lam), repr(f), repr(g)])


def spectrum_summary(spec: SpectralDecomposition, alpha: float | None, eta: float | None = None) -> dict:
    out = {
        "lambda1": spec.lambda1,
        "trace": spec.trace,
        "clipped_count": spec.clipped_count,
        "rank": spec.rank(),
        "dim": spec.dim,
        "alpha": alpha,
        "eta": eta,
        "fingerprint": spec.fingerprint(),
    }
    if spec.trace > 0:
        out["top_mode_share"] = spec.lambda1 / spec.trace
    return out
