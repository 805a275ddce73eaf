"""Synthetic ground truth for the filtering pipeline.

Difference vectors are generated as a few planted orthonormal modes with
known strengths plus isotropic noise; the pipeline is then run end to end
and its output compared with what the planted structure predicts.  A toy
FFN block checks that folding the operator into the output projection is
the same as filtering the block's pre-bias output.
"""

from __future__ import annotations

import csv
import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .covariance import FeatureMatrix, hallucination_covariance, mean_difference
from .spectral import (
    DEFAULT_ETA,
    SpectralDecomposition,
    damping,
    eigendecompose,
    hard_projection,
    mean_shift_operator,
    select_alpha,
    suppression_operator,
)
from .tensorstore import Tensor
from .weightedit import correct_weight, normalize_orientation

__all__ = [
    "PlantConfig",
    "AlphaPolicy",
    "Tolerances",
    "ToyFFN",
    "plant_modes",
    "recovery_score",
    "toy_ffn_forward",
    "gelu",
    "end_to_end_check",
    "run_seeds",
    "mean_shift_comparison",
    "write_modes_csv",
]


class NonOrthonormalDirections(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


def random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``d x k`` matrix with orthonormal columns, Haar-distributed."""
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


@dataclass
class PlantConfig:
    d: int = 64
    n: int = 1000
    strengths: tuple[float, ...] = (10.0, 5.0, 2.0)
    noise_sigma: float = 0.1
    seed: int = 0
    # d x K, one planted direction per column; drawn from the seed when unset
    directions: np.ndarray | None = field(default=None, repr=False)
    # constant shift added to every difference (mean-subtraction experiments)
    offset: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.strengths = tuple(float(s) for s in self.strengths)
        if any(s <= 0 for s in self.strengths):
            raise ValueError("mode strengths must be positive")
        if list(self.strengths) != sorted(self.strengths, reverse=True):
            raise ValueError("mode strengths must be sorted in descending order")
        if len(self.strengths) > self.d:
            raise ValueError("more planted modes than dimensions")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n < 1 or self.d < 1:
            raise ValueError("need n >= 1 and d >= 1")
        if self.directions is not None:
            q = np.asarray(self.directions, dtype=np.float64)
            if q.shape != (self.d, len(self.strengths)):
                raise ShapeMismatch(f"directions must be {self.d} x {len(self.strengths)}, got {q.shape}")
            if np.max(np.abs(q.T @ q - np.eye(q.shape[1])), initial=0.0) > 1e-10:
                raise NonOrthonormalDirections("planted directions are not orthonormal to 1e-10")
            self.directions = q
        if self.offset is not None:
            self.offset = np.asarray(self.offset, dtype=np.float64)
            if self.offset.shape != (self.d,):
                raise ShapeMismatch(f"offset must have shape ({self.d},)")

    def _streams(self) -> tuple[np.random.Generator, np.random.Generator]:
        basis_seq, sample_seq = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(basis_seq), np.random.default_rng(sample_seq)

    def planted_directions(self) -> np.ndarray:
        if self.directions is not None:
            return self.directions
        return random_orthonormal(self.d, len(self.strengths), self._streams()[0])

    def replace(self, **changes) -> "PlantConfig":
        return dataclasses.replace(self, **changes)


def plant_modes(config: PlantConfig) -> tuple[FeatureMatrix, list[tuple[np.ndarray, float]]]:
    """Draw ``d_i = offset + sum_k c_ik q_k + eps_i`` with ``c_ik ~ N(0, s_k^2)``."""
    if config.n < config.d:
        warnings.warn(f"n={config.n} < d={config.d}: covariance will be rank deficient", stacklevel=2)
    q = config.planted_directions()
    s = np.asarray(config.strengths)
    _, rng = config._streams()
    coeffs = rng.standard_normal((config.n, s.size)) * s
    noise = rng.standard_normal((config.n, config.d)) * config.noise_sigma
    rows = coeffs @ q.T + noise
    if config.offset is not None:
        rows = rows + config.offset
    truth = [(q[:, k].copy(), float(s[k])) for k in range(s.size)]
    return FeatureMatrix(rows, "difference"), truth


def recovery_score(est: SpectralDecomposition, truth: Sequence[tuple[np.ndarray, float]]) -> list[float]:
    """Per planted mode, the cosine between it and the span of the top-K
    estimated eigenvectors (K = number of planted modes)."""
    k = len(truth)
    if k == 0:
        return []
    v = est.basis[:, :k]
    scores = []
    for direction, _ in truth:
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != (est.dim,):
            raise ShapeMismatch(f"planted direction has shape {direction.shape}, basis is {est.dim}-dim")
        cos = np.linalg.norm(v.T @ direction) / np.linalg.norm(direction)
        scores.append(float(min(cos, 1.0)))
    return scores


# ---------------------------------------------------------------------------
# toy FFN


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608 * (x + 0.044715 * x**3)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


@dataclass
class ToyFFN:
    """``w_out @ act(w_in @ x + b_in) + b_out``.

    ``w_in`` is ``(d_ff, d)``.  ``w_out`` is ``(d, d_ff)`` for the
    ``model_dim_rows`` orientation and ``(d_ff, d)`` for ``model_dim_cols``.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    activation: str = "gelu"
    orientation: str = "model_dim_rows"

    def __post_init__(self) -> None:
        self.orientation = normalize_orientation(self.orientation)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        d_ff, d = np.shape(self.w_in)
        out_shape = (d, d_ff) if self.orientation == "model_dim_rows" else (d_ff, d)
        if np.shape(self.b_in) != (d_ff,) or np.shape(self.b_out) != (d,) or np.shape(self.w_out) != out_shape:
            raise ShapeMismatch(
                f"inconsistent FFN shapes: w_in {np.shape(self.w_in)}, b_in {np.shape(self.b_in)}, "
                f"w_out {np.shape(self.w_out)}, b_out {np.shape(self.b_out)}"
            )
        for arr in (self.w_in, self.b_in, self.w_out, self.b_out):
            if not np.all(np.isfinite(arr)):
                raise ValueError("FFN weights must be finite")

    @property
    def d(self) -> int:
        return self.w_in.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w_in.shape[0]

    @classmethod
    def random(cls, d: int = 64, d_ff: int = 256, seed: int = 0, dtype=np.float32, **kwargs) -> "ToyFFN":
        rng = np.random.default_rng(seed)
        orientation = normalize_orientation(kwargs.pop("orientation", "model_dim_rows"))
        out_shape = (d, d_ff) if orientation == "model_dim_rows" else (d_ff, d)
        return cls(
            w_in=(rng.standard_normal((d_ff, d)) / np.sqrt(d)).astype(dtype),
            b_in=(0.1 * rng.standard_normal(d_ff)).astype(dtype),
            w_out=(rng.standard_normal(out_shape) / np.sqrt(d_ff)).astype(dtype),
            b_out=(0.1 * rng.standard_normal(d)).astype(dtype),
            orientation=orientation,
            **kwargs,
        )

    # Evaluated in float64 from the stored weights, so comparisons see the
    # rounding of the weights themselves rather than matmul accumulation.

    def hidden(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ACTIVATIONS[self.activation](x @ self.w_in.T.astype(np.float64) + self.b_in)

    def pre_bias(self, x: np.ndarray) -> np.ndarray:
        h = self.hidden(x)
        w = self.w_out.astype(np.float64)
        return h @ w.T if self.orientation == "model_dim_rows" else h @ w

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.pre_bias(x) + self.b_out

    def corrected(self, op, include_bias: bool = False) -> "ToyFFN":
        w_out = correct_weight(Tensor(self.w_out), op, self.orientation).array
        b_out = self.b_out
        if include_bias:
            b_out = (op.matrix @ self.b_out.astype(np.float64)).astype(self.b_out.dtype)
        return dataclasses.replace(self, w_out=w_out, b_out=b_out)


def toy_ffn_forward(ffn: ToyFFN, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != ffn.d:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, FFN expects {ffn.d}")
    return ffn.forward(x)


# ---------------------------------------------------------------------------
# end-to-end check


@dataclass
class AlphaPolicy:
    """How the operator is chosen: fixed ``alpha``, spectrum-driven ``eta``,
    or hard removal of the top ``k`` modes."""

    kind: str = "soft"
    alpha: float | None = None
    eta: float | None = None
    k: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("soft", "hard"):
            raise ValueError("policy kind must be soft or hard")
        if self.kind == "soft" and self.alpha is not None and self.eta is not None:
            raise ValueError("give alpha or eta, not both")
        if self.kind == "hard" and self.k is None:
            raise ValueError("hard policy needs k")

    def build(self, spec: SpectralDecomposition):
        if self.kind == "hard":
            return hard_projection(spec, self.k)
        if self.alpha is not None:
            return suppression_operator(spec, self.alpha)
        eta = DEFAULT_ETA if self.eta is None else self.eta
        return suppression_operator(spec, select_alpha(spec.lambda1, eta), eta=eta)


@dataclass
class Tolerances:
    recovery: float = 0.99
    eigenvalue_rel: float = 0.15
    variance_rel: float = 0.20
    # hard policy: residual variance allowed above zero, in units of noise_sigma**2
    noise_floor_factor: float = 4.0


def _mode_variance(rows: np.ndarray, direction: np.ndarray) -> float:
    return float(np.mean((rows @ direction) ** 2))


def end_to_end_check(
    config: PlantConfig, policy: AlphaPolicy | None = None, tol: Tolerances | None = None
) -> dict:
    """Plant, estimate, filter and compare against the planted truth."""
    policy = policy or AlphaPolicy()
    tol = tol or Tolerances()
    diffs, truth = plant_modes(config)
    spec = eigendecompose(hallucination_covariance(diffs))
    scores = recovery_score(spec, truth)
    op = policy.build(spec)
    filtered = op.apply(diffs.data)

    k_planted = len(truth)
    recovered = spec.eigenvalues[:k_planted]
    modes = []
    for j, (direction, strength) in enumerate(truth):
        lam = float(recovered[j])
        if op.kind == "soft":
            f = damping(lam, op.alpha)
        else:
            f = 0.0 if j < op.k else 1.0
        predicted = lam * f**2
        measured = _mode_variance(filtered, direction)
        unfiltered = _mode_variance(diffs.data, direction)
        if op.kind == "soft":
            var_ok = abs(measured / predicted - 1.0) <= tol.variance_rel if predicted > 0 else measured == 0
        else:
            var_ok = measured <= predicted * (1 + tol.variance_rel) + tol.noise_floor_factor * config.noise_sigma**2
        eig_rel = abs(lam / strength**2 - 1.0)
        modes.append(
            {
                "mode": j + 1,
                "strength": strength,
                "planted_variance": strength**2,
                "recovered_eigenvalue": lam,
                "eigenvalue_rel_error": eig_rel,
                "recovery_score": scores[j],
                "suppression": f,
                "unfiltered_variance": unfiltered,
                "measured_variance": measured,
                "predicted_variance": predicted,
                "checks": {
                    "recovery": scores[j] >= tol.recovery,
                    "eigenvalue": eig_rel <= tol.eigenvalue_rel,
                    "variance": bool(var_ok),
                },
            }
        )

    report = {
        "schema_version": 1,
        "config": {
            "d": config.d,
            "n": config.n,
            "strengths": list(config.strengths),
            "noise_sigma": config.noise_sigma,
            "seed": config.seed,
        },
        "policy": dataclasses.asdict(policy),
        "operator": op.describe(),
        "alpha": op.alpha,
        "eta": op.eta,
        "lambda1": spec.lambda1,
        "spectrum_head": [float(v) for v in spec.eigenvalues[: k_planted + 3]],
        "spectral_gap": float(spec.eigenvalues[k_planted] / spec.eigenvalues[k_planted - 1])
        if 0 < k_planted < spec.dim and spec.eigenvalues[k_planted - 1] > 0
        else None,
        "recovery_scores": scores,
        "modes": modes,
        "tolerances": dataclasses.asdict(tol),
    }
    if config.offset is not None:
        report["mean_shift"] = mean_shift_comparison(config, policy)
    report["passed"] = all(all(m["checks"].values()) for m in modes)
    return report


def run_seeds(config: PlantConfig, policy: AlphaPolicy | None = None, seeds: Sequence[int] = (0, 1, 2), tol=None) -> dict:
    """Run :func:`end_to_end_check` over several seeds and average the
    measured/predicted variance ratios."""
    reports = [end_to_end_check(config.replace(seed=s), policy, tol) for s in seeds]
    k = len(config.strengths)
    ratios = []
    for j in range(k):
        measured = np.mean([r["modes"][j]["measured_variance"] for r in reports])
        predicted = np.mean([r["modes"][j]["predicted_variance"] for r in reports])
        ratios.append(float(measured / predicted) if predicted > 0 else float("nan"))
    return {"seeds": list(seeds), "reports": reports, "variance_ratio": ratios}


def mean_shift_comparison(config: PlantConfig, policy: AlphaPolicy | None = None) -> dict:
    """How much of a constant planted offset each correction removes.

    Subtracting the mean difference removes the offset almost exactly; the
    soft filter built from the uncentered second moment only damps it, since
    the offset direction shows up there with eigenvalue ~ ``|offset|^2``.
    """
    if config.offset is None:
        raise ValueError("config has no offset")
    policy = policy or AlphaPolicy()
    diffs, _ = plant_modes(config)
    mu_true = config.offset
    norm = float(np.linalg.norm(mu_true))
    shifted = mean_shift_operator(mean_difference(diffs))
    residual_offset = shifted.apply(mu_true)  # what is left of the true offset
    soft = policy.build(eigendecompose(hallucination_covariance(diffs)))
    soft_offset = soft.apply(mu_true)
    return {
        "offset_norm": norm,
        "mean_shift_removed_fraction": 1.0 - float(np.linalg.norm(residual_offset)) / norm if norm else None,
        "soft_retained_fraction": float(np.linalg.norm(soft_offset)) / norm if norm else None,
        "soft_operator": soft.describe(),
    }


MODES_CSV_HEADER = ("mode", "strength", "recovered_eigenvalue", "suppression", "measured_variance", "predicted_variance")


def write_modes_csv(report: dict, path) -> None:
    """Per-mode measured vs predicted variance from an end-to-end report."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MODES_CSV_HEADER)
        for m in report["modes"]:
            writer.writerow([m["mode"]] + [repr(float(m[k])) for k in MODES_CSV_HEADER[1:]])
