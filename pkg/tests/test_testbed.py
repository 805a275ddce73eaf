import warnings

import numpy as np
import pytest

from specfilter import spectral as sp
from specfilter import testbed as tb
from specfilter.covariance import hallucination_covariance


def spectrum(config):
    diffs, truth = tb.plant_modes(config)
    return sp.eigendecompose(hallucination_covariance(diffs)), truth


def test_plant_is_deterministic():
    cfg = tb.PlantConfig(d=16, n=50, seed=11)
    a, _ = tb.plant_modes(cfg)
    b, _ = tb.plant_modes(cfg)
    assert np.array_equal(a.data, b.data)
    c, _ = tb.plant_modes(cfg.replace(seed=12))
    assert not np.array_equal(a.data, c.data)


def test_plant_config_validation():
    with pytest.raises(ValueError):
        tb.PlantConfig(strengths=(2.0, 5.0))
    with pytest.raises(ValueError):
        tb.PlantConfig(strengths=(1.0, -1.0))
    with pytest.raises(tb.NonOrthonormalDirections):
        tb.PlantConfig(d=2, strengths=(2.0, 1.0), directions=np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(tb.ShapeMismatch):
        tb.PlantConfig(d=3, strengths=(1.0,), directions=np.eye(2)[:, :1])
    with pytest.warns(UserWarning, match="rank deficient"):
        tb.plant_modes(tb.PlantConfig(d=8, n=4, strengths=(1.0,)))


def test_random_orthonormal():
    q = tb.random_orthonormal(20, 5, np.random.default_rng(0))
    np.testing.assert_allclose(q.T @ q, np.eye(5), atol=1e-12)


def test_rank_one_eigenvalue_converges():
    spec, truth = spectrum(tb.PlantConfig(d=16, n=5000, strengths=(3.0,), noise_sigma=0.0, seed=1))
    assert spec.lambda1 == pytest.approx(9.0, rel=0.10)
    assert spec.rank() == 1
    assert tb.recovery_score(spec, truth)[0] == pytest.approx(1.0, abs=1e-10)


def test_isotropic_noise_has_flat_spectrum():
    d = 32
    spec, _ = spectrum(tb.PlantConfig(d=d, n=10 * d, strengths=(), noise_sigma=1.0, seed=2))
    assert spec.trace / d == pytest.approx(1.0, rel=0.1)
    # at n = 10 d the sample edges sit near (1 +- sqrt(0.1))^2, a ratio of about 3.7
    edge = ((1 + np.sqrt(0.1)) / (1 - np.sqrt(0.1))) ** 2
    assert 2.0 < spec.eigenvalues[0] / spec.eigenvalues[-1] <= 1.25 * edge
    spec, _ = spectrum(tb.PlantConfig(d=d, n=50 * d, strengths=(), noise_sigma=1.0, seed=2))
    assert spec.eigenvalues[0] / spec.eigenvalues[-1] <= 2.0


def test_recovery_score_examples():
    d = 6
    q = np.eye(d)
    spec = sp.eigendecompose(np.diag([6.0, 5.0, 4.0, 3.0, 2.0, 1.0]))
    truth = [(q[:, 0], 1.0), (q[:, 1], 1.0)]
    assert tb.recovery_score(spec, truth) == [1.0, 1.0]
    assert tb.recovery_score(spec, [(q[:, 5], 1.0)]) == [0.0]
    with pytest.raises(tb.ShapeMismatch):
        tb.recovery_score(spec, [(np.ones(3), 1.0)])


def test_default_config_recovers_modes():
    spec, truth = spectrum(tb.PlantConfig())
    assert all(s >= 0.99 for s in tb.recovery_score(spec, truth))
    for lam, (_, s) in zip(spec.eigenvalues, truth):
        assert lam == pytest.approx(s**2, rel=0.15)
    # gap between the planted modes and the noise floor
    assert spec.eigenvalues[3] / spec.eigenvalues[2] <= 0.05


# --- toy FFN ---------------------------------------------------------------


def test_gelu_relu():
    assert tb.gelu(np.array([0.0]))[0] == 0.0
    assert tb.gelu(np.array([10.0]))[0] == pytest.approx(10.0)
    assert tb.gelu(np.array([-10.0]))[0] == pytest.approx(0.0, abs=1e-12)
    assert tb.relu(np.array([-1.0, 2.0])).tolist() == [0.0, 2.0]


def test_toy_ffn_examples():
    d = 5
    z = tb.ToyFFN(np.zeros((7, d)), np.zeros(7), np.zeros((d, 7)), np.zeros(d))
    assert not tb.toy_ffn_forward(z, np.ones(d)).any()
    ident = tb.ToyFFN(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d), activation="relu")
    x = np.abs(np.random.default_rng(0).standard_normal(d))
    np.testing.assert_array_equal(tb.toy_ffn_forward(ident, x), x)
    with pytest.raises(tb.ShapeMismatch):
        tb.toy_ffn_forward(ident, np.ones(d + 1))
    with pytest.raises(tb.ShapeMismatch):
        tb.ToyFFN(np.eye(d), np.zeros(d), np.eye(d + 1), np.zeros(d))
    with pytest.raises(ValueError):
        tb.ToyFFN(np.eye(d), np.zeros(d), np.eye(d), np.full(d, np.inf))


@pytest.mark.parametrize("orientation", ["rows", "cols"])
@pytest.mark.parametrize("activation", ["gelu", "relu"])
def test_corrected_ffn_filters_pre_bias_output(orientation, activation):
    ffn = tb.ToyFFN.random(seed=3, orientation=orientation, activation=activation)
    rng = np.random.default_rng(4)
    spec = sp.eigendecompose(hallucination_covariance(rng.standard_normal((200, ffn.d)) * np.linspace(3, 0.1, ffn.d)))
    op = sp.suppression_operator(spec, sp.select_alpha(spec.lambda1, 0.1))
    x = rng.standard_normal((32, ffn.d)).astype(np.float32)
    fixed = ffn.corrected(op)
    want = ffn.pre_bias(x).astype(np.float64) @ op.matrix + ffn.b_out
    assert np.max(np.abs(fixed.forward(x) - want)) <= 1e-6
    # bias is untouched unless asked for
    assert np.array_equal(fixed.b_out, ffn.b_out)
    with_bias = ffn.corrected(op, include_bias=True)
    np.testing.assert_allclose(with_bias.b_out, op.matrix @ ffn.b_out, atol=1e-6)


# --- end to end -------------------------------------------------------------


def test_end_to_end_default_passes():
    report = tb.end_to_end_check(tb.PlantConfig())
    assert report["passed"]
    assert report["schema_version"] == 1
    assert report["eta"] == 0.1
    assert report["alpha"] == pytest.approx(0.9 / (0.1 * report["lambda1"]))
    assert [m["mode"] for m in report["modes"]] == [1, 2, 3]
    assert report["spectral_gap"] <= 0.05


def test_matheuristic_suppression_at_5000():
    out = tb.run_seeds(tb.PlantConfig(n=5000))
    assert out["variance_ratio"][0] == pytest.approx(1.0, rel=0.20)
    for r in out["reports"]:
        top = r["modes"][0]
        assert top["suppression"] == pytest.approx(0.1, rel=1e-12)
        assert top["measured_variance"] / top["recovered_eigenvalue"] == pytest.approx(0.01, rel=0.20)


def test_alpha_zero_leaves_variance_unchanged():
    report = tb.end_to_end_check(tb.PlantConfig(), tb.AlphaPolicy(alpha=0.0))
    for m in report["modes"]:
        assert abs(m["measured_variance"] - m["unfiltered_variance"]) <= 1e-10 * m["unfiltered_variance"]
        assert m["suppression"] == 1.0


def test_hard_vs_soft_limit_on_rank_one():
    cfg = tb.PlantConfig(d=32, n=2000, strengths=(4.0,), noise_sigma=0.1, seed=5)
    hard = tb.end_to_end_check(cfg, tb.AlphaPolicy(kind="hard", k=1))
    soft = tb.end_to_end_check(cfg, tb.AlphaPolicy(alpha=1e9))
    assert hard["passed"]
    diff = abs(hard["modes"][0]["measured_variance"] - soft["modes"][0]["measured_variance"])
    assert diff <= cfg.noise_sigma**2


def test_heavy_noise_fails_recovery():
    report = tb.end_to_end_check(tb.PlantConfig(strengths=(1.0,), noise_sigma=1000.0))
    assert not report["passed"]
    assert report["modes"][0]["recovery_score"] < 0.99


def test_policy_validation():
    with pytest.raises(ValueError):
        tb.AlphaPolicy(alpha=1.0, eta=0.1)
    with pytest.raises(ValueError):
        tb.AlphaPolicy(kind="hard")
    with pytest.raises(ValueError):
        tb.AlphaPolicy(kind="median")


def test_mean_shift_comparison():
    d = 32
    offset = np.zeros(d)
    offset[0] = 3.0
    cfg = tb.PlantConfig(d=d, n=2000, strengths=(), noise_sigma=0.1, seed=6, offset=offset)
    out = tb.mean_shift_comparison(cfg)
    assert out["mean_shift_removed_fraction"] >= 0.99
    # the offset dominates the uncentered second moment, so the soft filter damps it hard
    assert out["soft_retained_fraction"] == pytest.approx(0.1, rel=0.05)
    with pytest.raises(ValueError):
        tb.mean_shift_comparison(cfg.replace(offset=None))


def test_end_to_end_includes_mean_shift_section():
    offset = np.full(16, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report = tb.end_to_end_check(tb.PlantConfig(d=16, n=500, strengths=(2.0,), offset=offset))
    assert set(report["mean_shift"]) >= {"mean_shift_removed_fraction", "soft_retained_fraction"}
