"""Objective and metrics, checked against slow float64 re-implementations."""

import math

import numpy as np
import pytest

from gradcheck import assert_grad_matches
from spikevae import engine
from spikevae.errors import NumericError, ShapeError, ValidationError
from spikevae.losses import (E_AC, E_MAC, LossReport, energy_report,
                             median_sigma2, mmd_squared, mse_loss,
                             rate_histogram, rbf_kernel, total_loss)

# Biased V-statistic in float64 with explicit pair loops. Slow but
# unarguable; the fast path must agree to float32 roundoff.


def _mmd_ref(p: np.ndarray, q: np.ndarray, sigma2: float) -> float:
    def kmean(a, b):
        tot = 0.0
        for x in a:
            for y in b:
                tot += math.exp(-float(np.square(x - y).sum()) / (2.0 * sigma2))
        return tot / (len(a) * len(b))

    p = p.astype(np.float64)
    q = q.astype(np.float64)
    return kmean(p, p) + kmean(q, q) - 2.0 * kmean(p, q)


def _mmd64(p: np.ndarray, q: np.ndarray, sigma2: float) -> float:
    """Vectorised float64 twin of the float32 forward, for use as a
    finite-difference baseline where float32 evaluation noise at h=1e-3
    would drown the signal."""

    def km(a, b):
        d2 = np.square(a[:, None, :] - b[None, :, :]).sum(axis=2)
        return np.exp(-d2 / (2.0 * sigma2)).mean()

    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(km(p, p) + km(q, q) - 2.0 * km(p, q))


# ---------------------------------------------------------------------------
# mse


def test_mse_zero_on_equal_inputs():
    x = engine.tensor(np.random.default_rng(0).random((4, 7)).astype(np.float32))
    assert mse_loss(x, x).item() == 0.0


def test_mse_ones_vs_zeros():
    assert mse_loss(engine.zeros((3, 5)),
                    engine.tensor(np.ones((3, 5), dtype=np.float32))).item() == 1.0


def test_mse_elementwise_oracle():
    rng = np.random.default_rng(1)
    a = rng.random((6, 9)).astype(np.float32)
    b = rng.random((6, 9)).astype(np.float32)
    got = mse_loss(engine.tensor(a), engine.tensor(b)).item()
    want = float(np.mean((a.astype(np.float64) - b) ** 2))
    assert got == pytest.approx(want, rel=1e-5)


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(engine.zeros((2, 3)), engine.zeros((3, 2)))


# ---------------------------------------------------------------------------
# kernel


def test_rbf_identical_points():
    a = np.array([0.3, 0.7, 0.1], dtype=np.float32)
    assert rbf_kernel(a, a, 0.5) == 1.0


def test_rbf_at_two_sigma_squared():
    # ||a-b||^2 = 2 sigma2 lands exactly on exp(-1).
    sigma2 = 0.5
    a = np.zeros(4, dtype=np.float32)
    b = np.full(4, math.sqrt(2 * sigma2 / 4), dtype=np.float32)
    assert rbf_kernel(a, b, sigma2) == pytest.approx(math.exp(-1.0), rel=1e-6)


def test_rbf_direct_formula():
    rng = np.random.default_rng(2)
    a = rng.random(8).astype(np.float32)
    b = rng.random(8).astype(np.float32)
    want = math.exp(-float(np.square(a.astype(np.float64) - b).sum()) / (2 * 0.7))
    assert rbf_kernel(a, b, 0.7) == pytest.approx(want, rel=1e-6)


def test_rbf_rejects_bad_bandwidth():
    a = np.zeros(3, dtype=np.float32)
    with pytest.raises(ValidationError):
        rbf_kernel(a, a, 0.0)
    with pytest.raises(ValidationError):
        rbf_kernel(a, a, -1.0)


# ---------------------------------------------------------------------------
# mmd


def test_mmd_matches_brute_force_reference():
    rng = np.random.default_rng(3)
    for trial in range(10):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        d = int(rng.integers(1, 6))
        p = rng.random((n, d)).astype(np.float32)
        q = rng.random((m, d)).astype(np.float32)
        sigma2 = float(rng.uniform(0.2, 2.0))
        got = mmd_squared(engine.tensor(p), engine.tensor(q), sigma2).item()
        assert got == pytest.approx(_mmd_ref(p, q, sigma2), abs=5e-6), \
            f"trial {trial}: n={n} m={m} d={d}"
        engine.reset_tape()


def test_mmd_zero_on_identical_batches():
    rng = np.random.default_rng(4)
    p = rng.random((6, 5)).astype(np.float32)
    assert mmd_squared(engine.tensor(p), engine.tensor(p.copy()), 1.0).item() == 0.0


def test_mmd_single_samples():
    x = np.array([[0.2, 0.8]], dtype=np.float32)
    y = np.array([[0.5, 0.1]], dtype=np.float32)
    got = mmd_squared(engine.tensor(x), engine.tensor(y), 0.9).item()
    assert got == pytest.approx(2.0 - 2.0 * rbf_kernel(x[0], y[0], 0.9), abs=1e-7)


def test_mmd_symmetric():
    rng = np.random.default_rng(5)
    p = rng.random((5, 3)).astype(np.float32)
    q = rng.random((7, 3)).astype(np.float32)
    ab = mmd_squared(engine.tensor(p), engine.tensor(q), 0.6).item()
    ba = mmd_squared(engine.tensor(q), engine.tensor(p), 0.6).item()
    # Equal up to float32 summation order.
    assert ab == pytest.approx(ba, rel=1e-5, abs=1e-6)


def test_mmd_validation():
    p = engine.zeros((2, 3))
    with pytest.raises(ValidationError):
        mmd_squared(engine.tensor(np.zeros((0, 3), dtype=np.float32)), p, 1.0)
    with pytest.raises(ShapeError):
        mmd_squared(p, engine.zeros((2, 4)), 1.0)
    with pytest.raises(ShapeError):
        mmd_squared(engine.zeros((2, 3, 1)), p, 1.0)
    with pytest.raises(ValidationError):
        mmd_squared(p, p, 0.0)


def test_mmd_monotone_in_separation():
    seps = (0.0, 0.5, 1.0, 2.0)
    for seed in range(5):
        rng = np.random.default_rng(600 + seed)
        base = rng.standard_normal((200, 4)).astype(np.float32)
        other = rng.standard_normal((200, 4)).astype(np.float32)
        vals = []
        for s in seps:
            q = other + np.float32(s)
            vals.append(mmd_squared(engine.tensor(base), engine.tensor(q), 1.0).item())
            engine.reset_tape()
        for lo, hi in zip(vals, vals[1:]):
            assert hi >= lo - 1e-3, f"seed {seed}: {vals}"


def test_mmd_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    p_arr = rng.random((5, 4)).astype(np.float32)
    q_arr = rng.random((6, 4)).astype(np.float32)
    sigma2 = 0.8

    p = engine.tensor(p_arr, requires_grad=True)
    q = engine.tensor(q_arr, requires_grad=True)
    engine.backward(mmd_squared(p, q, sigma2))
    gp, gq = p.grad.copy(), q.grad.copy()
    engine.reset_tape()

    assert_grad_matches(lambda a: _mmd64(a, q_arr, sigma2), p_arr, gp,
                        label="mmd dP")
    assert_grad_matches(lambda a: _mmd64(p_arr, a, sigma2), q_arr, gq,
                        label="mmd dQ")


# ---------------------------------------------------------------------------
# bandwidth heuristic


def test_median_sigma2_two_points():
    p = np.array([[0.0, 0.0]], dtype=np.float32)
    q = np.array([[1.0, 1.0]], dtype=np.float32)
    # Single pair, squared distance 2, so the heuristic gives 1.
    assert median_sigma2(p, q) == pytest.approx(1.0, rel=1e-6)


def test_median_sigma2_degenerate_falls_back():
    p = np.zeros((3, 2), dtype=np.float32)
    assert median_sigma2(p, p) == 1.0
    assert median_sigma2(p[:1], np.zeros((0, 2), dtype=np.float32)) == 1.0


# ---------------------------------------------------------------------------
# total objective


def test_total_loss_zero_when_everything_matches():
    rng = np.random.default_rng(7)
    x = engine.tensor(rng.random((4, 6)).astype(np.float32))
    p = rng.random((4, 5)).astype(np.float32)
    report = total_loss(x, x, engine.tensor(p), engine.tensor(p.copy()), lam=1.0)
    assert report.total == 0.0
    assert report.mse == 0.0
    assert report.mmd2 == 0.0


def test_total_loss_lambda_zero_is_pure_mse():
    rng = np.random.default_rng(8)
    x = engine.tensor(rng.random((3, 4)).astype(np.float32))
    xh = engine.tensor(rng.random((3, 4)).astype(np.float32))
    p = engine.tensor(rng.random((3, 5)).astype(np.float32))
    q = engine.tensor(rng.random((3, 5)).astype(np.float32))
    report = total_loss(x, xh, p, q, lam=0.0)
    assert report.total == report.mse
    assert report.node.item() == report.mse
    # The discrepancy is still measured and reported.
    assert report.mmd2 > 0.0


def test_total_loss_combination():
    rng = np.random.default_rng(9)
    x = engine.tensor(rng.random((3, 4)).astype(np.float32))
    xh = engine.tensor(rng.random((3, 4)).astype(np.float32))
    p = engine.tensor(rng.random((3, 5)).astype(np.float32))
    q = engine.tensor(rng.random((3, 5)).astype(np.float32))
    report = total_loss(x, xh, p, q, lam=2.5, sigma2=0.7)
    assert report.total == pytest.approx(report.mse + 2.5 * report.mmd2, rel=1e-6)
    assert report.sigma2 == 0.7
    assert report.lam == 2.5


def test_total_loss_default_bandwidth_is_median_heuristic():
    rng = np.random.default_rng(10)
    x = engine.tensor(rng.random((4, 4)).astype(np.float32))
    p_arr = rng.random((4, 6)).astype(np.float32)
    q_arr = rng.random((4, 6)).astype(np.float32)
    report = total_loss(x, x, engine.tensor(p_arr), engine.tensor(q_arr))
    assert report.sigma2 == pytest.approx(median_sigma2(p_arr, q_arr), rel=1e-6)


def test_total_loss_gradient_wrt_rates():
    rng = np.random.default_rng(11)
    x_arr = rng.random((3, 4)).astype(np.float32)
    xh_arr = rng.random((3, 4)).astype(np.float32)
    p_arr = rng.random((3, 5)).astype(np.float32)
    q_arr = rng.random((3, 5)).astype(np.float32)

    q = engine.tensor(q_arr, requires_grad=True)
    report = total_loss(engine.tensor(x_arr), engine.tensor(xh_arr),
                        engine.tensor(p_arr), q, lam=1.5, sigma2=0.6)
    engine.backward(report.node)
    gq = q.grad.copy()
    engine.reset_tape()

    def f(arr):
        return total_loss(engine.tensor(x_arr), engine.tensor(xh_arr),
                          engine.tensor(p_arr), engine.tensor(arr),
                          lam=1.5, sigma2=0.6).node.item()

    assert_grad_matches(f, q_arr, gq, label="total_loss dQ")


def test_total_loss_non_finite_raises():
    bad = engine.tensor(np.array([[np.inf]], dtype=np.float32))
    x = engine.zeros((1, 1))
    p = engine.tensor(np.array([[0.5]], dtype=np.float32))
    with pytest.raises(NumericError):
        total_loss(x, bad, p, p, lam=1.0)


def test_loss_report_rejects_negative_mmd():
    with pytest.raises(NumericError):
        LossReport(mse=0.0, mmd2=-1e-3, total=0.0, lam=1.0, sigma2=1.0,
                   node=engine.zeros((1,)))


# ---------------------------------------------------------------------------
# energy model


def test_energy_spiking_example():
    report = energy_report(1000, 0, avg_rate=0.5, steps=16, spiking=True)
    assert report.sops == 8000.0
    assert report.energy_joules == pytest.approx(7.2e-9, rel=1e-9)


def test_energy_non_spiking_ignores_rate():
    report = energy_report(300, 700, avg_rate=0.5, steps=16, spiking=False)
    assert report.sops == 0.0
    assert report.energy_joules == pytest.approx(1000 * E_MAC, rel=1e-12)


def test_energy_splits_add_and_mul():
    report = energy_report(250, 750, avg_rate=0.2, steps=4, spiking=True)
    assert report.sops == pytest.approx(0.2 * 4 * 1000)
    assert report.energy_joules == pytest.approx(report.sops * E_AC, rel=1e-12)


def test_energy_zero_rate_costs_nothing():
    report = energy_report(10**9, 0, avg_rate=0.0, steps=16, spiking=True)
    assert report.energy_joules == 0.0


def test_energy_validation():
    with pytest.raises(ValidationError):
        energy_report(-1, 0, 0.5, 16, True)
    with pytest.raises(ValidationError):
        energy_report(0, -1, 0.5, 16, True)
    with pytest.raises(ValidationError):
        energy_report(10, 0, 1.5, 16, True)
    with pytest.raises(ValidationError):
        energy_report(10, 0, 0.5, 0, True)


# ---------------------------------------------------------------------------
# rate histogram


def test_histogram_single_value_single_bin():
    freq, edges = rate_histogram(np.full(50, 0.55, dtype=np.float32), bins=10)
    assert freq.sum() == pytest.approx(1.0)
    assert freq[5] == 1.0
    assert np.count_nonzero(freq) == 1
    np.testing.assert_allclose(edges, np.linspace(0, 1, 11), atol=1e-7)


def test_histogram_counting_oracle():
    rng = np.random.default_rng(12)
    rates = rng.random(500).astype(np.float32)
    freq, edges = rate_histogram(rates, bins=20)
    manual = np.zeros(20)
    for r in rates.astype(np.float64):
        idx = min(int(r * 20), 19)
        manual[idx] += 1
    np.testing.assert_allclose(freq, manual / 500, atol=1e-12)
    assert freq.sum() == pytest.approx(1.0)


def test_histogram_endpoint_goes_to_last_bin():
    freq, _ = rate_histogram(np.array([1.0], dtype=np.float32), bins=4)
    assert freq[3] == 1.0


def test_histogram_validation():
    with pytest.raises(ValidationError):
        rate_histogram(np.array([0.5], dtype=np.float32), bins=1)
    with pytest.raises(ValidationError):
        rate_histogram(np.zeros(0, dtype=np.float32), bins=10)
