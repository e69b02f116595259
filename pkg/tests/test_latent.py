"""Rate latent space: the sampler's exact count law, the surrogate
expectation law, the learned prior, and the perturbation utilities.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import assert_grad_matches
from spikevae import engine, latent
from spikevae.errors import ContractError, ShapeError, ValidationError
from spikevae.latent import (Bottleneck, SamplerDraw, count_pmf, firing_rate,
                             make_draw, perturb_spikes, prior_rates,
                             sample_spikes, sampler_backward, sampler_window,
                             shuffle_length, shuffle_time)


# ---------------------------------------------------------------------------
# firing_rate


def test_firing_rate_direct_count():
    z = engine.tensor(np.array([[[1, 0, 1, 0], [1, 1, 1, 1]]], dtype=np.float32))
    np.testing.assert_array_equal(firing_rate(z).data, [[0.5, 1.0]])


def test_firing_rate_zero_train():
    np.testing.assert_array_equal(
        firing_rate(engine.zeros((2, 3, 8))).data, np.zeros((2, 3)))


def test_firing_rate_half_of_16():
    bits = np.zeros((1, 1, 16), dtype=np.float32)
    bits[0, 0, :8] = 1.0
    assert firing_rate(engine.tensor(bits)).data[0, 0] == 0.5


def test_firing_rate_rejects_nonbinary_and_bad_rank():
    with pytest.raises(ValidationError):
        firing_rate(engine.tensor(np.full((1, 1, 4), 0.5, dtype=np.float32)))
    with pytest.raises(ShapeError):
        firing_rate(engine.zeros((3, 4)))


# ---------------------------------------------------------------------------
# sampling


def test_sample_boundary_rates():
    draw = make_draw(1, 2, 8, seed=0)
    rates = engine.tensor(np.array([[0.0, 1.0]], dtype=np.float32))
    z = sample_spikes(rates, 8, draw)
    np.testing.assert_array_equal(z.data[0, 0], np.zeros(8))
    np.testing.assert_array_equal(z.data[0, 1], np.ones(8))


def test_sample_strict_threshold_comparison():
    u = np.array([[[0.3, 0.6, 0.9, 0.1]]], dtype=np.float32)
    z = sample_spikes(engine.tensor([[0.5]]), 4, SamplerDraw(u=u))
    np.testing.assert_array_equal(z.data, [[[1.0, 0.0, 0.0, 1.0]]])


def test_sample_validates_inputs():
    draw = make_draw(1, 2, 4, seed=0)
    with pytest.raises(ValidationError):
        sample_spikes(engine.tensor([[0.5, 1.5]]), 4, draw)
    with pytest.raises(ShapeError):
        sample_spikes(engine.tensor([[0.5, 0.5]]), 5, draw)
    with pytest.raises(ShapeError):
        sample_spikes(engine.tensor(np.zeros((1, 2, 3), dtype=np.float32)), 4, draw)


def test_sample_mean_count_binomial():
    n = 10**4
    draw = make_draw(n, 1, 16, seed=42)
    rates = engine.tensor(np.full((n, 1), 0.25, dtype=np.float32))
    counts = sample_spikes(rates, 16, draw).data.sum(axis=2)
    se = math.sqrt(16 * 0.25 * 0.75 / n)
    assert abs(counts.mean() - 4.0) <= 3 * se


def test_rate_consistency_grid():
    n = 10**4
    for i, r in enumerate(np.linspace(0.0, 1.0, 11)):
        draw = make_draw(n, 1, 16, seed=100 + i)
        z = sample_spikes(engine.tensor(np.full((n, 1), r, dtype=np.float32)), 16, draw)
        emp = float(firing_rate(z).data.mean())
        se = math.sqrt(r * (1 - r) / (16 * n))
        assert abs(emp - r) <= max(3 * se, 1e-12), f"rate drifted at r={r}"
        engine.reset_tape()


def test_make_draw_deterministic_and_in_range():
    a = make_draw(5, 3, 7, seed=9)
    b = make_draw(5, 3, 7, seed=9)
    assert a.u.tobytes() == b.u.tobytes()
    assert a.seed == 9
    assert np.all(a.u >= 0) and np.all(a.u < 1)
    assert make_draw(5, 3, 7, seed=10).u.tobytes() != a.u.tobytes()


# ---------------------------------------------------------------------------
# surrogate backward


def test_sampler_backward_hand_case():
    u = np.array([[[0.3, 0.6, 0.9, 0.1]]], dtype=np.float32)
    g = sampler_backward(np.array([[0.5]], dtype=np.float32), SamplerDraw(u=u), alpha=0.5)
    # |r-u| = [0.2, 0.1, 0.4, 0.4]; two entries inside the 0.25 window,
    # each contributing 1/alpha = 2.
    assert g[0, 0] == 4.0


def test_sampler_backward_zero_outside_window():
    u = np.array([[[0.9, 0.95, 0.05]]], dtype=np.float32)
    g = sampler_backward(np.array([[0.5]], dtype=np.float32), SamplerDraw(u=u), alpha=0.5)
    assert g[0, 0] == 0.0


def test_sampler_window_support_values():
    draw = make_draw(16, 4, 8, seed=3)
    w = sampler_window(np.full((16, 4), 0.4, dtype=np.float32), draw, alpha=0.5)
    assert set(np.unique(w)) <= {0.0, 2.0}
    with pytest.raises(ValidationError):
        sampler_window(np.full((16, 4), 0.4, dtype=np.float32), draw, alpha=0.0)


def test_sampler_backward_seed_mismatch_is_contract_error():
    draw = make_draw(2, 2, 4, seed=5)
    with pytest.raises(ContractError):
        sampler_backward(np.full((2, 2), 0.5, dtype=np.float32), draw,
                         alpha=0.5, forward_seed=6)
    # Matching seed passes.
    sampler_backward(np.full((2, 2), 0.5, dtype=np.float32), draw,
                     alpha=0.5, forward_seed=5)


def test_sampler_backward_shape_check():
    draw = make_draw(2, 2, 4, seed=5)
    with pytest.raises(ShapeError):
        sampler_backward(np.full((2, 3), 0.5, dtype=np.float32), draw, alpha=0.5)


def test_sample_spikes_tape_gradient_equals_sampler_backward():
    rng = np.random.default_rng(4)
    r_arr = rng.uniform(0.2, 0.8, (3, 5)).astype(np.float32)
    draw = make_draw(3, 5, 8, seed=11)
    rates = engine.tensor(r_arr, requires_grad=True)
    engine.backward(engine.sum_all(sample_spikes(rates, 8, draw, alpha=0.5)))
    np.testing.assert_array_equal(rates.grad,
                                  sampler_backward(r_arr, draw, alpha=0.5))


def test_surrogate_expectation_equals_steps():
    n = 10**5
    for r in (0.25, 0.4, 0.6, 0.75):
        draw = make_draw(n, 1, 16, seed=int(r * 1000))
        g = sampler_backward(np.full((n, 1), r, dtype=np.float32), draw, alpha=0.5)
        assert abs(g.mean() / 16.0 - 1.0) <= 0.02, f"expectation law broke at r={r}"


# ---------------------------------------------------------------------------
# prior bottleneck


def test_prior_zero_weights_give_half():
    rng = np.random.default_rng(5)
    bn = Bottleneck(6, rng)
    bn.fc.weight.data[:] = 0.0
    bn.fc.bias.data[:] = 0.0
    rates, z_n = prior_rates(bn, 4, np.random.default_rng(0))
    assert z_n.shape == (4, 6)
    np.testing.assert_array_equal(rates.data, np.full((4, 6), 0.5))


def test_prior_large_bias_saturates():
    rng = np.random.default_rng(6)
    bn = Bottleneck(3, rng)
    bn.fc.weight.data[:] = 0.0
    bn.fc.bias.data[:] = 10.0
    rates, _ = prior_rates(bn, 2, np.random.default_rng(0))
    np.testing.assert_allclose(rates.data, 1.0, atol=1e-4)


def test_prior_rates_strictly_inside_unit_interval():
    bn = Bottleneck(32, np.random.default_rng(7))
    rates, _ = prior_rates(bn, 64, np.random.default_rng(1))
    assert np.all(rates.data > 0.0) and np.all(rates.data < 1.0)


def test_prior_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    bn = Bottleneck(4, rng)
    z_arr = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((3, 4)).astype(np.float32)
    wt = engine.tensor(w)

    engine.backward(engine.mean_all(engine.mul(bn(engine.tensor(z_arr)), wt)))
    gw = bn.fc.weight.grad.copy()
    gb = bn.fc.bias.grad.copy()
    engine.reset_tape()

    keep_w = bn.fc.weight.data.copy()

    def f_w(arr):
        bn.fc.weight.data[:] = arr
        try:
            return engine.mean_all(engine.mul(bn(engine.tensor(z_arr)), wt)).item()
        finally:
            bn.fc.weight.data[:] = keep_w

    assert_grad_matches(f_w, keep_w, gw, label="bottleneck dW")

    keep_b = bn.fc.bias.data.copy()

    def f_b(arr):
        bn.fc.bias.data[:] = arr
        try:
            return engine.mean_all(engine.mul(bn(engine.tensor(z_arr)), wt)).item()
        finally:
            bn.fc.bias.data[:] = keep_b

    assert_grad_matches(f_b, keep_b, gb, label="bottleneck db")


def test_prior_input_shape_check():
    bn = Bottleneck(4, np.random.default_rng(9))
    with pytest.raises(ShapeError):
        bn(engine.zeros((2, 5)))


# ---------------------------------------------------------------------------
# shuffles and perturbation


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, (2, 4, 6),
                  elements=st.sampled_from([0.0, 1.0])))
def test_shuffle_time_preserves_rates_exactly(z):
    engine.reset_tape()
    shuffled = shuffle_time(z, seed=3)
    np.testing.assert_array_equal(
        firing_rate(engine.tensor(shuffled)).data,
        firing_rate(engine.tensor(z)).data)


def test_shuffle_time_t1_identity_and_reproducible():
    z = (np.random.default_rng(10).random((3, 5, 1)) < 0.5).astype(np.float32)
    np.testing.assert_array_equal(shuffle_time(z, seed=0), z)
    z8 = (np.random.default_rng(11).random((3, 5, 8)) < 0.5).astype(np.float32)
    np.testing.assert_array_equal(shuffle_time(z8, seed=4), shuffle_time(z8, seed=4))
    assert not np.array_equal(shuffle_time(z8, seed=4), shuffle_time(z8, seed=5))


def test_shuffle_time_permutes_independently_per_neuron():
    # Give every neuron the same asymmetric pattern; after shuffling,
    # neurons should disagree somewhere if permutations are independent.
    z = np.zeros((1, 32, 8), dtype=np.float32)
    z[:, :, 0] = 1.0
    out = shuffle_time(z, seed=12)
    positions = out.argmax(axis=2)[0]
    assert len(set(positions.tolist())) > 1


def test_shuffle_length_d1_identity():
    z = (np.random.default_rng(13).random((4, 1, 8)) < 0.5).astype(np.float32)
    np.testing.assert_array_equal(shuffle_length(z, seed=0), z)


def test_shuffle_length_single_shared_permutation():
    # Encode each neuron index in its constant spike pattern, then
    # recover the permutation at every (batch, time) position.
    d, steps = 8, 3
    z = np.zeros((2, d, steps), dtype=np.float32)
    for j in range(d):
        for t in range(steps):
            z[:, j, t] = (j >> t) & 1
    out = shuffle_length(z, seed=14)
    decoded = sum(out[:, :, t].astype(int) << t for t in range(steps))
    perm = decoded[0]
    assert sorted(perm.tolist()) == list(range(d))
    # Identical across the batch, identical at all steps by construction.
    np.testing.assert_array_equal(decoded[1], perm)


def test_shuffle_length_preserves_rate_multiset():
    z = (np.random.default_rng(15).random((3, 6, 8)) < 0.4).astype(np.float32)
    before = np.sort(z.mean(axis=2), axis=1)
    after = np.sort(shuffle_length(z, seed=2).mean(axis=2), axis=1)
    np.testing.assert_array_equal(before, after)


def test_perturb_identity_and_complement():
    z = (np.random.default_rng(16).random((2, 4, 8)) < 0.5).astype(np.float32)
    np.testing.assert_array_equal(perturb_spikes(z, 0.0, seed=1), z)
    np.testing.assert_array_equal(perturb_spikes(z, 1.0, seed=1), 1.0 - z)


def test_perturb_flip_fraction():
    z = np.zeros((1, 100, 1000), dtype=np.float32)
    out = perturb_spikes(z, 0.1, seed=17)
    frac = out.mean()
    se = math.sqrt(0.1 * 0.9 / z.size)
    assert abs(frac - 0.1) <= 3 * se
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_perturb_validates_probability():
    z = np.zeros((1, 2, 2), dtype=np.float32)
    with pytest.raises(ValidationError):
        perturb_spikes(z, -0.1, seed=0)
    with pytest.raises(ValidationError):
        perturb_spikes(z, 1.1, seed=0)


# ---------------------------------------------------------------------------
# count law


def test_count_pmf_trivial_cases():
    assert count_pmf(0, 0.0, 16) == (1.0, 1.0)
    binom, _ = count_pmf(1, 0.5, 2)
    assert binom == pytest.approx(0.5)


def test_count_pmf_binomial_sums_to_one():
    total = sum(count_pmf(n, 0.3, 16)[0] for n in range(17))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_count_pmf_poisson_formula():
    r, steps, n = 0.3, 16, 5
    lam = r * steps
    _, poisson = count_pmf(n, r, steps)
    assert poisson == pytest.approx(math.exp(-lam) * lam**n / math.factorial(n))


def test_count_pmf_validation():
    with pytest.raises(ValidationError):
        count_pmf(17, 0.5, 16)
    with pytest.raises(ValidationError):
        count_pmf(-1, 0.5, 16)
    with pytest.raises(ValidationError):
        count_pmf(2, 1.5, 16)


def test_count_histogram_total_variation():
    n = 10**5
    steps = 16
    for r in (0.1, 0.5, 0.9):
        draw = make_draw(n, 1, steps, seed=int(1000 * r) + 7)
        counts = (draw.u < r).sum(axis=2).astype(int).reshape(-1)
        emp = np.bincount(counts, minlength=steps + 1) / n
        pmf = np.array([count_pmf(k, r, steps)[0] for k in range(steps + 1)])
        tv = 0.5 * np.abs(emp - pmf).sum()
        assert tv < 0.01, f"TV {tv:.4f} at r={r}"
