import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evospec.evospectrum import (BlockPartition, EvoSpectrumModel, average_periodograms, block_partition,
                                 fit_prelim_radiation, fit_regimes, partial_difference, periodogram,
                                 regime_values, smooth_radiation, transfer_function, undifference)
from evospec.splines import N_LOW_BASIS


def test_partial_difference_examples():
    x = np.array([1.0, 1.0, 1.0])
    np.testing.assert_array_equal(partial_difference(x, 0.0), x)
    np.testing.assert_allclose(partial_difference(x, 0.997), [1, 0.003, 0.003])
    y = np.array([1.0, 3.0, 6.0])
    np.testing.assert_allclose(partial_difference(y, 1.0), [1, 2, 3])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=300), st.floats(0, 1))
def test_undifference_inverts(values, alpha):
    x = np.array(values)
    back = undifference(partial_difference(x, alpha), alpha, x[0])
    np.testing.assert_allclose(back, x, rtol=0, atol=1e-10 * max(1.0, np.abs(x).max()) * len(x))


def test_undifference_impulse_and_zero():
    np.testing.assert_array_equal(undifference(np.zeros(5), 0.9, 0.0), 0.0)
    d = np.zeros(50)
    d[10] = 1.0
    y = undifference(d, 0.99, 0.0)
    np.testing.assert_allclose(y[10:], 0.99 ** np.arange(40))
    assert np.all(y[:10] == 0)


def test_radiation_smoother_is_causal():
    np.testing.assert_allclose(smooth_radiation(np.full(100, 3.0)), 3.0)
    x = np.zeros(200)
    x[100:] = 1.0
    r = smooth_radiation(x)
    assert np.all(r[:100] == 0)
    assert r[129] < 1.0
    assert r[130] == pytest.approx(1.0, abs=1e-14)


def test_prelim_radiation_recovery(rng):
    T, n = 20000, 6
    r = smooth_radiation(np.clip(np.sin(np.arange(T) * 2 * np.pi / 1440), 0, None) * 800)
    sd = 0.03 + 0.0002 * r
    diffs = rng.standard_normal((n, T)) * sd
    fit = fit_prelim_radiation(diffs, r)
    assert fit.a0 == pytest.approx(0.03, rel=0.05)
    assert fit.a1 == pytest.approx(0.0002, rel=0.05)
    half = fit_prelim_radiation(diffs, 2 * r)
    np.testing.assert_allclose(half.sd(2 * r), fit.sd(r), rtol=1e-5)


def test_prelim_radiation_without_radiation(rng):
    x = rng.standard_normal((2, 500))
    fit = fit_prelim_radiation(x, np.zeros(500))
    assert not fit.identified and fit.a1 == 0
    assert fit.a0 == pytest.approx(np.sqrt(np.mean(x ** 2)))


def test_block_partition_counts_and_phase():
    ss = np.tile([400.0, 1100.0], (30, 1))
    part = block_partition(ss, 43200, 111, -125)
    assert len(part.changepoints) == 60 and part.B == 61
    plain = block_partition(ss, 43200, 0, 0)
    assert plain.changepoints[0] == 400 and plain.changepoints[1] == 1100
    np.testing.assert_array_equal(part.site_changepoints(4.0), np.round(part.changepoints + 4))
    with pytest.raises(ValueError, match="sunset"):
        block_partition(ss, 43200, 400, -400)


def test_periodogram_white_noise_level(rng):
    T = 4096
    x = rng.standard_normal((40, T))
    _, I = periodogram(x[0], T)
    part = BlockPartition(np.array([1000.0, 2500.0]), 0.0, 0.0, T)
    avg = average_periodograms(x, part)
    # unit white noise has |A|^2 = 1/T at every frequency
    for a, n in ((avg.day, avg.n_day), (avg.night, avg.n_night)):
        se = (1.0 / T) / np.sqrt(n)
        assert np.abs(a[5:-5] - 1.0 / T).max() < 5 * se
    assert abs(avg.month[1:-1].mean() * T - 1) < 0.02


def test_periodogram_sinusoid_spike():
    T = 512
    t = np.arange(T)
    x = np.cos(2 * np.pi * 16 * t / T)
    f, I = periodogram(x)
    assert np.argmax(I) == 16
    assert np.sum(I > 1e-20) == 1


def _exact_averages(coeffs_day, coeffs_night, T=4320):
    grid = np.linspace(0, np.pi, 512)
    mfreq = 2 * np.pi * np.arange(T // 2 + 1) / T
    from evospec.evospectrum import PeriodogramAverages
    day = regime_values(coeffs_day, grid)[0] ** 2
    night = regime_values(coeffs_night, grid)[0] ** 2
    month = regime_values(coeffs_day, mfreq)[0] ** 2
    return PeriodogramAverages(grid, day, night, mfreq, month)


def test_regime_fit_recovers_exact_splines(rng):
    c = rng.normal(scale=0.4, size=15)
    d = c.copy()
    d[N_LOW_BASIS:] += rng.normal(scale=0.3, size=15 - N_LOW_BASIS)
    out = fit_regimes(_exact_averages(c, d))
    np.testing.assert_allclose(out[0], c, atol=1e-6)
    np.testing.assert_allclose(out[1], d, atol=1e-6)
    same = fit_regimes(_exact_averages(c, c))
    np.testing.assert_allclose(same[0], same[1])
    low = np.linspace(0, 2 * np.pi * 1.99 / 1440, 50)
    v = regime_values(out, low)
    np.testing.assert_allclose(v[0], v[1], rtol=1e-12)


def test_regime_symmetry_at_ends(rng):
    c = rng.normal(size=(1, 15))
    h = 1e-7
    for w in (0.0, np.pi):
        assert regime_values(c, [w + h])[0, 0] == pytest.approx(regime_values(c, [w - h])[0, 0], rel=1e-12)


def _model(rng, K=2, a1=0.0, weights=None, T=200):
    part = BlockPartition(np.array([50.0, 120.0]), 0.0, 0.0, T)
    W = np.exp(rng.normal(size=(K, 3))) if weights is None else weights
    return EvoSpectrumModel(rng.normal(size=(K, 15)) * 0.3, W, 0.5, a1, 0.9, part,
                            np.abs(rng.normal(size=T)))


def test_transfer_function_cases(rng):
    om = np.linspace(0, np.pi, 7)
    m = _model(rng, K=1, weights=np.ones((1, 3)))
    A = transfer_function(m, np.arange(1, 201), 0.0, om)
    np.testing.assert_allclose(A, A[0][None, :].repeat(200, 0))
    W = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    m = _model(rng, weights=W)
    A = transfer_function(m, [60], 0.0, om)
    np.testing.assert_allclose(A[0], 0.5 * regime_values(m.regime_coeffs[:1], om)[0])
    m = _model(rng, a1=0.7)
    m.radiation[:] = 0.0
    A = transfer_function(m, [10], 0.0, om)
    np.testing.assert_allclose(A[0], 0.5 * (m.weights[:, 0] @ regime_values(m.regime_coeffs, om)))


def test_fitted_weights_favour_matching_regime():
    from evospec.fitting import fit_model
    from evospec.synthetic import SyntheticConfig, make_synthetic
    truth = make_synthetic(SyntheticConfig(jump=False, seed=2, days=2))
    _, fit = fit_model(truth.data, truth.Y, truth.config.offsets, truth.config.alpha, hessian=False)
    W = fit.evo.weights
    day = fit.evo.partition.day_block
    match = np.where(day, W[0] > W[1], W[1] > W[0])
    assert match.mean() >= 0.8


def test_model_dict_round_trip(rng):
    m = _model(rng)
    back = EvoSpectrumModel.from_dict(m.to_dict(), m.radiation)
    np.testing.assert_array_equal(back.weights, m.weights)
    np.testing.assert_array_equal(back.sd_profile(), m.sd_profile())
