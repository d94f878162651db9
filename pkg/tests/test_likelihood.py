import numpy as np
import pytest
from conftest import LONLAT3, dense_ct, dense_joint_negloglik, random_model

from evospec.evospectrum import BlockPartition, EvoSpectrumModel, regime_values
from evospec.likelihood import (CoherenceModel, JointLikelihood, SiteGeometry, SiteOperator, SolverError,
                                coherence_matrix, ct_matvec, ct_solve, joint_negloglik, logdet_approx,
                                negloglik_gradient)

GAMMA = np.array([60.0, 40.0, 30.0, 20.0, 10.0])


@pytest.mark.parametrize("T", [8, 16, 33])
def test_matvec_and_solve_match_dense(rng, T):
    m = random_model(rng, T)
    C = dense_ct(m)
    v = rng.normal(size=T) + 1j * rng.normal(size=T)
    np.testing.assert_allclose(ct_matvec(m, 0.0, v), C @ v, rtol=0, atol=1e-12 * np.abs(C @ v).max())
    x = rng.normal(size=T)
    z = ct_solve(m, 0.0, x, tol=1e-13)
    zd = np.linalg.solve(C, x)
    np.testing.assert_allclose(z, zd, rtol=0, atol=1e-9 * np.abs(zd).max())
    np.testing.assert_allclose(z[1:], np.conj(z[1:][::-1]), atol=1e-15)


def test_flat_amplitude_matvec_is_scaled_inverse_dft(rng):
    T = 16
    part = BlockPartition(np.array([]), 0.0, 0.0, T)
    m = EvoSpectrumModel(np.zeros((1, 15)), np.ones((1, 1)), 1.0, 0.0, 1.0, part, np.zeros(T))
    v = rng.normal(size=T) + 1j * rng.normal(size=T)
    np.testing.assert_allclose(ct_matvec(m, 0.0, v), T * np.fft.ifft(v), atol=1e-12)
    e = np.zeros(T, dtype=complex)
    e[3] = 1
    np.testing.assert_allclose(ct_matvec(m, 0.0, e), dense_ct(m)[:, 3], atol=1e-12)


def test_stationary_solve_is_diagonal(rng):
    T = 64
    m = random_model(rng, T, K=1, B=1, a1=0.0)
    x = rng.normal(size=T)
    A = regime_values(m.regime_coeffs, 2 * np.pi * np.arange(T) / T)[0] * m.weights[0, 0] * m.a0
    np.testing.assert_allclose(ct_solve(m, 0.0, x, tol=1e-13), np.fft.fft(x) / (T * A), atol=1e-12)


def test_logdet_constant_amplitude():
    T = 32
    part = BlockPartition(np.array([]), 0.0, 0.0, T)
    m = EvoSpectrumModel(np.zeros((1, 15)), np.ones((1, 1)), 2.5, 0.0, 1.0, part, np.zeros(T))
    assert logdet_approx(m) == pytest.approx(T * np.log(2.5))


@pytest.mark.parametrize("B", [1, 4])
def test_logdet_uniformly_modulated_is_exact(rng, B):
    T = 16
    m = random_model(rng, T, K=1, B=B)
    C = dense_ct(m)
    exact = np.linalg.slogdet(C)[1] - 0.5 * T * np.log(T)
    assert logdet_approx(m) == pytest.approx(exact, rel=1e-10)
    sep = np.sum(np.log(m.modulation() * m.weights[0, m.partition.block_index()]))
    mu = regime_values(m.regime_coeffs, 2 * np.pi * np.arange(T) / T)[0]
    assert logdet_approx(m) == pytest.approx(sep + np.sum(np.log(mu)), rel=1e-10)


def test_solver_cap_raises(rng):
    m = random_model(rng, 64, K=2, B=4)
    with pytest.raises(SolverError, match="residual"):
        SiteOperator(m).solve(rng.normal(size=64), tol=1e-14, maxiter=1)


def test_coherence_matrix_properties(sites3):
    coh = CoherenceModel(GAMMA)
    hi = 2 * np.pi * 100 / 1440
    np.testing.assert_array_equal(coherence_matrix(coh, sites3, hi), np.eye(3))
    one = SiteGeometry.from_lonlat([[-97.0, 36.0]])
    np.testing.assert_array_equal(coherence_matrix(coh, one, 0.01), [[1.0]])
    for w in np.linspace(0, np.pi, 40):
        R = coherence_matrix(coh, sites3, w)
        np.testing.assert_allclose(R, R.conj().T, atol=1e-15)
        np.testing.assert_allclose(np.diag(R), 1.0)
        assert np.linalg.eigvalsh(R).min() > -1e-12


def test_two_site_coherence_without_phase():
    from evospec.ingest import SolarClock
    coh = CoherenceModel(GAMMA, SolarClock(theta=0.0))
    two = SiteGeometry.from_lonlat([[-97.0, 36.0], [-97.0, 36.3]])
    w = 2 * np.pi * 2 / 1440
    R = coherence_matrix(coh, two, w)
    d = two.distances()[0, 1]
    assert R[0, 1] == pytest.approx(np.exp(-d / coh.gamma(w)))
    np.testing.assert_allclose(np.linalg.eigvalsh(R), [1 - R[0, 1].real, 1 + R[0, 1].real])


def test_whittle_matches_dense_single_site(rng):
    T = 64
    m = random_model(rng, T, K=1, B=1, a1=0.0)
    x = rng.normal(size=(1, T))
    one = SiteGeometry.from_lonlat([[-97.0, 36.0]])
    approx = joint_negloglik(m, CoherenceModel(GAMMA), x, one, [0.0], tol=1e-13)
    assert approx == pytest.approx(dense_joint_negloglik(m, CoherenceModel(GAMMA), one, [0.0], x), rel=1e-8)


def test_stationary_joint_matches_dense(rng, sites3, phases3):
    T = 32
    m = random_model(rng, T, K=1, B=1, a1=0.0)
    x = rng.normal(size=(3, T))
    coh = CoherenceModel(GAMMA)
    approx = joint_negloglik(m, coh, x, sites3, phases3, tol=1e-13)
    assert approx == pytest.approx(dense_joint_negloglik(m, coh, sites3, phases3, x), rel=1e-10)


def test_nonstationary_joint_differs_only_by_logdet(rng, sites3, phases3):
    T = 24
    m = random_model(rng, T)
    x = rng.normal(size=(3, T))
    coh = CoherenceModel(GAMMA)
    approx = joint_negloglik(m, coh, x, sites3, phases3, tol=1e-13)
    corr = sum(np.linalg.slogdet(dense_ct(m, p))[1] - 0.5 * T * np.log(T) - logdet_approx(m, p)
               for p in phases3)
    assert approx + corr == pytest.approx(dense_joint_negloglik(m, coh, sites3, phases3, x), rel=1e-10)


def test_identity_coherence_separates(rng, sites3, phases3):
    T = 64
    m = random_model(rng, T)
    x = rng.normal(size=(3, T))
    far = CoherenceModel(np.zeros(5))
    total = joint_negloglik(m, far, x, sites3, phases3)
    parts = sum(joint_negloglik(m, far, x[i:i + 1], SiteGeometry.from_lonlat(LONLAT3[i:i + 1]), [phases3[i]])
                for i in range(3))
    assert total == pytest.approx(parts, rel=1e-10)


def test_gradient_matches_finite_differences(rng, sites3, phases3):
    T = 256
    m = random_model(rng, T, K=2, B=5)
    x = rng.normal(size=(3, T))
    coh = CoherenceModel(GAMMA)
    lik = JointLikelihood(m, x, sites3, phases3, tol=1e-13)
    _, (g0, g1, gw, gg) = lik.evaluate_with_grad(m.a0, m.a1, m.weights, GAMMA)
    f = lambda a0, a1, W: lik.evaluate(a0, a1, W, GAMMA)  # noqa: E731
    h = 1e-5
    assert g0 == pytest.approx((f(m.a0 + h, m.a1, m.weights) - f(m.a0 - h, m.a1, m.weights)) / (2 * h), rel=1e-5)
    assert g1 == pytest.approx((f(m.a0, m.a1 + h, m.weights) - f(m.a0, m.a1 - h, m.weights)) / (2 * h), rel=1e-5)
    for k in range(2):
        for b in range(5):
            up = m.weights.copy()
            dn = m.weights.copy()
            step = h * m.weights[k, b]
            up[k, b] += step
            dn[k, b] -= step
            assert gw[k, b] == pytest.approx((f(m.a0, m.a1, up) - f(m.a0, m.a1, dn)) / (2 * step), rel=1e-5)
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1e-3
        fd = (lik.evaluate(m.a0, m.a1, m.weights, GAMMA + e) - lik.evaluate(m.a0, m.a1, m.weights, GAMMA - e)) / 2e-3
        assert gg[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)
    assert negloglik_gradient(m, coh, x, sites3, phases3)[0] == pytest.approx(g0, rel=1e-6)


def test_overspecification_ray(rng, sites3, phases3):
    T = 128
    m = random_model(rng, T, K=2, B=4)
    x = rng.normal(size=(3, T))
    lik = JointLikelihood(m, x, sites3, phases3, tol=1e-13)
    base = lik.evaluate(m.a0, m.a1, m.weights, GAMMA)
    for c in (0.3, 2.0, 17.0):
        assert lik.evaluate(m.a0 / c, m.a1 / c, m.weights * c, GAMMA) == pytest.approx(base, rel=1e-12, abs=1e-9)
    _, (g0, g1, gw, _) = lik.evaluate_with_grad(m.a0, m.a1, m.weights, GAMMA)
    along = -g0 * m.a0 - g1 * m.a1 + np.sum(gw * m.weights)
    assert abs(along) < 1e-6 * (1 + abs(base))


def test_likelihood_is_real_and_finite(rng, sites3, phases3):
    m = random_model(rng, 40)
    v = joint_negloglik(m, CoherenceModel(GAMMA), rng.normal(size=(3, 40)), sites3, phases3)
    assert isinstance(v, float) and np.isfinite(v)
