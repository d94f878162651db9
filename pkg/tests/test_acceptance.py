"""Acceptance criteria, one test each; every test records a pass/fail line."""

import time

import numpy as np
from conftest import LONLAT3, dense_ct, dense_joint_negloglik, random_model
from scipy import optimize
from test_spatial import brute_krige, brute_reml, linear_F

from evospec.evospectrum import partial_difference, undifference
from evospec.experiments import coverage_experiment, model_comparison, radiation_config, recovery_experiment
from evospec.fitting import fit_model
from evospec.likelihood import (CoherenceModel, JointLikelihood, SiteGeometry, ct_matvec, ct_solve,
                                joint_negloglik, logdet_approx)
from evospec.simulate import TargetSites, simulate_conditional
from evospec.spatial import krige_predict, reml_fit
from evospec.synthetic import SyntheticConfig, make_synthetic
from evospec.trend import JumpModel, PostJumpLine, fit_jump_params, fit_trend, jump_profile, residuals

GAMMA = np.array([60.0, 40.0, 30.0, 20.0, 10.0])
PHASES3 = 4.0 * (LONLAT3[0, 0] - LONLAT3[:, 0])


def test_1_whittle_equivalence(acceptance):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    T = 64
    m = random_model(rng, T, K=1, B=1, a1=0.0)
    x = rng.normal(size=(1, T))
    one = SiteGeometry.from_lonlat([[-97.0, 36.0]])
    coh = CoherenceModel(GAMMA)
    approx = joint_negloglik(m, coh, x, one, [0.0], tol=1e-13)
    exact = dense_joint_negloglik(m, coh, one, [0.0], x)
    secs = time.perf_counter() - t0
    rel = abs(approx - exact) / abs(exact)
    assert acceptance(1, "Whittle equivalence", rel <= 1e-8 and secs < 1, f"relative error {rel:.2e}", secs)


def test_2_dense_operator_oracle(acceptance):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = {"matvec": 0.0, "solve": 0.0, "logdet": 0.0}
    for T in (8, 16, 32, 64):
        for _ in range(100):
            m = random_model(rng, T)
            phase = rng.uniform(-20, 20)
            C = dense_ct(m, phase)
            v = rng.normal(size=T) + 1j * rng.normal(size=T)
            ref = C @ v
            worst["matvec"] = max(worst["matvec"], np.abs(ct_matvec(m, phase, v) - ref).max() / np.abs(ref).max())
            x = rng.normal(size=T)
            zd = np.linalg.solve(C, x)
            z = ct_solve(m, phase, x, tol=1e-14, maxiter=5000)
            worst["solve"] = max(worst["solve"], np.abs(z - zd).max() / np.abs(zd).max())
            # the surrogate is exact for a single regime with time-varying scale
            u = random_model(rng, T, K=1, B=int(rng.integers(1, 5)))
            exact = np.linalg.slogdet(dense_ct(u, phase))[1] - 0.5 * T * np.log(T)
            worst["logdet"] = max(worst["logdet"], abs(logdet_approx(u, phase) - exact) / max(1.0, abs(exact)))
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-8 and secs < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert acceptance(2, "dense-operator oracle", ok, detail, secs)


def test_3_gradient_check(acceptance):
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    T = 256
    m = random_model(rng, T, K=2, B=5)
    x = rng.normal(size=(3, T))
    sites = SiteGeometry.from_lonlat(LONLAT3)
    lik = JointLikelihood(m, x, sites, PHASES3, tol=1e-13)
    _, (g0, g1, gw, _) = lik.evaluate_with_grad(m.a0, m.a1, m.weights, GAMMA)
    f = lambda a0, a1, W: lik.evaluate(a0, a1, W, GAMMA)  # noqa: E731
    rels = []
    h = 1e-5
    fd0 = (f(m.a0 * (1 + h), m.a1, m.weights) - f(m.a0 * (1 - h), m.a1, m.weights)) / (2 * h * m.a0)
    fd1 = (f(m.a0, m.a1 * (1 + h), m.weights) - f(m.a0, m.a1 * (1 - h), m.weights)) / (2 * h * m.a1)
    rels += [abs(g0 - fd0) / abs(fd0), abs(g1 - fd1) / abs(fd1)]
    for k in range(2):
        for b in range(5):
            up, dn = m.weights.copy(), m.weights.copy()
            step = h * m.weights[k, b]
            up[k, b] += step
            dn[k, b] -= step
            fd = (f(m.a0, m.a1, up) - f(m.a0, m.a1, dn)) / (2 * step)
            rels.append(abs(gw[k, b] - fd) / abs(fd))
    secs = time.perf_counter() - t0
    worst = max(rels)
    assert acceptance(3, "gradient check", worst <= 1e-5 and secs < 30,
                      f"{len(rels)} partials, worst relative error {worst:.1e}", secs)


def test_4_jump_recovery(acceptance):
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    jd, T = 2, 4320
    m = np.zeros(T)
    shared = JumpModel(["a"], None, None, None, np.full(1440, 2.0), PostJumpLine(0.0, 1440 * jd + 1, -1.0),
                       jump_day=jd)
    t = np.arange(1, T + 1)
    good = 0
    worst = [0.0, 0.0, 0.0]
    for _ in range(50):
        tau = 1440 * (jd - 1) + rng.uniform(200, 1200)
        D, lam = rng.uniform(4, 10), rng.uniform(0.1, 0.5)
        x = jump_profile(t, tau, D, lam, shared, m)
        day = slice(1440 * (jd - 1), 1440 * jd)
        tau_bar = int(np.argmin(np.diff(x)[day])) + 1440 * (jd - 1) + 2
        th, dh, lh, failed = fit_jump_params(x[None], [tau_bar], shared, m)
        errs = [abs(th[0] - tau), abs(dh[0] / D - 1), abs(lh[0] / lam - 1)]
        worst = [max(a, b) for a, b in zip(worst, errs)]
        good += errs[0] <= 1 and errs[1] <= 1e-3 and errs[2] <= 1e-3 and not failed[0]
    secs = time.perf_counter() - t0
    assert acceptance(4, "jump recovery", good == 50 and secs < 10,
                      f"{good}/50 recovered; worst |dtau| {worst[0]:.2e}, D {worst[1]:.1e}, lambda {worst[2]:.1e}",
                      secs)


def test_5_spatial_field_oracle(acceptance):
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst = 0.0
    eta_rel = 0.0
    for _ in range(100):
        xy = rng.uniform(0, 100, (5, 2))
        F = linear_F(xy)
        y = rng.normal(size=5)
        fit = reml_fit(y, xy, F)
        worst = max(worst, abs(fit.reml_negloglik - brute_reml(fit.eta, y, xy, F)))
        res = optimize.minimize_scalar(lambda le: brute_reml(np.exp(le), y, xy, F),
                                       bracket=(np.log(fit.eta) - 1, np.log(fit.eta) + 1),
                                       options={"xtol": 1e-12})
        worst = max(worst, fit.reml_negloglik - res.fun)
        eta_rel = max(eta_rel, abs(np.exp(res.x) / fit.eta - 1))
        new = rng.uniform(0, 100, (2, 2))
        b, c = krige_predict(fit, new, linear_F(new))
        bb, cc, _ = brute_krige(fit, xy, F, new, linear_F(new))
        worst = max(worst, np.abs(b - bb).max(), np.abs(c - cc).max())
    secs = time.perf_counter() - t0
    assert acceptance(5, "spatial-field oracle", worst <= 1e-10 and eta_rel < 1e-5 and secs < 10,
                      f"worst abs error {worst:.1e}; REML maximizer agrees to {eta_rel:.1e}", secs)


def test_6_parameter_recovery(acceptance):
    cfg = SyntheticConfig(n_sites=8, days=3, alpha=0.99, offsets=(60.0, -60.0), jump=False, seed=0)
    res = recovery_experiment(cfg)
    B = make_synthetic(cfg).evo.partition.B
    ok_sd = res.sd_rms_error <= 0.10
    ok_alpha = abs(res.alpha_hat - cfg.alpha) <= 0.005 + 1e-12
    ok_off = max(abs(a - b) for a, b in zip(res.offsets_hat, cfg.offsets)) <= 10
    detail = (f"B={B}; sd RMS error {res.sd_rms_error:.3f}; alpha {res.alpha_hat:.3f} (truth {cfg.alpha}); "
              f"offsets {res.offsets_hat} (truth {cfg.offsets})")
    assert acceptance(6, "parameter recovery", ok_sd and ok_alpha and ok_off and B == 7 and res.seconds < 1800,
                      detail, res.seconds)


def test_7_coverage_calibration(acceptance):
    res = coverage_experiment(SyntheticConfig(n_sites=8, days=3, jump_day=2, seed=0), n_hold=2, n_sims=99)
    ok = 0.85 <= res.coverage <= 0.95 and res.width_day > res.width_night and res.seconds < 600
    detail = (f"coverage {res.coverage:.3f}; mean width daytime {res.width_day:.2f} vs "
              f"nighttime {res.width_night:.2f}")
    assert acceptance(7, "coverage calibration", ok, detail, res.seconds)


def test_8_exactness_invariants(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    truth = make_synthetic(SyntheticConfig(n_sites=6, days=2, jump_day=2, seed=5))
    data = truth.data
    trend = fit_trend(data, jump_day=2)
    resid = residuals(data.temps, trend)
    rebuilt = trend.means.m_hat + trend.means.s[:, None] + trend.jump_series(data.T) + resid
    recon = np.abs(rebuilt - data.temps).max()

    x = rng.normal(size=(4, 2000)).cumsum(axis=1)
    diff_err = max(np.abs(undifference(partial_difference(x[k], a), a, x[k, 0]) - x[k]).max()
                   for k, a in enumerate((0.0, 0.5, 0.99, 1.0)))

    _, fit = fit_model(data, resid, truth.config.offsets, truth.config.alpha)
    targets = TargetSites(["copy"], data.lonlat[2:3], data.elev[2:3])
    ens = simulate_conditional(fit, trend, data, resid, targets, n_sims=5, seed=3)
    cond_err = np.abs(ens.draws[:, 0] - data.temps[2]).max() / np.abs(data.temps[2]).max()

    m = random_model(rng, 128, K=2, B=4)
    xs = rng.normal(size=(3, 128))
    lik = JointLikelihood(m, xs, SiteGeometry.from_lonlat(LONLAT3), PHASES3, tol=1e-13)
    base = lik.evaluate(m.a0, m.a1, m.weights, GAMMA)
    ray = max(abs(lik.evaluate(m.a0 / c, m.a1 / c, m.weights * c, GAMMA) - base) / abs(base)
              for c in (0.3, 2.0, 17.0))
    secs = time.perf_counter() - t0
    # conditional draws go through an iterative solve at relative tolerance 1e-11
    ok = recon <= 1e-12 and diff_err <= 1e-10 and cond_err <= 1e-8 and ray <= 1e-9
    detail = (f"reconstruction {recon:.1e}; undifference {diff_err:.1e}; conditional at observed site "
              f"{cond_err:.1e}; ray {ray:.1e}")
    assert acceptance(8, "exactness invariants", ok, detail, secs)


def test_9_model_comparison_ordering(acceptance):
    res = model_comparison(radiation_config(seed=0))
    g = res.gaps()
    ok = min(g.values()) > 10 and res.seconds < 300
    detail = ", ".join(f"{k} {v:.1f}" for k, v in g.items())
    assert acceptance(9, "model-comparison ordering", ok, detail, res.seconds)
