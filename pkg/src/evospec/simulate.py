"""Unconditional and conditional simulation, quantile bands and coverage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evospectrum import EvoSpectrumModel, undifference
from .fitting import FitResult
from .ingest import StationSet, local_phase_offset, project_km
from .likelihood import (JITTER, CoherenceModel, SiteGeometry, SiteOperator,
                         _coherence_from_gamma)
from .spatial import conditional_draw, drift_design, reml_fit
from .splines import COHERENCE_CUTOFF_CPD, fold_cpd
from .trend import TrendFit

log = logging.getLogger(__name__)

MEAN_DRIFT = ("const", "lat", "elev")
JUMP_DRIFT = ("const", "lon", "lat")
SIM_TOL = 1e-11
MIN_CURVATURE = 1.0   # per squared log-weight


def _cn(rng, shape) -> np.ndarray:
    """Standard complex normal with ``E|z|^2 = 1``."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _psd_factor(S) -> np.ndarray:
    """Batched Hermitian square root with negative eigenvalues clipped."""
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


def _coherent_count(T: int) -> int:
    omega = 2 * np.pi * np.arange(T // 2 + 1) / T
    return int(np.sum(fold_cpd(omega) <= COHERENCE_CUTOFF_CPD))


def coherence_stack(coh: CoherenceModel, sites: SiteGeometry, omega) -> np.ndarray:
    """Coherence matrices at each frequency (leading axis); identity above the cutoff."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    n = len(sites.km)
    R = _coherence_from_gamma(coh.gamma(omega), omega, sites.distances(), sites.phase_diffs(coh.clock))
    idx = np.arange(n)
    R[:, idx, idx] = 1.0
    R[fold_cpd(omega) > COHERENCE_CUTOFF_CPD] = np.eye(n)
    return R


def _real_freq(omega, T: int) -> np.ndarray:
    j = np.rint(np.asarray(omega) * T / (2 * np.pi)).astype(int)
    return (j == 0) | (2 * j == T)


def conditional_fourier_draw(coh: CoherenceModel, omega, z_obs, obs: SiteGeometry, targets: SiteGeometry,
                             rng, T: int | None = None):
    """Target coefficients given observed ones at one or more frequencies.

    ``z_obs`` has shape (n,) or (J, n) matching ``omega``. With ``T`` given,
    frequencies 0 and pi are drawn real. Returns ``(draw, mean, cov)``.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    z_obs = np.asarray(z_obs, dtype=complex).reshape(len(omega), -1)
    n = z_obs.shape[1]
    R = coherence_stack(coh, obs.stack(targets), omega)
    Soo, Suo, Suu = R[:, :n, :n], R[:, n:, :n], R[:, n:, n:]
    try:
        G = np.linalg.solve(Soo, np.conj(np.transpose(Suo, (0, 2, 1))))
    except np.linalg.LinAlgError:
        log.info("observed coherence matrix singular; adding jitter %g", JITTER)
        G = np.linalg.solve(Soo + JITTER * np.eye(n), np.conj(np.transpose(Suo, (0, 2, 1))))
    Gh = np.conj(np.transpose(G, (0, 2, 1)))                  # (J, m, n) = Suo Soo^-1
    mean = (Gh @ z_obs[..., None])[..., 0]
    cov = Suu - Gh @ np.conj(np.transpose(Suo, (0, 2, 1)))
    cov = 0.5 * (cov + np.conj(np.transpose(cov, (0, 2, 1))))
    L = _psd_factor(cov)
    m = mean.shape[1]
    eps = _cn(rng, (len(omega), m))
    if T is not None:
        real = _real_freq(omega, T)
        eps[real] = rng.standard_normal((int(real.sum()), m))
        mean[real] = mean[real].real
    draw = mean + (L @ eps[..., None])[..., 0]
    if T is not None:
        draw[real] = draw[real].real
    return draw, mean, cov


def unconditional_coefficients(coh: CoherenceModel, sites: SiteGeometry, T: int, rng) -> np.ndarray:
    """(n, T//2+1) half-spectrum unit coefficients with cross-site coherence."""
    n = len(sites.km)
    H = T // 2 + 1
    J = _coherent_count(T)
    omega = 2 * np.pi * np.arange(J) / T
    L = _psd_factor(coherence_stack(coh, sites, omega))
    eps = _cn(rng, (H, n))
    eps[0] = rng.standard_normal(n)
    if T % 2 == 0:
        eps[-1] = rng.standard_normal(n)
    # coincident sites share one draw above the cutoff too
    eps = eps[:, _first_coincident(sites.km)]
    z = eps.copy()
    z[:J] = (L @ eps[:J, :, None])[..., 0]
    z[0] = z[0].real
    return z.T


def _first_coincident(km) -> np.ndarray:
    """Index of the first site at each site's location."""
    km = np.atleast_2d(km)
    d = np.sqrt(((km[:, None, :] - km[None, :, :]) ** 2).sum(-1))
    return np.argmax(d == 0.0, axis=1)


def transform(model: EvoSpectrumModel, phase: float, z_half) -> np.ndarray:
    """Real series ``C_T(A) z`` from half-spectrum coefficients."""
    op = SiteOperator(model, phase)
    T = op.T
    out = sum(Wk * (T * np.fft.irfft(mk * z_half, n=T)) for Wk, mk in zip(op.W, op.mu))
    return op.sd * out


def simulate_residuals(evo: EvoSpectrumModel, coh: CoherenceModel, sites: SiteGeometry, phases, rng,
                       return_diffs: bool = False):
    """Detrended series whose partial differences follow the model exactly.

    The first value is the first simulated difference, so that
    ``partial_difference(Y, alpha)`` returns the simulated differences.
    """
    z = unconditional_coefficients(coh, sites, evo.T, rng)
    diffs = np.vstack([transform(evo, p, zs) for p, zs in zip(phases, z)])
    Y = np.vstack([undifference(d, evo.alpha, d[0]) for d in diffs])
    return (Y, diffs) if return_diffs else Y


def simulate_unconditional(evo: EvoSpectrumModel, coh: CoherenceModel, data: StationSet, rng,
                           m=None, s=None, jump=None) -> StationSet:
    """Station set ``m + s + J + Y`` at ``data``'s sites with simulated ``Y``.

    ``jump`` is an optional ``(n, T)`` array of jump profiles.
    """
    sites = SiteGeometry.from_lonlat(data.lonlat, data.ref_lat)
    Y = simulate_residuals(evo, coh, sites, data.phase_offsets(), rng)
    X = Y.copy()
    if m is not None:
        X += np.asarray(m)[None, :]
    if s is not None:
        X += np.asarray(s)[:, None]
    if jump is not None:
        X += np.asarray(jump)
    return data.with_temps(X)


def perturb_weights(fit: FitResult, rng, scale: float = 1.0) -> tuple[EvoSpectrumModel, dict]:
    """Model copy with weights drawn from their asymptotic distribution.

    The Hessian is over (log a0, log a1, log w); the direction that rescales
    a0, a1 against all weights is unidentified and removed before inversion.
    """
    evo = fit.evo
    H = fit.hessian
    if H is None or scale == 0:
        return evo.with_params(weights=evo.weights.copy()), {"flag": None}
    P = len(H)
    ray = np.concatenate([[1.0, 1.0], -np.ones(P - 2)])
    ray /= np.linalg.norm(ray)
    proj = np.eye(P) - np.outer(ray, ray)
    vals, vecs = np.linalg.eigh(proj @ H @ proj)
    keep = np.abs(vecs.T @ ray) < 0.5
    flag = None
    if np.any(vals[keep] < -MIN_CURVATURE):
        flag = "indefinite hessian projected to PSD"
    # curvature below MIN_CURVATURE leaves a direction practically unidentified
    keep &= vals > MIN_CURVATURE
    cov = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    cov_w = cov[2:, 2:] * scale ** 2
    L = _psd_factor(cov_w)
    delta = L @ rng.standard_normal(P - 2)
    W = evo.weights * np.exp(delta.reshape(evo.weights.shape))
    return evo.with_params(weights=W), {"flag": flag}


@dataclass
class TargetSites:
    site_ids: list
    lonlat: np.ndarray
    elev: np.ndarray

    @classmethod
    def from_dict(cls, d) -> "TargetSites":
        sites = d["sites"] if isinstance(d, dict) else d
        return cls([s["id"] for s in sites], np.array([[s["lon"], s["lat"]] for s in sites], dtype=float),
                   np.array([s.get("elev", 0.0) for s in sites], dtype=float))


@dataclass
class ConditionalEnsemble:
    site_ids: list
    lonlat: np.ndarray
    draws: np.ndarray                 # (n_sims, m, T)
    seeds: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def bands(self, q: float = 0.9):
        return quantile_bands(self.draws, q)


def _field_draws(values, obs_ll, obs_km, obs_elev, tgt_ll, tgt_km, tgt_elev, names, rng, df=None):
    F = drift_design(names, obs_km, obs_ll, obs_elev)
    fit = reml_fit(values, obs_km, F, names)
    F0 = drift_design(names, tgt_km, tgt_ll, tgt_elev)
    return conditional_draw(fit, tgt_km, F0, fit.dof if df is None else df, rng)


def simulate_conditional(fit: FitResult, trend: TrendFit, data: StationSet, resid, targets: TargetSites,
                         n_sims: int = 99, seed: int = 0, allow_unit_root: bool = False,
                         perturb: bool = True) -> ConditionalEnsemble:
    """Temperature paths at target sites conditional on the observed sites.

    ``resid`` are the detrended observed series. Each draw perturbs the
    weights, decorrelates the observed differences, draws target Fourier
    coefficients, transforms, undifferences from zero and adds the mean,
    a site-mean draw and a jump-profile draw.
    """
    evo0 = fit.evo
    if evo0.alpha >= 1.0 and not allow_unit_root:
        raise ValueError("alpha = 1 makes undifferenced simulations drift; pass allow_unit_root to force")
    T = evo0.T
    ref_lat = data.ref_lat
    obs = SiteGeometry.from_lonlat(data.lonlat, ref_lat)
    tgt = SiteGeometry(targets.lonlat, project_km(targets.lonlat, ref_lat))
    obs_ph = data.phase_offsets()
    tgt_ph = np.array([local_phase_offset(data.clock, lo, data.central_lon, la, ref_lat)
                       for lo, la in targets.lonlat])
    diffs = np.atleast_2d(np.asarray(resid, dtype=float)).copy()
    diffs[:, 1:] = diffs[:, 1:] - evo0.alpha * diffs[:, :-1]
    coincide = [np.flatnonzero(np.all(np.isclose(obs.lonlat, ll), axis=1)) for ll in targets.lonlat]
    m_hat = trend.means.m_hat
    J = _coherent_count(T)
    omega = 2 * np.pi * np.arange(T // 2 + 1) / T
    children = np.random.SeedSequence(seed).spawn(n_sims)
    out = np.empty((n_sims, len(targets.site_ids), T))
    weights, flags = [], []
    jump = trend.jump
    jump_vals = None
    if jump is not None:
        jump_vals = {"tau": jump.tau, "logD": np.log(jump.D), "loginvlam": -np.log(jump.lam)}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        evo, info = perturb_weights(fit, rng, 1.0 if perturb else 0.0)
        weights.append(evo.weights.tolist())
        flags.append(info["flag"])
        z_obs = np.array([SiteOperator(evo, p).solve(x, SIM_TOL)[0] for p, x in zip(obs_ph, diffs)])
        z_tgt = _cn(rng, (len(omega), len(targets.site_ids)))
        z_tgt[0] = rng.standard_normal(z_tgt.shape[1])
        if T % 2 == 0:
            z_tgt[-1] = rng.standard_normal(z_tgt.shape[1])
        z_tgt[:J] = conditional_fourier_draw(fit.coh, omega[:J], z_obs[:, :J].T, obs, tgt, rng, T)[0]
        for k, hit in enumerate(coincide):
            if len(hit):
                z_tgt[:, k] = z_obs[hit[0]]
        s_draw = _field_draws(trend.means.s, data.lonlat, obs.km, data.elev,
                              targets.lonlat, tgt.km, targets.elev, MEAN_DRIFT, rng)
        if jump is not None:
            jd = {k: _field_draws(v, data.lonlat, obs.km, data.elev, targets.lonlat, tgt.km,
                                  targets.elev, JUMP_DRIFT, rng) for k, v in jump_vals.items()}
        for k in range(len(targets.site_ids)):
            d = transform(evo, tgt_ph[k], z_tgt[:, k])
            x1 = d[0] if len(coincide[k]) else 0.0
            path = undifference(d, evo.alpha, x1) + m_hat + s_draw[k]
            if jump is not None:
                path = path + jump.profile_for(jd["tau"][k], np.exp(jd["logD"][k]),
                                               np.exp(-jd["loginvlam"][k]), m_hat)
            out[i, k] = path
    if any(flags):
        log.warning("weight perturbation: %s", next(f for f in flags if f))
    seeds = [{"entropy": int(c.entropy), "spawn_key": list(c.spawn_key)} for c in children]
    return ConditionalEnsemble(list(targets.site_ids), targets.lonlat, out, seeds, weights, flags)


def quantile_bands(draws, q: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Per-minute empirical ``(1-q)/2`` and ``(1+q)/2`` quantiles across draws (axis 0)."""
    draws = np.asarray(draws, dtype=float)
    if draws.shape[0] < 2:
        raise ValueError("need at least two draws")
    lo, hi = np.quantile(draws, [(1 - q) / 2, (1 + q) / 2], axis=0)
    return lo, hi


def day_mask(partition, phase: float = 0.0) -> np.ndarray:
    """True at minutes inside daytime blocks for a site."""
    return partition.day_block[partition.block_index(phase)]


def evaluate_coverage(lower, upper, truth, day_mask) -> dict:
    """Coverage fraction and band-width mean/sd overall, by day and by night."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    day_mask = np.asarray(day_mask, dtype=bool)
    width = upper - lower
    inside = (truth >= lower) & (truth <= upper)

    def stats(mask):
        w = width[mask]
        return {"mean": float(w.mean()) if w.size else float("nan"),
                "sd": float(w.std(ddof=1)) if w.size > 1 else float("nan")}

    return {"coverage": float(inside.mean()), "n": int(inside.size),
            "width": {"daytime": stats(day_mask), "nighttime": stats(~day_mask),
                      "overall": stats(np.ones_like(day_mask))}}


def format_width_row(name: str, report: dict) -> str:
    w = report["width"]
    cell = lambda k: f"{w[k]['mean']:.2f} ({w[k]['sd']:.2f})"  # noqa: E731
    return f"{name}: daytime {cell('daytime')}, nighttime {cell('nighttime')}, overall {cell('overall')}"
