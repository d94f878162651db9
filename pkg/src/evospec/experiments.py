"""Synthetic experiments: parameter recovery, interpolation coverage and variant comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fitting import fit_model, fit_variant, grid_search_alpha, grid_search_offsets, refine_quadratic
from .ingest import local_phase_offset
from .simulate import TargetSites, day_mask, evaluate_coverage, simulate_conditional
from .synthetic import SyntheticConfig, make_synthetic
from .trend import fit_trend, residuals


def sd_profile_error(fitted, truth, phases) -> float:
    """Worst per-site RMS relative error of the per-minute sd profile."""
    return max(float(np.sqrt(np.mean((fitted.sd_profile(p) / truth.sd_profile(p) - 1.0) ** 2)))
               for p in phases)


def offset_grid(center, step: float, half_width: int) -> list:
    a = center[0] + step * np.arange(-half_width, half_width + 1)
    b = center[1] + step * np.arange(-half_width, half_width + 1)
    return [(float(x), float(y)) for x in a for y in b]


@dataclass
class RecoveryResult:
    sd_rms_error: float
    alpha_hat: float
    offsets_hat: tuple
    coarse_best: tuple
    refined: tuple
    alpha_table: object
    offset_tables: list
    seconds: float


def recovery_experiment(cfg: SyntheticConfig | None = None, alphas=None, coarse_step: float = 30.0,
                        fine_step: float = 10.0, workers: int = 1) -> RecoveryResult:
    """Fit the detrended series of a known model and grid-search alpha and the offsets.

    The true detrended series is used so that recovery is judged on the
    spectral model alone.
    """
    t0 = time.perf_counter()
    cfg = cfg or SyntheticConfig(n_sites=8, days=3, jump=False)
    truth = make_synthetic(cfg)
    data, Y = truth.data, truth.Y
    _, fit = fit_model(data, Y, cfg.offsets, cfg.alpha, hessian=False)
    err = sd_profile_error(fit.evo, truth.evo, data.phase_offsets())

    alphas = np.round(np.arange(0.95, 1.0 + 1e-9, 0.005), 3) if alphas is None else alphas
    alpha_hat, alpha_table = grid_search_alpha(data, Y, alphas, cfg.offsets, workers=workers)

    # coarse grid centred away from the truth, then a fine grid around its best cell
    start = (round(cfg.offsets[0] / coarse_step) * coarse_step + coarse_step / 2,
             round(cfg.offsets[1] / coarse_step) * coarse_step - coarse_step / 2)
    coarse = grid_search_offsets(data, Y, offset_grid(start, coarse_step, 2), cfg.alpha, workers=workers)
    fine = grid_search_offsets(data, Y, offset_grid(coarse.best[0], fine_step, 2), cfg.alpha, workers=workers)
    refined, _ = refine_quadratic(fine)
    return RecoveryResult(err, float(alpha_hat), fine.best[0], coarse.best[0], refined, alpha_table,
                          [coarse, fine], time.perf_counter() - t0)


@dataclass
class CoverageResult:
    coverage: float
    reports: dict
    width_day: float
    width_night: float
    seconds: float
    held_out: list = field(default_factory=list)


def coverage_experiment(cfg: SyntheticConfig | None = None, n_hold: int = 2, n_sims: int = 99,
                        level: float = 0.9, sim_seed: int = 7) -> CoverageResult:
    """Hold out sites, fit on the rest, and score conditional-simulation bands."""
    t0 = time.perf_counter()
    cfg = cfg or SyntheticConfig(n_sites=8, days=3, jump_day=2)
    truth = make_synthetic(cfg)
    data = truth.data
    held = data.site_ids[-n_hold:]
    obs = data.subset([s for s in data.site_ids if s not in held])
    trend = fit_trend(obs, jump_day=cfg.jump_day if cfg.jump else None)
    resid = residuals(obs.temps, trend)
    _, fit = fit_model(obs, resid, cfg.offsets, cfg.alpha)
    tgt = data.subset(held)
    targets = TargetSites(list(held), tgt.lonlat, tgt.elev)
    ens = simulate_conditional(fit, trend, obs, resid, targets, n_sims=n_sims, seed=sim_seed)
    lower, upper = ens.bands(level)
    reports, inside, wd, wn = {}, [], [], []
    for k, sid in enumerate(held):
        lon, lat = tgt.lonlat[k]
        phase = local_phase_offset(obs.clock, lon, obs.central_lon, lat, obs.ref_lat)
        mask = day_mask(fit.evo.partition, phase)
        rep = evaluate_coverage(lower[k], upper[k], tgt.temps[k], mask)
        reports[sid] = rep
        inside.append((tgt.temps[k] >= lower[k]) & (tgt.temps[k] <= upper[k]))
        width = upper[k] - lower[k]
        wd.append(width[mask])
        wn.append(width[~mask])
    return CoverageResult(float(np.mean(inside)), reports, float(np.concatenate(wd).mean()),
                          float(np.concatenate(wn).mean()), time.perf_counter() - t0, list(held))


@dataclass
class ComparisonResult:
    logliks: dict
    seconds: float

    def gaps(self) -> dict:
        ll = self.logliks
        return {"radiation-daynight": ll["radiation"] - ll["daynight"],
                "daynight-stationary": ll["daynight"] - ll["stationary"]}


def radiation_config(**kw) -> SyntheticConfig:
    """Synthetic truth whose variance varies only through radiation (same regime mix day and night)."""
    base = dict(n_sites=8, days=3, jump=False, day_weights=(1.0, 0.2), night_weights=(1.0, 0.2))
    return SyntheticConfig(**{**base, **kw})


def model_comparison(cfg: SyntheticConfig | None = None, offsets=None, alpha: float = 1.0) -> ComparisonResult:
    """Maximized loglikelihoods of the restricted variants, on first differences by default."""
    t0 = time.perf_counter()
    cfg = cfg or radiation_config()
    truth = make_synthetic(cfg)
    offsets = cfg.offsets if offsets is None else offsets
    ll = {v: fit_variant(truth.data, truth.Y, v, offsets=offsets, alpha=alpha).loglik
          for v in ("stationary", "daynight", "radiation")}
    return ComparisonResult(ll, time.perf_counter() - t0)


def with_seed(cfg: SyntheticConfig, seed: int) -> SyntheticConfig:
    return replace(cfg, seed=seed)
