"""Synthetic station networks drawn from a fully specified model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .evospectrum import EvoSpectrumModel, block_partition, smooth_radiation
from .ingest import MINUTES_PER_DAY, SolarClock, StationRecord, StationSet
from .likelihood import CoherenceModel, SiteGeometry
from .simulate import simulate_residuals
from .splines import N_LOW_BASIS, regime_basis
from .trend import JumpModel, PostJumpLine

# night regime damps frequencies above 2 cycles per day
NIGHT_HIGH_SHIFT = np.array([-0.2, -0.4, -0.6, -0.7, -0.7, -0.7, -0.7])


@dataclass
class SyntheticConfig:
    n_sites: int = 8
    days: int = 3
    alpha: float = 0.99
    sunrise: float = 360.0
    sunset: float = 1080.0
    offsets: tuple = (60.0, -60.0)
    a0: float = 0.04
    a1_peak: float = 0.06              # sd added at peak radiation
    peak_radiation: float = 900.0
    day_weights: tuple = (1.0, 0.2)    # (day regime, night regime) in daytime blocks
    night_weights: tuple = (0.1, 0.6)
    weight_jitter: float = 0.15
    gamma: tuple = (120.0, 100.0, 60.0, 30.0, 10.0)
    central: tuple = (-100.0, 37.0)
    spread: tuple = (0.5, 0.4)          # degrees lon, lat
    base_temp: float = 12.0
    diurnal_amp: float = 6.0
    jump: bool = True
    jump_day: int = 2
    front_drop: float = 4.0
    radiation_covariate: bool = True
    seed: int = 0

    @property
    def T(self) -> int:
        return self.days * MINUTES_PER_DAY


@dataclass
class SyntheticTruth:
    config: SyntheticConfig
    data: StationSet
    evo: EvoSpectrumModel
    coh: CoherenceModel
    Y: np.ndarray
    diffs: np.ndarray
    m: np.ndarray
    s: np.ndarray
    J: np.ndarray
    jump_params: dict = field(default_factory=dict)

    def sd_profile(self, k: int) -> np.ndarray:
        return self.evo.sd_profile(self.data.phase_offsets()[k])


def base_regimes(T: int) -> np.ndarray:
    """Day and night log-amplitude coefficients sharing the low-frequency part.

    Scaled so the day regime alone has unit variance at length ``T``.
    """
    cpd = np.linspace(0.0, 720.0, 4001)
    shape = 0.5 * np.log(1.0 + 6.0 / (1.0 + (cpd / 4.0) ** 2))
    c, *_ = np.linalg.lstsq(regime_basis(cpd), shape, rcond=None)
    night = c.copy()
    night[N_LOW_BASIS:] += NIGHT_HIGH_SHIFT
    coeffs = np.vstack([c, night])
    omega = 2 * np.pi * np.arange(T // 2 + 1) / T
    mu = np.exp(coeffs[0] @ regime_basis(omega * 1440 / (2 * np.pi)).T)
    mult = np.full(len(omega), 2.0)
    mult[0] = 1.0
    if T % 2 == 0:
        mult[-1] = 1.0
    return coeffs - 0.5 * np.log(mu ** 2 @ mult)


def radiation_curve(cfg: SyntheticConfig, rng) -> np.ndarray:
    """Half-sine daylight radiation with a random cloudiness factor per day."""
    t = np.arange(cfg.T)
    tod = t % MINUTES_PER_DAY
    day = t // MINUTES_PER_DAY
    frac = np.clip((tod - cfg.sunrise) / (cfg.sunset - cfg.sunrise), 0.0, 1.0)
    cloud = rng.uniform(0.6, 1.0, cfg.days)
    return cfg.peak_radiation * cloud[day] * np.sin(np.pi * frac)


def site_layout(cfg: SyntheticConfig, rng):
    lon0, lat0 = cfg.central
    ll = np.empty((cfg.n_sites, 2))
    ll[0] = cfg.central
    ll[1:, 0] = lon0 + rng.uniform(-cfg.spread[0], cfg.spread[0], cfg.n_sites - 1)
    ll[1:, 1] = lat0 + rng.uniform(-cfg.spread[1], cfg.spread[1], cfg.n_sites - 1)
    elev = rng.uniform(300.0, 1500.0, cfg.n_sites)
    return ll, elev


def make_synthetic(cfg: SyntheticConfig | None = None, layout=None) -> SyntheticTruth:
    """Draw a station network and its decomposition from ``cfg``.

    ``layout`` optionally fixes the sites as ``(ids, lonlat, elev)``; the
    first site is the central one.
    """
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    T = cfg.T
    ll, elev = site_layout(cfg, rng)
    ids = [f"S{k:02d}" for k in range(cfg.n_sites)]
    if layout is not None:
        ids, ll, elev = list(layout[0]), np.asarray(layout[1], dtype=float), np.asarray(layout[2], dtype=float)
        if len(ids) != cfg.n_sites:
            cfg = replace(cfg, n_sites=len(ids))
    raw = radiation_curve(cfg, rng)
    ss = np.tile([cfg.sunrise, cfg.sunset], (cfg.days, 1))
    clock = SolarClock()
    records = tuple(StationRecord(sid, float(lo), float(la), float(e), np.zeros(T))
                    for sid, (lo, la), e in zip(ids, ll, elev))
    data = StationSet(records, raw, ss, float(ll[0, 0]), records[0].site_id, float(ll[0, 1]), clock)
    phases = data.phase_offsets()
    part = block_partition(ss, T, *cfg.offsets, phases)
    day = part.day_block
    W = np.empty((2, part.B))
    W[:, day] = np.array(cfg.day_weights)[:, None]
    W[:, ~day] = np.array(cfg.night_weights)[:, None]
    W *= np.exp(cfg.weight_jitter * rng.standard_normal(W.shape))
    r = smooth_radiation(raw)
    a1 = cfg.a1_peak / cfg.peak_radiation if cfg.radiation_covariate else 0.0
    evo = EvoSpectrumModel(base_regimes(T), W, cfg.a0, a1, cfg.alpha, part, r, clock)
    coh = CoherenceModel(np.array(cfg.gamma, dtype=float), clock)
    sites = SiteGeometry.from_lonlat(ll, data.ref_lat)
    Y, diffs = simulate_residuals(evo, coh, sites, phases, rng, return_diffs=True)

    t = np.arange(1, T + 1)
    m = cfg.base_temp + cfg.diurnal_amp * np.sin(2 * np.pi * (t - cfg.sunrise - 180) / MINUTES_PER_DAY)
    if cfg.jump:
        # the post-front air mass stays cold after the jump day
        m = m - cfg.front_drop * (t > MINUTES_PER_DAY * cfg.jump_day)
    s = 2.0 * (ll[:, 1] - ll[0, 1]) - 0.0065 * (elev - elev.mean()) + 0.2 * rng.standard_normal(cfg.n_sites)
    s -= s.mean()
    J = np.zeros((cfg.n_sites, T))
    params = {}
    if cfg.jump:
        jd = cfg.jump_day
        start = MINUTES_PER_DAY * (jd - 1)
        # pre-front level equals the mean and the post-front line meets the
        # next day's mean, so the profile is continuous at both day edges
        b1 = m[start:start + MINUTES_PER_DAY].copy()
        anchor = min(MINUTES_PER_DAY * jd + 1, T)
        post = float(m[anchor - 1]) if anchor > MINUTES_PER_DAY * jd else float(m[anchor - 1]) - cfg.front_drop
        model = JumpModel([r.site_id for r in records], np.zeros(cfg.n_sites), np.zeros(cfg.n_sites),
                          np.zeros(cfg.n_sites), b1, PostJumpLine(0.0, anchor, post), jd)
        tau = start + 700.0 + 60.0 * (ll[:, 0] - ll[0, 0]) - 30.0 * (ll[:, 1] - ll[0, 1])
        D = 6.0 + 1.5 * (ll[:, 1] - ll[0, 1]) + 0.3 * rng.standard_normal(cfg.n_sites)
        lam = 0.3 * np.exp(0.1 * rng.standard_normal(cfg.n_sites))
        model.tau, model.D, model.lam = tau, D, lam
        J = np.vstack([model.series(k, m) for k in range(cfg.n_sites)])
        params = {"tau": tau, "D": D, "lam": lam, "model": model}
    X = m[None, :] + s[:, None] + J + Y
    return SyntheticTruth(cfg, data.with_temps(X), evo, coh, Y, diffs, m, s, J, params)
