"""Temporal/spatial means, burst removal and the cold-front jump process."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special

from .ingest import MINUTES_PER_DAY, StationSet

log = logging.getLogger(__name__)

MEAN_BANDWIDTH = 20
JUMP_THRESHOLD = -0.35
JUMP_BETA = 1.3
JUMP_NU = (0.01, 0.01, 0.01)
MIN_JUMP_SIZE = 1e-2


def daniell_smooth(x, bandwidth: int, passes: int = 3, causal: bool = False) -> np.ndarray:
    """Moving average over ``[t-w, t+w]`` (or ``[t-w, t]`` if causal), composed ``passes`` times.

    Windows are truncated at the series ends and renormalized over the
    points that remain.
    """
    y = np.asarray(x, dtype=float)
    n = len(y)
    idx = np.arange(n)
    lo = np.maximum(idx - bandwidth, 0)
    hi = np.minimum(idx + (0 if causal else bandwidth), n - 1) + 1
    count = hi - lo
    for _ in range(passes):
        c = np.concatenate([[0.0], np.cumsum(y)])
        y = (c[hi] - c[lo]) / count
    return y


@dataclass(frozen=True)
class MeanCurves:
    m_hat: np.ndarray
    s: np.ndarray
    grand_mean: float


def temporal_mean(temps: np.ndarray, bandwidth: int = MEAN_BANDWIDTH) -> np.ndarray:
    """Triple Daniell smooth of the cross-site average."""
    return daniell_smooth(np.mean(np.atleast_2d(temps), axis=0), bandwidth)


def spatial_site_means(temps: np.ndarray) -> tuple[np.ndarray, float]:
    temps = np.atleast_2d(temps)
    grand = float(temps.mean())
    return temps.mean(axis=1) - grand, grand


def replace_bursts(series, intervals) -> np.ndarray:
    """Replace values strictly inside each (start, end) minute interval by a line.

    Minutes are 1-based; the endpoint values are kept.
    """
    x = np.array(series, dtype=float)
    ivs = sorted((int(a), int(b)) for a, b in intervals)
    for (a0, b0), (a1, _) in zip(ivs, ivs[1:]):
        if a1 < b0:
            raise ValueError(f"burst intervals ({a0},{b0}) and ({a1},...) overlap")
    for a, b in ivs:
        if not 1 <= a < b <= len(x):
            raise ValueError(f"burst interval ({a},{b}) outside 1..{len(x)}")
        i, j = a - 1, b - 1
        x[i:j + 1] = np.linspace(x[i], x[j], j - i + 1)
    return x


def day_minutes(jump_day: int) -> np.ndarray:
    """1-based minute indices of day ``jump_day`` (also 1-based)."""
    return np.arange(MINUTES_PER_DAY * (jump_day - 1) + 1, MINUTES_PER_DAY * jump_day + 1)


def preliminary_jump_times(temps: np.ndarray, jump_day: int, threshold: float = JUMP_THRESHOLD,
                           site_ids=None) -> np.ndarray:
    """First minute in the jump day at which each site's first difference drops below ``threshold``."""
    temps = np.atleast_2d(temps)
    minutes = day_minutes(jump_day)
    minutes = minutes[(minutes >= 2) & (minutes <= temps.shape[1])]
    out = np.empty(len(temps), dtype=int)
    for k, x in enumerate(temps):
        dx = x[minutes - 1] - x[minutes - 2]
        hits = np.flatnonzero(dx < threshold)
        if len(hits) == 0:
            name = site_ids[k] if site_ids is not None else str(k)
            raise ValueError(f"no first difference below {threshold} on day {jump_day} at site {name}")
        out[k] = minutes[hits[0]]
    return out


def fit_prejump_mean(temps: np.ndarray, tau_bar, jump_day: int,
                     bandwidth: int = MEAN_BANDWIDTH) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed average over not-yet-jumped sites across the jump day.

    Returns ``(b1, held)``; ``held`` marks minutes where no site remained
    and the last available average was carried forward.
    """
    temps = np.atleast_2d(temps)
    tau_bar = np.asarray(tau_bar)
    minutes = day_minutes(jump_day)
    avg = np.empty(len(minutes))
    held = np.zeros(len(minutes), dtype=bool)
    last = np.nan
    for i, t in enumerate(minutes):
        active = tau_bar > t
        if active.any():
            last = temps[active, t - 1].mean()
        else:
            held[i] = True
        avg[i] = last
    if np.isnan(avg[0]):
        raise ValueError("every site jumps at the first minute of the jump day")
    return daniell_smooth(avg, bandwidth), held


@dataclass(frozen=True)
class PostJumpLine:
    slope: float
    anchor_minute: int
    anchor_value: float

    def __call__(self, t):
        return self.anchor_value + self.slope * (np.asarray(t, dtype=float) - self.anchor_minute)


def fit_postjump_mean(temps: np.ndarray, tau_bar, m_hat, jump_day: int, lag: int = 60) -> PostJumpLine:
    """Least-squares line through post-jump averages, pinned to ``m_hat`` at the next day's first minute."""
    temps = np.atleast_2d(temps)
    tau_bar = np.asarray(tau_bar)
    T = temps.shape[1]
    anchor = min(MINUTES_PER_DAY * jump_day + 1, T)
    c = float(m_hat[anchor - 1])
    ts, ys = [], []
    for t in day_minutes(jump_day):
        done = tau_bar + lag < t
        if done.any():
            ts.append(t)
            ys.append(temps[done, t - 1].mean())
    if len(ts) < 2:
        raise ValueError("fewer than two post-jump time points to fit b2")
    u = np.asarray(ts, dtype=float) - anchor
    slope = float(u @ (np.asarray(ys) - c) / (u @ u))
    return PostJumpLine(slope, anchor, c)


@dataclass
class JumpModel:
    site_ids: list
    tau: np.ndarray
    D: np.ndarray
    lam: np.ndarray
    b1: np.ndarray
    b2: PostJumpLine
    jump_day: int = 5
    beta: float = JUMP_BETA
    nu: tuple = JUMP_NU
    b1_held: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    def profile(self, t, k: int, m_hat) -> np.ndarray:
        return jump_profile(t, self.tau[k], self.D[k], self.lam[k], self, m_hat)

    def series(self, k: int, m_hat) -> np.ndarray:
        return self.profile(np.arange(1, len(m_hat) + 1), k, m_hat)

    def profile_for(self, tau, D, lam, m_hat) -> np.ndarray:
        return jump_profile(np.arange(1, len(m_hat) + 1), tau, D, lam, self, m_hat)


def _interp_minutes(values, first_minute: int, t):
    """Linear interpolation of a per-minute series, clamped at its ends."""
    values = np.asarray(values, dtype=float)
    if len(values) == 1:
        return np.full(np.shape(t), values[0])
    pos = np.clip(np.asarray(t, dtype=float) - first_minute, 0.0, len(values) - 1.0)
    i = np.minimum(pos.astype(int), len(values) - 2)
    frac = pos - i
    return values[i] * (1.0 - frac) + values[i + 1] * frac


def gamma_cdf(x, shape: float, rate: float):
    """Regularized lower incomplete gamma P(shape, rate*x), zero for x<=0."""
    x = np.asarray(x, dtype=float)
    return special.gammainc(shape, rate * np.maximum(x, 0.0))


def jump_profile(t, tau: float, D: float, lam: float, shared, m_hat) -> np.ndarray:
    """Jump process value at 1-based minutes ``t`` for one site.

    ``shared`` supplies ``b1`` (over the jump day), ``b2``, ``beta``, ``nu``
    and ``jump_day``.
    """
    t = np.asarray(t, dtype=float)
    day0 = MINUTES_PER_DAY * (shared.jump_day - 1)
    day1 = MINUTES_PER_DAY * shared.jump_day
    m_hat = np.asarray(m_hat, dtype=float)
    m_at = lambda u: _interp_minutes(m_hat, 1, u)  # noqa: E731
    b1_at = lambda u: _interp_minutes(shared.b1, day0 + 1, u)  # noqa: E731
    nu1, nu2, nu3 = shared.nu

    out = np.zeros_like(t)
    pre = (t > day0) & (t < tau)
    out[pre] = b1_at(t[pre]) - m_at(t[pre])
    post = (t >= tau) & (t <= day1)
    if post.any():
        u = t[post] - tau
        start = b1_at(tau) - m_at(tau)
        out[post] = (start * np.exp(-nu1 * u)
                     - D * gamma_cdf(u, shared.beta, lam)
                     + D * (1.0 - np.exp(-nu2 * u))
                     + (shared.b2(t[post]) - m_at(t[post])) * (1.0 - np.exp(-nu3 * u)))
    return out


def _jump_objective(params, t, target_dx, shared, m_hat):
    tau, logD, loglam = params
    t_all = np.concatenate([[t[0] - 1], t])
    level = jump_profile(t_all, tau, np.exp(logD), np.exp(loglam), shared, m_hat) \
        + _interp_minutes(m_hat, 1, t_all)
    r = np.diff(level) - target_dx
    return float(r @ r)


def fit_jump_params(temps: np.ndarray, tau_bar, shared, m_hat, window=(-3, 20),
                    lam0: float = 0.3) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-site (tau, D, lambda) by matching first differences near the preliminary jump time.

    Returns ``(tau, D, lam, failed)`` where ``failed`` flags sites at which
    the search did not improve on its starting point or the jump size
    collapsed below ``MIN_JUMP_SIZE``.
    """
    temps = np.atleast_2d(temps)
    tau_bar = np.asarray(tau_bar, dtype=float)
    T = temps.shape[1]
    n = len(temps)
    tau = np.empty(n)
    D = np.empty(n)
    lam = np.empty(n)
    failed = np.zeros(n, dtype=bool)
    for k in range(n):
        t = np.arange(int(tau_bar[k]) + window[0], int(tau_bar[k]) + window[1] + 1)
        t = t[(t >= 2) & (t <= T)]
        dx = temps[k, t - 1] - temps[k, t - 2]
        drop = max(-(temps[k, t[-1] - 1] - temps[k, t[0] - 2]), 0.5)
        x0 = np.array([tau_bar[k], np.log(drop), np.log(lam0)])
        f0 = _jump_objective(x0, t, dx, shared, m_hat)
        best = (f0, x0)
        for shift in (-2.0, -1.0, 0.0, 1.0):
            start = x0 + np.array([shift, 0.0, 0.0])
            simplex = np.vstack([start, start + np.diag([0.7, 0.2, 0.2])])
            res = optimize.minimize(_jump_objective, start, args=(t, dx, shared, m_hat),
                                    method="Nelder-Mead",
                                    options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 4000,
                                             "maxfev": 8000, "initial_simplex": simplex})
            if res.fun < best[0]:
                best = (res.fun, res.x)
        if best[0] >= f0:
            failed[k] = True
            log.warning("jump fit at site %d did not improve on its initial point", k)
        elif np.exp(best[1][1]) < MIN_JUMP_SIZE:
            failed[k] = True
            log.warning("jump size at site %d collapsed towards zero", k)
        tau[k], D[k], lam[k] = best[1][0], np.exp(best[1][1]), np.exp(best[1][2])
    return tau, D, lam, failed


@dataclass
class TrendFit:
    means: MeanCurves
    jump: JumpModel | None
    bursts: dict = field(default_factory=dict)

    def jump_series(self, T: int) -> np.ndarray:
        n = len(self.means.s)
        if self.jump is None:
            return np.zeros((n, T))
        return np.vstack([self.jump.series(k, self.means.m_hat) for k in range(n)])

    def to_json(self, path, config_hash: str = "") -> None:
        path = Path(path)
        arrays = path.with_suffix(".npz")
        payload = {
            "m_hat_ref": arrays.name,
            "grand_mean": self.means.grand_mean,
            "s": self.means.s.tolist(),
            "bursts": self.bursts,
            "config_hash": config_hash,
        }
        save = {"m_hat": self.means.m_hat}
        if self.jump is not None:
            j = self.jump
            payload["jump"] = {
                "beta": j.beta, "nu": list(j.nu), "jump_day": j.jump_day,
                "sites": [{"id": sid, "tau": float(a), "D": float(b), "lambda": float(c)}
                          for sid, a, b, c in zip(j.site_ids, j.tau, j.D, j.lam)],
                "b2": {"slope": j.b2.slope, "anchor": j.b2.anchor_minute, "anchor_value": j.b2.anchor_value},
                "flags": j.flags,
            }
            save["b1"] = j.b1
        with open(arrays, "wb") as fh:
            np.savez(fh, **save)
        path.write_text(json.dumps(payload, indent=1))

    @classmethod
    def from_json(cls, path) -> "TrendFit":
        path = Path(path)
        payload = json.loads(path.read_text())
        with np.load(path.parent / payload["m_hat_ref"]) as z:
            m_hat = z["m_hat"]
            b1 = z["b1"] if "b1" in z else None
        means = MeanCurves(m_hat, np.asarray(payload["s"]), payload["grand_mean"])
        jump = None
        if "jump" in payload:
            j = payload["jump"]
            sites = j["sites"]
            jump = JumpModel(
                site_ids=[s["id"] for s in sites],
                tau=np.array([s["tau"] for s in sites]),
                D=np.array([s["D"] for s in sites]),
                lam=np.array([s["lambda"] for s in sites]),
                b1=b1,
                b2=PostJumpLine(j["b2"]["slope"], j["b2"]["anchor"], j["b2"]["anchor_value"]),
                jump_day=j["jump_day"], beta=j["beta"], nu=tuple(j["nu"]), flags=j.get("flags", {}),
            )
        return cls(means, jump, payload.get("bursts", {}))


def fit_trend(data: StationSet, bursts: dict | None = None, jump_day: int | None = 5,
              threshold: float = JUMP_THRESHOLD) -> TrendFit:
    """Means, burst replacement and jump process for a gap-free station set.

    ``bursts`` maps site id to a list of (start, end) minute intervals.
    ``jump_day=None`` skips the jump process.
    """
    temps = data.temps.copy()
    bursts = bursts or {}
    for k, sid in enumerate(data.site_ids):
        if sid in bursts:
            temps[k] = replace_bursts(temps[k], bursts[sid])
    m_hat = temporal_mean(temps)
    s, grand = spatial_site_means(temps)
    means = MeanCurves(m_hat, s, grand)
    if jump_day is None:
        return TrendFit(means, None, bursts)

    tau_bar = preliminary_jump_times(temps, jump_day, threshold, data.site_ids)
    b1, held = fit_prejump_mean(temps, tau_bar, jump_day)
    b2 = fit_postjump_mean(temps, tau_bar, m_hat, jump_day)
    jump = JumpModel(data.site_ids, tau_bar.astype(float), np.ones(data.n), np.full(data.n, 0.3),
                     b1, b2, jump_day, b1_held=held)
    tau, D, lam, failed = fit_jump_params(temps, tau_bar, jump, m_hat)
    jump.tau, jump.D, jump.lam = tau, D, lam
    jump.flags = {"b1_held_minutes": int(held.sum()), "failed_sites": [
        sid for sid, f in zip(data.site_ids, failed) if f]}
    return TrendFit(means, jump, bursts)


def residuals(temps: np.ndarray, trend: TrendFit) -> np.ndarray:
    """Residuals X - m - s - J, one row per site."""
    temps = np.atleast_2d(temps)
    m = trend.means
    return temps - m.m_hat[None, :] - m.s[:, None] - trend.jump_series(temps.shape[1])
