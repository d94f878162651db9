"""Time-varying transfer function: differencing, radiation modulation, blocks and regimes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, signal

from .ingest import MINUTES_PER_DAY, SolarClock, StationSet
from .splines import (LOW_FREQ_CPD, N_LOW_BASIS, REGIME_KNOTS, fold_cpd, rad_to_cpd,
                      regime_basis)
from .trend import daniell_smooth

log = logging.getLogger(__name__)

RADIATION_BANDWIDTH = 10
MIN_BLOCK = 32
GRID_SIZE = 512


def partial_difference(x, alpha: float) -> np.ndarray:
    """``x(t) - alpha*x(t-1)`` for t >= 2; the first entry is ``x(1)``."""
    x = np.asarray(x, dtype=float)
    out = x.copy()
    out[..., 1:] = x[..., 1:] - alpha * x[..., :-1]
    return out


def undifference(diffs, alpha: float, x1: float = 0.0) -> np.ndarray:
    """Invert :func:`partial_difference` starting from ``x(1) = x1``."""
    d = np.array(diffs, dtype=float)
    d[..., 0] = x1
    return signal.lfilter([1.0], [1.0, -alpha], d, axis=-1)


def smooth_radiation(raw) -> np.ndarray:
    """Left-sided 10-minute Daniell kernel applied three times."""
    return daniell_smooth(raw, RADIATION_BANDWIDTH, causal=True)


def shift_series(x, lag: float) -> np.ndarray:
    """``x(t - lag)`` by linear interpolation, held constant past the ends."""
    x = np.asarray(x, dtype=float)
    t = np.arange(len(x), dtype=float)
    if lag == 0:
        return x.copy()
    return np.interp(t - lag, t, x)


@dataclass(frozen=True)
class PrelimRadiation:
    a0: float
    a1: float
    identified: bool = True

    def sd(self, r) -> np.ndarray:
        return self.a0 + self.a1 * np.asarray(r)


def fit_prelim_radiation(diffs, r, phases=None) -> PrelimRadiation:
    """Pooled Gaussian MLE of ``diffs(t, site) ~ N(0, (a0 + a1 r(t - phase))^2)``.

    ``a0 + a1 r > 0`` is enforced by optimizing the log standard deviation
    at the smallest and largest radiation values.
    """
    diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
    n, T = diffs.shape
    phases = np.zeros(n) if phases is None else np.asarray(phases, dtype=float)
    rs = np.vstack([shift_series(r, p) for p in phases])
    d2 = diffs ** 2
    rmax = float(rs.max())
    rmin = float(rs.min())
    if rmax - rmin <= 1e-12 * max(1.0, abs(rmax)):
        return PrelimRadiation(float(np.sqrt(d2.mean())), 0.0, identified=False)

    def unpack(p):
        lo, hi = np.exp(p)
        a1 = (hi - lo) / (rmax - rmin)
        return lo - a1 * rmin, a1

    def nll(p):
        a0, a1 = unpack(p)
        sd = a0 + a1 * rs
        return float(np.sum(np.log(sd)) + 0.5 * np.sum(d2 / sd ** 2))

    s0 = np.log(np.sqrt(d2.mean()))
    res = optimize.minimize(nll, [s0, s0], method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 4000})
    res = optimize.minimize(nll, res.x, method="BFGS", options={"gtol": 1e-8})
    a0, a1 = unpack(res.x)
    return PrelimRadiation(float(a0), float(a1))


@dataclass(frozen=True)
class BlockPartition:
    """Day/night blocks anchored a fixed time after sunrise and before sunset.

    ``changepoints`` are 1-based first minutes of each new block at the
    central site; site ``phase`` shifts them later for sites to the west.
    """

    changepoints: np.ndarray
    sunrise_offset: float
    sunset_offset: float
    T: int
    first_is_day: bool = False

    @property
    def B(self) -> int:
        return len(self.changepoints) + 1

    @property
    def day_block(self) -> np.ndarray:
        b = np.arange(self.B)
        return (b % 2 == 1) if not self.first_is_day else (b % 2 == 0)

    def site_changepoints(self, phase: float = 0.0) -> np.ndarray:
        return np.clip(np.round(self.changepoints + phase), 1, self.T + 1).astype(int)

    def block_index(self, phase: float = 0.0) -> np.ndarray:
        """Block number of each minute (0-based array position) at a site."""
        minutes = np.arange(1, self.T + 1)
        return np.searchsorted(self.site_changepoints(phase), minutes, side="right")

    def block_bounds(self, phase: float = 0.0):
        """(start, stop) 0-based slices for every block at a site."""
        cps = self.site_changepoints(phase) - 1
        edges = np.concatenate([[0], cps, [self.T]])
        return list(zip(edges[:-1], edges[1:]))


def block_partition(sunrise_sunset, T: int, sunrise_offset: float, sunset_offset: float,
                    phases=None) -> BlockPartition:
    """Changepoints at local sunrise + offset and sunset + offset for each day.

    ``phases`` (per-site minutes) are only used to check that no site's
    shifted day collapses.
    """
    ss = np.asarray(sunrise_sunset, dtype=float).reshape(-1, 2)
    rise = ss[:, 0] + sunrise_offset
    sets = ss[:, 1] + sunset_offset
    if np.any(rise >= sets):
        raise ValueError(f"offsets ({sunrise_offset}, {sunset_offset}) make shifted sunrise "
                         "reach shifted sunset")
    base = MINUTES_PER_DAY * np.arange(len(ss))
    cps = np.column_stack([base + rise, base + sets]).ravel()
    if np.any(np.diff(cps) <= 0):
        raise ValueError("changepoints are not increasing; offsets cross day boundaries")
    part = BlockPartition(cps, float(sunrise_offset), float(sunset_offset), int(T))
    for p in ([] if phases is None else phases):
        if np.any(np.diff(part.site_changepoints(p)) < 0):
            raise ValueError("site phase produces crossing changepoints")
    return part


def partition_for(data: StationSet, sunrise_offset: float, sunset_offset: float) -> BlockPartition:
    return block_partition(data.sunrise_sunset, data.T, sunrise_offset, sunset_offset,
                           data.phase_offsets())


@dataclass(frozen=True)
class PeriodogramAverages:
    grid: np.ndarray          # radians/minute on [0, pi]
    day: np.ndarray
    night: np.ndarray
    month_freq: np.ndarray    # native Fourier frequencies of the full record
    month: np.ndarray
    n_day: int = 0
    n_night: int = 0


def periodogram(x, T_ref: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-sided periodogram ``|DFT|^2 / (len(x) * T_ref)`` at rfft frequencies.

    With ``T_ref`` the length of the full record this has expectation
    ``|A|^2`` under the unit-variance discrete spectral model.
    """
    x = np.asarray(x, dtype=float)
    Tb = len(x)
    T_ref = Tb if T_ref is None else T_ref
    freq = 2 * np.pi * np.arange(Tb // 2 + 1) / Tb
    return freq, np.abs(np.fft.rfft(x)) ** 2 / (Tb * T_ref)


def average_periodograms(scaled, partition: BlockPartition, phases=None,
                         grid_size: int = GRID_SIZE, min_block: int = MIN_BLOCK) -> PeriodogramAverages:
    """Average block periodograms over day blocks and night blocks, plus the full-record average."""
    scaled = np.atleast_2d(np.asarray(scaled, dtype=float))
    n, T = scaled.shape
    phases = np.zeros(n) if phases is None else np.asarray(phases, dtype=float)
    grid = np.linspace(0.0, np.pi, grid_size)
    sums = {True: np.zeros(grid_size), False: np.zeros(grid_size)}
    counts = {True: 0, False: 0}
    skipped = 0
    day = partition.day_block
    for x, ph in zip(scaled, phases):
        for b, (i, j) in enumerate(partition.block_bounds(ph)):
            if j - i < min_block:
                skipped += j - i > 0
                continue
            f, I = periodogram(x[i:j], T)
            sums[bool(day[b])] += np.interp(grid, f, I)
            counts[bool(day[b])] += 1
    if skipped:
        log.warning("skipped %d blocks shorter than %d minutes", skipped, min_block)
    if counts[True] == 0 or counts[False] == 0:
        raise ValueError("need at least one daytime and one nighttime block")
    month_freq = 2 * np.pi * np.arange(T // 2 + 1) / T
    month = np.mean([periodogram(x)[1] for x in scaled], axis=0)
    return PeriodogramAverages(grid, sums[True] / counts[True], sums[False] / counts[False],
                               month_freq, month, counts[True], counts[False])


def _half_log(p):
    return 0.5 * np.log(np.maximum(p, 1e-300))


def fit_regimes(avg: PeriodogramAverages, low_cpd: float = LOW_FREQ_CPD) -> np.ndarray:
    """Log-amplitude spline coefficients (2, 15) for the day and night regimes.

    The 8 low-frequency coefficients come from the full-record average and
    are shared; the other 7 are fitted separately to each block average.
    ``low_cpd`` is kept for reference: only the first 8 columns are nonzero
    below it.
    """
    # all columns are fitted to the full record so that the low block stays
    # determined when few Fourier frequencies fall below low_cpd
    Bm = regime_basis(rad_to_cpd(avg.month_freq))
    c_all, *_ = np.linalg.lstsq(Bm, _half_log(avg.month), rcond=None)
    c_low = c_all[:N_LOW_BASIS]
    Bg = regime_basis(rad_to_cpd(avg.grid))
    high = Bg[:, N_LOW_BASIS:]
    if np.linalg.matrix_rank(high) < high.shape[1]:
        raise np.linalg.LinAlgError("singular regime design")
    out = np.empty((2, Bg.shape[1]))
    for k, target in enumerate((avg.day, avg.night)):
        resid = _half_log(target) - Bg[:, :N_LOW_BASIS] @ c_low
        c_high, *_ = np.linalg.lstsq(high, resid, rcond=None)
        out[k] = np.concatenate([c_low, c_high])
    return out


def fit_single_regime(avg: PeriodogramAverages) -> np.ndarray:
    """All 15 coefficients of one regime fitted to the full-record average."""
    B = regime_basis(rad_to_cpd(avg.month_freq))
    c, *_ = np.linalg.lstsq(B, _half_log(avg.month), rcond=None)
    return c[None, :]


def regime_values(coeffs, omega) -> np.ndarray:
    """Regime amplitudes ``exp(spline)`` at frequencies ``omega`` (rad/min), shape (K, len)."""
    return np.exp(np.atleast_2d(coeffs) @ regime_basis(fold_cpd(omega)).T)


@dataclass
class EvoSpectrumModel:
    """Parameters that fully determine the transfer function at every site."""

    regime_coeffs: np.ndarray         # (K, 15)
    weights: np.ndarray               # (K, B)
    a0: float
    a1: float
    alpha: float
    partition: BlockPartition
    radiation: np.ndarray             # smoothed, central site
    clock: SolarClock = field(default_factory=SolarClock)

    def __post_init__(self):
        self.regime_coeffs = np.atleast_2d(np.asarray(self.regime_coeffs, dtype=float))
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if self.weights.shape != (self.K, self.partition.B):
            raise ValueError(f"weights shape {self.weights.shape} != ({self.K}, {self.partition.B})")

    @property
    def K(self) -> int:
        return len(self.regime_coeffs)

    @property
    def T(self) -> int:
        return len(self.radiation)

    def site_radiation(self, phase: float = 0.0) -> np.ndarray:
        return shift_series(self.radiation, phase)

    def modulation(self, phase: float = 0.0) -> np.ndarray:
        """``a0 + a1 r(t - phase)`` over the record."""
        return self.a0 + self.a1 * self.site_radiation(phase)

    def site_weights(self, phase: float = 0.0) -> np.ndarray:
        """(K, T) regime weights in force at each minute."""
        return self.weights[:, self.partition.block_index(phase)]

    def regimes_half(self, T: int | None = None) -> np.ndarray:
        """(K, T//2+1) regime amplitudes at nonnegative Fourier frequencies."""
        T = self.T if T is None else T
        return regime_values(self.regime_coeffs, 2 * np.pi * np.arange(T // 2 + 1) / T)

    def sd_profile(self, phase: float = 0.0) -> np.ndarray:
        """Model standard deviation of the partial differences at every minute."""
        mu = self.regimes_half()
        T = self.T
        mult = np.full(mu.shape[1], 2.0)
        mult[0] = 1.0
        if T % 2 == 0:
            mult[-1] = 1.0
        blocks = self.partition.block_index(phase)
        var_b = ((self.weights.T @ mu) ** 2) @ mult
        return self.modulation(phase) * np.sqrt(var_b[blocks])

    def with_params(self, **kw) -> "EvoSpectrumModel":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "a0": self.a0, "a1": self.a1,
            "offsets": {"sunrise": self.partition.sunrise_offset, "sunset": self.partition.sunset_offset},
            "changepoints": self.partition.changepoints.tolist(),
            "regimes": {"knots": REGIME_KNOTS.tolist(),
                        **{f"coeffs{k + 1}": c.tolist() for k, c in enumerate(self.regime_coeffs)}},
            "weights": self.weights.tolist(),
            "clock": {"theta": self.clock.theta, "phi": list(self.clock.phi)},
        }

    @classmethod
    def from_dict(cls, d: dict, radiation) -> "EvoSpectrumModel":
        K = len(d["weights"])
        coeffs = [d["regimes"][f"coeffs{k + 1}"] for k in range(K)]
        part = BlockPartition(np.asarray(d["changepoints"], dtype=float), d["offsets"]["sunrise"],
                              d["offsets"]["sunset"], len(radiation))
        clock = SolarClock(d["clock"]["theta"], tuple(d["clock"]["phi"]))
        return cls(np.asarray(coeffs), np.asarray(d["weights"]), d["a0"], d["a1"], d["alpha"],
                   part, np.asarray(radiation, dtype=float), clock)


def transfer_function(model: EvoSpectrumModel, t, phase: float, omega) -> np.ndarray:
    """Amplitude ``A`` at 1-based minutes ``t`` and frequencies ``omega`` for a site.

    Returns an array of shape (len(t), len(omega)).
    """
    t = np.atleast_1d(np.asarray(t, dtype=int))
    mod = model.modulation(phase)[t - 1]
    W = model.site_weights(phase)[:, t - 1]           # (K, nt)
    mu = regime_values(model.regime_coeffs, np.atleast_1d(omega))   # (K, nw)
    return mod[:, None] * (W.T @ mu)
