"""Maximum likelihood fitting: inner quasi-Newton fit, offset and differencing grid searches, variants."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .evospectrum import (BlockPartition, EvoSpectrumModel, PeriodogramAverages, PrelimRadiation,
                          average_periodograms, fit_prelim_radiation, fit_regimes, fit_single_regime,
                          partial_difference, partition_for, shift_series, smooth_radiation)
from .ingest import StationSet
from .likelihood import (CoherenceModel, JointLikelihood, SiteGeometry, SolverError,
                         joint_negloglik)
from .splines import N_COHERENCE_BASIS

log = logging.getLogger(__name__)

VARIANTS = ("full", "radiation", "daynight", "stationary")
OTHER_REGIME_WEIGHT = 0.2
MAXITER = 200


class FitError(RuntimeError):
    """The likelihood cannot be evaluated at the starting point."""


@dataclass
class SpectralProblem:
    """Everything fixed before the continuous optimization at given offsets and alpha."""

    template: EvoSpectrumModel
    diffs: np.ndarray
    sites: SiteGeometry
    phases: np.ndarray
    prelim: PrelimRadiation
    averages: PeriodogramAverages
    variant: str = "full"

    @property
    def partition(self) -> BlockPartition:
        return self.template.partition

    def likelihood(self, **kw) -> JointLikelihood:
        return JointLikelihood(self.template, self.diffs, self.sites, self.phases,
                               self.template.clock, **kw)


def initial_weights(partition: BlockPartition, K: int) -> np.ndarray:
    """1 for the regime matching the block's time of day, 0.2 for the other."""
    day = partition.day_block
    if K == 1:
        return np.ones((1, partition.B))
    W = np.full((2, partition.B), OTHER_REGIME_WEIGHT)
    W[0, day] = 1.0
    W[1, ~day] = 1.0
    return W


def prepare_problem(data: StationSet, resid, offsets, alpha: float, variant: str = "full") -> SpectralProblem:
    """Differencing, preliminary radiation fit, periodogram averages and regimes.

    ``resid`` holds the detrended series (one row per site of ``data``).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    resid = np.atleast_2d(np.asarray(resid, dtype=float))
    diffs = partial_difference(resid, alpha)
    phases = data.phase_offsets()
    r = smooth_radiation(data.radiation)
    prelim = fit_prelim_radiation(diffs, r, phases)
    partition = partition_for(data, *offsets)
    if variant == "full":
        scale = np.vstack([prelim.sd(shift_series(r, p)) for p in phases])
        avg = average_periodograms(diffs / scale, partition, phases)
        coeffs = fit_regimes(avg)
    else:
        # one regime shared by all variants keeps their likelihoods nested
        avg = average_periodograms(diffs, partition, phases)
        coeffs = fit_single_regime(avg)
        coeffs = coeffs - _unit_variance_shift(coeffs, data.T)
    W = initial_weights(partition, len(coeffs))
    a1 = max(prelim.a1, 1e-3 * max(prelim.a0, 1e-12) / max(float(np.abs(r).max()), 1e-12))
    template = EvoSpectrumModel(coeffs, W, max(prelim.a0, 1e-12), a1, alpha, partition, r, data.clock)
    if variant != "full":
        template = _variant_start(template, variant, diffs)
    sites = SiteGeometry.from_lonlat(data.lonlat, data.ref_lat)
    return SpectralProblem(template, diffs, sites, phases, prelim, avg, variant)


def _unit_variance_shift(coeffs, T: int) -> float:
    """Log-scale shift making the regime's implied variance one."""
    probe = EvoSpectrumModel(coeffs, np.ones((1, 1)), 1.0, 0.0, 1.0,
                             BlockPartition(np.array([]), 0.0, 0.0, T), np.zeros(T))
    return float(np.log(probe.sd_profile()[0]))


def _variant_start(template: EvoSpectrumModel, variant: str, diffs) -> EvoSpectrumModel:
    sd = float(np.sqrt(np.mean(diffs[:, 1:] ** 2)))
    B = template.partition.B
    if variant == "stationary":
        return template.with_params(a0=sd, a1=0.0, weights=np.ones((1, B)))
    if variant == "daynight":
        return template.with_params(a0=1.0, a1=0.0, weights=np.full((1, B), sd))
    return template.with_params(weights=np.ones((1, B)))


def median_distance(sites: SiteGeometry) -> float:
    d = sites.distances()
    iu = np.triu_indices(len(d), 1)
    return float(np.median(d[iu])) if len(iu[0]) else 1.0


class ParameterMap:
    """Unconstrained vector <-> (a0, a1, weights, gamma) for each variant.

    Everything is log-parameterized, which keeps a0, a1, weights and the
    coherence coefficients positive.
    """

    def __init__(self, template: EvoSpectrumModel, variant: str):
        self.template = template
        self.variant = variant
        self.K, self.B = template.weights.shape
        self.day = template.partition.day_block

    @property
    def size(self) -> int:
        n = {"full": 2 + self.K * self.B, "radiation": 2, "daynight": 2, "stationary": 1}[self.variant]
        return n + N_COHERENCE_BASIS

    def pack(self, a0, a1, weights, gamma) -> np.ndarray:
        g = np.log(np.maximum(gamma, 1e-8))
        W = np.asarray(weights, dtype=float)
        if self.variant == "full":
            head = [np.log(a0), np.log(a1), *np.log(W).ravel()]
        elif self.variant == "radiation":
            head = [np.log(a0), np.log(a1)]
        elif self.variant == "daynight":
            head = [np.log(W[0, self.day].mean()), np.log(W[0, ~self.day].mean())]
        else:
            head = [np.log(a0)]
        return np.concatenate([head, g])

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        gamma = np.exp(theta[-N_COHERENCE_BASIS:])
        if self.variant == "full":
            W = np.exp(theta[2:-N_COHERENCE_BASIS]).reshape(self.K, self.B)
            return np.exp(theta[0]), np.exp(theta[1]), W, gamma
        if self.variant == "radiation":
            return np.exp(theta[0]), np.exp(theta[1]), np.ones((1, self.B)), gamma
        if self.variant == "daynight":
            W = np.where(self.day, np.exp(theta[0]), np.exp(theta[1]))[None, :]
            return 1.0, 0.0, W, gamma
        return np.exp(theta[0]), 0.0, np.ones((1, self.B)), gamma

    def chain(self, theta, grads) -> np.ndarray:
        """Gradient in ``theta`` from the gradient in natural parameters."""
        a0, a1, W, gamma = self.unpack(theta)
        ga0, ga1, gw, ggam = grads
        tail = ggam * gamma
        if self.variant == "full":
            head = [ga0 * a0, ga1 * a1, *(gw * W).ravel()]
        elif self.variant == "radiation":
            head = [ga0 * a0, ga1 * a1]
        elif self.variant == "daynight":
            head = [float((gw * W)[0, self.day].sum()), float((gw * W)[0, ~self.day].sum())]
        else:
            head = [ga0 * a0]
        return np.concatenate([head, tail])


@dataclass
class FitResult:
    evo: EvoSpectrumModel
    coh: CoherenceModel
    negloglik: float
    hessian: np.ndarray | None
    convergence: dict = field(default_factory=dict)
    variant: str = "full"

    @property
    def loglik(self) -> float:
        return -self.negloglik

    def to_dict(self) -> dict:
        return {"variant": self.variant, "negloglik": self.negloglik, "evo": self.evo.to_dict(),
                "coherence": self.coh.to_dict(), "convergence": self.convergence,
                "hessian": None if self.hessian is None else self.hessian.tolist()}

    @classmethod
    def from_dict(cls, d: dict, radiation) -> "FitResult":
        H = d.get("hessian")
        return cls(EvoSpectrumModel.from_dict(d["evo"], radiation), CoherenceModel.from_dict(d["coherence"]),
                   d["negloglik"], None if H is None else np.asarray(H), d.get("convergence", {}),
                   d.get("variant", "full"))


def maximize_likelihood(problem: SpectralProblem, init: dict | None = None, maxiter: int = MAXITER,
                        hessian: bool = True, tol=None) -> FitResult:
    """L-BFGS-B over the variant's log parameters.

    Stops when the largest gradient component falls to ``1e-4 (1 + |loglik|)``
    or after ``maxiter`` iterations; the best point seen is returned.
    """
    tpl = problem.template
    lik = problem.likelihood(warm_start=True, **({} if tol is None else {"tol": tol}))
    pmap = ParameterMap(tpl, problem.variant)
    init = dict(init or {})
    start_gamma = init.pop("gamma", np.full(N_COHERENCE_BASIS, median_distance(problem.sites)))
    theta0 = pmap.pack(init.get("a0", tpl.a0), init.get("a1", tpl.a1), init.get("weights", tpl.weights),
                       start_gamma)
    best = {"f": np.inf, "theta": theta0}
    failures = []

    def fun(theta):
        a0, a1, W, gamma = pmap.unpack(theta)
        try:
            f, grads = lik.evaluate_with_grad(a0, a1, W, gamma)
        except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
            failures.append(str(exc))
            return 1e300, np.zeros_like(theta)
        if not np.isfinite(f):
            return 1e300, np.zeros_like(theta)
        if f < best["f"]:
            best.update(f=f, theta=np.array(theta))
        return f, pmap.chain(theta, grads)

    f0, _ = fun(theta0)
    if not np.isfinite(f0) or f0 >= 1e300:
        raise FitError(f"likelihood not finite at the starting point: {failures[-1:] or f0}")
    gtol = 1e-4 * (1.0 + abs(f0))
    res = optimize.minimize(fun, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": maxiter, "gtol": gtol, "maxcor": 20})
    a0, a1, W, gamma = pmap.unpack(best["theta"])
    evo = tpl.with_params(a0=float(a0), a1=float(a1), weights=W)
    coh = CoherenceModel(gamma, tpl.clock)
    conv = {"iterations": int(res.nit), "evaluations": int(res.nfev), "message": str(res.message),
            "success": bool(res.success), "stalled": not res.success, "gtol": gtol,
            "solver_failures": len(failures)}
    if not res.success:
        log.warning("optimizer stopped without converging: %s", res.message)
    H = likelihood_hessian(lik, evo, coh) if hessian and problem.variant == "full" else None
    # cold re-evaluation so the reported value does not depend on warm-start history
    nll = joint_negloglik(evo, coh, problem.diffs, problem.sites, problem.phases, tol=lik.tol)
    return FitResult(evo, coh, nll, H, conv, problem.variant)


def likelihood_hessian(lik: JointLikelihood, evo: EvoSpectrumModel, coh: CoherenceModel,
                       step: float = 1e-4) -> np.ndarray:
    """Central differences of the analytic gradient over (log a0, log a1, log w)."""
    K, B = evo.weights.shape
    x0 = np.concatenate([[np.log(evo.a0), np.log(evo.a1)], np.log(evo.weights).ravel()])

    def grad(x):
        a0, a1 = np.exp(x[:2])
        W = np.exp(x[2:]).reshape(K, B)
        _, (g0, g1, gw, _) = lik.evaluate_with_grad(a0, a1, W, coh.gamma_coeffs)
        return np.concatenate([[g0 * a0, g1 * a1], (gw * W).ravel()])

    P = len(x0)
    H = np.empty((P, P))
    for i in range(P):
        e = np.zeros(P)
        e[i] = step
        H[i] = (grad(x0 + e) - grad(x0 - e)) / (2 * step)
    return 0.5 * (H + H.T)


def refit_negloglik(problem: SpectralProblem, fit: FitResult) -> float:
    """Independent evaluation of the joint likelihood at a fit's parameters."""
    return joint_negloglik(fit.evo, fit.coh, problem.diffs, problem.sites, problem.phases)


def fit_model(data: StationSet, resid, offsets, alpha: float, variant: str = "full",
              hessian: bool = True, maxiter: int = MAXITER) -> tuple[SpectralProblem, FitResult]:
    problem = prepare_problem(data, resid, offsets, alpha, variant)
    return problem, maximize_likelihood(problem, maxiter=maxiter, hessian=hessian)


def fit_variant(data: StationSet, resid, variant: str, offsets=(0.0, 0.0), alpha: float = 1.0,
                maxiter: int = MAXITER) -> FitResult:
    """Restricted fit: ``stationary``, ``daynight`` or ``radiation`` (single regime)."""
    if variant not in ("stationary", "daynight", "radiation"):
        raise ValueError(f"unknown variant {variant!r}")
    return fit_model(data, resid, offsets, alpha, variant, hessian=False, maxiter=maxiter)[1]


@dataclass
class GridSearchTable:
    """Maximized negative loglikelihood per grid cell; ``nan`` marks failed cells."""

    rows: list          # (key, negloglik) with key a tuple of grid coordinates
    columns: tuple = ("sunrise", "sunset")

    @property
    def best(self):
        ok = [r for r in self.rows if np.isfinite(r[1])]
        if not ok:
            raise FitError("every grid cell failed")
        return min(ok, key=lambda r: r[1])

    def deltas(self) -> np.ndarray:
        f = np.array([r[1] for r in self.rows], dtype=float)
        return f - self.best[1]

    def delta_thousands(self) -> np.ndarray:
        return self.deltas() / 1000.0

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            fh.write(",".join([*self.columns, "negloglik", "delta_thousands"]) + "\n")
            for (key, f), d in zip(self.rows, self.delta_thousands()):
                fh.write(",".join([*(f"{k:g}" for k in key), repr(f), f"{d:.6f}"]) + "\n")

    @classmethod
    def from_csv(cls, path) -> "GridSearchTable":
        lines = [ln for ln in open(path).read().strip().splitlines() if not ln.startswith("#")]
        cols = tuple(lines[0].split(",")[:-2])
        rows = []
        for line in lines[1:]:
            parts = line.split(",")
            rows.append((tuple(float(p) for p in parts[:len(cols)]), float(parts[len(cols)])))
        return cls(rows, cols)


def _grid_cell(args):
    data, resid, offsets, alpha, maxiter = args
    try:
        problem, fit = fit_model(data, resid, offsets, alpha, hessian=False, maxiter=maxiter)
        return refit_negloglik(problem, fit)
    except (FitError, ValueError, SolverError, np.linalg.LinAlgError) as exc:
        log.warning("grid cell %s alpha=%g failed: %s", offsets, alpha, exc)
        return np.nan


def _run_cells(cells, workers: int):
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_grid_cell, cells))
    return [_grid_cell(c) for c in cells]


def grid_search_offsets(data: StationSet, resid, grid, alpha: float, workers: int = 1,
                        maxiter: int = MAXITER) -> GridSearchTable:
    """Refit regimes and all continuous parameters at every (sunrise, sunset) offset pair."""
    grid = [tuple(float(v) for v in g) for g in grid]
    values = _run_cells([(data, resid, g, alpha, maxiter) for g in grid], workers)
    return GridSearchTable(list(zip(grid, values)), ("sunrise", "sunset"))


def grid_search_alpha(data: StationSet, resid, alphas, offsets, workers: int = 1,
                      maxiter: int = MAXITER) -> tuple[float, GridSearchTable]:
    """Full refit per differencing parameter; returns the best alpha and the curve."""
    alphas = [float(a) for a in alphas]
    values = _run_cells([(data, resid, tuple(offsets), a, maxiter) for a in alphas], workers)
    table = GridSearchTable([((a,), v) for a, v in zip(alphas, values)], ("alpha",))
    return table.best[0][0], table


def refine_quadratic(table: GridSearchTable, step=None) -> tuple[tuple[float, float], bool]:
    """Stationary point of a quadratic fitted near the best cell.

    Uses cells within one grid step of the best in each coordinate. Returns
    ``(point, refined)``; ``refined`` is False when the fit is not a
    minimum inside the neighbourhood and the best cell is returned instead.
    """
    keys = np.array([r[0] for r in table.rows], dtype=float)
    vals = table.deltas()
    ok = np.isfinite(vals)
    best = np.array(table.best[0], dtype=float)
    if step is None:
        step = []
        for c in range(keys.shape[1]):
            u = np.unique(keys[ok, c])
            step.append(float(np.min(np.diff(u))) if len(u) > 1 else 0.0)
    step = np.asarray(step, dtype=float)
    near = ok & np.all(np.abs(keys - best) <= step + 1e-9, axis=1)
    fallback = (tuple(best), False)
    if near.sum() < 6:
        return fallback
    x, y = (keys[near] - best).T
    X = np.column_stack([np.ones_like(x), x, y, x * x, x * y, y * y])
    c, *_ = np.linalg.lstsq(X, vals[near], rcond=None)
    Hq = np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])
    if np.any(np.linalg.eigvalsh(Hq) <= 0):
        log.info("quadratic near the best cell is not convex; keeping the grid point")
        return fallback
    v = np.linalg.solve(Hq, -c[1:3])
    lo, hi = (keys[near] - best).min(axis=0), (keys[near] - best).max(axis=0)
    if np.any(v < lo - 1e-9) or np.any(v > hi + 1e-9):
        return fallback
    return tuple(best + v), True
