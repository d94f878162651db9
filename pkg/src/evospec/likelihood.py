"""Approximate joint Gaussian likelihood of partial differences at all sites.

Each site's record is decorrelated by solving ``C_T(A) z = x``, where
``C_T(A)[t, j] = A(t, w_j) exp(i w_j t)`` (time index starting at 0).
With ``A = (a0 + a1 r) * sum_k w_k(t) mu_k(w)`` a product with ``C_T`` costs
one FFT per regime. Across sites, coefficients at a common frequency are
correlated through the coherence matrix; distinct frequencies are
independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evospectrum import EvoSpectrumModel, regime_values
from .ingest import SolarClock, project_km
from .splines import COHERENCE_CUTOFF_CPD, N_COHERENCE_BASIS, coherence_basis, fold_cpd

log = logging.getLogger(__name__)

SOLVE_TOL = 1e-8
SOLVE_MAXITER = 500
JITTER = 1e-10


class SolverError(RuntimeError):
    """The iterative solve did not reach its tolerance."""


def _mult(T: int) -> np.ndarray:
    """Multiplicity of each nonnegative Fourier frequency in the full spectrum."""
    m = np.full(T // 2 + 1, 2.0)
    m[0] = 1.0
    if T % 2 == 0:
        m[-1] = 1.0
    return m


def full_spectrum(half, T: int) -> np.ndarray:
    """Extend values at frequencies 0..T//2 to 0..T-1 by even symmetry."""
    half = np.asarray(half)
    tail = half[..., 1:(T + 1) // 2][..., ::-1]
    return np.concatenate([half, tail], axis=-1)


class SiteOperator:
    """``C_T(A)`` for one site, applied and inverted with FFTs.

    Solves run in the real variable ``u = E(Mbar z)`` (``E`` the unnormalized
    inverse DFT), where ``Mbar`` is the amplitude at time-averaged weights;
    the remaining operator ``H = sum_k W_k S_k`` is handled by CGLS.
    """

    def __init__(self, model: EvoSpectrumModel, phase: float = 0.0, mu_half=None):
        self.T = model.T
        self.phase = phase
        self.mu = model.regimes_half() if mu_half is None else mu_half       # (K, H)
        self.blocks = model.partition.block_index(phase)
        self.r = model.site_radiation(phase)
        self.sd = model.a0 + model.a1 * self.r
        if np.any(self.sd <= 0):
            raise ValueError("a0 + a1 r must be positive")
        self.W = model.weights[:, self.blocks]                                # (K, T)
        self.mbar = (self.W.mean(axis=1)) @ self.mu
        self.rho = self.mu / self.mbar
        self.weights = model.weights

    # H and its transpose act on real length-T vectors
    def H(self, u):
        U = np.fft.rfft(u)
        return sum(Wk * np.fft.irfft(rk * U, n=self.T) for Wk, rk in zip(self.W, self.rho))

    def HT(self, v):
        acc = 0.0
        for Wk, rk in zip(self.W, self.rho):
            acc = acc + rk * np.fft.rfft(Wk * v)
        return np.fft.irfft(acc, n=self.T)

    def S(self, k, u):
        return np.fft.irfft(self.rho[k] * np.fft.rfft(u), n=self.T)

    def matvec(self, v) -> np.ndarray:
        """Dense-equivalent product ``C_T(A) v`` for a complex vector of length T."""
        v = np.asarray(v, dtype=complex)
        mu_full = full_spectrum(self.mu, self.T)
        out = sum(Wk * (self.T * np.fft.ifft(mk * v)) for Wk, mk in zip(self.W, mu_full))
        return self.sd * out

    def solve_u(self, y, tol=SOLVE_TOL, maxiter=SOLVE_MAXITER, x0=None, transpose=False):
        """CGLS for ``H u = y`` (or ``H^T u = y``)."""
        A, AT = (self.HT, self.H) if transpose else (self.H, self.HT)
        y = np.asarray(y, dtype=float)
        ny = np.linalg.norm(y)
        if ny == 0:
            return np.zeros_like(y), 0
        u = np.zeros_like(y) if x0 is None else np.array(x0, dtype=float)
        r = y - A(u) if x0 is not None else y.copy()
        if np.linalg.norm(r) <= tol * ny:
            return u, 0
        s = AT(r)
        p = s.copy()
        gamma = s @ s
        for it in range(1, maxiter + 1):
            q = A(p)
            step = gamma / (q @ q)
            u += step * p
            r -= step * q
            res = np.linalg.norm(r) / ny
            if res <= tol:
                return u, it
            s = AT(r)
            g_new = s @ s
            p = s + (g_new / gamma) * p
            gamma = g_new
        raise SolverError(f"CGLS reached {maxiter} iterations with relative residual {res:.3e}")

    def z_from_u(self, u) -> np.ndarray:
        """Half-spectrum coefficients ``z`` from the real variable ``u``."""
        return np.fft.rfft(u) / (self.T * self.mbar)

    def solve(self, x, tol=SOLVE_TOL, maxiter=SOLVE_MAXITER, x0=None):
        """Half-spectrum ``z`` with ``C_T(A) z = x``, plus the real variable ``u``."""
        u, _ = self.solve_u(np.asarray(x, dtype=float) / self.sd, tol, maxiter, x0)
        return self.z_from_u(u), u

    def logdet(self) -> float:
        """Time-averaged log-amplitude surrogate for ``log|det C_T(A)/sqrt(T)|``."""
        mult = _mult(self.T)
        per_block = np.log(np.maximum(self.weights.T @ self.mu, 1e-300)) @ mult      # (B,)
        counts = np.bincount(self.blocks, minlength=self.weights.shape[1])
        return float(np.sum(np.log(self.sd)) + counts @ per_block / self.T)

    def logdet_grad(self):
        """Partials of :meth:`logdet` with respect to a0, a1 and the weights."""
        mult = _mult(self.T)
        counts = np.bincount(self.blocks, minlength=self.weights.shape[1])
        amp = np.maximum(self.weights.T @ self.mu, 1e-300)                        # (B, H)
        dw = (self.mu[None, :, :] / amp[:, None, :]) @ mult                        # (B, K)
        return (float(np.sum(1.0 / self.sd)), float(np.sum(self.r / self.sd)),
                (dw * counts[:, None] / self.T).T)


def ct_matvec(model: EvoSpectrumModel, phase: float, v) -> np.ndarray:
    return SiteOperator(model, phase).matvec(v)


def ct_solve(model: EvoSpectrumModel, phase: float, x, tol: float = SOLVE_TOL,
             maxiter: int = SOLVE_MAXITER) -> np.ndarray:
    """Full conjugate-symmetric ``z`` (length T) solving ``C_T(A) z = x``."""
    op = SiteOperator(model, phase)
    z, _ = op.solve(x, tol, maxiter)
    return full_spectrum_conj(z, op.T)


def full_spectrum_conj(half, T: int) -> np.ndarray:
    """Hermitian extension of half-spectrum coefficients."""
    half = np.asarray(half)
    tail = np.conj(half[..., 1:(T + 1) // 2][..., ::-1])
    return np.concatenate([half, tail], axis=-1)


def logdet_approx(model: EvoSpectrumModel, phase: float = 0.0) -> float:
    return SiteOperator(model, phase).logdet()


@dataclass
class CoherenceModel:
    """Spatial coherence ``exp(-d / gamma(w))`` with a westward phase shift.

    ``gamma`` (km) is a nonnegative spline in frequency that vanishes above
    48 cycles per day.
    """

    gamma_coeffs: np.ndarray
    clock: SolarClock = field(default_factory=SolarClock)

    def __post_init__(self):
        self.gamma_coeffs = np.asarray(self.gamma_coeffs, dtype=float)
        if self.gamma_coeffs.shape != (N_COHERENCE_BASIS,):
            raise ValueError("coherence needs 5 spline coefficients")

    @property
    def omega0(self) -> float:
        return 2 * np.pi * COHERENCE_CUTOFF_CPD / 1440.0

    def gamma(self, omega) -> np.ndarray:
        return np.maximum(coherence_basis(fold_cpd(omega)) @ self.gamma_coeffs, 0.0)

    def to_dict(self) -> dict:
        return {"gamma_coeffs": self.gamma_coeffs.tolist(), "omega0_cpd": COHERENCE_CUTOFF_CPD,
                "clock": {"theta": self.clock.theta, "phi": list(self.clock.phi)}}

    @classmethod
    def from_dict(cls, d: dict) -> "CoherenceModel":
        return cls(np.asarray(d["gamma_coeffs"]), SolarClock(d["clock"]["theta"], tuple(d["clock"]["phi"])))


@dataclass(frozen=True)
class SiteGeometry:
    """Site coordinates: degrees for the phase shift, km for distances."""

    lonlat: np.ndarray
    km: np.ndarray

    @classmethod
    def from_lonlat(cls, lonlat, ref_lat: float | None = None) -> "SiteGeometry":
        lonlat = np.atleast_2d(np.asarray(lonlat, dtype=float))
        ref_lat = float(np.mean(lonlat[:, 1])) if ref_lat is None else ref_lat
        return cls(lonlat, project_km(lonlat, ref_lat))

    def distances(self) -> np.ndarray:
        diff = self.km[:, None, :] - self.km[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def phase_diffs(self, clock: SolarClock) -> np.ndarray:
        """``theta (u_l - u_m)' phi`` in minutes."""
        proj = clock.theta * self.lonlat @ np.asarray(clock.phi)
        return proj[:, None] - proj[None, :]

    def stack(self, other: "SiteGeometry") -> "SiteGeometry":
        return SiteGeometry(np.vstack([self.lonlat, other.lonlat]), np.vstack([self.km, other.km]))


def _coherence_from_gamma(gam, omega, dist, pdiff):
    """Coherence matrices for arrays of frequencies (leading axis)."""
    gam = np.atleast_1d(gam)[:, None, None]
    omega = np.atleast_1d(omega)[:, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        mag = np.where(gam > 0, np.exp(-dist[None] / np.where(gam > 0, gam, 1.0)), 0.0)
    mag = np.where(dist[None] == 0, 1.0, mag)
    return mag * np.exp(-1j * omega * pdiff[None])


def coherence_matrix(coh: CoherenceModel, sites: SiteGeometry, omega: float) -> np.ndarray:
    """n x n Hermitian coherence matrix at one frequency (identity above the cutoff)."""
    n = len(sites.km)
    if fold_cpd(omega) > COHERENCE_CUTOFF_CPD:
        return np.eye(n, dtype=complex)
    R = _coherence_from_gamma(coh.gamma(omega), omega, sites.distances(), sites.phase_diffs(coh.clock))[0]
    np.fill_diagonal(R, 1.0)
    return R


@dataclass
class LikelihoodTerms:
    value: float
    z: np.ndarray            # (n, H) half-spectrum decorrelated coefficients
    u: list
    g: np.ndarray | None = None


class JointLikelihood:
    """Negative loglikelihood of partial differences at several sites.

    The evolutionary-spectrum template fixes regimes, partition, radiation
    and differencing; :meth:`evaluate` varies a0, a1, weights and the
    coherence coefficients.
    """

    def __init__(self, template: EvoSpectrumModel, diffs, sites: SiteGeometry, phases,
                 clock: SolarClock | None = None, tol: float = SOLVE_TOL, maxiter: int = SOLVE_MAXITER,
                 warm_start: bool = False):
        self.template = template
        self.diffs = np.atleast_2d(np.asarray(diffs, dtype=float))
        self.n, self.T = self.diffs.shape
        if self.T != template.T:
            raise ValueError("data length does not match model")
        self.sites = sites
        self.phases = np.asarray(phases, dtype=float)
        self.clock = clock or template.clock
        self.tol = tol
        self.maxiter = maxiter
        self.warm_start = warm_start
        self._warm: dict = {}
        self.mu = template.regimes_half()
        H = self.T // 2 + 1
        self.mult = _mult(self.T)
        self.omega = 2 * np.pi * np.arange(H) / self.T
        self.ncoh = int(np.sum(fold_cpd(self.omega) <= COHERENCE_CUTOFF_CPD))
        self.dist = sites.distances()
        self.pdiff = sites.phase_diffs(self.clock)
        self.coh_basis = coherence_basis(fold_cpd(self.omega[:self.ncoh]))
        self.const = 0.5 * self.n * self.T * np.log(2 * np.pi) + 0.5 * self.n * self.T * np.log(self.T)
        self.n_evals = 0

    def model(self, a0, a1, weights) -> EvoSpectrumModel:
        return self.template.with_params(a0=float(a0), a1=float(a1), weights=np.asarray(weights, dtype=float))

    def operators(self, model: EvoSpectrumModel):
        return [SiteOperator(model, p, self.mu) for p in self.phases]

    def decorrelate(self, ops):
        zs, us = [], []
        for s, op in enumerate(ops):
            x0 = self._warm.get(("u", s)) if self.warm_start else None
            u, _ = op.solve_u(self.diffs[s] / op.sd, self.tol, self.maxiter, x0)
            if self.warm_start:
                self._warm[("u", s)] = u
            zs.append(op.z_from_u(u))
            us.append(u)
        return np.array(zs), us

    def coherence_stack(self, gamma_coeffs) -> np.ndarray:
        gam = np.maximum(self.coh_basis @ np.asarray(gamma_coeffs, dtype=float), 0.0)
        R = _coherence_from_gamma(gam, self.omega[:self.ncoh], self.dist, self.pdiff)
        idx = np.arange(self.n)
        R[:, idx, idx] = 1.0
        return R

    def spatial_terms(self, z, gamma_coeffs, need_g: bool = False):
        """Coherence part: ``0.5 * sum_j mult_j [log det R_j + z_j^H R_j^{-1} z_j]``."""
        zc = z[:, :self.ncoh].T                                   # (J, n)
        R = self.coherence_stack(gamma_coeffs)
        try:
            L = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            log.info("coherence matrices not numerically PD; adding jitter %g", JITTER)
            R = R + JITTER * np.eye(self.n)
            L = np.linalg.cholesky(R)
        logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=1, axis2=2))), axis=1)
        y = np.linalg.solve(L, zc[..., None])[..., 0]
        quad_c = np.sum(np.abs(y) ** 2, axis=1)
        quad_rest = np.sum(np.abs(z[:, self.ncoh:]) ** 2, axis=0)
        m = self.mult
        val = 0.5 * (m[:self.ncoh] @ (logdet + quad_c) + m[self.ncoh:] @ quad_rest)
        g = None
        if need_g:
            gc = np.linalg.solve(np.conj(np.transpose(L, (0, 2, 1))), y[..., None])[..., 0]
            g = z.copy()
            g[:, :self.ncoh] = gc.T
        return float(val), g

    def evaluate(self, a0, a1, weights, gamma_coeffs) -> float:
        model = self.model(a0, a1, weights)
        ops = self.operators(model)
        z, _ = self.decorrelate(ops)
        self.n_evals += 1
        ld = sum(op.logdet() for op in ops)
        return self.const + ld + self.spatial_terms(z, gamma_coeffs)[0]

    def evaluate_with_grad(self, a0, a1, weights, gamma_coeffs, fd_rel: float = 1e-4):
        """Value and gradient over (a0, a1, weights, gamma_coeffs).

        Radiation and weight partials are analytic (one adjoint solve per
        site); coherence partials are central differences of the spatial term.
        """
        model = self.model(a0, a1, weights)
        ops = self.operators(model)
        z, us = self.decorrelate(ops)
        self.n_evals += 1
        gamma_coeffs = np.asarray(gamma_coeffs, dtype=float)
        spatial, g = self.spatial_terms(z, gamma_coeffs, need_g=True)
        value = self.const + spatial
        ga0 = ga1 = 0.0
        gw = np.zeros_like(model.weights)
        for s, (op, u) in enumerate(zip(ops, us)):
            value += op.logdet()
            d0, d1, dw = op.logdet_grad()
            ga0 += d0
            ga1 += d1
            gw += dw
            c = np.fft.irfft(g[s] / op.mbar, n=self.T)
            x0 = self._warm.get(("lam", s)) if self.warm_start else None
            lam, _ = op.solve_u(c, self.tol, self.maxiter, x0, transpose=True)
            if self.warm_start:
                self._warm[("lam", s)] = lam
            x = self.diffs[s]
            ga0 -= lam @ (x / op.sd ** 2)
            ga1 -= lam @ (x * op.r / op.sd ** 2)
            for k in range(model.K):
                prod = lam * op.S(k, u)
                gw[k] -= np.bincount(op.blocks, weights=prod, minlength=gw.shape[1])
        ggam = np.zeros_like(gamma_coeffs)
        for i in range(len(gamma_coeffs)):
            h = fd_rel * max(abs(gamma_coeffs[i]), 1.0)
            up = gamma_coeffs.copy()
            up[i] += h
            dn = gamma_coeffs.copy()
            dn[i] = max(dn[i] - h, 0.0)
            ggam[i] = (self.spatial_terms(z, up)[0] - self.spatial_terms(z, dn)[0]) / (up[i] - dn[i])
        return value, (ga0, ga1, gw, ggam)

    def decorrelated(self, a0, a1, weights) -> np.ndarray:
        """Half-spectrum coefficients ``z`` for every site."""
        return self.decorrelate(self.operators(self.model(a0, a1, weights)))[0]


def joint_negloglik(evo: EvoSpectrumModel, coh: CoherenceModel, diffs, sites: SiteGeometry, phases,
                    tol: float = SOLVE_TOL) -> float:
    lik = JointLikelihood(evo, diffs, sites, phases, coh.clock, tol=tol)
    return lik.evaluate(evo.a0, evo.a1, evo.weights, coh.gamma_coeffs)


def negloglik_gradient(evo: EvoSpectrumModel, coh: CoherenceModel, diffs, sites: SiteGeometry, phases,
                       tol: float = SOLVE_TOL):
    """Gradient as ``(d_a0, d_a1, d_weights, d_gamma)``."""
    lik = JointLikelihood(evo, diffs, sites, phases, coh.clock, tol=tol)
    return lik.evaluate_with_grad(evo.a0, evo.a1, evo.weights, coh.gamma_coeffs)[1]


def regime_amplitudes(coeffs, T: int) -> np.ndarray:
    return regime_values(coeffs, 2 * np.pi * np.arange(T // 2 + 1) / T)
