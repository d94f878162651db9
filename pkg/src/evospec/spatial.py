"""Intrinsic random fields with linear generalized covariance ``G(d) = -eta d``.

Used for the site means and the jump parameters: REML for ``eta``, universal
kriging for prediction, multivariate t draws for conditional simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _pairwise(a, b) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def drift_design(names, km, lonlat=None, elev=None) -> np.ndarray:
    """Columns of the drift basis evaluated at sites.

    Recognized names: ``const``, ``x``/``y`` (km), ``lon``/``lat`` (degrees), ``elev``.
    """
    km = np.atleast_2d(km)
    cols = []
    for name in names:
        if name == "const":
            cols.append(np.ones(len(km)))
        elif name == "x":
            cols.append(km[:, 0])
        elif name == "y":
            cols.append(km[:, 1])
        elif name == "lon":
            cols.append(np.atleast_2d(lonlat)[:, 0])
        elif name == "lat":
            cols.append(np.atleast_2d(lonlat)[:, 1])
        elif name == "elev":
            cols.append(np.asarray(elev, dtype=float))
        else:
            raise ValueError(f"unknown drift term {name!r}")
    return np.column_stack(cols)


def contrasts(F) -> np.ndarray:
    """Orthonormal basis of vectors annihilating the drift columns."""
    Q, _ = np.linalg.qr(F, mode="complete")
    return Q[:, F.shape[1]:]


@dataclass
class SpatialFieldFit:
    eta: float
    drift_coeffs: np.ndarray
    drift_basis: tuple
    reml_negloglik: float
    dof: int
    coords: np.ndarray
    F: np.ndarray
    values: np.ndarray

    def to_dict(self) -> dict:
        return {"eta": self.eta, "drift_coeffs": self.drift_coeffs.tolist(),
                "drift_basis": list(self.drift_basis), "reml_negloglik": self.reml_negloglik,
                "dof": self.dof}


def reml_negloglik(eta: float, values, coords, F) -> float:
    """Negative REML loglikelihood from orthonormal drift-free contrasts."""
    W = contrasts(F)
    Q = W.T @ (-_pairwise(coords, coords)) @ W
    yc = W.T @ np.asarray(values, dtype=float)
    m = len(yc)
    _, logdet = np.linalg.slogdet(eta * Q)
    return float(0.5 * (m * np.log(2 * np.pi) + logdet + yc @ np.linalg.solve(eta * Q, yc)))


def reml_fit(values, coords, F, drift_basis=()) -> SpatialFieldFit:
    """Fit ``eta`` by REML and the drift by generalized least squares.

    ``eta`` is a pure scale parameter, so the REML maximizer is closed-form.
    """
    y = np.asarray(values, dtype=float)
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n, p = F.shape
    if n <= p:
        raise ValueError(f"need more sites ({n}) than drift terms ({p})")
    D = _pairwise(coords, coords)
    if np.any(D[np.triu_indices(n, 1)] == 0):
        raise ValueError("duplicate site coordinates")
    if np.linalg.matrix_rank(F) < p:
        raise ValueError("drift basis is not identifiable at these sites")
    W = contrasts(F)
    Q = W.T @ (-D) @ W
    yc = W.T @ y
    quad = float(yc @ np.linalg.solve(Q, yc))
    if quad <= 1e-12 * max(1.0, float(y @ y)):
        raise ValueError("values are exactly explained by the drift; eta is not identifiable")
    eta = quad / (n - p)
    nll = reml_negloglik(eta, y, coords, F)
    K = -eta * D
    sysm = np.block([[K, F], [F.T, np.zeros((p, p))]])
    sol = np.linalg.solve(sysm, np.concatenate([y, np.zeros(p)]))
    return SpatialFieldFit(eta, sol[n:], tuple(drift_basis), nll, n - p, coords, F, y)


def krige_predict(fit: SpatialFieldFit, new_coords, new_F) -> tuple[np.ndarray, np.ndarray]:
    """Universal-kriging predictions and their joint error covariance."""
    X = fit.coords
    Y = np.atleast_2d(np.asarray(new_coords, dtype=float))
    F0 = np.atleast_2d(np.asarray(new_F, dtype=float))
    n, p = fit.F.shape
    K = -fit.eta * _pairwise(X, X)
    K0 = -fit.eta * _pairwise(X, Y)
    K00 = -fit.eta * _pairwise(Y, Y)
    sysm = np.block([[K, fit.F], [fit.F.T, np.zeros((p, p))]])
    sol = np.linalg.solve(sysm, np.vstack([K0, F0.T]))
    lam = sol[:n]                                                    # (n, m)
    blup = lam.T @ fit.values
    cov = K00 - lam.T @ K0 - K0.T @ lam + lam.T @ K @ lam
    cov = 0.5 * (cov + cov.T)
    # exact interpolation at observed sites
    hit = np.isclose(_pairwise(Y, X), 0.0)
    for i, j in zip(*np.nonzero(hit)):
        blup[i] = fit.values[j]
        cov[i, :] = 0.0
        cov[:, i] = 0.0
    return blup, cov


def _psd_sqrt(cov) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def conditional_draw(fit: SpatialFieldFit, new_coords, new_F, df: float, rng, size=None) -> np.ndarray:
    """Multivariate t draws centred on the BLUP with scale matrix the prediction covariance.

    ``df = inf`` gives Gaussian draws.
    """
    blup, cov = krige_predict(fit, new_coords, new_F)
    L = _psd_sqrt(cov)
    shape = (() if size is None else (size,)) + (len(blup),)
    z = rng.standard_normal(shape) @ L.T
    if np.isfinite(df):
        scale = np.sqrt(df / rng.chisquare(df, size=shape[:-1] or None))
        z = z * np.asarray(scale)[..., None]
    return blup + z
