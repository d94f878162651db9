import numpy as np
import pytest
from hypothesis import settings

from evospec.evospectrum import BlockPartition, EvoSpectrumModel, transfer_function
from evospec.likelihood import SiteGeometry, coherence_matrix

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

LONLAT3 = np.array([[-97.5, 36.6], [-97.0, 36.9], [-98.1, 36.2]])


def random_model(rng, T, K=2, B=3, a1=0.3, alpha=0.9):
    cps = np.sort(rng.choice(np.arange(2, T), B - 1, replace=False)).astype(float)
    part = BlockPartition(cps, 0.0, 0.0, T)
    coeffs = rng.normal(scale=0.3, size=(K, 15))
    w = np.exp(rng.normal(size=(K, B)))
    r = np.abs(rng.normal(size=T))
    return EvoSpectrumModel(coeffs, w, 1.0, a1, alpha, part, r)


def dense_ct(model, phase=0.0):
    """Dense C_T(A) with entries A(t, w_j) exp(i w_j t), t starting at 0."""
    T = model.T
    t = np.arange(T)
    omega = 2 * np.pi * np.arange(T) / T
    A = transfer_function(model, t + 1, phase, omega)
    return A * np.exp(1j * np.outer(t, omega))


def dense_joint_negloglik(model, coh, sites, phases, diffs):
    """Exact Gaussian negative loglikelihood of the implied discrete model."""
    n, T = diffs.shape
    Cs = [dense_ct(model, p) for p in phases]
    omega = 2 * np.pi * np.arange(T) / T
    Rs = np.array([coherence_matrix(coh, sites, w) for w in omega])
    for j in range(T // 2 + 1, T):
        Rs[j] = np.conj(Rs[T - j])
    S = np.zeros((n * T, n * T), dtype=complex)
    for l in range(n):
        for m in range(n):
            S[l * T:(l + 1) * T, m * T:(m + 1) * T] = Cs[l] @ np.diag(Rs[:, l, m]) @ Cs[m].conj().T
    S = S.real
    x = diffs.ravel()
    _, ld = np.linalg.slogdet(S)
    return 0.5 * n * T * np.log(2 * np.pi) + 0.5 * ld + 0.5 * x @ np.linalg.solve(S, x)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def sites3():
    return SiteGeometry.from_lonlat(LONLAT3)


@pytest.fixture
def phases3():
    return 4.0 * (LONLAT3[0, 0] - LONLAT3[:, 0])


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, name: str, ok: bool, detail: str = "", seconds: float | None = None):
        took = "" if seconds is None else f" [{seconds:.1f}s]"
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'}{took} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
