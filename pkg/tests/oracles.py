"""Independent reference computations used by the tests.

Nothing here calls the package's numerical routines: dense matrices,
scipy's adaptive quadrature and hand-built noise fields only.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate

# frozen output of kappa_adaptive(alpha=1, nu=1, gamma=1) in d = 1
KAPPA_GOLDEN = 1.1777197544618032


def kappa_adaptive(alpha=1.0, nu=1.0, gamma=1.0) -> float:
    """d = 1 diffusivity by adaptive quadrature, written from the dispersion relation."""

    def integrand(x):
        s2 = math.sin(math.pi * x) ** 2
        w = math.sqrt(nu + 4 * alpha * s2)
        dw = 2 * math.pi * alpha * math.sin(2 * math.pi * x) / w
        phi = (4.0 / 3.0) * s2 * (1 + 2 * math.cos(math.pi * x) ** 2)
        return dw * dw / phi

    val, _ = integrate.quad(integrand, 0.0, 1.0, points=[0.5], epsabs=1e-14, epsrel=1e-13, limit=400)
    return gamma + val / (8 * math.pi**2 * gamma)


def dense_laplacian_1d(N: int) -> np.ndarray:
    eye = np.eye(N)
    return -2 * eye + np.roll(eye, 1, 0) + np.roll(eye, -1, 0)


def dense_covariance(N: int, d: int, alpha: float, nu: float) -> np.ndarray:
    """``(nu - alpha Delta)^{-1}`` as a dense ``N^d x N^d`` matrix (pinned only)."""
    L1 = dense_laplacian_1d(N)
    eye = np.eye(N)
    L = np.zeros((N**d, N**d))
    for k in range(d):
        mats = [eye] * d
        mats[k] = L1
        term = mats[0]
        for m in mats[1:]:
            term = np.kron(term, m)
        L += term
    return np.linalg.inv(nu * np.eye(N**d) - alpha * L)


# -- second-moment closure, d = 1 ----------------------------------------------

_Y = np.array([[0, 1, -1], [-1, 0, 1], [1, -1, 0]], float)


class ClosureD1:
    """Exact ODE for the second moments of the linear SDE in d = 1.

    Writing the momentum noise as ``sum_x Y_x`` with ``Y_x`` the linear field
    of the three-site cell at ``x`` and generator ``(1/6) sum_x Y_x^2``, the
    covariance ``Sigma`` of ``(q, p)`` started from ``C Q_0 C`` evolves as

        Sqq' = Sqp + Sqp^T
        Sqp' = Spp - Sqq K + gamma Sqp L^T
        Spp' = -K Sqp - Sqp^T K + gamma (L Spp + Spp L^T + (1/3) sum_x Y_x Spp Y_x^T)

    with ``K = nu - alpha Delta`` and ``L = (1/6) sum_x Y_x^2``. The energy
    correlation is ``S(x, t) = 1/2 tr(Q_x Sigma(t))``.
    """

    def __init__(self, N, alpha=1.0, nu=1.0, gamma=1.0, beta=1.0):
        self.N, self.alpha, self.nu, self.gamma = N, alpha, nu, gamma
        lap = dense_laplacian_1d(N)
        self.K = nu * np.eye(N) - alpha * lap
        self.idx = np.array([[(x - 1) % N, x, (x + 1) % N] for x in range(N)])
        L = np.zeros((N, N))
        for ix in self.idx:
            L[np.ix_(ix, ix)] += _Y @ _Y
        self.L = L / 6
        G = np.linalg.inv(self.K)
        Q = np.zeros((N, N))
        for y in (1, -1):
            w = np.zeros(N)
            w[y % N] += 1
            w[0] -= 1
            Q += alpha / 2 * np.outer(w, w)
        Q[0, 0] += nu
        self.Sigma0 = (G @ Q @ G / beta**2, np.zeros((N, N)), np.eye(N)[0][:, None] * np.eye(N)[0] / beta**2)

    def _B(self, Spp):
        out = np.zeros_like(Spp)
        for ix in self.idx:
            out[np.ix_(ix, ix)] += _Y @ Spp[np.ix_(ix, ix)] @ _Y.T
        return out / 3

    def rhs(self, S):
        Sqq, Sqp, Spp = S
        g, K, L = self.gamma, self.K, self.L
        return (
            Sqp + Sqp.T,
            Spp - Sqq @ K + g * Sqp @ L.T,
            -K @ Sqp - Sqp.T @ K + g * (L @ Spp + Spp @ L.T + self._B(Spp)),
        )

    def profile(self, S) -> np.ndarray:
        Sqq, _, Spp = S
        N, a = self.N, self.alpha
        dq = np.diag(Sqq)
        cross = Sqq[(np.arange(N) + 1) % N, np.arange(N)]
        bond = np.roll(dq, -1) + dq - 2 * cross
        return 0.5 * np.diag(Spp) + a / 4 * (bond + np.roll(bond, 1)) + self.nu / 2 * dq

    def solve(self, times, h=0.02) -> np.ndarray:
        """Profiles at ``times`` (ascending) by classical RK4."""
        S, t, out = self.Sigma0, 0.0, []
        for target in times:
            n = int(math.ceil((target - t) / h - 1e-9))
            step = (target - t) / n if n else 0.0
            for _ in range(n):
                k1 = self.rhs(S)
                k2 = self.rhs(tuple(a + step / 2 * b for a, b in zip(S, k1)))
                k3 = self.rhs(tuple(a + step / 2 * b for a, b in zip(S, k2)))
                k4 = self.rhs(tuple(a + step * b for a, b in zip(S, k3)))
                S = tuple(a + step / 6 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(S, k1, k2, k3, k4))
            t = target
            out.append(self.profile(S))
        return np.array(out)


def minimal_image(N: int) -> np.ndarray:
    x = np.arange(N)
    return np.where(x > N // 2, x - N, x)
