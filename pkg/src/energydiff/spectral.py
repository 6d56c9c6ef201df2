"""Closed-form spectral quantities on the torus and the diffusivity quadrature.

Wave numbers ``k`` live on the unit torus ``[0, 1)^d`` and are passed as
arrays whose last axis has length ``d``. ``params`` may be any object with
``d``, ``alpha``, ``nu`` and ``gamma`` attributes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DivergenceError, laplacian, lattice_modes

DEFAULT_GRID = {1: 4096, 2: 512, 3: 96}


def _k(k, d: int) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if d == 1 and (k.ndim == 0 or k.shape[-1] != 1):
        k = k[..., None]
    if k.shape[-1] != d:
        raise ValueError(f"wave numbers need a trailing axis of length {d}")
    return k


def omega_squared(k, params) -> np.ndarray:
    k = _k(k, params.d)
    return params.nu + 4.0 * params.alpha * np.sum(np.sin(np.pi * k) ** 2, axis=-1)


def dispersion(k, params) -> np.ndarray:
    """omega(k) = sqrt(nu + 4 alpha sum_j sin^2(pi k_j))."""
    return np.sqrt(omega_squared(k, params))


def scattering_rate(k, params) -> np.ndarray:
    """Fourier symbol of minus the momentum noise generator.

    ``8 sum_j sin^2(pi k_j)`` for d >= 2 and
    ``(4/3) sin^2(pi k) (1 + 2 cos^2(pi k))`` for d = 1.
    """
    k = _k(k, params.d)
    s2 = np.sin(np.pi * k) ** 2
    if params.d == 1:
        s2 = s2[..., 0]
        return (4.0 / 3.0) * s2 * (1.0 + 2.0 * (1.0 - s2))
    return 8.0 * np.sum(s2, axis=-1)


def resolvent_symbol(k, params) -> np.ndarray:
    """Symbol of the operator the resolvent kernel inverts (without lambda).

    ``-2 Delta`` for d >= 2 (equal to the scattering rate). In d = 1 it is the
    operator ``-(1/3) Delta (4 + tau_+ + tau_-)``, whose symbol is twice the
    scattering rate.
    """
    k = _k(k, params.d)
    if params.d == 1:
        s2 = np.sin(np.pi * k[..., 0]) ** 2
        return (4.0 / 3.0) * s2 * (4.0 + 2.0 * np.cos(2 * np.pi * k[..., 0]))
    return scattering_rate(k, params)


def _check_lambda(lam: float) -> None:
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")


def g_hat(k, j: int, lam: float, params) -> np.ndarray:
    """Fourier transform of the resolvent kernel ``g_lambda^j``.

    Convention ``g_hat(k) = sum_z g(z) exp(-2 pi i k.z)``.
    """
    _check_lambda(lam)
    k = _k(k, params.d)
    if not 0 <= j < params.d:
        raise ValueError(f"axis {j} out of range")
    return 2j * np.sin(2 * np.pi * k[..., j]) / (resolvent_symbol(k, params) + lam)


def g_realspace(j: int, lam: float, params, N: int) -> np.ndarray:
    """Solve the resolvent equation on the ``N``-torus by diagonalisation."""
    _check_lambda(lam)
    modes = lattice_modes(N, params.d)
    g = np.fft.ifftn(g_hat(modes, j, lam, params))
    return g.real


def resolvent_operator(g: np.ndarray, lam: float, params) -> np.ndarray:
    """Apply ``lambda - 2 Delta`` (d >= 2) or its d = 1 analogue in real space."""
    if params.d == 1:
        inner = 4.0 * g + np.roll(g, -1) + np.roll(g, 1)
        return -laplacian(inner) / 3.0 + lam * g
    return lam * g - 2.0 * laplacian(g)


def covariance_realspace(params, N: int) -> np.ndarray:
    """``Gamma = (nu - alpha Delta)^{-1}`` on the ``N``-torus.

    For ``nu = 0`` the zero mode is dropped, so the result inverts the
    operator on mean-zero fields.
    """
    if params.nu == 0 and params.d < 3:
        raise DivergenceError("unpinned covariance requires d = 3")
    w2 = omega_squared(lattice_modes(N, params.d), params)
    with np.errstate(divide="ignore"):
        sym = np.where(w2 > 0, 1.0 / np.where(w2 > 0, w2, 1.0), 0.0)
    return np.fft.ifftn(sym).real


def midpoint_grid(M: int, d: int) -> np.ndarray:
    """Nodes ``(i + 1/2)/M`` of the shifted tensor grid, shape ``(M,)*d + (d,)``."""
    x = (np.arange(M) + 0.5) / M
    return np.stack(np.meshgrid(*([x] * d), indexing="ij"), axis=-1)


@dataclass
class SpectralTable:
    grid: np.ndarray
    omega: np.ndarray
    phi: np.ndarray
    gamma_hat: np.ndarray

    def rows(self):
        """Flattened ``(k_1..k_d, omega, phi, gamma_hat)`` rows."""
        d = self.grid.shape[-1]
        k = self.grid.reshape(-1, d)
        return np.column_stack(
            [k, self.omega.ravel(), self.phi.ravel(), self.gamma_hat.ravel()]
        )


def spectral_table(params, M: int) -> SpectralTable:
    grid = midpoint_grid(M, params.d)
    w2 = omega_squared(grid, params)
    return SpectralTable(grid, np.sqrt(w2), scattering_rate(grid, params), 1.0 / w2)


@dataclass
class DiffusivityResult:
    kappa: float
    quadrature_error: float
    grid_size: int
    lambda_used: float = 0.0

    def as_json(self) -> dict:
        return {
            "kappa": self.kappa,
            "error": self.quadrature_error,
            "grid": self.grid_size,
            "lambda": self.lambda_used,
        }


def _check_regime(params, lam: float) -> None:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if params.gamma == 0:
        raise DivergenceError("gamma = 0: purely harmonic transport is ballistic")
    if lam == 0 and params.nu == 0 and params.d < 3:
        raise DivergenceError(
            f"integral diverges for nu=0 in d={params.d} (infinite conductivity)"
        )


def _midpoint_mean(integrand, M: int, d: int, chunk: int = 1 << 21) -> float:
    """Mean of ``integrand(nodes)`` over the ``M^d`` midpoint grid, chunked on axis 0."""
    x = (np.arange(M) + 0.5) / M
    rows = max(1, chunk // M ** (d - 1))
    total = 0.0
    for start in range(0, M, rows):
        axes = [x[start : start + rows]] + [x] * (d - 1)
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        total += float(np.sum(integrand(nodes)))
    return total / M**d


def kappa_lambda(lam: float, params, M: int | None = None) -> float:
    """Midpoint rule for ``int (d_1 omega^2 / omega)^2 / (Phi + lambda)`` over the torus."""
    _check_regime(params, lam)
    M = M or DEFAULT_GRID[params.d]

    def integrand(k):
        num = (4 * np.pi * params.alpha * np.sin(2 * np.pi * k[..., 0])) ** 2
        return num / omega_squared(k, params) / (scattering_rate(k, params) + lam)

    return _midpoint_mean(integrand, M, params.d)


def group_velocity_1(k, params) -> np.ndarray:
    """Analytic ``d omega / d xi_1 = 2 pi alpha sin(2 pi xi_1) / omega``."""
    k = _k(k, params.d)
    return 2 * np.pi * params.alpha * np.sin(2 * np.pi * k[..., 0]) / dispersion(k, params)


def _diffusivity_integral(params, M: int) -> float:
    def integrand(k):
        return group_velocity_1(k, params) ** 2 / scattering_rate(k, params)

    return _midpoint_mean(integrand, M, params.d)


def thermal_diffusivity(params, M: int | None = None) -> DiffusivityResult:
    """``kappa = (1 / (8 pi^2 gamma)) int (d_1 omega)^2 / Phi + gamma``.

    The error estimate is the change of the midpoint value from ``M`` to ``2M``.
    """
    _check_regime(params, 0.0)
    M = M or DEFAULT_GRID[params.d]
    pref = 1.0 / (8 * math.pi**2 * params.gamma)
    coarse = _diffusivity_integral(params, M)
    fine = _diffusivity_integral(params, 2 * M)
    return DiffusivityResult(
        kappa=pref * coarse + params.gamma,
        quadrature_error=pref * abs(fine - coarse),
        grid_size=M,
        lambda_used=0.0,
    )


def group_speed(k, params) -> np.ndarray:
    """Phonon speed ``|grad_k omega| / 2 pi`` in lattice spacings per unit time."""
    k = _k(k, params.d)
    grad = params.alpha * np.sin(2 * np.pi * k) / dispersion(k, params)[..., None]
    return np.linalg.norm(grad, axis=-1)


def max_group_speed(params, M: int = 256) -> float:
    return float(np.max(group_speed(midpoint_grid(M, params.d), params)))
