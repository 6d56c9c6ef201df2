"""Exact sampling of the Gaussian Gibbs measure of the harmonic crystal."""
from __future__ import annotations

import numpy as np

from .core import ModelParams, PhaseState, lattice_modes, spatial_axes
from .spectral import omega_squared


class GibbsSampler:
    """Draws (q, p) from the equilibrium measure at inverse temperature beta.

    Momenta are i.i.d. ``N(0, 1/beta)``. Each displacement component is an
    independent stationary Gaussian field with covariance ``Gamma / beta``,
    produced by filtering white noise with the square root of the covariance
    symbol. For ``nu = 0`` the zero mode is removed, so the lattice average of
    ``q`` vanishes.
    """

    def __init__(self, params: ModelParams, rng=None):
        self.params = params
        self.rng = np.random.default_rng(params.seed) if rng is None else rng
        modes = lattice_modes(params.N, params.d, real=True)
        w2 = omega_squared(modes, params)
        safe = np.where(w2 > 0, w2, 1.0)
        self.spectral_sqrt = np.where(w2 > 0, np.sqrt(1.0 / (params.beta * safe)), 0.0)

    def sample(self, size: int | None = None, rng=None) -> PhaseState:
        """One state, or ``size`` independent states stacked on a leading axis."""
        rng = self.rng if rng is None else rng
        batch = () if size is None else (size,)
        shape = batch + self.params.shape + (self.params.d,)
        p = rng.standard_normal(shape) / np.sqrt(self.params.beta)
        white = rng.standard_normal(shape)
        return PhaseState(self.filter(white), p, 0.0)

    def sample_replicas(self, generators) -> PhaseState:
        """One state per generator, stacked; row ``r`` depends only on generator ``r``."""
        states = [self.sample(rng=g) for g in generators]
        return PhaseState(np.stack([s.q for s in states]), np.stack([s.p for s in states]))

    def filter(self, white: np.ndarray) -> np.ndarray:
        d = self.params.d
        axes = spatial_axes(d)
        w = np.fft.rfftn(white, axes=axes)
        w *= self.spectral_sqrt[..., None]
        return np.fft.irfftn(w, s=self.params.shape, axes=axes)


def mean_site_energy(params: ModelParams) -> float:
    """Exact equilibrium mean of ``e_x``.

    ``d / beta`` by equipartition when pinned. Without pinning the sampled
    measure has no zero mode in ``q``, which removes ``d / (2 beta N^d)``.
    """
    e = params.d / params.beta
    if not params.pinned:
        e -= params.d / (2.0 * params.beta * params.volume)
    return e


def energy_susceptibility(params: ModelParams) -> float:
    """``sum_x Cov(e_x, e_0)``: total-energy variance per site, ``d / beta^2`` when pinned."""
    dof = 2 * params.d * params.volume
    if not params.pinned:
        dof -= params.d
    return dof / (2.0 * params.beta**2 * params.volume)
