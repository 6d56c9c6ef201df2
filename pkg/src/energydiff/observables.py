"""Site energies, energy currents and the local conservation law.

Currents live on directed bonds ``(x, x + e_i)`` and are stored at
``(..., x, i)``: a field with the spatial axes followed by an axis of length
``d``. All functions accept batched states.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import ModelParams, PhaseState

# noise vector fields as matrices on the local momentum coordinates
# bond (x, z), pair (i, j): coordinates (p^i_x, p^j_x, p^i_z, p^j_z)
PAIR_FIELD = np.array(
    [[0, 1, 0, -1], [-1, 0, 1, 0], [0, -1, 0, 1], [1, 0, -1, 0]], dtype=float
)
# d = 1 triple: coordinates (p_{x-1}, p_x, p_{x+1})
TRIPLE_FIELD = np.array([[0, 1, -1], [-1, 0, 1], [1, -1, 0]], dtype=float)


@dataclass
class EnergyField:
    e: np.ndarray
    t: float = 0.0

    def total(self, d: int) -> np.ndarray:
        return self.e.sum(axis=tuple(range(-d, 0)))


@dataclass
class CurrentField:
    j_a: np.ndarray
    j_s: np.ndarray
    t: float = 0.0

    def total(self, gamma: float) -> np.ndarray:
        return self.j_a + gamma * self.j_s


def _shift(a: np.ndarray, axis: int, d: int, step: int = 1) -> np.ndarray:
    """``a(x + step e_axis)`` for a vector field with trailing component axis."""
    return np.roll(a, -step, axis=a.ndim - 1 - d + axis)


def _sshift(a: np.ndarray, axis: int, d: int, step: int = 1) -> np.ndarray:
    """Same for a scalar field whose last ``d`` axes are spatial."""
    return np.roll(a, -step, axis=a.ndim - d + axis)


def site_energy(state: PhaseState, params: ModelParams) -> EnergyField:
    """``e_x = |p_x|^2/2 + (alpha/4) sum_{y~x} |q_y - q_x|^2 + (nu/2) |q_x|^2``."""
    d = params.d
    q, p = state.q, state.p
    bonds = 0.0
    for i in range(d):
        b = np.sum((_shift(q, i, d) - q) ** 2, axis=-1)
        bonds = bonds + b + _sshift(b, i, d, -1)
    e = 0.5 * np.sum(p**2, axis=-1) + 0.25 * params.alpha * bonds
    e = e + 0.5 * params.nu * np.sum(q**2, axis=-1)
    return EnergyField(e, state.t)


def hamiltonian(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``H = 1/2 sum_x [|p_x|^2 + q_x . ((nu - alpha Delta) q)_x]``, evaluated independently of ``e_x``."""
    d = params.d
    q, p = state.q, state.p
    lap = -2.0 * d * q
    for i in range(d):
        lap = lap + _shift(q, i, d) + _shift(q, i, d, -1)
    dens = np.sum(p**2 + q * (params.nu * q - params.alpha * lap), axis=-1)
    return 0.5 * dens.sum(axis=tuple(range(-d, 0)))


def current_hamiltonian(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``-(alpha/2) (q_{x+e_i} - q_x) . (p_{x+e_i} + p_x)`` per bond."""
    d = params.d
    q, p = state.q, state.p
    out = [
        -0.5 * params.alpha * np.sum((_shift(q, i, d) - q) * (_shift(p, i, d) + p), axis=-1)
        for i in range(d)
    ]
    return np.stack(out, axis=-1)


def noise_potential(p: np.ndarray) -> np.ndarray:
    """The d = 1 field ``phi_x`` whose lattice gradient is the noise current.

    ``phi_x = [p_{x+1}^2 + 4 p_x^2 + p_{x-1}^2 + p_{x+1} p_{x-1}
    - 2 p_{x+1} p_x - 2 p_{x-1} p_x] / 6`` for ``p`` of shape ``(..., N, 1)``.
    """
    P = p[..., 0]
    a, c = np.roll(P, 1, axis=-1), np.roll(P, -1, axis=-1)
    return (c**2 + 4 * P**2 + a**2 + c * a - 2 * c * P - 2 * a * P) / 6.0


def current_noise(state: PhaseState, params: ModelParams) -> np.ndarray:
    """Noise part of the energy current (multiply by ``gamma`` for the physical current).

    d >= 2: ``-(|p_{x+e_i}|^2 - |p_x|^2)``; d = 1: ``-(phi_{x+1} - phi_x)``.
    """
    d = params.d
    if d == 1:
        phi = noise_potential(state.p)
        return -(np.roll(phi, -1, axis=-1) - phi)[..., None]
    p2 = np.sum(state.p**2, axis=-1)
    return np.stack([-(_sshift(p2, i, d) - p2) for i in range(d)], axis=-1)


def currents(state: PhaseState, params: ModelParams) -> CurrentField:
    return CurrentField(current_hamiltonian(state, params), current_noise(state, params), state.t)


def total_current(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``j = j_a + gamma j_s`` per bond."""
    return currents(state, params).total(params.gamma)


def divergence(j: np.ndarray, d: int) -> np.ndarray:
    """Net inflow ``sum_i (j_{x-e_i,x} - j_{x,x+e_i})`` of a bond field."""
    out = 0.0
    for i in range(d):
        ji = j[..., i]
        out = out + np.roll(ji, 1, axis=ji.ndim - d + i) - ji
    return out


def hamiltonian_energy_drift(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``A e_x``: time derivative of ``e_x`` under the harmonic flow, term by term.

    ``p_x . ((alpha Delta - nu) q)_x + (alpha/2) sum_{y~x} (q_y - q_x).(p_y - p_x)
    + nu q_x . p_x``
    """
    d = params.d
    q, p = state.q, state.p
    force = -params.nu * q - 2.0 * d * params.alpha * q
    mixed = 0.0
    for i in range(d):
        for s in (1, -1):
            qy, py = _shift(q, i, d, s), _shift(p, i, d, s)
            force = force + params.alpha * qy
            mixed = mixed + np.sum((qy - q) * (py - p), axis=-1)
    out = np.sum(p * force, axis=-1) + 0.5 * params.alpha * mixed
    return out + params.nu * np.sum(q * p, axis=-1)


def noise_energy_drift(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``S e_x`` from the squared noise vector fields, cell by cell.

    For a linear field ``X p = M p`` and ``f = |p_x|^2 / 2``,
    ``X^2 f = sum_{a in x} [(M v)_a^2 + v_a (M^2 v)_a]`` on the cell
    coordinates ``v``. This does not use any closed form for the sum.
    """
    d = params.d
    p = state.p
    out = np.zeros(p.shape[:-1])
    if d == 1:
        P = p[..., 0]
        M, M2 = TRIPLE_FIELD, TRIPLE_FIELD @ TRIPLE_FIELD
        v = np.stack([np.roll(P, 1, -1), P, np.roll(P, -1, -1)], axis=-1)
        Mv, M2v = v @ M.T, v @ M2.T
        contrib = Mv**2 + v * M2v
        # cell centred at x touches x-1, x, x+1
        for slot, shift in enumerate((1, 0, -1)):
            out += np.roll(contrib[..., slot], -shift, axis=-1)
        return out / 6.0
    M, M2 = PAIR_FIELD, PAIR_FIELD @ PAIR_FIELD
    for k in range(d):
        pz = _shift(p, k, d)
        for i, j in combinations(range(d), 2):
            v = np.stack([p[..., i], p[..., j], pz[..., i], pz[..., j]], axis=-1)
            Mv, M2v = v @ M.T, v @ M2.T
            contrib = Mv**2 + v * M2v
            out += contrib[..., 0] + contrib[..., 1]
            out += _sshift(contrib[..., 2] + contrib[..., 3], k, d, -1)
    return out / (d - 1)


def energy_generator(state: PhaseState, params: ModelParams) -> np.ndarray:
    """``L e_x = A e_x + gamma S e_x``."""
    return hamiltonian_energy_drift(state, params) + params.gamma * noise_energy_drift(
        state, params
    )


def continuity_check(state: PhaseState, params: ModelParams) -> float:
    """Max over sites of ``|L e_x - sum_i (j_{x-e_i,x} - j_{x,x+e_i})|``."""
    res = energy_generator(state, params) - divergence(total_current(state, params), params.d)
    return float(np.max(np.abs(res)))
