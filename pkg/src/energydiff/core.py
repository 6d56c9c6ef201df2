"""Lattice geometry, model parameters, phase-space state and difference operators.

Fields live on the periodic cube ``{0..N-1}^d``. Scalar fields have shape
``(*batch, N, ..., N)``; vector fields (``q``, ``p``) carry the ``d``
components on a trailing axis, ``(*batch, N, ..., N, d)``, so the memory
layout is row-major over sites with components contiguous per site.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class AdmissibilityError(ValueError):
    """Parameters outside the regime the model is defined for."""


class DivergenceError(AdmissibilityError):
    """The requested quantity is infinite (unpinned d=1 or d=2)."""


def default_dt(d: int, alpha: float, nu: float) -> float:
    """0.02 / omega_max with omega_max = sqrt(nu + 4 alpha d)."""
    return 0.02 / math.sqrt(nu + 4.0 * alpha * d)


@dataclass(frozen=True)
class ModelParams:
    """Physical and discretization parameters.

    ``dt=None`` selects :func:`default_dt`.
    """

    d: int = 1
    N: int = 64
    alpha: float = 1.0
    nu: float = 1.0
    gamma: float = 1.0
    beta: float = 1.0
    dt: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise AdmissibilityError(f"d must be 1, 2 or 3, got {self.d}")
        if int(self.N) != self.N or self.N < 5:
            raise AdmissibilityError(f"N must be an integer >= 5, got {self.N}")
        for name in ("alpha", "beta"):
            if not getattr(self, name) > 0:
                raise AdmissibilityError(f"{name} must be > 0")
        # gamma = 0 is the purely harmonic (ballistic) control
        for name in ("nu", "gamma"):
            if not getattr(self, name) >= 0:
                raise AdmissibilityError(f"{name} must be >= 0")
        if self.nu == 0 and self.d < 3:
            raise DivergenceError(
                f"unpinned chain (nu=0) in d={self.d} has infinite conductivity"
            )
        if not 0 <= self.seed < 2**64:
            raise AdmissibilityError("seed must fit in 64 bits")
        if self.dt is None:
            object.__setattr__(self, "dt", default_dt(self.d, self.alpha, self.nu))
        elif not self.dt > 0:
            raise AdmissibilityError("dt must be > 0")

    @property
    def pinned(self) -> bool:
        return self.nu > 0

    @property
    def omega_max(self) -> float:
        return math.sqrt(self.nu + 4.0 * self.alpha * self.d)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def volume(self) -> int:
        return self.N**self.d

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass
class PhaseState:
    """Displacements ``q`` and momenta ``p`` at time ``t``.

    Leading batch axes (independent replicas) are allowed on both arrays.
    """

    q: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.q.shape != self.p.shape:
            raise ValueError(f"q {self.q.shape} and p {self.p.shape} differ in shape")

    @property
    def d(self) -> int:
        return self.q.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.q.shape[: -self.d - 1]

    def copy(self) -> "PhaseState":
        return PhaseState(self.q.copy(), self.p.copy(), self.t)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.q).all() and np.isfinite(self.p).all())

    @classmethod
    def zeros(cls, params: ModelParams, batch: tuple[int, ...] = ()) -> "PhaseState":
        shape = batch + params.shape + (params.d,)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class SiteIndex:
    """A site of the periodic lattice; coordinates are reduced mod N."""

    coords: tuple[int, ...]
    N: int

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) % self.N for c in self.coords))

    @property
    def d(self) -> int:
        return len(self.coords)

    def shift(self, axis: int, step: int = 1) -> "SiteIndex":
        c = list(self.coords)
        c[axis] += step
        return SiteIndex(tuple(c), self.N)

    def neighbors(self) -> list["SiteIndex"]:
        return [self.shift(j, s) for j in range(self.d) for s in (1, -1)]


def _check_axis(j: int, d: int) -> None:
    if not 0 <= j < d:
        raise ValueError(f"axis {j} out of range for d={d}")


def grad(field: np.ndarray, j: int, d: int | None = None) -> np.ndarray:
    """Forward difference ``f(x + e_j) - f(x)`` of a scalar field.

    The last ``d`` axes are spatial (``d`` defaults to ``field.ndim``).
    """
    d = field.ndim if d is None else d
    _check_axis(j, d)
    return np.roll(field, -1, axis=field.ndim - d + j) - field


def adj_grad(field: np.ndarray, j: int, d: int | None = None) -> np.ndarray:
    """Adjoint difference ``f(x - e_j) - f(x)``."""
    d = field.ndim if d is None else d
    _check_axis(j, d)
    return np.roll(field, 1, axis=field.ndim - d + j) - field


def laplacian(field: np.ndarray, d: int | None = None) -> np.ndarray:
    """Nearest-neighbour Laplacian; Fourier symbol ``-4 sum_j sin^2(pi k_j)``."""
    d = field.ndim if d is None else d
    out = -2.0 * d * field
    for j in range(d):
        ax = field.ndim - d + j
        out = out + np.roll(field, 1, axis=ax) + np.roll(field, -1, axis=ax)
    return out


def vector_laplacian(v: np.ndarray, d: int) -> np.ndarray:
    """Laplacian applied componentwise to a field with a trailing component axis."""
    return np.moveaxis(laplacian(np.moveaxis(v, -1, 0), d), 0, -1)


def spatial_axes(d: int, vector: bool = True) -> tuple[int, ...]:
    """Negative axis indices of the spatial axes."""
    off = 1 if vector else 0
    return tuple(range(-d - off, -off)) if off else tuple(range(-d, 0))


def lattice_modes(N: int, d: int, real: bool = False) -> np.ndarray:
    """Wave numbers ``n/N`` of the lattice Fourier modes, shape ``(*modes, d)``.

    With ``real=True`` the last axis is truncated to the ``rfftn`` half-spectrum.
    """
    freqs = [np.fft.fftfreq(N)] * d
    if real:
        freqs[-1] = np.fft.rfftfreq(N)
    grids = np.meshgrid(*freqs, indexing="ij")
    return np.stack(grids, axis=-1) % 1.0


def displacements(N: int, d: int) -> np.ndarray:
    """Minimal-image displacement of every site from the origin, shape ``(N,)*d + (d,)``."""
    x = np.arange(N)
    x = np.where(x > N // 2, x - N, x)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    return np.stack(grids, axis=-1)


def delta(N: int, d: int, site: tuple[int, ...] | None = None) -> np.ndarray:
    f = np.zeros((N,) * d)
    f[tuple(site) if site is not None else (0,) * d] = 1.0
    return f


# --- reproducible randomness -------------------------------------------------
#
# Replica r of a run with master seed s draws from default_rng(replica_seed(s, r)),
# where replica_seed hashes (s, r) through SeedSequence(s, spawn_key=(r,)).


def replica_seed(seed: int, r: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(r,))
    return int(ss.generate_state(1, np.uint64)[0])


def replica_generators(seed: int, R: int, start: int = 0) -> list[np.random.Generator]:
    return [np.random.default_rng(replica_seed(seed, r)) for r in range(start, start + R)]


class NormalStream:
    """Standard normal draws arranged as ``(B, n)`` blocks.

    With a list of generators, row ``b`` comes from generator ``b`` so each
    replica's draws do not depend on how replicas are batched. With a single
    generator all rows share one stream. Draws are pre-fetched in chunks of
    ``chunk`` values per row; the sequence seen by each row is unaffected.
    """

    def __init__(self, generators, rows: int | None = None, chunk: int = 1 << 13):
        if isinstance(generators, np.random.Generator):
            self.generators = [generators]
            self.shared = True
            self.rows = 1 if rows is None else rows
        else:
            self.generators = list(generators)
            self.shared = False
            self.rows = len(self.generators)
            if rows is not None and rows != self.rows:
                raise ValueError("rows must equal the number of generators")
        self.chunk = chunk
        self._buf = np.empty((self.rows, 0))
        self._pos = 0

    def draw(self, n: int) -> np.ndarray:
        if self.shared:
            return self.generators[0].standard_normal((self.rows, n))
        if self._pos + n > self._buf.shape[1]:
            self._refill(n)
        out = self._buf[:, self._pos : self._pos + n]
        self._pos += n
        return out

    def _refill(self, n: int) -> None:
        rest = self._buf[:, self._pos :]
        extra = max(self.chunk, n)
        fresh = np.empty((self.rows, rest.shape[1] + extra))
        fresh[:, : rest.shape[1]] = rest
        for b, g in enumerate(self.generators):
            fresh[b, rest.shape[1] :] = g.standard_normal(extra)
        self._buf = fresh
        self._pos = 0
