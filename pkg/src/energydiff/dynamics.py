"""Time evolution by Strang splitting of the harmonic flow and the momentum noise.

The harmonic flow is integrated exactly mode by mode in Fourier space. The
noise is a sweep of exact random rotations, one per noise cell:

* d >= 2: a bond ``(x, x + e_k)`` and a component pair ``i < j``; the pair
  difference ``(delta^i, delta^j)`` with ``delta = p_{x+e_k} - p_x`` is rotated
  by ``phi ~ N(0, 8 gamma dt / (d - 1))`` while ``p_x + p_{x+e_k}`` is kept.
* d = 1: a site ``x``; ``(p_{x-1}, p_x, p_{x+1})`` is rotated about
  ``(1, 1, 1)/sqrt(3)`` by ``psi ~ N(0, gamma dt)``.

Each rotation is the exact time-``dt`` solution of the single-cell diffusion,
so total momentum and kinetic energy are conserved to rounding. Cells are
grouped into classes of pairwise disjoint cells; the fixed sweep visits the
classes in order, which is the same as visiting their cells one by one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numba as nb
import numpy as np

from .core import (
    ModelParams,
    NormalStream,
    PhaseState,
    laplacian,
    lattice_modes,
    spatial_axes,
    vector_laplacian,
)
from .observables import current_noise, divergence
from .spectral import omega_squared


_SQRT3 = math.sqrt(3.0)


@nb.njit(cache=True)
def _triple_sweep(P, z, sd, ia, ib, ic):
    """Rotate ``(P[a], P[b], P[c])`` about ``(1,1,1)`` by ``sd * z``, cell by cell."""
    for r in range(P.shape[0]):
        for n in range(ia.size):
            psi = sd * z[r, n]
            cs = math.cos(psi)
            sn = math.sin(psi) / _SQRT3
            a, b, c = P[r, ia[n]], P[r, ib[n]], P[r, ic[n]]
            m = (a + b + c) / 3.0
            P[r, ia[n]] = m + (a - m) * cs + (c - b) * sn
            P[r, ib[n]] = m + (b - m) * cs + (a - c) * sn
            P[r, ic[n]] = m + (c - m) * cs + (b - a) * sn


@nb.njit(cache=True)
def _pair_sweep(p, z, sd, sa, sb, ci, cj):
    """Rotate the difference ``p[sb] - p[sa]`` in the ``(ci, cj)`` plane, sum fixed."""
    for r in range(p.shape[0]):
        for n in range(sa.size):
            phi = sd * z[r, n]
            cm = math.cos(phi) - 1.0
            sn = math.sin(phi)
            a, b, i, j = sa[n], sb[n], ci[n], cj[n]
            di = p[r, b, i] - p[r, a, i]
            dj = p[r, b, j] - p[r, a, j]
            ui = 0.5 * (cm * di - sn * dj)
            uj = 0.5 * (sn * di + cm * dj)
            p[r, a, i] -= ui
            p[r, b, i] += ui
            p[r, a, j] -= uj
            p[r, b, j] += uj


@nb.njit(cache=True)
def _mode_rotate(qh, ph, c, sw, mws):
    """In-place ``(q, p) <- (c q + sw p, mws q + c p)`` per mode; arrays are ``(B, M, d)``."""
    for r in range(qh.shape[0]):
        for m in range(qh.shape[1]):
            cm, s1, s2 = c[m], sw[m], mws[m]
            for k in range(qh.shape[2]):
                q = qh[r, m, k]
                v = ph[r, m, k]
                qh[r, m, k] = cm * q + s1 * v
                ph[r, m, k] = s2 * q + cm * v


def ring_classes(N: int, width: int) -> list[np.ndarray]:
    """Partition cell start points ``0..N-1`` on a ring into classes of disjoint cells.

    Cell ``s`` covers ``s, ..., s + width - 1`` (mod N).
    """
    full = N // width
    classes = [np.arange(c, full * width, width) for c in range(width)]
    classes += [np.array([full * width + r]) for r in range(N % width)]
    return [c for c in classes if c.size]


@dataclass(frozen=True)
class NoiseCell:
    """A bond ``(site, site + e_axis)`` with component pair, or a d=1 triple centred at ``site``."""

    site: tuple[int, ...]
    axis: int = 0
    pair: tuple[int, int] | None = None


@dataclass
class _Block:
    axis: int
    starts: np.ndarray
    pairs: list = field(default_factory=list)


class Integrator:
    """Strang-split integrator for a (possibly batched) :class:`PhaseState`.

    ``variance_factor`` scales every rotation-angle variance; it exists so the
    calibration can be shown to detect a mis-scaled noise.
    """

    def __init__(
        self,
        params: ModelParams,
        dt: float | None = None,
        randomized_order: bool = False,
        order_seed: int | None = None,
        variance_factor: float = 1.0,
    ):
        self.params = params
        self.dt = params.dt if dt is None else dt
        self.randomized_order = randomized_order
        self._order_rng = np.random.default_rng(
            params.seed if order_seed is None else order_seed
        )
        self.variance_factor = variance_factor
        d, N = params.d, params.N
        w2 = omega_squared(lattice_modes(N, d, real=True), params)
        self._omega = np.sqrt(w2)[..., None]
        self._tables: dict[float, tuple] = {}
        self._cells = None
        if d == 1:
            self.blocks = [_Block(0, s) for s in ring_classes(N, 3)]
        else:
            pairs = list(combinations(range(d), 2))
            self.blocks = [
                _Block(k, s, pairs) for k in range(d) for s in ring_classes(N, 2)
            ]
        self._segments_cache = self._segments()

    # -- cell bookkeeping ---------------------------------------------------

    def sweep_order(self) -> list[NoiseCell]:
        """The fixed enumeration of noise cells visited by one sweep."""
        d, N = self.params.d, self.params.N
        cells = []
        for blk in self.blocks:
            if d == 1:
                cells += [NoiseCell(((s + 1) % N,)) for s in blk.starts]
                continue
            other = [range(N)] * (d - 1)
            for pos in np.ndindex(*(len(r) for r in other)):
                for s in blk.starts:
                    site = list(pos)
                    site.insert(blk.axis, int(s))
                    for pair in blk.pairs:
                        cells.append(NoiseCell(tuple(site), blk.axis, pair))
        return cells

    @property
    def draws_per_step(self) -> int:
        d, N = self.params.d, self.params.N
        return N if d == 1 else d * N**d * (d * (d - 1) // 2)

    # -- harmonic part ------------------------------------------------------

    def mode_rotation(self, h: float):
        """``(cos(w h), sin(w h)/w, -w sin(w h))`` per rfft mode; free flight where ``w = 0``."""
        tab = self._tables.get(h)
        if tab is None:
            w = self._omega
            c = np.cos(w * h)
            with np.errstate(divide="ignore", invalid="ignore"):
                s_over_w = np.where(w > 0, np.sin(w * h) / np.where(w > 0, w, 1.0), h)
            tab = (c, s_over_w, -w * np.sin(w * h))
            self._tables[h] = tab
        return tab

    def _rotate(self, qh, ph, h):
        """Rotate copies of ``qh``, ``ph`` (spatial mode axes, trailing components)."""
        qh, ph = qh.copy(), ph.copy()
        self._rotate_inplace(qh, ph, h)
        return qh, ph

    def _rotate_inplace(self, qh, ph, h):
        c, sw, mws = (t.reshape(-1) for t in self.mode_rotation(h))
        d = self.params.d
        _mode_rotate(qh.reshape(-1, c.size, d), ph.reshape(-1, c.size, d), c, sw, mws)

    def hamiltonian_step(self, state: PhaseState, dt: float | None = None) -> PhaseState:
        """Exact harmonic flow over ``dt``."""
        h = self.dt if dt is None else dt
        axes = spatial_axes(self.params.d)
        qh = np.fft.rfftn(state.q, axes=axes)
        ph = np.fft.rfftn(state.p, axes=axes)
        qh, ph = self._rotate(qh, ph, h)
        s = self.params.shape
        return PhaseState(
            np.fft.irfftn(qh, s=s, axes=axes), np.fft.irfftn(ph, s=s, axes=axes), state.t + h
        )

    # -- noise part ---------------------------------------------------------

    def _segments(self):
        """Flat cell index arrays, one segment per (block, pair), in draw order."""
        d, N = self.params.d, self.params.N
        shape = self.params.shape
        segs = []
        for blk in self.blocks:
            if d == 1:
                s = blk.starts
                segs.append([(s, (s + 1) % N, (s + 2) % N)])
                continue
            grids = [np.arange(N)] * d
            grids[blk.axis] = blk.starts
            x = list(np.meshgrid(*grids, indexing="ij"))
            a = np.ravel_multi_index([g.ravel() for g in x], shape)
            x[blk.axis] = (x[blk.axis] + 1) % N
            b = np.ravel_multi_index([g.ravel() for g in x], shape)
            segs.append([(a, b, np.full(a.size, i), np.full(a.size, j)) for i, j in blk.pairs])
        return segs

    def _cell_arrays(self):
        if self.randomized_order:
            segs = [self._segments_cache[i] for i in self._order_rng.permutation(len(self.blocks))]
            segs = [[s[i] for i in self._order_rng.permutation(len(s))] for s in segs]
        elif self._cells is not None:
            return self._cells
        else:
            segs = self._segments_cache
        flat = [seg for blk in segs for seg in blk]
        cells = tuple(np.ascontiguousarray(np.concatenate(c), dtype=np.int64) for c in zip(*flat))
        if not self.randomized_order:
            self._cells = cells
        return cells

    def _stream(self, noise, rows: int) -> NormalStream:
        if isinstance(noise, NormalStream):
            if noise.rows != rows:
                raise ValueError(f"noise stream has {noise.rows} rows, state batch is {rows}")
            return noise
        if isinstance(noise, np.random.Generator):
            return NormalStream(noise, rows=rows)
        return NormalStream(noise)

    def noise_step(self, state: PhaseState, noise, dt: float | None = None) -> PhaseState:
        """One sweep of conservative random rotations; ``q`` is untouched."""
        h = self.dt if dt is None else dt
        p = self._flat(state.p).copy()
        self._noise_inplace(p, self._stream(noise, p.shape[0]), h)
        return PhaseState(state.q.copy(), p.reshape(state.p.shape), state.t)

    def _flat(self, a: np.ndarray) -> np.ndarray:
        d = self.params.d
        return a.reshape((-1,) + a.shape[a.ndim - d - 1 :])

    def angle_sd(self, h: float) -> float:
        d, g = self.params.d, self.params.gamma
        var = g * h if d == 1 else 8.0 * g * h / (d - 1)
        return math.sqrt(self.variance_factor * var)

    def _noise_inplace(self, p: np.ndarray, stream: NormalStream, h: float) -> None:
        """Sweep in place; ``p`` has shape ``(B, N, ..., N, d)`` and is C-contiguous."""
        if self.params.gamma == 0:
            return
        if not p.flags.c_contiguous:
            raise ValueError("momentum buffer must be C-contiguous")
        z = stream.draw(self.draws_per_step)
        flat = p.reshape(p.shape[0], -1, self.params.d)
        cells = self._cell_arrays()
        if self.params.d == 1:
            _triple_sweep(flat[..., 0], z, self.angle_sd(h), *cells)
        else:
            _pair_sweep(flat, z, self.angle_sd(h), *cells)

    # -- composition --------------------------------------------------------

    def strang_step(self, state: PhaseState, noise, dt: float | None = None) -> PhaseState:
        """``H(dt/2) o noise(dt) o H(dt/2)``."""
        h = self.dt if dt is None else dt
        s = self.hamiltonian_step(state, h / 2)
        s = self.noise_step(s, noise, h)
        return self.hamiltonian_step(s, h / 2)

    def run(self, state: PhaseState, n_steps: int, noise) -> PhaseState:
        """``n_steps`` Strang steps with adjacent half-steps merged."""
        if n_steps <= 0:
            return state.copy()
        return list(self.evolve(state, [n_steps], noise))[-1]

    def evolve(self, state: PhaseState, checkpoints, noise):
        """Yield the state after each cumulative step count in ``checkpoints``.

        Internally the loop carries ``Z_n = H(dt/2) X_n`` in Fourier space, so a
        step is one noise sweep followed by ``H(dt)``; outputs undo the extra
        half step. Only ``p`` is transformed back to real space each step.
        """
        h = self.dt
        axes = spatial_axes(self.params.d)
        s = self.params.shape
        checkpoints = [int(c) for c in checkpoints]
        if any(b < a for a, b in zip(checkpoints, checkpoints[1:])) or min(checkpoints, default=0) < 0:
            raise ValueError("checkpoints must be non-decreasing and >= 0")
        q = self._flat(state.q)
        p = self._flat(state.p)
        stream = self._stream(noise, p.shape[0])
        qh, ph = self._rotate(np.fft.rfftn(q, axes=axes), np.fft.rfftn(p, axes=axes), h / 2)
        done = 0
        for target in checkpoints:
            while done < target:
                p = np.ascontiguousarray(np.fft.irfftn(ph, s=s, axes=axes))
                self._noise_inplace(p, stream, h)
                ph = np.ascontiguousarray(np.fft.rfftn(p, axes=axes))
                self._rotate_inplace(qh, ph, h)
                done += 1
            qo, po = self._rotate(qh, ph, -h / 2)
            yield PhaseState(
                np.fft.irfftn(qo, s=s, axes=axes).reshape(state.q.shape),
                np.fft.irfftn(po, s=s, axes=axes).reshape(state.p.shape),
                state.t + done * h,
            )


# -- generator calibration ---------------------------------------------------


def momentum_generator(p: np.ndarray, d: int) -> np.ndarray:
    """``S p`` in closed form: ``2 Delta p`` (d >= 2) or ``Delta(4p + p_+ + p_-)/6`` (d = 1)."""
    if d == 1:
        P = p[..., 0]
        g = 4.0 * P + np.roll(P, 1, -1) + np.roll(P, -1, -1)
        return (laplacian(g, 1) / 6.0)[..., None]
    return 2.0 * vector_laplacian(p, d)


@dataclass
class CalibrationReport:
    """Per-site drift estimates against the generator.

    ``drift_*`` extrapolates the finite-difference quotients ``D(m dt)``,
    ``m = 1..K``, to zero step with Lagrange weights; this cancels every
    power of ``dt`` below ``K``. ``raw_*`` is ``D(dt)`` alone.
    """

    params: ModelParams
    replicas: int
    dt: float
    order: int
    predicted_p: np.ndarray
    drift_p: np.ndarray
    se_p: np.ndarray
    raw_p: np.ndarray
    raw_se_p: np.ndarray
    predicted_e: np.ndarray
    drift_e: np.ndarray
    se_e: np.ndarray
    raw_e: np.ndarray
    raw_se_e: np.ndarray

    @staticmethod
    def _z(est, se, pred):
        diff = est - pred
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / se, 0.0)
        # deterministic sites must match exactly
        z = np.where((se == 0) & (np.abs(diff) > 1e-9), np.inf, z)
        return z

    @property
    def z_p(self):
        return self._z(self.drift_p, self.se_p, self.predicted_p)

    @property
    def z_e(self):
        return self._z(self.drift_e, self.se_e, self.predicted_e)

    @property
    def raw_z_p(self):
        return self._z(self.raw_p, self.raw_se_p, self.predicted_p)

    @property
    def raw_z_e(self):
        return self._z(self.raw_e, self.raw_se_e, self.predicted_e)

    def passed(self, z_max: float = 3.0, which: str = "both") -> bool:
        zs = {"p": [self.z_p], "e": [self.z_e], "both": [self.z_p, self.z_e]}[which]
        return all(float(np.max(np.abs(z))) <= z_max for z in zs)

    def summary(self) -> dict:
        return {
            "d": self.params.d,
            "N": self.params.N,
            "replicas": self.replicas,
            "dt": self.dt,
            "order": self.order,
            "max_abs_z_p": float(np.max(np.abs(self.z_p))),
            "max_abs_z_e": float(np.max(np.abs(self.z_e))),
            "max_abs_raw_z_p": float(np.max(np.abs(self.raw_z_p))),
            "max_abs_raw_z_e": float(np.max(np.abs(self.raw_z_e))),
        }


MIN_CALIBRATION_REPLICAS = 1000


def extrapolation_weights(mults) -> np.ndarray:
    """Weights ``w`` with ``sum w_j f(m_j h) = f(0)`` for polynomials of degree < len(mults)."""
    m = np.asarray(mults, dtype=float)
    return np.array([np.prod([mi / (mi - mj) for mi in m if mi != mj]) for mj in m])


def delta_momentum(params: ModelParams) -> PhaseState:
    """``q = 0`` and a unit momentum in component 0 at the origin."""
    st = PhaseState.zeros(params)
    st.p[(0,) * params.d + (0,)] = 1.0
    return st


def _one_sweep_moments(integ, p0, h, rng, R, chunk):
    """Mean and standard error of the one-sweep change of ``p`` and ``|p|^2/2``."""
    d = integ.params.d
    e0 = 0.5 * np.sum(p0**2, axis=-1)
    acc = np.zeros((4,) + p0.shape[:-1] + (d,))
    for start in range(0, R, chunk):
        n = min(chunk, R - start)
        p = np.ascontiguousarray(np.broadcast_to(p0, (n,) + p0.shape))
        integ._noise_inplace(p, NormalStream(rng, rows=n), h)
        dp = p - p0
        de = 0.5 * np.sum(p**2, axis=-1) - e0
        acc[0] += dp.sum(0)
        acc[1] += (dp**2).sum(0)
        acc[2, ..., 0] += de.sum(0)
        acc[3, ..., 0] += (de**2).sum(0)
    mean_p, mean_e = acc[0] / R, acc[2, ..., 0] / R
    var_p = np.maximum(acc[1] / R - mean_p**2, 0.0) * R / (R - 1)
    var_e = np.maximum(acc[3, ..., 0] / R - mean_e**2, 0.0) * R / (R - 1)
    return mean_p / h, np.sqrt(var_p / R) / h, mean_e / h, np.sqrt(var_e / R) / h


def calibrate_generator(
    params: ModelParams,
    R: int,
    dt: float = 1e-3,
    initial: PhaseState | None = None,
    variance_factor: float = 1.0,
    randomized_order: bool = False,
    order: int = 4,
    chunk: int = 25_000,
) -> CalibrationReport:
    """Noise-only drift of ``p`` and ``|p|^2/2`` compared with the generator.

    For each step ``m dt``, ``m = 1..order``, ``R`` independent replicas apply
    one noise sweep to the same deterministic momentum field. One sweep moves
    energy across at most one cell per class, so sites away from the source
    receive contributions of high order in ``dt`` whose mean and spread are
    comparable; the extrapolation removes them up to ``dt^order``. The
    prediction is ``gamma S p`` and ``gamma`` times the net inflow of the
    noise current.
    """
    if R < MIN_CALIBRATION_REPLICAS:
        raise ValueError(
            f"R={R} too small for a 3-SE calibration; need at least {MIN_CALIBRATION_REPLICAS}"
        )
    initial = delta_momentum(params) if initial is None else initial
    p0 = initial.p
    integ = Integrator(
        params, dt=dt, randomized_order=randomized_order, variance_factor=variance_factor
    )
    ss = np.random.SeedSequence(params.seed, spawn_key=(0xCA1,))
    mults = np.arange(1, order + 1)
    w = extrapolation_weights(mults)
    runs = [
        _one_sweep_moments(integ, p0, m * dt, np.random.default_rng(s), R, chunk)
        for m, s in zip(mults, ss.spawn(order))
    ]
    dp, sp, de, se = (np.array(x) for x in zip(*runs))
    g = params.gamma
    pred_p = g * momentum_generator(p0, params.d)
    pred_e = g * divergence(current_noise(initial, params), params.d)
    wx = w.reshape((-1,) + (1,) * (dp.ndim - 1))
    we = w.reshape((-1,) + (1,) * (de.ndim - 1))
    return CalibrationReport(
        params=params,
        replicas=R,
        dt=dt,
        order=order,
        predicted_p=pred_p,
        drift_p=np.sum(wx * dp, axis=0),
        se_p=np.sqrt(np.sum(wx**2 * sp**2, axis=0)),
        raw_p=dp[0],
        raw_se_p=sp[0],
        predicted_e=pred_e,
        drift_e=np.sum(we * de, axis=0),
        se_e=np.sqrt(np.sum(we**2 * se**2, axis=0)),
        raw_e=de[0],
        raw_se_e=se[0],
    )
