"""Equilibrium energy correlations, their spreading, and current autocorrelations.

Two routes to the space-time correlation ``S(x, t) = Cov(e_x(t), e_0(0))``:

``direct``
    Sample the Gibbs measure, run the dynamics and correlate the centred
    energy fields at ``0`` and ``t``, averaging over translations.

``tangent``
    For a fixed noise path the flow ``X(t) = Phi X(0)`` is linear, so for a
    Gaussian ``X(0) ~ N(0, C)``

        Cov(e_x(t), e_0(0)) = 1/2 tr(Q_x Phi C Q_0 C Phi^T) = sum_m e_x(Phi u_m)

    where ``e_0 = 1/2 X^T Q_0 X`` and ``C Q_0 C = sum_m u_m u_m^T``. Each
    replica evolves one random combination ``v = sum_m g_m u_m`` with
    ``g ~ N(0, I)``; ``E[e_x(Phi v)]`` over ``g`` and the noise is ``S(x, t)``.
    The estimate has no far-field noise because ``v`` is localized.

All estimators work on :class:`TrajectoryRecord` data so they can be re-run
on saved records.
"""
from __future__ import annotations

import io
import json
import math
import re
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AdmissibilityError,
    ModelParams,
    PhaseState,
    displacements,
    replica_generators,
    replica_seed,
    NormalStream,
)
from .dynamics import Integrator
from .equilibrium import GibbsSampler, energy_susceptibility, mean_site_energy
from .observables import site_energy, total_current
from .spectral import covariance_realspace, group_speed, midpoint_grid, scattering_rate


class SoundConeError(AdmissibilityError):
    """Requested horizon lets ballistic transport wrap around the torus."""


# -- sound cone ----------------------------------------------------------------

REACH_GRID = {1: 8192, 2: 256, 3: 64}


def ballistic_reach(params: ModelParams, T: float, lifetimes: float = 5.0, M: int | None = None) -> float:
    """Largest distance a phonon can carry energy ballistically by time ``T``.

    A mode with speed ``v(k)`` decays at rate ``gamma Phi(k)``; it is counted
    as travelling for ``min(T, lifetimes / (gamma Phi(k)))``. With
    ``gamma = 0`` this is ``max v * T``.
    """
    d = params.d
    grid = midpoint_grid(M or REACH_GRID[d], d)
    v = group_speed(grid, params)
    if params.gamma == 0:
        travel = np.full(v.shape, float(T))
    else:
        rate = params.gamma * scattering_rate(grid, params)
        with np.errstate(divide="ignore"):
            travel = np.minimum(T, lifetimes / rate)
    return float(np.max(v * travel))


def check_sound_cone(params: ModelParams, T: float, lifetimes: float = 5.0) -> float:
    reach = ballistic_reach(params, T, lifetimes)
    if not reach < params.N / 2:
        raise SoundConeError(
            f"ballistic reach {reach:.1f} by t={T} is not below N/2={params.N / 2}"
        )
    return reach


def geometric_times(T: float, octaves: int, per_octave: int = 1) -> np.ndarray:
    """``T * 2^(-m / per_octave)`` for ``m = 0 .. octaves * per_octave``, ascending."""
    m = np.arange(octaves * per_octave, -1, -1)
    return T * 2.0 ** (-m / per_octave)


# -- records -------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """Energy fields (and optionally bond currents) of one replica at output times.

    ``kind`` is ``"direct"`` (equilibrium trajectory; row 0 is ``t = 0``) or
    ``"tangent"`` (energies of the evolved perturbation).
    """

    replica: int
    seed: int
    kind: str
    times: np.ndarray
    energy: np.ndarray
    current: np.ndarray | None = None
    flux_times: np.ndarray | None = None
    flux: np.ndarray | None = None


def save_records(path, records: list[TrajectoryRecord], params: ModelParams) -> None:
    """Stack records into one ``.npz`` file."""
    arrays = {
        "replica": np.array([r.replica for r in records]),
        "seed": np.array([r.seed for r in records], dtype=np.uint64),
        "times": records[0].times,
        "energy": np.stack([r.energy for r in records]),
        "kind": np.array(records[0].kind),
        "params": np.array(json.dumps(params_dict(params))),
    }
    if records[0].current is not None:
        arrays["current"] = np.stack([r.current for r in records])
    if records[0].flux is not None:
        arrays["flux_times"] = records[0].flux_times
        arrays["flux"] = np.stack([r.flux for r in records])
    _write_npz(path, arrays)


def _write_npz(path, arrays: dict) -> None:
    """``np.savez`` layout with fixed member timestamps, so equal data gives equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, a in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(a), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_records(path) -> tuple[list[TrajectoryRecord], ModelParams]:
    with np.load(path) as z:
        params = ModelParams(**json.loads(str(z["params"])))
        cur = z["current"] if "current" in z else None
        flux = z["flux"] if "flux" in z else None
        records = [
            TrajectoryRecord(
                replica=int(z["replica"][i]),
                seed=int(z["seed"][i]),
                kind=str(z["kind"]),
                times=z["times"],
                energy=z["energy"][i],
                current=None if cur is None else cur[i],
                flux_times=None if flux is None else z["flux_times"],
                flux=None if flux is None else flux[i],
            )
            for i in range(len(z["replica"]))
        ]
    return records, params


def params_dict(params: ModelParams) -> dict:
    return {k: getattr(params, k) for k in ("d", "N", "alpha", "nu", "gamma", "beta", "dt", "seed")}


# -- simulation drivers --------------------------------------------------------


def tangent_vectors(params: ModelParams) -> list[PhaseState]:
    """States ``u_m`` with ``sum_m u_m u_m^T = C Q_0 C`` for the energy at the origin."""
    d, N, b = params.d, params.N, params.beta
    shape = params.shape + (d,)
    out = []
    for i in range(d):
        p = np.zeros(shape)
        p[(0,) * d + (i,)] = 1.0 / b
        out.append(PhaseState(np.zeros(shape), p))
    gam = covariance_realspace(params, N) / b
    qfields = []
    for k in range(d):
        for s in (1, -1):
            qfields.append(math.sqrt(params.alpha / 2) * (np.roll(gam, s, axis=k) - gam))
    if params.nu > 0:
        qfields.append(math.sqrt(params.nu) * gam)
    for f in qfields:
        for i in range(d):
            q = np.zeros(shape)
            q[..., i] = f
            out.append(PhaseState(q, np.zeros(shape)))
    return out


def _steps(times, dt) -> np.ndarray:
    n = np.rint(np.asarray(times, dtype=float) / dt).astype(np.int64)
    if np.any(np.diff(n) < 0) or np.any(n < 0):
        raise ValueError("output times must be non-negative and ascending")
    return n


def _simulate_block(params, kind, steps, replicas, with_current, flux_stride, flux_steps, opts):
    """Run one batch of replicas; each replica's stream depends only on its index."""
    gens = replica_generators(params.seed, len(replicas), start=replicas[0])
    if kind == "tangent":
        us = tangent_vectors(params)
        g = np.stack([gen.standard_normal(len(us)) for gen in gens])
        q = np.einsum("rm,m...->r...", g, np.stack([u.q for u in us]))
        p = np.einsum("rm,m...->r...", g, np.stack([u.p for u in us]))
        state = PhaseState(q, p)
    else:
        state = GibbsSampler(params).sample_replicas(gens)
    integ = Integrator(params, **opts)
    stream = NormalStream(gens)
    want_e, want_j = set(steps.tolist()), set(flux_steps.tolist())
    checkpoints = sorted(want_e | want_j)
    energy, current, flux = {}, {}, {}
    for n, st in zip(checkpoints, integ.evolve(state, checkpoints, stream)):
        if n in want_j:
            flux[n] = total_current(st, params)[..., 0].sum(axis=tuple(range(1, params.d + 1)))
        if n in want_e:
            energy[n] = site_energy(st, params).e
            if with_current:
                current[n] = total_current(st, params)
    recs = []
    for k, r in enumerate(replicas):
        recs.append(
            TrajectoryRecord(
                replica=int(r),
                seed=replica_seed(params.seed, int(r)),
                kind=kind,
                times=steps * params.dt,
                energy=np.stack([energy[n][k] for n in steps]),
                current=np.stack([current[n][k] for n in steps]) if with_current else None,
                flux_times=flux_steps * params.dt if flux_stride else None,
                flux=np.array([flux[n][k] for n in flux_steps]) if flux_stride else None,
            )
        )
    return recs


def simulate(
    params: ModelParams,
    R: int,
    times,
    kind: str = "tangent",
    with_current: bool = False,
    flux_stride: int = 0,
    batch: int = 400,
    workers: int = 1,
    guard: bool = True,
    integrator_options: dict | None = None,
) -> list[TrajectoryRecord]:
    """Run ``R`` replicas and record energies at ``times`` (``t = 0`` is always included).

    ``flux_stride > 0`` also records the volume-summed current along axis 0
    every ``flux_stride`` steps. Replica ``r`` uses the stream
    ``replica_seed(params.seed, r)`` regardless of ``batch`` and ``workers``.
    ``integrator_options`` are passed to :class:`Integrator`.
    """
    if kind not in ("direct", "tangent"):
        raise ValueError(f"unknown kind {kind!r}")
    if R < 1:
        raise ValueError("need at least one replica")
    steps = _steps(np.concatenate([[0.0], np.asarray(times, dtype=float)]), params.dt)
    steps = np.unique(steps)
    if guard:
        check_sound_cone(params, steps[-1] * params.dt)
    flux_steps = (
        np.arange(0, steps[-1] + 1, flux_stride, dtype=np.int64) if flux_stride else np.array([], dtype=np.int64)
    )
    blocks = [list(range(s, min(s + batch, R))) for s in range(0, R, batch)]
    opts = dict(integrator_options or {})
    args = [(params, kind, steps, b, with_current, flux_stride, flux_steps, opts) for b in blocks]
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_block, *zip(*args)))
    else:
        parts = [_simulate_block(*a) for a in args]
    return [r for part in parts for r in part]


# -- correlation profile -------------------------------------------------------


@dataclass
class CorrelationProfile:
    """``S(x, t)`` on minimal-image displacements, with replica-level errors.

    ``samples`` holds the per-replica estimates; ``S`` is their mean.
    """

    times: np.ndarray
    S: np.ndarray
    stderr: np.ndarray
    replicas: int
    centering: float
    method: str
    samples: np.ndarray = field(repr=False, default=None)

    @property
    def d(self) -> int:
        return self.S.ndim - 1

    def total(self) -> np.ndarray:
        return self.S.reshape(len(self.times), -1).sum(axis=1)

    def total_stderr(self) -> np.ndarray:
        tot = self.samples.reshape(self.samples.shape[:2] + (-1,)).sum(axis=2)
        return tot.std(axis=0, ddof=1) / math.sqrt(self.replicas)


def _cross_correlate(a, b, d):
    """``(1/N^d) sum_y a(y + x) b(y)`` over the last ``d`` axes."""
    axes = tuple(range(-d, 0))
    s = a.shape[-d:]
    fa = np.fft.rfftn(a, axes=axes)
    fb = np.fft.rfftn(b, axes=axes)
    return np.fft.irfftn(fa * np.conj(fb), s=s, axes=axes) / np.prod(s)


def profile_from_records(records: list[TrajectoryRecord], params: ModelParams) -> CorrelationProfile:
    if len(records) < 2:
        raise ValueError("need at least two replicas for standard errors")
    kind = records[0].kind
    E = np.stack([r.energy for r in records])
    ebar = mean_site_energy(params)
    if kind == "direct":
        c = E - ebar
        samples = _cross_correlate(c, c[:, :1], params.d)
    else:
        samples = E
    R = len(records)
    return CorrelationProfile(
        times=records[0].times,
        S=samples.mean(axis=0),
        stderr=samples.std(axis=0, ddof=1) / math.sqrt(R),
        replicas=R,
        centering=ebar,
        method=kind,
        samples=samples,
    )


def estimate_correlation(params: ModelParams, R: int, times, method: str = "tangent", **kw) -> CorrelationProfile:
    """Simulate and estimate ``S(x, t)``; see the module docstring for ``method``."""
    if R < 2:
        raise ValueError("R must be >= 2")
    return profile_from_records(simulate(params, R, times, kind=method, **kw), params)


def exact_tangent_profile(params: ModelParams, times) -> CorrelationProfile:
    """``S(x, t) = sum_m e_x(Phi u_m)`` evaluated exactly for ``gamma = 0``.

    Without noise the flow is deterministic, so summing over all tangent
    vectors gives the correlation with no statistical error.
    """
    if params.gamma != 0:
        raise ValueError("the exact profile needs gamma = 0")
    us = tangent_vectors(params)
    state = PhaseState(np.stack([u.q for u in us]), np.stack([u.p for u in us]))
    steps = np.unique(_steps(np.concatenate([[0.0], np.asarray(times, dtype=float)]), params.dt))
    integ = Integrator(params)
    S = np.stack([site_energy(st, params).e.sum(axis=0) for st in integ.evolve(state, steps, np.random.default_rng(params.seed))])
    return CorrelationProfile(
        times=steps * params.dt,
        S=S,
        stderr=np.zeros_like(S),
        replicas=len(us),
        centering=mean_site_energy(params),
        method="exact",
        samples=np.broadcast_to(S, (2,) + S.shape),
    )


# -- spreading -----------------------------------------------------------------


@dataclass
class MSDResult:
    times: np.ndarray
    m: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_stderr: float
    intercept: float
    window: tuple[float, float]
    signed_weights: bool


def _r2(d: int, N: int) -> np.ndarray:
    return np.sum(displacements(N, d).astype(float) ** 2, axis=-1)


def msd(profile: CorrelationProfile, window: tuple[float, float] | None = None) -> MSDResult:
    """``m(t) = sum_x |x|^2 S(x,t) / sum_x S(x,t)`` and its least-squares slope.

    The per-replica slopes (weights normalized by the ensemble sum, so the fit
    is linear in the data) give the slope's standard error. The default
    window is the later half of the positive output times.
    """
    times = profile.times
    if len(times) < 3:
        raise ValueError("need at least three output times")
    d = profile.d
    N = profile.S.shape[-1]
    r2 = _r2(d, N)
    tot = profile.total()
    if np.any(tot <= 0):
        raise ValueError("non-positive normalization sum_x S(x, t)")
    axes = tuple(range(2, 2 + d))
    mr = np.sum(profile.samples * r2, axis=axes) / tot
    m = mr.mean(axis=0)
    se = mr.std(axis=0, ddof=1) / math.sqrt(profile.replicas)
    if window is None:
        pos = times[times > 0]
        upper = pos[min(len(pos) // 2, len(pos) - 2) :]
        window = (float(upper[0]), float(upper[-1]))
    sel = (times >= window[0] * (1 - 1e-12)) & (times <= window[1] * (1 + 1e-12))
    if sel.sum() < 2:
        raise ValueError("fit window holds fewer than two output times")
    t = times[sel]
    A = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, mr[:, sel].T, rcond=None)
    slopes = coef[0]
    fit = np.linalg.lstsq(A, m[sel], rcond=None)[0]
    absw = np.abs(profile.S).reshape(len(times), -1).sum(axis=1)
    return MSDResult(
        times=times,
        m=m,
        stderr=se,
        slope=float(fit[0]),
        slope_stderr=float(slopes.std(ddof=1) / math.sqrt(profile.replicas)),
        intercept=float(fit[1]),
        window=window,
        signed_weights=bool(np.any(absw > 2.0 * np.abs(tot))),
    )


def gaussian_profile(N: int, d: int, variance: float) -> np.ndarray:
    """Normalized lattice Gaussian on minimal-image displacements; a delta for zero variance."""
    r2 = _r2(d, N)
    if variance <= 0:
        return (r2 == 0).astype(float)
    g = np.exp(-r2 / (2.0 * variance))
    return g / g.sum()


def profile_shape_test(profile: CorrelationProfile, t: float, kappa: float, m0: float | None = None) -> float:
    """L1 distance between ``S(., t)/sum S`` and the predicted lattice Gaussian.

    The Gaussian has per-coordinate variance ``(m(0) + d kappa t) / d``.
    """
    d = profile.d
    N = profile.S.shape[-1]
    k = int(np.argmin(np.abs(profile.times - t)))
    if m0 is None:
        r2 = _r2(d, N)
        m0 = float(np.sum(r2 * profile.S[0]) / profile.S[0].sum())
    rho = profile.S[k] / profile.S[k].sum()
    var = (m0 + d * kappa * profile.times[k]) / d
    return float(np.abs(rho - gaussian_profile(N, d, var)).sum())


# -- fluctuation field ---------------------------------------------------------


@dataclass
class FieldVariance:
    times: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    samples: np.ndarray = field(repr=False, default=None)


def fluctuation_field(energy: np.ndarray, F: np.ndarray, ebar: float, d: int) -> np.ndarray:
    """``eps^{d/2} sum_y F(eps y) (e_y - ebar)`` with ``eps = 1/N``."""
    N = energy.shape[-1]
    axes = tuple(range(-d, 0))
    return N ** (-d / 2) * np.sum(F * (energy - ebar), axis=axes)


def field_variance_from_records(records, params, F) -> FieldVariance:
    E = np.stack([r.energy for r in records])
    Y = fluctuation_field(E, np.asarray(F, dtype=float), mean_site_energy(params), params.d)
    R = Y.shape[0]
    var = Y.var(axis=0, ddof=1)
    c = Y - Y.mean(axis=0)
    m4 = np.mean(c**4, axis=0)
    se = np.sqrt(np.maximum(m4 - var**2, 0.0) / R)
    return FieldVariance(records[0].times, var, se, Y)


def fluctuation_field_variance(params: ModelParams, R: int, t: float, F, **kw) -> FieldVariance:
    """Monte Carlo variance of the energy fluctuation field at ``0`` and ``t``.

    ``F`` is an array of shape ``(N,)*d`` holding the test function at the
    grid points ``y/N``, or a callable taking the ``(N,)*d + (d,)`` array of
    grid points.
    """
    if callable(F):
        pts = np.stack(np.meshgrid(*([np.arange(params.N) / params.N] * params.d), indexing="ij"), -1)
        F = F(pts)
    recs = simulate(params, R, [t], kind="direct", **kw)
    return field_variance_from_records(recs, params, F)


# -- Green-Kubo ----------------------------------------------------------------


@dataclass
class GreenKuboSeries:
    """Current autocorrelation ``C`` and its running integral.

    ``kappa`` adds the noise's own contribution ``gamma`` to ``integral / d``:
    on the torus the noise current sums to zero, so ``C`` only sees the
    harmonic part.
    """

    lags: np.ndarray
    C: np.ndarray
    stderr: np.ndarray
    integral: np.ndarray
    integral_stderr: np.ndarray
    plateau: bool
    plateau_value: float
    plateau_window: tuple[float, float]
    kappa: float
    kappa_stderr: float

    def as_json(self) -> dict:
        return {
            "C0": float(self.C[0]),
            "plateau": self.plateau,
            "plateau_value": self.plateau_value,
            "plateau_window": list(self.plateau_window),
            "kappa": self.kappa,
            "kappa_stderr": self.kappa_stderr,
        }


def _autocorr(x: np.ndarray, max_lag: int) -> np.ndarray:
    """``mean_s x(s + k) x(s)`` for ``k = 0..max_lag`` along the last axis."""
    n = x.shape[-1]
    L = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, n=L, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), n=L, axis=-1)[..., : max_lag + 1]
    return ac / (n - np.arange(max_lag + 1))


def green_kubo_from_records(
    records: list[TrajectoryRecord], params: ModelParams, horizon: float, plateau_fraction: float = 0.25
) -> GreenKuboSeries:
    J = np.stack([r.flux for r in records])
    ft = records[0].flux_times
    h = ft[1] - ft[0]
    max_lag = int(round(horizon / h))
    if max_lag >= J.shape[1]:
        raise ValueError("horizon exceeds the recorded run")
    Cr = params.beta**2 / params.volume * _autocorr(J, max_lag)
    R = len(records)
    # trapezoid running integral, per replica
    Ir = np.concatenate([np.zeros((R, 1)), np.cumsum(0.5 * h * (Cr[:, 1:] + Cr[:, :-1]), axis=1)], axis=1)
    C, se = Cr.mean(0), Cr.std(0, ddof=1) / math.sqrt(R)
    I, Ise = Ir.mean(0), Ir.std(0, ddof=1) / math.sqrt(R)
    lags = np.arange(max_lag + 1) * h
    start = int((1 - plateau_fraction) * max_lag)
    win = I[start:]
    pv = float(win.mean())
    spread = float(win.max() - win.min())
    plateau = spread <= max(2.0 * float(Ise[-1]), 0.05 * abs(pv))
    pse = float(Ir[:, start:].mean(axis=1).std(ddof=1) / math.sqrt(R))
    d = params.d
    return GreenKuboSeries(
        lags=lags,
        C=C,
        stderr=se,
        integral=I,
        integral_stderr=Ise,
        plateau=bool(plateau),
        plateau_value=pv,
        plateau_window=(float(lags[start]), float(lags[-1])),
        kappa=params.gamma + pv / d,
        kappa_stderr=pse / d,
    )


def green_kubo(params: ModelParams, R: int, horizon: float, run_length: float | None = None, lag: float = 0.1, **kw):
    """Equilibrium current autocorrelation ``(beta^2/N^d) <J_1(t) J_1(0)>``, averaged over time origins."""
    run_length = run_length or 4 * horizon
    stride = max(1, int(round(lag / params.dt)))
    recs = simulate(params, R, [run_length], kind="direct", flux_stride=stride, guard=False, **kw)
    return green_kubo_from_records(recs, params, horizon)


# -- emission ------------------------------------------------------------------


def write_profile_csv(profile: CorrelationProfile, path) -> None:
    d = profile.d
    N = profile.S.shape[-1]
    disp = displacements(N, d).reshape(-1, d)
    cols = [f"x{i + 1}" for i in range(d)] + ["t", "S", "stderr"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(profile.times):
            S = profile.S[k].reshape(-1)
            E = profile.stderr[k].reshape(-1)
            for j in range(disp.shape[0]):
                xs = ",".join(str(int(v)) for v in disp[j])
                fh.write(f"{xs},{t:.17g},{S[j]:.17g},{E[j]:.17g}\n")


def write_json(obj: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj) + "\n")


def dumps(obj) -> str:
    """JSON with every float written to 17 significant digits."""

    def conv(v):
        if isinstance(v, dict):
            return {str(k): conv(x) for k, x in v.items()}
        if isinstance(v, (list, tuple, np.ndarray)):
            return [conv(x) for x in v]
        if isinstance(v, (bool, np.bool_)):
            return bool(v)
        if isinstance(v, (float, np.floating)):
            v = float(v)
            return _FloatToken(f"{v:.17g}" if math.isfinite(v) else "null")
        if isinstance(v, np.integer):
            return int(v)
        return v

    text = json.dumps(conv(obj), indent=2, default=lambda t: f"\x00{t.text}\x00")
    return re.sub(r'"\\u0000(.*?)\\u0000"', r"\1", text)


class _FloatToken:
    def __init__(self, text):
        self.text = text


def susceptibility(params: ModelParams) -> float:
    return energy_susceptibility(params)
