"""Command-line front end: ``energydiff {kappa,simulate,correlate,verify,spectra}``.

Every command reads a flat ``key = value`` config file (``--config``) and
``--set key=value`` overrides, later ones winning. Commands that write files
put them in the output directory together with a manifest listing the full
config, the per-replica seeds and a SHA-256 of every file.

Exit codes: 0 success, 2 config error, 3 admissibility or divergence,
4 verification failure, 5 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import estimators as est
from .core import AdmissibilityError, ModelParams, PhaseState, replica_seed
from .dynamics import Integrator, calibrate_generator
from .equilibrium import GibbsSampler
from .observables import continuity_check, hamiltonian
from .spectral import covariance_realspace, kappa_lambda, spectral_table, thermal_diffusivity

OUT_ENV = "ENERGYDIFF_OUT"

EXIT_OK, EXIT_CONFIG, EXIT_ADMISSIBILITY, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _opt_float(s: str) -> float | None:
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


@dataclass
class ExperimentConfig:
    """Everything a run needs; field names are the config keys."""

    d: int = 1
    N: int = 64
    alpha: float = 1.0
    nu: float = 1.0
    gamma: float = 1.0
    beta: float = 1.0
    dt: float | None = None
    seed: int = 0
    replicas: int = 64
    horizon: float = 20.0
    output_times: tuple[float, ...] = ()
    octaves: int = 5
    per_octave: int = 1
    method: str = "tangent"
    currents: bool = True
    M: int | None = None
    lambdas: tuple[float, ...] = ()
    out: str | None = None
    records: str | None = None
    fit_window: tuple[float, ...] = ()
    workers: int = 1
    batch: int = 400
    randomized_order: bool = False
    variance_factor: float = 1.0
    calibration_N: int | None = None
    calibration_replicas: int = 200_000
    calibration_dt: float = 1e-3
    conservation_steps: int = 10_000
    gibbs_samples: int = 100_000
    continuity_states: int = 100
    spectra_M: int = 64

    def model(self) -> ModelParams:
        return ModelParams(
            d=self.d, N=self.N, alpha=self.alpha, nu=self.nu, gamma=self.gamma,
            beta=self.beta, dt=self.dt, seed=self.seed,
        )

    def times(self) -> np.ndarray:
        if self.output_times:
            return np.asarray(self.output_times, dtype=float)
        return est.geometric_times(self.horizon, self.octaves, self.per_octave)

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or "runs")

    def echo(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_PARSERS = {
    "dt": _opt_float,
    "M": lambda s: None if s.strip().lower() in ("", "none", "auto") else int(s),
    "calibration_N": lambda s: None if s.strip().lower() in ("", "none", "auto") else int(s),
    "output_times": _floats,
    "lambdas": _floats,
    "fit_window": _floats,
    "out": _opt_str,
    "records": _opt_str,
    "method": str.strip,
}


def _parse_value(key: str, raw: str, default):
    if key in _PARSERS:
        return _PARSERS[key](raw)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_pairs(lines, source: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path:
        try:
            with open(path) as fh:
                raw.update(parse_pairs(fh, path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw.update(parse_pairs(overrides, "--set"))
    cfg = ExperimentConfig()
    known = {f.name: f for f in fields(cfg)}
    for k, v in raw.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        try:
            setattr(cfg, k, _parse_value(k, v, getattr(cfg, k)))
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from exc
    if cfg.method not in ("tangent", "direct"):
        raise ConfigError("method must be 'tangent' or 'direct'")
    if cfg.replicas < 2 or cfg.workers < 1 or cfg.batch < 1:
        raise ConfigError("replicas >= 2, workers >= 1 and batch >= 1 are required")
    if cfg.fit_window and len(cfg.fit_window) != 2:
        raise ConfigError("fit_window takes two times")
    return cfg


# -- manifests -----------------------------------------------------------------


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    replica_seeds: list[int]
    code_version: str = field(default_factory=_version)
    status: str = "running"
    wall_clock: float = 0.0
    files: dict[str, str] = field(default_factory=dict)

    def as_json(self) -> dict:
        return {
            "command": self.command,
            "status": self.status,
            "code_version": self.code_version,
            "seed": self.seed,
            "config": self.config,
            "replica_seeds": self.replica_seeds,
            "wall_clock": self.wall_clock,
            "files": self.files,
        }

    def write(self, path: Path) -> None:
        est.write_json(self.as_json(), path)


def verify_manifest(path) -> bool:
    """True when every listed file exists with the recorded checksum."""
    import json

    path = Path(path)
    man = json.loads(path.read_text())
    return all(
        (path.parent / name).exists() and sha256(path.parent / name) == digest
        for name, digest in man["files"].items()
    )


class _Run:
    """Writes the manifest up front and finalizes it with checksums."""

    def __init__(self, cmd: str, cfg: ExperimentConfig, replicas: int = 0):
        self.dir = cfg.out_dir()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path = self.dir / f"manifest_{cmd}.json"
        self.manifest = RunManifest(
            command=cmd,
            config=cfg.echo(),
            seed=cfg.seed,
            replica_seeds=[replica_seed(cfg.seed, r) for r in range(replicas)],
        )
        self.t0 = time.perf_counter()
        self.manifest.write(self.path)

    def file(self, name: str) -> Path:
        return self.dir / name

    def finish(self, names: list[str]) -> None:
        self.manifest.files = {n: sha256(self.dir / n) for n in names}
        self.manifest.wall_clock = time.perf_counter() - self.t0
        self.manifest.status = "complete"
        self.manifest.write(self.path)


# -- commands ------------------------------------------------------------------


def cmd_kappa(cfg: ExperimentConfig) -> int:
    params = cfg.model()
    res = thermal_diffusivity(params, cfg.M)
    out = res.as_json()
    if cfg.lambdas:
        out["kappa_lambda"] = [
            {"lambda": lam, "value": kappa_lambda(lam, params, cfg.M)} for lam in cfg.lambdas
        ]
    print(est.dumps(out))
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig) -> int:
    params = cfg.model()
    run = _Run("simulate", cfg, cfg.replicas)
    recs = est.simulate(
        params, cfg.replicas, cfg.times(), kind=cfg.method, with_current=cfg.currents,
        batch=cfg.batch, workers=cfg.workers, integrator_options=_integrator_options(cfg),
    )
    est.save_records(run.file("records.npz"), recs, params)
    run.finish(["records.npz"])
    print(run.path)
    return EXIT_OK


def _integrator_options(cfg: ExperimentConfig) -> dict:
    return {"randomized_order": cfg.randomized_order, "variance_factor": cfg.variance_factor}


def correlate_summary(profile, params, fit_window=None) -> dict:
    """MSD fit and the comparison with the quadrature diffusivity."""
    fit = est.msd(profile, tuple(fit_window) if fit_window else None)
    out = {
        "method": profile.method,
        "replicas": profile.replicas,
        "centering": profile.centering,
        "susceptibility": est.susceptibility(params),
        "total": profile.total().tolist(),
        "total_stderr": profile.total_stderr().tolist(),
        "times": profile.times.tolist(),
        "msd": fit.m.tolist(),
        "msd_stderr": fit.stderr.tolist(),
        "fit_window": list(fit.window),
        "slope": fit.slope,
        "slope_stderr": fit.slope_stderr,
        "signed_weights": fit.signed_weights,
    }
    if params.gamma > 0:
        kappa = thermal_diffusivity(params).kappa
        pred = params.d * kappa
        out.update(
            kappa_predicted=kappa,
            slope_predicted=pred,
            relative_error=(fit.slope - pred) / pred,
            z=(fit.slope - pred) / fit.slope_stderr if fit.slope_stderr > 0 else None,
            shape_l1=est.profile_shape_test(profile, profile.times[-1], kappa),
            shape_l1_fitted=est.profile_shape_test(profile, profile.times[-1], fit.slope / params.d),
        )
    return out


def cmd_correlate(cfg: ExperimentConfig) -> int:
    if cfg.records:
        recs, params = est.load_records(cfg.records)
        run = _Run("correlate", cfg, len(recs))
    else:
        params = cfg.model()
        run = _Run("correlate", cfg, cfg.replicas)
        recs = est.simulate(
            params, cfg.replicas, cfg.times(), kind=cfg.method, batch=cfg.batch,
            workers=cfg.workers, integrator_options=_integrator_options(cfg),
        )
    profile = est.profile_from_records(recs, params)
    est.write_profile_csv(profile, run.file("profile.csv"))
    est.write_json(correlate_summary(profile, params, cfg.fit_window), run.file("correlate.json"))
    run.finish(["profile.csv", "correlate.json"])
    print(run.path)
    return EXIT_OK


def run_checks(cfg: ExperimentConfig) -> list[tuple[str, bool, str]]:
    """The verification table: ``(name, passed, detail)`` rows."""
    params = cfg.model()
    rows = []

    cal_N = cfg.calibration_N or (16 if params.d == 1 else 8)
    cal = calibrate_generator(
        params.with_(N=cal_N), cfg.calibration_replicas, dt=cfg.calibration_dt,
        variance_factor=cfg.variance_factor, randomized_order=cfg.randomized_order,
    )
    s = cal.summary()
    rows.append(("calibration p", cal.passed(which="p"), f"max|z|={s['max_abs_z_p']:.3g}"))
    rows.append(("calibration p^2/2", cal.passed(which="e"), f"max|z|={s['max_abs_z_e']:.3g}"))

    rng = np.random.default_rng(params.seed)
    integ = Integrator(params, **_integrator_options(cfg))
    state = GibbsSampler(params, rng).sample()
    after = integ.noise_step(state, rng)
    P0, P1 = state.p.sum(axis=tuple(range(params.d))), after.p.sum(axis=tuple(range(params.d)))
    K0, K1 = 0.5 * np.sum(state.p**2), 0.5 * np.sum(after.p**2)
    dP = float(np.max(np.abs(P1 - P0)) / np.sqrt(np.sum(state.p**2)))
    dK = abs(K1 - K0) / K0
    rows.append(("noise conserves momentum", dP <= 1e-12, f"rel={dP:.2e}"))
    rows.append(("noise conserves kinetic energy", dK <= 1e-12, f"rel={dK:.2e}"))
    H0 = hamiltonian(state, params)
    st = state
    worst = 0.0
    for _ in range(cfg.conservation_steps):
        st = integ.hamiltonian_step(st)
    worst = abs(hamiltonian(st, params) - H0) / H0
    rows.append((f"harmonic flow conserves H ({cfg.conservation_steps} steps)", worst <= 1e-11, f"rel={worst:.2e}"))

    states = GibbsSampler(params, rng).sample(cfg.continuity_states)
    states = PhaseState(states.q + rng.standard_normal(states.q.shape), states.p)
    res = continuity_check(states, params)
    rows.append(("continuity identity", res <= 1e-10, f"max residual={res:.2e}"))

    rows += gibbs_checks(params, cfg.gibbs_samples, rng)
    return rows


def gibbs_checks(params: ModelParams, n: int, rng, z_max: float = 4.0) -> list[tuple[str, bool, str]]:
    """``Var(p)``, ``<q_0 q_x>`` at five displacements and ``<p q>`` against exact values."""
    sampler = GibbsSampler(params, rng)
    gam = covariance_realspace(params, params.N) / params.beta
    o = (0,) * params.d
    sites = [tuple([x] + [0] * (params.d - 1)) for x in range(5)]
    qs, ps = [], []
    left = n
    while left > 0:
        m = min(left, max(1, (1 << 22) // (params.volume * params.d)))
        s = sampler.sample(m)
        qs.append(np.stack([s.q[(slice(None),) + x + (0,)] * s.q[(slice(None),) + o + (0,)] for x in sites], 1))
        ps.append(np.stack([s.p[(slice(None),) + o + (0,)] ** 2, s.p[(slice(None),) + o + (0,)] * s.q[(slice(None),) + o + (0,)]], 1))
        left -= m
    qq, pp = np.concatenate(qs), np.concatenate(ps)

    def z(a, target):
        return (a.mean() - target) / (a.std(ddof=1) / np.sqrt(len(a)))

    rows = [("Gibbs Var(p)", abs(z(pp[:, 0], 1 / params.beta)) <= z_max, f"z={z(pp[:, 0], 1 / params.beta):.2f}")]
    for k, x in enumerate(sites):
        zz = z(qq[:, k], gam[x])
        rows.append((f"Gibbs <q_0 q_x>, x={x}", abs(zz) <= z_max, f"z={zz:.2f}"))
    zz = z(pp[:, 1], 0.0)
    rows.append(("Gibbs <p q> = 0", abs(zz) <= z_max, f"z={zz:.2f}"))
    return rows


def cmd_verify(cfg: ExperimentConfig) -> int:
    rows = run_checks(cfg)
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    return EXIT_OK if all(r[1] for r in rows) else EXIT_VERIFY


def cmd_spectra(cfg: ExperimentConfig) -> int:
    params = cfg.model()
    run = _Run("spectra", cfg)
    table = spectral_table(params, cfg.spectra_M)
    d = params.d
    header = ",".join([f"k{i + 1}" for i in range(d)] + ["omega", "phi", "gamma_hat"])
    np.savetxt(run.file("spectra.csv"), table.rows(), delimiter=",", fmt="%.17g", header=header, comments="")
    run.finish(["spectra.csv"])
    print(run.path)
    return EXIT_OK


COMMANDS = {
    "kappa": (cmd_kappa, "print the quadrature diffusivity as JSON"),
    "simulate": (cmd_simulate, "run replicas and save energy/current records"),
    "correlate": (cmd_correlate, "estimate S(x,t), fit the MSD and compare with kappa"),
    "verify": (cmd_verify, "calibration, conservation, continuity and Gibbs checks"),
    "spectra": (cmd_spectra, "dump omega, phi and gamma_hat on a midpoint grid as CSV"),
}


def _keys_help() -> str:
    return "config keys: " + ", ".join(f.name for f in fields(ExperimentConfig))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="energydiff",
        description=__doc__.split("\n\n")[0],
        epilog=f"Output directory defaults to ${OUT_ENV} or ./runs. " + _keys_help(),
    )
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=_keys_help())
        p.add_argument("-c", "--config", help="flat key = value config file")
        p.add_argument(
            "-s", "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override a config key (repeatable; later wins)",
        )
    return ap


def _error(kind: str, msg: str, stream) -> None:
    print(est.dumps({"error": kind, "message": msg}), file=stream)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    func = COMMANDS[args.command][0]
    stream = sys.stdout if args.command == "kappa" else sys.stderr
    try:
        cfg = load_config(args.config, args.set)
        return func(cfg)
    except ConfigError as exc:
        _error("config", str(exc), stream)
        return EXIT_CONFIG
    except AdmissibilityError as exc:
        _error(type(exc).__name__, str(exc), stream)
        return EXIT_ADMISSIBILITY
    except OSError as exc:
        _error("io", str(exc), stream)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
