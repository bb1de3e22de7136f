"""Configuration-driven experiment runner producing CSV time series.

A config file is INI-style ``key = value`` text with one section per
experiment. Keys not listed in :data:`CONFIG_KEYS` are rejected, and every
id is resolved before any computation starts.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import ConfigError, GaussianState, NonFiniteError, SPDError, StepSizeError
from .density_grid import GRID_FLOW_IDS, GridDensity, fr_flow_step, grid_kl, wasserstein_fp_step, window_grid
from .gaussian_flows import affine_drift, flow_kind, iterate
from .metrics import error_triple
from .oracle import ORACLE_TARGETS, grid_reference_stats, reference_stats
from .particle_flows import (
    PARTICLE_FLOW_IDS,
    NoiseStream,
    affine_meanfield_step,
    ai_langevin_step,
    ai_svgd_step,
    initial_ensemble,
    langevin_step,
    svgd_step,
)
from .targets import ReferenceStats, cos_draws, make_target

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

PRESETS = {
    "fig-gaussian": {"target": "gaussian", "m0": (10.0, 10.0), "C0": (0.5, 0.0, 0.0, 2.0)},
    "fig-logconcave": {"target": "logconcave", "m0": (10.0, 10.0), "C0": (4.0, 0.0, 0.0, 4.0)},
    "fig-rosenbrock": {"target": "rosenbrock", "m0": (0.0, 0.0), "C0": (4.0, 0.0, 0.0, 4.0)},
}

_DEFAULT_DT = {"gaussian": 1e-3, "particle": 1e-2, "grid-fr": 1e-3}


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.

    ``C0`` is the row-major flattened initial covariance. ``dt = None``
    picks the family default (RK4 moment ODEs 1e-3, particles 1e-2,
    grid Fisher-Rao 1e-3, grid Fokker-Planck 0.4 of the CFL bound).
    """

    name: str = "experiment"
    target: str = "gaussian"
    lam: float = 1.0
    K: int = 1
    weights: tuple = (0.5, 0.5)
    means: tuple = (-2.0, 2.0)
    sds: tuple = (1.0, 1.0)
    flow: str = "fisher_rao"
    m0: tuple = (10.0, 10.0)
    C0: tuple = (0.5, 0.0, 0.0, 2.0)
    J: int = 100
    dt: Optional[float] = None
    t_end: float = 15.0
    record_every: int = 10
    seed: int = 0
    n_draws: int = 20
    oracle_n: int = 10**7
    cache_dir: Optional[str] = None
    grid_lo: Optional[float] = None
    grid_hi: Optional[float] = None
    grid_n: int = 2048
    out: Optional[str] = None

    # --- identity -----------------------------------------------------------
    def family(self) -> str:
        if self.flow in GRID_FLOW_IDS:
            return self.flow
        if self.flow in PARTICLE_FLOW_IDS or self.flow.startswith("affine-meanfield:"):
            return "particle"
        return "gaussian"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every field except ``out``."""
        d = asdict(self)
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def dim(self) -> int:
        return len(self.m0)

    def initial_state(self) -> GaussianState:
        d = self.dim
        return GaussianState(np.array(self.m0, dtype=float), np.array(self.C0, dtype=float).reshape(d, d))

    def resolved_dt(self) -> float:
        if self.dt is not None:
            return float(self.dt)
        if self.flow == "grid-fp":
            from .density_grid import fp_cfl_limit

            return 0.4 * fp_cfl_limit(self.grid_nodes())
        return _DEFAULT_DT[self.family()]

    def n_steps(self) -> int:
        return int(round(self.t_end / self.resolved_dt()))

    def make_target(self):
        params = {"lam": self.lam, "K": self.K, "weights": self.weights, "means": self.means, "sds": self.sds}
        return make_target(self.target, **params)

    def grid_nodes(self) -> np.ndarray:
        lo, hi = self.grid_lo, self.grid_hi
        if lo is None or hi is None:
            rho = self.make_target()
            if rho.posterior is not None:
                mean, sd = float(rho.posterior.mean[0]), math.sqrt(float(rho.posterior.cov[0, 0]))
            elif "mean" in rho.params:
                mean, sd = float(rho.params["mean"]), math.sqrt(float(rho.params["var"]))
            else:
                mean, sd = 0.0, 1.0
            nodes = window_grid(mean, sd, self.grid_n)
            lo = nodes[0] if lo is None else lo
            hi = nodes[-1] if hi is None else hi
        return np.linspace(lo, hi, self.grid_n)

    # --- validation ---------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        try:
            rho = self.make_target()
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"[{self.name}] bad target: {exc}") from None
        fam = self.family()
        if fam == "gaussian":
            try:
                kind = flow_kind(self.flow)
            except ValueError as exc:
                raise ConfigError(f"[{self.name}] unknown flow id {self.flow!r}: {exc}") from None
            if kind.name == "kalman_bucy":
                raise ConfigError(f"[{self.name}] kalman_bucy needs a linear-Gaussian likelihood, not supported in configs")
        elif self.flow.startswith("affine-meanfield:"):
            inner = self.flow.split(":", 1)[1]
            try:
                kind = flow_kind(inner)
            except ValueError as exc:
                raise ConfigError(f"[{self.name}] unknown flow id {self.flow!r}: {exc}") from None
            if kind.name in ("plain_gd", "kalman_bucy"):
                raise ConfigError(f"[{self.name}] {kind.name} has no affine mean-field form")
        if len(self.C0) != self.dim**2:
            raise ConfigError(f"[{self.name}] C0 needs {self.dim**2} entries for a {self.dim}D mean")
        if rho.dim != self.dim:
            raise ConfigError(f"[{self.name}] target {self.target} is {rho.dim}D but m0 is {self.dim}D")
        if fam in GRID_FLOW_IDS and self.dim != 1:
            raise ConfigError(f"[{self.name}] grid flows need a 1D target")
        if fam == "particle" and self.J < 2:
            raise ConfigError(f"[{self.name}] particle flows need J >= 2")
        if self.dt is not None and not self.dt > 0:
            raise ConfigError(f"[{self.name}] dt must be positive")
        if not self.t_end >= self.resolved_dt():
            raise ConfigError(f"[{self.name}] t_end must be at least dt")
        if self.record_every < 1 or self.n_draws < 1 or self.grid_n < 3:
            raise ConfigError(f"[{self.name}] record_every, n_draws must be >= 1 and grid_n >= 3")
        try:
            self.initial_state().validate()
        except SPDError as exc:
            raise ConfigError(f"[{self.name}] C0 is not SPD: {exc}") from None
        return self


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig) if f.name != "name") + ("preset",)
_TUPLE_KEYS = {"weights", "means", "sds", "m0", "C0"}
_INT_KEYS = {"K", "J", "record_every", "seed", "n_draws", "oracle_n", "grid_n"}
_FLOAT_KEYS = {"lam", "dt", "t_end", "grid_lo", "grid_hi"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        return tuple(float(v) for v in raw.split(","))
    if key in _INT_KEYS:
        return int(float(raw)) if key != "seed" else int(raw)
    if key in _FLOAT_KEYS:
        return None if raw.lower() in ("", "none") else float(raw)
    if key in ("cache_dir", "out"):
        return raw or None
    return raw


def config_from_mapping(name: str, items: dict) -> ExperimentConfig:
    """Build a config from string key/value pairs (preset first, then overrides)."""
    unknown = set(items) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"[{name}] unknown config keys: {sorted(unknown)}")
    values = {}
    preset = items.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"[{name}] unknown preset {preset!r}; expected one of {tuple(PRESETS)}")
        values.update(PRESETS[preset])
    for key, raw in items.items():
        if key == "preset":
            continue
        try:
            values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"[{name}] bad value for {key}: {exc}") from None
    return ExperimentConfig(name=name, **values)


def load_configs(path) -> list[ExperimentConfig]:
    """Parse and validate every section of a config file."""
    parser = configparser.ConfigParser(interpolation=None, default_section="defaults")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return [config_from_mapping(sec, dict(parser[sec])).validate() for sec in parser.sections()]


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: ExperimentConfig
    header: list
    rows: list = field(default_factory=list)
    status: str = "ok"
    error: Optional[str] = None
    csv_path: Optional[Path] = None

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.status == "ok" else EXIT_NUMERIC

    def column(self, name: str) -> np.ndarray:
        i = self.header.index(name)
        return np.array([float(r[i]) for r in self.rows if r[-1] == "ok"])


def _fmt(x) -> str:
    return repr(float(x))


def _reference(cfg: ExperimentConfig, rho) -> ReferenceStats:
    if cfg.target in ORACLE_TARGETS:
        return reference_stats(cfg.target, cfg.lam, cfg.seed, cfg.n_draws, n=cfg.oracle_n, cache_dir=cfg.cache_dir)
    if rho.dim != 1:
        raise ConfigError(f"no reference oracle for {cfg.dim}D target {cfg.target!r}")
    omegas, offsets = cos_draws(1, cfg.n_draws, cfg.seed)
    return grid_reference_stats(rho.log_density, cfg.grid_nodes(), omegas, offsets)


def _grid_cos(d: GridDensity, ref: ReferenceStats) -> np.ndarray:
    return d.weights @ (d.values[:, None] * np.cos(np.outer(d.nodes, ref.omegas[:, 0]) + ref.offsets))


def run(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Run one experiment and (if ``cfg.out`` is set and ``write``) write CSV + sidecar.

    A numerical failure truncates the trajectory with a ``failed`` row;
    the result's ``exit_code`` is then 3.
    """
    cfg.validate()
    rho = cfg.make_target()
    ref = _reference(cfg, rho)
    dt = cfg.resolved_dt()
    n_steps = cfg.n_steps()
    d = cfg.dim
    fam = cfg.family()
    header = ["t", "mean_err", "cov_err", "cos_err"]
    if fam == "gaussian":
        header += [f"m{i}" for i in range(d)] + [f"C{i}{j}" for i in range(d) for j in range(d)]
    if fam in GRID_FLOW_IDS:
        header += ["kl"]
    header += ["status"]
    res = RunResult(cfg, header)

    def record(k, state, extra=()):
        e = error_triple(state, ref)
        res.rows.append([_fmt(k * dt), _fmt(e.mean_err), _fmt(e.cov_err), _fmt(e.cos_err)]
                        + [_fmt(v) for v in extra] + ["ok"])

    def due(k):
        return k % cfg.record_every == 0 or k == n_steps

    done = [0]  # last completed step
    try:
        if fam == "gaussian":
            g0 = cfg.initial_state()
            record(0, g0, list(g0.mean) + list(g0.cov.ravel()))
            for k, m, C in iterate(cfg.flow, g0, rho, dt, n_steps):
                done[0] = k
                if due(k):
                    record(k, GaussianState(m, C), list(m) + list(C.ravel()))
        elif fam == "particle":
            _run_particles(cfg, rho, dt, n_steps, record, due, done)
        else:
            _run_grid(cfg, rho, ref, dt, n_steps, res, due, done)
    except (SPDError, NonFiniteError, StepSizeError, FloatingPointError) as exc:
        res.status = "failed"
        res.error = f"{type(exc).__name__}: {exc}"
        res.rows.append([_fmt((done[0] + 1) * dt)] + ["nan"] * (len(header) - 2) + [f"failed: {res.error}"])
    if write and cfg.out is not None:
        res.csv_path = write_result(res)
    return res


def _run_particles(cfg, rho, dt, n_steps, record, due, done):
    g0 = cfg.initial_state()
    e = initial_ensemble(g0, cfg.J, cfg.seed)
    noise = NoiseStream(cfg.seed)
    record(0, e)
    if cfg.flow.startswith("affine-meanfield:"):
        kind = flow_kind(cfg.flow.split(":", 1)[1])
        ode = iterate(kind, g0, rho, dt, n_steps)
        m, C = g0.mean, g0.cov
        for k in range(1, n_steps + 1):
            drift = affine_drift(kind, GaussianState(m, C), rho)
            e = affine_meanfield_step(e, drift, m, dt)
            _, m, C = next(ode)
            done[0] = k
            if due(k):
                record(k, e)
        return
    for k in range(1, n_steps + 1):
        if cfg.flow == "langevin":
            e = langevin_step(e, rho, dt, noise.draw(k, e.J, e.dim))
        elif cfg.flow == "ai-langevin":
            e = ai_langevin_step(e, rho, dt, noise.draw(k, e.J, e.dim))
        elif cfg.flow == "svgd":
            e = svgd_step(e, rho, dt)
        else:
            e = ai_svgd_step(e, rho, dt)
        done[0] = k
        if due(k):
            record(k, e)


def _run_grid(cfg, rho, ref, dt, n_steps, res, due, done):
    nodes = cfg.grid_nodes()
    post = GridDensity.from_target(rho, nodes)
    g0 = cfg.initial_state()
    d = GridDensity.gaussian(nodes, float(g0.mean[0]), float(g0.cov[0, 0]))

    def rec(k, d):
        mean, var = d.mean(), d.var()
        cos = _grid_cos(d, ref)
        res.rows.append([
            _fmt(k * dt),
            _fmt(abs(mean - ref.mean[0])),
            _fmt(abs(var - ref.cov[0, 0]) / abs(ref.cov[0, 0])),
            _fmt(np.mean((cos - ref.cos_values) ** 2)),
            _fmt(grid_kl(d, post)),
            "ok",
        ])

    rec(0, d)
    for k in range(1, n_steps + 1):
        d = fr_flow_step(d, post, dt) if cfg.flow == "grid-fr" else wasserstein_fp_step(d, post, dt)
        done[0] = k
        if due(k):
            rec(k, d)


def _metadata(res: RunResult) -> dict:
    cfg = res.config
    fam = cfg.family()
    integrator = {
        "gaussian": "rk4 (step halving on SPD loss)",
        "particle": "euler-maruyama" if "langevin" in cfg.flow else "forward euler",
        "grid-fr": "heun on log-density",
        "grid-fp": "explicit euler, conservative central flux",
    }[fam]
    return {
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "version": __version__,
        "numpy_version": np.__version__,
        "integrator": integrator,
        "dt": cfg.resolved_dt(),
        "status": res.status,
        "error": res.error,
    }


def csv_text(res: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(res.header)
    w.writerows(res.rows)
    return buf.getvalue()


def write_result(res: RunResult, out: Optional[str] = None) -> Path:
    path = Path(out or res.config.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(res))
    meta = path.with_name(path.name + ".meta.json")
    with open(meta, "w") as fh:
        json.dump(_metadata(res), fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _is_done(cfg: ExperimentConfig) -> bool:
    meta = Path(cfg.out + ".meta.json")
    if not (meta.exists() and Path(cfg.out).exists()):
        return False
    try:
        info = json.loads(meta.read_text())
    except (OSError, ValueError):
        return False
    return info.get("config_hash") == cfg.config_hash() and info.get("status") == "ok"


def _run_one(cfg: ExperimentConfig) -> tuple[str, str]:
    res = run(cfg)
    return res.status, res.error or ""


def sweep(configs: Sequence[ExperimentConfig], out_dir, threads: int = 1) -> Path:
    """Run every config into ``out_dir`` and write ``index.csv``.

    Outputs whose sidecar records the same config hash and an ``ok`` status
    are skipped, so an interrupted sweep resumes where it stopped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError("experiment names in a sweep must be unique")
    cfgs = [replace(c, out=str(out_dir / f"{_safe_name(c.name)}.csv")).validate() for c in configs]
    status = {}
    todo = []
    for c in cfgs:
        if _is_done(c):
            status[c.name] = ("skipped", "")
        else:
            todo.append(c)
    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for c, st in zip(todo, pool.map(_run_one, todo)):
                status[c.name] = st
    else:
        for c in todo:
            status[c.name] = _run_one(c)
    index = out_dir / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "config_hash", "csv", "status", "error"])
        for c in cfgs:
            st, err = status[c.name]
            w.writerow([c.name, c.config_hash(), os.path.basename(c.out), st, err])
    return index


def sweep_status(index_path) -> int:
    """Exit code for a finished sweep: 3 if any experiment failed."""
    with open(index_path, newline="") as fh:
        return EXIT_NUMERIC if any(r["status"] == "failed" for r in csv.DictReader(fh)) else EXIT_OK

