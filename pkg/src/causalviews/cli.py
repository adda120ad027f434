"""Command-line front end.

Every subcommand is driven by a JSON config (validated against a published
schema, see ``--print-schema``); flags override file values. Outputs go to
``$CAUSALVIEWS_OUTPUT_ROOT/<output>`` (root defaults to the working
directory) together with an atomically written ``manifest.json``. Every
CSV starts with a ``#`` comment line carrying the config hash, and every
JSON output carries a ``meta`` block with the same information.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import itertools
import json
import math
import os
import sys
import tempfile
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, coarse_grain, ecs as ecs_mod, embedding, energy, madelung
from .errors import CausalViewsError, InstabilityError, NumericalError
from .kernels import BACKEND
from .models import MODELS, get_model

COMMANDS = ("generate", "energy", "embed", "variety", "evolve", "compare", "pipeline", "sweep")
OUTPUT_ROOT_ENV = "CAUSALVIEWS_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(CausalViewsError, ValueError):
    """Config file or flag problem (exit code 2)."""


class StageError(Exception):
    """Wraps a pipeline stage failure with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ----------------------------------------------------------------------
# schemas and defaults
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0}
_OUT = {"type": ["string", "null"]}

_SAMPLER = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["normal", "uniform", "drift"]},
        "scale": _POS,
        "mean": {"type": "array", "items": _NUM},
    },
    "additionalProperties": False,
}
_GEN_PROPS = {
    "d": _INT1,
    "layers": {"type": "integer", "minimum": 2},
    "epl": _INT1,
    "n_pre": _INT1,
    "seed": _SEED,
    "sampler": _SAMPLER,
}
_GEN_DEFAULTS = {"d": 1, "layers": 50, "epl": 20, "n_pre": 2, "seed": 0, "sampler": {"kind": "normal", "scale": 1.0}}
_COUPLING_PROPS = {
    "g": _NONNEG,
    "g_prime": {"oneOf": [_NUM, {"const": "matched"}]},
    "m": _POS,
    "hbar": _NONNEG,
    "Z_V": _POS,
}
_COUPLING_DEFAULTS = {"g": 1.0, "g_prime": 0.0, "m": 1.0, "hbar": 1.0, "Z_V": 1.0}
_GRID = {
    "type": "object",
    "properties": {"lower": _NUM, "upper": _NUM, "n": {"type": "integer", "minimum": 8}},
    "required": ["lower", "upper", "n"],
    "additionalProperties": False,
}
_INITIAL = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["gaussian", "csv"]},
        "sigma": _POS,
        "center": _NUM,
        "velocity": _NUM,
        "path": {"type": "string"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}
_EVOLVE_PROPS = {
    "grid": _GRID,
    "initial": _INITIAL,
    "mode": {"enum": list(madelung.MODES)},
    "dt": _POS,
    "steps": {"type": "integer", "minimum": 0},
    "snapshot_every": {"type": ["integer", "null"], "minimum": 1},
    "m": _POS,
    "hbar": _NONNEG,
    "correction": _NONNEG,
}
_EVOLVE_DEFAULTS = {
    "grid": {"lower": -10.0, "upper": 10.0, "n": 512},
    "initial": {"kind": "gaussian", "sigma": 1.0, "center": 0.0, "velocity": 0.0},
    "mode": "quantum",
    "dt": 1e-4,
    "steps": 5000,
    "snapshot_every": None,
    "m": 1.0,
    "hbar": 1.0,
    "correction": 0.0,
}


def _schema(props: dict) -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "type": "object",
        "properties": {"command": {"type": "string"}, "output": _OUT, **props},
        "additionalProperties": False,
    }


SCHEMAS: dict[str, dict] = {
    "generate": _schema(_GEN_PROPS),
    "energy": _schema(
        {**_GEN_PROPS, **_COUPLING_PROPS, "input": {"type": ["string", "null"]}, "past": {"enum": ["immediate", "full"]}}
    ),
    "embed": _schema(
        {
            **_GEN_PROPS,
            **_COUPLING_PROPS,
            "input": {"type": ["string", "null"]},
            "z_input": {"type": ["string", "null"]},
            "z_scale": _POS,
            "order": {"enum": [0, 1]},
            "gauge_event": {"type": "integer", "minimum": 0},
            "source": {"enum": ["stationary", "momenta"]},
        }
    ),
    "variety": _schema(
        {
            "model": {"enum": sorted(MODELS)},
            "model_params": {"type": "object"},
            "N": {"type": "integer", "minimum": 2},
            "N_list": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 2}},
            "L": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "r": {"type": "number", "exclusiveMinimum": 1},
            "d": _INT1,
            "seed": _SEED,
            "scheme": {"enum": ["stratified", "random"]},
        }
    ),
    "evolve": _schema(_EVOLVE_PROPS),
    "compare": _schema({**_EVOLVE_PROPS, "prefactors": {"type": ["array", "null"], "items": _NONNEG, "minItems": 2}}),
    "pipeline": _schema(
        {
            **_GEN_PROPS,
            **_COUPLING_PROPS,
            "order": {"enum": [0, 1]},
            "r": {"type": "number", "exclusiveMinimum": 1},
            "grid_n": {"type": ["integer", "null"], "minimum": 16},
            "points_per_bandwidth": {"type": "number", "minimum": 1},
            "t_final": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "dt": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "mode": {"enum": ["auto", *madelung.MODES]},
            "model": {"enum": sorted(MODELS)},
            "model_params": {"type": "object"},
        }
    ),
    "sweep": _schema(
        {
            "base": {"type": "object", "properties": {"command": {"enum": list(COMMANDS[:-1])}}, "required": ["command"]},
            "grid": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}},
            "workers": _INT1,
        }
    ),
}
SCHEMAS["sweep"]["required"] = ["base", "grid"]

DEFAULTS: dict[str, dict] = {
    "generate": dict(_GEN_DEFAULTS),
    "energy": {**_GEN_DEFAULTS, **_COUPLING_DEFAULTS, "input": None, "past": "immediate"},
    "embed": {
        **_GEN_DEFAULTS,
        **_COUPLING_DEFAULTS,
        "input": None,
        "z_input": None,
        "z_scale": 1.0,
        "order": 0,
        "gauge_event": 0,
        "source": "stationary",
    },
    "variety": {
        "model": "gaussian",
        "model_params": {},
        "N": 10000,
        "N_list": None,
        "L": None,
        "r": 4.0,
        "d": 1,
        "seed": 0,
        "scheme": "stratified",
    },
    "evolve": copy.deepcopy(_EVOLVE_DEFAULTS),
    "compare": {**copy.deepcopy(_EVOLVE_DEFAULTS), "prefactors": None},
    "pipeline": {
        **_GEN_DEFAULTS,
        **_COUPLING_DEFAULTS,
        "layers": 100,
        "epl": 100,
        "g_prime": "matched",
        "order": 1,
        "r": 4.0,
        "grid_n": None,
        "points_per_bandwidth": 4.0,
        "t_final": None,
        "dt": None,
        "mode": "auto",
        "model": "gaussian",
        "model_params": {},
    },
    "sweep": {"workers": 2},
}


def resolve_config(command: str, file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then file values, then flag overrides; validated."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = copy.deepcopy(DEFAULTS[command])
    for src in (file_cfg or {}, overrides or {}):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    if cfg.setdefault("command", command) != command:
        raise ConfigError(f"config is for command {cfg['command']!r}, not {command!r}")
    cfg.setdefault("output", None)
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical config JSON, ``output`` excluded."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ----------------------------------------------------------------------
# output helpers
@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    code_version: str
    backend: str
    started: str
    finished: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


class Outputs:
    """Writes self-describing files into one run directory."""

    def __init__(self, root: Path, manifest: RunManifest):
        self.root = root
        self.manifest = manifest

    @property
    def header(self) -> str:
        m = self.manifest
        return f"# causalviews {m.code_version} command={m.command} config_hash={m.config_hash}"

    def _record(self, name: str) -> Path:
        path = self.root / name
        rel = str(path)
        if rel not in self.manifest.outputs:
            self.manifest.outputs.append(rel)
        return path

    def csv(self, name: str, header: list[str], rows) -> Path:
        buf = io.StringIO()
        buf.write(self.header + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        path = self._record(name)
        atomic_write(path, buf.getvalue())
        return path

    def text_csv(self, name: str, text: str) -> Path:
        path = self._record(name)
        atomic_write(path, self.header + "\n" + text)
        return path

    def json(self, name: str, payload: dict) -> Path:
        m = self.manifest
        doc = {"meta": {"code_version": m.code_version, "command": m.command, "config_hash": m.config_hash}}
        doc.update(_jsonable(payload))
        path = self._record(name)
        atomic_write(path, json.dumps(doc, indent=1, sort_keys=False) + "\n")
        return path


def output_dir(cfg: dict, digest: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")
    return root / (cfg.get("output") or f"{cfg['command']}-{digest[:12]}")


# ----------------------------------------------------------------------
# command implementations: each returns headline metrics
def _history(cfg: dict) -> ecs_mod.CausalSet:
    if cfg.get("input"):
        return ecs_mod.CausalSet.from_json(Path(cfg["input"]))
    return ecs_mod.generate_layered(cfg["d"], cfg["layers"], cfg["epl"], cfg["n_pre"], cfg["seed"], cfg["sampler"])


def _params(cfg: dict, Z_V: float | None = None, n_pre: int = 1) -> energy.HamiltonianParams:
    Z = cfg["Z_V"] if Z_V is None else Z_V
    gp = cfg["g_prime"]
    if gp == "matched":
        return energy.HamiltonianParams.matched(cfg["g"], cfg["m"], cfg["hbar"], Z, n_pre)
    return energy.HamiltonianParams(cfg["g"], float(gp), cfg["m"], cfg["hbar"], n_pre, Z)


def _write_history(out: Outputs, c: ecs_mod.CausalSet) -> float:
    out.json("causal_set.json", c.to_dict())
    r, boundary = ecs_mod.residuals(c)
    norms = np.linalg.norm(r, axis=1)
    layer = c.layer if c.layer is not None else np.full(c.n_events, -1)
    out.csv(
        "residuals.csv",
        ["event", "layer", "boundary", "residual"],
        ((i, int(layer[i]), int(boundary[i]), float(norms[i])) for i in range(c.n_events)),
    )
    return ecs_mod.max_interior_residual(c)


def cmd_generate(cfg: dict, out: Outputs) -> dict:
    c = _history(cfg)
    res = _write_history(out, c)
    return {"n_events": c.n_events, "n_links": c.n_links, "max_interior_residual": res}


def cmd_energy(cfg: dict, out: Outputs) -> dict:
    c = _history(cfg)
    params = _params(cfg, n_pre=c.n_pre)
    rel = ecs_mod.causal_relations(c)
    rep = energy.hamiltonian(c, params, rel)
    if cfg["past"] == "full":
        rep.T = energy.kinetic_energy(c, "full", rel)
        rep.H = params.g * rep.T + params.g_prime * rep.U
    out.json("energy.json", {"T": rep.T, "U": rep.U, "H": rep.H, "g": params.g, "g_prime": params.g_prime})
    out.text_csv("surprise.csv", rep.surprise_csv())
    sys.stdout.write(f"T,U,H\n{rep.T!r},{rep.U!r},{rep.H!r}\n")
    sys.stdout.write(rep.surprise_csv())
    return {"T": rep.T, "U": rep.U, "H": rep.H}


def _momenta_rows(c: ecs_mod.CausalSet, p: np.ndarray):
    for l in range(c.n_links):
        yield (l, int(c.src[l]), int(c.dst[l]), *[float(x) for x in p[l]])


def cmd_embed(cfg: dict, out: Outputs) -> dict:
    c = _history(cfg)
    params = _params(cfg, n_pre=c.n_pre)
    metrics: dict = {"n_events": c.n_events}
    if cfg["source"] == "momenta":
        rec = embedding.reconstruct_embedding(c, c.p, params, cfg["gauge_event"])
        out.text_csv("embedding.csv", rec.embedding.to_csv())
        metrics["max_link_residual"] = rec.max_residual
        return metrics
    if cfg["z_input"]:
        z = embedding.EmbeddingConfig.from_csv(cfg["z_input"]).z
    else:
        from .rng import substream

        z = cfg["z_scale"] * substream(cfg["seed"], "embedding.z").standard_normal((c.n_events, c.d))
    st = embedding.stationary_momenta(c, z, params, cfg["order"])
    p0 = st.momenta if cfg["order"] == 0 else embedding.stationary_momenta(c, z, params, 0).momenta
    rec = embedding.reconstruct_embedding(c, p0, params, cfg["gauge_event"])
    cols = [f"p{a}" for a in range(c.d)]
    out.csv("momenta.csv", ["link", "src", "dst", *cols], _momenta_rows(c, st.momenta))
    out.text_csv("embedding.csv", rec.embedding.to_csv())
    metrics["round_trip_error"] = embedding.round_trip_error(c, z, rec.embedding.z)
    if cfg["order"] == 1:
        dp = st.momenta - p0
        n2 = np.einsum("ij,ij->i", p0, p0)
        ok = n2 > ecs_mod.EPS_P**2
        lon = np.abs(np.einsum("ij,ij->i", p0[ok], dp[ok])) / np.sqrt(n2[ok])
        metrics["max_longitudinal_correction"] = float(lon.max(initial=0.0))
        metrics["fixed_point_residual"] = st.fixed_point_residual
    return metrics


def cmd_variety(cfg: dict, out: Outputs) -> dict:
    model = get_model(cfg["model"], **cfg["model_params"])
    d = cfg["d"]
    L = cfg["L"] if cfg["L"] is not None else coarse_grain.length_for_ratio(model, cfg["r"], d)
    if cfg["N_list"]:
        table = coarse_grain.convergence_study(model, cfg["N_list"], L, cfg["seed"], d, cfg["scheme"])
        out.text_csv("convergence.csv", table.to_csv())
        return {"slope": table.slope, "intercept": table.intercept, "L": L}
    rep, parts = coarse_grain.model_variety(model, cfg["N"], L, cfg["seed"], d, cfg["scheme"])
    out.text_csv("variety.csv", rep.to_csv())
    return {"discrete": rep.discrete, "reduced": rep.reduced, "fisher_term": rep.fisher_term, "L": L, "r": parts.r}


def _grid(cfg: dict) -> coarse_grain.Grid:
    g = cfg["grid"]
    return coarse_grain.Grid((g["lower"],), (g["upper"],), (g["n"],), periodic=True)


def _initial(cfg: dict, grid: coarse_grain.Grid) -> tuple[np.ndarray, np.ndarray]:
    ini = cfg["initial"]
    if ini["kind"] == "gaussian":
        return madelung.gaussian_packet(
            grid, ini.get("sigma", 1.0), ini.get("center", 0.0), ini.get("velocity", 0.0), cfg["m"]
        )
    if "path" not in ini:
        raise ConfigError("initial.kind = 'csv' needs initial.path")
    lines = [ln for ln in Path(ini["path"]).read_text().splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if len(rows) != grid.shape[0]:
        raise ConfigError(f"initial data has {len(rows)} rows, grid has {grid.shape[0]} nodes")
    rows.sort(key=lambda r: int(r["index"]))
    return np.array([float(r["rho"]) for r in rows]), np.array([float(r["S"]) for r in rows])


def _hydro(cfg: dict) -> madelung.HydroParams:
    return madelung.HydroParams(m=cfg["m"], hbar=cfg["hbar"], correction=cfg["correction"])


def _state_rows(state: madelung.HydroState):
    z = state.grid.axes()[0]
    for i in range(z.size):
        yield (i, float(z[i]), float(state.rho[i]), float(state.S[i]))


def cmd_evolve(cfg: dict, out: Outputs) -> dict:
    grid = _grid(cfg)
    rho0, S0 = _initial(cfg, grid)
    state0 = madelung.HydroState(grid, rho0, S0)
    res = madelung.evolve(state0, _hydro(cfg), cfg["dt"], cfg["steps"], cfg["mode"], cfg["snapshot_every"])
    out.csv("initial.csv", ["index", "z", "rho", "S"], _state_rows(state0))
    out.csv("final.csv", ["index", "z", "rho", "S"], _state_rows(res.state))
    if res.snapshots:
        rows = ((s.t, *row) for s in res.snapshots for row in _state_rows(s))
        out.csv("snapshots.csv", ["t", "index", "z", "rho", "S"], rows)
    metrics = {"t": res.state.t, "mass_drift": res.mass_drift, "energy_drift": res.energy_drift}
    out.json("evolution.json", metrics)
    return metrics


def cmd_compare(cfg: dict, out: Outputs) -> dict:
    grid = _grid(cfg)
    rho0, S0 = _initial(cfg, grid)
    rep = madelung.compare_evolutions(rho0, S0, grid, _hydro(cfg), cfg["dt"], cfg["steps"], cfg["mode"])
    metrics = rep.to_dict()
    if cfg["prefactors"]:
        sc = madelung.correction_scaling(rho0, S0, grid, _hydro(cfg), cfg["dt"], cfg["steps"], cfg["prefactors"])
        out.csv("correction_scaling.csv", ["prefactor", "deviation"], zip(sc.prefactors.tolist(), sc.deviations.tolist()))
        metrics.update(correction_slope=sc.slope, correction_intercept=sc.intercept, correction_r_squared=sc.r_squared)
    out.json("comparison.json", metrics)
    return {k: v for k, v in metrics.items() if k != "mode"} | {"mode": rep.mode}


def _stage(name: str, manifest: RunManifest, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - annotated and re-raised
        manifest.failed_stage = name
        raise StageError(name, exc) from exc


def cmd_pipeline(cfg: dict, out: Outputs) -> dict:
    """generate -> conservation -> embedding -> coarse grain -> compare.

    Event positions are drawn from a density model and tied to link momenta
    through the order-0 stationary relation (the round trip is checked).
    Their KDE is the initial density of the hydrodynamic comparison, which
    runs in classical mode when ``g' = 0`` and in quantum mode otherwise.
    """
    if not cfg["hbar"] > 0:
        raise ConfigError("the pipeline compares against the Schrodinger oracle and needs hbar > 0")
    m = out.manifest
    metrics: dict = {}

    c = _stage("generate", m, _history, cfg)
    metrics["max_interior_residual"] = _stage("solve_conservation", m, _write_history, out, c)

    def embed_stage():
        from .rng import substream

        model = get_model(cfg["model"], **cfg["model_params"])
        z = model.sample_nd(substream(cfg["seed"], "pipeline.positions"), c.n_events, c.d)
        base = energy.HamiltonianParams(cfg["g"], 0.0, cfg["m"], cfg["hbar"], c.n_pre)
        p0 = embedding.stationary_momenta(c, z, base, 0).momenta
        rec = embedding.reconstruct_embedding(c, p0, base, 0)
        out.text_csv("positions.csv", embedding.EmbeddingConfig(z).to_csv())
        out.text_csv("embedding.csv", rec.embedding.to_csv())
        return z, p0, embedding.round_trip_error(c, z, rec.embedding.z)

    if not cfg["g"] > 0:
        raise ConfigError("the pipeline's stationary embedding needs g > 0")
    z, p0, rt = _stage("embedding", m, embed_stage)
    metrics["round_trip_error"] = rt

    def coarse_stage():
        # grid resolves the KDE bandwidth with points_per_bandwidth nodes
        bw = coarse_grain.silverman_bandwidth(z)
        lo, hi = z.min(axis=0), z.max(axis=0)
        pad = 0.25 * (hi - lo) + 5.0 * bw
        lower, upper = lo - pad, hi + pad
        if cfg["grid_n"]:
            shape = (cfg["grid_n"],) * c.d
        else:
            n = np.ceil((upper - lower) / (bw / cfg["points_per_bandwidth"])).astype(int)
            shape = tuple(int(min(max(k, 64), 4096 if c.d == 1 else 256)) for k in n)
        grid = coarse_grain.Grid(tuple(lower), tuple(upper), shape, periodic=True)
        state = coarse_grain.estimate_density(z, grid, N=c.n_events)
        rho_bar = grid.integrate(state.rho**2)
        L = cfg["r"] / rho_bar ** (1.0 / c.d)
        cut = coarse_grain.cutoffs(state, L)
        F = coarse_grain.fisher_information(state)
        Z = coarse_grain.z_v(c.d, cut.r, c.n_events)
        pts = grid.points().reshape(-1, c.d)
        flat = state.rho.reshape(-1)
        rows = ((*np.unravel_index(i, grid.shape), *pts[i], float(flat[i])) for i in range(flat.size))
        out.csv("density.csv", [*(f"i{a}" for a in range(c.d)), *(f"z{a}" for a in range(c.d)), "rho"], rows)
        return grid, state, cut, F, Z, float(bw.min())

    grid, state, cut, F, Z, bw = _stage("coarse_grain", m, coarse_stage)
    params = _params(cfg, Z_V=Z, n_pre=c.n_pre)
    metrics.update(fisher_term=F, Z_V=Z, r=cut.r, g_prime=params.g_prime, grid_points=int(np.prod(grid.shape)))

    def order1_stage():
        st = embedding.stationary_momenta(c, z, params, cfg["order"])
        dp = st.momenta - p0
        n2 = np.einsum("ij,ij->i", p0, p0)
        ok = n2 > ecs_mod.EPS_P**2
        lon = np.abs(np.einsum("ij,ij->i", p0[ok], dp[ok])) / np.sqrt(n2[ok])
        cols = [f"p{a}" for a in range(c.d)]
        out.csv("momenta.csv", ["link", "src", "dst", *cols], _momenta_rows(c, st.momenta))
        return float(lon.max(initial=0.0))

    if params.g > 0:
        metrics["max_longitudinal_correction"] = _stage("stationary_momenta", m, order1_stage)

    mode = cfg["mode"]
    if mode == "auto":
        mode = "classical" if params.g_prime == 0 else "quantum"
    metrics["mode"] = mode

    def compare_stage():
        hp = madelung.HydroParams(m=cfg["m"], hbar=cfg["hbar"])
        dt = cfg["dt"] or 0.5 * madelung.max_stable_dt(grid, hp)
        # default horizon: one spreading time of the smallest resolved feature
        t_final = cfg["t_final"] or cfg["m"] * bw * bw / cfg["hbar"]
        steps = max(1, int(math.ceil(t_final / dt)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", madelung.DegeneracyWarning)
            rep = madelung.compare_evolutions(state.rho, np.zeros(grid.shape), grid, hp, dt, steps, mode)
        out.json("comparison.json", rep.to_dict() | {"dt": dt, "steps": steps})
        return rep

    rep = _stage("compare_evolutions", m, compare_stage)
    metrics.update(
        l2_density=rep.l2_density,
        phase_error_rms=rep.phase_error_rms,
        mass_drift=rep.mass_drift,
        energy_drift=rep.energy_drift,
        t=rep.t,
    )
    out.csv("summary.csv", ["metric", "value"], sorted((k, v) for k, v in metrics.items()))
    return metrics


def _sweep_worker(args: tuple[dict, str]) -> tuple[dict, int, str | None]:
    sub, outdir = args
    sub = dict(sub, output=outdir)
    try:
        man = run(sub)
        return man.metrics, EXIT_OK, None
    except BaseException as exc:  # noqa: BLE001 - reported per run
        return {}, exit_code_for(exc), str(exc)


def cmd_sweep(cfg: dict, out: Outputs) -> dict:
    base = cfg["base"]
    keys = sorted(cfg["grid"])
    combos = list(itertools.product(*(cfg["grid"][k] for k in keys)))
    root = Path(os.environ.get(OUTPUT_ROOT_ENV) or ".")
    jobs = []
    for n, values in enumerate(combos):
        sub = dict(copy.deepcopy(base))
        for k, v in zip(keys, values):
            sub[k] = v
        sub_dir = out.root / f"run_{n:03d}"
        # resolve early so bad combinations fail before any work starts
        resolve_config(sub["command"], {k: v for k, v in sub.items() if k != "command"})
        jobs.append((sub, str(sub_dir.relative_to(root) if sub_dir.is_relative_to(root) else sub_dir)))
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(j) for j in jobs]
    metric_keys = sorted({k for met, _, _ in results for k in met})
    rows = []
    for n, (values, (met, code, err)) in enumerate(zip(combos, results)):
        rows.append([n, *[json.dumps(v) for v in values], code, err or "", *[met.get(k, "") for k in metric_keys]])
    header = ["run", *(f"param.{k}" for k in keys), "exit_code", "error", *(f"metric.{k}" for k in metric_keys)]
    out.csv("sweep.csv", header, rows)
    return {"runs": len(jobs), "failed": sum(1 for _, code, _ in results if code != EXIT_OK)}


HANDLERS = {
    "generate": cmd_generate,
    "energy": cmd_energy,
    "embed": cmd_embed,
    "variety": cmd_variety,
    "evolve": cmd_evolve,
    "compare": cmd_compare,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
}


def run(config: dict) -> RunManifest:
    """Validate ``config``, execute its command and write the manifest.

    The manifest is written on failure too (status ``failed``, with the
    failing stage for pipelines) before the exception propagates.
    """
    command = config.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"config needs a 'command' from {COMMANDS}")
    cfg = resolve_config(command, {k: v for k, v in config.items() if k != "command"})
    digest = config_hash(cfg)
    root = output_dir(cfg, digest)
    manifest = RunManifest(command, cfg, digest, __version__, BACKEND, _now())
    out = Outputs(root, manifest)
    try:
        manifest.metrics = _jsonable(HANDLERS[command](cfg, out))
        manifest.status = "ok"
    except BaseException as exc:
        manifest.status = "failed"
        manifest.error = str(exc)
        raise
    finally:
        manifest.finished = _now()
        atomic_write(root / "manifest.json", json.dumps(_jsonable(manifest.to_dict()), indent=1) + "\n")
    return manifest


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (CausalViewsError, ValueError, KeyError, OSError, json.JSONDecodeError)):
        return EXIT_CONFIG
    return 1


# ----------------------------------------------------------------------
# argument parsing
def _grid_flag(text: str) -> dict:
    try:
        lo, hi, n = text.split(",")
        return {"lower": float(lo), "upper": float(hi), "n": int(n)}
    except ValueError:
        raise argparse.ArgumentTypeError("--grid expects LOWER,UPPER,N") from None


def _list_flag(kind):
    def parse(text: str) -> list:
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma separated list, got {text!r}") from None

    return parse


def _gprime_flag(text: str):
    return text if text == "matched" else float(text)


def _add_gen(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epl", type=int, help="events per layer")
    p.add_argument("--n-pre", dest="n_pre", type=int)
    p.add_argument("--sampler", choices=["normal", "uniform", "drift"])
    p.add_argument("--sampler-scale", dest="sampler_scale", type=float)


def _add_couplings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--g", type=float)
    p.add_argument("--g-prime", dest="g_prime", type=_gprime_flag, help="number or 'matched'")
    p.add_argument("--m", type=float)
    p.add_argument("--hbar", type=float)
    p.add_argument("--Z-V", dest="Z_V", type=float)


def _add_evolve(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=list(madelung.MODES))
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--grid", type=_grid_flag, help="LOWER,UPPER,N (periodic)")
    p.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    p.add_argument("--m", type=float)
    p.add_argument("--hbar", type=float)
    p.add_argument("--correction", type=float, help="correction prefactor r^2 N^(-2/d)")
    p.add_argument("--sigma", type=float)
    p.add_argument("--velocity", type=float)
    p.add_argument("--initial-csv", dest="initial_csv", help="CSV with columns index,rho,S")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalviews", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", dest="output", help="output directory (under $%s)" % OUTPUT_ROOT_ENV)
        p.add_argument("--print-schema", action="store_true", help="print the JSON schema and exit")
        if name not in ("evolve", "compare", "sweep"):
            p.add_argument("--seed", type=int)
        if name in ("generate", "energy", "embed", "pipeline"):
            _add_gen(p)
        if name in ("energy", "embed", "pipeline"):
            _add_couplings(p)
        if name in ("energy", "embed"):
            p.add_argument("--input", help="causal-set JSON (default: generate one)")
        if name == "energy":
            p.add_argument("--past", choices=["immediate", "full"])
        if name == "embed":
            p.add_argument("--order", type=int, choices=[0, 1])
            p.add_argument("--gauge-event", dest="gauge_event", type=int)
            p.add_argument("--source", choices=["stationary", "momenta"])
            p.add_argument("--z-input", dest="z_input")
        if name == "variety":
            p.add_argument("--model", choices=sorted(MODELS))
            p.add_argument("--N", type=int)
            p.add_argument("--N-list", dest="N_list", type=_list_flag(int))
            p.add_argument("--L", type=float)
            p.add_argument("--r", type=float)
            p.add_argument("--d", type=int)
            p.add_argument("--scheme", choices=["stratified", "random"])
        if name in ("evolve", "compare"):
            _add_evolve(p)
        if name == "compare":
            p.add_argument("--prefactors", type=_list_flag(float))
        if name == "pipeline":
            p.add_argument("--order", type=int, choices=[0, 1])
            p.add_argument("--r", type=float)
            p.add_argument("--grid-n", dest="grid_n", type=int)
            p.add_argument("--t-final", dest="t_final", type=float)
            p.add_argument("--dt", type=float)
            p.add_argument("--mode", choices=["auto", *madelung.MODES])
            p.add_argument("--model", choices=sorted(MODELS), help="density the event positions are drawn from")
        if name == "sweep":
            p.add_argument("--workers", type=int)
    return parser


def _overrides(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "print_schema", "sampler", "sampler_scale", "sigma", "velocity", "initial_csv"}
    out = {k: v for k, v in vars(ns).items() if k not in skip and v is not None}
    sampler = {}
    if getattr(ns, "sampler", None):
        sampler["kind"] = ns.sampler
    if getattr(ns, "sampler_scale", None) is not None:
        sampler["scale"] = ns.sampler_scale
    if sampler:
        out["sampler"] = sampler
    initial = {}
    if getattr(ns, "initial_csv", None):
        initial = {"kind": "csv", "path": ns.initial_csv}
    for key in ("sigma", "velocity"):
        if getattr(ns, key, None) is not None:
            initial[key] = getattr(ns, key)
    if initial:
        out["initial"] = initial
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.print_schema:
        sys.stdout.write(json.dumps(SCHEMAS[ns.command], indent=2) + "\n")
        return EXIT_OK
    try:
        file_cfg = {}
        if ns.config:
            file_cfg = json.loads(Path(ns.config).read_text())
            if not isinstance(file_cfg, dict):
                raise ConfigError("config file must hold a JSON object")
        cfg = {**file_cfg, **_merge_flags(file_cfg, _overrides(ns)), "command": ns.command}
        manifest = run(cfg)
    except BaseException as exc:  # noqa: BLE001 - mapped to exit codes
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        code = exit_code_for(exc)
        msg = f"error: {exc}"
        cause = exc.cause if isinstance(exc, StageError) else exc
        if isinstance(cause, InstabilityError):
            msg += f"\ndiagnostics: step={cause.step} {json.dumps(_jsonable(cause.diagnostics))}"
        sys.stderr.write(msg + "\n")
        if code == 1:
            raise
        return code
    sys.stderr.write(f"wrote {len(manifest.outputs)} files to {Path(manifest.outputs[0]).parent if manifest.outputs else '.'}\n")
    sys.stderr.write(json.dumps(manifest.metrics, sort_keys=True) + "\n")
    return EXIT_OK


def _merge_flags(file_cfg: dict, flags: dict) -> dict:
    """Nested dict flags (sampler, initial) update the file's dicts key by key."""
    out = dict(flags)
    for key in ("sampler", "initial", "grid"):
        if key in flags and isinstance(file_cfg.get(key), dict):
            out[key] = {**file_cfg[key], **flags[key]}
    return out


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
