"""Scenario files: YAML with nested sections, strictly validated.

Top-level sections: ``grid`` (required), exactly one of ``model`` or
``exhaustible``, and optional ``simulation``, ``run``, ``output``.  Every
key is checked; unknown keys are errors.  Missing optional keys are filled
with defaults so that :meth:`ScenarioConfig.to_dict` is a complete, resolved
description that parses back to an equal config.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, StructureError
from .exhaustible import ExhaustibleParams
from .model import CONSTANT_SHAPES, SCHEDULE_SHAPES, CoefficientSet, TimeGrid, _as_matrix, schedule_from_dict
from .riccati import CONVENTIONS, TERMINAL_ZERO
from .simulate import MODES, InitSpec

PRESET_PREFIX = "preset:"

SIMULATION_DEFAULTS = {
    "seed": 12345,
    "paths": 32,
    "particles": 256,
    "mode": "estimated",
    "init": {"kind": "point", "x0": [1.0]},
}
RUN_DEFAULTS = {
    "phi_convention": TERMINAL_ZERO,
    "verify": {
        "coupling_paths": 8,
        "coupling_particles": 64,
        "bsde_steps": [250, 500, 1000, 2000],
        "bsde_paths": 16,
        "bsde_particles": 64,
        "gateaux_steps": 800,
        "gateaux_paths": 320,
        "gateaux_particles": 32,
    },
    "nash": {
        "players": [4, 16, 64, 256],
        "replications": 800,
        "steps": 50,
        "families": ["live_average"],
        "negative_control_players": 2,
    },
    "sweep": {"epsilons": [0.0, 1.0, 2.0, 5.0, 10.0]},
    "poa": {"epsilons": [1.0, 2.0, 5.0]},
}
OUTPUT_DEFAULTS = {"directory": "mflq-out", "trajectory_particles": 4}
EXHAUSTIBLE_KEYS = {"mu", "nu", "nu0", "epsilon", "gamma", "delta"}
INIT_KEYS = {
    "point": {"kind", "x0"},
    "normal": {"kind", "mean", "var", "truncate"},
    "lognormal": {"kind", "mean_log", "sd_log"},
}


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


class _Checker:
    def __init__(self):
        self.errors = []

    def err(self, path, msg):
        self.errors.append((path, msg))

    def mapping(self, value, path):
        if not isinstance(value, dict):
            self.err(path, "expected a mapping")
            return False
        return True

    def keys(self, value, allowed, path):
        for key in value:
            if key not in allowed:
                self.err(f"{path}.{key}" if path else str(key), "unknown key")

    def merge(self, value, defaults, path):
        """Defaults overlaid with ``value``, checking keys and leaf types recursively."""
        out = copy.deepcopy(defaults)
        if value is None:
            return out
        if not self.mapping(value, path):
            return out
        self.keys(value, defaults.keys(), path)
        for key, v in value.items():
            if key not in defaults:
                continue
            d = defaults[key]
            sub = f"{path}.{key}"
            if isinstance(d, dict) and key != "init":
                out[key] = self.merge(v, d, sub)
            else:
                out[key] = v
        return out


def _check_grid(ch, grid):
    if not ch.mapping(grid, "grid"):
        return None
    ch.keys(grid, {"t0", "T", "n_steps"}, "grid")
    t0, T, n = grid.get("t0", 0.0), grid.get("T"), grid.get("n_steps")
    if not _is_num(t0):
        ch.err("grid.t0", "must be a number")
    if not _is_num(T):
        ch.err("grid.T", "required number")
    if not _is_int(n):
        ch.err("grid.n_steps", "required integer")
    elif n < 2:
        ch.err("grid.n_steps", "must be >= 2")
    if _is_num(t0) and _is_num(T) and not T > t0:
        ch.err("grid.T", "must exceed grid.t0")
    return {"t0": float(t0) if _is_num(t0) else t0, "T": float(T) if _is_num(T) else T, "n_steps": n}


def _check_init(ch, init, path):
    if not ch.mapping(init, path):
        return
    kind = init.get("kind")
    if kind not in INIT_KEYS:
        ch.err(f"{path}.kind", f"must be one of {sorted(INIT_KEYS)}")
        return
    ch.keys(init, INIT_KEYS[kind], path)
    try:
        InitSpec(**{k: v for k, v in init.items()})
    except (TypeError, ValueError) as exc:
        ch.err(path, str(exc))


def _normalize_schedule(spec):
    """Shorthand (number or nested list) becomes a constant rule."""
    if isinstance(spec, dict):
        return dict(spec)
    return {"rule": "constant", "value": spec}


def _check_model(ch, model, n_steps):
    if not ch.mapping(model, "model"):
        return None
    ch.keys(model, {"d", "m", "coefficients"}, "model")
    d, m = model.get("d"), model.get("m")
    for key, val in (("d", d), ("m", m)):
        if not _is_int(val) or val < 1:
            ch.err(f"model.{key}", "required positive integer")
    coeffs = model.get("coefficients", {}) or {}
    if not ch.mapping(coeffs, "model.coefficients"):
        return None
    ch.keys(coeffs, set(SCHEDULE_SHAPES) | set(CONSTANT_SHAPES), "model.coefficients")
    if not (_is_int(d) and _is_int(m)):
        return None
    dims = {"d": d, "m": m, 1: 1}
    out = {}
    for name, spec in coeffs.items():
        path = f"model.coefficients.{name}"
        if name in CONSTANT_SHAPES:
            try:
                a = _as_matrix(spec)
            except (TypeError, ValueError):
                ch.err(path, "must be a number or nested list")
                continue
            if a.shape != (d, d):
                ch.err(path, f"shape {a.shape} does not match (d, d) = {(d, d)}")
            out[name] = a.tolist()
            continue
        if name not in SCHEDULE_SHAPES:
            continue
        spec = _normalize_schedule(spec)
        allowed = {"rule", "value", "rate"} if spec.get("rule") == "exp_discount" else {"rule", "value"}
        ch.keys(spec, allowed, path)
        try:
            sched = schedule_from_dict(spec)
        except (KeyError, TypeError, ValueError, StructureError) as exc:
            ch.err(path, f"invalid schedule: {exc}")
            continue
        r, c = SCHEDULE_SHAPES[name]
        want = (dims[r], dims[c])
        if tuple(sched.shape) != want:
            ch.err(path, f"shape {tuple(sched.shape)} does not match {want}")
        if spec["rule"] == "tabulated" and _is_int(n_steps) and sched.table.shape[0] != n_steps + 1:
            ch.err(path, f"tabulated with {sched.table.shape[0]} entries, grid needs {n_steps + 1}")
        out[name] = sched.to_dict()
    return {"d": d, "m": m, "coefficients": out}


def _check_exhaustible(ch, ex):
    if not ch.mapping(ex, "exhaustible"):
        return None
    ch.keys(ex, EXHAUSTIBLE_KEYS, "exhaustible")
    out = {"mu": ex.get("mu", 0.1), "nu": ex.get("nu", 0.3), "nu0": ex.get("nu0", 0.2)}
    if "epsilon" in ex and ("gamma" in ex or "delta" in ex):
        ch.err("exhaustible", "give either epsilon or (gamma, delta), not both")
    if "gamma" in ex or "delta" in ex:
        out["gamma"], out["delta"] = ex.get("gamma"), ex.get("delta")
    else:
        out["epsilon"] = ex.get("epsilon", 2.0)
    for key, val in out.items():
        if not _is_num(val):
            ch.err(f"exhaustible.{key}", "required number")
    if not ch.errors:
        kw = {k: float(v) for k, v in out.items()}
        if "gamma" in kw:
            kw["epsilon"] = None
        try:
            ExhaustibleParams(**kw)
        except ValueError as exc:
            ch.err("exhaustible", str(exc))
    return {k: float(v) if _is_num(v) else v for k, v in out.items()}


def _check_run(ch, run):
    conv = run["phi_convention"]
    if conv not in CONVENTIONS:
        ch.err("run.phi_convention", f"must be one of {list(CONVENTIONS)}")
    v = run["verify"]
    for key in ("coupling_paths", "coupling_particles", "bsde_paths", "bsde_particles",
                "gateaux_steps", "gateaux_paths", "gateaux_particles"):
        if not _is_int(v[key]) or v[key] < 1:
            ch.err(f"run.verify.{key}", "must be a positive integer")
    steps = v["bsde_steps"]
    if (not isinstance(steps, list) or len(steps) < 2 or not all(_is_int(s) and s >= 2 for s in steps)
            or any(max(steps) % s for s in steps)):
        ch.err("run.verify.bsde_steps", "need >= 2 step counts, each dividing the largest")
    nash = run["nash"]
    if not isinstance(nash["players"], list) or not all(_is_int(p) and p >= 2 for p in nash["players"]):
        ch.err("run.nash.players", "must be a list of integers >= 2")
    for key in ("replications", "steps", "negative_control_players"):
        if not _is_int(nash[key]) or nash[key] < 2:
            ch.err(f"run.nash.{key}", "must be an integer >= 2")
    fams = nash["families"]
    if not isinstance(fams, list) or not all(f in ("scaled", "live_average", "shift") for f in fams):
        ch.err("run.nash.families", "entries must be scaled, live_average or shift")
    for sec in ("sweep", "poa"):
        eps = run[sec]["epsilons"]
        if not isinstance(eps, list) or not eps or not all(_is_num(e) and e >= 0 for e in eps):
            ch.err(f"run.{sec}.epsilons", "must be a non-empty list of numbers >= 0")


@dataclass
class ScenarioConfig:
    grid: dict
    model: dict | None
    exhaustible: dict | None
    simulation: dict
    run: dict
    output: dict

    def to_dict(self) -> dict:
        out = {"grid": self.grid}
        if self.model is not None:
            out["model"] = self.model
        if self.exhaustible is not None:
            out["exhaustible"] = self.exhaustible
        out.update(simulation=self.simulation, run=self.run, output=self.output)
        return copy.deepcopy(out)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def with_overrides(self, *, seed=None, steps=None, particles=None, paths=None, phi_convention=None, out=None):
        d = self.to_dict()
        if seed is not None:
            d["simulation"]["seed"] = seed
        if steps is not None:
            d["grid"]["n_steps"] = steps
        if particles is not None:
            d["simulation"]["particles"] = particles
        if paths is not None:
            d["simulation"]["paths"] = paths
        if phi_convention is not None:
            d["run"]["phi_convention"] = phi_convention
        if out is not None:
            d["output"]["directory"] = str(out)
        return parse_mapping(d)

    # builders

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.grid["t0"], self.grid["T"], self.grid["n_steps"])

    @property
    def init_spec(self) -> InitSpec:
        return InitSpec(**self.simulation["init"])

    def exhaustible_params(self) -> ExhaustibleParams:
        if self.exhaustible is None:
            raise ConfigError([("exhaustible", "this subcommand needs an exhaustible section")])
        ex = dict(self.exhaustible)
        if "gamma" in ex:
            ex["epsilon"] = None
        return ExhaustibleParams(**ex, t0=self.grid["t0"], T=self.grid["T"], init=self.init_spec)

    def coefficient_set(self) -> CoefficientSet:
        if self.exhaustible is not None:
            from .exhaustible import to_coefficients

            return to_coefficients(self.exhaustible_params(), self.grid["n_steps"])
        coeffs = {}
        for name, spec in self.model["coefficients"].items():
            coeffs[name] = spec if name in CONSTANT_SHAPES else schedule_from_dict(spec)
        return CoefficientSet.build(self.time_grid, self.model["d"], self.model["m"], **coeffs)


def parse_mapping(raw) -> ScenarioConfig:
    ch = _Checker()
    if not isinstance(raw, dict):
        raise ConfigError([("", "top level must be a mapping")])
    ch.keys(raw, {"grid", "model", "exhaustible", "simulation", "run", "output"}, "")
    if "grid" not in raw:
        ch.err("grid", "required section")
        grid = None
    else:
        grid = _check_grid(ch, raw["grid"])
    has_model, has_ex = "model" in raw, "exhaustible" in raw
    if has_model and has_ex:
        ch.err("model", "conflicts with exhaustible: give exactly one")
        ch.err("exhaustible", "conflicts with model: give exactly one")
    elif not (has_model or has_ex):
        ch.err("model", "need exactly one of model or exhaustible")
    n_steps = grid["n_steps"] if grid else None
    model = _check_model(ch, raw["model"], n_steps) if has_model and not has_ex else None
    ex = _check_exhaustible(ch, raw["exhaustible"]) if has_ex and not has_model else None

    sim = ch.merge(raw.get("simulation"), SIMULATION_DEFAULTS, "simulation")
    for key in ("seed", "paths", "particles"):
        lo = 0 if key == "seed" else 1
        if not _is_int(sim[key]) or sim[key] < lo:
            ch.err(f"simulation.{key}", f"must be an integer >= {lo}")
    if sim["mode"] not in MODES:
        ch.err("simulation.mode", f"must be one of {list(MODES)}")
    _check_init(ch, sim["init"], "simulation.init")
    if model is not None and isinstance(sim["init"], dict):
        for key in ("x0", "mean", "var", "mean_log", "sd_log"):
            if key in sim["init"] and np.size(sim["init"][key]) not in (1, model["d"]):
                ch.err(f"simulation.init.{key}", f"needs 1 or d = {model['d']} components")
    if ex is not None and isinstance(sim["init"], dict) and sim["init"].get("kind") in INIT_KEYS:
        try:
            if InitSpec(**sim["init"]).mean_vector(1)[0] <= 0:
                ch.err("simulation.init", "mean initial reserve must be positive")
        except (TypeError, ValueError):
            pass

    run = ch.merge(raw.get("run"), RUN_DEFAULTS, "run")
    if not ch.errors:
        _check_run(ch, run)
    out = ch.merge(raw.get("output"), OUTPUT_DEFAULTS, "output")
    if not isinstance(out["directory"], str):
        ch.err("output.directory", "must be a string")
    if not _is_int(out["trajectory_particles"]) or out["trajectory_particles"] < 1:
        ch.err("output.trajectory_particles", "must be a positive integer")
    if ch.errors:
        raise ConfigError(ch.errors)
    init = dict(sim["init"])
    for key in ("x0", "mean", "var", "mean_log", "sd_log"):
        if key in init:
            init[key] = [float(x) for x in np.atleast_1d(init[key])]
    sim["init"] = init
    return ScenarioConfig(grid, model, ex, sim, run, out)


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("mflq").joinpath("presets").iterdir() if p.name.endswith(".yaml"))


def _read_text(path) -> str:
    path = str(path)
    if path.startswith(PRESET_PREFIX):
        name = path[len(PRESET_PREFIX):]
        res = resources.files("mflq").joinpath("presets", f"{name}.yaml")
        if not res.is_file():
            raise ConfigError([("config", f"unknown preset {name!r}; available: {preset_names()}")])
        return res.read_text()
    p = Path(path)
    if not p.is_file():
        raise ConfigError([("config", f"file not found: {path}")])
    return p.read_text()


def parse_config(path) -> ScenarioConfig:
    """Load and validate a scenario file (or ``preset:<name>``)."""
    try:
        raw = yaml.safe_load(_read_text(path))
    except yaml.YAMLError as exc:
        raise ConfigError([("", f"not valid YAML: {exc}")]) from None
    return parse_mapping(raw)
