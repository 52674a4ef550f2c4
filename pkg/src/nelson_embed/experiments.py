"""Experiment kinds: JSON schemas, config parsing and runners.

Every runner returns a :class:`RunResult` holding a JSON-ready ``results``
dictionary and a mapping from CSV file names to writer callbacks.  The CLI
adds the config hash, expression hashes and the manifest around it.
"""

from __future__ import annotations

import csv
import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from jsonschema import Draft202012Validator

from .embed import (
    Lagrangian,
    conjecture_probe,
    default_sites,
    euler_lagrange_residual,
    functoriality_gap,
    newton_residual,
)
from .errors import ConfigInvalid, FieldSyntaxError, NelsonError, UnknownIdentifier
from .fields import parse_field, spatial_vars
from .nelson import (
    EstimatorConfig,
    dmu_analytic,
    dmu_empirical,
    forward_backward_analytic,
    nelson_estimate,
    second_derivative_analytic,
    second_derivative_empirical,
)
from .process import (
    DiffusionModel,
    Gaussian,
    PointMass,
    SdeSpec,
    TimeGrid,
    brownian_motion,
    embed_deterministic,
    excited_oscillator,
    fmt,
    free_gaussian_packet,
    gaussian_kde,
    ornstein_uhlenbeck,
    silverman_bandwidth,
    simulate,
    write_ensemble_csv,
)
from .schrodinger import (
    SpatialGrid,
    correspondence_check,
    density_match,
    evolve,
    nelson_map,
    solve_eigenstates,
)

# --------------------------------------------------------------------------
# Schemas
# --------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_EXPR = {"type": "string", "minLength": 1}

_DEFS = {
    "expr": _EXPR,
    "grid": {
        "type": "object",
        "properties": {"a": _NUM, "b": _NUM, "n_steps": {"type": "integer", "minimum": 1}},
        "required": ["a", "b", "n_steps"],
        "additionalProperties": False,
    },
    "preset": {
        "type": "object",
        "properties": {
            "preset": {"enum": ["ou-stationary", "ou-rotational", "brownian", "free-packet", "excited-oscillator"]},
            "theta": _POS,
            "sigma": _POS,
            "dim": {"type": "integer", "minimum": 1, "maximum": 3},
            "rotation": _NUM,
            "s0": _POS,
            "sigma2": _POS,
        },
        "required": ["preset"],
        "additionalProperties": False,
    },
    "custom": {
        "type": "object",
        "properties": {
            "drift": {"type": "array", "items": _EXPR, "minItems": 1, "maxItems": 3},
            "sigma": _POS,
            "density": _EXPR,
            "gradient_potential": _EXPR,
            "initial": {
                "oneOf": [
                    {"type": "object", "properties": {"point": {"type": "array", "items": _NUM}},
                     "required": ["point"], "additionalProperties": False},
                    {"type": "object", "properties": {
                        "mean": {"type": "array", "items": _NUM},
                        "cov": {"type": "array", "items": {"type": "array", "items": _NUM}}},
                     "required": ["mean", "cov"], "additionalProperties": False},
                ]
            },
            "window": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
            "default_time": _NUM,
            "stationary": {"type": "boolean"},
            "name": {"type": "string"},
        },
        "required": ["drift", "sigma", "initial"],
        "additionalProperties": False,
    },
    "deterministic": {
        "type": "object",
        "properties": {"deterministic": {"type": "array", "items": _EXPR, "minItems": 1}, "grid": {"$ref": "#/$defs/grid"}},
        "required": ["deterministic", "grid"],
        "additionalProperties": False,
    },
    "model": {"oneOf": [{"$ref": "#/$defs/preset"}, {"$ref": "#/$defs/custom"}]},
    "target": {"oneOf": [{"$ref": "#/$defs/preset"}, {"$ref": "#/$defs/custom"}, {"$ref": "#/$defs/deterministic"}]},
    "ensemble": {
        "type": "object",
        "properties": {
            "grid": {"$ref": "#/$defs/grid"},
            "n_paths": {"type": "integer", "minimum": 1},
            "substeps": {"type": "integer", "minimum": 1},
            "workers": {"type": "integer", "minimum": 1},
        },
        "required": ["grid", "n_paths"],
        "additionalProperties": False,
    },
    "estimator": {
        "type": "object",
        "properties": {
            "h": _POS,
            "bandwidth": {"oneOf": [_POS, {"const": "auto"}]},
            "derivative_bandwidth": {"oneOf": [_POS, {"const": "auto"}]},
            "time_window": {"type": "number", "minimum": 0},
            "degree": {"type": "integer", "minimum": 1, "maximum": 4},
            "min_local_mass": {"type": "number", "minimum": 0},
            "min_effective_samples": {"type": "number", "minimum": 0},
        },
        "additionalProperties": False,
    },
    "sites": {
        "type": "object",
        "properties": {
            "t": _NUM,
            "x": {"type": "array", "items": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]}, "minItems": 1},
            "range": {"type": "array", "prefixItems": [_NUM, _NUM, {"type": "integer", "minimum": 1}],
                      "minItems": 3, "maxItems": 3},
            "times": {"type": "array", "items": _NUM, "minItems": 1},
        },
        "additionalProperties": False,
    },
    "space": {
        "type": "object",
        "properties": {"x_min": _NUM, "x_max": _NUM, "m": {"type": "integer", "minimum": 16}},
        "required": ["x_min", "x_max", "m"],
        "additionalProperties": False,
    },
    "backend": {"enum": ["analytic", "empirical"]},
    "mu": {"enum": [1, -1]},
}

_COMMON = {
    "kind": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    "output": {"type": "string"},
    "description": {"type": "string"},
}


def _schema(kind, properties, required):
    props = dict(_COMMON)
    props["kind"] = {"const": kind}
    props.update(properties)
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": f"nelson-embed {kind} experiment",
        "type": "object",
        "properties": props,
        "required": ["kind"] + required,
        "additionalProperties": False,
        "$defs": _DEFS,
    }


def _ref(name):
    return {"$ref": f"#/$defs/{name}"}


_ESTIMATION = {
    "backend": _ref("backend"),
    "ensemble": _ref("ensemble"),
    "estimator": _ref("estimator"),
    "t_index": {"type": "integer", "minimum": 0},
    "sites": _ref("sites"),
}

SCHEMAS = {
    "simulate": _schema("simulate", {
        "model": _ref("model"),
        "ensemble": _ref("ensemble"),
        "write_paths": {"type": "boolean"},
    }, ["model", "ensemble"]),
    "derivatives": _schema("derivatives", {
        "target": _ref("target"), "mu": _ref("mu"), **_ESTIMATION,
    }, ["target", "backend"]),
    "newton-check": _schema("newton-check", {
        "target": _ref("target"), "potential": _EXPR, "mu": _ref("mu"), **_ESTIMATION,
    }, ["target", "potential", "backend"]),
    "el-check": _schema("el-check", {
        "target": _ref("target"),
        "lagrangian": _EXPR,
        "mu": _ref("mu"),
        "sites": _ref("sites"),
        "compare_potential": _EXPR,
    }, ["target", "lagrangian"]),
    "schrodinger": _schema("schrodinger", {
        "potential": _EXPR,
        "space": _ref("space"),
        "sigma2": _POS,
        "k": {"type": "integer", "minimum": 1, "maximum": 10},
        "refine_tol": {"oneOf": [_POS, {"type": "null"}]},
        "evolve": {
            "type": "object",
            "properties": {"state": {"type": "integer", "minimum": 0}, "dt": _POS,
                           "steps": {"type": "integer", "minimum": 0}, "every": {"type": "integer", "minimum": 1}},
            "required": ["dt", "steps"],
            "additionalProperties": False,
        },
    }, ["potential", "space"]),
    "correspondence": _schema("correspondence", {
        "potential": _EXPR,
        "space": _ref("space"),
        "sigma2": _POS,
        "state": {"type": "integer", "minimum": 0, "maximum": 9},
        "restrict": {"type": "boolean"},
        "threshold": _POS,
        "ensemble": _ref("ensemble"),
        "bandwidth": {"oneOf": [_POS, {"const": "auto"}]},
        "wrong_drift": _EXPR,
        "wrong_potential": _EXPR,
    }, ["potential", "space"]),
    "functoriality": _schema("functoriality", {
        "target": _ref("target"), "a": _EXPR, "mu": _ref("mu"), "sites": _ref("sites"),
    }, ["target", "a"]),
    "conjecture-probe": _schema("conjecture-probe", {"target": _ref("target"), **_ESTIMATION}, ["target"]),
}

KINDS = tuple(SCHEMAS)

SUMMARIES = {
    "simulate": "Euler-Maruyama path ensemble of a model; per-time moments",
    "derivatives": "forward, backward, complex and second Nelson derivatives at sites",
    "newton-check": "residual of the embedded Newton equation D^2 X = -grad U",
    "el-check": "residual of the embedded Euler-Lagrange equation of a Lagrangian",
    "schrodinger": "eigenstates and Crank-Nicolson evolution of a 1D Hamiltonian",
    "correspondence": "eigenstate -> diffusion -> simulation loop with density and Schrodinger checks",
    "functoriality": "gap D(a(X)) - a'(X) DX of the embedded derivative",
    "conjecture-probe": "size of Im D^2 X for a (possibly non-gradient) drift",
}

# keys whose string values are field expressions
EXPR_KEYS = {"drift", "density", "gradient_potential", "deterministic", "potential", "lagrangian",
             "compare_potential", "a", "wrong_drift", "wrong_potential"}


def list_experiments() -> list[str]:
    return list(KINDS)


def describe(kind: str) -> str:
    """Summary line plus the JSON schema of an experiment kind."""
    if kind not in SCHEMAS:
        raise ConfigInvalid(f"unknown experiment kind {kind!r}; valid kinds: {', '.join(KINDS)}", ("kind",))
    return f"{kind}: {SUMMARIES[kind]}\n" + json.dumps(SCHEMAS[kind], indent=2)


def validate(config) -> None:
    """Raise :class:`ConfigInvalid` at the schema path of the first failure."""
    if not isinstance(config, dict):
        raise ConfigInvalid("config must be a JSON object")
    kind = config.get("kind")
    if kind not in SCHEMAS:
        raise ConfigInvalid(f"unknown experiment kind {kind!r}; valid kinds: {', '.join(KINDS)}", ("kind",))
    validator = Draft202012Validator(SCHEMAS[kind])
    errors = sorted(validator.iter_errors(config), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigInvalid(err.message, err.absolute_path)


# --------------------------------------------------------------------------
# Hashes
# --------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config) -> str:
    cfg = {k: v for k, v in config.items() if k != "output"}
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def blob_hash(text: str) -> str:
    """Git blob hash of a string."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def expression_hashes(config) -> dict:
    """``{json-pointer: git blob hash}`` for every expression in the config."""
    out = {}

    def walk(node, path, in_expr):
        if isinstance(node, dict):
            for k, v in node.items():
                walk(v, path + (k,), k in EXPR_KEYS)
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, path + (str(i),), in_expr)
        elif isinstance(node, str) and in_expr:
            out["/" + "/".join(path)] = blob_hash(node)

    walk(config, (), False)
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------
# Errors with the originating operation
# --------------------------------------------------------------------------

class ExperimentError(Exception):
    """A module error tagged with the operation that raised it."""

    def __init__(self, operation, error):
        self.operation = operation
        self.error = error
        super().__init__(f"{operation}: {type(error).__name__}: {error}")

    @property
    def is_config_error(self) -> bool:
        return isinstance(self.error, (ConfigInvalid, FieldSyntaxError, UnknownIdentifier))


@contextmanager
def operation(name):
    try:
        yield
    except ExperimentError:
        raise
    except (NelsonError, ValueError, ArithmeticError) as exc:
        raise ExperimentError(name, exc) from exc


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def _xt(d):
    return ("t",) + spatial_vars(d)


def build_model(spec) -> DiffusionModel:
    if "preset" in spec:
        name = spec["preset"]
        if name in ("ou-stationary", "ou-rotational"):
            dim = spec.get("dim", 2 if name == "ou-rotational" else 1)
            rotation = spec.get("rotation", 0.0 if name == "ou-stationary" else 1.0)
            return ornstein_uhlenbeck(spec.get("theta", 1.0), spec.get("sigma", 1.0), dim, rotation)
        if name == "brownian":
            return brownian_motion(spec.get("sigma", 1.0))
        if name == "free-packet":
            return free_gaussian_packet(spec.get("s0", 1.0), spec.get("sigma2", 1.0))
        return excited_oscillator(spec.get("sigma2", 1.0))
    d = len(spec["drift"])
    drift = tuple(parse_field(b, _xt(d), d) for b in spec["drift"])
    init = spec["initial"]
    if "point" in init:
        law = PointMass(tuple(float(v) for v in init["point"]))
    else:
        law = Gaussian(tuple(init["mean"]), tuple(tuple(r) for r in init["cov"]))
    sde = SdeSpec(d, drift, float(spec["sigma"]), law)
    density = parse_field(spec["density"], _xt(d), d) if "density" in spec else None
    pot = parse_field(spec["gradient_potential"], _xt(d), d) if "gradient_potential" in spec else None
    window = tuple(tuple(w) for w in spec.get("window", [[-10.0, 10.0]] * d))
    if len(window) != d:
        raise ConfigInvalid(f"window needs {d} intervals", ("model", "window"))
    return DiffusionModel(sde, density, pot is not None, pot, window, spec.get("name", "custom"),
                          spec.get("default_time", 0.0), spec.get("stationary", False))


def build_target(spec):
    """A diffusion model or an embedded deterministic function of time."""
    if "deterministic" in spec:
        d = len(spec["deterministic"])
        fs = [parse_field(f, ("t",), d) for f in spec["deterministic"]]
        g = spec["grid"]
        return embed_deterministic(fs if d > 1 else fs[0], TimeGrid(g["a"], g["b"], g["n_steps"]))
    return build_model(spec)


def build_grid(g) -> TimeGrid:
    return TimeGrid(float(g["a"]), float(g["b"]), int(g["n_steps"]))


def build_estimator(spec) -> EstimatorConfig:
    return EstimatorConfig(**(spec or {}))


def build_sites(spec, dim, t_default):
    """Sites ``(t, x1..xd)`` from a sites block; ``None`` when absent."""
    if spec is None:
        return None
    t = spec.get("t", t_default)
    if "times" in spec:
        return np.asarray(spec["times"], dtype=float)[:, None]
    if "x" in spec:
        x = np.array([v if isinstance(v, list) else [v] for v in spec["x"]], dtype=float)
        if x.shape[1] != dim:
            raise ConfigInvalid(f"site positions need {dim} coordinates", ("sites", "x"))
    elif "range" in spec:
        lo, hi, n = spec["range"]
        axis = np.linspace(lo, hi, n)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        x = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        raise ConfigInvalid("sites need 'x', 'range' or 'times'", ("sites",))
    return np.column_stack([np.full(x.shape[0], float(t)), x])


def parse_all(config) -> None:
    """Parse every expression in the config so syntax errors surface before any work."""
    kind = config["kind"]
    with operation("parse"):
        for key in ("model", "target"):
            if key in config:
                build_target(config[key])
        d = _dim_of(config)
        for key in ("potential", "compare_potential", "wrong_potential", "wrong_drift", "a"):
            if key in config:
                parse_field(config[key], _xt(d), d)
        if "lagrangian" in config:
            Lagrangian.parse(config["lagrangian"], d)
    return kind


def _dim_of(config) -> int:
    spec = config.get("target", config.get("model"))
    if spec is None:
        return 1
    if "deterministic" in spec:
        return len(spec["deterministic"])
    if "drift" in spec:
        return len(spec["drift"])
    if spec.get("preset") == "ou-rotational":
        return spec.get("dim", 2)
    return spec.get("dim", 1)


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------

def _rows_writer(header, rows):
    def write(path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return write


def _finite(v):
    v = float(v)
    return v if np.isfinite(v) else None


def _sample_summary(sample) -> dict:
    valid = sample.valid
    out = {"label": sample.label, "backend": sample.backend, "sites": int(sample.points.shape[0]),
           "masked_count": int(sample.mask.sum())}
    if valid.size:
        mag = np.sqrt(np.sum(np.abs(valid) ** 2, axis=1))
        out["max_abs"] = _finite(mag.max())
        out["rms"] = _finite(np.sqrt(np.mean(mag ** 2)))
    return out


@dataclass
class RunResult:
    results: dict
    files: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# Runners
# --------------------------------------------------------------------------

def _ensemble(config, model, seed, workers):
    e = config["ensemble"]
    grid = build_grid(e["grid"])
    with operation("simulate"):
        return simulate(model.spec, grid, e["n_paths"], seed, substeps=e.get("substeps", 1),
                        workers=workers or e.get("workers", 1))


def _empirical_setup(config, seed, workers):
    target = build_target(config["target"])
    if isinstance(target, DiffusionModel):
        if "ensemble" not in config:
            raise ConfigInvalid("the empirical backend needs an ensemble block", ("ensemble",))
        ens = _ensemble(config, target, seed, workers)
    else:
        ens = target
    t_index = config.get("t_index", ens.grid.n_steps // 2)
    if t_index > ens.grid.n_steps:
        raise ConfigInvalid("t_index lies beyond the grid", ("t_index",))
    positions = None
    if ens.is_deterministic:
        positions = None
    elif "sites" in config:
        sites = build_sites(config["sites"], ens.dim, ens.times[t_index])
        positions = sites[:, 1:]
    elif isinstance(target, DiffusionModel) and target.density is not None:
        positions = default_sites(target, t=target.default_time)[:, 1:]
    else:
        raise ConfigInvalid("the empirical backend needs sites", ("sites",))
    return target, ens, t_index, positions, build_estimator(config.get("estimator"))


def _analytic_sites(config, target):
    if "sites" in config:
        t_default = getattr(target, "default_time", 0.0)
        return build_sites(config["sites"], target.dim, t_default)
    with operation("default_sites"):
        return default_sites(target)


def run_simulate(config, seed, workers):
    model = build_model(config["model"])
    ens = _ensemble(config, model, seed, workers)
    mean = ens.paths.mean(axis=0)
    var = ens.paths.var(axis=0)
    d = ens.dim
    header = ["t"] + [f"mean_{k + 1}" for k in range(d)] + [f"var_{k + 1}" for k in range(d)]
    rows = [[float(t)] + [float(v) for v in mean[i]] + [float(v) for v in var[i]] for i, t in enumerate(ens.times)]
    files = {"moments.csv": _rows_writer(header, rows)}
    if config.get("write_paths"):
        files["paths.csv"] = lambda path: write_ensemble_csv(path, ens)
    results = {"n_paths": ens.n_paths, "dt": ens.dt, "n_steps": ens.grid.n_steps,
               "final_mean": [float(v) for v in mean[-1]], "final_var": [float(v) for v in var[-1]]}
    return RunResult(results, files)


def run_derivatives(config, seed, workers):
    mu = config.get("mu", 1)
    files, results = {}, {}
    if config["backend"] == "analytic":
        target = build_target(config["target"])
        sites = _analytic_sites(config, target)
        with operation("forward_backward_analytic"):
            fwd, bwd = forward_backward_analytic(target, sites)
        with operation("dmu_analytic"):
            dmu = dmu_analytic(target, mu, sites)
        with operation("second_derivative_analytic"):
            second = second_derivative_analytic(target, mu, sites)
    else:
        target, ens, t_index, pos, cfg = _empirical_setup(config, seed, workers)
        with operation("nelson_estimate"):
            fwd = nelson_estimate(ens, cfg, "forward", t_index, pos)
            bwd = nelson_estimate(ens, cfg, "backward", t_index, pos)
        with operation("dmu_empirical"):
            dmu = dmu_empirical(ens, cfg, mu, t_index, pos)
        second = None
        if not ens.is_deterministic:
            with operation("second_derivative_empirical"):
                second = second_derivative_empirical(ens, cfg, mu, t_index, pos)
        results["t_index"] = t_index
    for name, sample in (("forward", fwd), ("backward", bwd), ("dmu", dmu), ("second", second)):
        if sample is None:
            continue
        files[f"{name}.csv"] = sample.to_csv
        results[name] = _sample_summary(sample)
    results["mu"] = mu
    return RunResult(results, files)


def run_newton(config, seed, workers):
    mu = config.get("mu", 1)
    if config["backend"] == "analytic":
        target = build_target(config["target"])
        sites = _analytic_sites(config, target)
        with operation("newton_residual"):
            rep = newton_residual(config["potential"], target, "analytic", sites, mu=mu)
    else:
        target, ens, t_index, pos, cfg = _empirical_setup(config, seed, workers)
        if ens.is_deterministic:
            sites = ens.times[t_index:t_index + 1, None]
            with operation("newton_residual"):
                rep = newton_residual(config["potential"], ens, "analytic", sites, mu=mu)
        else:
            with operation("newton_residual"):
                rep = newton_residual(config["potential"], target, "empirical", pos, cfg,
                                      ensemble=ens, t_index=t_index, mu=mu)
    results = rep.to_dict()
    results["mu"] = mu
    return RunResult(results, {"residual.csv": rep.sample.to_csv})


def run_el(config, seed, workers):
    mu = config.get("mu", 1)
    target = build_target(config["target"])
    d = target.dim
    with operation("Lagrangian.parse"):
        lag = Lagrangian.parse(config["lagrangian"], d)
    sites = _analytic_sites(config, target)
    with operation("euler_lagrange_residual"):
        rep = euler_lagrange_residual(lag, target, mu, sites)
    results = rep.to_dict()
    results["admissible"] = bool(lag.admissible)
    files = {"residual.csv": rep.sample.to_csv}
    if "compare_potential" in config:
        with operation("newton_residual"):
            newton = newton_residual(config["compare_potential"], target, "analytic", sites, mu=mu)
        diff = rep.values - newton.values
        keep = ~(rep.mask | newton.mask)
        results["newton_max_abs"] = newton.max_abs
        results["el_minus_newton_max_abs"] = _finite(np.max(np.abs(diff[keep]))) if keep.any() else None
    results["mu"] = mu
    return RunResult(results, files)


def _potential_expr(text):
    return parse_field(text, _xt(1), 1)


def run_schrodinger(config, seed, workers):
    U = _potential_expr(config["potential"])
    sp = config["space"]
    grid = SpatialGrid(float(sp["x_min"]), float(sp["x_max"]), int(sp["m"]))
    s2 = float(config.get("sigma2", 1.0))
    with operation("solve_eigenstates"):
        pairs = solve_eigenstates(U, grid, s2, config.get("k", 4), config.get("refine_tol", 1e-3))
    header = ["x"] + [f"psi_{p.n}" for p in pairs]
    rows = [[float(x)] + [float(p.state.values[j].real) for p in pairs] for j, x in enumerate(grid.x)]
    files = {"eigenstates.csv": _rows_writer(header, rows)}
    results = {"sigma2": s2, "dx": grid.dx, "eigenpairs": [p.to_dict() for p in pairs]}
    if "evolve" in config:
        ev = config["evolve"]
        n = ev.get("state", 0)
        if n >= len(pairs):
            raise ConfigInvalid(f"state {n} is not among the {len(pairs)} computed", ("evolve", "state"))
        psi = pairs[n].state
        every = ev.get("every", max(1, ev["steps"] // 100 or 1))
        trace = [[0, 0.0, psi.norm(), 0.0]]
        psi0 = psi
        done = 0
        with operation("evolve"):
            while done < ev["steps"]:
                k = min(every, ev["steps"] - done)
                psi = evolve(psi, U, ev["dt"], k)
                done += k
                overlap = np.trapezoid(np.conj(psi0.values) * psi.values, dx=grid.dx)
                trace.append([done, psi.t, psi.norm(), float(np.angle(overlap))])
        norms = np.array([r[2] for r in trace])
        files["evolution.csv"] = _rows_writer(["step", "t", "norm", "phase"], trace)
        files["final_state.csv"] = psi.to_csv
        results["evolution"] = {
            "state": n, "dt": ev["dt"], "steps": ev["steps"],
            "norm_drift": float(np.max(np.abs(norms - norms[0]))),
            "norm_drift_per_step": float(np.max(np.abs(norms - norms[0])) / max(1, ev["steps"])),
            "phase_expected": float(np.angle(np.exp(-1j * pairs[n].energy * psi.t / s2))),
            "phase_observed": trace[-1][3],
        }
    return RunResult(results, files)


def run_correspondence(config, seed, workers):
    U = _potential_expr(config["potential"])
    sp = config["space"]
    grid = SpatialGrid(float(sp["x_min"]), float(sp["x_max"]), int(sp["m"]))
    s2 = float(config.get("sigma2", 1.0))
    n = config.get("state", 0)
    with operation("solve_eigenstates"):
        pairs = solve_eigenstates(U, grid, s2, n + 1)
    psi = pairs[n].state
    kwargs = {"threshold": config["threshold"]} if "threshold" in config else {}
    with operation("nelson_map"):
        model, mask = nelson_map(psi, restrict=config.get("restrict", False), **kwargs)
    with operation("correspondence_check"):
        corr = correspondence_check(model, U, **kwargs)
    results = {"energy": pairs[n].energy, "state": n, "masked_nodes": int(mask.excluded.sum()),
               "correspondence": corr.to_dict()}
    files = {"correspondence.csv": corr.to_csv}
    if "wrong_potential" in config:
        with operation("correspondence_check"):
            wrong = correspondence_check(model, _potential_expr(config["wrong_potential"]), **kwargs)
        results["wrong_potential"] = wrong.to_dict()
    if "ensemble" in config:
        ens = _ensemble(config, model, seed, workers)
        bw = config.get("bandwidth", "auto")
        last = ens.grid.n_steps
        with operation("density_match"):
            l1 = density_match(ens, psi, last, bw)
        samples = ens.at(last)
        h = silverman_bandwidth(samples) if bw == "auto" else bw
        kde = gaussian_kde(samples, grid.x[:, None], h)
        rows = [[float(x), float(k), float(p)] for x, k, p in zip(grid.x, kde, psi.density)]
        files["density.csv"] = _rows_writer(["x", "kde", "psi2"], rows)
        results["density_l1"] = l1
        results["t_final"] = float(ens.times[last])
        if "wrong_drift" in config:
            wd = parse_field(config["wrong_drift"], _xt(1), 1)
            bad_spec = SdeSpec(1, (wd,), model.spec.sigma, model.spec.initial)
            with operation("simulate"):
                e = config["ensemble"]
                ens_bad = simulate(bad_spec, build_grid(e["grid"]), e["n_paths"], seed,
                                   substeps=e.get("substeps", 1), workers=workers or e.get("workers", 1))
            with operation("density_match"):
                results["wrong_drift_l1"] = density_match(ens_bad, psi, last, bw)
    return RunResult(results, files)


def run_functoriality(config, seed, workers):
    mu = config.get("mu", 1)
    target = build_target(config["target"])
    with operation("parse"):
        a = parse_field(config["a"], _xt(1), 1)
    sites = _analytic_sites(config, target)
    with operation("functoriality_gap"):
        gap = functoriality_gap(a, target, sites, mu)
    results = _sample_summary(gap)
    valid = gap.valid[:, 0]
    if valid.size:
        results["gap_mean_re"] = _finite(valid.real.mean())
        results["gap_mean_im"] = _finite(valid.imag.mean())
    results["mu"] = mu
    return RunResult(results, {"gap.csv": gap.to_csv})


def run_conjecture(config, seed, workers):
    backend = config.get("backend", "analytic")
    if backend == "analytic":
        target = build_target(config["target"])
        sites = _analytic_sites(config, target)
        with operation("conjecture_probe"):
            rep = conjecture_probe(target, sites, "analytic")
    else:
        _, ens, t_index, pos, cfg = _empirical_setup(config, seed, workers)
        with operation("conjecture_probe"):
            rep = conjecture_probe(ens, pos, "empirical", cfg, t_index)
    return RunResult(rep.to_dict(), {"second.csv": rep.sample.to_csv})


RUNNERS = {
    "simulate": run_simulate,
    "derivatives": run_derivatives,
    "newton-check": run_newton,
    "el-check": run_el,
    "schrodinger": run_schrodinger,
    "correspondence": run_correspondence,
    "functoriality": run_functoriality,
    "conjecture-probe": run_conjecture,
}


def run_experiment(config, seed=None, workers=None) -> RunResult:
    """Validate, parse and run a config; module errors come back as :class:`ExperimentError`."""
    validate(config)
    parse_all(config)
    seed = config.get("seed", 0) if seed is None else seed
    try:
        return RUNNERS[config["kind"]](config, seed, workers)
    except ConfigInvalid:
        raise
    except ExperimentError:
        raise
    except (NelsonError, ValueError, ArithmeticError) as exc:
        raise ExperimentError(config["kind"], exc) from exc

