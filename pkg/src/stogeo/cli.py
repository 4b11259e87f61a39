"""Command-line entry point: ``stogeo <command> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
import sympy
from jsonschema import Draft202012Validator

from . import __version__
from .errors import ConfigError, StogeoError
from .expr import T as TSYM
from .expr import lambdify_field, parse_expression, symbols

COMMANDS = ("simulate", "mean-derivatives", "bridge", "hjb", "hamilton", "noether",
            "symmetry", "transport", "legendre", "canonical-check")
RUN_SCHEMA_VERSION = 1

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_EXPR = {"type": ["string", "number"]}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "model": {"type": "string"},
        "family": {"enum": ["free", "harmonic", "euclidean-harmonic", "quadratic"]},
        "fields": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "drift": {"type": "array", "items": _EXPR, "minItems": 1},
                "diffusion": {"type": "array", "items": {"type": "array", "items": _EXPR}},
                "potential": _EXPR,
                "terminal_S": _EXPR,
                "conformal": {"type": "object", "additionalProperties": _EXPR},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["axes", "T", "steps"],
            "properties": {
                "axes": {
                    "type": "array", "minItems": 1, "maxItems": 2,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["lo", "hi", "n"],
                        "properties": {"lo": _NUM, "hi": _NUM,
                                       "n": {"type": "integer", "minimum": 8},
                                       "periodic": {"type": "boolean"}},
                    },
                },
                "T": _POS,
                "steps": {"type": "integer", "minimum": 1},
            },
        },
        "N": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "T": _POS,
        "steps": {"type": "integer", "minimum": 1},
        "x0": _VEC,
        "eps": _POS,
        "save_every": {"type": "integer", "minimum": 1},
        "times": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "eval_points": {"type": "array", "items": _VEC, "minItems": 1},
        "bandwidth": _POS,
        "terminal": {
            "type": "object",
            "additionalProperties": False,
            "required": ["center"],
            "properties": {"center": _VEC, "width": _POS, "floor": {"type": "number",
                                                                     "minimum": 0}},
        },
        "vector_field": {
            "type": "object",
            "additionalProperties": False,
            "required": ["V0", "V"],
            "properties": {"V0": _EXPR, "V": {"type": "array", "items": _EXPR, "minItems": 1},
                           "Phi": _EXPR},
        },
        "sample": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lo", "hi"],
            "properties": {"lo": _NUM, "hi": _NUM, "n": {"type": "integer", "minimum": 2},
                           "T": _POS, "nt": {"type": "integer", "minimum": 1}},
        },
        "region": {"type": "object", "additionalProperties": False,
                   "properties": {"radius": _POS, "t_max": _POS}},
        "v0": _VEC,
        "covector": {"type": "boolean"},
        "damped": {"type": "boolean"},
        "paths": {"type": "integer", "minimum": 1},
        "points": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["x", "xdot"],
            "properties": {"x": _VEC, "xdot": _VEC, "t": _NUM}}, "minItems": 1},
        "examples": {"type": "array", "minItems": 1,
                     "items": {"enum": ["oscillator", "linear-potential", "time-change"]}},
        "samples": {"type": "integer", "minimum": 1},
        "tolerances": {"type": "object", "additionalProperties": {"type": "number",
                                                                   "minimum": 0}},
    },
    "allOf": [
        {"if": {"properties": {"command": {"const": c}}, "required": ["command"]},
         "then": {"required": req}}
        for c, req in {
            "simulate": ["model", "x0", "N", "T", "steps"],
            "mean-derivatives": ["model", "x0", "N", "T", "steps", "times", "eval_points"],
            "bridge": ["grid", "x0", "terminal", "N"],
            "hjb": ["family", "grid"],
            "hamilton": ["family", "grid", "x0", "N"],
            "noether": ["family", "grid", "vector_field"],
            "symmetry": ["vector_field", "sample"],
            "transport": ["model", "x0", "T", "steps", "v0"],
            "legendre": ["family", "points"],
            "canonical-check": [],
        }.items()
    ],
}

DEFAULT_TOLERANCES = {
    "simulate": {"killed_fraction": 0.5},
    "mean-derivatives": {"se_multiple": 5.0},
    "bridge": {"maxwell": 1e-6, "hjb": 1.0},
    "hjb": {"hjb": 0.1},
    "hamilton": {"newton": 0.05, "energy_sigma": 3.0},
    "noether": {"noether": 1e-2, "hjb": 1e-2},
    "symmetry": {"relative": 1e-8},
    "transport": {"invariant": 1e-3},
    "legendre": {"roundtrip": 1e-10},
    "canonical-check": {"relation": 1e-10},
}


@dataclass
class RunConfig:
    command: str
    data: dict
    out: str = None
    threads: int = 1

    @property
    def seed(self):
        return int(self.data.get("seed", 0))

    def tolerances(self):
        tol = dict(DEFAULT_TOLERANCES.get(self.command, {}))
        tol.update(self.data.get("tolerances", {}))
        return tol

    def digest(self):
        text = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


# -- parsing ---------------------------------------------------------------------

def _format_error(err):
    loc = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return f"{loc}: {err.message}"


def validate(data):
    """All schema violations as messages, sorted by location."""
    v = Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    return [_format_error(e) for e in errs]


def parse_config(path, command=None):
    """Read and validate a JSON config.

    ``command`` (from the command line) is merged in; a conflicting
    ``command`` key in the file is an error.  Raises :class:`ConfigError`
    carrying every message.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if command is not None:
        if "command" in data and data["command"] != command:
            raise ConfigError(f"config is for '{data['command']}', not '{command}'")
        data["command"] = command
    msgs = validate(data)
    if msgs:
        raise ConfigError(msgs)
    if "command" not in data:
        raise ConfigError("no command given")
    return RunConfig(data["command"], data)


# -- builders ----------------------------------------------------------------------

def _dim_of(cfg):
    d = cfg.data
    if "grid" in d:
        return len(d["grid"]["axes"])
    if "model" in d:
        return _model(cfg).dim
    if "x0" in d:
        return len(d["x0"])
    if "vector_field" in d:
        return len(d["vector_field"]["V"])
    return 1


def _model(cfg):
    from .geometry import Euclidean, FlatTorus, model_from_id

    d = cfg.data
    if "model" not in d:
        if "grid" in d:
            axes = d["grid"]["axes"]
            if all(a.get("periodic", False) for a in axes):
                return FlatTorus(len(axes), axes[0]["hi"] - axes[0]["lo"])
            return Euclidean(len(axes))
        return Euclidean(len(d.get("x0", [0.0])))
    exprs = {}
    for name, e in d.get("fields", {}).get("conformal", {}).items():
        f = lambdify_field(parse_expression(e, 1), 1)
        exprs[name] = (lambda f: lambda x: f(0.0, x))(f)
    try:
        return model_from_id(d["model"], exprs)
    except (StogeoError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _vector_expr(exprs, dim, what):
    if len(exprs) != dim:
        raise ConfigError(f"{what} needs {dim} components, got {len(exprs)}")
    return [parse_expression(e, dim) for e in exprs]


def _drift(cfg, dim):
    f = cfg.data.get("fields", {})
    if "drift" not in f:
        return None, None
    ex = _vector_expr(f["drift"], dim, "drift")
    return lambdify_field(ex, dim), ex


def _diffusion(cfg, dim):
    f = cfg.data.get("fields", {})
    if "diffusion" not in f:
        return None, None
    rows = f["diffusion"]
    if len(rows) != dim or any(len(r) != dim for r in rows):
        raise ConfigError(f"diffusion must be {dim}x{dim}")
    ex = [[parse_expression(e, dim) for e in r] for r in rows]
    return lambdify_field(ex, dim), ex


def _potential(cfg, dim):
    f = cfg.data.get("fields", {})
    if "potential" not in f:
        return None, None, False
    e = parse_expression(f["potential"], dim)
    xs = symbols(dim)
    F = lambdify_field(e, dim)
    gF = lambdify_field([sympy.diff(e, xi) for xi in xs], dim)
    return F, gF, TSYM in e.free_symbols


def _grid(cfg):
    from .pde import Axis, Grid

    g = cfg.data["grid"]
    axes = []
    for a in g["axes"]:
        if not a["hi"] > a["lo"]:
            raise ConfigError("grid axis needs hi > lo")
        axes.append(Axis(float(a["lo"]), float(a["hi"]), int(a["n"]), bool(a.get("periodic"))))
    return Grid(axes, float(g["T"]), int(g["steps"]))


def _family(cfg, model=None):
    from .secondorder import family_from_name

    dim = _dim_of(cfg)
    name = cfg.data["family"]
    b, _ = _drift(cfg, dim)
    F, gF, tdep = _potential(cfg, dim)
    if name != "quadratic" and (b is not None or F is not None):
        raise ConfigError(f"family '{name}' takes no drift or potential fields")
    return family_from_name(name, dim=dim, model=model, b=b, F=F, grad_F=gF,
                            time_dependent=tdep or cfg.data.get("fields", {}).get("drift") is not None)


def _terminal_S(cfg, dim):
    f = cfg.data.get("fields", {})
    if "terminal_S" not in f:
        return None
    g = lambdify_field(parse_expression(f["terminal_S"], dim), dim)
    T = cfg.data["grid"]["T"]
    return lambda pts: g(T, pts)


def _spec(cfg, model):
    from .diffusion import DiffusionSpec

    dim = model.dim
    b, bex = _drift(cfg, dim)
    a, aex = _diffusion(cfg, dim)
    params = {"drift": str(bex), "diffusion": str(aex)}
    return DiffusionSpec(model, b, a, name="config", params=params)


def _times(cfg):
    return np.linspace(0.0, float(cfg.data["T"]), int(cfg.data["steps"]) + 1)


def _x0(cfg, dim):
    x0 = np.asarray(cfg.data["x0"], float)
    if x0.size != dim:
        raise ConfigError(f"x0 needs {dim} components")
    return x0


# -- output helpers ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


class _Writer:
    """Collects output files inside a single directory."""

    def __init__(self, out):
        self.out = os.path.abspath(out)
        os.makedirs(self.out, exist_ok=True)
        self.files = []

    def path(self, name):
        if os.path.basename(name) != name:
            raise ValueError("output names are plain file names")
        self.files.append(name)
        return os.path.join(self.out, name)

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def text(self, name, text):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if np.isfinite(f) else str(f)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


# -- commands ----------------------------------------------------------------------
# Each returns (residuals, checks) where checks maps a name to (value, tol, passed).

def _check(value, tol, le=True):
    ok = bool(value <= tol) if le else bool(value >= tol)
    return {"value": float(value), "tolerance": float(tol), "pass": ok}


def _cmd_simulate(cfg, w, threads):
    from .diffusion import integrate_sde

    model = _model(cfg)
    spec = _spec(cfg, model)
    times = _times(cfg)
    every = int(cfg.data.get("save_every", 1))
    save = list(range(0, len(times), every))
    if save[-1] != len(times) - 1:
        save.append(len(times) - 1)
    ens = integrate_sde(spec, _x0(cfg, model.dim), times, cfg.data["N"], cfg.seed,
                        threads=threads, save=save)
    ens.to_csv(w.path("paths.csv"))
    rows = []
    for k, t in enumerate(ens.times):
        live = ens.alive[:, k]
        m = ens.paths[live, k].mean(axis=0)
        v = ens.paths[live, k].var(axis=0)
        rows.append([t, int(live.sum()), *m, *v])
    d = model.dim
    w.csv("moments.csv", ["t", "alive"] + [f"mean{i}" for i in range(d)]
          + [f"var{i}" for i in range(d)], rows)
    tol = cfg.tolerances()
    kf = ens.metadata["killed_fraction"]
    return {"killed_fraction": kf}, {"killed_fraction": _check(kf, tol["killed_fraction"])}


def _cmd_mean_derivatives(cfg, w, threads):
    from .diffusion import generator_residual, integrate_sde

    model = _model(cfg)
    spec = _spec(cfg, model)
    times = _times(cfg)
    ens = integrate_sde(spec, _x0(cfg, model.dim), times, cfg.data["N"], cfg.seed,
                        threads=threads)
    pts = np.asarray(cfg.data["eval_points"], float)
    if pts.shape[1] != model.dim:
        raise ConfigError("eval_points have the wrong dimension")
    d = model.dim
    rows = []
    res, checks = {}, {}
    tol = cfg.tolerances()
    for t in cfg.data["times"]:
        k = int(np.argmin(np.abs(times - t)))
        tk = times[min(k, len(times) - 2)]
        r = generator_residual(ens, spec, tk, pts, cfg.data.get("bandwidth"))
        f = r.field
        for g in range(len(f.points)):
            rows.append([tk, *f.points[g], *f.DX[g], *f.QX[g].ravel(), *f.DnablaX[g],
                         f.n_eff[g], bool(f.mask[g])])
        key = f"t={_fmt(tk)}"
        res[key] = {"drift": r.drift_residual, "drift_se": r.drift_se,
                    "diffusion": r.diffusion_residual, "diffusion_se": r.diffusion_se}
        k_se = tol["se_multiple"]
        checks[key + ":drift"] = _check(r.drift_residual, k_se * r.drift_se)
        checks[key + ":diffusion"] = _check(r.diffusion_residual, k_se * r.diffusion_se)
    hdr = (["t"] + [f"x{i}" for i in range(d)] + [f"D{i}" for i in range(d)]
           + [f"Q{i}{j}" for i in range(d) for j in range(d)] + [f"Dnabla{i}" for i in range(d)]
           + ["n_eff", "usable"])
    w.csv("mean_derivatives.csv", hdr, rows)
    return res, checks


def _write_field(w, name, gf, every=1):
    w.text(name, gf.to_csv(None, every=every))
    w.text(name + ".json", json.dumps(_jsonable(gf.header()), indent=2, sort_keys=True) + "\n")


def _cmd_bridge(cfg, w, threads):
    from .mechanics import bernstein_bridge, bridge_marginals
    from .pde import gaussian_surrogate, hjb_residual, moments

    grid = _grid(cfg)
    model = _model(cfg)
    dim = grid.dim
    b, _ = _drift(cfg, dim)
    F, _, _ = _potential(cfg, dim)
    term = cfg.data["terminal"]
    uT = gaussian_surrogate(grid, term["center"], term.get("width"))
    x0 = _x0(cfg, dim)
    run = bernstein_bridge(model, b, F, x0, None, grid, N=cfg.data["N"], seed=cfg.seed,
                           u_T=uT, threads=threads, positivity_floor=term.get("floor", 1e-10))
    hf = run.field
    mu = bridge_marginals(run, gaussian_surrogate(grid, x0), b=b)
    every = max(1, grid.steps // 16)
    _write_field(w, "drift.csv", hf.p, every)
    _write_field(w, "marginal.csv", mu, every)
    ens = run.ensemble
    rows = []
    for k in range(0, len(ens.times), every):
        t = ens.times[k]
        live = ens.alive[:, k]
        m, c = moments(mu, grid.times[int(np.argmin(np.abs(grid.times - t)))])
        rows.append([t, *ens.paths[live, k].mean(0), *ens.paths[live, k].var(0), *m,
                     *np.diag(c)])
    w.csv("moments.csv", ["t"] + [f"ens_mean{i}" for i in range(dim)]
          + [f"ens_var{i}" for i in range(dim)] + [f"born_mean{i}" for i in range(dim)]
          + [f"born_var{i}" for i in range(dim)], rows)

    def H(x, p, o, t):
        bb = 0.0 if b is None else np.sum(np.asarray(b(t, x), float) * p, -1)
        FF = 0.0 if F is None else np.asarray(F(t, x), float)
        return 0.5 * np.sum(p * p, -1) + bb + FF + 0.5 * np.trace(o, axis1=-2, axis2=-1)

    radius = cfg.data.get("region", {}).get("radius")
    t_max = cfg.data.get("region", {}).get("t_max", 0.9 * grid.T)
    region = None if radius is None else (lambda x: np.linalg.norm(x, axis=-1) <= radius)
    hj = hjb_residual(hf.S, H, region=region, t_range=(0.0, t_max))
    md = hf.maxwell_defect()
    tol = cfg.tolerances()
    res = {"hjb_sup": hj.sup, "maxwell_defect": md,
           "killed_fraction": ens.metadata["killed_fraction"]}
    return res, {"hjb": _check(hj.sup, tol["hjb"]), "maxwell": _check(md, tol["maxwell"])}


def _hjb_setup(cfg):
    from .mechanics import bernstein_bridge

    grid = _grid(cfg)
    fam = _family(cfg, _model(cfg))
    eps = float(cfg.data.get("eps", 1.0))
    run = bernstein_bridge(fam.model, fam.b if fam.has_drift else None, fam.F, None,
                           _terminal_S(cfg, grid.dim), grid, eps=eps, simulate=False)
    return grid, fam, eps, run


def _region(cfg):
    radius = cfg.data.get("region", {}).get("radius")
    return None if radius is None else (lambda x: np.linalg.norm(x, axis=-1) <= radius)


def _cmd_hjb(cfg, w, threads):
    from .pde import hjb_residual

    grid, fam, eps, run = _hjb_setup(cfg)

    def H(x, p, o, t):
        return (0.5 * np.sum(p * p, -1) + np.sum(np.asarray(fam.b(t, x), float) * p, -1)
                + np.asarray(fam.F(t, x), float) + 0.5 * eps * np.trace(o, axis1=-2, axis2=-1))

    hj = hjb_residual(run.field.S, H, region=_region(cfg))
    every = max(1, grid.steps // 16)
    _write_field(w, "S.csv", run.field.S, every)
    _write_field(w, "hjb_residual.csv", hj.field.map(lambda v: np.where(hj.mask, v, np.nan),
                                                     "hjb_residual"), every)
    tol = cfg.tolerances()
    return {"sup": hj.sup, "l2": hj.l2}, {"hjb": _check(hj.sup, tol["hjb"])}


def _cmd_hamilton(cfg, w, threads):
    from .mechanics import energy_conservation_check, newton_residual, stochastic_hamilton_run
    from .secondorder import SecondOrderHamiltonian

    grid = _grid(cfg)
    fam = _family(cfg, _model(cfg))
    eps = float(cfg.data.get("eps", 1.0))
    H = SecondOrderHamiltonian(fam.hamiltonian(), fam.model, eps)
    every = int(cfg.data.get("save_every", max(1, grid.steps // 10)))
    base = list(range(0, grid.steps, every))
    save = sorted(set(base + [k + 1 for k in base] + [grid.steps]))
    run = stochastic_hamilton_run(H, _x0(cfg, grid.dim), _terminal_S(cfg, grid.dim), grid,
                                  N=cfg.data["N"], seed=cfg.seed, threads=threads, save=save)
    ens = run.ensemble
    pairs = [(save.index(k), save.index(k + 1)) for k in base if k > 0]

    def force(t, x):
        return -fam.grad_F(t, x)

    nr = newton_residual(run, force, pairs=pairs, bandwidth=cfg.data.get("bandwidth"))
    keep = [save.index(k) for k in base] + [len(save) - 1]
    sub = type(run)(type(ens)(ens.times[keep], ens.paths[:, keep], ens.alive[:, keep], ens.seed,
                              ens.spec_digest, ens.metadata), run.p[:, keep], run.o[:, keep],
                    run.field, run.spec, run.hamiltonian)
    er = energy_conservation_check(sub, k_sigma=cfg.tolerances()["energy_sigma"])
    d = grid.dim
    w.csv("newton.csv", ["x" + str(i) for i in range(d)] + [f"Dp{i}" for i in range(d)]
          + [f"force{i}" for i in range(d)] + [f"se{i}" for i in range(d)] + ["usable"],
          [[*nr.points[g], *nr.Dp[g], *nr.force[g], *nr.se[g], bool(nr.mask[g])]
           for g in range(len(nr.points))])
    w.csv("energy.csv", ["t", "mean_H", "se"], list(zip(er.times, er.mean, er.se)))
    tol = cfg.tolerances()
    res = {"newton_sup": nr.sup, "energy_slope": er.slope, "energy_slope_se": er.slope_se,
           "energy_max_deviation": er.max_deviation}
    if d == 1:
        res["newton_slope"] = nr.slope
    checks = {"newton": _check(nr.sup, tol["newton"]),
              "energy": {"value": er.slope, "tolerance": tol["energy_sigma"] * er.slope_se,
                         "pass": er.conserved}}
    return res, checks


def _vf_exprs(cfg, dim):
    vf = cfg.data["vector_field"]
    V0 = parse_expression(vf["V0"], dim)
    if V0.free_symbols - {TSYM}:
        raise ConfigError("V0 may depend on t only")
    V = _vector_expr(vf["V"], dim, "vector_field.V")
    Phi = parse_expression(vf["Phi"], dim) if "Phi" in vf else None
    return V0, V, Phi


def _cmd_noether(cfg, w, threads):
    from .mechanics import NoetherData, noether_residual

    grid, fam, eps, run = _hjb_setup(cfg)
    V0e, Ve, Phie = _vf_exprs(cfg, grid.dim)
    f0 = sympy.lambdify(TSYM, V0e, "numpy")
    nd = NoetherData(lambda t: float(f0(t)), lambdify_field(Ve, grid.dim),
                     None if Phie is None else lambdify_field(Phie, grid.dim))
    tol = cfg.tolerances()
    res = noether_residual(nd, fam.lagrangian(), run.field.S, model=fam.model, eps=eps,
                           hjb_tol=tol["hjb"], region=_region(cfg))
    every = max(1, grid.steps // 16)
    _write_field(w, "charge.csv", res.J, every)
    r = res.residual
    _write_field(w, "noether_residual.csv",
                 r.map(lambda v: np.where(r.valid, v, np.nan), "noether_residual"), every)
    return ({"sup": res.sup, "hjb_sup": res.hjb_sup},
            {"noether": _check(res.sup, tol["noether"])})


def _cmd_symmetry(cfg, w, threads):
    from .symmetry import GeneratorFields, ProjectableVectorField, classify, default_lattice

    dim = len(cfg.data["vector_field"]["V"])
    V0e, Ve, _ = _vf_exprs(cfg, dim)
    f = cfg.data.get("fields", {})
    drift = f.get("drift", ["0"] * dim)
    diff = f.get("diffusion", [["1" if i == j else "0" for j in range(dim)] for i in range(dim)])
    _vector_expr(drift, dim, "drift")
    spec = GeneratorFields.from_expressions(drift, diff, dim)
    V = ProjectableVectorField.from_expressions(V0e, Ve, dim)
    s = cfg.data["sample"]
    pts, times = default_lattice(s["lo"], s["hi"], dim, s.get("n", 32), s.get("T", 1.0),
                                 s.get("nt", 16))
    tol = cfg.tolerances()
    c = classify(V, spec, pts, times, tol["relative"])
    r = c.residual
    rows = []
    for k, t in enumerate(times):
        for g in range(len(pts)):
            rows.append([t, *pts[g], np.max(np.abs(r.r1[k, g])), np.max(np.abs(r.r2[k, g]))])
    w.csv("determining_residual.csv", ["t"] + [f"x{i}" for i in range(dim)] + ["r1", "r2"], rows)
    res = {"r1_max": r.r1_max, "r2_max": r.r2_max, "r_max": r.r_max, "scale": r.scale,
           "symmetry": c.symmetry}
    return res, {"symmetry": _check(r.r_max, c.tol)}


def _cmd_transport(cfg, w, threads):
    from .diffusion import integrate_sde
    from .transport import damped_transport, parallel_transport

    model = _model(cfg)
    spec = _spec(cfg, model)
    times = _times(cfg)
    n = int(cfg.data.get("paths", 1))
    ens = integrate_sde(spec, _x0(cfg, model.dim), times, n, cfg.seed, threads=threads)
    v0 = np.asarray(cfg.data["v0"], float)
    cov = bool(cfg.data.get("covector", False))
    damped = bool(cfg.data.get("damped", False))
    worst = 0.0
    rows = []
    aborted = 0
    for i in range(n):
        path = ens.paths[i]
        if damped:
            fr = damped_transport(model, path, v0, covector=cov, times=times)
            partner = damped_transport(model, path, _dual(model, path[0], v0, cov),
                                       covector=not cov, times=times)
            pair = np.einsum("ki,ki->k", fr.values, partner.values[:len(fr.values)])
            dev = np.abs(pair - pair[0])
        else:
            fr = parallel_transport(model, path, v0, covector=cov, times=times)
            nrm = fr.norms(model)
            dev = np.abs(nrm - nrm[0])
        aborted += int(fr.aborted)
        worst = max(worst, float(np.max(dev)))
        nr = fr.norms(model)
        for k in range(len(fr.values)):
            rows.append([i, k, fr.times[k], *fr.values[k], nr[k]])
    d = model.dim
    w.csv("transport.csv", ["path", "step", "t"] + [f"v{i}" for i in range(d)] + ["norm"], rows)
    tol = cfg.tolerances()
    return ({"invariant_deviation": worst, "aborted": aborted},
            {"invariant": _check(worst, tol["invariant"])})


def _dual(model, x, v, covector):
    """Metric dual, used as the pairing partner."""
    G = model.inverse_metric(x) if covector else model.metric(x)
    return G @ v


def _cmd_legendre(cfg, w, threads):
    from .secondorder import legendre, legendre_inverse

    fam = _family(cfg, _model(cfg) if "model" in cfg.data else None)
    L0, H0 = fam.lagrangian(), fam.hamiltonian()
    d = fam.dim
    rows = []
    worst = 0.0
    for pt in cfg.data["points"]:
        x = np.asarray(pt["x"], float)
        v = np.asarray(pt["xdot"], float)
        if x.size != d or v.size != d:
            raise ConfigError("legendre points have the wrong dimension")
        t = float(pt.get("t", 0.0))
        p, H = legendre(L0, x, v, t)
        v2, L = legendre_inverse(H0, x, p, t)
        err = max(float(np.max(np.abs(v2 - v))), abs(float(L - L0(t, x, v))))
        worst = max(worst, err)
        rows.append([t, *x, *v, *p, H, L])
    w.csv("legendre.csv", ["t"] + [f"x{i}" for i in range(d)] + [f"xdot{i}" for i in range(d)]
          + [f"p{i}" for i in range(d)] + ["H0", "L0"], rows)
    tol = cfg.tolerances()
    return {"roundtrip": worst}, {"roundtrip": _check(worst, tol["roundtrip"])}


def _cmd_canonical(cfg, w, threads):
    from .mechanics import CANONICAL_EXAMPLES, canonical_transform_check

    names = cfg.data.get("examples", list(CANONICAL_EXAMPLES))
    n = int(cfg.data.get("samples", 100))
    tol = cfg.tolerances()
    res, checks, rows = {}, {}, []
    for name in names:
        r = canonical_transform_check(CANONICAL_EXAMPLES[name](), n=n, seed=cfg.seed)
        res[name] = r
        for rel, v in r.items():
            rows.append([name, rel, v])
            checks[f"{name}:{rel}"] = _check(v, tol["relation"])
    with open(w.path("canonical.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write("example,relation,max_residual\n")
        for name, rel, v in rows:
            fh.write(f"{name},{rel},{_fmt(v)}\n")
    return res, checks


HANDLERS = {
    "simulate": _cmd_simulate,
    "mean-derivatives": _cmd_mean_derivatives,
    "bridge": _cmd_bridge,
    "hjb": _cmd_hjb,
    "hamilton": _cmd_hamilton,
    "noether": _cmd_noether,
    "symmetry": _cmd_symmetry,
    "transport": _cmd_transport,
    "legendre": _cmd_legendre,
    "canonical-check": _cmd_canonical,
}


def dispatch(cfg, out=None, threads=None):
    """Run ``cfg`` and write ``run.json`` plus CSVs into ``out``; returns the exit code."""
    out = out if out is not None else cfg.out
    threads = cfg.threads if threads is None else threads
    if out is None:
        raise ConfigError("no output directory")
    w = _Writer(out)
    summary = {
        "schema_version": RUN_SCHEMA_VERSION,
        "version": __version__,
        "command": cfg.command,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "inputs": cfg.data,
        "tolerances": cfg.tolerances(),
    }
    try:
        res, checks = HANDLERS[cfg.command](cfg, w, int(threads))
        code = EXIT_OK if all(c["pass"] for c in checks.values()) else EXIT_TOLERANCE
        summary.update(residuals=res, checks=checks, status="ok" if code == 0 else
                       "tolerance-failed")
    except ConfigError as exc:
        code = EXIT_CONFIG
        summary.update(status="config-error", error=str(exc), messages=exc.messages)
    except (StogeoError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code = EXIT_NUMERIC
        summary.update(status="numerical-error", error=f"{type(exc).__name__}: {exc}")
    summary["exit_code"] = code
    summary["outputs"] = sorted(set(w.files))
    with open(os.path.join(w.out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="stogeo", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--version", action="version", version=f"stogeo {__version__}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.command)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.data = copy.deepcopy(cfg.data)
            cfg.data["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError("threads must be at least 1")
    except ConfigError as exc:
        print("stogeo: invalid configuration", file=sys.stderr)
        for m in exc.messages:
            print(f"  {m}", file=sys.stderr)
        return EXIT_CONFIG
    code = dispatch(cfg, args.out, args.threads)
    if code == EXIT_CONFIG or code == EXIT_NUMERIC:
        with open(os.path.join(args.out, "run.json"), encoding="utf-8") as fh:
            print(f"stogeo: {json.load(fh).get('error')}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
