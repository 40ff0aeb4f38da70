"""Scenario documents: TOML parsing, validation and flow/vielbein presets.

Grammar (all keys optional unless marked)::

    name = "t2-gradient"
    temperature = 1.0            # or temperatures = [0.2, 0.5, ...] for sweeps
    n_cut = 8
    t_grid = [0.5, 1, 2, 4]
    seed = 0
    convention = "stratonovich"  # or "ito"

    [manifold]                   # required
    kind = "torus"               # torus | line | sphere
    dim = 2                      # torus only
    half_width = 6.0             # line only
    grid_count = 200             # line only

    [flow]                       # required
    preset = "torus-gradient"
    amplitude = 1.0              # torus-gradient, circle-sin, circle-sincos
    omega = [1.0, 0.5]           # torus-rotation
    A = 1.0; B = 1.0; C = 1.0    # abc
    a = 1.0                      # line-double-well
    terms = [{component = 0, wave = [1, 0], re = 0.0, im = -0.5}]   # trig

    [vielbein]
    preset = "identity"          # identity | constant | diagonal | shear
    alpha = 0.3                  # diagonal, shear (|alpha| <= 0.5)
    trig = "sin"                 # diagonal: sin | cos
    matrix = [[1.0, 0.0], [0.0, 1.0]]   # constant

    [solver]
    refine = true                # also decompose at n_cut + 2 (line: 2 * grid_count)
    convergence_tol = 1e-6
    backward_tol = 1e-8

    [mc]
    integrators = ["heun", "euler_maruyama"]
    step = 1e-3
    burn_in_steps = 33334
    sample_steps = 10000
    thin = 100
    trajectories = 10000
    bins = 32
    gaussian = "inverse"

    [det]
    t_list = [0.5, 1, 2, 4]
    seed_grid_density = 8
    z_time = 8.0
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .analysis import DEFAULT_T_GRID
from .forms import Line, Torus
from .geometry import TrigPolyField

MAX_ALPHA = 0.5

FLOW_PRESETS = ("zero", "circle-sin", "circle-sincos", "torus-gradient", "torus-rotation", "abc",
                "sphere-height", "line-double-well", "trig")
VIELBEIN_PRESETS = ("identity", "constant", "diagonal", "shear")

_SCHEMA = {
    "name": str,
    "temperature": float,
    "temperatures": list,
    "n_cut": int,
    "t_grid": list,
    "seed": int,
    "convention": str,
    "manifold": {"kind": str, "dim": int, "half_width": float, "grid_count": int},
    "flow": {"preset": str, "amplitude": float, "omega": list, "A": float, "B": float, "C": float,
             "a": float, "terms": list},
    "vielbein": {"preset": str, "alpha": float, "trig": str, "matrix": list},
    "solver": {"refine": bool, "convergence_tol": float, "backward_tol": float},
    "mc": {"integrators": list, "step": float, "burn_in_steps": int, "sample_steps": int, "thin": int,
           "trajectories": int, "bins": int, "gaussian": str, "chunk": int},
    "det": {"t_list": list, "seed_grid_density": int, "z_time": float},
}

_DEFAULTS = {
    "name": "scenario",
    "n_cut": 8,
    "t_grid": list(DEFAULT_T_GRID),
    "seed": 0,
    "convention": "stratonovich",
    "vielbein": {"preset": "identity", "alpha": 0.0, "trig": "sin"},
    "solver": {"refine": True, "convergence_tol": 1e-6, "backward_tol": 1e-8},
    "mc": {"integrators": ["heun", "euler_maruyama"], "step": 1e-3, "burn_in_steps": 0, "sample_steps": 10000,
           "thin": 100, "trajectories": 10000, "bins": 32, "gaussian": "inverse", "chunk": 2000},
    "det": {"t_list": [0.5, 1.0, 2.0, 4.0], "seed_grid_density": 8, "z_time": 8.0},
}


class ScenarioError(ValueError):
    """Schema or range violation; the message starts with the field path."""


@dataclass
class Scenario:
    manifold: str
    dim: int
    flow: dict
    vielbein: dict
    temperatures: list
    n_cut: int = 8
    half_width: float = 6.0
    grid_count: int = 200
    t_grid: list = field(default_factory=lambda: list(DEFAULT_T_GRID))
    seed: int = 0
    convention: str = "stratonovich"
    solver: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    det: dict = field(default_factory=dict)
    name: str = "scenario"
    sweep: bool = False

    @property
    def temperature(self) -> float:
        return self.temperatures[0]

    def manifold_object(self, refined: bool = False):
        if self.manifold == "torus":
            return Torus(self.dim, self.n_cut + (2 if refined else 0))
        if self.manifold == "line":
            return Line(self.half_width, self.grid_count * (2 if refined else 1))
        raise ScenarioError("manifold.kind: sphere scenarios have no spectral basis (det-trace only)")

    def drift(self):
        return flow_field(self.flow, self.manifold, self.dim)

    def noise(self):
        return vielbein_field(self.vielbein, self.manifold, self.dim)

    def echo(self) -> str:
        lines = [f"name = {self.name}", f"manifold = {self.manifold}", f"dim = {self.dim}"]
        if self.manifold == "torus":
            lines.append(f"n_cut = {self.n_cut}")
        elif self.manifold == "line":
            lines += [f"half_width = {self.half_width!r}", f"grid_count = {self.grid_count}"]
        lines.append("flow = " + _inline(self.flow))
        lines.append("vielbein = " + _inline(self.vielbein))
        lines.append("temperatures = " + ",".join(repr(t) for t in self.temperatures))
        lines.append("t_grid = " + ",".join(repr(t) for t in self.t_grid))
        lines.append(f"convention = {self.convention}")
        lines.append(f"seed = {self.seed}")
        return "\n".join(lines)


def _inline(d: dict) -> str:
    return "{" + ", ".join(f"{k}: {d[k]!r}" for k in sorted(d)) + "}"


def _check_types(doc: dict, schema: dict, path: str = "") -> None:
    for key, val in doc.items():
        where = f"{path}{key}"
        if key not in schema:
            raise ScenarioError(f"{where}: unknown key")
        want = schema[key]
        if isinstance(want, dict):
            if not isinstance(val, dict):
                raise ScenarioError(f"{where}: expected a table")
            _check_types(val, want, where + ".")
        elif want is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ScenarioError(f"{where}: expected a number")
        elif want is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ScenarioError(f"{where}: expected an integer")
        elif not isinstance(val, want):
            raise ScenarioError(f"{where}: expected {want.__name__}")


def _merge(defaults: dict, doc: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _positive_list(vals, where: str) -> list:
    try:
        out = [float(v) for v in vals]
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a list of numbers") from None
    if not out or any(v <= 0 for v in out):
        raise ScenarioError(f"{where}: values must be positive")
    return out


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a TOML scenario document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"<document>: {exc}") from None
    _check_types(doc, _SCHEMA)
    for req in ("manifold", "flow"):
        if req not in doc:
            raise ScenarioError(f"{req}: required table missing")
    if "temperature" in doc and "temperatures" in doc:
        raise ScenarioError("temperatures: give either temperature or temperatures")
    cfg = _merge(_DEFAULTS, doc)
    m = cfg["manifold"]
    kind = m.get("kind")
    if kind not in ("torus", "line", "sphere"):
        raise ScenarioError(f"manifold.kind: expected torus, line or sphere, got {kind!r}")
    if kind == "torus":
        dim = m.get("dim", 1)
        if dim not in (1, 2, 3):
            raise ScenarioError(f"manifold.dim: torus dimension must be 1, 2 or 3, got {dim}")
        for bad in ("half_width", "grid_count"):
            if bad in m:
                raise ScenarioError(f"manifold.{bad}: only valid for a line")
    else:
        dim = 1 if kind == "line" else 2
        if "dim" in m and m["dim"] != dim:
            raise ScenarioError(f"manifold.dim: {kind} has dimension {dim}")
    half_width = float(m.get("half_width", 6.0))
    grid_count = int(m.get("grid_count", 200))
    if kind == "line":
        if half_width <= 0:
            raise ScenarioError("manifold.half_width: must be positive")
        if grid_count < 16:
            raise ScenarioError("manifold.grid_count: must be at least 16")
    if cfg["n_cut"] <= 0:
        raise ScenarioError("n_cut: must be positive")
    if "temperatures" in cfg:
        temps = _positive_list(cfg["temperatures"], "temperatures")
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ScenarioError("temperatures: must be increasing")
        sweep = True
    else:
        t = float(cfg.get("temperature", 1.0))
        if t <= 0:
            raise ScenarioError("temperature: must be positive")
        temps, sweep = [t], False
    t_grid = _positive_list(cfg["t_grid"], "t_grid")
    if cfg["convention"] not in ("stratonovich", "ito"):
        raise ScenarioError("convention: expected stratonovich or ito")
    if not 0 <= cfg["seed"] < 2 ** 64:
        raise ScenarioError("seed: must be an unsigned 64-bit integer")
    _positive_list(cfg["det"]["t_list"], "det.t_list")
    mc = cfg["mc"]
    for key in ("step",):
        if mc[key] <= 0:
            raise ScenarioError(f"mc.{key}: must be positive")
    for key in ("sample_steps", "thin", "trajectories", "bins", "chunk"):
        if mc[key] <= 0:
            raise ScenarioError(f"mc.{key}: must be positive")
    if mc["burn_in_steps"] < 0:
        raise ScenarioError("mc.burn_in_steps: must be non-negative")
    for name in mc["integrators"]:
        if name not in ("heun", "euler_maruyama"):
            raise ScenarioError(f"mc.integrators: unknown integrator {name!r}")
    if mc["gaussian"] not in ("inverse", "polar"):
        raise ScenarioError("mc.gaussian: expected inverse or polar")
    sc = Scenario(kind, dim, dict(cfg["flow"]), dict(cfg["vielbein"]), temps, n_cut=cfg["n_cut"],
                  half_width=half_width, grid_count=grid_count, t_grid=t_grid, seed=int(cfg["seed"]),
                  convention=cfg["convention"], solver=cfg["solver"], mc=mc, det=cfg["det"],
                  name=cfg["name"], sweep=sweep)
    # build once so preset range errors surface at parse time
    flow_field(sc.flow, kind, dim)
    vielbein_field(sc.vielbein, kind, dim)
    return sc


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# presets

def _sin(dim: int, comp: int, axis: int, amp: float, harmonic: int = 1):
    n = [0] * dim
    n[axis] = harmonic
    m = [-v for v in n]
    return [((comp,), tuple(n), -0.5j * amp), ((comp,), tuple(m), 0.5j * amp)]


def _cos(dim: int, comp: int, axis: int, amp: float, harmonic: int = 1):
    n = [0] * dim
    n[axis] = harmonic
    m = [-v for v in n]
    return [((comp,), tuple(n), 0.5 * amp), ((comp,), tuple(m), 0.5 * amp)]


def _need(flow: dict, preset: str, allowed) -> None:
    for k in flow:
        if k != "preset" and k not in allowed:
            raise ScenarioError(f"flow.{k}: not a parameter of preset {preset}")


def flow_field(flow: dict, manifold: str, dim: int):
    """Drift vector field for a flow preset (TrigPolyField, Polynomial or 'sphere-height')."""
    preset = flow.get("preset")
    if preset not in FLOW_PRESETS:
        raise ScenarioError(f"flow.preset: unknown preset {preset!r}")
    if manifold == "sphere":
        if preset != "sphere-height":
            raise ScenarioError("flow.preset: sphere manifold supports only sphere-height")
        _need(flow, preset, ())
        return "sphere-height"
    if preset == "sphere-height":
        raise ScenarioError("flow.preset: sphere-height needs manifold.kind = sphere")
    if manifold == "line":
        if preset == "zero":
            _need(flow, preset, ())
            return np.polynomial.Polynomial([0.0])
        if preset != "line-double-well":
            raise ScenarioError(f"flow.preset: {preset} is not defined on a line")
        _need(flow, preset, ("a",))
        a = float(flow.get("a", 1.0))
        if a <= 0:
            raise ScenarioError("flow.a: must be positive")
        # F = -W' with W = (x^2 - a^2)^2
        return np.polynomial.Polynomial([0.0, 4 * a * a, 0.0, -4.0])
    if preset == "line-double-well":
        raise ScenarioError("flow.preset: line-double-well needs manifold.kind = line")
    terms = []
    if preset == "zero":
        _need(flow, preset, ())
    elif preset in ("circle-sin", "circle-sincos"):
        _need(flow, preset, ("amplitude",))
        if dim != 1:
            raise ScenarioError(f"flow.preset: {preset} needs a one-dimensional torus")
        amp = float(flow.get("amplitude", 1.0))
        # sin x cos x = sin(2x) / 2
        terms = _sin(1, 0, 0, amp) if preset == "circle-sin" else _sin(1, 0, 0, 0.5 * amp, 2)
    elif preset == "torus-gradient":
        _need(flow, preset, ("amplitude",))
        amp = float(flow.get("amplitude", 1.0))
        # W = amp * sum_i cos x_i, F = -grad W
        for i in range(dim):
            terms += _sin(dim, i, i, amp)
    elif preset == "torus-rotation":
        _need(flow, preset, ("omega",))
        omega = flow.get("omega", [1.0] + [np.sqrt(2.0) - 1.0] * (dim - 1))
        if len(omega) != dim:
            raise ScenarioError(f"flow.omega: expected {dim} components")
        terms = [((i,), (0,) * dim, complex(float(w))) for i, w in enumerate(omega)]
    elif preset == "abc":
        _need(flow, preset, ("A", "B", "C"))
        if dim != 3:
            raise ScenarioError("flow.preset: abc needs a three-dimensional torus")
        a, b, c = (float(flow.get(k, 1.0)) for k in ("A", "B", "C"))
        # (A sin z + C cos y, B sin x + A cos z, C sin y + B cos x)
        terms = (_sin(3, 0, 2, a) + _cos(3, 0, 1, c) + _sin(3, 1, 0, b) + _cos(3, 1, 2, a)
                 + _sin(3, 2, 1, c) + _cos(3, 2, 0, b))
    elif preset == "trig":
        _need(flow, preset, ("terms",))
        raw = flow.get("terms")
        if not raw:
            raise ScenarioError("flow.terms: trig preset needs a non-empty term list")
        for i, t in enumerate(raw):
            where = f"flow.terms[{i}]"
            if not isinstance(t, dict) or set(t) - {"component", "wave", "re", "im"}:
                raise ScenarioError(f"{where}: expected a table with component, wave, re, im")
            comp, wave = t.get("component"), t.get("wave")
            if not isinstance(comp, int) or not 0 <= comp < dim:
                raise ScenarioError(f"{where}.component: must be an integer in [0, {dim})")
            if not isinstance(wave, list) or len(wave) != dim or not all(isinstance(v, int) for v in wave):
                raise ScenarioError(f"{where}.wave: expected {dim} integers")
            terms.append(((comp,), tuple(wave), complex(float(t.get("re", 0.0)), float(t.get("im", 0.0)))))
        field_ = TrigPolyField.from_terms(dim, terms, shape=(dim,))
        if not field_.is_real():
            raise ScenarioError("flow.terms: coefficients must satisfy c(-n) = conj(c(n))")
        return field_
    if not terms:
        return TrigPolyField.zeros(dim, (dim,))
    return TrigPolyField.from_terms(dim, terms, shape=(dim,))


def vielbein_field(vb: dict, manifold: str, dim: int):
    preset = vb.get("preset", "identity")
    if preset not in VIELBEIN_PRESETS:
        raise ScenarioError(f"vielbein.preset: unknown preset {preset!r}")
    alpha = float(vb.get("alpha", 0.0))
    if preset in ("diagonal", "shear") and abs(alpha) > MAX_ALPHA:
        raise ScenarioError(f"vielbein.alpha: {alpha} outside the validity range |alpha| <= {MAX_ALPHA}")
    trig = vb.get("trig", "sin")
    if trig not in ("sin", "cos"):
        raise ScenarioError("vielbein.trig: expected sin or cos")
    if manifold == "sphere":
        return None
    if manifold == "line":
        if preset == "identity":
            return 1.0
        if preset == "constant":
            mat = np.asarray(vb.get("matrix", [[1.0]]), float)
            if mat.shape != (1, 1) or mat[0, 0] <= 0:
                raise ScenarioError("vielbein.matrix: line needs [[c]] with c > 0")
            return float(mat[0, 0])
        raise ScenarioError(f"vielbein.preset: {preset} is not defined on a line")
    if preset == "identity":
        return TrigPolyField.constant(np.eye(dim), dim)
    if preset == "constant":
        if "matrix" not in vb:
            raise ScenarioError("vielbein.matrix: required for the constant preset")
        mat = np.asarray(vb["matrix"], float)
        if mat.shape != (dim, dim):
            raise ScenarioError(f"vielbein.matrix: expected {dim}x{dim}")
        if abs(np.linalg.det(mat)) < 1e-10:
            raise ScenarioError("vielbein.matrix: singular")
        return TrigPolyField.constant(mat, dim)
    terms = [((i, i), (0,) * dim, 1.0) for i in range(dim)]
    if preset == "diagonal":
        # e^i_i = 1 + alpha * trig(x_{i+1}), indices cyclic (D = 1: 1 + alpha * trig(x))
        make = _sin if trig == "sin" else _cos
        for i in range(dim):
            for comp, n, c in make(dim, 0, (i + 1) % dim, alpha):
                terms.append(((i, i), n, c))
    else:
        if dim < 2:
            raise ScenarioError("vielbein.preset: shear needs dimension >= 2")
        for comp, n, c in _sin(dim, 0, 1, alpha):
            terms.append(((0, 1), n, c))
    return TrigPolyField.from_terms(dim, terms, shape=(dim, dim))
