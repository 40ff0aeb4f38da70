"""Deterministic flow maps, fixed points and weighted traces of the transfer operator."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .geometry import TrigPolyField

HORIZON = 1e3


class FlowError(RuntimeError):
    pass


class NonHyperbolicError(ValueError):
    pass


class VectorField:
    """Flow field with value and Jacobian on batches of points (P, D)."""

    dim: int
    periodic: bool = True

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sup_norm(self) -> float:
        raise NotImplementedError


class TrigVectorField(VectorField):
    """Real trigonometric-polynomial field evaluated from its nonzero terms."""

    def __init__(self, field: TrigPolyField):
        if field.shape != (field.dim,):
            raise FlowError("flow field must have one component per dimension")
        if not field.is_real(1e-12):
            raise FlowError("flow field is not real")
        self.dim = field.dim
        self.field = field
        sup = field.support()
        self.waves = sup.astype(float)  # (S, D)
        self.coef = np.stack([[field.coefficient(n, (i,)) for i in range(self.dim)] for n in sup]) \
            if len(sup) else np.zeros((0, self.dim), complex)  # (S, D)

    def _phase(self, x):
        return np.exp(1j * (np.atleast_2d(x) @ self.waves.T))  # (P, S)

    def __call__(self, x):
        return (self._phase(x) @ self.coef).real

    def jacobian(self, x):
        ph = self._phase(x)  # (P, S)
        # J[p, i, j] = Re sum_s c_s^i (i n_s^j) e^{i n_s x_p}
        return np.einsum("ps,si,sj->pij", ph, self.coef, 1j * self.waves).real

    def sup_norm(self) -> float:
        n = max(2 * self.field.harmonic + 1, 33) | 1
        vals = self.field.samples(n).real
        return float(np.max(np.linalg.norm(vals.reshape(self.dim, -1), axis=0), initial=0.0))


class LinearChartField(VectorField):
    """w' = a w in a chart of R^D (used for the stereographic sphere charts)."""

    periodic = False

    def __init__(self, a: float, dim: int = 2):
        self.a = float(a)
        self.dim = dim

    def __call__(self, x):
        return self.a * np.atleast_2d(x)

    def jacobian(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.a * np.eye(self.dim), (x.shape[0], self.dim, self.dim)).copy()

    def sup_norm(self) -> float:
        return abs(self.a)


def as_vector_field(F) -> VectorField:
    if isinstance(F, VectorField):
        return F
    if isinstance(F, TrigPolyField):
        return TrigVectorField(F)
    raise FlowError(f"cannot use {type(F).__name__} as a flow field")


def _step_count(F: VectorField, t: float, step: float | None) -> tuple[int, float]:
    if abs(t) > HORIZON:
        raise FlowError(f"|t| = {abs(t)} exceeds the horizon cap {HORIZON}")
    hmax = 1e-3 / max(1.0, F.sup_norm())
    h = min(step or hmax, hmax)
    if h < 1e-12:
        raise FlowError("step size underflow")
    n = max(1, int(np.ceil(abs(t) / h - 1e-12)))
    return n, t / n


def integrate(F, x0, t: float, with_tangent: bool = True, step: float | None = None):
    """RK4 for the state and the variational equation dM/dt = J(x) M.

    Returns (x_t, M_t) for a batch of points; states are not wrapped.
    """
    F = as_vector_field(F)
    x = np.array(np.atleast_2d(x0), dtype=float)
    p, d = x.shape
    if d != F.dim:
        raise FlowError("point dimension does not match the field")
    m = np.broadcast_to(np.eye(d), (p, d, d)).copy() if with_tangent else None
    n, h = _step_count(F, t, step)

    def rhs(xs, ms):
        fx = F(xs)
        if ms is None:
            return fx, None
        return fx, F.jacobian(xs) @ ms

    for _ in range(n):
        k1, l1 = rhs(x, m)
        k2, l2 = rhs(x + 0.5 * h * k1, None if m is None else m + 0.5 * h * l1)
        k3, l3 = rhs(x + 0.5 * h * k2, None if m is None else m + 0.5 * h * l2)
        k4, l4 = rhs(x + h * k3, None if m is None else m + h * l3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if m is not None:
            m = m + h / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
    if not np.all(np.isfinite(x)) or (m is not None and not np.all(np.isfinite(m))):
        raise FlowError("non-finite state during integration")
    return x, m


def wrap(x):
    """Map angles to [0, 2 pi)."""
    x = np.mod(x, 2 * np.pi)
    return np.where(2 * np.pi - x < 1e-12, 0.0, x)


def wrap_diff(x):
    """Map differences to (-pi, pi]."""
    return -np.mod(-np.asarray(x) + np.pi, 2 * np.pi) + np.pi


def flow_map(F, x0, t: float, step: float | None = None) -> np.ndarray:
    """M_t(x0); wrapped to [0, 2 pi)^D for periodic fields."""
    F = as_vector_field(F)
    single = np.ndim(x0) <= 1
    x, _ = integrate(F, x0, t, with_tangent=False, step=step)
    if F.periodic:
        x = wrap(x)
    return x[0] if single else x


def tangent_map(F, x0, t: float, step: float | None = None) -> np.ndarray:
    """Jacobian of M_t at x0."""
    single = np.ndim(x0) <= 1
    _, m = integrate(F, x0, t, with_tangent=True, step=step)
    return m[0] if single else m


@dataclass
class FlowFixedPoint:
    location: np.ndarray
    jacobian_Mt: np.ndarray
    newton_residual: float
    stability_eigenvalues: np.ndarray
    isolated: bool = True
    chart: str = ""

    @property
    def inverse_jacobian(self) -> np.ndarray:
        return np.linalg.inv(self.jacobian_Mt)


def _seed_grid(F: VectorField, density: int, region: float | None) -> np.ndarray:
    if F.periodic:
        g = 2 * np.pi * (np.arange(density) + 0.5) / density
    else:
        r = region or 1.0
        g = np.linspace(-r, r, density)
    return np.stack([c.ravel() for c in np.meshgrid(*([g] * F.dim), indexing="ij")], axis=1)


def find_fixed_points(F, t: float, seed_grid_density: int = 8, tol: float = 1e-11,
                      max_iter: int = 30, seeds=None, dedup: float = 1e-6, chart: str = "",
                      region: float | None = None, t_start: float = 0.5) -> list:
    """Newton iteration on wrap(M_t(x) - x) from a uniform seed grid.

    For t > ``t_start`` the grid is solved at t_start first and the roots are
    carried through doubling times up to t (basins of repelling points shrink
    like exp(-t), so cold starts at long times miss them).
    """
    if t <= 0:
        raise ValueError("t must be positive")
    F = as_vector_field(F)
    if seeds is None:
        seeds = _seed_grid(F, seed_grid_density, region)
        tt = t_start
        while tt < t:
            seeds = np.array(_newton_roots(F, tt, seeds, tol, max_iter, dedup)).reshape(-1, F.dim)
            tt = min(2 * tt, t)
    roots = _newton_roots(F, t, seeds, tol, max_iter, dedup)
    return _attach(F, t, roots, chart)


def _newton_roots(F: VectorField, t: float, seeds, tol, max_iter, dedup) -> list:
    d = F.dim
    x = np.array(seeds, dtype=float)
    active = np.ones(len(x), bool)
    resid = np.full(len(x), np.inf)
    for _ in range(max_iter):
        if not active.any():
            break
        xa = x[active]
        xt, m = integrate(F, xa, t)
        g = xt - xa
        if F.periodic:
            g = wrap_diff(g)
        r = np.linalg.norm(g, axis=1)
        resid[active] = r
        jac = m - np.eye(d)
        try:
            dx = np.linalg.solve(jac, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dx = np.array([np.linalg.lstsq(j, -gg, rcond=None)[0] for j, gg in zip(jac, g)])
        dx = np.clip(dx, -0.5, 0.5)
        newx = xa + dx
        done = r < tol
        newx[done] = xa[done]
        x[active] = newx
        idx = np.flatnonzero(active)
        active[idx[done]] = False
        if F.periodic:
            x = wrap(x)
        else:
            # seeds escaping far away diverge; drop them
            far = np.linalg.norm(x, axis=1) > 1e6
            active &= ~far
    ok = resid < tol
    roots = []
    for xi in x[ok]:
        xi = wrap(xi) if F.periodic else xi
        dup = False
        for r0 in roots:
            diff = wrap_diff(xi - r0) if F.periodic else xi - r0
            if np.linalg.norm(diff) < dedup:
                dup = True
                break
        if not dup:
            roots.append(xi)
    roots.sort(key=lambda v: tuple(np.round(v, 9)))
    return roots


def _attach(F: VectorField, t: float, roots, chart: str) -> list:
    out = []
    for xi in roots:
        _, m = integrate(F, xi, t)
        m = m[0]
        xt, _ = integrate(F, xi, t, with_tangent=False)
        g = xt[0] - xi
        if F.periodic:
            g = wrap_diff(g)
        ev = np.linalg.eigvals(m)
        isolated = bool(np.all(np.abs(np.abs(ev) - 1.0) > 1e-6))
        if not isolated:
            warnings.warn(f"non-isolated fixed point at {xi} excluded from sums", RuntimeWarning, stacklevel=2)
        out.append(FlowFixedPoint(xi, m, float(np.linalg.norm(g)), ev, isolated, chart))
    return out


@dataclass
class WeightedTraceResult:
    value: float
    contributions: list
    weight_kind: str
    excluded: int = 0


def principal_minor_sum(m: np.ndarray, k: int) -> float:
    """m_k: sum of the principal k x k minors."""
    d = m.shape[0]
    if k == 0:
        return 1.0
    return float(sum(np.linalg.det(m[np.ix_(c, c)]) for c in combinations(range(d), k)))


def weighted_trace(fps, weight_kind: str = "w", t: float | None = None, k: int | None = None,
                   custom=None) -> WeightedTraceResult:
    """sum over isolated fixed points of phi(x) / |det(1 - M_{-t}(x))|.

    weight ``w`` gives phi = det(1 - M_{-t}) (the Lefschetz sum), ``z`` gives
    det(1 + M_{-t}), ``m_k`` the principal-minor sum of order ``k`` and
    ``custom`` calls ``custom(point, M_{-t})``.
    """
    if weight_kind not in ("w", "z", "m_k", "custom"):
        raise ValueError(f"unknown weight {weight_kind!r}")
    contrib = []
    excluded = 0
    for fp in fps:
        if not fp.isolated:
            excluded += 1
            continue
        minv = np.linalg.inv(fp.jacobian_Mt)
        d = minv.shape[0]
        den = np.linalg.det(np.eye(d) - minv)
        if abs(den) < 1e-12:
            raise NonHyperbolicError(f"det(1 - M_-t) vanishes at {fp.location}")
        if weight_kind == "w":
            val = float(np.sign(den))
        elif weight_kind == "z":
            val = float(np.linalg.det(np.eye(d) + minv) / abs(den))
        elif weight_kind == "m_k":
            if k is None:
                raise ValueError("m_k weight needs k")
            val = principal_minor_sum(minv, k) / abs(den)
        elif weight_kind == "custom":
            val = float(custom(fp.location, minv)) / abs(den)
        contrib.append(val)
    total = float(sum(contrib))
    if weight_kind == "w":
        total = int(round(total))
    return WeightedTraceResult(total, contrib, weight_kind, excluded)


# sphere preset: height-gradient flow in the two stereographic charts

def to_other_chart(w: np.ndarray) -> np.ndarray:
    """Transition map w -> w / |w|^2 between the stereographic charts."""
    w = np.atleast_2d(w)
    return w / np.sum(w**2, axis=1, keepdims=True)


@dataclass
class SphereCharts:
    """Gradient flow of the height: w' = -w near the north pole, w' = +w near the south pole."""

    north: LinearChartField = field(default_factory=lambda: LinearChartField(-1.0))
    south: LinearChartField = field(default_factory=lambda: LinearChartField(1.0))
    dim: int = 2

    def overlap_residual(self, t: float = 0.3, rng_seed: int = 0) -> float:
        """max |phi(M^N_t(w)) - M^S_t(phi(w))| on random overlap points."""
        rng = np.random.default_rng(rng_seed)
        ang = rng.uniform(0, 2 * np.pi, 16)
        rad = rng.uniform(0.7, 1.4, 16)
        w = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        a = to_other_chart(flow_map(self.north, w, t))
        b = flow_map(self.south, to_other_chart(w), t)
        return float(np.max(np.abs(a - b)))

    def fixed_points(self, t: float, seed_grid_density: int = 7) -> list:
        out = []
        for name, fld in (("north", self.north), ("south", self.south)):
            pts = find_fixed_points(fld, t, seed_grid_density, chart=name, region=1.0)
            # keep each root in the chart whose closed unit disk contains it
            for fp in pts:
                r = np.linalg.norm(fp.location)
                if r < 1.0 or (r == 1.0 and name == "north"):
                    out.append(fp)
        return out


@dataclass
class LefschetzReport:
    t_list: list
    values: list
    constant: bool
    fixed_point_counts: list


def _fixed_points_for(F, t, density):
    if isinstance(F, SphereCharts):
        return F.fixed_points(t, density)
    return find_fixed_points(F, t, density)


def lefschetz_time_independence(F, t_list, seed_grid_density: int = 8) -> LefschetzReport:
    vals, counts = [], []
    for t in t_list:
        fps = _fixed_points_for(F, t, seed_grid_density)
        res = weighted_trace(fps, "w", t)
        if res.excluded:
            raise NonHyperbolicError(f"non-isolated fixed points at t = {t}")
        vals.append(int(res.value))
        counts.append(len(fps))
    return LefschetzReport(list(t_list), vals, len(set(vals)) == 1, counts)


FIXED_POINT_HEADER_KEYS = ("sign", "abs_det", "weight_contribution")


def write_fixed_point_csv(fps, result: WeightedTraceResult, path) -> None:
    """Columns x1..xD,sign,abs_det,weight_contribution (isolated points only)."""
    iso = [fp for fp in fps if fp.isolated]
    d = len(iso[0].location) if iso else 1
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([f"x{i + 1}" for i in range(d)] + list(FIXED_POINT_HEADER_KEYS))
        for fp, c in zip(iso, result.contributions):
            minv = np.linalg.inv(fp.jacobian_Mt)
            den = np.linalg.det(np.eye(d) - minv)
            wr.writerow([repr(float(v)) for v in fp.location] + [int(np.sign(den)), repr(abs(float(den))), repr(float(c))])
