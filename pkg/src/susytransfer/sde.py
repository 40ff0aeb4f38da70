"""Monte Carlo for dx = F dt + sqrt(2T) e dW with Ito and Stratonovich integrators.

Every trajectory owns a counter-based Philox stream keyed by (seed, trajectory
index), so results do not depend on how trajectories are chunked or
scheduled.  Histogram counts are integers and merge by summation.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .forms import KFormVector
from .geometry import TrigPolyField

INTEGRATORS = ("euler_maruyama", "heun")
GAUSSIAN_METHODS = ("inverse", "polar")


class McError(RuntimeError):
    pass


@dataclass
class McRun:
    integrator: str
    step: float
    burn_in_steps: int
    sample_steps: int
    seed: int
    trajectory_count: int
    thin: int = 1
    bins: int = 32
    gaussian: str = "inverse"
    chunk: int = 2000
    domain: str = "torus"
    half_width: float = 0.0

    def validate(self, temperature: float, lipschitz: float) -> None:
        if self.integrator not in INTEGRATORS:
            raise McError(f"unknown integrator {self.integrator!r}")
        if self.gaussian not in GAUSSIAN_METHODS:
            raise McError(f"unknown gaussian method {self.gaussian!r}")
        if temperature <= 0:
            raise McError("temperature must be positive")
        if self.step * lipschitz >= 0.1:
            raise McError(f"step * Lipschitz(F) = {self.step * lipschitz:.3g} must stay below 0.1")
        floor = 10.0 / (temperature * self.step)
        if self.burn_in_steps < floor:
            raise McError(f"burn-in of {self.burn_in_steps} steps is below the floor {floor:.0f}")
        if self.domain == "line" and self.half_width <= 0:
            raise McError("line domain needs a positive half width")
        if self.thin < 1 or self.sample_steps < self.thin:
            raise McError("sample_steps must be at least thin >= 1")

    @property
    def samples_per_trajectory(self) -> int:
        return self.sample_steps // self.thin


class TrigSystem:
    """Joint evaluator for a drift F (D,) and a vielbein e (D, D) given as trig polynomials."""

    def __init__(self, F: TrigPolyField, e: TrigPolyField):
        if not (F.is_real() and e.is_real()):
            raise McError("drift and vielbein must be real fields")
        d = F.dim
        self.dim = d
        k = max(F.harmonic, e.harmonic)
        f = F.resized(k).coeffs.reshape(d, -1)
        g = e.resized(k).coeffs.reshape(d * d, -1)
        c = np.concatenate([f, g]).T  # (modes, D + D*D)
        side = 2 * k + 1
        waves = np.stack(np.unravel_index(np.arange(side ** d), (side,) * d), axis=1) - k
        # real field: fold n and -n onto the lexicographically positive half
        pos = np.array([tuple(n) > (0,) * d for n in waves], bool)
        keep = pos & (np.abs(c).sum(1) > 0)
        self.mean = c[(side ** d) // 2].real
        self.waves = waves[keep].astype(float)  # (S, D)
        self.cos_coef = 2 * c[keep].real
        self.sin_coef = -2 * c[keep].imag

    def __call__(self, x):
        out = np.broadcast_to(self.mean, (x.shape[0], len(self.mean)))
        if len(self.waves):
            th = x @ self.waves.T
            out = out + np.cos(th) @ self.cos_coef + np.sin(th) @ self.sin_coef
        d = self.dim
        return out[:, :d], out[:, d:].reshape(-1, d, d)


class LineSystem:
    """Polynomial drift and vielbein on the line."""

    def __init__(self, F, e):
        self.dim = 1
        self.F = F if isinstance(F, np.polynomial.Polynomial) else np.polynomial.Polynomial([float(F)])
        self.e = e if isinstance(e, np.polynomial.Polynomial) else np.polynomial.Polynomial([float(e)])

    def __call__(self, x):
        return self.F(x), self.e(x)[..., None]


def lipschitz_estimate(F, grid: int = 65) -> float:
    """max over a grid of the spectral norm of dF (trig fields) or |F'| on a line window."""
    if isinstance(F, TrigPolyField):
        jac = F.gradient().samples(max(grid, 2 * F.harmonic + 1) | 1).real  # (i, j, grid...)
        jac = np.moveaxis(jac.reshape(F.dim, F.dim, -1), 2, 0)
        return float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))
    raise McError("Lipschitz estimate needs a trig field; pass lipschitz= for other systems")


def _normals(gen: np.random.Generator, shape, method: str) -> np.ndarray:
    n = int(np.prod(shape))
    if method == "inverse":
        u = gen.random(n)
        u[u == 0.0] = np.finfo(float).tiny
        return ndtri(u).reshape(shape)
    # Marsaglia polar method
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        m = int(need * 0.7) + 8
        v = 2.0 * gen.random((m, 2)) - 1.0
        s = np.sum(v * v, axis=1)
        ok = (s > 0) & (s < 1)
        v, s = v[ok], s[ok]
        f = np.sqrt(-2.0 * np.log(s) / s)
        z = (v * f[:, None]).ravel()
        take = min(need, z.size)
        out[filled:filled + take] = z[:take]
        filled += take
    return out.reshape(shape)


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(index)]))


@dataclass
class DensityHistogram:
    bin_edges: list
    counts: np.ndarray
    total_samples: int
    domain: str = "torus"
    metadata: dict = field(default_factory=dict)

    @property
    def bin_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.bin_edges]))

    @property
    def density(self) -> np.ndarray:
        return self.counts / (self.total_samples * self.bin_volume)

    @property
    def centers(self) -> list:
        return [0.5 * (e[1:] + e[:-1]) for e in self.bin_edges]

    def integral(self) -> float:
        return float(self.density.sum() * self.bin_volume)


def _bin_index(x, edges, domain):
    idx = []
    for j, e in enumerate(edges):
        nb = len(e) - 1
        lo, hi = e[0], e[-1]
        xj = np.mod(x[:, j], 2 * np.pi) if domain == "torus" else x[:, j]
        b = np.floor((xj - lo) / (hi - lo) * nb).astype(np.int64)
        idx.append(np.clip(b, 0, nb - 1))
    return np.ravel_multi_index(idx, [len(e) - 1 for e in edges])


def _apply(e, dw):
    if e.shape[1] == 1:
        return e[:, :, 0] * dw
    return np.einsum("pij,pj->pi", e, dw)


def _run_chunk(run: McRun, system, temperature: float, start: int, stop: int, edges) -> np.ndarray:
    d = system.dim
    p = stop - start
    gens = [trajectory_stream(run.seed, i) for i in range(start, stop)]
    if run.domain == "torus":
        x = np.stack([g.random(d) for g in gens]) * 2 * np.pi
    else:
        x = (np.stack([g.random(d) for g in gens]) - 0.5) * run.half_width * 0.5
    nbins = int(np.prod([len(e) - 1 for e in edges]))
    counts = np.zeros(nbins, np.int64)
    amp = np.sqrt(2.0 * temperature * run.step)
    h = run.step
    total = run.burn_in_steps + run.sample_steps
    block = 1024
    done = 0
    while done < total:
        nb = min(block, total - done)
        noise = np.stack([_normals(g, (nb, d), run.gaussian) for g in gens], axis=1)  # (nb, P, D)
        for s in range(nb):
            dw = noise[s] * amp
            f0, e0 = system(x)
            if run.integrator == "euler_maruyama":
                x = x + f0 * h + _apply(e0, dw)
            else:
                xp = x + f0 * h + _apply(e0, dw)
                f1, e1 = system(xp)
                x = x + 0.5 * (f0 + f1) * h + 0.5 * _apply(e0 + e1, dw)
            if run.domain == "line":
                w = run.half_width
                x = np.where(x > w, 2 * w - x, x)
                x = np.where(x < -w, -2 * w - x, x)
            n = done + s + 1
            if n > run.burn_in_steps and (n - run.burn_in_steps) % run.thin == 0:
                counts += np.bincount(_bin_index(x, edges, run.domain), minlength=nbins)
        done += nb
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise McError(f"non-finite state in trajectory {start + bad} by step {done}")
    return counts


def integrate(run: McRun, F, e, T: float, workers: int = 1, lipschitz: float | None = None) -> DensityHistogram:
    """Stationary-density histogram over post-burn-in samples."""
    if run.domain == "torus":
        system = TrigSystem(F, e)
        lip = lipschitz_estimate(F) if lipschitz is None else lipschitz
        edges = [np.linspace(0, 2 * np.pi, run.bins + 1) for _ in range(system.dim)]
    else:
        system = LineSystem(F, e)
        if lipschitz is None:
            xs = np.linspace(-run.half_width, run.half_width, 2001)
            lip = float(np.max(np.abs(system.F.deriv()(xs))))
        else:
            lip = lipschitz
        edges = [np.linspace(-run.half_width, run.half_width, run.bins + 1)]
    run.validate(T, lip)
    ranges = [(a, min(a + run.chunk, run.trajectory_count)) for a in range(0, run.trajectory_count, run.chunk)]

    def job(r):
        return _run_chunk(run, system, T, r[0], r[1], edges)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(job, ranges))
    else:
        parts = [job(r) for r in ranges]
    counts = np.sum(parts, axis=0).reshape([len(e) - 1 for e in edges])
    total = run.trajectory_count * run.samples_per_trajectory
    meta = dict(seed=run.seed, gaussian=run.gaussian, integrator=run.integrator, step=run.step,
                burn_in_steps=run.burn_in_steps, sample_steps=run.sample_steps, thin=run.thin,
                trajectories=run.trajectory_count, total_samples=total, temperature=T,
                rng="philox(seed, trajectory)")
    return DensityHistogram(edges, counts, total, run.domain, meta)


def bin_averages(form: KFormVector, edges) -> np.ndarray:
    """Exact bin averages of a top-form density given by Fourier coefficients (torus)."""
    b = form.basis
    n = np.arange(-b.n_cut, b.n_cut + 1)
    factors = []
    for e in edges:
        lo, hi = e[:-1], e[1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            f = (np.exp(1j * np.outer(hi, n)) - np.exp(1j * np.outer(lo, n))) / (1j * np.outer(hi - lo, n))
        f[:, n == 0] = 1.0
        factors.append(f)  # (bins, modes)
    c = form.component((1 << b.dim) - 1)
    if b.dim == 1:
        out = factors[0] @ c
    elif b.dim == 2:
        out = np.einsum("ab,ia,jb->ij", c, factors[0], factors[1])
    else:
        out = np.einsum("abc,ia,jb,kc->ijk", c, factors[0], factors[1], factors[2])
    return out.real


def compare_density(hist: DensityHistogram, spectral_density) -> float:
    """L1 distance sum |p_mc - p_spec| * bin volume with bin-averaged spectral density."""
    if isinstance(spectral_density, KFormVector):
        kind = spectral_density.basis.kind
        if kind != hist.domain:
            raise McError(f"domain mismatch: histogram on {hist.domain}, density on {kind}")
        if spectral_density.degree != spectral_density.basis.dim:
            raise McError("spectral density must be a top-degree form")
        if kind == "torus":
            if len(hist.bin_edges) != spectral_density.basis.dim:
                raise McError("dimension mismatch")
            ref = bin_averages(spectral_density, hist.bin_edges)
        else:
            g = spectral_density.basis.grid
            edges = hist.bin_edges[0]
            cum = np.concatenate([[0.0], np.cumsum(spectral_density.coefficients.real) * g.h])
            cell_edges = np.concatenate([[-g.half_width], g.midpoints + g.h / 2])
            mass = np.diff(np.interp(edges, cell_edges, cum))
            ref = mass / np.diff(edges)
    else:
        # callable density: 8-point Gauss-Legendre per bin and axis
        xg, wg = np.polynomial.legendre.leggauss(8)
        pts, wts = [], []
        for e in hist.bin_edges:
            lo, hi = e[:-1, None], e[1:, None]
            pts.append((0.5 * (hi - lo) * xg + 0.5 * (hi + lo)))
            wts.append(0.5 * wg * np.ones_like(lo))
        if len(pts) != 1:
            raise McError("callable densities are supported in one dimension")
        ref = np.sum(spectral_density(pts[0]) * wts[0], axis=1)
    return float(np.sum(np.abs(hist.density - ref)) * hist.bin_volume)


def write_histogram_csv(hist: DensityHistogram, path) -> None:
    d = len(hist.bin_edges)
    names = ["bin_center"] if d == 1 else [f"bin_center{j + 1}" for j in range(d)]
    centers = np.meshgrid(*hist.centers, indexing="ij")
    dens = hist.density
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names + ["density"])
        for idx in np.ndindex(dens.shape):
            wr.writerow([repr(float(c[idx])) for c in centers] + [repr(float(dens[idx]))])


def metadata_text(hist: DensityHistogram) -> str:
    return "\n".join(f"{k} = {v}" for k, v in hist.metadata.items())
