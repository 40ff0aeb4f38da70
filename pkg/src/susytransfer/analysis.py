"""Supersymmetry and topology diagnostics computed from spectra."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .forms import KFormVector, fourier_eval
from .spectra import Spectrum, ZeroModeReport, conjugation_pairing, zero_modes, zero_threshold

UNBROKEN_TE = "UNBROKEN_TE"
BROKEN_ZERO_RATE_COMPLEX = "BROKEN_ZERO_RATE_COMPLEX"
BROKEN_NEGATIVE_REAL = "BROKEN_NEGATIVE_REAL"
BROKEN_NEGATIVE_COMPLEX = "BROKEN_NEGATIVE_COMPLEX"
AMBIGUOUS = "AMBIGUOUS"
LABELS = (UNBROKEN_TE, BROKEN_ZERO_RATE_COMPLEX, BROKEN_NEGATIVE_REAL, BROKEN_NEGATIVE_COMPLEX, AMBIGUOUS)

DEFAULT_T_GRID = (0.5, 1.0, 2.0, 4.0)


class AmbiguousGapError(RuntimeError):
    pass


class PoleError(ValueError):
    pass


class DensityError(RuntimeError):
    pass


def witten_index(spec: Spectrum, zeros: ZeroModeReport | None = None) -> int:
    """Alternating sum of zero-mode counts."""
    zeros = zeros or zero_modes(spec)
    if zeros.ambiguous:
        raise AmbiguousGapError(f"zero-mode gap is ambiguous (threshold {zeros.threshold:.3e})")
    return int(sum((-1) ** k * n for k, n in enumerate(zeros.counts)))


def _exp_sum(values: np.ndarray, t: float) -> complex:
    with np.errstate(over="ignore"):
        s = np.exp(-t * values).sum()
    if not np.isfinite(s):
        warnings.warn(f"trace overflow at t={t}", RuntimeWarning, stacklevel=3)
    return complex(s)


def flat_traces(spec: Spectrum, t: float) -> dict:
    """Per-degree traces Tr exp(-t H_k)."""
    if t <= 0:
        raise ValueError("t must be positive")
    return {k: _exp_sum(spec.values[k], t) for k in spec.degrees}


def supertrace(spec: Spectrum, t: float) -> complex:
    """sum_k (-1)^k Tr exp(-t H_k)."""
    return sum((-1) ** k * v for k, v in flat_traces(spec, t).items())


def partition_trace(spec: Spectrum, t: float) -> complex:
    """Z(t) = Tr exp(-t H) over all degrees."""
    return sum(flat_traces(spec, t).values())


def supertrace_drift(spec: Spectrum, t_grid=DEFAULT_T_GRID, reference: float | None = None) -> tuple[list, float]:
    """Supertrace values over ``t_grid`` and the max deviation from ``reference``.

    With no reference the spread (max - min) of the values is used.
    """
    vals = [supertrace(spec, t) for t in t_grid]
    arr = np.array(vals)
    if reference is None:
        drift = float(np.max(np.abs(arr - arr[0]))) if len(arr) else 0.0
    else:
        drift = float(np.max(np.abs(arr - reference)))
    return vals, drift


@dataclass
class BFReport:
    max_residual: float
    unmatched: int
    tolerance: float
    pairs: list = field(default_factory=list)  # ((k, i), (k+1, j)) index pairs
    unmatched_items: list = field(default_factory=list)


def bf_pairing(spec: Spectrum, tol: float | None = None, zeros: ZeroModeReport | None = None) -> BFReport:
    """Match nonzero eigenvalues of degree k with degree k+1, walking up the degrees."""
    zeros = zeros or zero_modes(spec)
    tol = 1e-6 * spec.norm if tol is None else tol
    theta = zeros.threshold
    remaining = {k: [i for i in range(len(spec.values[k])) if abs(spec.values[k][i]) >= theta]
                 for k in spec.degrees}
    pairs, unmatched_items = [], []
    worst = 0.0
    degs = spec.degrees
    for k in degs:
        a_idx = remaining[k]
        if k + 1 not in spec.values:
            unmatched_items += [(k, i) for i in a_idx]
            continue
        b_idx = remaining[k + 1]
        if not a_idx:
            continue
        if not b_idx:
            unmatched_items += [(k, i) for i in a_idx]
            continue
        a = spec.values[k][a_idx]
        b = spec.values[k + 1][b_idx]
        cost = np.abs(a[:, None] - b[None, :])
        r, c = linear_sum_assignment(cost)
        used = set()
        assigned = set()
        for ri, ci in zip(r, c):
            dist = float(cost[ri, ci])
            if dist <= tol:
                pairs.append(((k, a_idx[ri]), (k + 1, b_idx[ci])))
                used.add(b_idx[ci])
                assigned.add(ri)
                worst = max(worst, dist)
        for ri in range(len(a_idx)):
            if ri not in assigned:
                unmatched_items.append((k, a_idx[ri]))
                near = float(cost[ri].min())
                worst = max(worst, near)
        remaining[k + 1] = [j for j in b_idx if j not in used]
    return BFReport(worst, len(unmatched_items), tol, pairs, unmatched_items)


def sharp_counting_determinants(spec: Spectrum, z: complex, t: float, bf: BFReport | None = None,
                                pole_tol: float = 1e-6) -> tuple[complex, complex]:
    """(sharp, counting) determinants of exp(-tH) at z.

    counting = prod (1 - z e^{-t lam})^{-1}; sharp = prod (1 - z e^{-t lam})^{(-1)^{k+1}}
    with boson-fermion pairs cancelled before the product.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    bf = bf or bf_pairing(spec)
    cancelled = set()
    for a, b in bf.pairs:
        cancelled.add(a)
        cancelled.add(b)
    log_count = 0j
    log_sharp = 0j
    for k in spec.degrees:
        lam = spec.values[k]
        with np.errstate(over="ignore"):
            f = 1 - z * np.exp(-t * lam)
        near = np.flatnonzero(np.abs(f) < pole_tol)
        if near.size:
            raise PoleError(f"z e^(-t lambda) hits 1 for lambda = {lam[near[0]]:.6g} (degree {k})")
        logs = np.log(f.astype(complex))
        log_count -= logs.sum()
        keep = np.array([(k, i) not in cancelled for i in range(len(lam))], bool)
        log_sharp += (-1) ** (k + 1) * logs[keep].sum()
    return complex(np.exp(log_sharp)), complex(np.exp(log_count))


@dataclass
class GroundState:
    degree: int
    index: int
    eigenvalue: complex
    partner: tuple | None = None


def select_ground_state(spec: Spectrum, tol: float | None = None) -> GroundState:
    """Minimal Gamma, then minimal E, then highest degree (ties within ``tol``)."""
    tol = 1e-8 * spec.norm if tol is None else tol
    items = [(k, i, spec.values[k][i]) for k in spec.degrees for i in range(len(spec.values[k]))]
    gmin = min(v.real for _, _, v in items)
    cand = [it for it in items if it[2].real <= gmin + tol]
    emin = min(v.imag for _, _, v in cand)
    cand = [it for it in cand if it[2].imag <= emin + tol]
    k, i, lam = max(cand, key=lambda it: (it[0], -it[2].real))
    partner = None
    if abs(lam.imag) > tol:
        best = None
        for kk, ii, v in items:
            if (kk, ii) != (k, i):
                dist = abs(v - np.conj(lam))
                if best is None or dist < best[0]:
                    best = (dist, kk, ii)
        partner = (best[1], best[2])
    return GroundState(k, i, complex(lam), partner)


def te_state_density(spec: Spectrum, zeros: ZeroModeReport | None = None, grid: int | None = None) -> KFormVector:
    """Top-degree zero mode scaled to unit phase-space integral."""
    if not spec.has_vectors:
        raise DensityError("TE density needs eigenvectors")
    zeros = zeros or zero_modes(spec)
    top = spec.basis.dim
    idx = zeros.indices.get(top, [])
    best = None
    for i in idx:
        v = KFormVector(top, spec.right[top][:, i], spec.basis)
        integ = v.integral()
        score = abs(integ) / np.linalg.norm(v.coefficients)
        if best is None or score > best[0]:
            best = (score, v, integ)
    if best is None or best[0] < 1e-8:
        raise DensityError("no top-degree zero mode with nonzero integral")
    _, v, integ = best
    v = KFormVector(top, v.coefficients / integ, spec.basis)
    vals = sample_density(v, grid)
    if vals.min() < -1e-8 * max(vals.max(), 1e-300):
        raise DensityError(f"TE density is negative somewhere (min {vals.min():.3e})")
    return v


def sample_density(form: KFormVector, grid: int | None = None) -> np.ndarray:
    """Real part of a top-form coefficient on a uniform grid (torus) or the cell grid (line)."""
    b = form.basis
    if b.kind == "line":
        return form.coefficients.real
    n = grid or (4 * b.n_cut + 1)
    x = 2 * np.pi * np.arange(n) / n
    pts = np.stack([g.ravel() for g in np.meshgrid(*([x] * b.dim), indexing="ij")], axis=1)
    return fourier_eval(form.component((1 << b.dim) - 1), b.n_cut, pts).real


def has_te_state(spec: Spectrum, zeros: ZeroModeReport) -> bool:
    try:
        te_state_density(spec, zeros)
    except DensityError:
        return False
    return True


@dataclass
class SusyReport:
    witten_index: int | None
    zero_mode_counts: list
    gamma_g: float
    e_g: float
    classification: str
    eta_t_broken: bool
    bf_pairing_residual: float
    supertrace_drift: float
    ground_degree: int = -1
    zero_threshold: float = 0.0
    bf_unmatched: int = 0
    conjugation_residual: float = 0.0
    norm: float = 0.0
    supertrace_values: list = field(default_factory=list)

    FIELDS = ("witten_index", "zero_mode_counts", "gamma_g", "e_g", "classification", "eta_t_broken",
              "bf_pairing_residual", "supertrace_drift")

    def to_text(self) -> str:
        lines = []
        for name in self.FIELDS + ("ground_degree", "zero_threshold", "bf_unmatched",
                                   "conjugation_residual", "norm"):
            val = getattr(self, name)
            if isinstance(val, list):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{name} = {val}")
        return "\n".join(lines)


def _label(gamma: float, energy: float, theta: float) -> str:
    def zero_state(x):
        if abs(x) < theta:
            return "zero"
        if abs(x) < 10 * theta:
            return "straddle"
        return "neg" if x < 0 else "pos"

    g, e = zero_state(gamma), zero_state(energy)
    if "straddle" in (g, e):
        return AMBIGUOUS
    if g == "zero":
        return BROKEN_ZERO_RATE_COMPLEX if e != "zero" else None
    if g == "neg":
        return BROKEN_NEGATIVE_REAL if e == "zero" else BROKEN_NEGATIVE_COMPLEX
    return AMBIGUOUS  # positive ground rate means the zero modes are missing


def classify(spec: Spectrum, t_grid=DEFAULT_T_GRID, zeros: ZeroModeReport | None = None) -> SusyReport:
    """Spectrum taxonomy label plus the numbers it is derived from."""
    zeros = zeros or zero_modes(spec)
    theta = zeros.threshold
    ground = select_ground_state(spec)
    gamma, energy = ground.eigenvalue.real, ground.eigenvalue.imag
    try:
        w = witten_index(spec, zeros)
    except AmbiguousGapError:
        w = None
    bf = bf_pairing(spec, zeros=zeros)
    vals, drift = supertrace_drift(spec, t_grid)
    conj = conjugation_pairing(spec)
    if zeros.ambiguous:
        label = AMBIGUOUS
    else:
        label = _label(gamma, energy, theta)
        if label is None:
            is_zero_mode = ground.index in set(int(i) for i in zeros.indices.get(ground.degree, []))
            te = ground.degree == spec.basis.dim and is_zero_mode
            if te and spec.has_vectors:
                te = has_te_state(spec, zeros)
            label = UNBROKEN_TE if te else AMBIGUOUS
    return SusyReport(
        witten_index=w,
        zero_mode_counts=list(zeros.counts),
        gamma_g=float(gamma),
        e_g=float(energy),
        classification=label,
        eta_t_broken=bool(abs(energy) >= theta),
        bf_pairing_residual=float(bf.max_residual),
        supertrace_drift=float(drift),
        ground_degree=ground.degree,
        zero_threshold=float(theta),
        bf_unmatched=bf.unmatched,
        conjugation_residual=float(conj.max_residual),
        norm=float(spec.norm),
        supertrace_values=vals,
    )


@dataclass
class SlopeFit:
    slope: float
    prefactor: float
    window: tuple
    gap: float


def lnz_slope(spec: Spectrum, points: int = 64) -> SlopeFit:
    """Fit ln|Z(t)| on t in [5/gap, 20/gap]; gap is the distance from Gamma_g to the next rate."""
    lam = spec.all_values()
    theta, _ = zero_threshold(spec)
    g0 = lam.real.min()
    higher = np.sort(np.unique(lam.real[lam.real > g0 + theta]))
    if not higher.size:
        raise ValueError("spectrum has a single attenuation rate")
    gap = float(higher[0] - g0)
    ts = np.linspace(5 / gap, 20 / gap, points)
    # ln Z = -t g0 + ln |sum exp(-t (lam - g0))|
    with np.errstate(under="ignore"):
        rest = np.array([np.abs(np.exp(-t * (lam - g0)).sum()) for t in ts])
    lnz = -ts * g0 + np.log(rest)
    slope, icpt = np.polyfit(ts, lnz, 1)
    return SlopeFit(float(slope), float(np.exp(icpt)), (float(ts[0]), float(ts[-1])), gap)


@dataclass
class SweepRow:
    temperature: float
    report: SusyReport
    converged: bool
    ground_delta: float


@dataclass
class SweepTable:
    rows: list

    HEADER = "T,witten_index,gamma_g,e_g,classification"

    def restoration_temperature(self):
        """Smallest sampled T above which every converged entry is UNBROKEN_TE (None if none)."""
        conv = [r for r in self.rows if r.converged]
        t_star = None
        for r in reversed(conv):
            if r.report.classification != UNBROKEN_TE:
                break
            t_star = r.temperature
        return t_star

    def to_csv(self) -> str:
        out = [self.HEADER]
        for r in self.rows:
            w = "" if r.report.witten_index is None else str(r.report.witten_index)
            out.append(f"{r.temperature!r},{w},{r.report.gamma_g!r},{r.report.e_g!r},{r.report.classification}")
        return "\n".join(out) + "\n"


def ground_delta(coarse: Spectrum, fine: Spectrum) -> float:
    a = select_ground_state(coarse).eigenvalue
    b = select_ground_state(fine).eigenvalue
    return float(min(abs(a - b), abs(a - np.conj(b))))


def temperature_sweep(build, t_list, refine=None, conv_tol: float = 1e-6, t_grid=DEFAULT_T_GRID,
                      workers: int = 1) -> SweepTable:
    """Classify the spectrum at each temperature.

    ``build(T)`` returns a Spectrum; ``refine(T)`` (optional) returns the
    refined-resolution Spectrum used for the convergence flag.
    """
    t_list = [float(t) for t in t_list]
    if any(t <= 0 for t in t_list):
        raise ValueError("temperatures must be positive")
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("temperature list must be increasing")

    def one(T):
        spec = build(T)
        rep = classify(spec, t_grid)
        if refine is None:
            return SweepRow(T, rep, False, float("nan"))
        fine = refine(T)
        delta = ground_delta(spec, fine)
        return SweepRow(T, rep, delta < conv_tol, delta)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(one, t_list))
    else:
        rows = [one(T) for T in t_list]
    return SweepTable(rows)
