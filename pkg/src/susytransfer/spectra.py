"""Degree-resolved eigendecomposition of graded operators."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment

from .forms import FormBasis, KFormVector
from .operators import GradedOperator, exterior_derivative

CSV_HEADER = "degree,re,im,is_zero_mode,converged"
DEFECT_COND = 1e12


class SpectrumError(RuntimeError):
    pass


def real_transform(basis: FormBasis, k: int) -> sp.csr_matrix:
    """Unitary U whose columns are (e_n + e_-n)/sqrt2 and -i(e_n - e_-n)/sqrt2.

    For an operator that maps real forms to real forms, U^H A U is real.
    """
    m = basis.waves.size
    c = m // 2
    rows, cols, vals = [], [], []
    s = 1 / np.sqrt(2)
    for pos in range(len(basis.masks[k])):
        off = pos * m
        rows.append(off + c)
        cols.append(off + c)
        vals.append(1.0)
        for j in range(c + 1, m):
            jm = m - 1 - j
            # column j: cosine-like; column jm: sine-like
            rows += [off + j, off + jm, off + j, off + jm]
            cols += [off + j, off + j, off + jm, off + jm]
            vals += [s, s, -1j * s, 1j * s]
    n = basis.degree_dim(k)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


@dataclass
class EigenPair:
    eigenvalue: complex
    degree: int
    right_vector: KFormVector
    left_vector: KFormVector | None = None

    @property
    def gamma(self) -> float:
        return float(self.eigenvalue.real)

    @property
    def energy(self) -> float:
        return float(self.eigenvalue.imag)


@dataclass
class Spectrum:
    basis: FormBasis
    values: dict
    norm: float
    right: dict = field(default_factory=dict)
    left: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    defective: dict = field(default_factory=dict)
    condition: dict = field(default_factory=dict)
    backward_error: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        for k, v in self.values.items():
            self.converged.setdefault(k, np.zeros(len(v), bool))

    @property
    def degrees(self):
        return sorted(self.values)

    @property
    def has_vectors(self) -> bool:
        return bool(self.right)

    def all_values(self) -> np.ndarray:
        return np.concatenate([self.values[k] for k in self.degrees])

    def count(self) -> int:
        return sum(len(v) for v in self.values.values())

    def pair(self, k: int, i: int) -> EigenPair:
        right = left = None
        if k in self.right:
            right = KFormVector(k, self.right[k][:, i], self.basis)
        if k in self.left and self.left[k] is not None:
            left = KFormVector(k, self.left[k][i, :], self.basis)
        return EigenPair(complex(self.values[k][i]), k, right, left)

    @property
    def pairs(self) -> list:
        return [self.pair(k, i) for k in self.degrees for i in range(len(self.values[k]))]


def _decompose_block(a: np.ndarray, want_vectors: bool, tol: float, k: int):
    if not want_vectors:
        return sla.eigvals(a, overwrite_a=False, check_finite=False), None
    w, v = sla.eig(a, check_finite=False)
    if not np.all(np.isfinite(w)):
        bad = int(np.flatnonzero(~np.isfinite(w))[0])
        raise SpectrumError(f"eigensolver did not converge in degree {k}, index {bad}")
    return w, v


def eigendecompose(op: GradedOperator, want_vectors: bool = True, real_basis: bool = True,
                   tol: float = 1e-8, norm: float | None = None) -> Spectrum:
    """All eigenvalues (and right/left vectors) of every degree block.

    Left vectors are the rows of V^{-1}, so left . right = identity.
    """
    if op.shift != 0:
        raise SpectrumError("eigendecomposition needs a degree-preserving operator")
    basis = op.basis
    hnorm = op.norm() if norm is None else norm
    spec = Spectrum(basis, {}, hnorm, label=op.name)
    for k in basis.degrees:
        a = op.block(k)
        u = None
        if basis.kind == "torus" and real_basis and a.size:
            u = real_transform(basis, k)
            ar = np.asarray(u.conj().T @ np.asarray((u.T @ a.T).T))
            if np.max(np.abs(ar.imag), initial=0.0) <= 1e-12 * max(1.0, hnorm):
                work = np.ascontiguousarray(ar.real)
            else:
                work, u = a, None
        else:
            work = a.real.copy() if np.all(a.imag == 0) else a
        w, v = _decompose_block(work, want_vectors, tol, k)
        spec.values[k] = w.astype(complex)
        spec.converged[k] = np.zeros(len(w), bool)
        if not want_vectors:
            continue
        # backward error on the working representation (U is unitary)
        r = work @ v - v * w
        be = np.linalg.norm(r, axis=0) / (max(hnorm, 1e-300) * np.linalg.norm(v, axis=0))
        spec.backward_error[k] = float(be.max(initial=0.0))
        if spec.backward_error[k] > tol:
            i = int(np.argmax(be))
            raise SpectrumError(f"backward error {be[i]:.2e} in degree {k}, index {i}")
        try:
            lu = sla.lu_factor(v, check_finite=False)
            vinv = sla.lu_solve(lu, np.eye(len(w)), check_finite=False)
            cond = np.linalg.norm(v, 1) * np.linalg.norm(vinv, 1)
        except (np.linalg.LinAlgError, ValueError):
            vinv, cond = None, np.inf
        spec.condition[k] = float(cond)
        spec.defective[k] = bool(not np.isfinite(cond) or cond > DEFECT_COND)
        if u is not None:
            v = np.asarray(u @ v)
            vinv = None if vinv is None else np.asarray(u.conj() @ vinv.T).T
        spec.right[k] = v.astype(complex)
        spec.left[k] = None if spec.defective[k] else vinv
    return spec


@dataclass
class ZeroModeReport:
    counts: list
    threshold: float
    ambiguous: bool
    indices: dict
    right_closed_residual: float = 0.0
    left_closed_residual: float = 0.0
    smallest_nonzero: float = np.inf

    def vectors(self, spec: Spectrum) -> dict:
        return {k: spec.right[k][:, idx] for k, idx in self.indices.items() if k in spec.right}


def zero_threshold(spec: Spectrum) -> tuple[float, float]:
    mags = np.abs(spec.all_values())
    floor = 1e-8 * spec.norm
    nonzero = mags[mags > floor]
    smallest = float(nonzero.min()) if nonzero.size else np.inf
    theta = max(floor, 1e-3 * smallest) if np.isfinite(smallest) else floor
    return theta, smallest


def zero_modes(spec: Spectrum, d: GradedOperator | None = None) -> ZeroModeReport:
    """Count eigenvalues with |lambda| < theta per degree and verify d-closedness."""
    theta, smallest = zero_threshold(spec)
    indices, counts = {}, []
    zmax = 0.0
    for k in spec.degrees:
        mags = np.abs(spec.values[k])
        idx = np.flatnonzero(mags < theta)
        indices[k] = idx
        counts.append(int(idx.size))
        if idx.size:
            zmax = max(zmax, float(mags[idx].max()))
    ambiguous = bool(sum(counts)) and smallest < 10 * zmax
    rep = ZeroModeReport(counts, theta, bool(ambiguous), indices, smallest_nonzero=smallest)
    if spec.has_vectors:
        d = d or exterior_derivative(spec.basis)
        rr = lr = 0.0
        for k, idx in indices.items():
            if not idx.size:
                continue
            v = spec.right[k][:, idx]
            if k < spec.basis.dim:
                dv = d.sparse(k) @ v
                rr = max(rr, float(np.max(np.linalg.norm(dv, axis=0) / np.linalg.norm(v, axis=0))))
            left = spec.left.get(k)
            if left is not None and k >= 1:
                y = left[idx, :]
                yd = (y @ d.sparse(k - 1)) if not sp.issparse(y) else y @ d.sparse(k - 1)
                lr = max(lr, float(np.max(np.linalg.norm(yd, axis=1) / np.linalg.norm(y, axis=1))))
        rep.right_closed_residual = rr
        rep.left_closed_residual = lr
    return rep


@dataclass
class PairingReport:
    max_residual: float
    complex_pairs: int
    per_degree: dict


def conjugation_pairing(spec: Spectrum) -> PairingReport:
    """Optimal matching of each block spectrum against its complex conjugate."""
    theta, _ = zero_threshold(spec)
    worst, npairs, per = 0.0, 0, {}
    for k in spec.degrees:
        w = spec.values[k]
        if not w.size:
            per[k] = 0.0
            continue
        cost = np.abs(w[:, None] - np.conj(w)[None, :])
        r, c = linear_sum_assignment(cost)
        res = float(cost[r, c].max())
        per[k] = res
        worst = max(worst, res)
        npairs += int(np.sum(w.imag > theta))
    return PairingReport(worst, npairs, per)


def match_spectra(coarse: np.ndarray, fine: np.ndarray) -> np.ndarray:
    """Distance from each coarse eigenvalue to its assigned fine eigenvalue."""
    if not coarse.size:
        return np.zeros(0)
    cost = np.abs(coarse[:, None] - fine[None, :])
    r, c = linear_sum_assignment(cost)
    out = np.empty(len(coarse))
    out[r] = cost[r, c]
    return out


def mark_convergence(coarse: Spectrum, fine: Spectrum, tol: float = 1e-6) -> Spectrum:
    """Flag coarse eigenvalues that move by less than ``tol`` under refinement."""
    for k in coarse.degrees:
        delta = match_spectra(coarse.values[k], fine.values[k])
        coarse.deltas[k] = delta
        coarse.converged[k] = delta < tol
    return coarse


def write_eigenvalue_csv(spec: Spectrum, path, zeros: ZeroModeReport | None = None) -> None:
    zeros = zeros or zero_modes(spec)
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        wr = csv.writer(fh, lineterminator="\n")
        for k in spec.degrees:
            zset = set(int(i) for i in zeros.indices.get(k, []))
            order = np.lexsort((spec.values[k].imag, spec.values[k].real))
            for i in order:
                lam = spec.values[k][i]
                wr.writerow([k, repr(float(lam.real)), repr(float(lam.imag)),
                             int(i in zset), int(bool(spec.converged[k][i]))])


def read_eigenvalue_csv(path) -> list:
    with open(path) as fh:
        rd = csv.DictReader(fh)
        return [dict(degree=int(r["degree"]), value=complex(float(r["re"]), float(r["im"])),
                     zero=bool(int(r["is_zero_mode"])), converged=bool(int(r["converged"])))
                for r in rd]
