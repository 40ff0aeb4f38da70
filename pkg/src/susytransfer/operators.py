"""Graded operators on truncated form bases.

Torus blocks are assembled as sums of Kronecker products
``mask matrix (x) wave matrix``, matching the basis enumeration (mask-major
inside each degree).  Products of Lie derivatives are formed through a
padded intermediate wave space, so every assembled operator is the exact
Galerkin projection of its continuum counterpart (up to the representation
of non-polynomial geometric coefficients).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import FormBasis, KFormVector, Line, Torus, WaveSet, make_basis, mask_bits, masks_of_degree, wedge_sign
from .geometry import (
    GeometryBundle,
    TrigPolyField,
    check_vielbein,
    einsum,
    geometry_bundle,
    gram_fields,
    pointwise,
    weitzenbock_connection,
    star_fields,
)

MAX_BLOCK = 8192


class OperatorError(ValueError):
    pass


# mask-level (ghost) matrices

@lru_cache(maxsize=None)
def ext_matrix(dim: int, j: int, k: int) -> np.ndarray:
    """dx^j ^ (.) from degree k to k+1, rows/cols in standard mask order."""
    src = masks_of_degree(dim, k)
    dst = masks_of_degree(dim, k + 1) if k < dim else []
    out = np.zeros((len(dst), len(src)))
    for c, m in enumerate(src):
        if not m >> j & 1:
            out[dst.index(m | 1 << j), c] = wedge_sign(m, j)
    return out


@lru_cache(maxsize=None)
def int_matrix(dim: int, j: int, k: int) -> np.ndarray:
    """Contraction with d/dx^j from degree k to k-1."""
    if k == 0:
        return np.zeros((0, 1))
    return ext_matrix(dim, j, k - 1).T.copy()


def conv_matrix(f: TrigPolyField, out_set: WaveSet, in_set: WaveSet) -> sp.csr_matrix:
    """C[m, n] = fhat(m - n) for m in out_set, n in in_set."""
    if f.shape != ():
        raise OperatorError("convolution needs a scalar field")
    rows, cols, vals = [], [], []
    n_in = in_set.vectors
    col_idx = np.arange(in_set.size)
    for p in f.support():
        c = f.coefficient(p)
        m = out_set.index(n_in + p)
        ok = m >= 0
        rows.append(m[ok])
        cols.append(col_idx[ok])
        vals.append(np.full(ok.sum(), c))
    if not rows:
        return sp.csr_matrix((out_set.size, in_set.size), dtype=complex)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(out_set.size, in_set.size), dtype=complex,
    )


def deriv_matrix(waves: WaveSet, j: int) -> sp.dia_matrix:
    return sp.diags(1j * waves.vectors[:, j].astype(float)).tocsr()


def _kron(a: np.ndarray, b) -> sp.csr_matrix:
    return sp.kron(sp.csr_matrix(a), b, format="csr")


def _zero(rows: int, cols: int):
    return sp.csr_matrix((rows, cols), dtype=complex)


# graded operator container

@dataclass
class GradedOperator:
    """Per-degree blocks keyed by source degree; ``shift`` is +1, 0 or -1."""

    shift: int
    blocks: dict
    basis: FormBasis = field(repr=False)
    name: str = ""

    def __post_init__(self):
        for k, b in self.blocks.items():
            want = (self.basis.degree_dim(k + self.shift), self.basis.degree_dim(k))
            if b.shape != want:
                raise OperatorError(f"{self.name} block {k} has shape {b.shape}, expected {want}")

    @property
    def kind(self) -> str:
        return {0: "degree-preserving", 1: "degree-raising", -1: "degree-lowering"}[self.shift]

    def sparse(self, k: int):
        if k in self.blocks:
            return sp.csr_matrix(self.blocks[k])
        return _zero(self.basis.degree_dim(k + self.shift), self.basis.degree_dim(k))

    def block(self, k: int) -> np.ndarray:
        """Dense complex block acting on degree k."""
        b = self.blocks.get(k)
        if b is None:
            return np.zeros((self.basis.degree_dim(k + self.shift), self.basis.degree_dim(k)), complex)
        if max(b.shape) > MAX_BLOCK:
            raise OperatorError(f"block order {max(b.shape)} exceeds cap {MAX_BLOCK}")
        return b.toarray() if sp.issparse(b) else np.asarray(b, dtype=complex)

    def apply(self, form: KFormVector) -> KFormVector:
        k = form.degree
        out = self.sparse(k) @ form.coefficients
        return KFormVector(k + self.shift, np.asarray(out).ravel(), self.basis)

    def norm(self) -> float:
        """Exact spectral norm, max over blocks."""
        best = 0.0
        for b in self.blocks.values():
            if min(b.shape) == 0:
                continue
            if min(b.shape) <= 600:
                dense = b.toarray() if sp.issparse(b) else b
                best = max(best, float(np.linalg.norm(dense, 2)))
            else:
                s = spla.svds(sp.csr_matrix(b), k=1, return_singular_vectors=False, tol=1e-10,
                              random_state=0)
                best = max(best, float(s[0]))
        return best

    def __add__(self, other: "GradedOperator") -> "GradedOperator":
        if other.shift != self.shift:
            raise OperatorError("cannot add operators of different shift")
        keys = set(self.blocks) | set(other.blocks)
        return GradedOperator(self.shift, {k: self.sparse(k) + other.sparse(k) for k in keys}, self.basis)

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def scaled(self, c) -> "GradedOperator":
        return GradedOperator(self.shift, {k: self.sparse(k) * c for k in self.blocks}, self.basis, self.name)

    def compose(self, other: "GradedOperator") -> "GradedOperator":
        """self o other."""
        blocks = {}
        for k in other.blocks:
            mid = k + other.shift
            if mid in self.blocks:
                blocks[k] = self.sparse(mid) @ other.sparse(k)
        return GradedOperator(self.shift + other.shift, blocks, self.basis)

    def max_entry(self) -> float:
        m = 0.0
        for b in self.blocks.values():
            if sp.issparse(b):
                if b.nnz:
                    m = max(m, float(np.max(np.abs(b.data))))
            elif b.size:
                m = max(m, float(np.max(np.abs(b))))
        return m


def anticommutator(a: GradedOperator, b: GradedOperator) -> GradedOperator:
    return a.compose(b) + b.compose(a)


def commutator(a: GradedOperator, b: GradedOperator) -> GradedOperator:
    return a.compose(b) - b.compose(a)


# torus assembly

def _torus_d_blocks(dim: int, waves: WaveSet) -> dict:
    blocks = {}
    for k in range(dim):
        blocks[k] = sum(_kron(ext_matrix(dim, j, k), deriv_matrix(waves, j)) for j in range(dim))
    return blocks


def _torus_iota_blocks(dim: int, comps, out_set: WaveSet, in_set: WaveSet) -> dict:
    """Contraction with a vector field given as D scalar TrigPolyFields."""
    convs = [conv_matrix(c, out_set, in_set) for c in comps]
    blocks = {}
    for k in range(1, dim + 1):
        blocks[k] = sum(_kron(int_matrix(dim, j, k), convs[j]) for j in range(dim))
    return blocks


def _torus_lie_blocks(dim: int, comps, out_set: WaveSet, in_set: WaveSet) -> dict:
    iota = _torus_iota_blocks(dim, comps, out_set, in_set)
    d_in = _torus_d_blocks(dim, in_set)
    d_out = _torus_d_blocks(dim, out_set)
    blocks = {}
    for k in range(dim + 1):
        acc = None
        if k >= 1:
            acc = d_out[k - 1] @ iota[k]
        if k < dim:
            t = iota[k + 1] @ d_in[k]
            acc = t if acc is None else acc + t
        blocks[k] = acc.tocsr()
    return blocks


def _components(vec: TrigPolyField, dim: int):
    if vec.shape != (dim,):
        raise OperatorError(f"vector field must have shape ({dim},), got {vec.shape}")
    return [vec[j] for j in range(dim)]


def _column(e: TrigPolyField, a: int) -> TrigPolyField:
    return TrigPolyField(e.coeffs[:, a], e.dim)


# line assembly

def _as_poly(f) -> np.polynomial.Polynomial:
    if isinstance(f, np.polynomial.Polynomial):
        return f
    return np.polynomial.Polynomial([float(f)])


LINE_ORDER = 12


def staggered_weights(order: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Interpolation and first-derivative weights at offsets (j - 1/2), j = 1..order/2.

    Returned for the positive offsets only; the stencils are symmetric
    (interpolation) and antisymmetric (derivative).
    """
    order = order or LINE_ORDER
    m = order // 2
    off = np.concatenate([-(np.arange(m)[::-1] + 0.5), np.arange(m) + 0.5])
    # Vandermonde moment conditions sum_j w_j off_j^p = delta(p, q) * q!
    v = np.vander(off, order, increasing=True).T
    interp = np.linalg.solve(v, np.eye(order)[:, 0])
    deriv = np.linalg.solve(v, np.eye(order)[:, 1])
    return interp[m:], deriv[m:]


def _staggered(n_out: int, n_in: int, w: np.ndarray, sign: float, nodes_to_cells: bool) -> sp.csr_matrix:
    """Banded staggered stencil with zero extension outside [-L, L]."""
    rows, cols, vals = [], [], []
    for j, wj in enumerate(w):
        for side, coef in ((1, wj), (-1, sign * wj)):
            for r in range(n_out):
                # nodes_to_cells: cell r sits between nodes r-1 and r
                # cells_to_nodes: node r sits between cells r and r+1
                if nodes_to_cells:
                    c = r + j if side > 0 else r - 1 - j
                else:
                    c = r + 1 + j if side > 0 else r - j
                if 0 <= c < n_in:
                    rows.append(r)
                    cols.append(c)
                    vals.append(coef)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in), dtype=complex)


def line_difference(basis: FormBasis) -> sp.csr_matrix:
    """High-order staggered derivative from interior nodes to cells (zero boundary values)."""
    n, h = basis.grid.cells, basis.grid.h
    _, w = staggered_weights()
    return _staggered(n, n - 1, w / h, -1.0, True)


def line_codifference(basis: FormBasis) -> sp.csr_matrix:
    """Staggered derivative from cells to interior nodes."""
    n, h = basis.grid.cells, basis.grid.h
    _, w = staggered_weights()
    return _staggered(n - 1, n, w / h, -1.0, False)


def line_interp(basis: FormBasis) -> sp.csr_matrix:
    n = basis.grid.cells
    w, _ = staggered_weights()
    return _staggered(n - 1, n, w, 1.0, False)


def line_iota(basis: FormBasis, f) -> sp.csr_matrix:
    """Contraction of cell-valued 1-forms with f: interpolate to nodes, multiply by f."""
    fx = _as_poly(f)(basis.grid.nodes)
    return (sp.diags(fx) @ line_interp(basis)).tocsr()


def _line_blocks(basis: FormBasis, flux: sp.csr_matrix) -> dict:
    """{0: A d, 1: d A} for a cells-to-nodes flux map A; commutes with d by construction."""
    dd = line_difference(basis)
    return {0: (flux @ dd).tocsr(), 1: (dd @ flux).tocsr()}


def _line_lie_blocks(basis: FormBasis, f) -> dict:
    return _line_blocks(basis, line_iota(basis, f))


def line_diffusion_flux(basis: FormBasis, e) -> sp.csr_matrix:
    """Flux map w -> e (e w)' from cells to nodes.

    Composing two discrete Lie derivatives would route the inner contraction
    through the interpolation stencil, whose alternating-sign kernel then
    shows up as spurious zero modes; the compact form avoids it.
    """
    g = basis.grid
    p = _as_poly(e)
    return (sp.diags(p(g.nodes)) @ line_codifference(basis) @ sp.diags(p(g.midpoints))).tocsr()


# public assembly functions

def exterior_derivative(basis: FormBasis) -> GradedOperator:
    if basis.kind == "line":
        return GradedOperator(1, {0: line_difference(basis)}, basis, "d")
    return GradedOperator(1, _torus_d_blocks(basis.dim, basis.waves), basis, "d")


def interior_product(basis: FormBasis, field) -> GradedOperator:
    if basis.kind == "line":
        return GradedOperator(-1, {1: line_iota(basis, field)}, basis, "iota")
    comps = _components(field, basis.dim)
    return GradedOperator(-1, _torus_iota_blocks(basis.dim, comps, basis.waves, basis.waves), basis, "iota")


def lie_derivative(basis: FormBasis, field) -> GradedOperator:
    """L = d iota + iota d with the truncated contraction."""
    if basis.kind == "line":
        return GradedOperator(0, _line_lie_blocks(basis, field), basis, "lie")
    comps = _components(field, basis.dim)
    return GradedOperator(0, _torus_lie_blocks(basis.dim, comps, basis.waves, basis.waves), basis, "lie")


def lie_squared(basis: FormBasis, field) -> GradedOperator:
    """Galerkin projection of L_X o L_X, formed through a padded wave space."""
    if basis.kind == "line":
        lie = _line_lie_blocks(basis, field)
        return GradedOperator(0, {k: (b @ b).tocsr() for k, b in lie.items()}, basis, "lie2")
    comps = _components(field, basis.dim)
    pad = max(c.harmonic for c in comps)
    wide = WaveSet(basis.dim, basis.n_cut + pad)
    up = _torus_lie_blocks(basis.dim, comps, wide, basis.waves)
    down = _torus_lie_blocks(basis.dim, comps, basis.waves, wide)
    return GradedOperator(0, {k: (down[k] @ up[k]).tocsr() for k in up}, basis, "lie2")


def laplace_diff(basis: FormBasis, e) -> GradedOperator:
    """Diffusion Laplacian -sum_a L_{e_a}^2 (non-negative on flat tori)."""
    if basis.kind == "line":
        flux = line_diffusion_flux(basis, e)
        return GradedOperator(0, _line_blocks(basis, flux), basis, "laplace_diff").scaled(-1.0)
    check_vielbein(e)
    acc = None
    for a in range(basis.dim):
        sq = lie_squared(basis, _column(e, a))
        acc = sq if acc is None else acc + sq
    out = acc.scaled(-1.0)
    out.name = "laplace_diff"
    return out


def assemble_H_strat(F, e, temperature: float, basis: FormBasis) -> GradedOperator:
    """H = L_F - T sum_a L_{e_a}^2."""
    if temperature < 0:
        raise OperatorError("temperature must be non-negative")
    h = lie_derivative(basis, F) + laplace_diff(basis, e).scaled(temperature)
    h.name = "H_strat"
    return h


def ito_drift(e, temperature: float, basis: FormBasis | None = None):
    """v^i = T sum_a e^j_a d_j e^i_a, the Ito to Stratonovich drift shift."""
    if isinstance(e, TrigPolyField):
        return einsum("ja,iaj->i", e, e.gradient()) * temperature
    p = _as_poly(e)
    return p * p.deriv() * temperature


def assemble_H_ito(F, e, temperature: float, basis: FormBasis) -> GradedOperator:
    """H_ito = H_strat - L_v."""
    v = ito_drift(e, temperature, basis)
    h = assemble_H_strat(F, e, temperature, basis) - lie_derivative(basis, v)
    h.name = "H_ito"
    return h


def bar_d_fields(geo: GeometryBundle, n_samples: int):
    """Coefficient fields of bar_d.

    The connection is re-expanded from ``n_samples`` points per axis and then
    multiplied exactly by the (polynomial) metric.  Returns (A, B) with
    A[i, j] = g^{ij} and B[i, k, l] = sum_j g^{ij} Gt^l_{kj}.
    """
    n_samples = max(n_samples, 4 * geo.vielbein.harmonic + 1) | 1
    w = weitzenbock_connection(geo.vielbein, n_samples)
    return geo.metric_inv, einsum("ij,lkj->ikl", geo.metric_inv, w)


def assemble_bar_d(basis: FormBasis, geo: GeometryBundle, n_samples: int | None = None) -> GradedOperator:
    """bar_d = -d/dchi^i g^{ij} (d_j - Gt^l_{kj} chi^k d/dchi^l)."""
    if basis.kind != "torus":
        raise OperatorError("bar_d is only assembled on torus bases")
    d = basis.dim
    n = n_samples or max(4 * geo.vielbein.harmonic + 1, 2 * basis.n_cut + 1)
    a_field, b_field = bar_d_fields(geo, n)
    w = basis.waves
    blocks = {}
    for k in range(1, d + 1):
        acc = _zero(basis.degree_dim(k - 1), basis.degree_dim(k))
        for i in range(d):
            for j in range(d):
                cm = conv_matrix(a_field[i, j], w, w) @ deriv_matrix(w, j)
                acc = acc - _kron(int_matrix(d, i, k), cm)
            for kk in range(d):
                for l in range(d):
                    ghost = int_matrix(d, i, k) @ ext_matrix(d, kk, k - 1) @ int_matrix(d, l, k)
                    if not ghost.any():
                        continue
                    acc = acc + _kron(ghost, conv_matrix(b_field[i, kk, l], w, w))
        blocks[k] = acc.tocsr()
    return GradedOperator(-1, blocks, basis, "bar_d")


def hodge_star(basis: FormBasis, geo: GeometryBundle, n_samples: int | None = None,
               out_waves: WaveSet | None = None, in_waves: WaveSet | None = None) -> dict:
    """Galerkin Hodge star matrices, degree k -> D-k, keyed by source degree."""
    if basis.kind != "torus":
        raise OperatorError("Hodge star is only assembled on torus bases")
    d = basis.dim
    n = n_samples or geo.n_samples
    win = in_waves or basis.waves
    wout = out_waves or basis.waves
    out = {}
    for k in range(d + 1):
        s = star_fields(geo.metric_inv, k, n)
        rows = []
        for r in range(s.shape[0]):
            rows.append([conv_matrix(s[r, c], wout, win) for c in range(s.shape[1])])
        out[k] = sp.bmat(rows, format="csr")
    return out


def gram_matrices(basis: FormBasis, geo: GeometryBundle, n_samples: int | None = None) -> dict:
    """G_k[(J, m), (I, n)] = <dx^J e^{imx} | dx^I e^{inx}>, Hermitian positive definite."""
    d = basis.dim
    n = n_samples or geo.n_samples
    w = basis.waves
    out = {}
    for k in range(d + 1):
        h = gram_fields(geo.metric_inv, k, n)
        m = h.shape[0]
        rows = [[conv_matrix(h[b, a], w, w) for a in range(m)] for b in range(m)]
        out[k] = (sp.bmat(rows, format="csr") * (2 * np.pi) ** d).toarray()
    return out


def codifferential(basis: FormBasis, geo: GeometryBundle, n_samples: int | None = None) -> GradedOperator:
    """Adjoint of d in the Hodge inner product: d^dag_k = G_{k-1}^{-1} d^H G_k."""
    gram = gram_matrices(basis, geo, n_samples)
    dd = exterior_derivative(basis)
    blocks = {}
    for k in range(1, basis.dim + 1):
        rhs = dd.block(k - 1).conj().T @ gram[k]
        blocks[k] = sla.solve(gram[k - 1], rhs, assume_a="pos")
    return GradedOperator(-1, blocks, basis, "d_dagger")


def assemble_hodge_laplacian(basis: FormBasis, geo: GeometryBundle, n_samples: int | None = None) -> GradedOperator:
    """Delta_H = d d^dag + d^dag d."""
    ddag = codifferential(basis, geo, n_samples)
    dd = exterior_derivative(basis)
    lap = anticommutator(dd, ddag)
    lap = GradedOperator(0, {k: lap.block(k) for k in range(basis.dim + 1)}, basis, "laplace_hodge")
    return lap


class OperatorSet:
    """Lazily assembled operators of one scenario."""

    def __init__(self, basis: FormBasis, F, e, temperature: float, geometry_samples: int | None = None):
        self.basis = basis
        self.F = F
        self.e = e
        self.temperature = float(temperature)
        self._geo_samples = geometry_samples
        if basis.kind == "torus":
            check_vielbein(e)

    @cached_property
    def geometry(self) -> GeometryBundle:
        if self.basis.kind != "torus":
            raise OperatorError("geometry bundle needs a torus basis")
        return geometry_bundle(self.e, self._geo_samples)

    @cached_property
    def d(self) -> GradedOperator:
        return exterior_derivative(self.basis)

    @cached_property
    def lie_F(self) -> GradedOperator:
        return lie_derivative(self.basis, self.F)

    @cached_property
    def lie_e(self) -> list:
        if self.basis.kind == "line":
            return [lie_derivative(self.basis, self.e)]
        return [lie_derivative(self.basis, _column(self.e, a)) for a in range(self.basis.dim)]

    @cached_property
    def laplace_diff(self) -> GradedOperator:
        return laplace_diff(self.basis, self.e)

    @cached_property
    def H_strat(self) -> GradedOperator:
        h = self.lie_F + self.laplace_diff.scaled(self.temperature)
        h.name = "H_strat"
        return h

    @cached_property
    def ito_field(self):
        return ito_drift(self.e, self.temperature)

    @cached_property
    def H_ito(self) -> GradedOperator:
        h = self.H_strat - lie_derivative(self.basis, self.ito_field)
        h.name = "H_ito"
        return h

    @cached_property
    def bar_d(self) -> GradedOperator:
        return assemble_bar_d(self.basis, self.geometry)

    @cached_property
    def laplace_hodge(self) -> GradedOperator:
        return assemble_hodge_laplacian(self.basis, self.geometry)


# invariant checks

def nilpotency_residual(d: GradedOperator) -> float:
    """max |d o d| entry; zero for exact assembly."""
    sq = d.compose(d)
    for b in sq.blocks.values():
        if sp.issparse(b):
            b.eliminate_zeros()
    return sq.max_entry()


def d_commutator_residual(d: GradedOperator, h: GradedOperator) -> float:
    return commutator(d, h).max_entry()


# binary dump

_HEADER = struct.Struct("<qqq")


def dump_blocks(op: GradedOperator, path) -> None:
    """Write blocks as: header (degree, rows, cols) int64 LE, then row-major complex128 LE."""
    with open(path, "wb") as fh:
        for k in sorted(op.blocks):
            b = op.block(k)
            fh.write(_HEADER.pack(k, *b.shape))
            fh.write(np.ascontiguousarray(b, dtype="<c16").tobytes())


def load_blocks(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        k, r, c = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        n = r * c * 16
        out[k] = np.frombuffer(data[pos:pos + n], dtype="<c16").reshape(r, c).copy()
        pos += n
    return out
