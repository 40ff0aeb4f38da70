"""Truncated bases for differential forms on flat tori and on a line segment.

Torus bases are Fourier-Galerkin: a basis element is a pair (mask, n) where
``mask`` is a bit set of coordinate directions (the ghost content
dx^{i1} ^ ... ^ dx^{ik}, indices sorted) and ``n`` a wavevector with
``|n_j| <= N``.  The element represents ``exp(i n.x) dx^I``.

Enumeration is degree-major, then mask by increasing integer value, then
wavevector in lexicographic order (first component most significant).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np


class UndefinedWedgeError(ValueError):
    pass


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class Torus:
    dim: int
    n_cut: int


@dataclass(frozen=True)
class Line:
    half_width: float
    grid_count: int


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def mask_bits(mask: int) -> tuple[int, ...]:
    return tuple(j for j in range(mask.bit_length()) if mask >> j & 1)


def masks_of_degree(dim: int, k: int) -> list[int]:
    """Masks with k set bits among ``dim``, sorted by integer value."""
    out = [sum(1 << j for j in c) for c in combinations(range(dim), k)]
    return sorted(out)


def wedge_sign(mask: int, insert_index: int) -> int:
    """Sign of dx^j ^ dx^I relative to the sorted product.

    Equals (-1)^(number of set bits of ``mask`` below ``insert_index``).
    """
    if mask >> insert_index & 1:
        raise UndefinedWedgeError(f"index {insert_index} already present in mask {mask:b}")
    below = mask & ((1 << insert_index) - 1)
    return -1 if popcount(below) % 2 else 1


class WaveSet:
    """All integer wavevectors in [-N, N]^D in lexicographic order."""

    def __init__(self, dim: int, n_cut: int):
        if dim < 1:
            raise BasisError("dimension must be positive")
        if n_cut < 0:
            raise BasisError("cutoff must be non-negative")
        self.dim = dim
        self.n_cut = n_cut
        self.side = 2 * n_cut + 1
        self.size = self.side**dim
        grids = np.meshgrid(*([np.arange(-n_cut, n_cut + 1)] * dim), indexing="ij")
        self.vectors = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
        self._strides = self.side ** np.arange(dim - 1, -1, -1)

    def index(self, n) -> np.ndarray:
        """Linear index of wavevector(s) ``n``; -1 where outside the cutoff."""
        n = np.asarray(n, dtype=np.int64)
        inside = np.all(np.abs(n) <= self.n_cut, axis=-1)
        idx = (n + self.n_cut) @ self._strides
        return np.where(inside, idx, -1)

    def __eq__(self, other):
        return isinstance(other, WaveSet) and (self.dim, self.n_cut) == (other.dim, other.n_cut)

    def __hash__(self):
        return hash((self.dim, self.n_cut))

    def __repr__(self):
        return f"WaveSet(dim={self.dim}, n_cut={self.n_cut})"


@dataclass(frozen=True)
class LineGrid:
    """Staggered grid on [-L, L]: 1-forms on cells, 0-forms on interior nodes."""

    half_width: float
    cells: int

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.cells

    @property
    def nodes(self) -> np.ndarray:
        return -self.half_width + self.h * np.arange(1, self.cells)

    @property
    def midpoints(self) -> np.ndarray:
        return -self.half_width + self.h * (np.arange(self.cells) + 0.5)


class FormBasis:
    """Enumeration of a truncated exterior algebra.

    Use :func:`make_basis` rather than the constructor.
    """

    def __init__(self, manifold: Torus | Line):
        self.manifold = manifold
        if isinstance(manifold, Torus):
            self.kind = "torus"
            self.dim = manifold.dim
            self.n_cut = manifold.n_cut
            self.waves = WaveSet(self.dim, self.n_cut)
            self.grid = None
            self.masks = [masks_of_degree(self.dim, k) for k in range(self.dim + 1)]
            self.dims = [len(m) * self.waves.size for m in self.masks]
        else:
            self.kind = "line"
            self.dim = 1
            self.n_cut = None
            self.waves = None
            self.grid = LineGrid(manifold.half_width, manifold.grid_count)
            self.masks = [[0], [1]]
            self.dims = [manifold.grid_count - 1, manifold.grid_count]
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        self.size = int(self.offsets[-1])

    @property
    def degrees(self) -> range:
        return range(self.dim + 1)

    def degree_dim(self, k: int) -> int:
        if k < 0 or k > self.dim:
            return 0
        return self.dims[k]

    def index(self, mask: int, n) -> int:
        """Global linear index of the element (mask, n) (n = node/cell index on a line)."""
        k = popcount(mask)
        pos = self.masks[k].index(mask)
        if self.kind == "torus":
            w = int(self.waves.index(n))
            if w < 0:
                raise BasisError(f"wavevector {tuple(n)} outside cutoff {self.n_cut}")
            return int(self.offsets[k] + pos * self.waves.size + w)
        n = int(n)
        if not 0 <= n < self.dims[k]:
            raise BasisError("grid index out of range")
        return int(self.offsets[k] + n)

    def element(self, index: int):
        """Inverse of :meth:`index`: returns (mask, wavevector tuple or grid index)."""
        if not 0 <= index < self.size:
            raise BasisError("index out of range")
        k = int(np.searchsorted(self.offsets, index, side="right") - 1)
        local = index - self.offsets[k]
        if self.kind == "torus":
            pos, w = divmod(int(local), self.waves.size)
            return self.masks[k][pos], tuple(int(v) for v in self.waves.vectors[w])
        return self.masks[k][0], int(local)

    def __repr__(self):
        return f"FormBasis({self.manifold}, dims={self.dims})"


def make_basis(manifold: Torus | Line) -> FormBasis:
    if isinstance(manifold, Torus):
        if manifold.dim not in (1, 2, 3):
            raise BasisError(f"unsupported torus dimension {manifold.dim}")
        if manifold.n_cut <= 0:
            raise BasisError("N_cut must be positive")
    elif isinstance(manifold, Line):
        if manifold.half_width <= 0:
            raise BasisError("half width must be positive")
        if manifold.grid_count < 16:
            raise BasisError("line grid needs at least 16 cells")
    else:
        raise BasisError(f"unknown manifold {manifold!r}")
    return FormBasis(manifold)


@dataclass
class KFormVector:
    degree: int
    coefficients: np.ndarray
    basis: FormBasis = field(repr=False)

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=complex)
        if self.coefficients.shape != (self.basis.degree_dim(self.degree),):
            raise BasisError("coefficient count does not match basis degree dimension")

    def component(self, mask: int) -> np.ndarray:
        """Coefficients of one mask, reshaped to (2N+1,)*D on a torus."""
        b = self.basis
        if b.kind == "line":
            return self.coefficients
        pos = b.masks[self.degree].index(mask)
        m = b.waves.size
        return self.coefficients[pos * m:(pos + 1) * m].reshape((b.waves.side,) * b.dim)

    def conjugate_residual(self) -> float:
        """max |c(-n) - conj(c(n))| over masks, zero for real forms."""
        b = self.basis
        if b.kind == "line":
            return float(np.max(np.abs(self.coefficients.imag), initial=0.0))
        res = 0.0
        flip = tuple(slice(None, None, -1) for _ in range(b.dim))
        for mask in b.masks[self.degree]:
            c = self.component(mask)
            res = max(res, float(np.max(np.abs(c[flip] - np.conj(c)))))
        return res

    def integral(self) -> complex:
        """Integral over the phase space (top degree only)."""
        if self.degree != self.basis.dim:
            raise BasisError("only top-degree forms integrate to numbers")
        b = self.basis
        if b.kind == "line":
            return complex(b.grid.h * self.coefficients.sum())
        centre = b.waves.size // 2
        return complex((2 * np.pi) ** b.dim * self.coefficients[centre])


def fourier_eval(coeffs: np.ndarray, n_cut: int, points: np.ndarray) -> np.ndarray:
    """Evaluate sum_n c[..., n] exp(i n.x) at points of shape (P, D).

    ``coeffs`` has trailing D axes of length 2*n_cut+1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    dim = points.shape[1]
    ks = np.arange(-n_cut, n_cut + 1)
    phases = [np.exp(1j * np.outer(points[:, j], ks)) for j in range(dim)]
    lead = coeffs.shape[: coeffs.ndim - dim]
    flat = coeffs.reshape((-1,) + coeffs.shape[-dim:])
    if dim == 1:
        out = flat @ phases[0].T
    elif dim == 2:
        out = np.einsum("cab,pa,pb->cp", flat, phases[0], phases[1], optimize=True)
    else:
        # contract the last axis first; one pass per axis keeps the cost at O(c n^2 p)
        t = flat @ phases[2].T
        t = np.einsum("cabp,pb->cap", t, phases[1])
        out = np.einsum("cap,pa->cp", t, phases[0])
    return out.reshape(lead + (points.shape[0],))


def eval_density(form: KFormVector, point, rtol: float = 1e-8) -> float:
    """Coefficient function of dx^1 ^ ... ^ dx^D at ``point``."""
    b = form.basis
    if form.degree != b.dim:
        raise BasisError(f"eval_density needs a degree-{b.dim} form, got degree {form.degree}")
    scale = float(np.max(np.abs(form.coefficients), initial=0.0))
    if b.kind == "line":
        x = float(np.ravel(point)[0])
        val = np.interp(x, b.grid.midpoints, form.coefficients.real, left=0.0, right=0.0)
        imag = np.interp(x, b.grid.midpoints, form.coefficients.imag, left=0.0, right=0.0)
    else:
        p = np.asarray(point, dtype=float).reshape(1, b.dim)
        z = fourier_eval(form.component((1 << b.dim) - 1), b.n_cut, p)[0]
        val, imag = z.real, z.imag
    if abs(imag) > rtol * max(scale, np.finfo(float).tiny):
        raise BasisError(f"density has imaginary residual {abs(imag):.3e}")
    return float(val)
