"""Trigonometric-polynomial fields and noise-induced geometry on flat tori.

Index conventions used throughout:

* vielbein ``e[i, a]`` = e^i_a (coordinate index first, noise channel second)
* inverse vielbein ``E[a, i]`` = e^a_i
* Weitzenboeck connection ``W[k, j, i]`` = Gt^k_{ji} = e^k_a d_j e^a_i, so the
  first lower slot is the derivative direction and the second the leg of the
  differentiated inverse vielbein
* Levi-Civita ``G[l, j, k]`` = Gamma^l_{jk}
* torsion ``T[l, j, k]`` = Gt^l_{kj} - Gt^l_{jk}
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .forms import FormBasis, WaveSet, fourier_eval, masks_of_degree, mask_bits


class GeometryError(ValueError):
    pass


def _grid(dim: int, n: int):
    x = 2 * np.pi * np.arange(n) / n
    return np.meshgrid(*([x] * dim), indexing="ij")


class TrigPolyField:
    """Tensor-valued trigonometric polynomial on T^D.

    ``coeffs`` has shape ``shape + (2K+1,)*dim``; entry ``[..., n]`` is the
    coefficient of exp(i n.x) with n shifted by K.
    """

    def __init__(self, coeffs, dim: int):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.ndim < dim:
            raise GeometryError("coefficient array has too few axes")
        sides = coeffs.shape[coeffs.ndim - dim:]
        if len(set(sides)) != 1 or sides[0] % 2 == 0:
            raise GeometryError("Fourier axes must share one odd length")
        self.coeffs = coeffs
        self.dim = dim
        self.harmonic = (sides[0] - 1) // 2
        self.shape = coeffs.shape[: coeffs.ndim - dim]

    # construction
    @classmethod
    def zeros(cls, dim: int, shape=(), harmonic: int = 0):
        return cls(np.zeros(tuple(shape) + (2 * harmonic + 1,) * dim, complex), dim)

    @classmethod
    def constant(cls, value, dim: int):
        value = np.asarray(value, dtype=complex)
        return cls(value.reshape(value.shape + (1,) * dim), dim)

    @classmethod
    def from_terms(cls, dim: int, terms, shape=()):
        """Build from (component, wavevector, coefficient) triples."""
        terms = list(terms)
        k = max([max(abs(int(v)) for v in n) for _, n, _ in terms], default=0)
        f = cls.zeros(dim, shape, k)
        for comp, n, c in terms:
            comp = tuple(np.atleast_1d(comp).astype(int)) if shape else ()
            idx = comp + tuple(int(v) + k for v in n)
            f.coeffs[idx] += c
        return f

    @classmethod
    def from_samples(cls, values, dim: int, trim: float = 1e-15):
        """Re-expand samples on the uniform grid x_j = 2 pi j / n (n odd)."""
        values = np.asarray(values)
        n = values.shape[-1]
        if n % 2 == 0:
            raise GeometryError("sample grids must have odd length")
        axes = tuple(range(values.ndim - dim, values.ndim))
        c = np.fft.fftshift(np.fft.fftn(values, axes=axes), axes=axes) / n**dim
        if trim:
            scale = np.max(np.abs(c), initial=0.0)
            c[np.abs(c) <= trim * scale] = 0.0
        return cls(c, dim)

    @classmethod
    def from_function(cls, func, dim: int, n_samples: int, shape=None):
        """Sample ``func(*coords)`` on an odd grid and re-expand."""
        if n_samples % 2 == 0:
            n_samples += 1
        vals = np.asarray(func(*_grid(dim, n_samples)), dtype=complex)
        if shape is not None:
            vals = np.broadcast_to(vals, tuple(shape) + (n_samples,) * dim)
        return cls.from_samples(vals, dim)

    # evaluation
    def samples(self, n: int) -> np.ndarray:
        """Values on the n^D uniform grid (exact for n >= 2K+1)."""
        k = self.harmonic
        if n < 2 * k + 1:
            raise GeometryError(f"grid of {n} points aliases harmonic {k}")
        lead = len(self.shape)
        full = np.zeros(self.shape + (n,) * self.dim, complex)
        ks = np.arange(-k, k + 1) % n
        full[(Ellipsis,) + np.ix_(*([ks] * self.dim))] = self.coeffs
        axes = tuple(range(lead, lead + self.dim))
        return np.fft.ifftn(full, axes=axes) * n**self.dim

    def __call__(self, points) -> np.ndarray:
        return fourier_eval(self.coeffs, self.harmonic, points)

    def coefficient(self, n, comp=()) -> complex:
        n = tuple(int(v) for v in n)
        if max(abs(v) for v in n) > self.harmonic:
            return 0j
        return complex(self.coeffs[tuple(comp) + tuple(v + self.harmonic for v in n)])

    # algebra
    def resized(self, k: int) -> "TrigPolyField":
        """Zero-pad or truncate to harmonic ``k``."""
        src = self.harmonic
        out = np.zeros(self.shape + (2 * k + 1,) * self.dim, complex)
        m = min(k, src)
        s_src = slice(src - m, src + m + 1)
        s_out = slice(k - m, k + m + 1)
        out[(Ellipsis,) + (s_out,) * self.dim] = self.coeffs[(Ellipsis,) + (s_src,) * self.dim]
        return TrigPolyField(out, self.dim)

    def __getitem__(self, comp) -> "TrigPolyField":
        if not isinstance(comp, tuple):
            comp = (comp,)
        if len(comp) > len(self.shape):
            raise IndexError("too many component indices")
        return TrigPolyField(self.coeffs[comp], self.dim)

    def _binary(self, other, op):
        if isinstance(other, TrigPolyField):
            k = max(self.harmonic, other.harmonic)
            return TrigPolyField(op(self.resized(k).coeffs, other.resized(k).coeffs), self.dim)
        return TrigPolyField(op(self.coeffs, other), self.dim)

    def __add__(self, other):
        if not isinstance(other, TrigPolyField):
            return self + TrigPolyField.constant(np.broadcast_to(other, self.shape), self.dim)
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self + (-1) * other

    def __mul__(self, scalar):
        if isinstance(scalar, TrigPolyField):
            return einsum("...,...->...", self, scalar)
        return TrigPolyField(self.coeffs * scalar, self.dim)

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1)

    def derivative(self, axis: int) -> "TrigPolyField":
        k = self.harmonic
        n = np.arange(-k, k + 1)
        shp = [1] * self.coeffs.ndim
        shp[len(self.shape) + axis] = -1
        return TrigPolyField(self.coeffs * (1j * n).reshape(shp), self.dim)

    def gradient(self) -> "TrigPolyField":
        """Field with one extra trailing component index: the derivative direction."""
        parts = [self.derivative(j).coeffs for j in range(self.dim)]
        return TrigPolyField(np.stack(parts, axis=len(self.shape)), self.dim)

    def conjugate_residual(self) -> float:
        flip = tuple(slice(None, None, -1) for _ in range(self.dim))
        c = self.coeffs
        return float(np.max(np.abs(c[(Ellipsis,) + flip] - np.conj(c)), initial=0.0))

    def is_real(self, tol: float = 1e-12) -> bool:
        return self.conjugate_residual() <= tol * max(1.0, np.max(np.abs(self.coeffs), initial=0.0))

    def max_norm(self, n: int | None = None) -> float:
        n = n or max(2 * self.harmonic + 1, 16) | 1
        return float(np.max(np.abs(self.samples(n)), initial=0.0))

    def support(self, tol: float = 0.0):
        """Offsets n with any nonzero component coefficient."""
        mag = np.abs(self.coeffs).reshape((-1,) + self.coeffs.shape[len(self.shape):]).max(axis=0)
        idx = np.argwhere(mag > tol)
        return idx - self.harmonic

    def __repr__(self):
        return f"TrigPolyField(shape={self.shape}, dim={self.dim}, harmonic={self.harmonic})"


def einsum(subscripts: str, *fields: TrigPolyField) -> TrigPolyField:
    """Exact pointwise tensor contraction of trig-polynomial fields.

    ``subscripts`` acts on the component indices only, e.g. ``"ia,ja->ij"``.
    """
    dim = fields[0].dim
    k = sum(f.harmonic for f in fields)
    n = 2 * k + 1
    lhs, rhs = subscripts.split("->")
    ins = [s.replace("...", "") for s in lhs.split(",")]
    out = rhs.replace("...", "")
    spec = ",".join(s + "..." for s in ins) + "->" + out + "..."
    vals = np.einsum(spec, *[f.samples(n) for f in fields])
    return TrigPolyField.from_samples(vals, dim, trim=0.0).resized(k)


def pointwise(func, field: TrigPolyField, n_samples: int, out_shape=None) -> TrigPolyField:
    """Apply a nonlinear pointwise map and re-expand on an ``n_samples`` grid.

    ``func`` receives values with the grid axes first.
    """
    if n_samples % 2 == 0:
        n_samples += 1
    lead = len(field.shape)
    vals = field.samples(n_samples)
    moved = np.moveaxis(vals, list(range(lead)), list(range(vals.ndim - lead, vals.ndim)))
    res = np.asarray(func(moved))
    rlead = res.ndim - field.dim
    res = np.moveaxis(res, list(range(field.dim)), list(range(rlead, rlead + field.dim)))
    return TrigPolyField.from_samples(res, field.dim)


def default_samples(*fields: TrigPolyField, minimum: int = 0) -> int:
    k = max(f.harmonic for f in fields)
    return max(4 * k + 1, minimum) | 1


# vielbein geometry

def _grid_points(dim: int, n: int) -> np.ndarray:
    return np.stack([g.ravel() for g in _grid(dim, n)], axis=1)


def check_vielbein(e: TrigPolyField, n_samples: int | None = None, floor: float = 1e-10) -> float:
    """Minimum |det e| over a sample grid; raises on (near) singular frames."""
    if len(e.shape) != 2 or e.shape[0] != e.dim:
        raise GeometryError(f"vielbein must have shape (D, D), got {e.shape}")
    n = n_samples or default_samples(e, minimum=16)
    vals = np.moveaxis(e.samples(n), (0, 1), (-2, -1))
    if np.max(np.abs(vals.imag)) > 1e-10 * max(1.0, np.max(np.abs(vals))):
        raise GeometryError("vielbein is not real")
    dets = np.abs(np.linalg.det(vals.real))
    m = float(dets.min())
    if m < floor:
        raise GeometryError(f"vielbein is singular on the sample grid (min |det| = {m:.3e})")
    return m


def metric_from_vielbein(e: TrigPolyField) -> TrigPolyField:
    """g^{ij} = e^i_a e^j_a, exact product."""
    check_vielbein(e)
    return einsum("ia,ja->ij", e, e)


def inverse_vielbein(e: TrigPolyField, n_samples: int | None = None) -> TrigPolyField:
    check_vielbein(e, n_samples)
    n = n_samples or default_samples(e)
    return pointwise(lambda v: np.linalg.inv(v.real), e, n)


def weitzenbock_connection(e: TrigPolyField, n_samples: int | None = None) -> TrigPolyField:
    """Gt^k_{ji} = e^k_a d_j e^a_i = -(d_j e^k_b) e^b_i, sampled and re-expanded."""
    check_vielbein(e, n_samples)
    n = n_samples or default_samples(e)
    if n % 2 == 0:
        n += 1
    de = np.moveaxis(e.gradient().samples(n).real, (0, 1, 2), (-3, -2, -1))  # [.., k, b, j]
    inv = np.linalg.inv(np.moveaxis(e.samples(n).real, (0, 1), (-2, -1)))  # [.., b, i]
    w = -np.einsum("...kbj,...bi->...kji", de, inv)
    d = e.dim
    return TrigPolyField.from_samples(np.moveaxis(w, (-3, -2, -1), (0, 1, 2)), d)


def torsion(weitzenbock: TrigPolyField) -> TrigPolyField:
    """T^l_{jk} = Gt^l_{kj} - Gt^l_{jk}."""
    c = weitzenbock.coeffs
    return TrigPolyField(np.swapaxes(c, 1, 2) - c, weitzenbock.dim)


def levi_civita(g_inv: TrigPolyField, n_samples: int | None = None) -> TrigPolyField:
    """Gamma^l_{jk} = 1/2 g^{lp} (d_j g_{pk} + d_k g_{pj} - d_p g_{jk})."""
    n = n_samples or default_samples(g_inv)
    if n % 2 == 0:
        n += 1
    gi = np.moveaxis(g_inv.samples(n).real, (0, 1), (-2, -1))
    ev = np.linalg.eigvalsh(gi)
    if ev.min() <= 0:
        raise GeometryError("metric is not positive definite on the sample grid")
    # d_m g_{ij} = -g_{ia} (d_m g^{ab}) g_{bj}
    g_low = np.linalg.inv(gi)
    dgi = np.moveaxis(g_inv.gradient().samples(n).real, (0, 1, 2), (-3, -2, -1))  # [.., a, b, m]
    dg = -np.einsum("...ia,...abm,...bj->...ijm", g_low, dgi, g_low)  # d_m g_{ij}
    term = (np.einsum("...pkj->...pjk", dg) + np.einsum("...pjk->...pjk", dg)
            - np.einsum("...jkp->...pjk", dg))
    gam = 0.5 * np.einsum("...lp,...pjk->...ljk", gi, term)
    return TrigPolyField.from_samples(np.moveaxis(gam, (-3, -2, -1), (0, 1, 2)), g_inv.dim)


def metric_compatibility_residual(weitzenbock: TrigPolyField, g_inv: TrigPolyField, n: int = 32) -> float:
    """max |d_i g^{jk} + Gt^j_{ip} g^{pk} + Gt^k_{ip} g^{pj}| relative to max |d g|."""
    pts = _grid_points(g_inv.dim, n)
    dg = g_inv.gradient()(pts).real  # [j, k, i, P]
    w = weitzenbock(pts).real  # [j, i, p, P]
    g = g_inv(pts).real  # [p, k, P]
    r = dg + np.einsum("jipP,pkP->jkiP", w, g) + np.einsum("kipP,pjP->jkiP", w, g)
    scale = max(1.0, float(np.max(np.abs(dg))))
    return float(np.max(np.abs(r))) / scale


@dataclass
class GeometryBundle:
    vielbein: TrigPolyField
    metric_inv: TrigPolyField
    weitzenbock: TrigPolyField
    torsion: TrigPolyField
    levi_civita: TrigPolyField
    metric_det: TrigPolyField
    n_samples: int

    @property
    def dim(self) -> int:
        return self.vielbein.dim


def geometry_bundle(e: TrigPolyField, n_samples: int | None = None) -> GeometryBundle:
    """All derived geometry for a vielbein; non-polynomial pieces are sampled on ``n_samples``."""
    n = n_samples or default_samples(e, minimum=65 if e.dim <= 2 else 49)
    if n % 2 == 0:
        n += 1
    g_inv = metric_from_vielbein(e)
    w = weitzenbock_connection(e, n)
    det = pointwise(lambda v: 1.0 / np.linalg.det(v.real), g_inv, n)  # g = det g_{ij}
    return GeometryBundle(e, g_inv, w, torsion(w), levi_civita(g_inv, n), det, n)


# Hodge star

def _minor_dets(ginv: np.ndarray, rows_masks, cols_masks) -> np.ndarray:
    """det(g^{I,J}) for masks I (rows) and J (cols); ginv has trailing (D, D)."""
    lead = ginv.shape[:-2]
    out = np.empty(lead + (len(rows_masks), len(cols_masks)))
    for a, mi in enumerate(rows_masks):
        ri = list(mask_bits(mi))
        for b, mj in enumerate(cols_masks):
            cj = list(mask_bits(mj))
            if not ri:
                out[..., a, b] = 1.0
            else:
                out[..., a, b] = np.linalg.det(ginv[..., ri, :][..., :, cj])
    return out


def complement_sign(mask: int, dim: int) -> int:
    """epsilon(J, J^c) for the sorted index list J followed by its complement."""
    j = list(mask_bits(mask))
    perm = j + [i for i in range(dim) if i not in j]
    sign = 1
    for a in range(dim):
        for b in range(a + 1, dim):
            if perm[a] > perm[b]:
                sign = -sign
    return sign


def star_tensor(ginv: np.ndarray, dim: int, k: int) -> np.ndarray:
    """Pointwise Hodge star matrix S[J^c, I] with *dx^I = sum_J S dx^{J^c}.

    ``ginv`` has trailing axes (D, D); the result has trailing axes
    (C(D, D-k), C(D, k)) in the standard mask ordering of each degree.
    """
    src = masks_of_degree(dim, k)
    dst = masks_of_degree(dim, dim - k)
    full = (1 << dim) - 1
    sqrt_g = 1.0 / np.sqrt(np.linalg.det(ginv))
    minors = _minor_dets(ginv, src, src)  # [I, J]
    out = np.zeros(ginv.shape[:-2] + (len(dst), len(src)))
    for a, mi in enumerate(src):
        for b, mj in enumerate(src):
            row = dst.index(full ^ mj)
            out[..., row, a] += sqrt_g * minors[..., a, b] * complement_sign(mj, dim)
    return out


def star_star_residual(g_inv: TrigPolyField, n: int = 32) -> float:
    """max over degrees and grid points of |** - (-1)^{k(D-k)}|."""
    d = g_inv.dim
    gi = np.moveaxis(g_inv(_grid_points(d, n)).real, -1, 0)
    res = 0.0
    for k in range(d + 1):
        s1 = star_tensor(gi, d, k)
        s2 = star_tensor(gi, d, d - k)
        prod = s2 @ s1
        ident = (-1) ** (k * (d - k)) * np.eye(prod.shape[-1])
        res = max(res, float(np.max(np.abs(prod - ident))))
    return res


def _coef_field(values: np.ndarray, dim: int) -> TrigPolyField:
    return TrigPolyField.from_samples(values, dim)


def star_fields(g_inv: TrigPolyField, k: int, n_samples: int) -> TrigPolyField:
    """Hodge star coefficient functions for degree k as a (C(D,D-k), C(D,k)) field."""
    d = g_inv.dim
    if n_samples % 2 == 0:
        n_samples += 1
    gi = np.moveaxis(g_inv.samples(n_samples).real, (0, 1), (-2, -1))
    if np.linalg.eigvalsh(gi).min() <= 0:
        raise GeometryError("metric is not positive definite on the sample grid")
    s = star_tensor(gi, d, k)
    return _coef_field(np.moveaxis(s, (-2, -1), (0, 1)), d)


def gram_fields(g_inv: TrigPolyField, k: int, n_samples: int) -> TrigPolyField:
    """sqrt(g) det(g^{I,J}) for masks of degree k, the kernel of the L2 inner product."""
    d = g_inv.dim
    if n_samples % 2 == 0:
        n_samples += 1
    gi = np.moveaxis(g_inv.samples(n_samples).real, (0, 1), (-2, -1))
    if np.linalg.eigvalsh(gi).min() <= 0:
        raise GeometryError("metric is not positive definite on the sample grid")
    masks = masks_of_degree(d, k)
    h = _minor_dets(gi, masks, masks) / np.sqrt(np.linalg.det(gi))[..., None, None]
    return _coef_field(np.moveaxis(h, (-2, -1), (0, 1)), d)
