import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from scipy.integrate import cumulative_trapezoid

from presets import (abc, circle_sin, diagonal, gradient, identity, line_ops, multiplicative_1d, rotation, shear,
                     torus_ops, zero_flow)
from susytransfer.forms import KFormVector, Line, Torus, fourier_eval, make_basis
from susytransfer.geometry import TrigPolyField, geometry_bundle
from susytransfer.operators import (GradedOperator, OperatorError, anticommutator, assemble_bar_d, assemble_H_ito,
                                    assemble_H_strat, assemble_hodge_laplacian, commutator, d_commutator_residual,
                                    dump_blocks, exterior_derivative, interior_product, ito_drift, lie_derivative,
                                    line_difference, load_blocks, nilpotency_residual, staggered_weights)


def _zero_vectors(block, tol):
    w, v = sla.eig(block)
    idx = np.flatnonzero(np.abs(w) < tol)
    return w, v[:, idx]


# exterior derivative [TRIVIAL]

def test_d_on_circle_is_i_n():
    b = make_basis(Torus(1, 4))
    d0 = exterior_derivative(b).block(0)
    assert np.allclose(d0, np.diag(1j * np.arange(-4, 5)))


@pytest.mark.parametrize("dim,n", [(2, 3), (3, 2)])
def test_d_squared_is_exactly_zero(dim, n):
    d = exterior_derivative(make_basis(Torus(dim, n)))
    assert nilpotency_residual(d) == 0.0
    assert d.kind == "degree-raising"


def test_d_of_closed_one_form():
    b = make_basis(Torus(2, 2))
    c = np.zeros(b.dims[1], complex)
    c[b.index(0b01, (1, 0)) - b.offsets[1]] = 1.0  # e^{i x1} dx1
    out = exterior_derivative(b).apply(KFormVector(1, c, b))
    assert out.degree == 2
    assert np.abs(out.coefficients).max() == 0.0


def test_d_of_function_2d():
    b = make_basis(Torus(2, 2))
    c = np.zeros(b.dims[0], complex)
    c[b.index(0, (1, 2))] = 1.0  # e^{i(x1 + 2 x2)}
    out = exterior_derivative(b).apply(KFormVector(0, c, b))
    assert out.coefficients[b.index(0b01, (1, 2)) - b.offsets[1]] == 1j
    assert out.coefficients[b.index(0b10, (1, 2)) - b.offsets[1]] == 2j
    assert np.count_nonzero(out.coefficients) == 2


# interior product

def test_iota_constant_field_on_top_form():
    b = make_basis(Torus(2, 2))
    F = TrigPolyField.constant([1.0, 0.0], 2)
    top = np.zeros(b.dims[2], complex)
    top[b.waves.index((0, 0))] = 1.0
    out = interior_product(b, F).apply(KFormVector(2, top, b))
    expect = np.zeros(b.dims[1], complex)
    expect[b.index(0b10, (0, 0)) - b.offsets[1]] = 1.0  # dx2
    assert np.allclose(out.coefficients, expect)


def test_iota_on_functions_is_zero():
    b = make_basis(Torus(2, 2))
    iota = interior_product(b, gradient(2))
    assert iota.block(0).shape == (0, b.dims[0])
    assert iota.kind == "degree-lowering"


@pytest.mark.parametrize("F", [gradient(2), rotation(2), zero_flow(2),
                               TrigPolyField.from_terms(2, [((0,), (1, 1), 0.5), ((0,), (-1, -1), 0.5),
                                                            ((1,), (0, 2), 0.3j), ((1,), (0, -2), -0.3j)], (2,))],
                         ids=["gradient", "rotation", "zero", "mixed"])
def test_iota_squared_is_zero(F):
    # truncated products only commute away from the cutoff, so test on low modes
    b = make_basis(Torus(2, 6))
    iota = interior_product(b, F)
    blk = iota.compose(iota).block(2)
    blk = blk.toarray() if hasattr(blk, "toarray") else blk
    low = np.flatnonzero(np.abs(b.waves.vectors).max(1) <= 2)
    assert np.abs(blk[:, low]).max() < 1e-15


# Lie derivative

def test_lie_constant_field_plane_waves():
    omega = np.array([1.0, np.sqrt(2) - 1])
    b = make_basis(Torus(2, 3))
    lie = lie_derivative(b, TrigPolyField.constant(omega, 2))
    n = b.waves.vectors
    assert np.allclose(np.diag(lie.block(0)), 1j * n @ omega)
    assert np.abs(lie.block(0) - np.diag(np.diag(lie.block(0)))).max() == 0.0


def test_lie_of_zero_field():
    lie = lie_derivative(make_basis(Torus(2, 2)), zero_flow(2))
    assert lie.max_entry() == 0.0


def test_lie_sin_on_functions_matches_product_rule():
    # L_F f = F f' with F = sin x; oracle built directly from the Fourier product rule
    n_cut = 5
    b = make_basis(Torus(1, n_cut))
    lie = lie_derivative(b, circle_sin()).block(0)
    ns = np.arange(-n_cut, n_cut + 1)
    oracle = np.zeros((len(ns), len(ns)), complex)
    for r, m in enumerate(ns):
        for c, n in enumerate(ns):
            # sin x = (e^{ix} - e^{-ix}) / 2i
            coef = {1: 1 / 2j, -1: -1 / 2j}.get(m - n, 0.0)
            oracle[r, c] = coef * 1j * n
    assert np.allclose(lie, oracle, atol=1e-15)
    # the constant function is annihilated
    assert np.abs(lie[:, n_cut]).max() == 0.0


@pytest.mark.parametrize("dim,n,F", [(1, 6, circle_sin()), (2, 3, gradient(2)), (3, 2, abc())],
                         ids=["T1", "T2", "T3"])
def test_lie_commutes_with_d(dim, n, F):
    b = make_basis(Torus(dim, n))
    assert d_commutator_residual(exterior_derivative(b), lie_derivative(b, F)) == 0.0


# Fokker-Planck operators

def test_flat_heat_operator_spectrum():
    T = 0.7
    b = make_basis(Torus(1, 6))
    h = assemble_H_strat(zero_flow(1), identity(1), T, b)
    for k in (0, 1):
        assert np.allclose(np.sort(np.linalg.eigvals(h.block(k)).real), np.sort(T * np.arange(-6, 7) ** 2))


def test_langevin_zero_modes():
    # W = cos x, F = -W' = sin x, additive noise, T = 0.4
    T, n_cut = 0.4, 16
    ops = torus_ops(1, n_cut, gradient(1), identity(1), T)
    h = ops.H_strat
    w0, v0 = _zero_vectors(h.block(0), 1e-9)
    assert v0.shape[1] == 1
    assert np.allclose(v0[:, 0] / v0[n_cut, 0], np.eye(2 * n_cut + 1)[n_cut], atol=1e-12)
    w1, v1 = _zero_vectors(h.block(1), 1e-9)
    assert v1.shape[1] == 1
    x = np.linspace(0, 2 * np.pi, 41)
    dens = fourier_eval(v1[:, 0], n_cut, x[:, None])
    dens = dens / dens[0]
    gibbs = np.exp(-np.cos(x) / T)
    assert np.allclose(dens, gibbs / gibbs[0], atol=1e-10)


def test_ito_equals_stratonovich_for_additive_noise():
    e = TrigPolyField.constant([[1.0, 0.3], [0.2, 0.8]], 2)
    b = make_basis(Torus(2, 3))
    hs = assemble_H_strat(gradient(2), e, 0.5, b)
    hi = assemble_H_ito(gradient(2), e, 0.5, b)
    assert (hs - hi).max_entry() == 0.0


@pytest.mark.parametrize("dim,e", [(1, diagonal(1, 0.5, "sin")), (2, shear(0.4)), (2, diagonal(2, 0.5, "sin"))],
                         ids=["d1", "shear", "d2"])
def test_ito_difference_is_lie_derivative_of_drift_shift(dim, e):
    T = 0.3
    b = make_basis(Torus(dim, 4))
    F = gradient(dim)
    diff = assemble_H_strat(F, e, T, b) - assemble_H_ito(F, e, T, b)
    lv = lie_derivative(b, ito_drift(e, T))
    assert (diff - lv).max_entry() < 1e-12 * diff.norm() + 1e-15


def test_ito_drift_1d_closed_form():
    # v = T e e'
    v = ito_drift(diagonal(1, 0.5, "sin"), 0.3)
    x = np.linspace(0, 6, 7)
    ev = 1 + 0.5 * np.sin(x)
    assert np.allclose(v(x[:, None])[0].real, 0.3 * ev * 0.5 * np.cos(x))


def _closed_form_density(T, kind):
    """Stationary density of x' = sin x cos x + sqrt(2T) e(x) xi with e = 1 + 0.5 sin x."""
    x = np.linspace(0, 2 * np.pi, 4001)
    ev = 1 + 0.5 * np.sin(x)
    F = np.sin(x) * np.cos(x)
    phi = cumulative_trapezoid(F / (T * ev**2), x, initial=0.0)
    p = np.exp(phi) / (ev if kind == "strat" else ev**2)
    return x, p / np.trapezoid(p, x)


@pytest.mark.parametrize("kind", ["strat", "ito"])
def test_multiplicative_te_density_closed_form(kind):
    T, n_cut = 0.3, 24
    F, e = multiplicative_1d()
    ops = torus_ops(1, n_cut, F, e, T)
    h = ops.H_strat if kind == "strat" else ops.H_ito
    _, v = _zero_vectors(h.block(1), 1e-8)
    assert v.shape[1] == 1
    c = v[:, 0] / (2 * np.pi * v[n_cut, 0])
    x, p = _closed_form_density(T, kind)
    dens = fourier_eval(c, n_cut, x[::40, None]).real
    assert np.allclose(dens, p[::40], atol=1e-5)


@pytest.mark.parametrize("dim,n,F,e", [(2, 3, rotation(2), shear(0.3)), (3, 2, abc(), diagonal(3, 0.3))],
                         ids=["T2-shear", "T3-abc-curved"])
def test_fokker_planck_commutes_with_d(dim, n, F, e):
    ops = torus_ops(dim, n, F, e, 0.5)
    for h in (ops.H_strat, ops.H_ito):
        assert d_commutator_residual(ops.d, h) < 1e-12 * h.norm()


def test_negative_temperature_rejected():
    with pytest.raises(OperatorError):
        assemble_H_strat(zero_flow(1), identity(1), -1.0, make_basis(Torus(1, 2)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2))
def test_real_forms_stay_real(seed, k):
    rng = np.random.default_rng(seed)
    ops = torus_ops(2, 2, gradient(2), diagonal(2, 0.3, "sin"), 0.7)
    b = ops.basis
    c = rng.normal(size=(b.dims[k] // 25, 5, 5)) + 1j * rng.normal(size=(b.dims[k] // 25, 5, 5))
    c = 0.5 * (c + np.conj(c[:, ::-1, ::-1]))
    form = KFormVector(k, c.ravel(), b)
    assert form.conjugate_residual() < 1e-15
    out = ops.H_ito.apply(form)
    assert out.conjugate_residual() < 1e-12 * max(1.0, np.abs(out.coefficients).max())


# bar_d and the Hodge Laplacian

def test_bar_d_flat_gives_laplacian():
    b = make_basis(Torus(2, 3))
    ops = torus_ops(2, 3, zero_flow(2), identity(2), 1.0)
    bd = ops.bar_d
    for k in (1, 2):
        assert bd.block(k).shape == (b.dims[k - 1], b.dims[k])
    res = anticommutator(ops.d, bd) - ops.laplace_diff
    assert res.max_entry() < 1e-10


def test_bar_d_identity_improves_with_cutoff():
    # [d, bar_d] = -sum_a L_a^2 holds only without truncation: the residual shrinks as N grows
    F, e = multiplicative_1d()
    res = []
    for n in (4, 8, 12):
        ops = torus_ops(1, n, F, e, 0.3)
        r = anticommutator(ops.d, ops.bar_d) - ops.laplace_diff
        res.append(max(np.linalg.norm(r.block(k), 2) for k in r.blocks))
    assert res[0] > res[1] > res[2]


def test_flat_hodge_laplacian():
    ops = torus_ops(2, 3, zero_flow(2), identity(2), 1.0)
    lap = ops.laplace_hodge
    n = ops.basis.waves.vectors
    assert np.allclose(lap.block(0), np.diag((n * n).sum(1)), atol=1e-12)
    counts = [int(np.sum(np.abs(np.linalg.eigvals(lap.block(k))) < 1e-9)) for k in range(3)]
    assert counts == [1, 2, 1]


def test_hodge_laplacian_is_hermitian_in_gram_metric_for_flat_case():
    ops = torus_ops(3, 1, zero_flow(3), identity(3), 1.0)
    for k in range(4):
        blk = ops.laplace_hodge.block(k)
        assert np.allclose(blk, blk.conj().T, atol=1e-12)


def test_bar_d_rejects_line():
    b = make_basis(Line(5.0, 32))
    with pytest.raises(OperatorError):
        assemble_bar_d(b, geometry_bundle(identity(1)))


# line discretization

def test_staggered_weights_are_exact_on_polynomials():
    wi, wd = staggered_weights(12)
    off = np.arange(6) + 0.5
    for p in range(12):
        # symmetric interpolation to the centre and antisymmetric derivative
        s_i = np.sum(wi * (off**p + (-off) ** p))
        s_d = np.sum(wd * (off**p - (-off) ** p))
        assert s_i == pytest.approx(1.0 if p == 0 else 0.0, abs=1e-9)
        assert s_d == pytest.approx(1.0 if p == 1 else 0.0, abs=1e-9)


def test_line_difference_on_gaussian():
    b = make_basis(Line(5.0, 200))
    g = b.grid
    f = np.exp(-g.nodes**2)
    df = line_difference(b) @ f
    exact = -2 * g.midpoints * np.exp(-g.midpoints**2)
    assert np.abs(df - exact).max() < 1e-9


def test_line_operators_commute_with_d():
    ops = line_ops(200)
    assert ops.d.block(0).shape == (200, 199)
    for h in (ops.H_strat, ops.H_ito):
        assert d_commutator_residual(ops.d, h) < 1e-12 * h.norm()
    assert nilpotency_residual(ops.d) == 0.0


def test_line_ito_equals_stratonovich_for_additive_noise():
    ops = line_ops(64)
    assert (ops.H_strat - ops.H_ito).max_entry() == 0.0


# graded operator plumbing

def test_block_shape_checked():
    b = make_basis(Torus(1, 2))
    with pytest.raises(OperatorError):
        GradedOperator(0, {0: np.zeros((4, 5))}, b)


def test_commutator_of_operator_with_itself():
    h = torus_ops(1, 4, gradient(1), identity(1), 1.0).H_strat
    assert commutator(h, h).max_entry() < 1e-14


def test_dump_round_trip(tmp_path):
    ops = torus_ops(2, 2, gradient(2), shear(0.3), 0.5)
    path = tmp_path / "h.bin"
    dump_blocks(ops.H_strat, path)
    raw = path.read_bytes()
    # header of the first block: degree 0, rows, cols as little-endian int64
    assert np.frombuffer(raw[:24], "<i8").tolist() == [0, 25, 25]
    back = load_blocks(path)
    assert sorted(back) == [0, 1, 2]
    for k in back:
        assert np.array_equal(back[k], ops.H_strat.block(k))
