import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from presets import gradient, identity, line_ops, rotation, torus_ops, zero_flow
from susytransfer.forms import Torus, make_basis
from susytransfer.operators import GradedOperator
from susytransfer.spectra import (CSV_HEADER, Spectrum, SpectrumError, conjugation_pairing, eigendecompose,
                                  mark_convergence,
                                  match_spectra, read_eigenvalue_csv, real_transform, write_eigenvalue_csv,
                                  zero_modes, zero_threshold)


def _sorted(w):
    return np.sort_complex(np.round(w, 12))


# known spectra [TRIVIAL]

def test_flat_circle_eigenvalues():
    T = 0.5
    spec = eigendecompose(torus_ops(1, 5, zero_flow(1), identity(1), T).H_strat)
    expect = np.sort(T * np.arange(-5, 6) ** 2)
    for k in (0, 1):
        assert np.allclose(np.sort(spec.values[k].real), expect, atol=1e-12)
        assert np.abs(spec.values[k].imag).max() < 1e-12


def test_constant_rotation_is_pure_imaginary():
    omega = np.array([1.0, np.sqrt(2)])
    ops = torus_ops(2, 2, rotation(2, omega), identity(2), 0.0)
    spec = eigendecompose(ops.H_strat)
    n = ops.basis.waves.vectors
    expect = _sorted(1j * (n @ omega))
    assert np.allclose(_sorted(spec.values[0]), expect, atol=1e-12)
    assert np.allclose(_sorted(spec.values[1]), _sorted(np.tile(1j * (n @ omega), 2)), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_synthetic_similarity_recovered(seed):
    # [DERIVED] A = Q diag(lam) Q^-1 with a well-conditioned Q
    rng = np.random.default_rng(seed)
    b = make_basis(Torus(1, 2))
    blocks, lams = {}, {}
    for k in (0, 1):
        lam = rng.normal(size=5) + 1j * rng.normal(size=5)
        q = np.eye(5) + 0.2 * (rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5)))
        blocks[k] = q @ np.diag(lam) @ np.linalg.inv(q)
        lams[k] = lam
    spec = eigendecompose(GradedOperator(0, blocks, b), real_basis=False)
    for k in (0, 1):
        assert np.max(match_spectra(lams[k], spec.values[k])) < 1e-8
        # left rows are bi-orthonormal to right columns
        assert np.allclose(spec.left[k] @ spec.right[k], np.eye(5), atol=1e-10)
        assert spec.backward_error[k] < 1e-12


def test_biorthogonality_on_nonnormal_operator():
    spec = eigendecompose(torus_ops(2, 2, gradient(2), identity(2), 0.6).H_strat)
    for k in spec.degrees:
        assert np.allclose(spec.left[k] @ spec.right[k], np.eye(len(spec.values[k])), atol=1e-8)


def test_right_vectors_are_eigenvectors():
    ops = torus_ops(1, 6, gradient(1), identity(1), 0.4)
    spec = eigendecompose(ops.H_strat)
    a = ops.H_strat.block(1)
    v, w = spec.right[1], spec.values[1]
    assert np.abs(a @ v - v * w).max() < 1e-10 * ops.H_strat.norm()


def test_real_transform_is_unitary():
    b = make_basis(Torus(2, 2))
    u = real_transform(b, 1).toarray()
    assert np.allclose(u.conj().T @ u, np.eye(u.shape[0]))


def test_shifted_operator_rejected():
    ops = torus_ops(1, 2, zero_flow(1), identity(1), 1.0)
    with pytest.raises(SpectrumError):
        eigendecompose(ops.d)


def test_spectral_mapping_of_semigroup():
    # [DERIVED] exp(-tH) via scipy.linalg.expm has eigenvalues exp(-t lambda)
    t = 0.1
    ops = torus_ops(1, 4, gradient(1), identity(1), 0.5)
    spec = eigendecompose(ops.H_strat)
    for k in (0, 1):
        mu = np.linalg.eigvals(sla.expm(-t * ops.H_strat.block(k)))
        assert np.max(match_spectra(np.exp(-t * spec.values[k]), mu)) < 1e-10


def test_defective_block_flagged():
    b = make_basis(Torus(1, 1))
    jordan = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]])
    spec = eigendecompose(GradedOperator(0, {0: jordan, 1: np.eye(3)}, b), real_basis=False)
    assert spec.defective[0]
    assert spec.left[0] is None
    assert not spec.defective[1]


# zero modes

def test_flat_torus_zero_modes_are_cohomology():
    spec = eigendecompose(torus_ops(2, 2, zero_flow(2), identity(2), 1.0).H_strat)
    rep = zero_modes(spec)
    assert rep.counts == [1, 2, 1]
    assert not rep.ambiguous
    assert rep.right_closed_residual < 1e-12


def test_langevin_circle_zero_modes():
    spec = eigendecompose(torus_ops(1, 16, gradient(1), identity(1), 0.4).H_strat)
    rep = zero_modes(spec)
    assert rep.counts == [1, 1]
    assert rep.right_closed_residual < 1e-10
    assert rep.left_closed_residual < 1e-8


def test_line_has_single_zero_mode():
    spec = eigendecompose(line_ops(128).H_strat)
    rep = zero_modes(spec)
    assert sum(rep.counts) == 1
    assert rep.counts[1] == 1


def test_zero_threshold_rule():
    b = make_basis(Torus(1, 1))
    blocks = {0: np.diag([0.0, 2.0, 3.0]), 1: np.diag([1e-12, 0.5, 4.0])}
    spec = eigendecompose(GradedOperator(0, blocks, b), real_basis=False, norm=4.0)
    theta, smallest = zero_threshold(spec)
    assert smallest == 0.5
    assert theta == pytest.approx(5e-4)
    assert zero_modes(spec).counts == [1, 1]


# pairing and convergence

def test_conjugation_pairing_closes():
    spec = eigendecompose(torus_ops(2, 2, rotation(2), identity(2), 0.3).H_strat)
    rep = conjugation_pairing(spec)
    assert rep.max_residual < 1e-10
    assert rep.complex_pairs > 0


def test_mark_convergence_flags():
    b = make_basis(Torus(1, 1))
    coarse = eigendecompose(GradedOperator(0, {0: np.diag([1.0, 2.0, 3.0]), 1: np.eye(3)}, b), real_basis=False)
    fine = Spectrum(b, {0: np.array([9.0, 3.0, 2.001, 1.0], complex), 1: np.ones(4, complex)}, 9.0)
    mark_convergence(coarse, fine, 1e-6)
    order = np.argsort(coarse.values[0].real)
    assert coarse.converged[0][order].tolist() == [True, False, True]
    assert coarse.deltas[0][order][1] == pytest.approx(1e-3)


# CSV

def test_csv_round_trip(tmp_path):
    spec = eigendecompose(torus_ops(1, 3, gradient(1), identity(1), 0.5).H_strat)
    path = tmp_path / "eig.csv"
    write_eigenvalue_csv(spec, path)
    assert path.read_text().splitlines()[0] == CSV_HEADER
    rows = read_eigenvalue_csv(path)
    assert len(rows) == spec.count()
    assert sum(r["zero"] for r in rows) == 2
    for k in (0, 1):
        back = np.array([r["value"] for r in rows if r["degree"] == k])
        assert np.max(match_spectra(spec.values[k], back)) == 0.0
        # rows sorted by real part
        assert np.all(np.diff(back.real) >= 0)
