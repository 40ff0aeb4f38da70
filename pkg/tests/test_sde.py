import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad
from scipy.special import i0

from presets import double_well, gradient, identity, line_ops, zero_flow
from susytransfer.analysis import te_state_density
from susytransfer.forms import KFormVector, Line, make_basis
from susytransfer.sde import (McError, McRun, TrigSystem, _normals, compare_density, integrate, lipschitz_estimate,
                              metadata_text, trajectory_stream, write_histogram_csv)
from susytransfer.spectra import eigendecompose


def small_run(**kw):
    base = dict(integrator="heun", step=0.01, burn_in_steps=2000, sample_steps=1000, seed=7,
                trajectory_count=200, thin=10, bins=16)
    base.update(kw)
    return McRun(**base)


# reproducibility

def test_counts_independent_of_chunking_and_workers():
    F, e = gradient(1), identity(1)
    a = integrate(small_run(chunk=200, sample_steps=200, burn_in_steps=2000), F, e, 0.5)
    b = integrate(small_run(chunk=30, sample_steps=200, burn_in_steps=2000), F, e, 0.5, workers=3)
    assert np.array_equal(a.counts, b.counts)
    c = integrate(small_run(chunk=200, sample_steps=200, burn_in_steps=2000, seed=8), F, e, 0.5)
    assert not np.array_equal(a.counts, c.counts)


def test_trajectory_streams_are_keyed():
    x1 = trajectory_stream(3, 10).random(4)
    assert np.array_equal(x1, trajectory_stream(3, 10).random(4))
    assert not np.array_equal(x1, trajectory_stream(3, 11).random(4))
    assert not np.array_equal(x1, trajectory_stream(4, 10).random(4))


@pytest.mark.parametrize("method", ["inverse", "polar"])
def test_gaussian_methods_are_standard_normal(method):
    # [DERIVED] Kolmogorov-Smirnov against scipy's normal cdf
    z = _normals(trajectory_stream(1, 0), (20000,), method)
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


# stationary densities [DERIVED: closed forms]

def test_zero_drift_gives_uniform_histogram():
    hist = integrate(small_run(step=0.05, burn_in_steps=400), zero_flow(1), identity(1), 0.5, lipschitz=0.0)
    assert hist.integral() == pytest.approx(1.0)
    uniform = lambda x: np.full_like(x, 1 / (2 * np.pi))
    assert compare_density(hist, uniform) < 0.08


@pytest.mark.parametrize("integrator", ["euler_maruyama", "heun"])
def test_langevin_histogram_matches_gibbs(integrator):
    T = 0.5
    hist = integrate(small_run(integrator=integrator), gradient(1), identity(1), T)
    gibbs = lambda x: np.exp(-np.cos(x) / T) / (2 * np.pi * i0(1 / T))
    assert compare_density(hist, gibbs) < 0.08


def test_histogram_matches_spectral_density():
    T = 0.5
    from presets import torus_ops
    rho = te_state_density(eigendecompose(torus_ops(1, 16, gradient(1), identity(1), T).H_strat))
    hist = integrate(small_run(), gradient(1), identity(1), T)
    gibbs = lambda x: np.exp(-np.cos(x) / T) / (2 * np.pi * i0(1 / T))
    assert compare_density(hist, rho) == pytest.approx(compare_density(hist, gibbs), abs=1e-6)


def test_line_reflection_and_gibbs():
    T, w = 1.0, 2.0
    run = small_run(step=2e-3, burn_in_steps=5000, sample_steps=2000, thin=20, domain="line", half_width=w,
                    trajectory_count=200)
    hist = integrate(run, double_well(), 1.0, T)
    assert hist.integral() == pytest.approx(1.0)
    assert hist.bin_edges[0][0] == -w and hist.bin_edges[0][-1] == w
    pot = lambda x: x**4 - 2 * x**2
    z = quad(lambda x: np.exp(-pot(x) / T), -w, w)[0]
    assert compare_density(hist, lambda x: np.exp(-pot(x) / T) / z) < 0.1


# validation

@pytest.mark.parametrize("kw,T", [
    (dict(integrator="rk4"), 0.5),
    (dict(gaussian="boxmuller"), 0.5),
    (dict(step=0.2), 0.5),
    (dict(burn_in_steps=100), 0.5),
    (dict(thin=0), 0.5),
    ({}, 0.0),
    (dict(domain="line"), 0.5),
], ids=["integrator", "gaussian", "step", "burn-in", "thin", "temperature", "half-width"])
def test_run_validation(kw, T):
    with pytest.raises(McError):
        small_run(**kw).validate(T, 1.0)


def test_lipschitz_of_gradient_preset():
    # F = sin x: max |cos x| = 1
    assert lipschitz_estimate(gradient(1)) == pytest.approx(1.0, abs=1e-12)


def test_trig_system_evaluates_fields():
    x = np.array([[0.3], [2.0]])
    f, e = TrigSystem(gradient(1), identity(1))(x)
    assert np.allclose(f[:, 0], np.sin(x[:, 0]))
    assert np.allclose(e[:, 0, 0], 1.0)


def test_domain_mismatch():
    hist = integrate(small_run(sample_steps=20, thin=1, trajectory_count=4), gradient(1), identity(1), 0.5)
    line_form = KFormVector(1, np.ones(32), make_basis(Line(5.0, 32)))
    with pytest.raises(McError):
        compare_density(hist, line_form)


# output

def test_histogram_csv_and_metadata(tmp_path):
    hist = integrate(small_run(sample_steps=20, thin=1, trajectory_count=4, bins=8), gradient(1), identity(1), 0.5)
    path = tmp_path / "histogram.csv"
    write_histogram_csv(hist, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_center,density"
    assert len(lines) == 9
    dens = np.array([float(line.split(",")[1]) for line in lines[1:]])
    assert dens.sum() * 2 * np.pi / 8 == pytest.approx(1.0)
    meta = metadata_text(hist)
    assert "seed = 7" in meta and "total_samples = 80" in meta


def test_histogram_csv_2d_header(tmp_path):
    hist = integrate(small_run(sample_steps=4, thin=1, trajectory_count=2, bins=4), gradient(2), identity(2), 0.5)
    path = tmp_path / "h.csv"
    write_histogram_csv(hist, path)
    assert path.read_text().splitlines()[0] == "bin_center1,bin_center2,density"
