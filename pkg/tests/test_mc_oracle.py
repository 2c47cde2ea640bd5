"""Jump-adapted Euler simulation, KDE reconstruction, moment oracles."""

import numpy as np
import pytest
from scipy.stats import norm

from levyfp.mc_oracle import (
    McConfig,
    SampleSet,
    SimulationError,
    gaussian_x0,
    kde_density,
    l1_distance,
    point_x0,
    simulate,
)
from levyfp.model import LevyMeasure, RadialDensity, build_model
from levyfp.operators import Grid, GridFunction
from levyfp.semigroup import gaussian_density


def test_mc_config_validation():
    good = dict(n_paths=10, n_steps=5, T=1.0, jump_cutoff=0.1, seed=0)
    McConfig(**good)
    with pytest.raises(ValueError):
        McConfig(**{**good, "n_paths": 0})
    with pytest.raises(ValueError):
        McConfig(**{**good, "n_steps": 0})
    with pytest.raises(ValueError):
        McConfig(**{**good, "T": 0.0})
    with pytest.raises(ValueError):
        McConfig(**{**good, "jump_cutoff": -0.1})
    with pytest.raises(ValueError):
        McConfig(**{**good, "n_paths": 11, "antithetic": True})


def test_x0_samplers():
    rng = np.random.default_rng(0)
    assert np.array_equal(point_x0(0.4)(rng), [0.4])
    draw = gaussian_x0(1.0, 0.1)(rng)
    assert draw.shape == (1,)
    draw2 = gaussian_x0([1.0, -1.0], 0.1, d=2)(rng)
    assert draw2.shape == (2,)


def test_simulation_is_seed_deterministic():
    model = build_model(drift="zero", sigma=1.0, jump="zero")
    mu = LevyMeasure(d=1)
    cfg = McConfig(n_paths=200, n_steps=10, T=1.0, jump_cutoff=0.1, seed=11)
    a = simulate(model, mu, gaussian_x0(0.3, 0.2), cfg)
    b = simulate(model, mu, gaussian_x0(0.3, 0.2), cfg)
    assert np.array_equal(a.points, b.points)
    assert a.n_flagged == 0


def test_chunking_does_not_change_paths():
    model = build_model(drift="ou", sigma=1.0, jump="additive")
    mu = LevyMeasure(d=1, atoms=(((1.0,), 0.5),))
    cfg = McConfig(n_paths=150, n_steps=10, T=1.0, jump_cutoff=0.1, seed=2)
    a = simulate(model, mu, point_x0(0.0), cfg, chunk_size=150)
    b = simulate(model, mu, point_x0(0.0), cfg, chunk_size=7)
    assert np.allclose(a.points, b.points, atol=0.0)


def test_antithetic_pairs_mirror_exactly():
    # pure diffusion: the odd path of each pair negates every normal, so
    # the pair is symmetric about the shared x0
    model = build_model(drift="zero", sigma=1.0, jump="zero")
    mu = LevyMeasure(d=1)
    cfg = McConfig(n_paths=200, n_steps=10, T=1.0, jump_cutoff=0.1,
                   seed=11, antithetic=True)
    s = simulate(model, mu, point_x0(0.4), cfg)
    even, odd = s.points[0::2], s.points[1::2]
    assert np.max(np.abs((even + odd) / 2.0 - 0.4)) <= 1e-12


def test_ou_terminal_moments():
    # X_1 ~ N(0, (1 - e^-2) / 2) for dX = -X dt + dW from X_0 = 0
    model = build_model(drift="ou", sigma=1.0, jump="zero")
    mu = LevyMeasure(d=1)
    cfg = McConfig(n_paths=40000, n_steps=100, T=1.0, jump_cutoff=0.0625,
                   seed=42)
    s = simulate(model, mu, point_x0(0.0), cfg)
    v_exact = (1.0 - np.exp(-2.0)) / 2.0
    se = np.sqrt(v_exact / cfg.n_paths)
    assert abs(float(np.mean(s.points))) <= 3.0 * se
    # Euler bias at n_steps = 100 stays well under 2 percent here
    assert abs(float(np.var(s.points)) - v_exact) <= 0.02 * v_exact


def test_compound_poisson_mean():
    # rate 0.5 of +1 jumps, no compensation (|z| >= 1): E X_1 = 0.5
    model = build_model(drift="zero", sigma=0.05, jump="additive")
    mu = LevyMeasure(d=1, atoms=(((1.0,), 0.5),))
    cfg = McConfig(n_paths=40000, n_steps=50, T=1.0, jump_cutoff=0.0, seed=9)
    s = simulate(model, mu, point_x0(0.0), cfg)
    se = float(np.std(s.points)) / np.sqrt(cfg.n_paths)
    assert abs(float(np.mean(s.points)) - 0.5) <= 3.0 * se


def test_compensated_atom_is_centered():
    # an atom inside |z| < 1 is simulated and compensated: p = z keeps the
    # terminal mean at zero
    model = build_model(drift="zero", sigma=0.1, jump="additive")
    mu = LevyMeasure(d=1, atoms=(((0.5,), 1.0),))
    cfg = McConfig(n_paths=20000, n_steps=50, T=1.0, jump_cutoff=0.0, seed=6)
    s = simulate(model, mu, point_x0(0.0), cfg)
    se = float(np.std(s.points)) / np.sqrt(cfg.n_paths)
    assert abs(float(np.mean(s.points))) <= 3.0 * se


def test_compensated_symmetric_density_is_centered():
    model = build_model(drift="zero", sigma=0.1, jump="additive")
    mu = LevyMeasure(d=1, density=RadialDensity(c=0.05, beta=0.5,
                                                z_max=0.25))
    cfg = McConfig(n_paths=20000, n_steps=50, T=1.0, jump_cutoff=0.01,
                   seed=5)
    s = simulate(model, mu, point_x0(0.0), cfg)
    se = float(np.std(s.points)) / np.sqrt(cfg.n_paths)
    assert abs(float(np.mean(s.points))) <= 3.0 * se
    assert s.dropped_moment2 <= 1e-3


def test_zero_cutoff_rejected_for_densities():
    model = build_model(drift="zero", sigma=0.1, jump="additive")
    mu = LevyMeasure(d=1, density=RadialDensity(c=0.05, beta=0.5,
                                                z_max=0.25))
    cfg = McConfig(n_paths=100, n_steps=5, T=1.0, jump_cutoff=0.0, seed=0)
    with pytest.raises(ValueError, match="cutoff"):
        simulate(model, mu, point_x0(0.0), cfg)


def test_exploding_drift_raises():
    # dX = 1e6 X^3 dt sends every path to overflow within a few steps
    model = build_model(drift="poly", drift_coeffs=[0.0, 0.0, 0.0, 1e6],
                        sigma=0.1, jump="zero")
    cfg = McConfig(n_paths=200, n_steps=50, T=1.0, jump_cutoff=0.1, seed=1)
    with pytest.raises(SimulationError):
        simulate(model, LevyMeasure(d=1), point_x0(2.0), cfg)


def test_kde_matches_exact_gaussian():
    g = Grid.regular(1, 8.0, 0.01)
    rng = np.random.default_rng(3)
    pts = rng.normal(0.0, 1.0, size=(100000, 1))
    kd = kde_density(SampleSet(points=pts, dropped_moment2=0.0), g)
    x = g.points()[:, 0]
    exact = np.exp(-x ** 2 / 2.0) / np.sqrt(2.0 * np.pi)
    exact = GridFunction(g, exact / (np.sum(exact) * g.h))
    assert l1_distance(kd, exact) <= 0.03
    assert kd.mass == pytest.approx(1.0, abs=1e-12)


def test_kde_requires_enough_inside_samples():
    g = Grid.regular(1, 1.0, 0.1)
    with pytest.raises(SimulationError, match="100"):
        kde_density(SampleSet(points=np.zeros((10, 1)),
                              dropped_moment2=0.0), g)
    far = SampleSet(points=np.full((500, 1), 100.0), dropped_moment2=0.0)
    with pytest.raises(SimulationError):
        kde_density(far, g)


def test_l1_distance_between_shifted_gaussians():
    # analytic value 4 Phi(0.05) - 2 for unit-variance densities 0.1 apart
    g = Grid.regular(1, 8.0, 0.01)
    a = gaussian_density(g, 0.0, 1.0)
    b = gaussian_density(g, 0.1, 1.0)
    exact = 4.0 * norm.cdf(0.05) - 2.0
    assert l1_distance(a, b) == pytest.approx(exact, abs=1e-5)
    assert l1_distance(a, a) == 0.0


def test_l1_distance_requires_matching_grids():
    a = gaussian_density(Grid.regular(1, 8.0, 0.01), 0.0, 1.0)
    b = gaussian_density(Grid.regular(1, 8.0, 0.02), 0.0, 1.0)
    with pytest.raises(ValueError):
        l1_distance(a, b)


def test_sample_set_dump(tmp_path):
    pts = np.array([[0.125], [-3.5], [2.0]])
    path = tmp_path / "samples.txt"
    SampleSet(points=pts, dropped_moment2=0.0).dump(path)
    assert np.array_equal(np.loadtxt(path).reshape(-1, 1), pts)
