"""Inverse flow y = x - p(y, z): solver oracles and sampled bounds."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levyfp.inverse_flow import (
    NonContractionError,
    admissible_radius,
    compute_m,
    lemma_suite,
    solve_inverse,
    solve_inverse_batch,
)
from levyfp.model import build_model, fd_jacobian, model_jacobian


def test_admissible_radius_formula():
    assert admissible_radius(1, 1.0) == pytest.approx(0.125)
    assert admissible_radius(2, 1.0) == pytest.approx(1.0 / 16.0)
    assert admissible_radius(1, 4.0) == pytest.approx(1.0 / 32.0)
    with pytest.raises(ValueError):
        admissible_radius(0, 1.0)
    with pytest.raises(ValueError):
        admissible_radius(1, 0.0)


def test_geometric_jump_closed_form():
    # p = y z gives y = x / (1 + z) and m = 1 / (1 + z)
    model = build_model(jump="geometric")
    res = solve_inverse(model, 2.0, 0.0625)
    assert res.y[0] == pytest.approx(2.0 / 1.0625, abs=1e-12)
    assert res.q[0] == pytest.approx(2.0 - 2.0 / 1.0625, abs=1e-12)
    assert res.m == pytest.approx(1.0 / 1.0625, abs=1e-12)
    assert res.residual <= 1e-12


def test_additive_jump_is_exact_shift():
    model = build_model(jump="additive")
    res = solve_inverse(model, 1.0, 0.05)
    assert res.y[0] == pytest.approx(0.95, abs=1e-14)
    assert res.q[0] == pytest.approx(0.05, abs=1e-14)
    assert res.m == pytest.approx(1.0, abs=1e-14)


def test_zero_jump_short_circuits():
    model = build_model(jump="geometric")
    res = solve_inverse(model, 3.0, 0.0)
    assert res.y[0] == 3.0
    assert res.q[0] == 0.0
    assert res.m == 1.0
    assert res.iterations == 0


def test_batch_matches_single():
    model = build_model(jump="sine")
    rng = np.random.default_rng(3)
    x = rng.uniform(-5, 5, size=(40, 1))
    z = rng.uniform(-0.06, 0.06, size=(40, 1))
    y, q, m, its, res = solve_inverse_batch(model, x, z)
    for i in range(40):
        single = solve_inverse(model, x[i], z[i])
        assert np.allclose(single.y, y[i], atol=1e-12)
        assert single.m == pytest.approx(m[i], abs=1e-12)
    # the defining equation holds row-wise
    assert np.max(np.abs(y + model.p(y, z) - x)) <= 1e-10


def test_non_contraction_raises():
    model = build_model(jump="geometric")
    with pytest.raises(NonContractionError):
        solve_inverse(model, 1.0, 1.5)


def test_compute_m_uses_analytic_jacobian():
    model = build_model(jump="geometric")
    y = np.array([0.4])
    z = np.array([0.05])
    # det(1 + dp/dy) = 1 + z in d = 1
    expansion = compute_m(model, y, z)
    assert expansion.det == pytest.approx(1.05, abs=1e-14)
    assert expansion.trace == pytest.approx(0.05, abs=1e-14)
    assert abs(expansion.remainder) <= 1e-14


def test_fd_jacobian_matches_analytic():
    model = build_model(jump="sine")
    y = np.array([[0.7]])
    z = np.array([[0.04]])
    fd = fd_jacobian(model.p, y, z)
    an = model_jacobian(model, y, z)
    assert np.allclose(fd, an, atol=1e-7)
    assert an[0, 0, 0] == pytest.approx(np.cos(0.7) * 0.04, abs=1e-12)


def test_jacobian_without_analytic_derivative():
    # dp_dy omitted: m falls back to finite differences
    from levyfp.model import SdeModel

    model = SdeModel(d=1, b=lambda x: -x,
                     sigma=lambda x: np.ones(x.shape + (1,)),
                     p=lambda y, z: y * z, K=1.0)
    expansion = compute_m(model, np.array([0.4]), np.array([0.05]))
    assert expansion.det == pytest.approx(1.05, abs=1e-7)


@given(st.floats(-8.0, 8.0), st.floats(-0.05, 0.05))
@settings(max_examples=80, deadline=None)
def test_inverse_defining_equation_roundtrip(xv, zv):
    model = build_model(jump="sine")
    res = solve_inverse(model, xv, zv)
    recon = res.y + model.p(res.y[None, :], np.array([[zv]]))[0]
    assert abs(float(recon[0]) - xv) <= 1e-10


def test_lemma_suite_reference_models():
    for kind in ("geometric", "additive", "sine"):
        model = build_model(jump=kind, K=1.0)
        report = lemma_suite(model, 0.0625, n_samples=2000, seed=21)
        failed = [c.lemma_id for c in report.checks if not c.passed]
        assert not failed, f"{kind}: {failed}"


def test_lemma_suite_stability_ratio_within_factor_four():
    model = build_model(jump="geometric")
    report = lemma_suite(model, 0.0625, n_samples=4000, seed=9)
    check = report.check("m_slope_stability")
    assert check.passed
    assert check.worst_ratio <= 4.0


def test_lemma_suite_records_bound_violations():
    # p = 3 y z declared with K = 1 breaks the q growth bound; the suite
    # records the violation with a witness instead of raising
    model = build_model(jump="poly", jump_coeffs=[0.0, 3.0], K=1.0)
    report = lemma_suite(model, 0.03, n_samples=2000, seed=4)
    assert not report.passed
    check = report.check("q_bound")
    assert not check.passed
    assert check.witness_x
