"""Inverse jump flow y(x, z) = x - p(y(x, z), z) and its Jacobian factor.

For a jump amplitude with |D_y p| <= K |z|, the map y -> y + p(y, z) is
invertible for |z| below the admissible radius; the inverse point y(x, z)
is the unique fixed point of y = x - p(y, z), and the change-of-variables
factor is

    m(x, z) = det(D_x y) = 1 / det(1 + (D_y p)(y(x, z), z)).

All solvers are batched over a leading sample axis.  lemma_suite checks the
quantitative bounds used by the forward-operator construction on random
samples and reports violations with witnesses instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import model_jacobian, _sample_ball

MAX_ITERATIONS = 200


class NonContractionError(RuntimeError):
    """Fixed-point iteration failed to converge within the iteration cap."""


class InvertibilityError(RuntimeError):
    """det(1 + D_y p) <= 0: the jump map is not invertible at this point."""


def admissible_radius(d, K):
    """Radius r0 = 1 / (8 d K) below which the inverse flow is certified.

    The fixed-point iteration then contracts with factor d K |z| < 1/8 and
    det(1 + D_y p) stays above 2^-d with a wide margin.
    """
    if d < 1 or K <= 0:
        raise ValueError("need d >= 1 and K > 0")
    return 1.0 / (8.0 * d * K)


@dataclass(frozen=True)
class DetExpansion:
    """det(1 + M) split as 1 + trace + remainder."""

    trace: float
    remainder: float
    det: float


@dataclass(frozen=True)
class InverseFlowResult:
    y: np.ndarray
    q: np.ndarray
    m: float
    iterations: int
    residual: float


def _det_batch(mats):
    if mats.shape[-1] == 1:
        return mats[..., 0, 0]
    return np.linalg.det(mats)


def compute_m_batch(model, y, z):
    """(trace, remainder, det, m) of 1 + D_y p at batched (y, z)."""
    jac = model_jacobian(model, y, z)
    d = model.d
    eye = np.eye(d)
    det = _det_batch(eye + jac)
    trace = np.trace(jac, axis1=-2, axis2=-1)
    if np.any(det <= 0):
        flat = np.asarray(det).reshape(-1)
        i = int(np.argmin(flat))
        ypt = np.asarray(y, dtype=float).reshape(-1, d)[i]
        raise InvertibilityError(
            f"det(1 + D_y p) = {flat[i]:.3e} <= 0 at y={ypt.tolist()}; "
            "the jump map is not invertible there")
    return trace, det - 1.0 - trace, det, 1.0 / det


def compute_m(model, y, z):
    """DetExpansion of det(1 + D_y p(y, z)); raises if the det is <= 0."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    trace, rem, det, _ = compute_m_batch(model, y[None, :], z[None, :])
    return DetExpansion(float(trace[0]), float(rem[0]), float(det[0]))


def solve_inverse_batch(model, x, z, tol=1e-12):
    """Solve y = x - p(y, z) for rows of x (n, d) against z (n, d) or (d,).

    Returns (y, q, m, iterations, residual) with q = x - y.  Rows with
    z = 0 short-circuit to (y, q, m) = (x, 0, 1).  Raises
    NonContractionError if any row fails to reach tol within the cap.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = np.broadcast_to(z, x.shape)
    z = np.ascontiguousarray(z)
    n = x.shape[0]

    nonzero = np.linalg.norm(z, axis=1) > 0
    y = x.copy()
    iterations = np.zeros(n, dtype=int)
    residual = np.zeros(n)

    idx = np.flatnonzero(nonzero)
    if idx.size:
        xs, zs = x[idx], z[idx]
        ys = xs.copy()
        active = np.arange(idx.size)
        for it in range(1, MAX_ITERATIONS + 1):
            y_next = xs[active] - model.p(ys[active], zs[active])
            res = np.linalg.norm(y_next - ys[active], axis=1)
            ys[active] = y_next
            iterations[idx[active]] = it
            residual[idx[active]] = res
            keep = res > tol
            if not np.any(keep):
                break
            active = active[keep]
        else:
            worst = idx[active[int(np.argmax(residual[idx[active]]))]]
            raise NonContractionError(
                f"no contraction after {MAX_ITERATIONS} iterations at "
                f"x={x[worst].tolist()}, z={z[worst].tolist()} "
                f"(residual {residual[worst]:.3e}); |z| may exceed the "
                "admissible radius")
        y[idx] = ys

    q = x - y
    m = np.ones(n)
    if idx.size:
        _, _, _, m_vals = compute_m_batch(model, y[idx], z[idx])
        m[idx] = m_vals
    return y, q, m, iterations, residual


def solve_inverse(model, x, z, tol=1e-12):
    """Single-point inverse flow; see solve_inverse_batch."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    y, q, m, its, res = solve_inverse_batch(model, x[None, :], z[None, :], tol=tol)
    return InverseFlowResult(y[0], q[0], float(m[0]), int(its[0]), float(res[0]))


# ---------------------------------------------------------------------------
# sampled lemma suite


@dataclass
class LemmaCheck:
    lemma_id: str
    n_samples: int
    worst_ratio: float
    witness_x: str
    witness_z: str
    passed: bool
    message: str = ""


@dataclass
class LemmaReport:
    r: float
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, lemma_id):
        for c in self.checks:
            if c.lemma_id == lemma_id:
                return c
        raise KeyError(lemma_id)

    def to_rows(self):
        header = ("lemma_id", "n_samples", "worst_ratio", "witness_x",
                  "witness_z", "pass")
        rows = [(c.lemma_id, c.n_samples, c.worst_ratio, c.witness_x,
                 c.witness_z, c.passed) for c in self.checks]
        return header, rows


def _sup_ratio_stability(ratios, nz, r):
    """Stability of sup ratios between the bands |z| < r and |z| < r/10.

    Returns (band_ratio, index of the full-band supremum).  A pair of
    all-zero suprema (state-independent jumps) counts as stable.
    """
    inner = nz < r / 10.0
    sup_full = float(ratios.max()) if ratios.size else 0.0
    sup_inner = float(ratios[inner].max()) if np.any(inner) else 0.0
    i = int(np.argmax(ratios)) if ratios.size else 0
    if sup_full <= 1e-14:
        return 1.0, i
    if sup_inner <= 1e-14:
        return math.inf, i
    return sup_full / sup_inner, i


def lemma_suite(model, r, n_samples=10_000, r_box=10.0, seed=0, tol=1e-12):
    """Sampled verification of the inverse-flow bounds for |z| < r.

    Checks, per sample with |x| <= r_box and 0 < |z| < r:
      y_bound:        |y(x,z)| <= 2 |x| + 1
      q_bound:        |q(x,z)| <= 2 K (1 + |x|) |z|
      det_lower:      det(1 + D_y p) >= 2^-d
      m_range:        2^-d <= m <= 2^d
      p_quadratic:    |det - 1 - trace| <= (d K |z|)^2 d!
      q_lipschitz:    |q(x1,z) - q(x2,z)| <= 2 K |z| |x1 - x2|
      m_slope_stability:   sup |m-1|/|z| stable (factor <= 4) between the
                           bands |z| < r and |z| < r/10
      div_slope_stability: same stability for |tr D_y p(x,z) - tr D_y p(y,z)| / |z|^2

    Violations are recorded with witnesses; nothing is raised.
    """
    rng = np.random.default_rng(seed)
    d, K = model.d, model.K
    x = _sample_ball(rng, n_samples, d, r_box)
    x2 = _sample_ball(rng, n_samples, d, r_box)
    z = _sample_ball(rng, n_samples, d, r)
    # avoid exact zeros: ratios below divide by |z|
    tiny = np.linalg.norm(z, axis=1) < 1e-12 * r
    z[tiny] = r * 0.5 / math.sqrt(d)

    report = LemmaReport(r=r)

    def wit(i):
        return f"{x[i].tolist()}", f"{z[i].tolist()}"

    def add(lemma_id, fn):
        try:
            ratios, extra_wit = fn()
        except Exception as exc:
            report.checks.append(LemmaCheck(lemma_id, n_samples, float("nan"),
                                            "", "", False, f"error: {exc}"))
            return
        if np.isscalar(ratios):
            i = extra_wit if extra_wit is not None else 0
            wx, wz = wit(i)
            worst = float(ratios)
            passed = worst <= 4.0 if lemma_id.endswith("stability") else worst <= 1.0 + 1e-9
        else:
            i = int(np.argmax(ratios))
            wx, wz = wit(i)
            worst = float(ratios[i])
            passed = worst <= 1.0 + 1e-9
        report.checks.append(LemmaCheck(lemma_id, n_samples, worst, wx, wz, passed))

    try:
        y, q, m, _, _ = solve_inverse_batch(model, x, z, tol=tol)
        trace, rem, det, _ = compute_m_batch(model, y, z)
        y2, q2, _, _, _ = solve_inverse_batch(model, x2, z, tol=tol)
    except Exception as exc:
        report.checks.append(LemmaCheck("solve", n_samples, float("nan"),
                                        "", "", False, f"error: {exc}"))
        return report

    nx = np.linalg.norm(x, axis=1)
    nz = np.linalg.norm(z, axis=1)

    add("y_bound", lambda: (np.linalg.norm(y, axis=1) / (2 * nx + 1), None))
    add("q_bound", lambda: (np.linalg.norm(q, axis=1) / (2 * K * (1 + nx) * nz), None))
    add("det_lower", lambda: (2.0 ** (-d) / det, None))
    add("m_range", lambda: (np.maximum(m / 2.0 ** d, 2.0 ** (-d) / m), None))
    add("p_quadratic", lambda: (np.abs(rem) / ((d * K * nz) ** 2 * math.factorial(d)), None))
    add("q_lipschitz", lambda: (
        np.linalg.norm(q - q2, axis=1)
        / np.maximum(2 * K * nz * np.linalg.norm(x - x2, axis=1), 1e-300), None))
    add("m_slope_stability", lambda: _sup_ratio_stability(np.abs(m - 1.0) / nz, nz, r))

    def div_slope():
        div_x = np.trace(model_jacobian(model, x, z), axis1=-2, axis2=-1)
        div_y = trace
        return _sup_ratio_stability(np.abs(div_x - div_y) / nz ** 2, nz, r)

    add("div_slope_stability", div_slope)
    return report
