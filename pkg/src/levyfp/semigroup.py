"""Implicit time stepping for d_t u = L u and dissipativity certification.

The resolvent step (I - dt L) v = u is the discrete object behind the
contraction property: when L is dissipative in the h^d-weighted l1 norm,
every implicit Euler step satisfies ||v||_1 <= ||u||_1 with lambda = 1/dt,
so trajectories are monitored for exactly that inequality plus mass
conservation and positivity.  Dissipativity itself is certified directly
on random smooth bumps via the margin ||(lambda - L)u||_1 - lambda ||u||_1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import Grid, GridFunction, SparseOperator

MAX_SOLVER_ITERATIONS = 10_000


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""


class SupportMarginError(RuntimeError):
    """Evolved density reached the boundary margin."""


@dataclass
class EvolutionReport:
    """Per-step trajectory log of an implicit Euler evolution."""

    times: list
    l1_norms: list
    masses: list
    min_values: list
    final: GridFunction

    def to_rows(self):
        header = ("time", "l1_norm", "mass", "min_value")
        rows = list(zip(self.times, self.l1_norms, self.masses, self.min_values))
        return header, rows


@dataclass
class DissipativityReport:
    """Margins ||(lambda - op)u||_1 - lambda ||u||_1 over a bump ensemble.

    Test functions are normalized to unit l1 norm, so margins are
    comparable and the acceptance threshold -c_tol * h applies uniformly.
    """

    lam: float
    margins: list
    min_margin: float
    c_tol: float
    threshold: float
    passed: bool

    def to_rows(self):
        header = ("lambda", "n_functions", "min_margin", "threshold", "pass")
        return header, [(self.lam, len(self.margins), self.min_margin,
                         self.threshold, self.passed)]


class _ResolventSolver:
    """Factorized iterative solver for (I - dt L) v = u, reused across steps."""

    def __init__(self, op: SparseOperator, dt, tol):
        if dt <= 0:
            raise ValueError("time step must be positive")
        if tol <= 0:
            raise ValueError("solver tolerance must be positive")
        self.grid = op.grid
        self.dt = float(dt)
        self.tol = float(tol)
        n = op.grid.n_total
        self.matrix = (sp.identity(n, format="csr") - dt * op.matrix).tocsc()
        try:
            lu = spla.splu(self.matrix)
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"resolvent matrix I - dt L at dt = {dt} "
                              f"cannot be factorized: {exc}") from None
        self.precond = spla.LinearOperator((n, n), matvec=lu.solve)

    def step(self, u: GridFunction, stats=None):
        rhs = u.values
        rhs_l1 = u.norm_l1
        count = [0]

        def tick(_):
            count[0] += 1

        v, info = spla.gmres(self.matrix, rhs, M=self.precond, rtol=1e-13,
                             atol=0.0, restart=30,
                             maxiter=MAX_SOLVER_ITERATIONS // 30 + 1,
                             callback=tick, callback_type="pr_norm")
        hd = self.grid.cell_volume
        residual = hd * float(np.sum(np.abs(rhs - self.matrix @ v)))
        if info != 0 or residual > self.tol * max(rhs_l1, 1e-300):
            raise SolverError(
                f"resolvent solve stopped after {count[0]} iterations with "
                f"weighted residual {residual:.3e} (target {self.tol * rhs_l1:.3e})")
        if stats is not None:
            stats["iterations"] = count[0]
            stats["residual"] = residual
        return GridFunction(self.grid, v)


def step_implicit_euler(op: SparseOperator, u: GridFunction, dt, tol=1e-10,
                        stats=None):
    """Solve (I - dt op) v = u to weighted-l1 residual <= tol ||u||_1."""
    return _ResolventSolver(op, dt, tol).step(u, stats)


def _margin_mask(grid: Grid, margin):
    """Nodes within `margin` of the boundary of [-X, X]^d."""
    points = grid.points()
    return np.any(np.abs(points) > grid.x_max - margin, axis=1)


def evolve(op: SparseOperator, u0: GridFunction, T, dt, tol=1e-10,
           support_margin=0.0, margin_leak_tol=1e-9):
    """Implicit Euler trajectory of d_t u = op u from a normalized density.

    u0 must be nonnegative with unit l1 norm.  When support_margin > 0 the
    density mass within that distance of the boundary is checked each step
    and SupportMarginError reports the first violation time, since mass
    conservation is only meaningful while the support stays interior.
    """
    if T <= 0:
        raise ValueError("final time must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError(f"dt = {dt} does not divide T = {T}")
    if float(np.min(u0.values)) < -1e-12 * max(u0.norm_linf, 1e-300):
        raise ValueError("initial density has negative entries")
    if abs(u0.norm_l1 - 1.0) > 1e-6:
        raise ValueError(f"initial density has l1 norm {u0.norm_l1}, expected 1")
    mask = _margin_mask(op.grid, support_margin) if support_margin > 0 else None
    hd = op.grid.cell_volume

    def leak(u):
        return hd * float(np.sum(np.abs(u.values[mask]))) if mask is not None else 0.0

    if mask is not None and leak(u0) > margin_leak_tol:
        raise SupportMarginError(
            f"initial density carries {leak(u0):.3e} mass inside the "
            f"boundary margin {support_margin}")

    solver = _ResolventSolver(op, dt, tol)
    u = u0
    times = [0.0]
    l1_norms = [u.norm_l1]
    masses = [u.mass]
    min_values = [float(np.min(u.values))]
    for k in range(1, n_steps + 1):
        t = k * dt
        try:
            u = solver.step(u)
        except SolverError as exc:
            raise SolverError(f"step to t = {t} failed: {exc}") from exc
        if mask is not None and leak(u) > margin_leak_tol:
            raise SupportMarginError(
                f"density mass {leak(u):.3e} reached the boundary margin "
                f"{support_margin} at t = {t}")
        times.append(t)
        l1_norms.append(u.norm_l1)
        masses.append(u.mass)
        min_values.append(float(np.min(u.values)))
    return EvolutionReport(times=times, l1_norms=l1_norms, masses=masses,
                           min_values=min_values, final=u)


def gaussian_density(grid: Grid, center, sigma):
    """Isotropic Gaussian bump discretized on the grid, normalized to mass 1."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.d,))
    if sigma <= 0:
        raise ValueError("width must be positive")
    points = grid.points()
    sq = np.sum((points - center) ** 2, axis=1)
    vals = np.exp(-0.5 * sq / sigma ** 2)
    total = grid.cell_volume * float(np.sum(vals))
    if total <= 0:
        raise ValueError("bump mass vanished on the grid")
    return GridFunction(grid, vals / total)


def random_bumps(grid: Grid, n_functions, seed, max_components=5):
    """Random smooth compactly supported test functions, unit l1 norm.

    Each is a sum of up to max_components Gaussians with random signs,
    centers in the safe interior [-X/2, X/2]^d and widths in [4h, X/8], so
    the values at the boundary are negligible.
    """
    rng = np.random.default_rng(seed)
    points = grid.points()
    out = []
    for _ in range(n_functions):
        for _attempt in range(20):
            k = int(rng.integers(1, max_components + 1))
            vals = np.zeros(grid.n_total)
            for _c in range(k):
                center = rng.uniform(-grid.x_max / 2, grid.x_max / 2, size=grid.d)
                lo, hi = np.log(4 * grid.h), np.log(grid.x_max / 8)
                width = float(np.exp(rng.uniform(min(lo, hi), max(lo, hi))))
                sign = 1.0 if rng.random() < 0.5 else -1.0
                amp = rng.uniform(0.2, 1.0)
                sq = np.sum((points - center) ** 2, axis=1)
                vals += sign * amp * np.exp(-0.5 * sq / width ** 2)
            norm = grid.cell_volume * float(np.sum(np.abs(vals)))
            if norm > 1e-10:
                out.append(GridFunction(grid, vals / norm))
                break
        else:
            raise RuntimeError("failed to draw a nondegenerate bump")
    return out


def dissipativity_check(op: SparseOperator, lambdas, n_functions, seed,
                        c_tol=10.0):
    """Margin sweep over a random bump ensemble, one report per lambda.

    margin(u) = ||(lambda - op)u||_1 - lambda ||u||_1 in the h^d-weighted
    norm; a dissipative operator keeps every margin nonnegative, and the
    centered discretization is allowed the O(h) slack -c_tol * h.
    """
    bumps = random_bumps(op.grid, n_functions, seed)
    hd = op.grid.cell_volume
    reports = []
    for lam in lambdas:
        if lam <= 0:
            raise ValueError("lambda must be positive")
        margins = []
        for u in bumps:
            shifted = lam * u.values - op.apply(u.values)
            margins.append(hd * float(np.sum(np.abs(shifted))) - lam * u.norm_l1)
        threshold = -c_tol * op.grid.h
        min_margin = min(margins)
        reports.append(DissipativityReport(
            lam=float(lam), margins=margins, min_margin=min_margin,
            c_tol=float(c_tol), threshold=threshold,
            passed=bool(min_margin >= threshold)))
    return reports


def duality_set_pairing(jr: SparseOperator, u: GridFunction):
    """<J_r u, f_u>_h with f_u = ||u||_1 sign(u), the duality-set certificate.

    For the transpose-assembled J_r the integrand is non-positive, so the
    pairing must come out <= 0 up to roundoff.
    """
    if u.norm_l1 == 0.0:
        raise ValueError("duality set of the zero function is degenerate")
    f_u = u.norm_l1 * np.sign(u.values)
    return u.grid.cell_volume * float(np.dot(jr.apply(u.values), f_u))
