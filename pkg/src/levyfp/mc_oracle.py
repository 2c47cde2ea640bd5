"""Monte Carlo oracle: Euler scheme with compound-Poisson jumps plus KDE.

Simulates dY = b(Y)dt + sigma(Y)dB + jumps for the same model the grid
operators discretize, entirely independently of them: jumps with |z| >= eps
arrive as a Poisson process of the restricted measure's total rate, marks
are drawn by inverse CDF (radial densities) or categorically (atoms), and
the compensator of marks with eps <= |z| < 1 is folded into the drift.
Jumps below eps are dropped; their |z|^2 mass is reported as a bias proxy.

Determinism: every path owns a derived RNG stream seeded by
(seed, path_index) with a fixed draw order (initial point, jump count,
jump times, mark uniforms, mark normals, step normals, jump-time normals),
so chunked and serial execution produce identical samples.  Antithetic
pairs share one stream and the odd path negates all Brownian normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LevyMeasure, SdeModel
from .operators import Grid, GridFunction
from .quadrature import split_measure, tail_mass, truncated_moment


class SimulationError(RuntimeError):
    """Simulation produced too many invalid paths or an invalid setup."""


@dataclass(frozen=True)
class McConfig:
    """Simulation parameters; jump_cutoff is the dropped-jump radius eps."""

    n_paths: int
    n_steps: int
    T: float
    jump_cutoff: float
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if self.n_steps < 1:
            raise ValueError("need at least one time step")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.jump_cutoff < 0:
            raise ValueError("jump cutoff must be nonnegative")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")


@dataclass
class SampleSet:
    """Terminal points plus the dropped-jump bias proxy."""

    points: np.ndarray  # (n, d)
    dropped_moment2: float
    n_flagged: int = 0

    def dump(self, path):
        with open(path, "w") as fh:
            for pt in self.points:
                fh.write(" ".join(f"{c:.17g}" for c in pt) + "\n")


def gaussian_x0(center, sigma, d=1):
    """Initial-point sampler Y_0 ~ N(center, sigma^2 I)."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (d,)).copy()

    def sample(rng):
        return center + sigma * rng.standard_normal(d)

    return sample


def point_x0(x, d=1):
    """Deterministic initial point."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (d,)).copy()

    def sample(rng):
        return x.copy()

    return sample


class _MarkSampler:
    """Inverse-CDF / categorical sampler for nu restricted to |z| >= eps."""

    def __init__(self, measure: LevyMeasure, eps):
        self.d = measure.d
        locs, ws = measure.atom_arrays()
        comps = []
        if len(locs):
            radii = np.linalg.norm(locs, axis=1)
            for loc, w, nz in zip(locs, ws, radii):
                if nz >= eps:
                    comps.append(("atom", float(w), loc.copy()))
        density = measure.density
        self._density = density
        if density is not None and density.z_max > eps:
            lo = eps ** (-density.beta)
            hi = 0.0 if math.isinf(density.z_max) else density.z_max ** (-density.beta)
            side_mass = density.c * (lo - hi) / density.beta
            self._inv_lo, self._inv_hi = lo, hi
            if measure.d == 1:
                sides = {"two": (1.0, -1.0), "positive": (1.0,), "negative": (-1.0,)}
                for sgn in sides[density.side]:
                    comps.append(("ray", side_mass, np.array([sgn])))
            else:
                # full sphere: direction from the mark normals
                sphere = {2: 2.0 * math.pi, 3: 4.0 * math.pi}[measure.d]
                comps.append(("sphere", side_mass * sphere, None))
        self.rate = float(sum(c[1] for c in comps))
        self._comps = comps
        self._cum = np.cumsum([c[1] for c in comps]) / self.rate if comps else None

    def _radius(self, u):
        inv = self._inv_lo - u * (self._inv_lo - self._inv_hi)
        return inv ** (-1.0 / self._density.beta)

    def sample(self, uniforms, normals):
        """Marks for one path; uniforms (k, 2), normals (k, d) -> (k, d)."""
        k = uniforms.shape[0]
        out = np.zeros((k, self.d))
        for i in range(k):
            which = int(np.searchsorted(self._cum, uniforms[i, 0], side="right"))
            which = min(which, len(self._comps) - 1)
            kind, _, payload = self._comps[which]
            if kind == "atom":
                out[i] = payload
            elif kind == "ray":
                out[i] = payload * self._radius(uniforms[i, 1])
            else:
                direction = normals[i]
                norm = np.linalg.norm(direction)
                if norm == 0.0:
                    direction = np.zeros(self.d)
                    direction[0] = 1.0
                    norm = 1.0
                out[i] = (direction / norm) * self._radius(uniforms[i, 1])
        return out


def _compensator_nodes(measure, eps):
    """Quadrature nodes for int_{eps<=|z|<1} p(., z) nu(dz)."""
    if eps <= 0:
        # atoms only here: simulate rejects eps = 0 for densities
        locs, ws = measure.atom_arrays()
        if not len(locs):
            return np.zeros((0, measure.d)), np.zeros(0)
        keep = np.linalg.norm(locs, axis=1) < 1.0
        return locs[keep], ws[keep]
    if tail_mass(measure, eps) == 0.0:
        return np.zeros((0, measure.d)), np.zeros(0)
    quad = split_measure(measure, eps)
    norms = np.linalg.norm(quad.outer_nodes, axis=1)
    keep = norms < 1.0
    return quad.outer_nodes[keep], quad.outer_weights[keep]


def simulate(model: SdeModel, measure: LevyMeasure, x0_sampler,
             cfg: McConfig, chunk_size=20_000):
    """Terminal samples of the jump SDE at time T.

    Jump-adapted stepping: within each Euler step, paths advance to each
    of their jump times with a fresh Brownian increment, apply
    Y <- Y + p(Y-, z), and then advance to the step end.  Paths that leave
    the finite range are flagged and excluded; more than 1% flagged is an
    error.
    """
    d = model.d
    if measure.density is not None and cfg.jump_cutoff <= 0:
        raise ValueError("jump_cutoff must be positive when the measure has "
                         "a density: the total jump rate below any cutoff "
                         "is infinite")
    sampler = _MarkSampler(measure, cfg.jump_cutoff)
    comp_nodes, comp_weights = _compensator_nodes(measure, cfg.jump_cutoff)
    dt = cfg.T / cfg.n_steps

    def drift(y):
        total = np.asarray(model.b(y), dtype=float)
        for z, w in zip(comp_nodes, comp_weights):
            total = total - w * np.asarray(
                model.p(y, np.broadcast_to(z, y.shape)), dtype=float)
        return total

    def diffuse(y, xi, sqdt):
        sig = np.asarray(model.sigma(y), dtype=float)
        return np.einsum("nij,nj->ni", sig, xi) * sqdt

    n_streams = cfg.n_paths // 2 if cfg.antithetic else cfg.n_paths
    terminal = np.empty((cfg.n_paths, d))

    stream_chunk = max(1, chunk_size // (2 if cfg.antithetic else 1))
    for start in range(0, n_streams, stream_chunk):
        stop = min(start + stream_chunk, n_streams)
        draws = []
        for idx in range(start, stop):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, idx)))
            x0 = np.asarray(x0_sampler(rng), dtype=float).reshape(d)
            n_jumps = int(rng.poisson(sampler.rate * cfg.T))
            times = np.sort(rng.uniform(0.0, cfg.T, n_jumps))
            mark_u = rng.uniform(size=(n_jumps, 2))
            mark_n = rng.standard_normal((n_jumps, d))
            base_n = rng.standard_normal((cfg.n_steps, d))
            jump_n = rng.standard_normal((n_jumps, d))
            marks = sampler.sample(mark_u, mark_n) if n_jumps else np.zeros((0, d))
            draws.append((x0, times, marks, base_n, jump_n))

        if cfg.antithetic:
            mirrored = [(x0, times, marks, -base_n, -jump_n)
                        for x0, times, marks, base_n, jump_n in draws]
            draws = [pair[i] for pair in zip(draws, mirrored) for i in range(2)]

        n_chunk = len(draws)
        max_j = max((dr[1].shape[0] for dr in draws), default=0)
        y = np.stack([dr[0] for dr in draws])
        jt = np.full((n_chunk, max_j), np.inf)
        marks = np.zeros((n_chunk, max_j, d))
        jn = np.zeros((n_chunk, max_j, d))
        for i, (_, times, mk, _, jxi) in enumerate(draws):
            k = times.shape[0]
            jt[i, :k] = times
            marks[i, :k] = mk
            jn[i, :k] = jxi
        base = np.stack([dr[3] for dr in draws])
        jptr = np.zeros(n_chunk, dtype=np.int64)

        # diverging paths overflow to inf/nan; the finite guard below
        # flags them, so suppress the intermediate warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for step in range(cfg.n_steps):
                t0, t1 = step * dt, (step + 1) * dt
                t_last = np.full(n_chunk, t0)
                while True:
                    next_t = jt[np.arange(n_chunk), np.minimum(jptr, max_j - 1)] \
                        if max_j else np.full(n_chunk, np.inf)
                    active = (jptr < max_j) & (next_t <= t1) if max_j else \
                        np.zeros(n_chunk, dtype=bool)
                    if not np.any(active):
                        break
                    ida = np.nonzero(active)[0]
                    delta = next_t[ida] - t_last[ida]
                    ya = y[ida]
                    xi = jn[ida, jptr[ida]]
                    ya = ya + drift(ya) * delta[:, None] \
                        + diffuse(ya, xi, np.sqrt(delta)[:, None])
                    z = marks[ida, jptr[ida]]
                    ya = ya + np.asarray(model.p(ya, z), dtype=float)
                    y[ida] = ya
                    t_last[ida] = next_t[ida]
                    jptr[ida] += 1
                delta = t1 - t_last
                y = y + drift(y) * delta[:, None] \
                    + diffuse(y, base[:, step, :], np.sqrt(delta)[:, None])

        out_lo = start * (2 if cfg.antithetic else 1)
        terminal[out_lo:out_lo + n_chunk] = y

    finite = np.isfinite(terminal).all(axis=1)
    n_flagged = int(np.sum(~finite))
    if n_flagged > 0.01 * cfg.n_paths:
        raise SimulationError(
            f"{n_flagged} of {cfg.n_paths} paths became non-finite")
    try:
        dropped = truncated_moment(measure, cfg.jump_cutoff, 2.0)
    except ValueError:
        dropped = 0.0
    return SampleSet(points=terminal[finite], dropped_moment2=float(dropped),
                     n_flagged=n_flagged)


def kde_density(samples: SampleSet, grid: Grid, bandwidth="auto"):
    """Gaussian kernel density of the samples on grid nodes, mass 1.

    "auto" uses Silverman's per-axis rule 1.06 sigma n^(-1/5), floored at
    the grid spacing so the kernel never falls between nodes.
    """
    pts = samples.points
    n = pts.shape[0]
    if n < 100:
        raise SimulationError(f"need at least 100 samples for a density, got {n}")
    if grid.d != pts.shape[1]:
        raise ValueError("sample dimension does not match the grid")
    inside = np.all(np.abs(pts) <= grid.x_max, axis=1)
    if not np.any(inside):
        raise SimulationError("all samples fall outside the grid")
    if bandwidth == "auto":
        bw = 1.06 * np.std(pts, axis=0) * n ** (-0.2)
        bw = np.maximum(bw, grid.h)
    else:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        bw = np.full(grid.d, float(bandwidth))

    axis = grid.axis
    shape = (grid.n_per_axis,) * grid.d
    dens = np.zeros(shape)
    letters = "ijk"[: grid.d]
    spec = ",".join(f"{ax}c" for ax in letters) + "->" + letters
    for lo in range(0, n, 20_000):
        chunk = pts[lo:lo + 20_000]
        kernels = []
        for ax in range(grid.d):
            u = (axis[:, None] - chunk[None, :, ax]) / bw[ax]
            kernels.append(np.exp(-0.5 * u * u) / (bw[ax] * math.sqrt(2 * math.pi)))
        dens += np.einsum(spec, *kernels)
    vals = dens.reshape(-1) / n
    total = grid.cell_volume * float(np.sum(vals))
    if total <= 0:
        raise SimulationError("kernel estimate has no mass on the grid")
    return GridFunction(grid, vals / total)


def l1_distance(u: GridFunction, v: GridFunction):
    """h^d-weighted l1 distance between two densities on the same grid."""
    if u.grid != v.grid:
        raise ValueError("grid mismatch")
    return u.grid.cell_volume * float(np.sum(np.abs(u.values - v.values)))
