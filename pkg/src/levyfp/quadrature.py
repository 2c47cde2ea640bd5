"""Quadrature for Levy measures split at a radius r.

A LevyMeasure is turned into two node/weight families:

  inner nodes with |z| < r, feeding the compensated small-jump operator,
  outer nodes with |z| >= r, feeding the large-jump operator.

Atoms are routed by |z|.  A radial density c |z|^(-d-beta) is discretized
with geometrically graded radial panels (ratio 2): inward from r down to a
cutoff r 2^-n_inner on the inner side, outward from r up to z_max on the
outer side.  Panel masses are closed-form, so outer_mass matches
nu({|z| >= r}) to rounding; each panel contributes one node at its radial
midpoint (midpoint rule).  The dropped inner tail below the cutoff must
have second moment <= tol, otherwise a resolution error reports the
required n_inner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LevyMeasure, MeasureError


class ResolutionError(ValueError):
    """n_inner is too small for the requested tail tolerance."""


class MomentDivergenceError(ValueError):
    """A requested |z|-power moment diverges for this density exponent."""


# surface measure of the unit sphere in R^d (d = 1 counts the two points)
_SPHERE = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}


def _sides(density, d):
    """Direction vectors and their angular weights for a radial density."""
    if d == 1:
        if density.side == "two":
            return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
        sign = 1.0 if density.side == "positive" else -1.0
        return np.array([[sign]]), np.array([1.0])
    if d == 2:
        n_theta = 16
        ang = (np.arange(n_theta) + 0.5) * 2.0 * math.pi / n_theta
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return dirs, np.full(n_theta, _SPHERE[2] / n_theta)
    if d == 3:
        # latitude bands with exact solid-angle weights, uniform longitudes
        n_lat, n_lon = 6, 8
        mu_edges = np.linspace(-1.0, 1.0, n_lat + 1)
        mu_mid = 0.5 * (mu_edges[:-1] + mu_edges[1:])
        band_dmu = np.diff(mu_edges)
        lon = (np.arange(n_lon) + 0.5) * 2.0 * math.pi / n_lon
        dirs, ws = [], []
        for mu, dmu in zip(mu_mid, band_dmu):
            s = math.sqrt(max(0.0, 1.0 - mu * mu))
            for phi in lon:
                dirs.append([s * math.cos(phi), s * math.sin(phi), mu])
                ws.append(2.0 * math.pi * dmu / n_lon)
        return np.array(dirs), np.array(ws)
    raise MeasureError(f"radial densities are not supported in d = {d}")


def _radial_mass(density, a, b):
    """Closed-form shell mass c int_a^b rho^(-1-beta) drho per unit direction weight.

    With nu(dz) = c |z|^(-d-beta) dz, integrating out the angle leaves
    c * Omega * int_a^b rho^(-1-beta) drho where Omega is the total
    direction weight returned by _sides, so node weights are exact.
    """
    beta = density.beta
    return density.c * (a ** (-beta) - b ** (-beta)) / beta


@dataclass(frozen=True)
class QuadratureSplit:
    """Node/weight families for the inner and outer parts of a measure."""

    r: float
    inner_nodes: np.ndarray  # (k, d)
    inner_weights: np.ndarray  # (k,)
    outer_nodes: np.ndarray
    outer_weights: np.ndarray
    outer_mass: float
    dropped_tail_moment2: float


def split_measure(measure: LevyMeasure, r, n_inner=30, tol=1e-8):
    """Split a measure at radius r into inner/outer quadrature nodes.

    Raises MeasureError when the density violates the small-jump second
    moment requirement (beta >= 2) and ResolutionError when the dropped
    inner tail below r 2^-n_inner carries more than tol of |z|^2 mass.
    """
    if r <= 0:
        raise ValueError("split radius must be positive")
    measure.check_h3()
    d = measure.d

    locs, ws = measure.atom_arrays()
    radii = np.linalg.norm(locs, axis=1) if len(locs) else np.zeros(0)
    inner_n = [locs[i] for i in range(len(locs)) if radii[i] < r]
    inner_w = [ws[i] for i in range(len(locs)) if radii[i] < r]
    outer_n = [locs[i] for i in range(len(locs)) if radii[i] >= r]
    outer_w = [ws[i] for i in range(len(locs)) if radii[i] >= r]

    dropped = 0.0
    density = measure.density
    if density is not None:
        dirs, dir_ws = _sides(density, d)
        beta = density.beta
        r_in = min(r, density.z_max)

        cutoff = r_in * 2.0 ** (-n_inner)
        # dropped |z|^2 mass below the cutoff, closed form, all directions
        total_dirs = float(np.sum(dir_ws))
        dropped = total_dirs * density.c * cutoff ** (2.0 - beta) / (2.0 - beta)
        if dropped > tol:
            need = math.ceil(math.log2(
                r_in / (tol * (2.0 - beta) / (total_dirs * density.c)) ** (1.0 / (2.0 - beta))))
            raise ResolutionError(
                f"inner tail |z|^2 mass {dropped:.3e} exceeds tol {tol:.3e}; "
                f"need n_inner >= {need}")

        edges = r_in * 2.0 ** (-np.arange(n_inner + 1, dtype=float))
        # deep panels of a steep density can overflow; the finiteness guard
        # below turns that into a ResolutionError instead of nan weights
        with np.errstate(over="ignore", invalid="ignore"):
            for a, b in zip(edges[1:], edges[:-1]):
                mass = _radial_mass(density, a, b)
                mid = 0.5 * (a + b)
                for u, uw in zip(dirs, dir_ws):
                    inner_n.append(mid * u)
                    inner_w.append(uw * mass)

        if density.z_max > r:
            a = r
            level = 0
            while a < density.z_max:
                b = min(2.0 * a, density.z_max)
                if math.isinf(density.z_max):
                    remaining = _radial_mass(density, a, math.inf)
                    if remaining <= tol:
                        break
                mass = _radial_mass(density, a, b)
                mid = 0.5 * (a + b)
                for u, uw in zip(dirs, dir_ws):
                    outer_n.append(mid * u)
                    outer_w.append(uw * mass)
                a = b
                level += 1
                if level > 200:
                    raise ResolutionError("outer panel count exceeded 200 levels")

    inner_nodes = np.array(inner_n, dtype=float).reshape(-1, d)
    outer_nodes = np.array(outer_n, dtype=float).reshape(-1, d)
    inner_weights = np.array(inner_w, dtype=float)
    outer_weights = np.array(outer_w, dtype=float)
    if inner_weights.size and not np.all(np.isfinite(inner_weights)):
        raise ResolutionError(
            f"panel masses near |z| = {r} 2^-{n_inner} overflow the float "
            "range; the requested tolerance is unreachable for this density")
    return QuadratureSplit(
        r=float(r),
        inner_nodes=inner_nodes, inner_weights=inner_weights,
        outer_nodes=outer_nodes, outer_weights=outer_weights,
        outer_mass=float(outer_weights.sum()),
        dropped_tail_moment2=float(dropped or 0.0),
    )


def truncated_moment(measure: LevyMeasure, r, power):
    """Closed-form int_{|z| < r} |z|^power nu(dz).

    power must exceed the density exponent beta for convergence; otherwise
    MomentDivergenceError is raised.  Atom contributions are finite sums.
    """
    if r <= 0:
        raise ValueError("truncation radius must be positive")
    power = float(power)
    locs, ws = measure.atom_arrays()
    total = 0.0
    if len(locs):
        radii = np.linalg.norm(locs, axis=1)
        mask = radii < r
        total += float(np.sum(ws[mask] * radii[mask] ** power))
    density = measure.density
    if density is not None:
        if power <= density.beta:
            raise MomentDivergenceError(
                f"|z|^{power} moment diverges near 0: power <= beta = {density.beta}")
        _, dir_ws = _sides(density, measure.d)
        r_eff = min(r, density.z_max)
        total += float(np.sum(dir_ws)) * density.c \
            * r_eff ** (power - density.beta) / (power - density.beta)
    return total


def tail_mass(measure: LevyMeasure, r):
    """Closed-form nu({|z| >= r})."""
    locs, ws = measure.atom_arrays()
    total = 0.0
    if len(locs):
        radii = np.linalg.norm(locs, axis=1)
        total += float(np.sum(ws[radii >= r]))
    density = measure.density
    if density is not None and density.z_max > r:
        _, dir_ws = _sides(density, measure.d)
        total += float(np.sum(dir_ws)) * _radial_mass(density, r, density.z_max)
    return total
