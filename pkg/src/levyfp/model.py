"""Model containers and assumption checks for jump-diffusion forward equations.

A model bundles the coefficients of the SDE

    dY = b(Y) dt + sigma(Y) dW + jumps driven by p(Y-, z) and a Levy measure,

where jumps with |z| < 1 are compensated, together with the growth constants
under which the forward-operator construction is valid: a Lipschitz/growth
bound K for the jump amplitude p and an ellipticity floor alpha for
a = sigma sigma^T.

Coefficient callables are vectorized: they accept arrays of shape (..., d)
and return (..., d) for vector fields or (..., d, d) for matrix fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class CoefficientError(ValueError):
    """A coefficient returned a bad shape or a non-finite value."""


class MeasureError(ValueError):
    """The jump measure violates an integrability or support requirement."""


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape == () and d == 1:
        x = x.reshape(1)
    if x.shape[-1] != d:
        raise CoefficientError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def _diag_embed(v):
    """Embed vectors (..., d) as diagonal matrices (..., d, d)."""
    d = v.shape[-1]
    out = np.zeros(v.shape + (d,), dtype=float)
    idx = np.arange(d)
    out[..., idx, idx] = v
    return out


# ---------------------------------------------------------------------------
# coefficient builders


def zero_drift():
    return lambda x: np.zeros_like(np.asarray(x, dtype=float))


def ou_drift():
    """Linear restoring drift b(x) = -x."""
    return lambda x: -np.asarray(x, dtype=float)


def constant_drift(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))

    def b(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(c, x.shape).copy()

    return b


def linear_drift(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))

    def b(x):
        x = np.asarray(x, dtype=float)
        return x @ mat.T

    return b


def poly_drift(coeffs):
    """Scalar polynomial drift b(x) = sum_k coeffs[k] x^k, d = 1 only."""
    coeffs = [float(c) for c in coeffs]

    def b(x):
        x = np.asarray(x, dtype=float)
        return np.polynomial.polynomial.polyval(x[..., 0], coeffs)[..., None]

    return b


def identity_sigma(d):
    eye = np.eye(d)

    def sigma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d)).copy()

    return sigma


def constant_sigma(value, d=1):
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        value = value * np.eye(d)
    value = np.atleast_2d(value)

    def sigma(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(value, x.shape[:-1] + value.shape).copy()

    return sigma


def poly_sigma(coeffs):
    """Scalar polynomial diffusion sigma(x) = sum_k coeffs[k] x^k, d = 1 only."""
    coeffs = [float(c) for c in coeffs]

    def sigma(x):
        x = np.asarray(x, dtype=float)
        vals = np.polynomial.polynomial.polyval(x[..., 0], coeffs)
        return vals[..., None, None]

    return sigma


@dataclass(frozen=True)
class JumpMap:
    """Jump amplitude p(y, z) with an optional analytic Jacobian in y."""

    p: Callable
    dp_dy: Optional[Callable] = None


def jump_zero():
    def p(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        return np.zeros(np.broadcast_shapes(y.shape, z.shape), dtype=float)

    def dp(y, z):
        out = p(y, z)
        return np.zeros(out.shape + (out.shape[-1],), dtype=float)

    return JumpMap(p, dp)


def jump_additive():
    """State-independent jumps p(y, z) = z."""

    def p(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        return np.broadcast_to(z, np.broadcast_shapes(y.shape, z.shape)).copy()

    def dp(y, z):
        val = p(y, z)
        return np.zeros(val.shape + (val.shape[-1],), dtype=float)

    return JumpMap(p, dp)


def jump_geometric():
    """Multiplicative jumps p(y, z) = y * z, elementwise per axis."""

    def p(y, z):
        return np.asarray(y, dtype=float) * np.asarray(z, dtype=float)

    def dp(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        zb = np.broadcast_to(z, np.broadcast_shapes(y.shape, z.shape)).copy()
        return _diag_embed(zb)

    return JumpMap(p, dp)


def jump_sine():
    """Bounded-slope jumps p(y, z) = sin(y) * z, elementwise per axis."""

    def p(y, z):
        return np.sin(np.asarray(y, dtype=float)) * np.asarray(z, dtype=float)

    def dp(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        v = np.cos(y) * z
        v = np.broadcast_to(v, np.broadcast_shapes(y.shape, z.shape)).copy()
        return _diag_embed(v)

    return JumpMap(p, dp)


def jump_poly(coeffs):
    """Separable jumps p(y, z) = (sum_k coeffs[k] y^k) z, d = 1 only."""
    coeffs = [float(c) for c in coeffs]
    dcoeffs = [k * coeffs[k] for k in range(1, len(coeffs))] or [0.0]

    def p(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        f = np.polynomial.polynomial.polyval(y[..., 0], coeffs)[..., None]
        return f * z

    def dp(y, z):
        y, z = np.asarray(y, dtype=float), np.asarray(z, dtype=float)
        fp = np.polynomial.polynomial.polyval(y[..., 0], dcoeffs)[..., None]
        v = fp * z
        v = np.broadcast_to(v, np.broadcast_shapes(y.shape, z.shape)).copy()
        return _diag_embed(v)

    return JumpMap(p, dp)


# ---------------------------------------------------------------------------
# model container


@dataclass(frozen=True)
class SdeModel:
    """Immutable coefficient bundle for one jump-diffusion.

    Fields
    ------
    d : state dimension.
    b, sigma : drift and diffusion maps, (..., d) -> (..., d) / (..., d, d).
    a : diffusion matrix map, defaults to sigma sigma^T.
    p : jump amplitude map (y, z) -> (..., d).
    dp_dy : optional analytic Jacobian of p in y, (..., d, d); finite
        differences are used when absent.
    K : growth constant: |p(y,z)| <= K (1+|y|) |z| and |D_y p| <= K |z|.
    alpha : ellipticity floor for a.
    """

    d: int
    b: Callable
    sigma: Callable
    p: Callable
    dp_dy: Optional[Callable] = None
    a: Callable = None
    K: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise CoefficientError("dimension must be >= 1")
        if self.K <= 0:
            raise CoefficientError("K must be positive")
        if self.a is None:
            sig = self.sigma

            def a_from_sigma(x):
                s = sig(x)
                return s @ np.swapaxes(s, -1, -2)

            object.__setattr__(self, "a", a_from_sigma)


def build_model(d=1, drift="ou", sigma=1.0, jump="zero", K=1.0, alpha=None,
                drift_coeffs=None, sigma_coeffs=None, jump_coeffs=None):
    """Construct an SdeModel from named built-ins or polynomial tables."""
    if callable(drift):
        b = drift
    elif drift == "ou":
        b = ou_drift()
    elif drift == "zero":
        b = zero_drift()
    elif drift == "poly":
        b = poly_drift(drift_coeffs)
    elif drift == "constant":
        b = constant_drift(drift_coeffs)
    elif drift == "linear":
        b = linear_drift(drift_coeffs)
    else:
        raise CoefficientError(f"unknown drift kind {drift!r}")

    if callable(sigma):
        sig = sigma
        sigma_value = None
    elif sigma == "identity":
        sig = identity_sigma(d)
        sigma_value = 1.0
    elif sigma == "poly":
        sig = poly_sigma(sigma_coeffs)
        sigma_value = None
    else:
        sigma_value = float(sigma)
        sig = constant_sigma(sigma_value, d)

    if isinstance(jump, JumpMap):
        jm = jump
    elif jump in ("zero", "none"):
        jm = jump_zero()
    elif jump == "additive":
        jm = jump_additive()
    elif jump == "geometric":
        jm = jump_geometric()
    elif jump == "sine":
        jm = jump_sine()
    elif jump == "poly":
        jm = jump_poly(jump_coeffs)
    else:
        raise CoefficientError(f"unknown jump kind {jump!r}")

    if alpha is None:
        alpha = sigma_value ** 2 if sigma_value else 0.0
    return SdeModel(d=d, b=b, sigma=sig, p=jm.p, dp_dy=jm.dp_dy,
                    K=float(K), alpha=float(alpha))


def eval_coefficients(model, x):
    """Evaluate (b, sigma, a) at points x of shape (..., d).

    Raises CoefficientError when a coefficient returns a wrong shape or a
    non-finite value, naming the offending coefficient.
    """
    x = _as_points(x, model.d)
    out = []
    for name, fn, extra in (("b", model.b, ()), ("sigma", model.sigma, (model.d,)),
                            ("a", model.a, (model.d,))):
        val = np.asarray(fn(x), dtype=float)
        want = x.shape + extra
        if val.shape != want:
            raise CoefficientError(
                f"coefficient {name} returned shape {val.shape}, expected {want}")
        if not np.all(np.isfinite(val)):
            bad = np.argwhere(~np.isfinite(val))[0]
            raise CoefficientError(f"coefficient {name} is non-finite at index {bad}")
        out.append(val)
    return tuple(out)


# ---------------------------------------------------------------------------
# Levy measure


@dataclass(frozen=True)
class RadialDensity:
    """Radial power density c |z|^(-d-beta) on 0 < |z| <= z_max.

    In d = 1 the support side is 'two', 'positive' or 'negative'.  beta may
    be given >= 2 to describe an inadmissible measure; integrability is
    enforced where moments are actually used.
    """

    c: float
    beta: float
    z_max: float = 1.0
    side: str = "two"

    def __post_init__(self):
        if self.c <= 0:
            raise MeasureError("density constant c must be positive")
        if self.beta <= 0:
            raise MeasureError("density exponent beta must be positive")
        if not self.z_max > 0:
            raise MeasureError("z_max must be positive")
        if self.side not in ("two", "positive", "negative"):
            raise MeasureError(f"unknown side {self.side!r}")


@dataclass(frozen=True)
class LevyMeasure:
    """Jump measure: finitely many atoms plus an optional radial density.

    atoms : sequence of (location, mass) with location of shape (d,) and
        mass > 0; no atom may sit at the origin.
    density : optional RadialDensity.
    s : small-jump moment order in [1, 2) used for the near-origin bound
        int_{|z|<1} |z|^s nu(dz) < infinity.
    """

    d: int = 1
    atoms: tuple = ()
    density: Optional[RadialDensity] = None
    s: float = 1.0

    def __post_init__(self):
        norm_atoms = []
        for loc, w in self.atoms:
            loc = np.atleast_1d(np.asarray(loc, dtype=float))
            if loc.shape != (self.d,):
                raise MeasureError(f"atom location shape {loc.shape} != ({self.d},)")
            if not np.linalg.norm(loc) > 0:
                raise MeasureError("atom at the origin is not allowed")
            if not w > 0:
                raise MeasureError("atom mass must be positive")
            norm_atoms.append((loc, float(w)))
        object.__setattr__(self, "atoms", tuple(norm_atoms))
        if not 1.0 <= self.s < 2.0:
            raise MeasureError("s must lie in [1, 2)")

    def check_h3(self):
        """Raise unless int (1 ^ |z|^2) nu(dz) is finite."""
        if self.density is not None:
            if self.density.beta >= 2:
                raise MeasureError(
                    "density exponent beta >= 2: the small-jump second moment "
                    "int_{|z|<1} |z|^2 nu(dz) diverges, violating (H3)")

    def check_he2(self):
        """Raise unless int_{|z|<1} |z|^s nu(dz) is finite."""
        self.check_h3()
        if self.density is not None and self.s <= self.density.beta:
            raise MeasureError(
                f"s = {self.s} <= beta = {self.density.beta}: the |z|^s "
                "small-jump moment diverges")

    def atom_arrays(self):
        if not self.atoms:
            return np.zeros((0, self.d)), np.zeros(0)
        locs = np.array([loc for loc, _ in self.atoms], dtype=float)
        ws = np.array([w for _, w in self.atoms], dtype=float)
        return locs, ws


# ---------------------------------------------------------------------------
# validation


@dataclass
class InvariantCheck:
    name: str
    passed: bool
    worst: float
    witness: str
    message: str = ""


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)
    n_samples: int = 0
    seed: int = 0

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_rows(self):
        header = ("invariant", "passed", "worst", "witness", "message")
        rows = [(e.name, e.passed, e.worst, e.witness, e.message)
                for e in self.entries]
        return header, rows


def _sample_ball(rng, n, d, radius):
    if d == 1:
        return rng.uniform(-radius, radius, size=(n, 1))
    v = rng.normal(size=(n, d))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    u = rng.uniform(size=(n, 1)) ** (1.0 / d)
    return radius * u * v


def fd_jacobian(p, y, z):
    """Central finite-difference Jacobian of p(., z) at y, batched.

    Step per axis: max(1e-6, 1e-8 (1 + |y|)).
    """
    y = np.asarray(y, dtype=float)
    d = y.shape[-1]
    steps = np.maximum(1e-6, 1e-8 * (1.0 + np.linalg.norm(y, axis=-1)))
    jac = np.empty(y.shape + (d,), dtype=float)
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        hj = steps[..., None] * e
        jac[..., :, j] = (p(y + hj, z) - p(y - hj, z)) / (2.0 * steps[..., None])
    return jac


def model_jacobian(model, y, z):
    """Jacobian of p in y: analytic when the model provides one, else FD."""
    if model.dp_dy is not None:
        return np.asarray(model.dp_dy(y, z), dtype=float)
    return fd_jacobian(model.p, y, z)


def validate_model(model, measure, n_samples=2000, seed=0, r_sample=10.0):
    """Sampled check of the standing assumptions on (model, measure).

    Draws n_samples points with |x| <= r_sample and |z| <= 1 and verifies
    the growth bound on p, the Jacobian bound on D_y p, ellipticity and
    symmetry of a, and the integrability requirements on the measure.
    Failures to evaluate a coefficient become failed entries, not raised
    exceptions.  Deterministic for fixed seed.
    """
    rng = np.random.default_rng(seed)
    x = _sample_ball(rng, n_samples, model.d, r_sample)
    z = _sample_ball(rng, n_samples, model.d, 1.0)
    report = ValidationReport(n_samples=n_samples, seed=seed)

    def witness(i):
        return f"x={x[i].tolist()} z={z[i].tolist()}"

    def add(name, fn):
        try:
            passed, worst, wit, msg = fn()
        except Exception as exc:  # evaluation failure becomes an entry
            report.entries.append(InvariantCheck(name, False, float("nan"),
                                                 "", f"evaluation error: {exc}"))
            return
        report.entries.append(InvariantCheck(name, passed, worst, wit, msg))

    def p_growth():
        pv = np.asarray(model.p(x, z), dtype=float)
        if not np.all(np.isfinite(pv)):
            raise CoefficientError("p returned non-finite values")
        nz = np.linalg.norm(z, axis=1)
        bound = model.K * (1.0 + np.linalg.norm(x, axis=1)) * nz
        mask = nz > 0
        ratio = np.zeros(n_samples)
        ratio[mask] = np.linalg.norm(pv, axis=1)[mask] / bound[mask]
        i = int(np.argmax(ratio))
        return bool(ratio[i] <= 1.0 + 1e-12), float(ratio[i]), witness(i), \
            "|p(x,z)| <= K (1+|x|) |z|"

    def dp_norm():
        jac = model_jacobian(model, x, z)
        sv = np.linalg.svd(jac, compute_uv=False)[..., 0]
        nz = np.linalg.norm(z, axis=1)
        mask = nz > 0
        ratio = np.zeros(n_samples)
        ratio[mask] = sv[mask] / (model.K * nz[mask])
        # FD Jacobians carry O(step) noise; allow a hair above 1
        i = int(np.argmax(ratio))
        return bool(ratio[i] <= 1.0 + 1e-6), float(ratio[i]), witness(i), \
            "||D_y p(x,z)||_2 <= K |z|"

    def ellipticity():
        _, _, a = eval_coefficients(model, x)
        ev = np.linalg.eigvalsh(a).min(axis=-1)
        i = int(np.argmin(ev))
        ok = bool(ev[i] >= model.alpha - 1e-10 * max(1.0, model.alpha))
        return ok, float(ev[i]), witness(i), "min eig a(x) >= alpha"

    def a_symmetry():
        _, _, a = eval_coefficients(model, x)
        dev = np.abs(a - np.swapaxes(a, -1, -2)).max(axis=(-2, -1))
        i = int(np.argmax(dev))
        scale = max(1.0, float(np.abs(a).max()))
        return bool(dev[i] <= 1e-12 * scale), float(dev[i]), witness(i), \
            "a(x) = a(x)^T"

    def levy_h3():
        measure.check_h3()
        return True, 0.0, "", "int (1 ^ |z|^2) nu(dz) < inf"

    def no_origin_atom():
        locs, _ = measure.atom_arrays()
        if len(locs) == 0:
            return True, 0.0, "", "no atoms"
        dist = np.linalg.norm(locs, axis=1)
        i = int(np.argmin(dist))
        return bool(dist[i] > 0), float(dist[i]), f"z={locs[i].tolist()}", \
            "nu({0}) = 0"

    def levy_he2():
        measure.check_he2()
        return True, 0.0, "", f"int_{{|z|<1}} |z|^{measure.s} nu(dz) < inf"

    add("p_growth", p_growth)
    add("dp_dy_norm", dp_norm)
    add("ellipticity", ellipticity)
    add("a_symmetry", a_symmetry)
    add("levy_h3", levy_h3)
    add("levy_no_origin_atom", no_origin_atom)
    add("levy_he2_moment", levy_he2)
    return report


# ---------------------------------------------------------------------------
# config -> objects (used by the command-line driver)


def model_from_config(cfg):
    """Build an SdeModel from a parsed [model] table."""
    d = int(cfg.get("d", 1))
    drift = cfg.get("drift", {"kind": "ou"})
    sigma = cfg.get("sigma", {"kind": "constant", "value": 1.0})
    jump = cfg.get("jump", {"kind": "zero"})

    dkind = drift.get("kind", "ou")
    skind = sigma.get("kind", "constant")
    jkind = jump.get("kind", "zero")

    kwargs = dict(d=d, K=float(cfg.get("K", 1.0)))
    if "alpha" in cfg:
        kwargs["alpha"] = float(cfg["alpha"])

    if dkind == "poly":
        kwargs.update(drift="poly", drift_coeffs=drift["coeffs"])
    elif dkind == "constant":
        kwargs.update(drift="constant", drift_coeffs=drift["value"])
    elif dkind == "linear":
        kwargs.update(drift="linear", drift_coeffs=drift["matrix"])
    else:
        kwargs.update(drift=dkind)

    if skind == "poly":
        kwargs.update(sigma="poly", sigma_coeffs=sigma["coeffs"])
    elif skind == "identity":
        kwargs.update(sigma="identity")
    else:
        kwargs.update(sigma=float(sigma.get("value", 1.0)))

    if jkind == "poly":
        kwargs.update(jump="poly", jump_coeffs=jump["coeffs"])
    else:
        kwargs.update(jump=jkind)
    return build_model(**kwargs)


def measure_from_config(cfg, d=1):
    """Build a LevyMeasure from a parsed [measure] table."""
    atoms = [(np.atleast_1d(np.asarray(loc, dtype=float)), float(w))
             for loc, w in cfg.get("atoms", [])]
    density = None
    if "density" in cfg:
        dc = cfg["density"]
        density = RadialDensity(c=float(dc["c"]), beta=float(dc["beta"]),
                                z_max=float(dc.get("z_max", 1.0)),
                                side=dc.get("side", "two"))
    return LevyMeasure(d=d, atoms=tuple(atoms), density=density,
                       s=float(cfg.get("s", 1.0)))
