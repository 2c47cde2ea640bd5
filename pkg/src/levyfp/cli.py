"""Command-line driver: staged pipeline from a TOML config to CSV reports.

Stages, in dependency order:

  validate     sampled standing-assumption checks on (model, measure)
  lemmas       inverse-flow bound suite at the working radius r
  assemble     operator assembly plus structural certificates
  certify      dissipativity margin sweeps and the duality-set pairing
  evolve       implicit Euler run logging contraction, mass and positivity
  mc_compare   jump-adapted Euler Monte Carlo against the terminal density

Requesting a stage pulls in what it needs: certify and evolve require
assemble, mc_compare requires evolve.  Each executed stage writes one CSV
into the output directory and contributes rows to summary.csv.  All output
is deterministic for a fixed config file, so two runs produce byte-identical
reports.

Exit status: 0 when every check passed, 1 when a stage ran and failed, 2
when the config is invalid (unknown keys, missing tables, inadmissible
radius, unsafe initial condition).
"""

import argparse
import csv
import hashlib
import os
import re
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 fallback, same API
    import tomli as tomllib

from .inverse_flow import admissible_radius, lemma_suite
from .mc_oracle import McConfig, gaussian_x0, kde_density, l1_distance, simulate
from .model import measure_from_config, model_from_config, validate_model
from .operators import (
    Grid,
    SparseOperator,
    _eval_jump,
    assemble_Ar,
    assemble_Ar_star,
    assemble_Ir,
    assemble_Ir_star,
    assemble_Jr,
    assemble_Jr_star,
    duality_gap,
    dump_density,
)
from .quadrature import split_measure
from .semigroup import (
    dissipativity_check,
    duality_set_pairing,
    evolve,
    gaussian_density,
    random_bumps,
)


class ConfigError(Exception):
    """Invalid configuration; carries an optional source line anchor."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


_STAGE_ORDER = ("validate", "lemmas", "assemble", "certify", "evolve",
                "mc_compare")
_STAGE_NEEDS = {
    "certify": ("assemble",),
    "evolve": ("assemble",),
    "mc_compare": ("assemble", "evolve"),
}

# Declared key sets; anything outside these is rejected with a line number.
_SCHEMA = {
    "schema": None,
    "seed": None,
    "run": None,
    "model": {
        "d": None, "K": None, "alpha": None,
        "drift": {"kind": None, "value": None, "matrix": None, "coeffs": None},
        "sigma": {"kind": None, "value": None, "coeffs": None},
        "jump": {"kind": None, "coeffs": None},
    },
    "measure": {
        "atoms": None, "s": None,
        "density": {"c": None, "beta": None, "z_max": None, "side": None},
    },
    "grid": {"x_max": None, "h": None},
    "split": {"r": None, "n_inner": None, "tol": None},
    "evolution": {"T": None, "dt": None, "u0_center": None, "u0_sigma": None,
                  "solver_tol": None},
    "mc": {"n_paths": None, "n_steps": None, "epsilon": None,
           "antithetic": None, "seed": None, "tol": None},
    "certify": {"lambdas": None, "n_functions": None, "c_tol": None},
}


def _find_line(raw, key):
    """First line declaring key, as 'key =', 'key.sub =' or inside [a.key]."""
    pat = re.compile(r"^\s*(?:\[[^\]]*\b%s\b[^\]]*\]|%s\s*[=.])"
                     % (re.escape(key), re.escape(key)))
    for i, text in enumerate(raw.splitlines(), start=1):
        if pat.match(text):
            return i
    return None


def _check_keys(table, schema, raw, section=""):
    for key, value in table.items():
        if key not in schema:
            where = f" in [{section}]" if section else " at top level"
            raise ConfigError(f"unknown key '{key}'{where}",
                              _find_line(raw, key))
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table",
                                  _find_line(raw, key))
            deeper = key if not section else f"{section}.{key}"
            _check_keys(value, sub, raw, deeper)


def _resolve_stages(requested, raw):
    for name in requested:
        if name not in _STAGE_ORDER:
            raise ConfigError(
                f"unknown stage '{name}' (choose from {', '.join(_STAGE_ORDER)})",
                _find_line(raw, "run"))
    wanted = set(requested)
    changed = True
    while changed:
        changed = False
        for name in tuple(wanted):
            for dep in _STAGE_NEEDS.get(name, ()):
                if dep not in wanted:
                    wanted.add(dep)
                    changed = True
    return [s for s in _STAGE_ORDER if s in wanted]


def derive_seed(root_seed, label):
    """Stable per-stage seed: hash of the root seed and a stage label.

    Keeps stage randomness independent of which other stages run, so a
    partial rerun reproduces the full run's numbers exactly.
    """
    digest = hashlib.sha256(f"{int(root_seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _fmt(value):
    # bool before int: bool is an int subclass
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


class Pipeline:
    """Holds the objects shared between stages and collects summary rows."""

    def __init__(self, cfg, raw, outdir):
        self.cfg = cfg
        self.raw = raw
        self.outdir = outdir
        self.root_seed = int(cfg.get("seed", 0))
        self.summary = []

        self.model = model_from_config(cfg.get("model", {}))
        self.measure = measure_from_config(cfg.get("measure", {}),
                                           d=self.model.d)
        self.r = self._radius()

        # products of later stages
        self.grid = None
        self.quad = None
        self.parts = None
        self.full = None
        self.full_star = None
        self.final = None
        self.evolution_cfg = None

    def _radius(self):
        split = self.cfg.get("split", {})
        r0 = admissible_radius(self.model.d, self.model.K)
        r = split.get("r", "auto")
        if r == "auto":
            return r0 / 2.0
        try:
            r = float(r)
        except (TypeError, ValueError):
            raise ConfigError("split.r must be a number or 'auto'",
                              _find_line(self.raw, "r")) from None
        if r <= 0:
            raise ConfigError("split.r must be positive",
                              _find_line(self.raw, "r"))
        if r > r0 * (1.0 + 1e-12):
            raise ConfigError(
                f"split.r = {r} exceeds the admissible radius "
                f"r0 = 1/(8 d K) = {r0}", _find_line(self.raw, "r"))
        return r

    def _require(self, table, key, stage):
        cfg = self.cfg.get(table)
        if cfg is None:
            raise ConfigError(f"stage '{stage}' needs a [{table}] table",
                              _find_line(self.raw, "run"))
        if key not in cfg:
            raise ConfigError(f"[{table}] is missing '{key}'",
                              _find_line(self.raw, table))
        return cfg[key]

    def _out(self, name):
        return os.path.join(self.outdir, name)

    # -- stages -----------------------------------------------------------

    def stage_validate(self):
        report = validate_model(self.model, self.measure,
                                seed=derive_seed(self.root_seed, "validate"))
        header, rows = report.to_rows()
        _write_csv(self._out("validate.csv"), header, rows)
        return [("validate", e.name, e.passed,
                 f"worst={_fmt(e.worst)}") for e in report.entries]

    def stage_lemmas(self):
        report = lemma_suite(self.model, self.r,
                             seed=derive_seed(self.root_seed, "lemmas"))
        header, rows = report.to_rows()
        _write_csv(self._out("lemmas.csv"), header, rows)
        return [("lemmas", c.lemma_id, c.passed,
                 f"worst_ratio={_fmt(c.worst_ratio)}") for c in report.checks]

    def stage_assemble(self):
        x_max = float(self._require("grid", "x_max", "assemble"))
        h = float(self._require("grid", "h", "assemble"))
        try:
            self.grid = Grid.regular(self.model.d, x_max, h)
        except ValueError as exc:
            raise ConfigError(str(exc), _find_line(self.raw, "h")) from None

        split = self.cfg.get("split", {})
        self.quad = split_measure(self.measure, self.r,
                                  n_inner=int(split.get("n_inner", 30)),
                                  tol=float(split.get("tol", 1e-8)))

        ar = assemble_Ar(self.model, self.grid, self.r, self.quad)
        ir = assemble_Ir(self.model, self.grid, self.r, self.quad)
        jr_star = assemble_Jr_star(self.model, self.grid, self.r, self.quad)
        jr = assemble_Jr(jr_star)
        ar_star = assemble_Ar_star(self.model, self.grid, self.r, self.quad)
        ir_star = assemble_Ir_star(self.model, self.grid, self.r, self.quad)
        full = SparseOperator(
            (ar.matrix + ir.matrix + jr.matrix).tocsr(),
            self.grid, "L", self.r)
        full_star = SparseOperator(
            (ar_star.matrix + ir_star.matrix + jr_star.matrix).tocsr(),
            self.grid, "L*", self.r)
        self.parts = {"A_r": (ar, ar_star), "I_r": (ir, ir_star),
                      "J_r": (jr, jr_star)}
        self.full = full
        self.full_star = full_star

        u, f = random_bumps(self.grid, 2,
                            derive_seed(self.root_seed, "assemble"))
        rows = []
        gaps = {}
        for name, (op, op_star) in list(self.parts.items()) + \
                [("L", (full, full_star))]:
            gap = duality_gap(op, op_star, u, f)
            gaps[name] = gap
            rows.append((name, op.matrix.nnz, op.induced_l1_norm(),
                         op.induced_linf_norm(), gap))
        _write_csv(self._out("assemble.csv"),
                   ("part", "nnz", "induced_l1_norm", "induced_linf_norm",
                    "duality_gap"), rows)

        items = []
        jr_norm = jr.induced_l1_norm()
        bound = 2.0 * self.quad.outer_mass
        items.append(("assemble", "jr_l1_bound",
                      jr_norm <= bound + 1e-10,
                      f"norm={_fmt(jr_norm)} bound={_fmt(bound)}"))

        # J_r is the exact transpose of J_r*, so its gap sits at roundoff
        scale = (1.0 + jr_norm) * u.norm_l1 * f.norm_linf
        items.append(("assemble", "jr_duality_gap",
                      gaps["J_r"] <= 1e-10 * scale,
                      f"gap={_fmt(gaps['J_r'])}"))

        # mass conservation on an interior bump kept clear of the boundary
        reach = self._jump_reach()
        sigma = (x_max - reach - 2.0 * h) / 8.0
        sigma = min(x_max / 8.0, max(sigma, 2.0 * h))
        bump = gaussian_density(self.grid, np.zeros(self.model.d), sigma)
        rate = self.grid.cell_volume * float(np.sum(full.apply(bump.values)))
        items.append(("assemble", "mass_conservation",
                      abs(rate) <= 1e-8 * bump.norm_l1,
                      f"rate={_fmt(rate)} sigma={_fmt(sigma)}"))
        return items

    def _jump_reach(self):
        """max |p(x, z)| over grid nodes and retained large-jump nodes."""
        points = self.grid.points()
        reach = 0.0
        for z in self.quad.outer_nodes:
            disp = _eval_jump(self.model, points, z)
            reach = max(reach, float(np.max(np.linalg.norm(disp, axis=1))))
        return reach

    def stage_certify(self):
        cert = self.cfg.get("certify", {})
        lambdas = [float(v) for v in cert.get("lambdas", [0.5, 1.0, 2.0])]
        n_functions = int(cert.get("n_functions", 100))
        c_tol = float(cert.get("c_tol", 10.0))
        seed = derive_seed(self.root_seed, "certify")

        ar, _ = self.parts["A_r"]
        ir, _ = self.parts["I_r"]
        jr, _ = self.parts["J_r"]
        local = SparseOperator((ar.matrix + ir.matrix).tocsr(), self.grid,
                               "A_r+I_r", self.r)

        rows = []
        items = []
        for rep in dissipativity_check(local, lambdas, n_functions, seed,
                                       c_tol=c_tol):
            rows.append(("margin", "A_r+I_r", rep.lam, n_functions,
                         rep.min_margin, rep.threshold, rep.passed))
            items.append(("certify", f"local_margin_lambda_{_fmt(rep.lam)}",
                          rep.passed, f"min_margin={_fmt(rep.min_margin)}"))
        # pure jump part: no O(h) discretization slack is owed, margins must
        # clear a roundoff floor
        jr_c_tol = 1e-10 / self.grid.h
        for rep in dissipativity_check(jr, lambdas, n_functions, seed,
                                       c_tol=jr_c_tol):
            rows.append(("margin", "J_r", rep.lam, n_functions,
                         rep.min_margin, rep.threshold, rep.passed))
            items.append(("certify", f"jump_margin_lambda_{_fmt(rep.lam)}",
                          rep.passed, f"min_margin={_fmt(rep.min_margin)}"))

        pairings = [duality_set_pairing(jr, u) for u in
                    random_bumps(self.grid, n_functions,
                                 derive_seed(self.root_seed, "pairing"))]
        worst = max(pairings)
        ok = worst <= 1e-10
        rows.append(("pairing", "J_r", "", n_functions, worst, 1e-10, ok))
        items.append(("certify", "jump_duality_pairing", ok,
                      f"max_pairing={_fmt(worst)}"))
        _write_csv(self._out("certify.csv"),
                   ("check", "operator", "lambda", "n_functions", "value",
                    "threshold", "pass"), rows)
        return items

    def stage_evolve(self):
        T = float(self._require("evolution", "T", "evolve"))
        dt = float(self._require("evolution", "dt", "evolve"))
        evo = self.cfg["evolution"]
        center = np.broadcast_to(
            np.asarray(evo.get("u0_center", 0.0), dtype=float),
            (self.model.d,))
        sigma = float(evo.get("u0_sigma", 8.0 * self.grid.h))
        tol = float(evo.get("solver_tol", 1e-10))

        n_steps = T / dt
        if abs(n_steps - round(n_steps)) > 1e-9:
            raise ConfigError("evolution.dt must divide evolution.T",
                              _find_line(self.raw, "dt"))

        # the initial bump plus every retained jump must stay inside the
        # grid, with two cells to spare
        reach = self._jump_reach()
        margin = reach + 2.0 * self.grid.h
        room = float(self.grid.x_max - np.max(np.abs(center)) - 8.0 * sigma)
        if room < margin:
            raise ConfigError(
                f"u0 support needs {margin:.6g} of boundary clearance but "
                f"has {room:.6g}; shrink u0_sigma or enlarge the grid",
                _find_line(self.raw, "u0_center"))

        u0 = gaussian_density(self.grid, center, sigma)
        report = evolve(self.full, u0, T, dt, tol=tol, support_margin=margin)
        header, rows = report.to_rows()
        _write_csv(self._out("evolution.csv"), header, rows)
        dump_density(self.grid, report.final.values,
                     self._out("final_density.txt"))
        self.final = report.final
        self.evolution_cfg = {"T": T, "center": center, "sigma": sigma}

        norms = np.asarray(report.l1_norms)
        ratios = norms[1:] / np.maximum(norms[:-1], 1e-300)
        worst_ratio = float(np.max(ratios)) if len(ratios) else 1.0
        masses = np.asarray(report.masses)
        drift = float(np.max(np.abs(masses - masses[0])))
        low = float(np.min(report.min_values))
        peak = float(np.max(np.abs(report.final.values)))
        return [
            ("evolve", "contraction", worst_ratio <= 1.0 + 1e-8,
             f"worst_step_ratio={_fmt(worst_ratio)}"),
            ("evolve", "mass", drift <= 1e-6, f"max_drift={_fmt(drift)}"),
            ("evolve", "positivity", low >= -1e-10 * max(peak, 1.0),
             f"min_value={_fmt(low)}"),
        ]

    def stage_mc_compare(self):
        n_paths = int(self._require("mc", "n_paths", "mc_compare"))
        n_steps = int(self._require("mc", "n_steps", "mc_compare"))
        mc = self.cfg["mc"]
        eps = float(mc.get("epsilon", self.r))
        antithetic = bool(mc.get("antithetic", False))
        seed = int(mc.get("seed", derive_seed(self.root_seed, "mc")))
        tol = float(mc.get("tol", 0.1))

        evo = self.evolution_cfg
        cfg = McConfig(n_paths=n_paths, n_steps=n_steps, T=evo["T"],
                       jump_cutoff=eps, seed=seed, antithetic=antithetic)
        x0 = gaussian_x0(evo["center"], evo["sigma"], d=self.model.d)
        samples = simulate(self.model, self.measure, x0, cfg)
        density = kde_density(samples, self.grid)
        dist = l1_distance(density, self.final)
        dump_density(self.grid, density.values, self._out("mc_density.txt"))

        ok = dist <= tol
        _write_csv(self._out("mc_compare.csv"),
                   ("n_paths", "n_steps", "epsilon", "antithetic",
                    "n_flagged", "dropped_moment2", "l1_distance",
                    "tolerance", "pass"),
                   [(n_paths, n_steps, eps, antithetic, samples.n_flagged,
                     samples.dropped_moment2, dist, tol, ok)])
        return [("mc_compare", "l1_agreement", ok,
                 f"l1={_fmt(dist)} tol={_fmt(tol)}")]

    # -- driver -----------------------------------------------------------

    def run(self, stages):
        status = 0
        for name in stages:
            try:
                items = getattr(self, "stage_" + name)()
            except ConfigError:
                self._write_summary()
                raise
            except Exception as exc:  # report the stage, keep the summary
                self.summary.append((name, "error", False,
                                     f"{type(exc).__name__}: {exc}"))
                self._write_summary()
                return 1
            self.summary.extend(items)
            if any(not item[2] for item in items):
                status = 1
        self._write_summary()
        return status

    def _write_summary(self):
        _write_csv(self._out("summary.csv"),
                   ("stage", "item", "passed", "detail"), self.summary)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="levyfp",
        description="Forward operator assembly, certification and evolution "
                    "for Levy-driven SDEs.")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute pipeline stages from a TOML "
                                      "config")
    runp.add_argument("config", help="path to the TOML config file")
    runp.add_argument("--out", default=None,
                      help="output directory (default: <config stem>_out)")
    runp.add_argument("--stage", action="append", metavar="NAME",
                      help="run only this stage, repeatable; dependencies "
                           "are added automatically")
    args = parser.parse_args(argv)

    config_path = args.config
    try:
        with open(config_path, "rb") as fh:
            raw = fh.read().decode("utf-8")
    except OSError as exc:
        print(f"error: cannot read {config_path}: {exc}", file=sys.stderr)
        return 2
    try:
        cfg = tomllib.loads(raw)
    except tomllib.TOMLDecodeError as exc:
        print(f"{config_path}: {exc}", file=sys.stderr)
        return 2

    outdir = args.out
    if outdir is None:
        stem = os.path.splitext(os.path.basename(config_path))[0]
        outdir = os.path.join(os.path.dirname(config_path) or ".",
                              stem + "_out")

    try:
        _check_keys(cfg, _SCHEMA, raw)
        if cfg.get("schema") != 1:
            raise ConfigError("config must declare schema = 1",
                              _find_line(raw, "schema") or 1)
        requested = args.stage if args.stage else cfg.get("run")
        if not requested:
            raise ConfigError("no stages requested: set run = [...] or pass "
                              "--stage", _find_line(raw, "run"))
        stages = _resolve_stages(list(requested), raw)
        os.makedirs(outdir, exist_ok=True)
        pipeline = Pipeline(cfg, raw, outdir)
        status = pipeline.run(stages)
    except ConfigError as exc:
        anchor = f"{config_path}:{exc.line}" if exc.line else config_path
        print(f"{anchor}: {exc}", file=sys.stderr)
        return 2

    for stage, item, passed, detail in pipeline.summary:
        mark = "pass" if passed else "FAIL"
        print(f"[{mark}] {stage}/{item}  {detail}")
    n_fail = sum(1 for row in pipeline.summary if not row[2])
    if status == 0:
        print(f"all {len(pipeline.summary)} checks passed; reports in "
              f"{outdir}")
    else:
        print(f"{n_fail} of {len(pipeline.summary)} checks failed; reports "
              f"in {outdir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
