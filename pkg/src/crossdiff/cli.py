"""Command line entry point.

    crossdiff run --case reduced_s7 --levels 2..5 [--config FILE] [--out DIR]
    crossdiff validate-mesh FILE
    crossdiff estimate --trajectory DIR [--config FILE] [--out DIR]

Config files are INI style with the sections ``[model]``, ``[constants]``,
``[time]`` and ``[output]``. Every field of :class:`ConstantsLedger` may
appear in ``[constants]``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

from .bench import (CASES, ConfigError, StudyConfig, load_trajectory, manufactured_case, run_convergence_study,
                    study_ledger, true_error)
from .estimators import ConstantsLedger, EvalGeometry, estimate
from .mesh import MeshError, load_mesh, validate_admissibility
from .reconstruct import reconstruct_trajectory

log = logging.getLogger("crossdiff")

_LEDGER_FIELDS = {f.name: f.type for f in dataclasses.fields(ConstantsLedger)}


def parse_levels(text: str) -> tuple[int, int]:
    """``"2..5"`` or ``"3"``."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must look like A..B, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"invalid level range {text!r}")
    return lo, hi


def _ledger_value(key: str, raw: str):
    if key not in _LEDGER_FIELDS:
        raise ConfigError(f"[constants] has unknown key {key!r}")
    if key == "eta2_terms":
        return raw.strip()
    if raw.strip().lower() in ("none", "default", ""):
        if key in ("C_F", "C_F_neumann"):
            return None
        raise ConfigError(f"[constants] {key} needs a value")
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"[constants] {key} = {raw!r} is not a number") from None
    return int(v) if key in ("N_boundary", "d") else v


def read_config(path, cfg: StudyConfig | None = None) -> StudyConfig:
    """Apply an INI file on top of ``cfg`` (defaults when None)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keep the case of constant names
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    cfg = cfg or StudyConfig()
    known = {"model", "constants", "time", "output"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    try:
        if cp.has_section("model"):
            m = cp["model"]
            cfg.case = m.get("case", cfg.case)
            if "gamma" in m:
                cfg.gamma = m.getfloat("gamma")
            if "psi_amplitude" in m:
                cfg.psi_amplitude = m.getfloat("psi_amplitude")
            cfg.initial_projection = m.get("initial_projection", cfg.initial_projection)
            if "levels" in m:
                cfg.levels = parse_levels(m["levels"])
        if cp.has_section("constants"):
            cfg.ledger = dict(cfg.ledger)
            for k, v in cp["constants"].items():
                cfg.ledger[k] = _ledger_value(k, v)
        if cp.has_section("time"):
            t = cp["time"]
            cfg.T = t.getfloat("T", cfg.T)
            if "steps_per_unit" in t:
                cfg.steps_per_unit = t.getint("steps_per_unit")
            cfg.newton_tol = t.getfloat("newton_tol", cfg.newton_tol)
        if cp.has_section("output"):
            o = cp["output"]
            cfg.out = o.get("out", cfg.out)
            cfg.save_trajectories = o.getboolean("save_trajectories", cfg.save_trajectories)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def cmd_run(args) -> int:
    cfg = read_config(args.config) if args.config else StudyConfig()
    if args.case:
        cfg.case = args.case
    if args.levels:
        cfg.levels = args.levels
    if args.out:
        cfg.out = args.out
    if args.save_trajectories:
        cfg.save_trajectories = True
    cfg.validate()
    report = run_convergence_study(cfg)
    print(report.markdown(), end="")
    if cfg.out:
        print(f"wrote {Path(cfg.out) / (cfg.case + '.csv')}")
    return 0


def cmd_validate_mesh(args) -> int:
    try:
        mesh = load_mesh(Path(args.file).read_text())
    except (OSError, MeshError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 2
    problems = validate_admissibility(mesh, orth_tol=args.orth_tol)
    print(f"{args.file}: {mesh.n_vertices} vertices, {mesh.n_cells} cells, {mesh.n_edges} edges, h = {mesh.h:.4g}")
    for v in problems:
        print(f"  {v}")
    print("admissible" if not problems else f"{len(problems)} violation(s)")
    return 0 if not problems else 1


def cmd_estimate(args) -> int:
    traj, meta = load_trajectory(args.trajectory)
    cfg = read_config(args.config) if args.config else StudyConfig()
    case = None
    if meta.get("case") in CASES:
        case = manufactured_case(meta["case"], T=float(traj.times[-1]), gamma=cfg.gamma,
                                 psi_amplitude=cfg.psi_amplitude, validate=False)
        ledger = study_ledger(case, cfg.ledger)
    else:
        ledger = ConstantsLedger(**cfg.ledger)
    rec = reconstruct_trajectory(traj)
    geo = EvalGeometry(traj.mesh)
    hooks = []
    acc = None
    if case is not None:
        from .bench import TrueErrorAccumulator

        acc = TrueErrorAccumulator(case, geo)
        hooks.append(acc)
    rep = estimate(rec, ledger, initial=case.initial_fields if case else None, hooks=hooks, geo=geo)
    print(f"trajectory {args.trajectory}: model {rep.model}, {traj.J} steps, {traj.mesh.n_cells} cells")
    for k, lv in rep.log_totals.items():
        print(f"  {k:10s} {_fmt(lv)}")
    if acc is not None:
        for k, e in enumerate(acc.energy):
            print(f"  err_{k:<6d} {e:.4g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = rep.step_table()
        with open(out / "steps.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        with open(out / "totals.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "value", "log10"])
            for k, lv in rep.log_totals.items():
                w.writerow([k, repr(rep.totals[k]), repr(lv / math.log(10.0))])
        print(f"wrote {out / 'steps.csv'} and {out / 'totals.csv'}")
    return 0


def _fmt(log_value: float) -> str:
    l10 = log_value / math.log(10.0)
    if abs(l10) < 300:
        return f"{math.exp(log_value):.4g}"
    e = math.floor(l10)
    return f"{10 ** (l10 - e):.3f}e+{e}"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crossdiff", description="Finite volume solver and a posteriori estimators "
                                 "for volume-filling cross-diffusion ion transport")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="convergence study on a manufactured benchmark")
    r.add_argument("--case", choices=CASES)
    r.add_argument("--levels", type=parse_levels, help="refinement levels A..B (h = tau = 2^(-i-1))")
    r.add_argument("--config", help="INI file with [model], [constants], [time], [output]")
    r.add_argument("--out", help="directory for CSV and markdown output")
    r.add_argument("--save-trajectories", action="store_true", help="store every level's trajectory under --out")
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("validate-mesh", help="check a mesh file for admissibility")
    m.add_argument("file")
    m.add_argument("--orth-tol", type=float, default=1e-10)
    m.set_defaults(func=cmd_validate_mesh)

    e = sub.add_parser("estimate", help="re-run the estimators on a stored trajectory")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
