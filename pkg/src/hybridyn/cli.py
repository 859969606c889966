"""Command-line front end.

Exit codes: 0 success, 2 verdict or identity mismatch, 3 configuration or
usage error, 4 numerical failure.  Every failure ends with the line
``ERROR <code> <guard>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import snapshot
from .dynamics import (RESIDUAL_TOL, build_candidate, decoherence_report, earliest_separation,
                       evolve_grid, evolve_points, hamilton_trajectory, initial_grid_state,
                       initial_points_state, phase_ode, residual_norm, _steps)
from .errors import ConfigError, HybridynError, SeparationFailure
from .hybrid import (NEGATIVE_EIG_TOL, Undefined, assemble, hermiticity_residual, hybrid_trace,
                     idempotency_residual, linear_entropy, min_eigenvalue, purity, quantum_marginal,
                     von_neumann_entropy)
from .quantum import identity_scale, product_identity_residual, random_hermitian, random_state

IDENTITY_TOL = 1e-12
MAX_IDENTITY_DIM = 6

fmt = snapshot.fmt


class VerdictMismatch(HybridynError):
    guard = "verdict"
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}", guard="usage")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _config(args) -> config_mod.ScenarioConfig:
    return config_mod.load(args.config) if args.config else config_mod.golden()


def _out_dir(args, cfg=None) -> Path:
    out = Path(args.out or (cfg.out if cfg is not None and cfg.out else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _threads(cfg) -> int:
    cap = os.environ.get("HYBRIDYN_THREADS")
    if cap is None:
        return cfg.threads
    try:
        return max(1, min(cfg.threads, int(cap)))
    except ValueError:
        raise ConfigError(f"HYBRIDYN_THREADS={cap!r} is not an integer") from None


def _pair_label(i: int, j: int) -> str:
    return f"{i + 1}_{j + 1}"


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = cfg.model()
    if cfg.representation == "grid":
        sq, sp = cfg.widths
        s0 = initial_grid_state(m, cfg.grid, sq, sp)
        states = evolve_grid(m, s0, cfg.dt, cfg.T, cfg.every, cfg.boundary_tol, _threads(cfg), cfg.derivative)
        bins = None
    else:
        s0 = initial_points_state(m)
        states = evolve_points(m, s0, cfg.dt, cfg.T, cfg.every)
        bins = cfg.grid
    report = decoherence_report(states, bins, with_min_eig=cfg.assemble)
    n = m.dim
    pairs = m.pairs()
    header = ["t", "trace", "hermiticity_residual", "purity", "S_L"]
    if cfg.assemble:
        header.append("min_eig")
    header += [f"population_{i + 1}" for i in range(n)]
    header += [f"coherence_{_pair_label(i, j)}_abs" for i, j in pairs]
    if cfg.representation == "points":
        header += [f"in_flight_{_pair_label(i, j)}_abs" for i, j in pairs]
    rows = []
    for r in report:
        row = [r.t, r.trace, r.hermiticity_residual, r.purity, r.linear_entropy]
        if cfg.assemble:
            row.append(r.min_eig)
        row += [float(x) for x in r.populations]
        row += [r.coherences[p] for p in pairs]
        if cfg.representation == "points":
            row += [r.in_flight[p] for p in pairs]
        rows.append(row)
    _write_csv(out / "diagnostics.csv", header, rows)
    if cfg.snapshots != "none":
        keep = range(len(states)) if cfg.snapshots == "all" else sorted({0, len(states) - 1})
        for k in keep:
            snapshot.write(out / f"snapshot_{k:04d}.txt", states[k], m.hbar, cfg.grid)
    print(f"wrote {out / 'diagnostics.csv'} ({len(rows)} rows)")
    return 0


def cmd_characteristics(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = cfg.model()
    n = _steps(cfg.T, cfg.dt)
    # half-step samples feed the midpoint stage of the phase integration
    dt_half = cfg.T / (2 * n)
    branches = [hamilton_trajectory(m, m.v[i], m.q0, m.p0, dt_half, cfg.T, (i,)) for i in range(m.dim)]
    mids, phases = [], []
    for i, j in m.pairs():
        tr = hamilton_trajectory(m, m.pair_coupling(i, j), m.q0, m.p0, dt_half, cfg.T, (i, j))
        mids.append(tr)
        phases.append(phase_ode(m, i, j, tr))
    header = ["t"]
    for i in range(m.dim):
        header += [f"q_{i + 1}", f"p_{i + 1}"]
    for i, j in m.pairs():
        lab = _pair_label(i, j)
        header += [f"q_{lab}", f"p_{lab}", f"abs_c_{lab}", f"arg_c_{lab}"]
    rows = []
    for k in range(n + 1):
        if k % cfg.every and k != n:
            continue
        row = [float(branches[0].t[2 * k])]
        for b in branches:
            row += [float(b.q[2 * k]), float(b.p[2 * k])]
        for tr, ph in zip(mids, phases):
            c = complex(ph.c[k])
            row += [float(tr.q[2 * k]), float(tr.p[2 * k]), abs(c), float(np.angle(c))]
        rows.append(row)
    _write_csv(out / "branches.csv", header, rows)
    print(f"wrote {out / 'branches.csv'} ({len(rows)} rows)")
    return 0


EXPECTED = {
    7: "residual >= 100*tol (not a solution)",
    9: "residual <= tol, min_eig >= 0",
    10: "residual <= tol, min_eig < 0",
}


def verdict_holds(which: int, residual: float, min_eig: float, fd_stable: bool,
                  tol: float = RESIDUAL_TOL) -> bool:
    if which == 7:
        return residual >= 100 * tol
    if not fd_stable or residual > tol:
        return False
    if which == 9:
        return min_eig >= -NEGATIVE_EIG_TOL
    return min_eig < -NEGATIVE_EIG_TOL


def cmd_validate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = cfg.model()
    which = args.candidate
    t = cfg.validate_t if args.t is None else args.t
    bins = cfg.grid
    try:
        rep = residual_norm(m, which, t, bins, cfg.fd_step, cfg.candidate_dt, cfg.convention)
    except SeparationFailure:
        t_sep = earliest_separation(m, bins, cfg.candidate_dt, max(t - m.t0, cfg.T))
        hint = "none within the search window" if t_sep is None else fmt(t_sep)
        print(f"branch points are not bin-separated at t={fmt(t)}; earliest separated t: {hint}")
        raise
    a = assemble(build_candidate(m, which, t, cfg.candidate_dt, cfg.convention), bins)
    lam = min_eigenvalue(a)
    s_vn = von_neumann_entropy(a)
    ok = verdict_holds(which, rep.total, lam, rep.fd_stable)
    keys = sorted(rep.blocks)
    header = (["candidate", "t", "residual_total", "residual_amplitude", "residual_transport"]
              + [f"residual_{_pair_label(i, j)}" for i, j in keys]
              + [f"term_{k}" for k in rep.terms]
              + ["fd_stable", "min_eig", "purity", "idempotency_residual", "S_L", "S_vN", "expected", "verdict"])
    row = ([which, float(t), rep.total, rep.amplitude, rep.transport]
           + [rep.blocks[k] for k in keys]
           + [rep.terms[k] for k in rep.terms]
           + [str(rep.fd_stable).lower(), lam, purity(a), idempotency_residual(a), linear_entropy(a),
              "undefined" if isinstance(s_vn, Undefined) else float(s_vn),
              EXPECTED[which], "pass" if ok else "fail"])
    _write_csv(out / "verdict.csv", header, [row])
    print(f"candidate {which} at t={fmt(t)}: residual {rep.total:.3e}, min_eig {lam:.12g}, "
          f"purity {purity(a):.12g} -> {'pass' if ok else 'fail'}")
    if not ok:
        raise VerdictMismatch(f"candidate {which} does not show the expected verdict ({EXPECTED[which]})")
    return 0


def identity_check(dim: int, trials: int, seed: int, hbar: float = 1.0) -> float:
    """Largest scale-relative defect of the product-commutator identity over random quadruples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h1, h2 = random_hermitian(dim, rng), random_hermitian(dim, rng)
        r1, r2 = random_state(dim, rng), random_state(dim, rng)
        res = product_identity_residual(h1, h2, r1, r2, hbar)
        worst = max(worst, res / identity_scale(h1, h2, r1, r2, hbar))
    return worst


def cmd_identity_check(args) -> int:
    if not 1 <= args.dim <= MAX_IDENTITY_DIM or args.trials < 1:
        raise ConfigError(f"need 1 <= dim <= {MAX_IDENTITY_DIM} and trials >= 1")
    worst = identity_check(args.dim, args.trials, args.seed, args.hbar)
    print(f"dim {args.dim} trials {args.trials} seed {args.seed}: max residual/scale {worst:.3e}")
    if worst > IDENTITY_TOL:
        raise VerdictMismatch(f"identity residual {worst:.3e} exceeds {IDENTITY_TOL:g}")
    return 0


def cmd_diagnose(args) -> int:
    snap = snapshot.read(args.snapshot)
    s = snap.state
    bins = snap.bins
    if args.config:
        bins = _config(args).grid
    if s.representation == "points" and bins is None:
        raise ConfigError("points snapshot without bins; pass --config", guard="grid_mismatch")
    a = assemble(s, bins if s.representation == "points" else None)
    marg = quantum_marginal(s, bins if s.representation == "points" else None)
    s_vn = von_neumann_entropy(a)
    rows = [
        ["t", float(s.t)],
        ["trace", hybrid_trace(s)],
        ["hermiticity_residual", hermiticity_residual(s)],
        ["purity", purity(a)],
        ["idempotency_residual", idempotency_residual(a)],
        ["S_L", linear_entropy(a)],
        ["S_vN", "undefined" if isinstance(s_vn, Undefined) else float(s_vn)],
        ["min_eig", min_eigenvalue(a)],
    ]
    n = s.dim
    rows += [[f"population_{i + 1}", float(marg.populations[i])] for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            rows.append([f"coherence_{_pair_label(i, j)}_abs", float(abs(marg.matrix[i, j]))])
            rows.append([f"in_flight_{_pair_label(i, j)}_abs", float(abs(marg.in_flight[i, j]))])
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["quantity", "value"])
    for k, v in rows:
        w.writerow([k, fmt(v) if isinstance(v, float) else v])
    if args.out:
        _write_csv(_out_dir(args) / "diagnose.csv", ["quantity", "value"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="scenario INI file (default: the built-in golden scenario)")
    common.add_argument("--out", help="output directory (default: config value or .)")
    p = _Parser(prog="hybridyn", description="Hybrid quantum-classical measurement dynamics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = sub.add_parser("run", parents=[common], help="evolve a scenario, write diagnostics.csv")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("characteristics", parents=[common], help="branch trajectories, write branches.csv")
    sp.set_defaults(func=cmd_characteristics)
    sp = sub.add_parser("validate", parents=[common], help="adjudicate a candidate, write verdict.csv")
    sp.add_argument("--candidate", type=int, choices=(7, 9, 10), required=True)
    sp.add_argument("--t", type=float, default=None, help="evaluation time (default: config [validate] t)")
    sp.set_defaults(func=cmd_validate)
    sp = sub.add_parser("identity-check", parents=[common], help="random test of the product identity")
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hbar", type=float, default=1.0)
    sp.set_defaults(func=cmd_identity_check)
    sp = sub.add_parser("diagnose", parents=[common], help="eigen-diagnostics of a snapshot file")
    sp.add_argument("snapshot")
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except HybridynError as exc:
        sys.stdout.flush()
        print(str(exc), file=sys.stderr)
        print(f"ERROR {exc.exit_code} {exc.guard}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        # numerical failures not covered by a named guard
        sys.stdout.flush()
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        print("ERROR 4 numerical", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
