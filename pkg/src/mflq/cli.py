"""Command-line front end.

    mflq <subcommand> --config FILE|preset:NAME [--out DIR] [--seed N] [--steps N]
         [--particles N] [--paths N] [--phi-convention NAME]

Each run writes into a scratch directory next to the output directory and
moves the files over only when the run completes, so a failed run leaves no
partial artifacts.  Every run emits ``resolved_config.yaml`` (parses back to
the same scenario) and ``summary.txt`` (key=value lines).

Exit codes: 0 success, 2 schema error, 3 assumption failure, 4 numerical
singularity or divergence, 5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ScenarioConfig, parse_config
from .errors import AssumptionError, ConfigError, MflqError
from .model import is_mfg_reducible, validate_assumptions
from .riccati import CONVENTIONS, compute_gains, solve_riccati, write_solution_csv
from .simulate import evaluate_costs, generate_noise, simulate_ensemble, write_cost_csv, write_trajectory_csv

SUBCOMMANDS = ("validate", "solve", "simulate", "verify", "nash-gap", "exhaustible-sweep", "poa")


def _header(cfg: ScenarioConfig, grid=None) -> str:
    g = cfg.grid if grid is None else {"t0": grid.t0, "T": grid.T, "n_steps": grid.n_steps}
    return (f"tool=mflq {__version__} seed={cfg.simulation['seed']} "
            f"grid={g['t0']!r}:{g['T']!r}:{g['n_steps']} phi={cfg.run['phi_convention']}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_summary(path, items):
    with open(path, "w") as fh:
        for key, val in items:
            fh.write(f"{key}={_fmt(val)}\n")


def _noise(cfg, cs, seed_offset=0):
    sim = cfg.simulation
    return generate_noise(cs.grid, sim["seed"] + seed_offset, sim["paths"], sim["particles"], cfg.init_spec, cs.d)


def _solved(cfg):
    cs = cfg.coefficient_set()
    rs = solve_riccati(cs, cfg.run["phi_convention"])
    return cs, rs, compute_gains(cs, rs)


# ---------------------------------------------------------------- subcommands


def cmd_validate(cfg, out):
    cs = cfg.coefficient_set()
    rep = validate_assumptions(cs)
    flag, why = is_mfg_reducible(cs)
    with open(out / "assumptions.txt", "w") as fh:
        for key, val in rep.summary().items():
            fh.write(f"{key}={_fmt(val)}\n")
        for name, node, margin in rep.violations:
            fh.write(f"violation check={name!r} node={node} margin={margin!r}\n")
        fh.write(f"mfg_reducible={_fmt(flag)}\n")
        for name in why:
            fh.write(f"reducibility_violation={name}\n")
    if not rep.passed:
        names = sorted({v[0] for v in rep.violations})
        raise AssumptionError(f"coefficient assumptions violated: {names}", rep)
    return [("subcommand", "validate"), *rep.summary().items(), ("mfg_reducible", flag)]


def cmd_solve(cfg, out):
    cs, rs, gs = _solved(cfg)
    write_solution_csv(out / "riccati.csv", rs, gs, _header(cfg))
    m, d = gs.K0.shape[1:]
    cols = ["s"] + [f"{name}_{i}{j}" for name in ("Lambda0", "Lambda1", "K0", "K1") for i in range(m) for j in range(d)]
    cols += [f"c_{i}" for i in range(m)] + ["cond0", "cond1"]
    data = np.column_stack([cs.grid.nodes] + [a.reshape(a.shape[0], -1) for a in (gs.Lambda0, gs.Lambda1, gs.K0, gs.K1)]
                           + [gs.c, gs.cond0, gs.cond1])
    _write_rows(out / "gains.csv", cols, data, _header(cfg))
    return [("subcommand", "solve"), ("P0_trace", float(np.trace(rs.P[0]))), ("Pi0_trace", float(np.trace(rs.Pi[0]))),
            ("max_cond_sigma0", float(gs.cond0.max())), ("max_cond_sigma1", float(gs.cond1.max()))]


def _write_rows(path, cols, data, header):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in data:
            w.writerow([repr(float(x)) for x in row])


def cmd_simulate(cfg, out):
    cs, rs, gs = _solved(cfg)
    batch = simulate_ensemble(cs, gs, _noise(cfg, cs), cfg.simulation["mode"])
    rep = evaluate_costs(batch, cs)
    write_trajectory_csv(out / "trajectories.csv", batch, _header(cfg), cfg.output["trajectory_particles"])
    write_cost_csv(out / "costs.csv", rep, _header(cfg))
    return [("subcommand", "simulate"), ("mode", batch.mode), ("paths", batch.K), ("particles", batch.M),
            ("j_lq", rep.j_lq), ("j_lq_se", rep.j_lq_se), ("j_mfg", rep.j_mfg), ("j_mfg_se", rep.j_mfg_se),
            ("poa", rep.poa), ("poa_se", rep.poa_se), ("quadrature", rep.quadrature)]


def cmd_verify(cfg, out):
    from .verify import run_checks, write_profile_csv, write_report

    cs = cfg.coefficient_set()
    v = cfg.run["verify"]
    checks, art = run_checks(
        cs, cfg.run["phi_convention"], cfg.simulation["seed"], cfg.init_spec,
        coupling_size=(v["coupling_paths"], v["coupling_particles"]),
        bsde_steps=tuple(v["bsde_steps"]), bsde_size=(v["bsde_paths"], v["bsde_particles"]),
        gateaux_steps=v["gateaux_steps"], gateaux_size=(v["gateaux_paths"], v["gateaux_particles"]),
    )
    write_report(out / "verification_report.txt", checks)
    write_profile_csv(out / "coupling_profile.csv", art["coupling"], cs.grid, _header(cfg))
    fine = cs.grid.refined(max(v["bsde_steps"]))
    write_profile_csv(out / "bsde_profile.csv", art["bsde"], fine, _header(cfg, fine))
    failed = [c.name for c in checks if not c.passed]
    summary = [("subcommand", "verify"), ("checks", len(checks)), ("failed", len(failed))]
    summary += [(c.name, c.value) for c in checks]
    if failed:
        summary.append(("failed_checks", ",".join(failed)))
    return summary, failed


def cmd_nash_gap(cfg, out):
    from .nplayer import deviation_slope, nash_sweep, write_sweep_csv

    nash = cfg.run["nash"]
    cs = cfg.coefficient_set()
    ok, why = is_mfg_reducible(cs)
    if not ok:
        raise AssumptionError(f"N-player game needs a reducible model; offending coefficients: {why}")
    cs = cs.on_grid(cs.grid.refined(nash["steps"]))
    rs = solve_riccati(cs, cfg.run["phi_convention"])
    gs = compute_gains(cs, rs)
    Ns = sorted(set(nash["players"]) | {nash["negative_control_players"]})
    noise = generate_noise(cs.grid, cfg.simulation["seed"], nash["replications"], max(Ns), cfg.init_spec, cs.d)
    reports = nash_sweep(cs, gs, noise, Ns, nash["families"])
    write_sweep_csv(out / "nash_sweep.csv", reports, _header(cfg, cs.grid))
    summary = [("subcommand", "nash-gap"), ("replications", nash["replications"])]
    summary += [(f"gain[N={r.N},{r.family}]", r.gain) for r in reports]
    summary += [(f"gain_se[N={r.N},{r.family}]", r.std_error) for r in reports]
    for N in Ns:
        slope, se = deviation_slope(cs, gs, noise.subset(N))
        summary += [(f"slope[N={N}]", slope), (f"slope_se[N={N}]", se)]
    return summary


def cmd_exhaustible_sweep(cfg, out):
    from .exhaustible import epsilon_sweep, reserve_positivity_check, write_sweep_csv

    params = cfg.exhaustible_params()
    sim = cfg.simulation
    eps = cfg.run["sweep"]["epsilons"]
    pts = epsilon_sweep(params, eps, cfg.grid["n_steps"], sim["seed"], sim["paths"], sim["particles"])
    write_sweep_csv(out / "epsilon_sweep.csv", pts, _header(cfg))
    summary = [("subcommand", "exhaustible-sweep")]
    mid = cfg.grid["n_steps"] // 2
    for pt in pts:
        pos = reserve_positivity_check(params.with_epsilon(pt.epsilon), cfg.grid["n_steps"])
        summary += [
            (f"price_t0[eps={pt.epsilon:g}]", pt.curve.expected_price[0]),
            (f"price_mid[eps={pt.epsilon:g}]", pt.curve.expected_price[mid]),
            (f"price_mid_se[eps={pt.epsilon:g}]", pt.curve.price_se[mid]),
            (f"small_horizon_holds[eps={pt.epsilon:g}]", pos.holds),
            (f"horizon_bound[eps={pt.epsilon:g}]", pos.bound),
            (f"pi_positive[eps={pt.epsilon:g}]", pos.pi_positive),
        ]
    return summary


def cmd_poa(cfg, out):
    header = _header(cfg)
    rows = []
    if cfg.exhaustible is not None:
        from .exhaustible import poa_check

        params = cfg.exhaustible_params()
        cs = cfg.coefficient_set()
        noise = _noise(cfg, cs)
        for eps in cfg.run["poa"]["epsilons"]:
            r = poa_check(params.with_epsilon(eps), noise, cfg.simulation["mode"])
            rows.append([eps, r.j_lq, r.j_lq_se, r.j_mfg, r.j_mfg_se, r.poa, r.poa_se, r.direct, r.direct_se])
        cols = ["epsilon", "j_lq", "j_lq_se", "j_mfg", "j_mfg_se", "poa", "poa_se", "direct", "direct_se"]
    else:
        cs, rs, gs = _solved(cfg)
        rep = evaluate_costs(simulate_ensemble(cs, gs, _noise(cfg, cs), cfg.simulation["mode"]), cs)
        rows.append([rep.j_lq, rep.j_lq_se, rep.j_mfg, rep.j_mfg_se, rep.poa, rep.poa_se])
        cols = ["j_lq", "j_lq_se", "j_mfg", "j_mfg_se", "poa", "poa_se"]
    _write_rows(out / "poa.csv", cols, np.array(rows, dtype=float), header)
    summary = [("subcommand", "poa")]
    for row in rows:
        tag = f"[eps={row[0]:g}]" if cfg.exhaustible is not None else ""
        summary += [(f"poa{tag}", row[cols.index("poa")]), (f"poa_se{tag}", row[cols.index("poa_se")])]
    return summary


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "nash-gap": cmd_nash_gap,
    "exhaustible-sweep": cmd_exhaustible_sweep,
    "poa": cmd_poa,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mflq", description="Linear-quadratic mean-field control and games with common noise.")
    ap.add_argument("--version", action="version", version=f"mflq {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario YAML file, or preset:<name>")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int, help="time steps of the model grid")
        p.add_argument("--particles", type=int, help="particles per common-noise path")
        p.add_argument("--paths", type=int, help="number of common-noise paths")
        p.add_argument("--phi-convention", choices=CONVENTIONS)
    return ap


def _finalize(scratch: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(scratch.iterdir()):
        shutil.move(str(f), str(out / f.name))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config).with_overrides(
            seed=args.seed, steps=args.steps, particles=args.particles, paths=args.paths,
            phi_convention=args.phi_convention, out=args.out,
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    out = Path(cfg.output["directory"])
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        (scratch / "resolved_config.yaml").write_text(cfg.dump())
        result = COMMANDS[args.subcommand](cfg, scratch)
        failed = []
        if isinstance(result, tuple):
            result, failed = result
        _write_summary(scratch / "summary.txt", result + [("status", "verification_failure" if failed else "ok")])
        _finalize(scratch, out)
    except MflqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    if failed:
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return 5
    print(f"wrote {out}")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
