"""Command line interface: ``kzpeps <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .analysis import fit_power_law, predicted_kz_exponent
from .deterministic import EvalSettings, bond_correlators_det, residual_energy, save_correlators
from .experiment import WORKERS_ENV, ExperimentConfig, aggregate, load_config, read_results, run_experiment
from .model import DisorderInstance, GroundReference, classical_ground, default_schedule, generate_disorder, \
    load_schedule
from .peps import evolve, load_checkpoint, product_plus_x, save_checkpoint, truncate_all
from .sampler import SamplerSettings, run_sampling
from .trotter import default_dt

log = logging.getLogger("kzpeps")


def _schedule(spec, kind="pchip"):
    return default_schedule() if spec in (None, "builtin") else load_schedule(spec, kind)


def _ground(args, inst):
    if getattr(args, "ground", None):
        return GroundReference.from_json(json.loads(Path(args.ground).read_text(encoding="utf-8")))
    return classical_ground(inst, budget=args.ground_budget)


def cmd_gen_disorder(args):
    inst = generate_disorder(tuple(args.shape) if args.shape else args.L, args.seed)
    inst.save(args.out)
    if args.ground_out:
        g = classical_ground(inst, budget=args.ground_budget)
        Path(args.ground_out).write_text(json.dumps(g.to_json()), encoding="utf-8")
        print(f"ground energy per bond {g.energy_per_bond:.6f} ({g.method})")
    print(f"wrote {inst.n_bonds} couplings to {args.out}")
    return 0


def cmd_evolve(args):
    inst = DisorderInstance.load(args.disorder)
    sched = _schedule(args.schedule, args.schedule_kind)
    dt = args.dt if args.dt is not None else default_dt(sched, inst, args.max_angle, args.s_end)
    state, hist = evolve(product_plus_x(inst.lattice), sched, inst, args.t_a, dt, args.D_e, args.s_end,
                         args.neighborhood)
    meta = {"t_a": args.t_a, "dt": dt, "D_e": args.D_e, "schedule_source": sched.source,
            "max_ntu_loss": float(max(hist.max_loss, default=0.0))}
    if args.D_t is not None:
        _, reps = truncate_all(state, args.D_t, args.neighborhood)
        meta["D_t"] = args.D_t
        meta["truncate_all_loss"] = float(sum(r.local_fidelity_loss for r in reps))
    save_checkpoint(args.out, state, args.s_end, meta)
    if args.log:
        Path(args.log).write_text(json.dumps(hist.to_dict()), encoding="utf-8")
    print(f"evolved {len(hist.s)} steps (dt={dt:.4g} ns), max NTU loss {meta['max_ntu_loss']:.3g}; wrote {args.out}")
    return 0


def cmd_eval_det(args):
    inst = DisorderInstance.load(args.disorder)
    state, _ = load_checkpoint(args.state)
    g = _ground(args, inst)
    res = bond_correlators_det(state, EvalSettings(args.d, args.chi_final, args.trunc_tol))
    q = residual_energy(inst, res.correlators, g)
    if args.out:
        save_correlators(args.out, inst, res, {"Q": q, "ground_method": g.method})
    print(json.dumps({"Q": q, **res.metadata()}))
    return 0


def cmd_eval_mc(args):
    inst = DisorderInstance.load(args.disorder)
    state, _ = load_checkpoint(args.state)
    g = _ground(args, inst)
    st = SamplerSettings(d_mc=args.d_mc, chi_mc=args.chi_mc, target_rel=args.target_rel,
                         max_cycles=args.max_cycles, estimator=args.estimator)
    q, s, stats = run_sampling(state, inst, g, st, seed=args.seed, log_path=args.log, stats_path=args.out)
    print(json.dumps({"Q": q, "sigma_Q": s, "converged": stats.converged, "blocks": stats.n_blocks,
                      "tau_int_sweeps": stats.tau_int, "acceptance": stats.acceptance}))
    return 0 if stats.converged else 3


def cmd_fit(args):
    rows = read_results(args.results)
    engines = [args.engine] if args.engine else sorted({r["engine"] for r in rows})
    report = {"predicted_exponent": predicted_kz_exponent(3, 1 / 1.55, 1.3), "fits": {}}
    for eng in engines:
        pts = aggregate(rows, eng)
        window = tuple(args.window) if args.window else None
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = fit_power_law(pts, window)
            report["fits"][eng] = {**fit.to_dict(), "warnings": [str(w.message) for w in caught]}
        except ValueError as exc:
            report["fits"][eng] = {"error": str(exc)}
    text = json.dumps(report, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0 if all("error" not in f for f in report["fits"].values()) else 1


def cmd_run(args):
    overrides = {
        "L": args.L, "seeds": args.seeds, "schedule": args.schedule, "t_a": args.t_a, "dt": args.dt,
        "D_e": args.D_e, "D_t": args.D_t, "s_end": args.s_end, "evaluator": args.evaluator, "output": args.out,
        "neighborhood": args.neighborhood,
    }
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None}).validate()
    summary = run_experiment(cfg, workers=args.workers)
    fits = {}
    for eng in cfg.engines:
        pts = aggregate(summary["rows"], eng)
        if len(pts) >= 3:
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fits[eng] = fit_power_law(pts).to_dict()
            except ValueError as exc:
                fits[eng] = {"error": str(exc)}
    Path(cfg.output, "fit.json").write_text(json.dumps(fits, indent=2, default=float), encoding="utf-8")
    n_rows = len(summary["rows"])
    print(f"{n_rows} rows in {cfg.output}/results.csv, {summary['failed']} failed this run")
    for eng, f in fits.items():
        if "exponent" in f:
            print(f"{eng}: exponent {f['exponent']:.3f} +- {f['exponent_stderr']:.3f}")
    return 0 if summary["complete"] else 2


def _add_ground(p):
    p.add_argument("--ground", help="ground-state JSON (computed if omitted)")
    p.add_argument("--ground-budget", type=int, default=16, help="annealing restarts above 24 spins")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kzpeps", description="3D PEPS annealing of the random transverse-field "
                                 "Ising model and Kibble-Zurek analysis")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-disorder", help="draw couplings for a cubic lattice")
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, help="non-cubic lattice shape (overrides --L)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ground-out", help="also write the classical ground state here")
    p.add_argument("--ground-budget", type=int, default=16)
    p.set_defaults(func=cmd_gen_disorder)

    p = sub.add_parser("evolve", help="anneal |+...+> to s_end and checkpoint the PEPS")
    p.add_argument("--disorder", required=True)
    p.add_argument("--schedule", default="builtin", help="CSV with s,gamma_ghz,j_ghz or 'builtin'")
    p.add_argument("--schedule-kind", default="pchip", choices=["pchip", "linear"])
    p.add_argument("--t-a", dest="t_a", type=float, required=True, help="annealing time in ns")
    p.add_argument("--dt", type=float, help="time step in ns (default: max gate angle 0.05)")
    p.add_argument("--max-angle", type=float, default=0.05)
    p.add_argument("--D-e", dest="D_e", type=int, default=4)
    p.add_argument("--D-t", dest="D_t", type=int, help="final truncation before evaluation")
    p.add_argument("--s-end", dest="s_end", type=float, default=0.6)
    p.add_argument("--neighborhood", choices=["a", "b"], default="b")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="write the per-step truncation log as JSON")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("eval-det", help="deterministic boundary evaluation of Q")
    p.add_argument("--state", required=True)
    p.add_argument("--disorder", required=True)
    _add_ground(p)
    p.add_argument("--d", type=int, default=7)
    p.add_argument("--chi-final", type=int)
    p.add_argument("--trunc-tol", type=float, default=0.01)
    p.add_argument("--out", help="correlator CSV (metadata JSON written alongside)")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("eval-mc", help="Monte Carlo evaluation of Q")
    p.add_argument("--state", required=True)
    p.add_argument("--disorder", required=True)
    _add_ground(p)
    p.add_argument("--d-mc", type=int)
    p.add_argument("--chi-mc", type=int)
    p.add_argument("--target-rel", type=float, default=0.01)
    p.add_argument("--max-cycles", type=int, default=400)
    p.add_argument("--estimator", choices=["rb", "raw"], default="rb")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="statistics JSON")
    p.add_argument("--log", help="binary sample log (sweep, Q, acceptance)")
    p.set_defaults(func=cmd_eval_mc)

    p = sub.add_parser("fit", help="Kibble-Zurek power-law fit of a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--engine", choices=["deterministic", "monte-carlo"])
    p.add_argument("--window", type=float, nargs=2, metavar=("T_MIN", "T_MAX"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("run", help="end-to-end experiment over a t_a grid",
                       epilog=f"The worker count defaults to ${WORKERS_ENV} (1 if unset).")
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--L", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--schedule")
    p.add_argument("--t-a", dest="t_a", type=float, nargs="+")
    p.add_argument("--dt", type=float)
    p.add_argument("--D-e", dest="D_e", type=int)
    p.add_argument("--D-t", dest="D_t", type=int)
    p.add_argument("--s-end", dest="s_end", type=float)
    p.add_argument("--neighborhood", choices=["a", "b"])
    p.add_argument("--evaluator", choices=["deterministic", "monte-carlo", "both"])
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
