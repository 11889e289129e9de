"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

REWARDS = ("mloo", "rloo-rmm", "rloo-minade", "col-off", "col-off-ade")
COMMANDS = ("gen-scenarios", "pretrain", "train", "train-gcft", "eval-rmm", "eval-goals",
            "bench-variance", "bench-unbiasedness", "config")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="run configuration JSON (unknown keys are rejected)")
    p.add_argument("--preset", default="default", choices=("default", "toy"),
                   help="base settings the config file is merged onto (toy: desk-scale optimiser)")
    p.add_argument("--seed", type=int, help="seed for all randomness (overrides the config)")
    p.add_argument("--threads", type=int, help="numeric library threads (default: available cores)")
    p.add_argument("--strict-zeros", action="store_true", help="score empty histogram bins as zero")
    if out:
        p.add_argument("--out", required=True, help="output directory (created if missing)")


def _scenarios_arg(p):
    p.add_argument("--scenarios", help="scenario JSON-lines file (default: bundled 20-scenario smoke suite)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trafficft", description="Realism-aligned fine-tuning of a toy traffic simulator.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-scenarios", help="generate synthetic seed scenarios")
    _common(p)
    p.add_argument("--smoke", action="store_true", help="write the bundled smoke suite instead")

    p = sub.add_parser("pretrain", help="behaviour-clone the expert tokens")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--steps", type=int, help="optimiser steps (default from config)")

    p = sub.add_parser("train", help="fine-tune with a group reward")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--init", help="starting policy JSON (default: behaviour-clone first)")
    p.add_argument("--reward", default="mloo", choices=REWARDS, help="reward signal (default mloo)")
    p.add_argument("--steps", type=int, help="update steps (default from config)")

    p = sub.add_parser("train-gcft", help="goal-conditioned fine-tuning")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--init", help="starting policy JSON (default: behaviour-clone first)")
    p.add_argument("--criterion", choices=("soft", "hard"), help="goal reward criterion")
    p.add_argument("--representation", "--rep", choices=("concat", "indication", "ind"),
                   help="goal input channels")
    p.add_argument("--lam", "--lambda", dest="lam", type=float, help="goal reward weight in [0, 1]")
    p.add_argument("--steps", type=int, help="update steps (default from config)")

    p = sub.add_parser("eval-rmm", help="realism metric of a policy")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--policy", help="policy JSON (default: behaviour-clone first)")
    p.add_argument("--goal-mode", default="none", choices=("none", "concat", "indication"))
    p.add_argument("--rollouts", type=int, default=32, help="rollouts per scenario (default 32)")
    p.add_argument("--repeats", type=int, help="independent groups averaged per scenario (default from config)")

    p = sub.add_parser("eval-goals", help="goal reach and pass rates")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--policy", help="policy JSON (default: behaviour-clone first)")
    p.add_argument("--goal-mode", default="none", choices=("none", "concat", "indication"))
    p.add_argument("--source", default="ground_truth", choices=("ground_truth", "perturbed", "alternative"))
    p.add_argument("--horizon", type=float, help="perturbation shift in seconds (perturbed source only)")
    p.add_argument("--mode", help="shorthand for the goal source: gt, perturb:H (H in seconds) or alt")
    p.add_argument("--rollouts", type=int, help="rollouts per scenario (default from config)")

    p = sub.add_parser("bench-variance", help="reward variance against group size")
    _common(p)
    _scenarios_arg(p)
    p.add_argument("--policy", help="policy JSON (default: behaviour-clone first)")
    p.add_argument("--n-list", help="comma-separated group sizes, e.g. 2,4,8,16,32,64")
    p.add_argument("--reps", type=int, help="independent groups per (scenario, N); at least 30")

    p = sub.add_parser("bench-unbiasedness", help="Monte-Carlo check of the leave-one-out gradient")
    _common(p)
    p.add_argument("--batches", type=int, help="Monte-Carlo batches (default 100000)")
    p.add_argument("--group-size", type=int, help="rollouts per batch N")

    p = sub.add_parser("config", help="print configuration")
    _common(p, out=False)
    p.add_argument("--dump-defaults", action="store_true", help="print the full default configuration")
    return parser


# --- helpers ---------------------------------------------------------------------------------

def _load_config(args):
    from .config import RunConfig, merge, PRESETS

    if args.config:
        try:
            with open(args.config) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
    else:
        user = {}
    try:
        cfg = RunConfig.from_dict(merge(PRESETS[args.preset], user))
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strict_zeros:
        cfg.strict_zeros = True
    return cfg


def _scenarios(args):
    from .data import smoke_suite
    from .world import load_scenarios

    if getattr(args, "scenarios", None):
        return load_scenarios(args.scenarios)
    return smoke_suite()


def _scorer(cfg):
    from .trainer import ScenarioScorer
    return ScenarioScorer(cfg.binning, cfg.weights, cfg.strict_zeros)


def _policy(path, scenarios, cfg, out: Path):
    from .policy import PolicyParams
    from .trainer import pretrain_bc

    if path:
        return PolicyParams.load(path)
    res = pretrain_bc(scenarios, cfg.bc.steps, cfg.bc.l2)
    res.params.save(out / "bc_policy.json")
    return res.params


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, args, cfg) -> None:
    import numpy

    from . import __version__

    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out")},
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "versions": {"trafficft": __version__, "python": platform.python_version(), "numpy": numpy.__version__},
        "outputs": {str(p.relative_to(out)): _sha(p) for p in files},
    }
    _write_json(out / "manifest.json", manifest)


# --- subcommands ------------------------------------------------------------------------------

def cmd_gen_scenarios(args, cfg, out):
    from .data import smoke_suite
    from .scenarios import generate_scenarios
    from .world import save_scenarios

    scs = smoke_suite() if args.smoke else generate_scenarios(cfg.generator, cfg.seed)
    save_scenarios(out / "scenarios.jsonl", scs)
    print(f"wrote {len(scs)} scenarios to {out / 'scenarios.jsonl'}")


def cmd_pretrain(args, cfg, out):
    import csv
    from .trainer import greedy_ade, pretrain_bc

    scs = _scenarios(args)
    res = pretrain_bc(scs, cfg.bc.steps if args.steps is None else args.steps, cfg.bc.l2)
    res.params.save(out / "bc_policy.json")
    with open(out / "bc_losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i, repr(float(v))])
    print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} converged={res.converged} "
          f"greedy ADE {greedy_ade(res.params, scs):.3f} m")


def _checkpoints(result, out: Path) -> None:
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for step, params in sorted(result.checkpoints.items()):
        if step:
            params.save(ck / f"step_{step:06d}.json")


def cmd_train(args, cfg, out):
    from .trainer import train, write_metrics_csv

    scs = _scenarios(args)
    init = _policy(args.init, scs, cfg, out)
    if args.steps is not None:
        cfg.trainer.total_steps = args.steps
    res = train(scs, cfg.trainer, args.reward, init=init, seed=cfg.seed, scorer=_scorer(cfg))
    res.params.save(out / "policy.json")
    write_metrics_csv(out / "metrics.csv", res.metrics)
    _checkpoints(res, out)
    if res.metrics:
        last = res.metrics[-1]
        print(f"step {last['step']} mean RMM {last['mean_rmm']:.4f} KL {last['kl']:.5f} beta {last['beta']:.4g}")


def cmd_train_gcft(args, cfg, out):
    from .goals import train_gcft
    from .trainer import write_metrics_csv

    scs = _scenarios(args)
    init = _policy(args.init, scs, cfg, out)
    g = cfg.goals
    if args.criterion:
        g.criterion = args.criterion
    if args.representation:
        g.representation = args.representation
    if args.lam is not None:
        g.lam = args.lam
    g.validate()
    if args.steps is not None:
        cfg.trainer.total_steps = args.steps
    res = train_gcft(scs, cfg.trainer, g, init, seed=cfg.seed, scorer=_scorer(cfg))
    res.params.save(out / "policy.json")
    write_metrics_csv(out / "metrics.csv", res.metrics)
    _checkpoints(res, out)
    print(f"goal mode {g.goal_mode} criterion {g.criterion} lambda {g.lam}")


def cmd_eval_rmm(args, cfg, out):
    import csv
    import numpy as np
    from .trainer import evaluate_rmm

    if args.rollouts < 1:
        raise UsageError("--rollouts must be positive")
    repeats = cfg.evaluation.repeats if args.repeats is None else args.repeats
    if repeats < 1:
        raise UsageError("--repeats must be positive")
    scs = _scenarios(args)
    params = _policy(args.policy, scs, cfg, out)
    vals = evaluate_rmm(params, scs, args.rollouts, cfg.seed, _scorer(cfg), args.goal_mode,
                        cfg.evaluation.temperature, repeats=repeats)
    with open(out / "rmm.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "rmm"])
        for sc, v in zip(scs, vals):
            w.writerow([sc.id, repr(float(v))])
    _write_json(out / "summary.json", {"mean_rmm": float(np.mean(vals)), "scenarios": len(scs),
                                       "rollouts": args.rollouts, "repeats": repeats})
    print(f"mean RMM {np.mean(vals):.5f} over {len(scs)} scenarios x {args.rollouts} rollouts")


def _goal_mode_arg(mode: str) -> tuple[str, float | None]:
    if mode == "gt":
        return "ground_truth", None
    if mode == "alt":
        return "alternative", None
    if mode.startswith("perturb:"):
        try:
            return "perturbed", float(mode.split(":", 1)[1])
        except ValueError:
            pass
    raise UsageError(f"--mode must be gt, perturb:H or alt, got {mode!r}")


def cmd_eval_goals(args, cfg, out):
    from .goals import eval_controllability

    if args.mode:
        args.source, args.horizon = _goal_mode_arg(args.mode)
    scs = _scenarios(args)
    params = _policy(args.policy, scs, cfg, out)
    if args.horizon is not None and args.source != "perturbed":
        raise UsageError("--horizon only applies to --source perturbed")
    res = eval_controllability(params, scs, args.source, args.goal_mode, args.horizon or 0.0,
                               args.rollouts or cfg.evaluation.goal_rollouts, cfg.seed)
    _write_json(out / "goals.json", res)
    print(f"reach {res['reach_rate']:.3f} pass {res['pass_rate']:.3f} pairs {res['pairs']} skipped {res['skipped']}")


def cmd_bench_variance(args, cfg, out):
    from .policy import PolicyHandle
    from .variance import emit_report, mismatch_report, variance_sweep

    try:
        n_list = [int(x) for x in args.n_list.split(",")] if args.n_list else cfg.variance.n_list
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}")
    reps = args.reps or cfg.variance.reps
    if reps < 30:
        raise UsageError("--reps must be at least 30")
    scs = _scenarios(args)[: cfg.variance.scenarios]
    params = _policy(args.policy, scs, cfg, out)
    handle = PolicyHandle(params)
    scorer = _scorer(cfg)
    curves = variance_sweep(handle, scs, n_list, reps, cfg.seed, scorer)
    reports = [mismatch_report(handle, sc, cfg.evaluation.rollouts, cfg.seed, scorer) for sc in scs]
    for line in emit_report(list(curves.values()), reports, out):
        print(line)


def cmd_bench_unbiasedness(args, cfg, out):
    import csv
    import numpy as np
    from .variance import tiny_mdp, unbiasedness_check

    batches = args.batches or cfg.variance.batches
    N = args.group_size or cfg.variance.group_size
    res = unbiasedness_check(tiny_mdp(cfg.seed), N, batches, cfg.seed)
    with open(out / "unbiasedness.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "token", "exact", "mc_mean", "mc_se", "z"])
        for (i, j), e in np.ndenumerate(res.exact):
            w.writerow([i, j, repr(float(e)), repr(float(res.mc_mean[i, j])), repr(float(res.mc_se[i, j])),
                        repr(float(res.z[i, j]))])
    frac = res.fraction_within
    _write_json(out / "summary.json", {"batches": batches, "group_size": N, "fraction_within_3se": frac})
    print(f"{frac:.1%} of components within 3 standard errors ({batches} batches, N={N})")


def cmd_config(args, cfg, out):
    from .config import RunConfig
    print((RunConfig() if args.dump_defaults else cfg).to_json())


HANDLERS = {
    "gen-scenarios": cmd_gen_scenarios,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "train-gcft": cmd_train_gcft,
    "eval-rmm": cmd_eval_rmm,
    "eval-goals": cmd_eval_goals,
    "bench-variance": cmd_bench_variance,
    "bench-unbiasedness": cmd_bench_unbiasedness,
    "config": cmd_config,
}


def _set_threads(n: int | None) -> None:
    if n is not None and n < 1:
        raise UsageError("--threads must be positive")
    n = n or os.cpu_count() or 1
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        cfg = _load_config(args)
        out = None
        if args.command != "config":
            out = Path(args.out)
            try:
                out.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise RuntimeError(f"cannot create output directory {out}: {e}")
        HANDLERS[args.command](args, cfg, out)
        if out is not None:
            write_manifest(out, args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"trafficft: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"trafficft {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
