"""Command-line entry point: ``q2rl <subcommand> [flags]``."""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import driver, kernels
from .bc import train_bc
from .config import RunConfig, parse_config
from .data import read_jsonl, write_jsonl
from .errors import ConfigError, InputError, NumericError, ShapeError
from .q_estimation import QBCEstimate, collect_rollouts, fit_value, save_rollouts

log = logging.getLogger("q2rl")


def _out_root(args):
    return Path(args.out or os.environ.get("Q2RL_OUT") or "runs")


def _load_config(args):
    cfg = parse_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "variant", None):
        over["variant"] = {"name": args.variant}
    bc = {}
    if getattr(args, "demos", None):
        bc["demos"] = str(Path(args.demos).resolve())
    if getattr(args, "bc", None):
        bc["checkpoint"] = str(Path(args.bc).resolve())
    if bc:
        over["bc"] = bc
    if "seed" in over:
        cfg = dataclasses.replace(cfg, seed=over.pop("seed"))
    return cfg.replace(**over) if over else cfg


def _need(path, what):
    if path is None:
        raise ConfigError(f"{what} not given")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- subcommands -----------------------------------------------------------

def cmd_gen_demos(args):
    cfg = _load_config(args)
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    data = driver.make_demos(cfg)
    path = out / "demos.jsonl"
    write_jsonl(path, data.trajectories)
    rate = np.mean([t.terminated for t in data.trajectories])
    print(f"wrote {len(data)} demos to {path} (teacher success {rate:.2f})")


def cmd_train_bc(args):
    cfg = _load_config(args)
    data = read_jsonl(_need(cfg.bc.demos, "demo file"))
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    policy = train_bc(data, cfg.bc)
    path = out / "bc.json"
    policy.save(path)
    nll = policy.loss_curve[policy.selected_epoch]["holdout_nll"]
    print(f"wrote {path} (selected epoch {policy.selected_epoch}, held-out nll {nll:.4f})")


def cmd_estimate_q(args):
    cfg = _load_config(args)
    bc = driver.load_bc(cfg)
    env = driver.online_env(cfg)
    qc = cfg.q_estimation
    shaper = cfg.rl.shaper
    rollouts = collect_rollouts(env, bc, qc.n_rollouts, np.random.default_rng([cfg.seed, 17, 0]), shaper,
                                use_mode=qc.use_mode, seed=cfg.seed, policy_id=cfg.bc.checkpoint)
    value = fit_value(rollouts, cfg.rl.gamma, qc, np.random.default_rng([cfg.seed, 17, 1]))
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    save_rollouts(out / "rollouts.jsonl", rollouts)
    with open(out / "value.json", "w") as f:
        json.dump(value.to_dict(), f)
    obs, act = rollouts.pairs()
    q = QBCEstimate(value, bc, qc.alpha).batch(obs, act)
    print(f"rollout success {rollouts.success_rate:.2f}, value loss {value.initial_loss:.3f} -> "
          f"{value.final_loss:.3f}, mean Q_BC {q.mean():.3f}")


def cmd_train(args):
    cfg = _load_config(args)
    run_dir = _out_root(args) if args.out else _out_root(args) / f"{cfg.variant.name}_s{cfg.seed}"
    demos = read_jsonl(cfg.bc.demos) if cfg.variant.seed_fraction > 0 and cfg.bc.demos else None
    result = driver.run(cfg, demos=demos, run_dir=run_dir)
    last = result.metrics[-1] if result.metrics else {}
    print(f"run {run_dir}: {result.state.env_step} env steps, {result.state.learner_step} learner steps, "
          f"final eval success {last.get('eval_success', float('nan')):.2f}")


def cmd_eval(args):
    cfg, policy = driver.load_bundle(_need(args.run, "run directory"), args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    res = driver.evaluate(policy, driver.online_env(cfg), args.episodes, np.random.default_rng([seed, 29]))
    print(f"success_rate {res.success_rate:.4f} mean_length {res.mean_length:.2f} bc_fraction {res.bc_fraction:.4f}")


def _csv_list(text, cast):
    return [cast(x) for x in text.split(",") if x.strip()]


def cmd_sweep(args):
    base = _load_config(argparse.Namespace(config=args.config))
    root = _out_root(args)
    variants = _csv_list(args.variant or "full", str)
    fractions = _csv_list(args.seed_fractions, float) if args.seed_fractions else [base.variant.seed_fraction]
    demos = read_jsonl(base.bc.demos) if any(f > 0 for f in fractions) and base.bc.demos else None
    bc = driver.load_bc(base)
    n = 0
    for variant in variants:
        for frac in fractions:
            for seed in range(args.seeds):
                cfg = dataclasses.replace(base, seed=seed).replace(
                    variant={"name": variant, "seed_fraction": frac})
                tag = f"{variant}_sf{frac:g}_s{seed}" if args.seed_fractions else f"{variant}_s{seed}"
                result = driver.run(cfg, bc=bc, demos=demos, run_dir=root / tag)
                n += 1
                print(f"{tag}: final eval success {result.metrics[-1]['eval_success']:.2f}", flush=True)
    print(f"{n} runs under {root}")


def _run_dirs(root):
    return sorted(p.parent for p in Path(root).glob("*/config.json"))


def cmd_export(args):
    root = Path(_need(args.runs, "runs directory"))
    dirs = _run_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no run directories under {root}")
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["run_id", "variant", "seed", "seed_fraction"]
    counts = {}
    for table in ("metrics", "gate_log"):
        path = out / f"{table}_long.csv"
        n = 0
        with open(path, "w", newline="") as f:
            writer = None
            for d in dirs:
                cfg = parse_config(d / "config.json")
                src = d / f"{table}.csv"
                if not src.exists():
                    continue
                tag = [d.name, cfg.variant.name, cfg.seed, cfg.variant.seed_fraction]
                with open(src, newline="") as g:
                    reader = csv.reader(g)
                    header = next(reader, None)
                    if header is None:
                        continue
                    if writer is None:
                        writer = csv.writer(f)
                        writer.writerow(keys + header)
                    for row in reader:
                        writer.writerow(tag + row)
                        n += 1
        counts[table] = n
    print(f"exported {counts['metrics']} metric rows and {counts['gate_log']} gate rows from {len(dirs)} runs to {out}")


# -- parser ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="q2rl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, *flags):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--out", help="output directory (default: $Q2RL_OUT or ./runs)")
        if "config" in flags:
            sp.add_argument("--config", help="JSON run configuration")
            sp.add_argument("--seed", type=int)
        if "variant" in flags:
            sp.add_argument("--variant")
        if "demos" in flags:
            sp.add_argument("--demos", help="demo JSONL (overrides bc.demos)")
        if "bc" in flags:
            sp.add_argument("--bc", help="BC checkpoint (overrides bc.checkpoint)")
        return sp

    add("gen-demos", cmd_gen_demos, "roll out the scripted teacher", "config")
    add("train-bc", cmd_train_bc, "fit a BC policy to demos", "config", "demos")
    add("estimate-q", cmd_estimate_q, "BC rollouts and value fit", "config", "bc")
    add("train", cmd_train, "full online run", "config", "variant", "demos", "bc")
    sp = add("eval", cmd_eval, "evaluate a stored run")
    sp.add_argument("--run", required=True, help="run directory")
    sp.add_argument("--checkpoint", default="latest", choices=["latest", "best"])
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp = add("sweep", cmd_sweep, "variants x seed fractions x seeds", "variant")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--seed-fractions", help="comma-separated demo fractions to seed replay with")
    sp = add("export", cmd_export, "long-format CSV over run directories")
    sp.add_argument("--runs", required=True, help="directory holding run directories")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kernels.tune_allocator()
    try:
        args.func(args)
    except (ConfigError, InputError, ShapeError, NumericError) as exc:
        print(f"q2rl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"q2rl {args.command}: path error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
