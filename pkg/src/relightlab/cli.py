"""Command-line entry points wrapping the library pipeline.

Subcommands: train-source, relight, finetune, eval, sweep-alpha, ablate-2x2,
compare-anchor-head, sweep-iterations, report.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from . import config as cfgmod
from . import datasets as ds
from . import harness, learners
from .litworld import LitWorld
from .replay import PoolSet


def _load_cfg(path: str | None) -> dict:
    return cfgmod.load_config(path) if path else cfgmod.default_config()


def _plan(args, cfg) -> harness.ExperimentPlan:
    kwargs = {}
    if getattr(args, "episodes", None):
        kwargs["eval_episodes"] = args.episodes
    if getattr(args, "budget", None):
        kwargs["source_budget"] = args.budget
    if getattr(args, "steps", None):
        kwargs["finetune_steps"] = args.steps
    if getattr(args, "alphas", None):
        kwargs["alphas"] = tuple(args.alphas)
    if getattr(args, "workers", None):
        kwargs["max_workers"] = args.workers
    return harness.ExperimentPlan(
        workdir=Path(args.workdir), config=cfg, seeds=tuple(args.seeds), **kwargs)


def cmd_train_source(args) -> int:
    cfg = _load_cfg(args.config)
    lcfg = cfgmod.learner_config(cfg)
    if args.budget is not None:
        lcfg = cfgmod.learner_config(cfg, source_budget=args.budget)
    env = LitWorld(cfgmod.env_config(cfg))
    light = cfgmod.light_config(cfg, "light.source")
    result = learners.train_source(env, lcfg, args.seed, light)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    learners.save_agent(out / "agent.rohc", result.agent, step_count=result.best_step,
                        config_hash=cfgmod.config_hash(cfg))
    ds.write_dataset(result.rl_dataset, out / "rl.rohl")
    ds.write_dataset(result.demo_dataset, out / "demo.rohl")
    print(f"best checkpoint: step {result.best_step}, "
          f"eval history {result.eval_history}")
    print(f"wrote {out}/agent.rohc, rl.rohl, demo.rohl")
    return 0


def cmd_relight(args) -> int:
    cfg = _load_cfg(args.config)
    dataset = ds.read_dataset(args.dataset)
    relit = ds.relight_dataset(dataset, cfgmod.relight_set(cfg))
    out = Path(args.out)
    if out.suffix != ".rohl":
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(args.dataset).stem + "_relit.rohl")
    ds.write_dataset(relit, out)
    print(f"wrote {out} ({len(relit.transitions)} transitions, "
          f"{len(dataset.transitions)} x 4)")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args.config)
    agent, _ = learners.load_agent(args.source)
    rl_path, demo_path, rl_relit_path, demo_relit_path = args.pools
    pools = PoolSet()
    for path, ingest in ((rl_path, pools.insert_rl), (rl_relit_path, pools.insert_rl),
                         (demo_path, pools.insert_demo),
                         (demo_relit_path, pools.insert_demo)):
        for tr in ds.read_dataset(path).transitions:
            ingest(tr)
    lcfg = cfgmod.learner_config(cfg, alpha=args.alpha, anchor_head=args.anchor)
    if args.anchor == "none":
        lcfg = cfgmod.learner_config(cfg, alpha=args.alpha, anchor_head="none",
                                     lambda_feat=0.0)
    if args.steps is not None:
        lcfg = cfgmod.learner_config(
            cfg, alpha=args.alpha, anchor_head=lcfg.anchor_head,
            lambda_feat=lcfg.lambda_feat, finetune_steps=args.steps)
    result = learners.finetune(agent, pools, lcfg, seed=args.seed)
    learners.save_agent(args.out, result.agent, step_count=lcfg.finetune_steps,
                        config_hash=cfgmod.config_hash(cfg))
    print(f"wrote {args.out} (frozen checksum {result.frozen_checksum[:12]}...)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    agent, _ = learners.load_agent(args.agent)
    rep = harness.evaluate(agent.params, args.shift, args.episodes, args.seed, cfg,
                           interventions=args.interventions)
    print(json.dumps(rep.__dict__, indent=1))
    return 0


def _sweep_command(args, runner) -> int:
    cfg = _load_cfg(args.config)
    plan = _plan(args, cfg)
    rows = runner(plan, out_csv=args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_report(args) -> int:
    rows: list[harness.ReportRow] = []
    for path in args.inputs:
        rows.extend(harness.rows_from_json(path))
    harness.emit_report(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relightlab")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, seeds=False, workdir=False):
        sp.add_argument("--config", default=None, help="flat key=value config file")
        if seeds:
            sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
            sp.add_argument("--episodes", type=int, default=None)
            sp.add_argument("--budget", type=int, default=None)
            sp.add_argument("--steps", type=int, default=None)
            sp.add_argument("--workers", type=int, default=None)
        if workdir:
            sp.add_argument("--workdir", required=True)
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-source", help="online source training")
    add_common(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--budget", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_source)

    sp = sub.add_parser("relight", help="expand a dataset under the relight set")
    add_common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_relight)

    sp = sub.add_parser("finetune", help="anchored offline fine-tune")
    add_common(sp)
    sp.add_argument("--source", required=True, help="source agent checkpoint")
    sp.add_argument("--pools", nargs=4, required=True,
                    metavar=("RL", "DEMO", "RL_RELIT", "DEMO_RELIT"))
    sp.add_argument("--alpha", type=float, default=0.75)
    sp.add_argument("--anchor", choices=("mse", "kl", "none"), default="mse")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate an agent at a shift intensity")
    add_common(sp)
    sp.add_argument("--agent", required=True)
    sp.add_argument("--shift", type=float, default=0.6)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--interventions", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    for name, runner in (("sweep-alpha", harness.run_alpha_sweep),
                         ("ablate-2x2", harness.run_2x2_ablation),
                         ("compare-anchor-head", harness.run_anchor_head_compare),
                         ("sweep-iterations", harness.run_iteration_sweep)):
        sp = sub.add_parser(name)
        add_common(sp, seeds=True, workdir=True)
        if name == "sweep-alpha":
            sp.add_argument("--alphas", type=float, nargs="+", default=None)
        sp.set_defaults(fn=lambda a, r=runner: _sweep_command(a, r))

    sp = sub.add_parser("report", help="merge row JSONs into one CSV")
    sp.add_argument("--inputs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
