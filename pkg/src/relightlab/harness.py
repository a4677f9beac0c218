"""Experiment orchestration: evaluation, sweeps, ablations, and CSV/JSON reports.

Every experiment is a pure function of (config, seeds). Heavy cells (source
training, fine-tunes) fan out over processes — each cell is fully independent
and seeded, and completed cells are cached on disk under the plan's workdir so
overlapping experiment grids share work. Report assembly is order-stable
(rows sorted by key), and CSV floats use shortest-repr so a parse round-trips
losslessly.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datasets as ds
from . import learners, nets
from .litworld import LitWorld, interpolate_light
from .replay import PoolSet

CSV_COLUMNS = ("variant", "alpha", "anchor_head", "seed", "shift_pct", "episodes",
               "success_rate", "mean_success_steps", "intervention_rate",
               "finetune_step")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    condition: str
    shift: float
    episodes: int
    success_rate: float
    mean_success_steps: float | None
    intervention_rate: float | None
    seed: int


def evaluate(policy, shift: float, episodes: int, seed: int, cfg: dict,
             interventions: bool = False) -> EvalReport:
    """Evaluate under the light interpolated ``shift`` of the way from the
    source to the deploy condition. ``policy`` is a parameter dict (pixel
    agent) or a callable(state, obs) -> action (e.g. the scripted oracle).

    Episode seeds derive from (seed, shift); intervention rate (fraction of
    steps under oracle control) is reported only in intervention-enabled mode.
    """
    if episodes <= 0:
        raise ValueError(f"episodes must be positive, got {episodes}")
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must be in [0, 1], got {shift}")
    env = LitWorld(cfgmod.env_config(cfg))
    light = interpolate_light(cfgmod.light_config(cfg, "light.source"),
                              cfgmod.light_config(cfg, "light.deploy"), shift)
    rule = learners.InterventionRule() if interventions else None
    ss = np.random.SeedSequence((seed, int(round(shift * 1000))))
    successes = 0
    success_steps: list[int] = []
    intervened = 0
    total_steps = 0
    for child in ss.spawn(episodes):
        ep_seed = int(child.generate_state(1)[0])
        if callable(policy):
            res = _rollout_fn(policy, env, light, ep_seed, rule)
        else:
            res = learners.rollout_policy(policy, env, light, ep_seed, rule)
        total_steps += res.steps
        intervened += res.intervened_steps
        if res.success:
            successes += 1
            success_steps.append(res.steps)
    return EvalReport(
        condition=f"shift{int(round(shift * 100)):03d}",
        shift=shift,
        episodes=episodes,
        success_rate=successes / episodes,
        mean_success_steps=(sum(success_steps) / len(success_steps)
                            if success_steps else None),
        intervention_rate=(intervened / total_steps if interventions else None),
        seed=seed,
    )


def _rollout_fn(action_fn, env, light, seed, rule) -> learners.RolloutResult:
    state, obs = env.reset(seed, light)
    tracker = rule.start_episode() if rule is not None else None
    prev_dist = float(np.linalg.norm(state.agent - state.target))
    takeover = False
    intervened = 0
    while True:
        if takeover:
            action = env.expert_action(state)
            intervened += 1
        else:
            action = action_fn(state, obs)
        state, obs, _, done = env.step(state, action, light)
        if done:
            return learners.RolloutResult(True, state.step, intervened)
        if state.step >= env.config.max_steps:
            return learners.RolloutResult(False, state.step, intervened)
        dist = float(np.linalg.norm(state.agent - state.target))
        if tracker is not None and not takeover:
            takeover = tracker.update(dist, prev_dist)
        prev_dist = dist


# ---------------------------------------------------------------------------
# Report rows and emission
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    variant: str
    alpha: float | None
    anchor_head: str | None
    seed: int
    shift_pct: int
    episodes: int
    success_rate: float
    mean_success_steps: float | None
    intervention_rate: float | None
    finetune_step: int

    def key(self):
        return (self.variant, -1.0 if self.alpha is None else self.alpha,
                self.anchor_head or "", self.seed, self.shift_pct, self.finetune_step)


def _cell_str(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in sorted(rows, key=ReportRow.key):
        writer.writerow([_cell_str(getattr(row, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected report columns {header}")
    out = []
    for rec in reader:
        d = dict(zip(CSV_COLUMNS, rec))
        out.append(ReportRow(
            variant=d["variant"],
            alpha=float(d["alpha"]) if d["alpha"] else None,
            anchor_head=d["anchor_head"] or None,
            seed=int(d["seed"]),
            shift_pct=int(d["shift_pct"]),
            episodes=int(d["episodes"]),
            success_rate=float(d["success_rate"]),
            mean_success_steps=(float(d["mean_success_steps"])
                                if d["mean_success_steps"] else None),
            intervention_rate=(float(d["intervention_rate"])
                               if d["intervention_rate"] else None),
            finetune_step=int(d["finetune_step"]),
        ))
    return out


def emit_report(rows: list[ReportRow], csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(rows_to_csv(rows))
    if json_path is None:
        json_path = csv_path.with_suffix(".json")
    payload = [{col: getattr(row, col) for col in CSV_COLUMNS}
               for row in sorted(rows, key=ReportRow.key)]
    Path(json_path).write_text(json.dumps(payload, indent=1))


def rows_from_json(path) -> list[ReportRow]:
    data = json.loads(Path(path).read_text())
    return [ReportRow(**{k: rec[k] for k in CSV_COLUMNS}) for rec in data]


# ---------------------------------------------------------------------------
# Experiment plans and the on-disk cell cache
# ---------------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    workdir: Path
    config: dict = field(default_factory=cfgmod.default_config)
    seeds: tuple = (0, 1, 2, 3, 4)
    alphas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    shifts: tuple = (0.0, 0.6)
    eval_episodes: int = 100
    curve_eval_episodes: int = 30
    snapshot_every: int = 1000
    source_budget: int | None = None  # None: LearnerConfig default
    finetune_steps: int | None = None
    max_workers: int | None = None

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be a nonempty list of distinct values")

    def learner_cfg(self, **overrides) -> learners.LearnerConfig:
        if self.source_budget is not None:
            overrides.setdefault("source_budget", self.source_budget)
        if self.finetune_steps is not None:
            overrides.setdefault("finetune_steps", self.finetune_steps)
        return cfgmod.learner_config(self.config, **overrides)

    def workers(self) -> int:
        if self.max_workers is not None:
            return self.max_workers
        env = os.environ.get("RELIGHTLAB_WORKERS")
        return int(env) if env else max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class FinetuneCell:
    """One independent fine-tune + evaluation unit of an experiment grid."""

    variant: str
    seed: int
    alpha: float
    anchor_head: str
    lambda_feat: float
    with_curve: bool = False

    def tag(self, plan: ExperimentPlan) -> str:
        cfg = plan.learner_cfg()
        return (f"seed{self.seed}_a{self.alpha:g}_h{self.anchor_head}"
                f"_lf{self.lambda_feat:g}_T{cfg.finetune_steps}")


def _source_dir(plan: ExperimentPlan, seed: int) -> Path:
    return plan.workdir / f"source_seed{seed}"


def _worker_init():
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass


def _run_parallel(fn, args_list, max_workers: int):
    if max_workers <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(max_workers, len(args_list)),
                             mp_context=ctx, initializer=_worker_init) as pool:
        futures = [pool.submit(fn, *args) for args in args_list]
        return [f.result() for f in futures]


def ensure_source(plan: ExperimentPlan, seed: int):
    """Train-or-load the source agent and its recorded datasets for one seed."""
    d = _source_dir(plan, seed)
    ckpt, rl_path, demo_path = d / "agent.rohc", d / "rl.rohl", d / "demo.rohl"
    rows_path = d / "source_rows.json"
    if not (ckpt.exists() and rl_path.exists() and demo_path.exists()
            and rows_path.exists()):
        d.mkdir(parents=True, exist_ok=True)
        cfg = plan.learner_cfg()
        env = LitWorld(cfgmod.env_config(plan.config))
        light = cfgmod.light_config(plan.config, "light.source")
        result = learners.train_source(env, cfg, seed, light)
        learners.save_agent(ckpt, result.agent, step_count=result.best_step,
                            config_hash=cfgmod.config_hash(plan.config))
        ds.write_dataset(result.rl_dataset, rl_path)
        ds.write_dataset(result.demo_dataset, demo_path)
        rows = [_report_row("source", None, None, seed, rep, finetune_step=0)
                for rep in (evaluate(result.agent.params, s, plan.eval_episodes,
                                     seed, plan.config) for s in plan.shifts)]
        emit_report(rows, d / "source_rows.csv", rows_path)
    agent, _ = learners.load_agent(ckpt)
    return agent, rl_path, demo_path, rows_from_json(rows_path)


def ensure_sources(plan: ExperimentPlan) -> list[ReportRow]:
    """Phase 1: all source seeds (parallel); returns their evaluation rows."""
    _run_parallel(_source_cell, [(plan, s) for s in plan.seeds], plan.workers())
    rows: list[ReportRow] = []
    for seed in plan.seeds:
        rows.extend(ensure_source(plan, seed)[3])
    return rows


def _source_cell(plan: ExperimentPlan, seed: int) -> None:
    ensure_source(plan, seed)


def build_finetune_pools(plan: ExperimentPlan, rl_path, demo_path) -> PoolSet:
    """Source datasets plus their procedural relightings, routed by provenance."""
    relights = cfgmod.relight_set(plan.config)
    rl = ds.read_dataset(rl_path)
    demo = ds.read_dataset(demo_path)
    pools = PoolSet()
    for tr in rl.transitions:
        pools.insert_rl(tr)
    for tr in relight_stream(rl, relights):
        pools.insert_rl(tr)
    for tr in demo.transitions:
        pools.insert_demo(tr)
    for tr in relight_stream(demo, relights):
        pools.insert_demo(tr)
    return pools


def relight_stream(dataset: ds.TrajectoryDataset, relights):
    return ds.relight_dataset(dataset, relights).transitions


def run_finetune_cell(plan: ExperimentPlan, cell: FinetuneCell) -> list[ReportRow]:
    """Fine-tune one (variant, seed) cell and evaluate it; cached on disk."""
    tag = cell.tag(plan)
    d = plan.workdir / f"ft_{tag}"
    rows_path = d / "rows.json"
    meta_path = d / "meta.json"
    if rows_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("has_curve", False) or not cell.with_curve:
            rows = rows_from_json(rows_path)
            return [replace(r, variant=cell.variant) for r in rows]
    d.mkdir(parents=True, exist_ok=True)
    agent, rl_path, demo_path, _ = ensure_source(plan, cell.seed)
    pools = build_finetune_pools(plan, rl_path, demo_path)
    cfg = plan.learner_cfg(alpha=cell.alpha, anchor_head=cell.anchor_head,
                           lambda_feat=cell.lambda_feat)
    snap = plan.snapshot_every if cell.with_curve else 0
    result = learners.finetune(agent, pools, cfg, seed=cell.seed, snapshot_every=snap)
    learners.save_agent(d / "agent.rohc", result.agent,
                        step_count=cfg.finetune_steps,
                        config_hash=cfgmod.config_hash(plan.config))

    rows: list[ReportRow] = []
    points = result.snapshots if cell.with_curve else [(cfg.finetune_steps, result.agent)]
    for step, params_at in points:
        terminal = step == cfg.finetune_steps
        n_eval = plan.eval_episodes if terminal else plan.curve_eval_episodes
        for s in plan.shifts:
            rep = evaluate(params_at.params, s, n_eval, cell.seed, plan.config)
            rows.append(_report_row(cell.variant, cell.alpha, cell.anchor_head,
                                    cell.seed, rep, finetune_step=step))
    emit_report(rows, d / "rows.csv", rows_path)
    meta_path.write_text(json.dumps({"has_curve": cell.with_curve,
                                     "metrics_head": result.metrics_head,
                                     "frozen_checksum": result.frozen_checksum}))
    return rows


def _report_row(variant, alpha, head, seed, rep: EvalReport, finetune_step: int) -> ReportRow:
    return ReportRow(variant=variant, alpha=alpha, anchor_head=head, seed=seed,
                     shift_pct=int(round(rep.shift * 100)), episodes=rep.episodes,
                     success_rate=rep.success_rate,
                     mean_success_steps=rep.mean_success_steps,
                     intervention_rate=rep.intervention_rate,
                     finetune_step=finetune_step)


def run_cells(plan: ExperimentPlan, cells: list[FinetuneCell]) -> list[ReportRow]:
    ensure_sources(plan)
    results = _run_parallel(run_finetune_cell, [(plan, c) for c in cells],
                            plan.workers())
    rows: list[ReportRow] = []
    for r in results:
        rows.extend(r)
    return rows


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def variant_grid_2x2(plan: ExperimentPlan) -> dict[str, FinetuneCell]:
    """Retention-replay x anchored-objective grid; 'off' on the replay axis is
    alpha=0, 'off' on the objective axis disables both anchor terms."""
    base = plan.learner_cfg()
    return {
        "Final-A": FinetuneCell("Final-A", 0, 0.0, "none", 0.0),
        "Final-B": FinetuneCell("Final-B", 0, 0.0, base.anchor_head, base.lambda_feat),
        "Final-C": FinetuneCell("Final-C", 0, base.alpha, "none", 0.0),
        "Final-D": FinetuneCell("Final-D", 0, base.alpha, base.anchor_head,
                                base.lambda_feat),
    }


def run_2x2_ablation(plan: ExperimentPlan, out_csv=None) -> list[ReportRow]:
    grid = variant_grid_2x2(plan)
    cells = [replace(cell, seed=seed) for cell in grid.values() for seed in plan.seeds]
    rows = run_cells(plan, cells)
    rows = [r for r in rows if r.finetune_step == plan.learner_cfg().finetune_steps]
    if out_csv is not None:
        emit_report(rows, out_csv)
    return rows


def run_alpha_sweep(plan: ExperimentPlan, out_csv=None) -> list[ReportRow]:
    """Anchored fine-tunes across the retention-coefficient grid."""
    base = plan.learner_cfg()
    cells = [FinetuneCell(f"alpha{alpha:.2f}", seed, alpha, base.anchor_head,
                          base.lambda_feat)
             for alpha in plan.alphas for seed in plan.seeds]
    rows = run_cells(plan, cells)
    rows = [r for r in rows if r.finetune_step == base.finetune_steps]
    if out_csv is not None:
        emit_report(rows, out_csv)
    return rows


def run_anchor_head_compare(plan: ExperimentPlan, out_csv=None) -> list[ReportRow]:
    base = plan.learner_cfg()
    cells = [FinetuneCell(f"head-{head}", seed, base.alpha, head, base.lambda_feat)
             for head in ("mse", "kl") for seed in plan.seeds]
    rows = run_cells(plan, cells)
    rows = [r for r in rows if r.finetune_step == base.finetune_steps]
    if out_csv is not None:
        emit_report(rows, out_csv)
    return rows


def run_iteration_sweep(plan: ExperimentPlan, out_csv=None) -> list[ReportRow]:
    """Per-checkpoint curves for the anchored objective vs the plain objective."""
    base = plan.learner_cfg()
    cells = [FinetuneCell("anchored", seed, base.alpha, base.anchor_head,
                          base.lambda_feat, with_curve=True)
             for seed in plan.seeds]
    cells += [FinetuneCell("unanchored", seed, base.alpha, "none", 0.0,
                           with_curve=True)
              for seed in plan.seeds]
    rows = run_cells(plan, cells)
    if out_csv is not None:
        emit_report(rows, out_csv)
    return rows
