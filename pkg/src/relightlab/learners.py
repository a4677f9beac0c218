"""Training procedures: online source training and the anchored offline fine-tune.

Source training is soft actor-critic with 50/50 symmetric replay and scripted
expert interventions streamed into both the RL and demo pools; anchors are
disabled. The offline fine-tune runs the stratified retention sampler and adds
two frozen-reference anchors on the demo half of each batch: a feature anchor
inside the critic loss and a pre-tanh action-mean (or diagonal-Gaussian KL)
anchor inside the actor loss, both decayed by a linear schedule.

The Bellman target is computed outside the tape and enters the critic graph
as a constant, which is exactly its stop-gradient semantics: no gradient can
flow into the target critics or the next-action sampling path. Update order
per step is critic -> actor -> Polyak, with the actor loss evaluated at the
post-update critic and encoder parameters. The actor consumes the encoder
feature as a constant (stop-gradient); only critic gradients move the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datasets as ds
from . import nets
from . import numerics as nm
from .litworld import LitWorld, IlluminationConfig
from .replay import IrrSampler, Minibatch, PoolSet, RlpdSampler

ANCHOR_HEADS = ("mse", "kl", "none")


@dataclass
class LearnerConfig:
    gamma: float = 0.97
    eta: float = 0.05  # entropy temperature, fixed
    tau: float = 0.005
    batch: int = 256
    lr: float = 3e-4
    lambda_feat: float = 0.2
    beta_mse: float = 0.1
    rho_end: float = 0.33
    finetune_steps: int = 15_000
    anchor_head: str = "mse"
    alpha: float = 0.75  # retention coefficient for the stratified sampler
    source_budget: int = 30_000
    demo_episodes: int = 20
    eval_every: int = 2_500
    eval_episodes: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0,1], got {self.tau}")
        if self.lambda_feat < 0.0 or self.beta_mse < 0.0:
            raise ValueError("anchor weights must be nonnegative")
        if self.anchor_head not in ANCHOR_HEADS:
            raise ValueError(f"anchor_head must be one of {ANCHOR_HEADS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")

    def anchors_enabled(self) -> bool:
        return self.lambda_feat > 0.0 or self.anchor_head != "none"


@dataclass
class InterventionRule:
    """Deterministic stand-in for operator judgment: takeover on a stall."""

    stall_window: int = 10

    def start_episode(self):
        return _StallTracker(self.stall_window)


class _StallTracker:
    def __init__(self, window: int):
        self.window = window
        self.count = 0

    def update(self, dist: float, prev_dist: float) -> bool:
        self.count = self.count + 1 if dist >= prev_dist else 0
        return self.count >= self.window


def rho(t: int, horizon: int, rho_end: float = 0.33) -> float:
    """Linear anchor-weight decay from 1 at t=0 to rho_end at t=horizon."""
    if t < 0 or t > horizon:
        raise ValueError(f"step {t} outside [0, {horizon}]")
    if horizon == 0:
        return 1.0
    return 1.0 - (1.0 - rho_end) * t / horizon


# ---------------------------------------------------------------------------
# Batch preparation and Bellman target
# ---------------------------------------------------------------------------

def _target_view(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k.removeprefix("t"): v for k, v in params.items() if k.startswith("tq")}


def bellman_target(mb: Minibatch, params: dict[str, np.ndarray], cfg: LearnerConfig,
                   noise_next: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Soft twin-target y = r + gamma*(1-d)*(min_i Qbar_i(s',a') - eta*log pi(a'|s')).

    a' is the reparameterized squashed sample under ``noise_next``. The result
    is consumed as a constant (stop-gradient) by the critic loss.
    """
    dtype = np.dtype(dtype).type
    next_flat = nets.flatten_obs(mb.next_image, mb.next_proprio, dtype)
    feat = nets.encode(params, next_flat)
    mu, log_sigma = nets.actor_heads(params, feat)
    a, log_pi = nets.sample_squashed(mu, log_sigma, noise_next.astype(dtype, copy=False))
    tq1, tq2 = nets.q_values(_target_view(params), feat, a)
    soft = np.minimum(tq1, tq2) - dtype(cfg.eta) * log_pi
    return (mb.reward.astype(dtype) +
            dtype(cfg.gamma) * (1.0 - mb.done.astype(dtype)) * soft)


@dataclass
class PreparedBatch:
    """Numpy-side inputs for one learner step's loss graphs."""

    obs_flat: np.ndarray
    action: np.ndarray
    y: np.ndarray
    noise: np.ndarray
    n_anchor: int
    anchor_mask: np.ndarray | None = None  # (B,), 1.0 on anchor rows
    anchor_feat0: np.ndarray | None = None  # (B, 64) frozen-encoder features
    anchor_mu0: np.ndarray | None = None  # (B, 2) frozen pre-tanh means
    anchor_log_sigma0: np.ndarray | None = None  # (B, 2)


def prepare_batch(mb: Minibatch, params: dict[str, np.ndarray], cfg: LearnerConfig,
                  rng: np.random.Generator, frozen: nets.FrozenAnchor | None,
                  dtype=np.float32) -> PreparedBatch:
    b = mb.size
    noise_next = rng.standard_normal((b, nets.ACTION_DIM)).astype(dtype)
    noise_cur = rng.standard_normal((b, nets.ACTION_DIM)).astype(dtype)
    y = bellman_target(mb, params, cfg, noise_next, dtype)
    prep = PreparedBatch(
        obs_flat=nets.flatten_obs(mb.image, mb.proprio, dtype),
        action=mb.action.astype(dtype, copy=False),
        y=y,
        noise=noise_cur,
        n_anchor=mb.n_anchor,
    )
    if frozen is not None and mb.n_anchor > 0:
        # Frozen outputs are computed on the full batch matrix so the live and
        # frozen paths share identical GEMM shapes: at theta == theta_0 the
        # anchor residuals cancel exactly. Non-anchor rows are masked out.
        mask = np.zeros(b, dtype=dtype)
        mask[mb.n_rl:] = 1.0
        feat0 = nets.encode(frozen.params, prep.obs_flat)
        mu0, ls0 = nets.actor_heads(frozen.params, feat0)
        prep.anchor_mask = mask
        prep.anchor_feat0 = feat0
        prep.anchor_mu0 = mu0
        prep.anchor_log_sigma0 = ls0
    return prep


# ---------------------------------------------------------------------------
# Loss graphs
# ---------------------------------------------------------------------------

@dataclass
class LossGraph:
    tape: nm.Tape
    loss: nm.Node
    leaves: dict[str, nm.Node]
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.loss.value)


def _masked_mean_rows(tape, per_row: nm.Node, mask: np.ndarray, n: int, coeff: float,
                      dtype) -> nm.Node:
    mask_c = tape.constant(mask, dtype=dtype)
    return nm.scale(nm.sum_all(nm.mul(per_row, mask_c)), coeff / n)


def critic_loss(prep: PreparedBatch, params: dict[str, np.ndarray], cfg: LearnerConfig,
                rho_t: float = 1.0) -> LossGraph:
    """Bellman loss over the full batch plus the decayed feature anchor over
    the anchor sub-batch; differentiable w.r.t. encoder and both critics."""
    dtype = params["enc.w1"].dtype.type
    tape = nm.Tape()
    keys = nets.ENCODER_KEYS + nets.CRITIC1_KEYS + nets.CRITIC2_KEYS
    p = nets.lift(tape, params, keys, requires_grad=True)
    obs = tape.constant(prep.obs_flat, dtype=dtype)
    act = tape.constant(prep.action, dtype=dtype)
    y = tape.constant(prep.y, dtype=dtype)  # precomputed target: stop-gradient semantics

    feature = nets.encode_t(p, obs)
    joined = nm.concat(feature, act)
    q1 = nets.q_value_t(p, "q1", feature, act, joined)
    q2 = nets.q_value_t(p, "q2", feature, act, joined)
    bellman = nm.mean_all(nm.add(nm.square(nm.sub(q1, y)), nm.square(nm.sub(q2, y))))

    loss = bellman
    terms = {"bellman": float(bellman.value), "feat_anchor": 0.0}
    if cfg.lambda_feat > 0.0 and prep.anchor_mask is not None:
        feat0 = tape.constant(prep.anchor_feat0, dtype=dtype)
        sq = nm.sum_rows(nm.square(nm.sub(feature, feat0)))
        lfeat = _masked_mean_rows(tape, sq, prep.anchor_mask, prep.n_anchor,
                                  cfg.lambda_feat * rho_t, dtype)
        terms["feat_anchor"] = float(lfeat.value)
        loss = nm.add(loss, lfeat)
    return LossGraph(tape, loss, p, terms)


def actor_loss(prep: PreparedBatch, params: dict[str, np.ndarray], cfg: LearnerConfig,
               rho_t: float = 1.0) -> LossGraph:
    """Entropy-regularized policy loss against min of the twin critics, plus the
    decayed pre-tanh anchor head; differentiable w.r.t. actor parameters only.

    The encoder feature enters as a constant (stop-gradient into the encoder)
    and the critic weights are consumed read-only.
    """
    dtype = params["enc.w1"].dtype.type
    tape = nm.Tape()
    p = nets.lift(tape, params, nets.ACTOR_KEYS, requires_grad=True)
    p.update(nets.lift(tape, params, nets.CRITIC1_KEYS + nets.CRITIC2_KEYS,
                       requires_grad=False))
    feature_np = nets.encode(params, prep.obs_flat)
    feature = tape.constant(feature_np, dtype=dtype)

    mu, log_sigma = nets.actor_heads_t(p, feature)
    a, log_pi = nets.sample_squashed_t(tape, mu, log_sigma, prep.noise)
    joined = nm.concat(feature, a)
    q1 = nets.q_value_t(p, "q1", feature, a, joined)
    q2 = nets.q_value_t(p, "q2", feature, a, joined)
    sac = nm.mean_all(nm.sub(nm.scale(log_pi, cfg.eta), nm.minimum(q1, q2)))

    loss = sac
    terms = {"sac": float(sac.value), "actor_anchor": 0.0}
    if cfg.anchor_head != "none" and prep.anchor_mask is not None:
        if cfg.anchor_head == "mse":
            mu0 = tape.constant(prep.anchor_mu0, dtype=dtype)
            per_row = nm.sum_rows(nm.square(nm.sub(mu, mu0)))
        else:  # kl: constrains mean and variance of the pre-tanh Gaussian
            mu0 = tape.constant(prep.anchor_mu0, dtype=dtype)
            ls0 = tape.constant(prep.anchor_log_sigma0, dtype=dtype)
            per_row = nets.kl_diag_gauss_t(tape, mu0, ls0, mu, log_sigma)
        anchor = _masked_mean_rows(tape, per_row, prep.anchor_mask, prep.n_anchor,
                                   cfg.beta_mse * rho_t, dtype)
        terms["actor_anchor"] = float(anchor.value)
        loss = nm.add(loss, anchor)
    return LossGraph(tape, loss, p, terms)


# ---------------------------------------------------------------------------
# One learner step
# ---------------------------------------------------------------------------

class GroupOptimizer:
    """Adam over one network group, fused into a single flat buffer.

    The group's parameter arrays are replaced in-place by views into the flat
    buffer, so one Adam update (via the standard adam_step) moves them all.
    """

    def __init__(self, params: dict[str, np.ndarray], keys, lr: float):
        self.keys = tuple(keys)
        total = sum(params[k].size for k in self.keys)
        dtype = params[self.keys[0]].dtype
        self.flat = np.empty(total, dtype=dtype)
        self._slices = {}
        off = 0
        for k in self.keys:
            arr = params[k]
            end = off + arr.size
            self.flat[off:end] = arr.ravel()
            params[k] = self.flat[off:end].reshape(arr.shape)
            self._slices[k] = (off, end)
            off = end
        self.grad_buf = np.empty(total, dtype=dtype)
        self.state = nm.AdamState(lr=lr)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k in self.keys:
            off, end = self._slices[k]
            g = grads[k]
            if not np.all(np.isfinite(g)):
                raise nm.NonFiniteError(f"non-finite gradient for parameter {k!r}")
            self.grad_buf[off:end] = g.ravel()
        nm.adam_step({"flat": self.flat}, {"flat": self.grad_buf}, self.state)


@dataclass
class Optimizers:
    critic: GroupOptimizer
    actor: GroupOptimizer

    @classmethod
    def bind(cls, agent: nets.AgentParams, lr: float) -> "Optimizers":
        critic_keys = nets.ENCODER_KEYS + nets.CRITIC1_KEYS + nets.CRITIC2_KEYS
        return cls(critic=GroupOptimizer(agent.params, critic_keys, lr),
                   actor=GroupOptimizer(agent.params, nets.ACTOR_KEYS, lr))


def _grads_by_name(graph: LossGraph) -> dict[str, np.ndarray]:
    seed = np.ones((), dtype=graph.loss.value.dtype)
    node_grads = nm.backward(graph.tape, {graph.loss: seed})
    return {name: node_grads[node] for name, node in graph.leaves.items()
            if node.needs_grad}


def learner_step(agent: nets.AgentParams, opt: Optimizers, sampler, cfg: LearnerConfig,
                 rng: np.random.Generator, rho_t: float = 0.0,
                 frozen: nets.FrozenAnchor | None = None) -> dict[str, float]:
    """Sample a batch, update critic then actor, then Polyak the targets."""
    mb = sampler.sample()
    params = agent.params
    prep = prepare_batch(mb, params, cfg, rng, frozen, dtype=agent.dtype)

    cgraph = critic_loss(prep, params, cfg, rho_t)
    opt.critic.step(_grads_by_name(cgraph))

    agraph = actor_loss(prep, params, cfg, rho_t)
    opt.actor.step(_grads_by_name(agraph))

    targets = {k: params[k] for k in nets.TARGET1_KEYS + nets.TARGET2_KEYS}
    nets.polyak_update(targets, params, cfg.tau)
    return {**cgraph.terms, **agraph.terms}


# ---------------------------------------------------------------------------
# Rollouts and evaluation primitives
# ---------------------------------------------------------------------------

@dataclass
class RolloutResult:
    success: bool
    steps: int
    intervened_steps: int


def rollout_policy(params: dict[str, np.ndarray], env: LitWorld,
                   light: IlluminationConfig, seed: int,
                   intervention: InterventionRule | None = None) -> RolloutResult:
    """One deterministic-policy episode (action = tanh(mu)); optional oracle takeover."""
    state, obs = env.reset(seed, light)
    tracker = intervention.start_episode() if intervention is not None else None
    prev_dist = float(np.linalg.norm(state.agent - state.target))
    takeover = False
    intervened = 0
    while True:
        if takeover:
            action = env.expert_action(state)
            intervened += 1
        else:
            flat = nets.flatten_obs(obs.image[None], obs.proprio[None], np.float32)
            action = nets.policy_action(params, flat)[0]
        state, obs, _, done = env.step(state, action, light)
        if done:
            return RolloutResult(True, state.step, intervened)
        if state.step >= env.config.max_steps:
            return RolloutResult(False, state.step, intervened)
        dist = float(np.linalg.norm(state.agent - state.target))
        if tracker is not None and not takeover:
            takeover = tracker.update(dist, prev_dist)
        prev_dist = dist


def success_rate(params: dict[str, np.ndarray], env: LitWorld, light: IlluminationConfig,
                 episodes: int, seed: int) -> float:
    ss = np.random.SeedSequence(seed)
    wins = 0
    for child in ss.spawn(episodes):
        ep_seed = int(child.generate_state(1)[0])
        wins += rollout_policy(params, env, light, ep_seed).success
    return wins / episodes


# ---------------------------------------------------------------------------
# Stage 0: online source training (SAC + symmetric replay + interventions)
# ---------------------------------------------------------------------------

@dataclass
class SourceResult:
    agent: nets.AgentParams  # best checkpoint by periodic source-light eval
    final_agent: nets.AgentParams
    pools: PoolSet
    rl_dataset: ds.TrajectoryDataset
    demo_dataset: ds.TrajectoryDataset
    eval_history: list[tuple[int, float]]
    best_step: int


def train_source(env: LitWorld, cfg: LearnerConfig, seed: int,
                 light: IlluminationConfig, budget: int | None = None,
                 intervention: InterventionRule | None = None) -> SourceResult:
    """Online SAC with symmetric replay; expert takeover on stalls is streamed
    into both the RL pool and the demo pool. Returns the best checkpoint by
    periodic source-light evaluation (ties resolved to the earlier step)."""
    budget = cfg.source_budget if budget is None else budget
    if intervention is None:
        intervention = InterventionRule()
    ss = np.random.SeedSequence(seed)
    init_ss, demo_ss, ep_ss, noise_ss, eval_ss = ss.spawn(5)

    agent = nets.init_agent(int(init_ss.generate_state(1)[0]))
    opt = Optimizers.bind(agent, cfg.lr)
    pools = PoolSet()
    rl_transitions: list[ds.Transition] = []
    demo_transitions: list[ds.Transition] = []

    expert_fn = lambda state, obs, rng: env.expert_action(state)  # noqa: E731
    for ep, child in enumerate(demo_ss.spawn(cfg.demo_episodes)):
        transitions = ds.record_episode(
            expert_fn, env, light, int(child.generate_state(1)[0]), episode_id=ep,
            action_source=ds.EXPERT)
        for tr in transitions:
            pools.insert(tr)
            demo_transitions.append(tr)

    sampler = RlpdSampler(pools, cfg.batch, seed=int(noise_ss.generate_state(1)[0]))
    noise_rng = np.random.default_rng(noise_ss.spawn(1)[0])
    eval_rng_base = int(eval_ss.generate_state(1)[0])

    best = agent.copy()
    best_sr = -1.0
    best_step = 0
    history: list[tuple[int, float]] = []

    def maybe_eval(step: int) -> None:
        nonlocal best, best_sr, best_step
        sr = success_rate(agent.params, env, light, cfg.eval_episodes,
                          seed=eval_rng_base + step)
        history.append((step, sr))
        if sr > best_sr:
            best, best_sr, best_step = agent.copy(), sr, step

    env_steps = 0
    ep_id = cfg.demo_episodes
    ep_seeds = ep_ss.spawn(max(1, -(-budget // 2)))  # enough episode seeds
    ep_iter = iter(ep_seeds)
    while env_steps < budget:
        ep_seed = int(next(ep_iter).generate_state(1)[0])
        ep_child = np.random.SeedSequence(ep_seed)
        state, obs = env.reset(int(ep_child.generate_state(1)[0]), light)
        tracker = intervention.start_episode()
        prev_dist = float(np.linalg.norm(state.agent - state.target))
        takeover = False
        while env_steps < budget:
            if takeover:
                action, src = env.expert_action(state), ds.EXPERT
            else:
                flat = nets.flatten_obs(obs.image[None], obs.proprio[None], np.float32)
                noise = noise_rng.standard_normal((1, nets.ACTION_DIM)).astype(np.float32)
                action, src = nets.policy_action(agent.params, flat, noise)[0], ds.POLICY
            next_state, next_obs, reward, done = env.step(state, action, light)
            tr = ds.Transition(
                episode=ep_id, step=state.step, light_tag=ds.LIGHT_SOURCE,
                action_source=src, state=state, obs=obs,
                action=np.asarray(action, dtype=np.float32), reward=reward,
                next_state=next_state, next_obs=next_obs, done=done)
            pools.insert_stream(tr)
            rl_transitions.append(tr)
            if src == ds.EXPERT:
                demo_transitions.append(tr)

            learner_step(agent, opt, sampler, cfg, noise_rng)
            env_steps += 1
            if env_steps % cfg.eval_every == 0:
                maybe_eval(env_steps)
            if done or next_state.step >= env.config.max_steps:
                break
            dist = float(np.linalg.norm(next_state.agent - next_state.target))
            if not takeover:
                takeover = tracker.update(dist, prev_dist)
            prev_dist = dist
            state, obs = next_state, next_obs
        ep_id += 1

    if budget % cfg.eval_every != 0 and budget > 0:
        maybe_eval(env_steps)
    if best_sr < 0.0:  # no eval ever ran (tiny budgets): final agent is the result
        best, best_step = agent.copy(), env_steps

    table = [light]
    return SourceResult(
        agent=best, final_agent=agent, pools=pools,
        rl_dataset=ds.TrajectoryDataset(table, rl_transitions),
        demo_dataset=ds.TrajectoryDataset(table, demo_transitions),
        eval_history=history, best_step=best_step)


# ---------------------------------------------------------------------------
# Stage 2/3: anchored offline fine-tune
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    agent: nets.AgentParams
    frozen_checksum: str
    snapshots: list[tuple[int, nets.AgentParams]]
    metrics_head: dict[str, float]  # loss terms of the first step (step-0 identities)


def finetune(source_agent: nets.AgentParams, pools: PoolSet, cfg: LearnerConfig,
             seed: int, snapshot_every: int = 0) -> FinetuneResult:
    """Run the offline fine-tune for cfg.finetune_steps; no environment access.

    The frozen source copy is checksum-verified every 1000 steps. When
    ``snapshot_every`` is nonzero, parameter snapshots are taken at step 0 and
    every ``snapshot_every`` steps (for iteration-sweep curves).
    """
    frozen = nets.FrozenAnchor(source_agent)
    agent = source_agent.copy()
    opt = Optimizers.bind(agent, cfg.lr)
    ss = np.random.SeedSequence(seed)
    sampler_ss, noise_ss = ss.spawn(2)
    sampler = IrrSampler(pools, cfg.alpha, cfg.batch,
                         seed=int(sampler_ss.generate_state(1)[0]))
    rng = np.random.default_rng(noise_ss)
    anchor_ref = frozen if cfg.anchors_enabled() else None

    snapshots: list[tuple[int, nets.AgentParams]] = []
    if snapshot_every:
        snapshots.append((0, agent.copy()))
    metrics_head: dict[str, float] = {}
    horizon = cfg.finetune_steps
    for t in range(horizon):
        metrics = learner_step(agent, opt, sampler, cfg, rng,
                               rho_t=rho(t, horizon, cfg.rho_end),
                               frozen=anchor_ref)
        if t == 0:
            metrics_head = metrics
        step = t + 1
        if step % 1000 == 0:
            frozen.verify()
        if snapshot_every and step % snapshot_every == 0:
            snapshots.append((step, agent.copy()))
    frozen.verify()
    if snapshot_every and (not snapshots or snapshots[-1][0] != horizon):
        snapshots.append((horizon, agent.copy()))
    return FinetuneResult(agent=agent, frozen_checksum=frozen.checksum,
                          snapshots=snapshots, metrics_head=metrics_head)


# ---------------------------------------------------------------------------
# Agent persistence
# ---------------------------------------------------------------------------

def save_agent(path, agent: nets.AgentParams, step_count: int = 0,
               config_hash: str = "") -> None:
    ds.write_checkpoint(path, agent.params, step_count=step_count,
                        config_hash=config_hash)


def load_agent(path) -> tuple[nets.AgentParams, dict]:
    arrays, meta = ds.read_checkpoint(path, require=nets.ALL_KEYS)
    return nets.AgentParams({k: arrays[k] for k in nets.ALL_KEYS}), meta
