"""Transition pools and stratified minibatch samplers.

Four append-only pools hold transitions by provenance: source-light RL stream
(mixed actions), source-light expert demos, relit RL stream, relit demos.
Routing by (light tag x action source) is total and exclusive; the live
source-training stream additionally mirrors expert-tagged steps into the demo
pool, which is why the RL pools hold "mixed" actions.

Two samplers share the 50/50 batch structure: the symmetric sampler draws
half from the RL pool and half from demos; the retention sampler keeps the
50/50 split but fills the RL half with an exact-count mix of original-light
and relit data controlled by the retention coefficient alpha, and flags the
demo half as the anchor sub-batch. Counts are exact per batch (round-half-even
on alpha*B/2), never Bernoulli, so ablations carry no mixing variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .datasets import EXPERT, LIGHT_SOURCE, POLICY, Transition
from .litworld import H, W


class PoolId(Enum):
    RL_SOURCE = "R0_pi"
    DEMO_SOURCE = "D0"
    RL_RELIT = "Rrel_pi"
    DEMO_RELIT = "Drel"


class ReplayError(Exception):
    pass


class EmptyStratumError(ReplayError):
    def __init__(self, stratum: str, requested: int):
        super().__init__(f"stratum {stratum!r} is empty but {requested} draws requested")
        self.stratum = stratum


def route(transition: Transition) -> PoolId:
    """Table lookup: light tag x action source -> pool."""
    relit = transition.light_tag != LIGHT_SOURCE
    expert = transition.action_source == EXPERT
    if relit:
        return PoolId.DEMO_RELIT if expert else PoolId.RL_RELIT
    return PoolId.DEMO_SOURCE if expert else PoolId.RL_SOURCE


class TransitionStore:
    """Columnar store with uniform random access; grows by doubling."""

    def __init__(self, capacity: int = 1024):
        self.size = 0
        self._alloc(capacity)

    def _alloc(self, capacity: int) -> None:
        self.capacity = capacity
        self.image = np.empty((capacity, H, W, 3), dtype=np.uint8)
        self.proprio = np.empty((capacity, 2), dtype=np.float32)
        self.next_image = np.empty((capacity, H, W, 3), dtype=np.uint8)
        self.next_proprio = np.empty((capacity, 2), dtype=np.float32)
        self.action = np.empty((capacity, 2), dtype=np.float32)
        self.reward = np.empty(capacity, dtype=np.float32)
        self.done = np.empty(capacity, dtype=np.float32)
        self.light_tag = np.empty(capacity, dtype=np.uint8)
        self.action_source = np.empty(capacity, dtype=np.uint8)
        self.episode = np.empty(capacity, dtype=np.uint32)

    def _grow(self) -> None:
        old, n = self, self.size
        self._alloc(max(2 * self.capacity, 1024))
        for name in ("image", "proprio", "next_image", "next_proprio", "action",
                     "reward", "done", "light_tag", "action_source", "episode"):
            getattr(self, name)[:n] = getattr(old, name)[:n]
        self.size = n

    def add(self, tr: Transition) -> None:
        if self.size == self.capacity:
            self._grow()
        i = self.size
        self.image[i] = tr.obs.image
        self.proprio[i] = tr.obs.proprio
        self.next_image[i] = tr.next_obs.image
        self.next_proprio[i] = tr.next_obs.proprio
        self.action[i] = tr.action
        self.reward[i] = tr.reward
        self.done[i] = 1.0 if tr.done else 0.0
        self.light_tag[i] = tr.light_tag
        self.action_source[i] = tr.action_source
        self.episode[i] = tr.episode
        self.size = i + 1

    def __len__(self) -> int:
        return self.size


@dataclass
class Minibatch:
    """Gathered batch; rows [0:n_rl] are the RL half, the rest the anchor half."""

    image: np.ndarray
    proprio: np.ndarray
    next_image: np.ndarray
    next_proprio: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    light_tag: np.ndarray
    action_source: np.ndarray
    episode: np.ndarray
    n_rl: int
    anchor_union_idx: np.ndarray  # indices into the D0 ++ Drel union, anchor half only

    @property
    def size(self) -> int:
        return self.reward.shape[0]

    @property
    def n_anchor(self) -> int:
        return self.size - self.n_rl


class PoolSet:
    """The four pools plus ingest helpers that encode provenance."""

    def __init__(self):
        self.pools = {pid: TransitionStore() for pid in PoolId}

    def __getitem__(self, pid: PoolId) -> TransitionStore:
        return self.pools[pid]

    def insert(self, tr: Transition) -> PoolId:
        """Route by tags (Table lookup) and append."""
        pid = route(tr)
        self.pools[pid].add(tr)
        return pid

    def insert_stream(self, tr: Transition) -> None:
        """Live source-training step: into the RL pool always (mixed actions),
        and mirrored into the demo pool when the action came from the expert."""
        self.pools[PoolId.RL_SOURCE].add(tr)
        if tr.action_source == EXPERT:
            self.pools[PoolId.DEMO_SOURCE].add(tr)

    def insert_rl(self, tr: Transition) -> None:
        """RL-stream provenance (source or relit); expert-tagged rows stay here."""
        pid = PoolId.RL_SOURCE if tr.light_tag == LIGHT_SOURCE else PoolId.RL_RELIT
        self.pools[pid].add(tr)

    def insert_demo(self, tr: Transition) -> None:
        if tr.action_source != EXPERT:
            raise ReplayError("policy-tagged transitions never enter demo pools")
        pid = PoolId.DEMO_SOURCE if tr.light_tag == LIGHT_SOURCE else PoolId.DEMO_RELIT
        self.pools[pid].add(tr)

    def counts(self) -> dict[str, int]:
        return {pid.value: len(store) for pid, store in self.pools.items()}


def _gather(stores_and_indices, n_rl: int, anchor_union_idx: np.ndarray) -> Minibatch:
    cols = {name: [] for name in ("image", "proprio", "next_image", "next_proprio",
                                  "action", "reward", "done", "light_tag",
                                  "action_source", "episode")}
    for store, idx in stores_and_indices:
        if idx.size == 0:
            continue
        for name in cols:
            cols[name].append(getattr(store, name)[:store.size][idx])
    cat = {name: np.concatenate(parts, axis=0) for name, parts in cols.items()}
    return Minibatch(n_rl=n_rl, anchor_union_idx=anchor_union_idx, **cat)


def _union_split(idx: np.ndarray, first_len: int):
    """Split union indices into (first-store indices, second-store indices),
    preserving draw order within each store."""
    in_first = idx < first_len
    return idx[in_first], idx[~in_first] - first_len


class RlpdSampler:
    """50/50 symmetric minibatches from (RL pool, demo pool), uniform with replacement."""

    def __init__(self, pools: PoolSet, batch_size: int = 256, seed: int = 0):
        if batch_size % 2 != 0:
            raise ReplayError(f"batch size must be even, got {batch_size}")
        self.pools = pools
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def sample(self) -> Minibatch:
        half = self.batch_size // 2
        rl = self.pools[PoolId.RL_SOURCE]
        demo = self.pools[PoolId.DEMO_SOURCE]
        if len(rl) == 0:
            raise EmptyStratumError(PoolId.RL_SOURCE.value, half)
        if len(demo) == 0:
            raise EmptyStratumError(PoolId.DEMO_SOURCE.value, half)
        rl_idx = self.rng.integers(0, len(rl), size=half)
        demo_idx = self.rng.integers(0, len(demo), size=half)
        return _gather([(rl, rl_idx), (demo, demo_idx)], n_rl=half,
                       anchor_union_idx=demo_idx)


class IrrSampler:
    """Stratified retention sampler.

    RL half: round-half-even(alpha * B/2) rows uniform from the source RL pool,
    the rest uniform over the union (relit RL ++ relit demos). Anchor half:
    B/2 rows uniform over the union (source demos ++ relit demos), flagged as
    the anchor sub-batch. All counts exact on every call.
    """

    def __init__(self, pools: PoolSet, alpha: float = 0.75, batch_size: int = 256,
                 seed: int = 0):
        if not 0.0 <= alpha <= 1.0:
            raise ReplayError(f"alpha must be in [0, 1], got {alpha}")
        if batch_size % 2 != 0:
            raise ReplayError(f"batch size must be even, got {batch_size}")
        self.pools = pools
        self.alpha = alpha
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def strata_counts(self) -> tuple[int, int, int]:
        half = self.batch_size // 2
        n_orig = round(self.alpha * half)
        return n_orig, half - n_orig, half

    def sample(self) -> Minibatch:
        n_orig, n_rel, n_anchor = self.strata_counts()
        r0 = self.pools[PoolId.RL_SOURCE]
        rrel = self.pools[PoolId.RL_RELIT]
        d0 = self.pools[PoolId.DEMO_SOURCE]
        drel = self.pools[PoolId.DEMO_RELIT]
        if n_orig > 0 and len(r0) == 0:
            raise EmptyStratumError(PoolId.RL_SOURCE.value, n_orig)
        rel_union = len(rrel) + len(drel)
        if n_rel > 0 and rel_union == 0:
            raise EmptyStratumError("Rrel_pi+Drel", n_rel)
        anc_union = len(d0) + len(drel)
        if n_anchor > 0 and anc_union == 0:
            raise EmptyStratumError("D0+Drel", n_anchor)

        orig_idx = self.rng.integers(0, len(r0), size=n_orig) if n_orig else np.empty(0, np.int64)
        rel_idx = self.rng.integers(0, rel_union, size=n_rel) if n_rel else np.empty(0, np.int64)
        anc_idx = self.rng.integers(0, anc_union, size=n_anchor)

        rel_rl, rel_demo = _union_split(rel_idx, len(rrel))
        anc_src, anc_rel = _union_split(anc_idx, len(d0))
        batch = _gather(
            [(r0, orig_idx), (rrel, rel_rl), (drel, rel_demo), (d0, anc_src), (drel, anc_rel)],
            n_rl=n_orig + n_rel,
            anchor_union_idx=np.concatenate([anc_src, anc_rel + len(d0)]),
        )
        return batch
