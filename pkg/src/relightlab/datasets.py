"""Trajectory recording, procedural relighting, and bit-exact persistence.

Relighting re-renders observations from the stored ground-truth world states
instead of transforming pixels, so actions, rewards, terminations, and states
stay bit-identical by construction; only image bytes change.

Dataset file layout (all little-endian):
  magic "ROHL", version u32=1, H u16, W u16, C u8, A u8,
  light table: count u8, then 9 fp32 per light
    (ambient, diffuse_strength, diffuse_angle, spec_x, spec_y, spec_strength,
     gain_r, gain_g, gain_b),
  records: episode u32, step u32, light_tag u8, action_source u8,
    state (agent xy + target xy fp32, step u32) twice,
    obs (H*W*C u8 image + 2 fp32 proprio) twice,
    action (A fp32), reward fp32, done u8.

Checkpoint file layout:
  magic "ROHC", version u32=1, entry count u32,
  per entry: name length u16, name bytes, rank u8, extents u32 each, fp32 payload,
  metadata block: step count u64, hash length u16, hash bytes (utf-8).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .litworld import H, W, IlluminationConfig, LitWorld, Observation, WorldState, render

MAGIC_DATASET = b"ROHL"
MAGIC_CHECKPOINT = b"ROHC"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

LIGHT_SOURCE = 0  # tags 1..4 mark relit copies under relight set k
POLICY = 0
EXPERT = 1

_CHANNELS = 3
_ACTION_DIM = 2
_STATE_FMT = "<ffffI"
_RECORD_HEAD_FMT = "<IIBB"


class DatasetError(Exception):
    """Base class for persistence errors."""


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    def __init__(self, what: str):
        super().__init__(f"file truncated: {what}")
        self.what = what


class MissingArrayError(DatasetError):
    def __init__(self, names):
        super().__init__(f"checkpoint missing arrays: {sorted(names)}")
        self.names = tuple(sorted(names))


class RelightError(DatasetError):
    pass


@dataclass
class Transition:
    """One environment step plus everything needed to re-render it."""

    episode: int
    step: int
    light_tag: int  # 0 = as recorded, k in 1..4 = relit under light-table entry k
    action_source: int  # POLICY or EXPERT
    state: WorldState
    obs: Observation
    action: np.ndarray  # (2,) fp32
    reward: float
    next_state: WorldState
    next_obs: Observation
    done: bool


@dataclass
class TrajectoryDataset:
    light_table: list[IlluminationConfig]
    transitions: list[Transition]


def transitions_equal(a: Transition, b: Transition) -> bool:
    return (
        a.episode == b.episode
        and a.step == b.step
        and a.light_tag == b.light_tag
        and a.action_source == b.action_source
        and a.state.step == b.state.step
        and a.next_state.step == b.next_state.step
        and np.array_equal(a.state.agent, b.state.agent)
        and np.array_equal(a.state.target, b.state.target)
        and np.array_equal(a.next_state.agent, b.next_state.agent)
        and np.array_equal(a.next_state.target, b.next_state.target)
        and np.array_equal(a.obs.image, b.obs.image)
        and np.array_equal(a.obs.proprio, b.obs.proprio)
        and np.array_equal(a.next_obs.image, b.next_obs.image)
        and np.array_equal(a.next_obs.proprio, b.next_obs.proprio)
        and np.array_equal(a.action, b.action)
        and np.float32(a.reward) == np.float32(b.reward)
        and a.done == b.done
    )


def datasets_equal(a: TrajectoryDataset, b: TrajectoryDataset) -> bool:
    if len(a.transitions) != len(b.transitions) or len(a.light_table) != len(b.light_table):
        return False
    for la, lb in zip(a.light_table, b.light_table):
        if not np.array_equal(la.as_vector(), lb.as_vector()):
            return False
    return all(transitions_equal(x, y) for x, y in zip(a.transitions, b.transitions))


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------

def record_episode(action_fn, env: LitWorld, light: IlluminationConfig, seed: int,
                   episode_id: int, intervention=None,
                   action_source: int = POLICY) -> list[Transition]:
    """Roll one episode and return its transitions, tagged with provenance.

    ``action_fn(state, obs, rng)`` supplies actions; the scripted expert takes
    over for the rest of the episode once the intervention tracker triggers,
    and its steps are tagged EXPERT regardless of ``action_source``.
    """
    ss = np.random.SeedSequence(seed)
    reset_seed, policy_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    rng = np.random.default_rng(policy_seed)
    state, obs = env.reset(reset_seed, light)
    tracker = intervention.start_episode() if intervention is not None else None
    prev_dist = float(np.linalg.norm(state.agent - state.target))
    takeover = False
    out: list[Transition] = []
    while True:
        if takeover:
            action, src = env.expert_action(state), EXPERT
        else:
            action, src = np.asarray(action_fn(state, obs, rng), dtype=np.float32), action_source
        next_state, next_obs, reward, done = env.step(state, action, light)
        out.append(Transition(
            episode=episode_id, step=state.step, light_tag=LIGHT_SOURCE,
            action_source=src, state=state, obs=obs, action=action,
            reward=reward, next_state=next_state, next_obs=next_obs, done=done,
        ))
        if done or next_state.step >= env.config.max_steps:
            break
        dist = float(np.linalg.norm(next_state.agent - next_state.target))
        if tracker is not None and not takeover:
            takeover = tracker.update(dist, prev_dist)
        prev_dist = dist
        state, obs = next_state, next_obs
    return out


# ---------------------------------------------------------------------------
# Relighting
# ---------------------------------------------------------------------------

def relight_dataset(ds: TrajectoryDataset, lights) -> TrajectoryDataset:
    """Re-render every transition under each relight config (expansion factor 4).

    Output order: per source episode, all relit copies under light 1, then 2,
    and so on; every non-visual field is carried over bit-identical.
    """
    lights = list(lights)
    if len(lights) != 4:
        raise RelightError(f"expected 4 relight configs, got {len(lights)}")
    episodes: list[list[Transition]] = []
    cur_ep = None
    for tr in ds.transitions:
        if tr.state is None or tr.next_state is None:
            raise RelightError("transition lacks ground-truth world state; cannot relight")
        if cur_ep != tr.episode:
            episodes.append([])
            cur_ep = tr.episode
        episodes[-1].append(tr)

    out: list[Transition] = []
    for ep in episodes:
        for k, light in enumerate(lights, start=1):
            # Within an episode next_state of record i is state of record i+1:
            # render each distinct state once.
            imgs = [render(ep[0].state, light)]
            for tr in ep:
                imgs.append(render(tr.next_state, light))
            for i, tr in enumerate(ep):
                out.append(Transition(
                    episode=tr.episode, step=tr.step, light_tag=k,
                    action_source=tr.action_source, state=tr.state,
                    obs=Observation(imgs[i], tr.obs.proprio),
                    action=tr.action, reward=tr.reward, next_state=tr.next_state,
                    next_obs=Observation(imgs[i + 1], tr.next_obs.proprio),
                    done=tr.done,
                ))
    table = [ds.light_table[0]] + lights
    return TrajectoryDataset(light_table=table, transitions=out)


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

def _pack_state(buf: bytearray, st: WorldState) -> None:
    buf += struct.pack(_STATE_FMT, float(st.agent[0]), float(st.agent[1]),
                       float(st.target[0]), float(st.target[1]), st.step)


def _pack_obs(buf: bytearray, obs: Observation) -> None:
    buf += obs.image.tobytes()
    buf += obs.proprio.astype("<f4").tobytes()


def dataset_bytes(ds: TrajectoryDataset) -> bytes:
    buf = bytearray()
    buf += MAGIC_DATASET
    buf += struct.pack("<IHHBB", DATASET_VERSION, H, W, _CHANNELS, _ACTION_DIM)
    buf += struct.pack("<B", len(ds.light_table))
    for light in ds.light_table:
        buf += light.as_vector().astype("<f4").tobytes()
    for tr in ds.transitions:
        buf += struct.pack(_RECORD_HEAD_FMT, tr.episode, tr.step,
                           tr.light_tag, tr.action_source)
        _pack_state(buf, tr.state)
        _pack_state(buf, tr.next_state)
        _pack_obs(buf, tr.obs)
        _pack_obs(buf, tr.next_obs)
        buf += tr.action.astype("<f4").tobytes()
        buf += struct.pack("<fB", float(np.float32(tr.reward)), int(tr.done))
    return bytes(buf)


def write_dataset(ds: TrajectoryDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(dataset_bytes(ds))


class _Cursor:
    def __init__(self, buf: bytes, what_prefix: str):
        self.buf = buf
        self.off = 0
        self.prefix = what_prefix

    def take(self, n: int, what: str) -> memoryview:
        if self.off + n > len(self.buf):
            raise TruncatedFileError(f"{self.prefix}{what}")
        mv = memoryview(self.buf)[self.off:self.off + n]
        self.off += n
        return mv

    def unpack(self, fmt: str, what: str):
        n = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(n, what))

    def done(self) -> bool:
        return self.off >= len(self.buf)


def _read_state(cur: _Cursor, what: str) -> WorldState:
    ax, ay, tx, ty, step = cur.unpack(_STATE_FMT, what)
    return WorldState(np.array([ax, ay], dtype=np.float32),
                      np.array([tx, ty], dtype=np.float32), step)


def _read_obs(cur: _Cursor, what: str) -> Observation:
    img = np.frombuffer(cur.take(H * W * _CHANNELS, what), dtype=np.uint8)
    img = img.reshape(H, W, _CHANNELS).copy()
    pro = np.frombuffer(cur.take(2 * 4, what), dtype="<f4").astype(np.float32)
    return Observation(img, pro)


def read_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf, "")
    magic = bytes(cur.take(4, "magic"))
    if magic != MAGIC_DATASET:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC_DATASET!r}")
    version, h, w, c, a = cur.unpack("<IHHBB", "header")
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    if (h, w, c, a) != (H, W, _CHANNELS, _ACTION_DIM):
        raise DatasetError(f"unsupported dataset geometry {(h, w, c, a)}")
    (n_lights,) = cur.unpack("<B", "light table")
    table = []
    for _ in range(n_lights):
        vec = np.frombuffer(cur.take(9 * 4, "light table"), dtype="<f4")
        table.append(IlluminationConfig.from_vector(vec))
    transitions = []
    idx = 0
    while not cur.done():
        what = f"record {idx}"
        episode, step, tag, src = cur.unpack(_RECORD_HEAD_FMT, what)
        state = _read_state(cur, what)
        next_state = _read_state(cur, what)
        obs = _read_obs(cur, what)
        next_obs = _read_obs(cur, what)
        action = np.frombuffer(cur.take(_ACTION_DIM * 4, what), dtype="<f4").astype(np.float32)
        reward, done = cur.unpack("<fB", what)
        transitions.append(Transition(
            episode=episode, step=step, light_tag=tag, action_source=src,
            state=state, obs=obs, action=action, reward=reward,
            next_state=next_state, next_obs=next_obs, done=bool(done),
        ))
        idx += 1
    return TrajectoryDataset(light_table=table, transitions=transitions)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def write_checkpoint(path, arrays: dict[str, np.ndarray], step_count: int = 0,
                     config_hash: str = "") -> None:
    buf = bytearray()
    buf += MAGIC_CHECKPOINT
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name in sorted(arrays):
        arr = arrays[name]
        if arr.dtype != np.float32:
            raise DatasetError(f"checkpoint arrays must be fp32, got {arr.dtype} for {name!r}")
        nb = name.encode()
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", arr.ndim)
        for ext in arr.shape:
            buf += struct.pack("<I", ext)
        buf += np.ascontiguousarray(arr).astype("<f4").tobytes()
    hb = config_hash.encode()
    buf += struct.pack("<QH", step_count, len(hb))
    buf += hb
    with open(path, "wb") as f:
        f.write(bytes(buf))


def read_checkpoint(path, require=None):
    """Load named arrays plus (step_count, config_hash) metadata.

    ``require`` lists array names that must be present; anything missing
    raises MissingArrayError.
    """
    with open(path, "rb") as f:
        buf = f.read()
    cur = _Cursor(buf, "checkpoint ")
    magic = bytes(cur.take(4, "magic"))
    if magic != MAGIC_CHECKPOINT:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC_CHECKPOINT!r}")
    version, count = cur.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        what = f"entry {i}"
        (name_len,) = cur.unpack("<H", what)
        name = bytes(cur.take(name_len, what)).decode()
        (rank,) = cur.unpack("<B", what)
        shape = tuple(cur.unpack("<" + "I" * rank, what)) if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(cur.take(n * 4, what), dtype="<f4").astype(np.float32)
        arrays[name] = data.reshape(shape)
    step_count, hash_len = cur.unpack("<QH", "metadata")
    config_hash = bytes(cur.take(hash_len, "metadata")).decode()
    if require is not None:
        missing = set(require) - set(arrays)
        if missing:
            raise MissingArrayError(missing)
    return arrays, {"step_count": step_count, "config_hash": config_hash}
