"""Agent parameter containers and forward heads.

One shared visual encoder feeds a squashed diagonal-Gaussian actor and twin
critics with Polyak-lagged target copies. Parameters live in a flat
name -> ndarray dict so checkpoints, Adam states, and checksums all key off
the same names. The encoder is updated by critic gradients only; the actor
consumes its feature through a stop-gradient (see learners).

Two forward routes exist on purpose: plain-numpy heads for rollouts and
evaluation, and tape builders (suffix ``_t``) for differentiable losses.
Tests pin them against each other.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import numerics as nm

OBS_HEIGHT = 16
OBS_WIDTH = 16
OBS_CHANNELS = 3
PROPRIO_DIM = 2
OBS_FLAT_DIM = OBS_HEIGHT * OBS_WIDTH * OBS_CHANNELS + PROPRIO_DIM  # 770
ENCODER_HIDDEN = 128
FEATURE_DIM = 64
ACTOR_HIDDEN = 64
ACTION_DIM = 2
CRITIC_HIDDEN = 64

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0
SQUASH_EPS = 1e-6

ENCODER_KEYS = ("enc.w1", "enc.b1", "enc.w2", "enc.b2")
ACTOR_KEYS = ("actor.w1", "actor.b1", "actor.wmu", "actor.bmu", "actor.wsig", "actor.bsig")
CRITIC1_KEYS = ("q1.w1", "q1.b1", "q1.w2", "q1.b2")
CRITIC2_KEYS = ("q2.w1", "q2.b1", "q2.w2", "q2.b2")
TARGET1_KEYS = ("tq1.w1", "tq1.b1", "tq1.w2", "tq1.b2")
TARGET2_KEYS = ("tq2.w1", "tq2.b1", "tq2.w2", "tq2.b2")
ONLINE_KEYS = ENCODER_KEYS + ACTOR_KEYS + CRITIC1_KEYS + CRITIC2_KEYS
ALL_KEYS = ONLINE_KEYS + TARGET1_KEYS + TARGET2_KEYS


class AgentParams:
    """Flat bundle of all named parameter arrays (online nets plus targets)."""

    def __init__(self, params: dict[str, np.ndarray]):
        missing = [k for k in ALL_KEYS if k not in params]
        if missing:
            raise KeyError(f"agent parameters missing arrays: {missing}")
        self.params = params

    @property
    def dtype(self):
        return self.params["enc.w1"].dtype

    def subset(self, keys) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in keys}

    def copy(self) -> "AgentParams":
        return AgentParams({k: v.copy() for k, v in self.params.items()})


def _he(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)


def _head(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    # Small-scale final layers keep early Q-values and action means near zero.
    return rng.uniform(-3e-2, 3e-2, size=(fan_in, fan_out)).astype(dtype)


def init_agent(seed: int, dtype=np.float32) -> AgentParams:
    """Fresh agent; target critics start as exact copies of the online critics."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    p["enc.w1"] = _he(rng, OBS_FLAT_DIM, ENCODER_HIDDEN, dtype)
    p["enc.b1"] = np.zeros(ENCODER_HIDDEN, dtype=dtype)
    p["enc.w2"] = _he(rng, ENCODER_HIDDEN, FEATURE_DIM, dtype)
    p["enc.b2"] = np.zeros(FEATURE_DIM, dtype=dtype)
    p["actor.w1"] = _he(rng, FEATURE_DIM, ACTOR_HIDDEN, dtype)
    p["actor.b1"] = np.zeros(ACTOR_HIDDEN, dtype=dtype)
    p["actor.wmu"] = _head(rng, ACTOR_HIDDEN, ACTION_DIM, dtype)
    p["actor.bmu"] = np.zeros(ACTION_DIM, dtype=dtype)
    p["actor.wsig"] = _head(rng, ACTOR_HIDDEN, ACTION_DIM, dtype)
    p["actor.bsig"] = np.full(ACTION_DIM, -0.5, dtype=dtype)
    for q in ("q1", "q2"):
        p[f"{q}.w1"] = _he(rng, FEATURE_DIM + ACTION_DIM, CRITIC_HIDDEN, dtype)
        p[f"{q}.b1"] = np.zeros(CRITIC_HIDDEN, dtype=dtype)
        p[f"{q}.w2"] = _head(rng, CRITIC_HIDDEN, 1, dtype)
        p[f"{q}.b2"] = np.zeros(1, dtype=dtype)
    for q in ("q1", "q2"):
        for part in ("w1", "b1", "w2", "b2"):
            p[f"t{q}.{part}"] = p[f"{q}.{part}"].copy()
    return AgentParams(p)


def checksum(params: dict[str, np.ndarray]) -> str:
    """SHA-256 over names and raw bytes in sorted-name order (bit-exact identity)."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        arr = params[name]
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class FrozenAnchor:
    """Bit-exact copy of encoder+actor+critic parameters, never mutated after creation."""

    def __init__(self, agent: AgentParams):
        self.params = {k: agent.params[k].copy() for k in ONLINE_KEYS}
        for arr in self.params.values():
            arr.setflags(write=False)
        self.checksum = checksum(self.params)

    def verify(self) -> None:
        if checksum(self.params) != self.checksum:
            raise RuntimeError("frozen anchor parameters changed")


# ---------------------------------------------------------------------------
# Plain-numpy forward heads (rollout / evaluation path)
# ---------------------------------------------------------------------------

def flatten_obs(image_u8: np.ndarray, proprio: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Normalize pixels to [0,1], flatten, and append proprioception."""
    dtype = np.dtype(dtype).type
    img = np.asarray(image_u8)
    if img.shape[-3:] != (OBS_HEIGHT, OBS_WIDTH, OBS_CHANNELS):
        raise ValueError(f"expected {OBS_HEIGHT}x{OBS_WIDTH}x{OBS_CHANNELS} image, got {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected u8 image, got {img.dtype}")
    lead = img.shape[:-3]
    pixels = OBS_HEIGHT * OBS_WIDTH * OBS_CHANNELS
    out = np.empty(lead + (OBS_FLAT_DIM,), dtype=dtype)
    out[..., :pixels] = img.reshape(lead + (pixels,))
    out[..., :pixels] *= dtype(1.0) / dtype(255.0)
    out[..., pixels:] = np.asarray(proprio, dtype=dtype).reshape(lead + (PROPRIO_DIM,))
    return out


def encode(params: dict[str, np.ndarray], obs_flat: np.ndarray) -> np.ndarray:
    h = np.maximum(obs_flat @ params["enc.w1"] + params["enc.b1"], 0.0)
    return h @ params["enc.w2"] + params["enc.b2"]


def actor_heads(params: dict[str, np.ndarray], feature: np.ndarray):
    """Pre-tanh Gaussian mean and clamped log-sigma."""
    h = np.maximum(feature @ params["actor.w1"] + params["actor.b1"], 0.0)
    mu = h @ params["actor.wmu"] + params["actor.bmu"]
    log_sigma = np.clip(h @ params["actor.wsig"] + params["actor.bsig"],
                        LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, log_sigma


def sample_squashed(mu: np.ndarray, log_sigma: np.ndarray, noise: np.ndarray):
    """Reparameterized tanh-squashed Gaussian sample and its log-density.

    a = tanh(mu + sigma*noise); the log-density carries the tanh
    change-of-variables correction with a 1e-6 floor inside the log, which
    keeps it finite even where fp32 tanh saturates to exactly +/-1.
    """
    dt = np.asarray(mu).dtype.type
    sigma = np.exp(log_sigma)
    a = np.tanh(mu + sigma * noise)
    log_pi = (
        dt(-0.5 * math.log(2.0 * math.pi))
        - log_sigma
        - dt(0.5) * noise * noise
        - np.log(dt(1.0 + SQUASH_EPS) - a * a)
    ).sum(axis=-1)
    return a, log_pi


def q_values(params: dict[str, np.ndarray], feature: np.ndarray, action: np.ndarray):
    """Both critic heads; independent parameter copies, one scalar each."""
    x = np.concatenate([feature, action], axis=-1)
    out = []
    for q in ("q1", "q2"):
        h = np.maximum(x @ params[f"{q}.w1"] + params[f"{q}.b1"], 0.0)
        out.append((h @ params[f"{q}.w2"] + params[f"{q}.b2"])[..., 0])
    return out[0], out[1]


def policy_action(params: dict[str, np.ndarray], obs_flat: np.ndarray,
                  noise: np.ndarray | None = None) -> np.ndarray:
    """Action for rollouts: tanh(mu) when noise is None, else a squashed sample."""
    feature = encode(params, obs_flat)
    mu, log_sigma = actor_heads(params, feature)
    if noise is None:
        return np.tanh(mu)
    a, _ = sample_squashed(mu, log_sigma, noise)
    return a


def polyak_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray], tau: float):
    """target <- tau*online + (1-tau)*target, elementwise and in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for name, tgt in target.items():
        src = online[name.removeprefix("t")] if name.startswith("tq") else online[name]
        tgt *= (1.0 - tau)
        tgt += tau * src
    return target


def kl_diag_gauss(mu0: np.ndarray, sigma0: np.ndarray, mu: np.ndarray, sigma: np.ndarray):
    """Closed-form KL(N(mu0, diag sigma0^2) || N(mu, diag sigma^2)), summed over dims.

    Evaluated on the pre-tanh Gaussians, where the closed form exists.
    """
    mu0, sigma0, mu, sigma = (np.asarray(x) for x in (mu0, sigma0, mu, sigma))
    if np.any(sigma0 <= 0) or np.any(sigma <= 0):
        raise ValueError("kl_diag_gauss requires strictly positive sigmas")
    # Arranged so every term cancels exactly when the distributions coincide:
    # log(s/s0) + (s0^2 + dmu^2)/(2 s^2) - 1/2 == log(s/s0) + (s0^2 + dmu^2 - s^2)/(2 s^2)
    var = sigma * sigma
    return (
        np.log(sigma / sigma0)
        + (sigma0 * sigma0 + (mu0 - mu) ** 2 - var) / (2.0 * var)
    ).sum(axis=-1)


# ---------------------------------------------------------------------------
# Tape builders (differentiable path)
# ---------------------------------------------------------------------------

def lift(tape: nm.Tape, params: dict[str, np.ndarray], keys, requires_grad: bool):
    """Lift named arrays onto a tape as leaves; constants when requires_grad=False.

    Arrays are borrowed (finiteness-checked, not copied): the optimizer must
    not mutate them until the tape's backward pass has run.
    """
    return {k: tape.leaf(nm.Tensor._borrow(params[k]), requires_grad) for k in keys}


def encode_t(p: dict[str, nm.Node], obs_flat: nm.Node) -> nm.Node:
    h = nm.relu(nm.affine(obs_flat, p["enc.w1"], p["enc.b1"]))
    return nm.affine(h, p["enc.w2"], p["enc.b2"])


def actor_heads_t(p: dict[str, nm.Node], feature: nm.Node):
    h = nm.relu(nm.affine(feature, p["actor.w1"], p["actor.b1"]))
    mu = nm.affine(h, p["actor.wmu"], p["actor.bmu"])
    log_sigma = nm.clip(nm.affine(h, p["actor.wsig"], p["actor.bsig"]),
                        LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    return mu, log_sigma


def sample_squashed_t(tape: nm.Tape, mu: nm.Node, log_sigma: nm.Node, noise: np.ndarray):
    """Tape version of sample_squashed; noise enters as a constant."""
    dt = mu.value.dtype
    noise_c = tape.constant(noise.astype(dt, copy=False), dtype=dt.type)
    sigma = nm.exp(log_sigma)
    pre = nm.add(mu, nm.mul(sigma, noise_c))
    a = nm.tanh(pre)
    # per-sample constant: -D/2*log(2pi) - 0.5*sum(noise^2)
    base = (-0.5 * math.log(2.0 * math.pi) * noise.shape[-1]
            - 0.5 * (noise.astype(np.float64) ** 2).sum(axis=-1))
    base_c = tape.constant(base.astype(dt), dtype=dt.type)
    one_eps = tape.constant(nm.const_full(a.shape, 1.0 + SQUASH_EPS, dt), dtype=dt.type)
    corr = nm.sum_rows(nm.log(nm.sub(one_eps, nm.square(a))))
    log_pi = nm.sub(nm.sub(base_c, nm.sum_rows(log_sigma)), corr)
    return a, log_pi


def q_value_t(p: dict[str, nm.Node], which: str, feature: nm.Node, action: nm.Node,
              joined: nm.Node | None = None) -> nm.Node:
    """One critic head; pass ``joined`` to share the feature++action concat."""
    x = nm.concat(feature, action) if joined is None else joined
    h = nm.relu(nm.affine(x, p[f"{which}.w1"], p[f"{which}.b1"]))
    return nm.sum_rows(nm.affine(h, p[f"{which}.w2"], p[f"{which}.b2"]))


def kl_diag_gauss_t(tape: nm.Tape, mu0: nm.Node, log_sigma0: nm.Node,
                    mu: nm.Node, log_sigma: nm.Node) -> nm.Node:
    """Tape KL(N0 || N) per sample, from log-sigmas (always positive sigmas)."""
    dt = mu.value.dtype
    log_ratio = nm.sub(log_sigma, log_sigma0)  # log(sigma/sigma0)
    var0 = nm.exp(nm.scale(log_sigma0, 2.0))
    var = nm.exp(nm.scale(log_sigma, 2.0))
    dmu2 = nm.square(nm.sub(mu0, mu))
    half = tape.constant(np.full(mu.shape, 0.5, dtype=dt), dtype=dt.type)
    # (var0 + dmu2 - var) / (2 var): cancels exactly at identical parameters.
    quad = nm.mul(nm.sub(nm.add(var0, dmu2), var),
                  nm.mul(half, nm.exp(nm.scale(log_sigma, -2.0))))
    return nm.sum_rows(nm.add(log_ratio, quad))
