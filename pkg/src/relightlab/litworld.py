"""Deterministic 2D pixel-rendered reaching world with a parametric light model.

The agent (red disk) must reach the target (green disk) inside the unit
square, observed through a 16x16 RGB render whose appearance depends on an
IlluminationConfig: ambient level, directional diffuse term, a Gaussian
specular blob, and per-channel gains. Rendering is a pure function of
(state, light), which is what makes exact procedural relighting possible.

A scripted expert reads the ground-truth state (never pixels), takes maximal
straight-line steps, and is therefore success-guaranteed and light-blind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DISK_RADIUS = 0.08
AGENT_COLOR = (0.9, 0.2, 0.2)
TARGET_COLOR = (0.2, 0.9, 0.2)
BACKGROUND_COLOR = (0.5, 0.5, 0.5)
DIFFUSE_NORM = 0.7071  # max |projection| of a unit-square offset on a direction
SPECULAR_WIDTH = 0.12

H, W = 16, 16


@dataclass(frozen=True)
class EnvConfig:
    step_size: float = 0.05
    success_radius: float = 0.05
    max_steps: int = 60

    def __post_init__(self):
        if self.step_size <= 0 or self.success_radius <= 0 or self.max_steps <= 0:
            raise ValueError("EnvConfig fields must be positive")


@dataclass
class WorldState:
    agent: np.ndarray  # (2,) fp32 in [0,1]^2
    target: np.ndarray  # (2,) fp32 in [0,1]^2
    step: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.agent.copy(), self.target.copy(), self.step)


@dataclass(frozen=True)
class IlluminationConfig:
    """Parametric light: ambient, directional diffuse, specular blob, channel gains."""

    ambient: float
    diffuse_strength: float
    diffuse_angle: float  # radians in [0, 2*pi)
    specular_center: tuple[float, float]
    specular_strength: float
    gains: tuple[float, float, float]

    RANGES = {
        "ambient": (0.2, 0.8),
        "diffuse_strength": (0.0, 0.8),
        "specular_strength": (0.0, 0.6),
        "gain": (0.4, 1.6),
    }

    def __post_init__(self):
        lo, hi = self.RANGES["ambient"]
        if not lo <= self.ambient <= hi:
            raise ValueError(f"ambient {self.ambient} outside [{lo}, {hi}]")
        lo, hi = self.RANGES["diffuse_strength"]
        if not lo <= self.diffuse_strength <= hi:
            raise ValueError(f"diffuse_strength {self.diffuse_strength} outside [{lo}, {hi}]")
        if not 0.0 <= self.diffuse_angle < 2.0 * math.pi:
            raise ValueError(f"diffuse_angle {self.diffuse_angle} outside [0, 2pi)")
        for c in self.specular_center:
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"specular_center {self.specular_center} outside unit square")
        lo, hi = self.RANGES["specular_strength"]
        if not lo <= self.specular_strength <= hi:
            raise ValueError(f"specular_strength {self.specular_strength} outside [{lo}, {hi}]")
        lo, hi = self.RANGES["gain"]
        for g in self.gains:
            if not lo <= g <= hi:
                raise ValueError(f"gain {g} outside [{lo}, {hi}]")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.ambient, self.diffuse_strength, self.diffuse_angle,
             self.specular_center[0], self.specular_center[1], self.specular_strength,
             self.gains[0], self.gains[1], self.gains[2]],
            dtype=np.float32,
        )

    @classmethod
    def from_vector(cls, v) -> "IlluminationConfig":
        v = [float(x) for x in v]
        if len(v) != 9:
            raise ValueError(f"light vector needs 9 fields, got {len(v)}")
        return cls(v[0], v[1], v[2], (v[3], v[4]), v[5], (v[6], v[7], v[8]))


SOURCE_LIGHT = IlluminationConfig(0.6, 0.3, math.pi / 4, (0.25, 0.25), 0.2, (1.0, 1.0, 1.0))
DEPLOY_LIGHT = IlluminationConfig(0.3, 0.7, 5 * math.pi / 4, (0.7, 0.6), 0.5, (1.4, 0.9, 0.6))
RELIGHT_SET = (
    IlluminationConfig(0.7, 0.2, math.pi / 2, (0.5, 0.8), 0.1, (1.2, 1.2, 0.8)),
    IlluminationConfig(0.25, 0.6, math.pi, (0.2, 0.7), 0.4, (0.7, 0.8, 1.5)),
    IlluminationConfig(0.5, 0.5, 3 * math.pi / 2, (0.8, 0.2), 0.3, (1.5, 0.7, 0.7)),
    IlluminationConfig(0.35, 0.4, 0.0, (0.5, 0.5), 0.6, (0.9, 1.4, 0.9)),
)


@dataclass
class Observation:
    image: np.ndarray  # (16,16,3) u8
    proprio: np.ndarray  # (2,) fp32, the agent position


# Pixel centers: x along columns, y along rows, both at (i + 0.5)/16.
_PX = ((np.arange(W, dtype=np.float32) + 0.5) / W)[None, :].repeat(H, axis=0)
_PY = ((np.arange(H, dtype=np.float32) + 0.5) / H)[:, None].repeat(W, axis=1)


def render(state: WorldState, light: IlluminationConfig) -> np.ndarray:
    """Render the 16x16x3 u8 image; pure function of (state, light)."""
    dx_a = _PX - np.float32(state.agent[0])
    dy_a = _PY - np.float32(state.agent[1])
    dx_t = _PX - np.float32(state.target[0])
    dy_t = _PY - np.float32(state.target[1])
    on_agent = dx_a * dx_a + dy_a * dy_a <= np.float32(DISK_RADIUS * DISK_RADIUS)
    on_target = dx_t * dx_t + dy_t * dy_t <= np.float32(DISK_RADIUS * DISK_RADIUS)

    base = np.empty((H, W, 3), dtype=np.float32)
    for c in range(3):
        base[:, :, c] = np.float32(BACKGROUND_COLOR[c])
        base[:, :, c][on_target] = np.float32(TARGET_COLOR[c])
        base[:, :, c][on_agent] = np.float32(AGENT_COLOR[c])  # agent wins overlap

    cos_phi = np.float32(math.cos(light.diffuse_angle))
    sin_phi = np.float32(math.sin(light.diffuse_angle))
    proj = (cos_phi * (_PX - np.float32(0.5)) + sin_phi * (_PY - np.float32(0.5)))
    lum = np.float32(light.ambient) + np.float32(light.diffuse_strength) * (
        proj / np.float32(DIFFUSE_NORM) + np.float32(1.0)
    ) * np.float32(0.5)

    cx, cy = light.specular_center
    d2 = (_PX - np.float32(cx)) ** 2 + (_PY - np.float32(cy)) ** 2
    spec = np.float32(light.specular_strength) * np.exp(
        -d2 / np.float32(2.0 * SPECULAR_WIDTH * SPECULAR_WIDTH)
    )

    img = np.empty((H, W, 3), dtype=np.uint8)
    for c in range(3):
        val = np.float32(light.gains[c]) * (base[:, :, c] * lum + spec)
        np.clip(val, 0.0, 1.0, out=val)
        img[:, :, c] = np.rint(val * np.float32(255.0)).astype(np.uint8)
    return img


def interpolate_light(src: IlluminationConfig, tgt: IlluminationConfig,
                      s: float) -> IlluminationConfig:
    """Per-field linear interpolation; the diffuse angle follows the shortest arc."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"shift s must be in [0, 1], got {s}")
    if s == 0.0:
        return src
    if s == 1.0:
        return tgt

    def lerp(a, b):
        return a + s * (b - a)

    delta = (tgt.diffuse_angle - src.diffuse_angle + math.pi) % (2.0 * math.pi) - math.pi
    angle = (src.diffuse_angle + s * delta) % (2.0 * math.pi)
    return IlluminationConfig(
        ambient=lerp(src.ambient, tgt.ambient),
        diffuse_strength=lerp(src.diffuse_strength, tgt.diffuse_strength),
        diffuse_angle=angle,
        specular_center=(
            lerp(src.specular_center[0], tgt.specular_center[0]),
            lerp(src.specular_center[1], tgt.specular_center[1]),
        ),
        specular_strength=lerp(src.specular_strength, tgt.specular_strength),
        gains=tuple(lerp(a, b) for a, b in zip(src.gains, tgt.gains)),
    )


class LitWorld:
    """Reaching environment; state is explicit, so instances are freely shareable."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()

    def observe(self, state: WorldState, light: IlluminationConfig) -> Observation:
        return Observation(render(state, light), state.agent.copy())

    def reset(self, seed: int, light: IlluminationConfig) -> tuple[WorldState, Observation]:
        """Seeded placement with initial separation >= 3 * success_radius."""
        rng = np.random.default_rng(seed)
        min_sep = 3.0 * self.config.success_radius
        while True:
            agent = rng.uniform(0.0, 1.0, size=2).astype(np.float32)
            target = rng.uniform(0.0, 1.0, size=2).astype(np.float32)
            if float(np.linalg.norm(agent - target)) >= min_sep:
                break
        state = WorldState(agent, target, 0)
        return state, self.observe(state, light)

    def step(self, state: WorldState, action: np.ndarray,
             light: IlluminationConfig) -> tuple[WorldState, Observation, float, bool]:
        """Clipped kinematic step; reward 1 and done only on reaching the target.

        Timeout is not signaled here: callers truncate at max_steps with
        done=False so Bellman bootstrapping stays correct through truncation.
        """
        a = np.clip(np.asarray(action, dtype=np.float32), -1.0, 1.0)
        pos = np.clip(state.agent + np.float32(self.config.step_size) * a, 0.0, 1.0)
        nxt = WorldState(pos.astype(np.float32), state.target.copy(), state.step + 1)
        dist = float(np.linalg.norm(nxt.agent - nxt.target))
        done = dist <= self.config.success_radius
        reward = 1.0 if done else 0.0
        return nxt, self.observe(nxt, light), reward, done

    def expert_action(self, state: WorldState) -> np.ndarray:
        """Maximal straight-line progress from ground-truth state (light-blind)."""
        raw = (state.target - state.agent) / np.float32(self.config.step_size)
        return np.clip(raw, -1.0, 1.0).astype(np.float32)
