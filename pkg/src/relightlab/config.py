"""Flat key-value config files with a closed key registry.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
Unknown keys are a hard error; values are typed by the registry. The config
hash (sha256 over the canonical sorted rendering) identifies a run's settings
in checkpoints and reports.
"""

from __future__ import annotations

import hashlib
import math

from .litworld import DEPLOY_LIGHT, RELIGHT_SET, SOURCE_LIGHT, EnvConfig, IlluminationConfig
from .learners import ANCHOR_HEADS, LearnerConfig


class ConfigError(Exception):
    pass


class UnknownKeyError(ConfigError):
    def __init__(self, key: str):
        super().__init__(f"unknown config key {key!r}")
        self.key = key


LIGHT_FIELDS = (
    "ambient", "diffuse_strength", "diffuse_angle",
    "specular_x", "specular_y", "specular_strength",
    "gain_r", "gain_g", "gain_b",
)

_LIGHT_PREFIXES = ("light.source", "light.deploy",
                   "light.relight.k1", "light.relight.k2",
                   "light.relight.k3", "light.relight.k4")


def _light_defaults(prefix: str, light: IlluminationConfig) -> dict:
    vec = light.as_vector()
    return {f"{prefix}.{name}": (float, float(vec[i]))
            for i, name in enumerate(LIGHT_FIELDS)}


def _registry() -> dict:
    reg: dict[str, tuple[type, object]] = {
        "env.step_size": (float, 0.05),
        "env.success_radius": (float, 0.05),
        "env.max_steps": (int, 60),
        "replay.alpha": (float, 0.75),
        "replay.batch_size": (int, 256),
        "replay.seed": (int, 0),
        "learner.gamma": (float, 0.97),
        "learner.eta": (float, 0.05),
        "learner.tau": (float, 0.005),
        "learner.lr": (float, 3e-4),
        "learner.batch": (int, 256),
        "learner.T": (int, 15_000),
        "learner.lambda_feat": (float, 0.2),
        "learner.beta_mse": (float, 0.1),
        "learner.rho_end": (float, 0.33),
        "learner.anchor_head": (str, "mse"),
        "learner.seed": (int, 0),
    }
    for prefix, light in zip(
            _LIGHT_PREFIXES, (SOURCE_LIGHT, DEPLOY_LIGHT) + tuple(RELIGHT_SET)):
        reg.update(_light_defaults(prefix, light))
    return reg


REGISTRY = _registry()


def default_config() -> dict:
    return {k: v for k, (_, v) in REGISTRY.items()}


def parse_config(text: str) -> dict:
    """Parse config text over the defaults; unknown keys raise."""
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in REGISTRY:
            raise UnknownKeyError(key)
        typ, _ = REGISTRY[key]
        try:
            cfg[key] = typ(value) if typ is not str else value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc
    if cfg["learner.anchor_head"] not in ANCHOR_HEADS:
        raise ConfigError(f"learner.anchor_head must be one of {ANCHOR_HEADS}")
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def render_config(cfg: dict) -> str:
    return "\n".join(f"{k} = {cfg[k]!r}" if isinstance(cfg[k], str) else f"{k} = {cfg[k]}"
                     for k in sorted(cfg)) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()


def env_config(cfg: dict) -> EnvConfig:
    return EnvConfig(step_size=cfg["env.step_size"],
                     success_radius=cfg["env.success_radius"],
                     max_steps=cfg["env.max_steps"])


def light_config(cfg: dict, prefix: str) -> IlluminationConfig:
    vec = [cfg[f"{prefix}.{name}"] for name in LIGHT_FIELDS]
    vec[2] = vec[2] % (2.0 * math.pi)
    return IlluminationConfig.from_vector(vec)


def relight_set(cfg: dict) -> tuple[IlluminationConfig, ...]:
    return tuple(light_config(cfg, f"light.relight.k{k}") for k in range(1, 5))


def learner_config(cfg: dict, **overrides) -> LearnerConfig:
    kwargs = dict(
        gamma=cfg["learner.gamma"],
        eta=cfg["learner.eta"],
        tau=cfg["learner.tau"],
        batch=cfg["learner.batch"],
        lr=cfg["learner.lr"],
        lambda_feat=cfg["learner.lambda_feat"],
        beta_mse=cfg["learner.beta_mse"],
        rho_end=cfg["learner.rho_end"],
        finetune_steps=cfg["learner.T"],
        anchor_head=cfg["learner.anchor_head"],
        alpha=cfg["replay.alpha"],
    )
    kwargs.update(overrides)
    return LearnerConfig(**kwargs)
