"""Flat experiment configuration: ``key = value`` files, presets, and conversion to model configs."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from stitchkit.bc import BCConfig
from stitchkit.dynamics import DynamicsConfig
from stitchkit.envs import EXPERT_FRACTIONS, ExpertPolicy, MixtureSpec, PointMassEnv
from stitchkit.errors import ConfigurationError
from stitchkit.inverse import CVAEConfig
from stitchkit.reward import WGANConfig
from stitchkit.stitch import ModelConfigs, StitchConfig
from stitchkit.value import ValueConfig

SEED_ENV = "STITCHKIT_SEED"


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 0  # 0: all available cores

    env_dt: float = 0.1
    env_max_speed: float = 2.0
    env_horizon: int = 50
    env_goal: tuple = (1.0, 1.0)
    expert_kp: float = 2.0
    expert_kd: float = 1.0
    expert_std: float = 0.01

    expert_fraction: float = 10.0
    n_trajectories: int = 200
    noise_std: float = 0.5
    fractions: tuple = EXPERT_FRACTIONS

    dynamics_hidden: tuple = (200, 200, 200)
    dynamics_lr: float = 3e-4
    dynamics_batch: int = 256
    dynamics_ensemble: int = 7
    dynamics_elites: int = 5
    dynamics_max_epochs: int = 200
    dynamics_patience: int = 10
    dynamics_holdout: float = 0.1
    dynamics_max_steps: int | None = None

    cvae_hidden: tuple | None = None
    cvae_lr: float = 1e-4
    cvae_batch: int = 100
    cvae_steps: int = 400_000
    cvae_kl_weight: float = 0.5

    wgan_hidden: tuple = (512, 512)
    wgan_lr: float = 1e-4
    wgan_batch: int = 256
    wgan_clip: float = 0.01
    wgan_n_critic: int = 5
    wgan_l2: float = 1e-4
    wgan_generator_steps: int = 50_000
    wgan_eval_every: int = 500

    value_hidden: tuple = (256, 256)
    value_lr: float = 3e-4
    value_batch: int = 256
    value_gamma: float = 0.99
    value_steps: int = 100_000
    value_target_period: int = 1000

    stitch_iterations: int = 5
    accept_threshold: float = 0.1
    epsilon: float | None = None
    candidate_cap: int | None = 64
    max_stitches: int | None = None
    latent_mode: str = "sample"

    bc_hidden: tuple = (256, 256)
    bc_lr: float = 1e-3
    bc_batch: int = 256
    bc_steps: int = 100_000
    bc_checkpoint_start: int = 40_000
    bc_checkpoint_every: int = 10_000
    bc_seeds: int = 5
    ts_seeds: int = 3
    weighted_delta: float = 1e-3

    eval_episodes: int = 10
    eval_seeds: int = 5
    select_episodes: int = 10  # checkpoint-selection rollouts (separate start states)
    kl_episodes: int = 10
    iteration_curve: bool = True

    def __post_init__(self):
        if not 0 <= self.expert_fraction <= 100:
            raise ConfigurationError("expert_fraction must be a percentage in [0, 100]")
        if any(not 0 <= f <= 100 for f in self.fractions):
            raise ConfigurationError("fractions must be percentages in [0, 100]")
        if self.latent_mode not in ("sample", "mean"):
            raise ConfigurationError("latent_mode must be 'sample' or 'mean'")
        for name in ("n_trajectories", "bc_seeds", "ts_seeds", "eval_episodes", "eval_seeds", "stitch_iterations"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.workers < 0:
            raise ConfigurationError("workers must be >= 0")

    # -- builders ----------------------------------------------------------

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def env(self) -> PointMassEnv:
        return PointMassEnv(dt=self.env_dt, max_speed=self.env_max_speed, horizon=self.env_horizon,
                            goal=tuple(self.env_goal))

    def expert(self) -> ExpertPolicy:
        return ExpertPolicy(self.env(), kp=self.expert_kp, kd=self.expert_kd, std=self.expert_std)

    def mixture(self, fraction: float | None = None) -> MixtureSpec:
        frac = self.expert_fraction if fraction is None else fraction
        return MixtureSpec(frac, self.n_trajectories, self.noise_std)

    def model_configs(self) -> ModelConfigs:
        return ModelConfigs(
            DynamicsConfig(hidden=self.dynamics_hidden, learning_rate=self.dynamics_lr, batch_size=self.dynamics_batch,
                           ensemble_size=self.dynamics_ensemble, n_elites=self.dynamics_elites,
                           max_epochs=self.dynamics_max_epochs, patience=self.dynamics_patience,
                           holdout_fraction=self.dynamics_holdout, max_steps=self.dynamics_max_steps),
            CVAEConfig(hidden=self.cvae_hidden, learning_rate=self.cvae_lr, batch_size=self.cvae_batch,
                       steps=self.cvae_steps, kl_weight=self.cvae_kl_weight),
            WGANConfig(hidden=self.wgan_hidden, learning_rate=self.wgan_lr, batch_size=self.wgan_batch,
                       clip=self.wgan_clip, n_critic=self.wgan_n_critic, l2=self.wgan_l2,
                       generator_steps=self.wgan_generator_steps, eval_every=self.wgan_eval_every),
            ValueConfig(hidden=self.value_hidden, learning_rate=self.value_lr, batch_size=self.value_batch,
                        gamma=self.value_gamma, steps=self.value_steps, target_period=self.value_target_period),
        )

    def stitch_config(self, seed: int | None = None) -> StitchConfig:
        return StitchConfig(accept_threshold=self.accept_threshold, iterations=self.stitch_iterations,
                            epsilon=self.epsilon, candidate_cap=self.candidate_cap, max_stitches=self.max_stitches,
                            latent_mode=self.latent_mode, seed=self.seed if seed is None else seed,
                            workers=self.n_workers)

    def bc_config(self, seed: int = 0) -> BCConfig:
        return BCConfig(hidden=self.bc_hidden, learning_rate=self.bc_lr, batch_size=self.bc_batch,
                        steps=self.bc_steps, checkpoint_start=self.bc_checkpoint_start,
                        checkpoint_every=self.bc_checkpoint_every, seed=seed)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


PRESETS = {
    "default": {},
    # desk-scale settings for the toy experiments; a full sweep takes tens of minutes on one core
    "quick": {
        "n_trajectories": 1000,
        "dynamics_hidden": (64, 64, 64),
        "dynamics_max_epochs": 40,
        "dynamics_patience": 5,
        "dynamics_max_steps": 1500,
        "cvae_hidden": (64, 64),
        "cvae_steps": 3000,
        "wgan_hidden": (64, 64),
        "wgan_generator_steps": 1000,
        "value_hidden": (64, 64),
        "value_steps": 2000,
        "value_target_period": 100,
        "bc_hidden": (64, 64),
        "bc_steps": 3000,
        "bc_checkpoint_start": 1000,
        "bc_checkpoint_every": 500,
    },
    # smoke-test scale, seconds per command
    "tiny": {
        "n_trajectories": 20,
        "dynamics_hidden": (16, 16),
        "dynamics_ensemble": 3,
        "dynamics_elites": 2,
        "dynamics_max_epochs": 3,
        "dynamics_max_steps": 30,
        "cvae_hidden": (16, 16),
        "cvae_steps": 30,
        "wgan_hidden": (16, 16),
        "wgan_generator_steps": 10,
        "wgan_eval_every": 5,
        "value_hidden": (16, 16),
        "value_steps": 30,
        "value_target_period": 10,
        "stitch_iterations": 2,
        "bc_hidden": (16, 16),
        "bc_steps": 40,
        "bc_checkpoint_start": 20,
        "bc_checkpoint_every": 20,
        "bc_seeds": 1,
        "ts_seeds": 1,
        "eval_episodes": 2,
        "eval_seeds": 1,
        "select_episodes": 2,
        "kl_episodes": 2,
    },
}

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_scalar(text: str, kind: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return text


def parse_value(key: str, text) -> object:
    """Convert ``text`` to the type of field ``key`` (``none`` for optional fields)."""
    if key not in _FIELDS:
        raise ConfigurationError(f"unknown config key {key!r}")
    if not isinstance(text, str):
        return tuple(text) if isinstance(text, list) else text
    kind = str(_FIELDS[key].type).replace(" ", "")
    text = text.strip()
    optional = kind.endswith("|None")
    kind = kind.removesuffix("|None")
    if optional and text.lower() == "none":
        return None
    try:
        if kind == "tuple":
            parts = [p for p in text.split(",") if p.strip()]
            items = [float(p) if any(c in p for c in ".eE") else int(p) for p in parts]
            if key in ("fractions", "env_goal"):
                items = [float(x) for x in items]
            return tuple(items)
        return _parse_scalar(text, kind)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {text!r} ({exc})") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        out[key] = parse_value(key, value)
    return out


def resolve_config(preset: str = "default", path=None, overrides: dict | None = None,
                   environ=None) -> ExperimentConfig:
    """Preset, then config file, then ``overrides``; STITCHKIT_SEED fills in an unset seed."""
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    environ = os.environ if environ is None else environ
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" not in overrides and "seed" not in values and environ.get(SEED_ENV):
        overrides["seed"] = parse_value("seed", environ[SEED_ENV])
    for key, value in overrides.items():
        values[key] = parse_value(key, value)
    return replace(ExperimentConfig(), **values)


def write_resolved(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(config.to_text())
    os.replace(tmp, path)
    return path
