"""Run configuration: one validated document covering data, models, reward, RL and evaluation.

Configs are read from JSON or TOML.  Unknown keys are rejected and every
validation failure is reported with the dotted path of the offending field.
Task-dependent defaults (``s_rej`` and the holdout rejection ratio) are
resolved from ``task`` when left unset.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

TASK_DEFAULTS = {
    "classification": {"s_rej": 0.05, "holdout_ratio": 0.05},
    "segmentation": {"s_rej": 0.15, "holdout_ratio": 0.15},
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SynthConfig(_Strict):
    n_samples: int = Field(2800, ge=3)
    n_subjects: int | None = Field(None, ge=3)
    shape: tuple[int, int] = (16, 16)
    corrupt_fraction: float = Field(0.3, ge=0.0, le=1.0)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    split_fractions: tuple[float, float, float] = (5.0, 1.0, 1.0)
    positive_fraction: float = Field(0.5, ge=0.0, le=1.0)


class DataConfig(_Strict):
    path: str | None = None
    synth: SynthConfig = Field(default_factory=SynthConfig)
    # meta mode: label-noise rates of the training observers; the clean-label
    # environment is always held out for adaptation
    observer_flip_rates: list[float] = Field(default_factory=lambda: [0.1, 0.15, 0.2])

    @field_validator("observer_flip_rates")
    @classmethod
    def _rates(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("at least one observer is required")
        if any(not 0.0 <= r <= 1.0 for r in v):
            raise ValueError("flip rates must lie in [0, 1]")
        return v


class PredictorConfig(_Strict):
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0.0)
    hidden: int = Field(32, ge=1)
    channels: int = Field(8, ge=1)


class ControllerConfig(_Strict):
    encoder: tuple[int, int, int] = (64, 64, 32)
    recurrent: bool | None = None
    hidden_dim: int = Field(64, ge=1)
    num_layers: int = Field(1, ge=1)


class RewardConfig(_Strict):
    strategy: Literal["fixed", "weighted", "selective"] = "weighted"
    s_rej: float | None = None
    alpha: float = Field(0.9, ge=0.0, le=1.0)
    clip_mode: Literal["moving_average", "external", "none"] = "moving_average"


class PPOSettings(_Strict):
    clip_ratio: float = Field(0.2, gt=0.0)
    epochs: int = Field(4, ge=1)
    gamma: float = Field(0.99, ge=0.0, le=1.0)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    lr_policy: float = Field(3e-4, gt=0.0)
    lr_value: float = Field(1e-3, gt=0.0)
    minibatch_size: int | None = Field(None, ge=1)
    normalize_advantages: bool = True
    entropy_coef: float = Field(0.0, ge=0.0)
    max_grad_norm: float | None = Field(0.5, gt=0.0)


class DDPGSettings(_Strict):
    buffer_capacity: int = Field(10_000, ge=1)
    batch_size: int = Field(32, ge=1)
    tau: float = Field(0.01, ge=0.0, le=1.0)
    exploration_noise_std: float = Field(0.1, ge=0.0)
    lr_actor: float = Field(1e-4, gt=0.0)
    lr_critic: float = Field(1e-3, gt=0.0)
    gamma: float = Field(0.0, ge=0.0, le=1.0)
    replay_action: Literal["score", "selection"] = "selection"

    @model_validator(mode="after")
    def _capacity(self) -> "DDPGSettings":
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be at least batch_size")
        return self


class RLConfig(_Strict):
    algorithm: Literal["ppo", "ddpg"] = "ppo"
    ppo: PPOSettings = Field(default_factory=PPOSettings)
    ddpg: DDPGSettings = Field(default_factory=DDPGSettings)


class TrainingConfig(_Strict):
    trials: int = Field(40, ge=1)
    episodes_per_trial: int = Field(5, ge=1)
    steps_per_episode: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    share_predictor: bool = True
    share_images: bool = True
    checkpoint_every: int = Field(0, ge=0)  # episodes (single) or trials (meta); 0 = final only
    early_stop: bool = False
    early_stop_window: int = Field(20, ge=1)
    early_stop_tol: float = Field(1e-3, ge=0.0)


class AblationConfig(_Strict):
    env_level_trials: bool = True
    use_reptile: bool = True
    reset_memory_before_adapt: bool = True


class AdaptConfig(_Strict):
    k: float = Field(0.3, ge=0.0, le=1.0)
    episodes: int = Field(20, ge=1)
    checkpoint_dir: str | None = None


class EvaluationConfig(_Strict):
    ratios: list[float] = Field(default_factory=lambda: [round(0.05 * i, 2) for i in range(11)])
    holdout_ratio: float | None = None
    n_bootstrap: int = Field(1000, ge=2)

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v: list[float]) -> list[float]:
        if not v or any(not 0.0 <= r < 1.0 for r in v):
            raise ValueError("ratios must be a non-empty list of values in [0, 1)")
        if v != sorted(v):
            raise ValueError("ratios must be sorted ascending")
        return v


class RunConfig(_Strict):
    mode: Literal["single", "meta", "adapt"] = "single"
    task: Literal["classification", "segmentation"] = "classification"
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    data: DataConfig = Field(default_factory=DataConfig)
    predictor: PredictorConfig = Field(default_factory=PredictorConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @model_validator(mode="before")
    @classmethod
    def _shorthands(cls, raw: Any) -> Any:
        """Accept ``reward = "selective"`` (with a sibling ``s_rej``) and ``rl = "ddpg"``."""
        if not isinstance(raw, dict):
            return raw
        raw = dict(raw)
        if isinstance(raw.get("reward"), str):
            reward = {"strategy": raw["reward"]}
            if "s_rej" in raw:
                reward["s_rej"] = raw.pop("s_rej")
            raw["reward"] = reward
        if isinstance(raw.get("rl"), str):
            raw["rl"] = {"algorithm": raw["rl"]}
        return raw

    @model_validator(mode="after")
    def _resolve(self) -> "RunConfig":
        if self.mode == "meta" and self.rl.algorithm == "ddpg":
            raise ValueError("DDPG unavailable in meta mode (recurrent memory does not survive replay)")
        recurrent = self.mode != "single"
        if self.controller.recurrent is None:
            self.controller.recurrent = recurrent
        elif self.controller.recurrent != recurrent:
            kind = "recurrent" if recurrent else "feed-forward"
            raise ValueError(f"mode {self.mode!r} requires a {kind} controller")
        defaults = TASK_DEFAULTS[self.task]
        if self.reward.s_rej is None:
            self.reward.s_rej = defaults["s_rej"]
        s_rej = self.reward.s_rej
        if not 0.0 <= s_rej <= 1.0:
            raise ValueError(f"reward.s_rej must lie in [0, 1), got {s_rej}")
        if self.reward.strategy == "selective":
            m = self._val_size()
            kept = math.floor((1.0 - s_rej) * m + 1e-9) if m else (0 if s_rej >= 1.0 else 1)
            if kept < 1:
                raise ValueError(f"reward.s_rej={s_rej} keeps no validation samples: M' would be 0")
        elif s_rej >= 1.0:
            raise ValueError(f"reward.s_rej must lie in [0, 1), got {s_rej}")
        if self.evaluation.holdout_ratio is None:
            self.evaluation.holdout_ratio = defaults["holdout_ratio"]
        elif not 0.0 <= self.evaluation.holdout_ratio < 1.0:
            raise ValueError("evaluation.holdout_ratio must lie in [0, 1)")
        return self

    def _val_size(self) -> int | None:
        if self.data.path is not None:
            return None
        s = self.data.synth
        fr = s.split_fractions
        n_subjects = s.n_subjects or s.n_samples
        # subjects are split, then samples follow their subject; this is exact when n_subjects == n_samples
        if n_subjects != s.n_samples:
            return None
        return math.floor(fr[1] / sum(fr) * s.n_samples + 1e-9)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        lines.append(f"{path}: {msg}")
    return "; ".join(lines)


def config_from_dict(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_raw(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text.decode("utf-8"))
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None


def parse_config(path: str | Path) -> RunConfig:
    return config_from_dict(load_raw(path))


def serialize_config(cfg: RunConfig) -> str:
    return cfg.to_json()
