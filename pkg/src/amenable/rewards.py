"""Validation-set rewards and the moving-average baseline.

Three unclipped rewards are computed from per-sample validation metric
losses ``l_j`` (and controller scores ``h_j``):

* ``fixed``: ``-mean(l)`` over a pre-curated clean validation set;
* ``weighted``: ``-mean(l * h)``;
* ``selective``: ``-mean(l)`` over the ``floor((1 - s_rej) * M)``
  highest-scored samples.

The emitted reward subtracts a running baseline from the unclipped value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import ConfigError

RewardKind = Literal["fixed", "weighted", "selective"]


@dataclass(frozen=True)
class RewardStrategy:
    kind: RewardKind = "weighted"
    s_rej: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "weighted", "selective"):
            raise ConfigError(f"unknown reward strategy {self.kind!r}")
        if not 0.0 <= self.s_rej < 1.0:
            raise ConfigError(f"s_rej must lie in [0, 1), got {self.s_rej}")

    def n_kept(self, m: int) -> int:
        return int(math.floor((1.0 - self.s_rej) * m + 1e-9))


def unclipped_reward(strategy: RewardStrategy, losses, scores=None) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    m = losses.size
    if m == 0:
        raise ValueError("reward needs at least one validation sample")
    if strategy.kind == "fixed":
        return -float(losses.mean())
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != losses.shape:
        raise ValueError("losses and scores differ in length")
    if strategy.kind == "weighted":
        return -float((losses * scores).sum() / m)
    kept = strategy.n_kept(m)
    if kept < 1:
        raise ConfigError(f"selective reward keeps M' = {kept} of {m} samples; M' would be 0")
    order = np.argsort(-scores, kind="stable")
    return -float(losses[order[:kept]].mean())


@dataclass(frozen=True)
class RewardClipper:
    """Moving-average baseline ``R_bar_t = alpha * R_bar_{t-1} + (1 - alpha) * R_t``.

    ``mode="moving_average"`` subtracts the previous baseline; ``"external"``
    subtracts a caller-supplied baseline (e.g. the reward of a randomly
    selecting shadow predictor); ``"none"`` passes the raw value through.
    The running mean is tracked in every mode.
    """

    alpha: float = 0.9
    running_mean: float = 0.0
    initialized: bool = False
    mode: Literal["moving_average", "external", "none"] = "moving_average"

    def reset(self) -> "RewardClipper":
        return replace(self, running_mean=0.0, initialized=False)


def clip(clipper: RewardClipper, r_tilde: float, baseline: float | None = None) -> tuple[float, RewardClipper]:
    if not math.isfinite(r_tilde):
        raise ValueError(f"non-finite reward {r_tilde}")
    if not clipper.initialized:
        new = replace(clipper, running_mean=float(r_tilde), initialized=True)
        reward = 0.0
    else:
        new = replace(clipper, running_mean=clipper.alpha * clipper.running_mean + (1 - clipper.alpha) * r_tilde)
        reward = r_tilde - clipper.running_mean
    if clipper.mode == "external":
        if baseline is None:
            raise ValueError("external clipping needs a baseline value")
        reward = r_tilde - baseline
    elif clipper.mode == "none":
        reward = float(r_tilde)
    return float(reward), new
