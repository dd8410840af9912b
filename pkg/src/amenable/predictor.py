"""The task predictor f(x; w) with controller-weighted training.

Classification nets output class logits; segmentation nets output per-pixel
logits.  Training minimises ``(1/B) * sum_i c_i * L_f(f(x_i; w), y_i)`` where
``c_i`` is either a controller score (weighting) or a 0/1 selection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, NonFiniteError
from .nets import get_flat, param_count, seeded_init, set_flat

DICE_SMOOTH = 1e-7


@dataclass(frozen=True)
class TaskSpec:
    kind: Literal["classification", "segmentation"] = "classification"

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.kind == "classification" else "pixel_cross_entropy"

    @property
    def metric(self) -> str:
        return "one_minus_accuracy" if self.kind == "classification" else "one_minus_dice"


@dataclass(frozen=True)
class ArchSpec:
    kind: Literal["classification", "segmentation"]
    input_shape: tuple[int, int]
    hidden: int = 32
    channels: int = 8
    n_classes: int = 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def build_network(arch: ArchSpec) -> nn.Module:
    H, W = arch.input_shape
    if arch.kind == "classification":
        return nn.Sequential(
            nn.Flatten(),
            nn.Linear(H * W, arch.hidden),
            nn.ReLU(),
            nn.Linear(arch.hidden, arch.n_classes),
        )
    return nn.Sequential(
        nn.Unflatten(1, (1, H)),
        nn.Conv2d(1, arch.channels, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(arch.channels, 1, 3, padding=1),
        nn.Flatten(1, 2),
    )


def dice(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample binary Dice of (N, H, W) masks, smoothed against 0/0."""
    pred = pred.reshape(len(pred), -1).astype(np.float64)
    target = target.reshape(len(target), -1).astype(np.float64)
    inter = (pred * target).sum(1)
    return (2 * inter + DICE_SMOOTH) / (pred.sum(1) + target.sum(1) + DICE_SMOOTH)


def reptile_update(w_base: np.ndarray, w_new: np.ndarray, epsilon: float) -> np.ndarray:
    """First-order meta step ``w_base + epsilon * (w_new - w_base)``.

    Evaluated as the convex combination ``(1 - eps) * w_base + eps * w_new``
    in float64, so the endpoints eps = 0 and eps = 1 return the inputs exactly.
    """
    w_base = np.asarray(w_base, dtype=np.float64)
    w_new = np.asarray(w_new, dtype=np.float64)
    if w_base.shape != w_new.shape:
        raise ValueError(f"parameter length mismatch: {w_base.shape} vs {w_new.shape}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    return (1.0 - epsilon) * w_base + epsilon * w_new


def anneal_epsilon(trial_index: int, total_trials: int) -> float:
    """Linear decay from 1.0 at the first trial to 0.0 at ``total_trials``."""
    if total_trials < 1 or not 0 <= trial_index <= total_trials:
        raise ValueError("need 0 <= trial_index <= total_trials and total_trials >= 1")
    return 1.0 - trial_index / total_trials


class Predictor:
    """A task network plus its optimizer state.

    ``optimizer`` is ``"adam"`` (beta1=0.9, beta2=0.999, eps=1e-8) or
    ``"sgd"``.  Inputs are ``(N, H, W)`` float arrays or tensors.
    """

    def __init__(
        self,
        arch: ArchSpec,
        *,
        optimizer: str = "adam",
        lr: float = 1e-3,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        self.arch = arch
        self.task = TaskSpec(arch.kind)
        self.optimizer_name = optimizer
        self.lr = lr
        self.dtype = dtype
        self.net = build_network(arch).to(dtype)
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        seeded_init(self.net, generator)
        self.step_count = 0
        self.reset_optimizer()

    # -- parameters -------------------------------------------------------

    def reset_optimizer(self) -> None:
        if self.optimizer_name == "adam":
            self.opt = torch.optim.Adam(self.net.parameters(), lr=self.lr, betas=(0.9, 0.999), eps=1e-8)
        elif self.optimizer_name == "sgd":
            self.opt = torch.optim.SGD(self.net.parameters(), lr=self.lr)
        else:
            raise ValueError(f"unknown optimizer {self.optimizer_name!r}")

    def get_flat(self) -> np.ndarray:
        return get_flat(self.net)

    def set_flat(self, flat: np.ndarray) -> None:
        set_flat(self.net, flat)

    @property
    def n_params(self) -> int:
        return param_count(self.net)

    def clone(self) -> "Predictor":
        other = Predictor(self.arch, optimizer=self.optimizer_name, lr=self.lr, dtype=self.dtype)
        other.set_flat(self.get_flat())
        other.opt.load_state_dict(self.opt.state_dict())
        other.step_count = self.step_count
        return other

    # -- forward ----------------------------------------------------------

    def _tensor(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match {self.arch.input_shape}")
        return x

    def logits(self, x) -> torch.Tensor:
        return self.net(self._tensor(x))

    def predict(self, x) -> np.ndarray:
        """Class probabilities ``(N, C)`` or per-pixel probabilities ``(N, H, W)``."""
        with torch.no_grad():
            z = self.logits(x)
            p = torch.softmax(z, dim=1) if self.task.kind == "classification" else torch.sigmoid(z)
        return p.numpy()

    def per_sample_loss(self, x, y) -> torch.Tensor:
        z = self.logits(x)
        if self.task.kind == "classification":
            return F.cross_entropy(z, torch.as_tensor(y, dtype=torch.long), reduction="none")
        target = torch.as_tensor(np.asarray(y), dtype=z.dtype)
        return F.binary_cross_entropy_with_logits(z, target, reduction="none").mean(dim=(1, 2))

    def weighted_loss(self, x, y, c) -> torch.Tensor:
        c = torch.as_tensor(c, dtype=self.dtype)
        return (c * self.per_sample_loss(x, y)).sum() / len(c)

    # -- training ---------------------------------------------------------

    def weighted_train_step(self, x, y, c) -> float:
        """One optimizer step on the c-weighted loss; no-op when every c_i is 0."""
        c = np.asarray(c, dtype=np.float64)
        if c.size == 0:
            raise ValueError("empty batch")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("weights must lie in [0, 1]")
        if not np.any(c):
            return 0.0
        loss = self.weighted_loss(x, y, c)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite predictor loss {loss.item()} at step {self.step_count}")
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step_count += 1
        return float(loss.item())

    def evaluate_metric(self, x, y) -> np.ndarray:
        """Per-sample metric loss in [0, 1]: 1 - accuracy or 1 - Dice."""
        p = self.predict(x)
        if self.task.kind == "classification":
            return (p.argmax(1) != np.asarray(y)).astype(np.float64)
        return 1.0 - dice(p > 0.5, np.asarray(y))

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        header = {
            "kind": "predictor",
            "architecture": self.arch.to_json(),
            "optimizer": self.optimizer_name,
            "lr": self.lr,
            "step_count": self.step_count,
        }
        return save_checkpoint(path, header, self.get_flat())

    @classmethod
    def load(cls, path: str | Path) -> "Predictor":
        header, flat = load_checkpoint(path)
        if header.get("kind") != "predictor":
            raise CheckpointError(f"{path}: not a predictor checkpoint")
        pred = cls(ArchSpec.from_json(header["architecture"]), optimizer=header["optimizer"], lr=header["lr"])
        if flat.size != pred.n_params:
            raise CheckpointError(f"{path}: {flat.size} weights for a {pred.n_params}-parameter network")
        pred.set_flat(flat)
        pred.step_count = header["step_count"]
        return pred
