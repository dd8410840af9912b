"""The amenability controller h(x; theta) in [0, 1].

Two variants share an image encoder (three dense ReLU stages):

* feed-forward: encoder -> linear head -> sigmoid;
* recurrent: the encoding is concatenated with the previous step's
  (action, raw reward, done flag) and fed through a (stacked) LSTM whose
  state persists across samples, episodes and trials until reset.

The recurrent variant processes one sample per recurrent step.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, MisuseError
from .nets import get_flat, param_count, seeded_init, set_flat

SCORE_EPS = 1e-6


@dataclass(frozen=True)
class StepContext:
    prev_action: float = 0.0
    prev_reward: float = 0.0
    prev_done: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite([self.prev_action, self.prev_reward, self.prev_done])):
            raise ValueError("step context must be finite")

    def as_list(self) -> list[float]:
        return [float(self.prev_action), float(self.prev_reward), float(self.prev_done)]


@dataclass(frozen=True, eq=False)
class ControllerMemory:
    h: torch.Tensor  # (layers, hidden)
    c: torch.Tensor

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ControllerMemory):
            return NotImplemented
        return torch.equal(self.h, other.h) and torch.equal(self.c, other.c)

    def __len__(self) -> int:
        return self.h.numel() + self.c.numel()

    def reset(self) -> "ControllerMemory":
        return ControllerMemory(torch.zeros_like(self.h), torch.zeros_like(self.c))

    def is_zero(self) -> bool:
        return not (self.h.any() or self.c.any())

    def detach(self) -> "ControllerMemory":
        return ControllerMemory(self.h.detach(), self.c.detach())


class Controller(nn.Module):
    def __init__(
        self,
        input_shape: tuple[int, int],
        *,
        encoder: tuple[int, ...] = (64, 64, 32),
        recurrent: bool = False,
        hidden_dim: int = 64,
        num_layers: int = 1,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(encoder) != 3:
            raise ValueError("encoder needs exactly three stage widths")
        self.input_shape = tuple(input_shape)
        self.encoder_sizes = tuple(encoder)
        self.recurrent = recurrent
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        H, W = self.input_shape
        layers: list[nn.Module] = [nn.Flatten()]
        width = H * W
        for size in encoder:
            layers += [nn.Linear(width, size), nn.ReLU()]
            width = size
        self.encoder = nn.Sequential(*layers)
        if recurrent:
            self.rnn = nn.LSTM(width + 3, hidden_dim, num_layers=num_layers)
            self.head = nn.Linear(hidden_dim, 1)
        else:
            self.head = nn.Linear(width, 1)
        self.to(dtype)
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        seeded_init(self, generator)
        self.memory_resets = 0

    # -- feed-forward -----------------------------------------------------

    def embed(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=self.head.weight.dtype)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        return self.encoder(x)

    def score(self, x) -> torch.Tensor:
        """Scores in [0, 1] for a batch ``(N, H, W)``; feed-forward only."""
        if self.recurrent:
            raise MisuseError("score() is only defined for the feed-forward controller; use score_recurrent()")
        return torch.sigmoid(self.head(self.embed(x))).squeeze(-1)

    # -- recurrent --------------------------------------------------------

    def initial_memory(self) -> ControllerMemory:
        """Zeroed recurrent state; counted in ``memory_resets``."""
        memory = self.zero_memory()
        self.memory_resets += 1
        return memory

    def zero_memory(self) -> ControllerMemory:
        """Zeroed recurrent state without touching the reset counter."""
        if not self.recurrent:
            raise MisuseError("feed-forward controller has no memory")
        dtype = self.head.weight.dtype
        z = torch.zeros(self.num_layers, self.hidden_dim, dtype=dtype)
        return ControllerMemory(z, z.clone())

    def _check_memory(self, memory: ControllerMemory) -> None:
        if tuple(memory.h.shape[-2:]) != (self.num_layers, self.hidden_dim) or memory.h.shape != memory.c.shape:
            raise ValueError(
                f"memory shape {tuple(memory.h.shape)} does not match ({self.num_layers}, {self.hidden_dim})"
            )

    def step(self, h: torch.Tensor, c: torch.Tensor, emb: torch.Tensor, ctx: torch.Tensor):
        """One recurrent step for ``N`` independent streams.

        ``h``/``c`` are ``(layers, N, hidden)``, ``emb`` is ``(N, E)`` and
        ``ctx`` is ``(N, 3)``.  Returns ``(scores (N,), h', c')``.
        """
        inp = torch.cat([emb, ctx], dim=1).unsqueeze(0)
        out, (h, c) = self.rnn(inp, (h, c))
        return torch.sigmoid(self.head(out[0])).squeeze(-1), h, c

    def _ctx_tensor(self, ctx: StepContext | torch.Tensor) -> torch.Tensor:
        if isinstance(ctx, StepContext):
            ctx = torch.tensor([ctx.as_list()])
        return torch.as_tensor(ctx, dtype=self.head.weight.dtype).reshape(-1, 3)

    def score_recurrent(self, memory: ControllerMemory, x, ctx: StepContext) -> tuple[float, ControllerMemory]:
        """Score a single image and advance the memory by one step."""
        if not self.recurrent:
            raise MisuseError("score_recurrent() requires a recurrent controller")
        self._check_memory(memory)
        with torch.no_grad():
            s, h, c = self.step(memory.h.unsqueeze(1), memory.c.unsqueeze(1), self.embed(x), self._ctx_tensor(ctx))
        return float(s[0]), ControllerMemory(h.squeeze(1), c.squeeze(1))

    def score_with_memory(self, memory: ControllerMemory, x, ctx: StepContext | None = None) -> torch.Tensor:
        """Score every image in a batch from the same memory, without advancing it."""
        if not self.recurrent:
            raise MisuseError("score_with_memory() requires a recurrent controller")
        self._check_memory(memory)
        emb = self.embed(x)
        n = emb.shape[0]
        ctx_t = self._ctx_tensor(ctx or StepContext()).expand(n, 3)
        h = memory.h.unsqueeze(1).expand(-1, n, -1).contiguous()
        c = memory.c.unsqueeze(1).expand(-1, n, -1).contiguous()
        return self.step(h, c, emb, ctx_t)[0]

    def run_sequence(self, memory: ControllerMemory, emb: torch.Tensor, ctx: torch.Tensor):
        """Thread ``memory`` through a sequence of ``S`` embeddings and contexts.

        Gradients flow through the whole sequence; the starting memory is
        treated as a constant.  Returns ``(scores (S,), final memory)``.
        """
        h = memory.h.detach().unsqueeze(1)
        c = memory.c.detach().unsqueeze(1)
        inp = torch.cat([emb, torch.as_tensor(ctx, dtype=emb.dtype)], dim=1).unsqueeze(1)
        out, (h, c) = self.rnn(inp, (h, c))
        scores = torch.sigmoid(self.head(out[:, 0])).squeeze(-1)
        return scores, ControllerMemory(h.squeeze(1), c.squeeze(1))

    # -- parameters / persistence -----------------------------------------

    def get_flat(self) -> np.ndarray:
        return get_flat(self)

    def set_flat(self, flat: np.ndarray) -> None:
        set_flat(self, flat)

    @property
    def n_params(self) -> int:
        return param_count(self)

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "encoder": list(self.encoder_sizes),
            "recurrent": self.recurrent,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, {"kind": "controller", **self.config()}, self.get_flat())

    @classmethod
    def load(cls, path: str | Path) -> "Controller":
        header, flat = load_checkpoint(path)
        if header.get("kind") != "controller":
            raise CheckpointError(f"{path}: not a controller checkpoint")
        ctrl = cls(
            tuple(header["input_shape"]),
            encoder=tuple(header["encoder"]),
            recurrent=header["recurrent"],
            hidden_dim=header["hidden_dim"],
            num_layers=header["num_layers"],
        )
        if flat.size != ctrl.n_params:
            raise CheckpointError(f"{path}: {flat.size} weights for a {ctrl.n_params}-parameter controller")
        ctrl.set_flat(flat)
        return ctrl


def sample_actions(scores, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(h_i) draws as a float array of 0/1."""
    scores = np.asarray(scores, dtype=np.float64)
    return (rng.random(scores.shape) < scores).astype(np.float64)


def bernoulli_log_prob(scores, actions):
    """Per-sample ``a*ln(h) + (1-a)*ln(1-h)`` with h clamped to [1e-6, 1-1e-6].

    Works on numpy arrays and torch tensors alike.
    """
    if isinstance(scores, torch.Tensor):
        h = scores.clamp(SCORE_EPS, 1 - SCORE_EPS)
        a = torch.as_tensor(actions, dtype=h.dtype)
        return a * torch.log(h) + (1 - a) * torch.log1p(-h)
    h = np.clip(np.asarray(scores, dtype=np.float64), SCORE_EPS, 1 - SCORE_EPS)
    a = np.asarray(actions, dtype=np.float64)
    return a * np.log(h) + (1 - a) * np.log1p(-h)


def log_prob(scores, actions) -> float:
    """Joint log-likelihood of a selection vector under independent Bernoullis."""
    scores = np.asarray(scores)
    actions = np.asarray(actions)
    if scores.shape != actions.shape:
        raise ValueError("scores and actions differ in length")
    return float(bernoulli_log_prob(scores, actions).sum())
