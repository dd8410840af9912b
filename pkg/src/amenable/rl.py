"""Policy optimisation for the controller: PPO (both settings) and DDPG (single environment).

Each time-step's reward is shared by every sample in that step's batch;
per-sample Bernoulli log-probabilities give per-sample importance ratios.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .controller import Controller, ControllerMemory, bernoulli_log_prob
from .errors import MisuseError, NonFiniteError
from .nets import seeded_init


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """``Q_t = sum_k gamma^k R_{t+k}`` within one episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty reward sequence")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0) -> np.ndarray:
    """Generalised advantage estimates for one episode ending at ``last_value``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    adv = np.empty_like(rewards)
    acc = 0.0
    next_value = last_value
    for t in range(rewards.size - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_value = values[t]
    return adv


@dataclass
class PPOConfig:
    clip_ratio: float = 0.2
    epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr_policy: float = 3e-4
    lr_value: float = 1e-3
    minibatch_size: int | None = None
    normalize_advantages: bool = True
    entropy_coef: float = 0.0
    max_grad_norm: float | None = 0.5

    def __post_init__(self) -> None:
        if not self.clip_ratio > 0:
            raise ValueError("clip_ratio must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass
class DDPGConfig:
    buffer_capacity: int = 10_000
    batch_size: int = 32
    tau: float = 0.01
    exploration_noise_std: float = 0.1
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    # the clipped reward already measures the step's own effect, so no bootstrapping by default
    gamma: float = 0.0
    # what the critic sees as the action: the realised 0/1 selection or the noisy score
    replay_action: str = "selection"

    def __post_init__(self) -> None:
        if self.replay_action not in ("score", "selection"):
            raise ValueError(f"unknown replay_action {self.replay_action!r}")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be at least batch_size")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Step:
    batch_ids: np.ndarray
    scores: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    reward: float
    done: bool
    val_loss: float
    r_tilde: float = 0.0
    contexts: np.ndarray | None = None  # (B, 3), recurrent controllers only


@dataclass
class Trajectory:
    """One episode.  ``images`` is the train-image tensor that ``batch_ids`` index."""

    steps: list[Step]
    images: torch.Tensor
    memory0: ControllerMemory | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    def validate(self, sparse: bool = False) -> None:
        dones = [s.done for s in self.steps]
        if sum(dones) != 1 or not dones[-1]:
            raise ValueError("an episode must end with exactly one done step")
        if not np.all(np.isfinite(self.rewards)):
            raise NonFiniteError("non-finite reward in trajectory")
        if sparse and any(s.reward != 0.0 for s in self.steps if not s.done):
            raise ValueError("sparse episodes carry reward only at the done step")

    def batch_images(self) -> torch.Tensor:
        ids = np.stack([s.batch_ids for s in self.steps])
        return self.images[torch.as_tensor(ids)]  # (T, B, H, W)


# ---------------------------------------------------------------------------
# critics


def _mlp_encoder(input_shape, sizes, dtype):
    H, W = input_shape
    layers: list[nn.Module] = [nn.Flatten(start_dim=-2)]
    width = H * W
    for s in sizes:
        layers += [nn.Linear(width, s), nn.ReLU()]
        width = s
    return nn.Sequential(*layers).to(dtype), width


class ValueCritic(nn.Module):
    """V(s_t) from the mean-pooled batch embedding and the current mean validation loss."""

    def __init__(self, input_shape, encoder=(64, 32), hidden=32, generator=None, dtype=torch.float32):
        super().__init__()
        self.encoder, width = _mlp_encoder(input_shape, encoder, dtype)
        self.head = nn.Sequential(nn.Linear(width + 1, hidden), nn.ReLU(), nn.Linear(hidden, 1)).to(dtype)
        seeded_init(self, generator or torch.Generator().manual_seed(1))

    def forward(self, images: torch.Tensor, val_loss: torch.Tensor) -> torch.Tensor:
        """``images`` (T, B, H, W), ``val_loss`` (T,) -> values (T,)."""
        pooled = self.encoder(images).mean(dim=1)
        return self.head(torch.cat([pooled, val_loss.unsqueeze(-1)], dim=-1)).squeeze(-1)


class QCritic(nn.Module):
    """Q(s, a) as the mean over the batch of a per-sample term q(x_i, a_i, val_loss)."""

    def __init__(self, input_shape, encoder=(64, 32), hidden=32, generator=None, dtype=torch.float32):
        super().__init__()
        self.encoder, width = _mlp_encoder(input_shape, encoder, dtype)
        self.head = nn.Sequential(nn.Linear(width + 2, hidden), nn.ReLU(), nn.Linear(hidden, 1)).to(dtype)
        seeded_init(self, generator or torch.Generator().manual_seed(2))

    def forward(self, images: torch.Tensor, val_loss: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """``images`` (N, B, H, W), ``val_loss`` (N,), ``actions`` (N, B) -> (N,)."""
        emb = self.encoder(images)
        vl = val_loss[:, None, None].expand(-1, emb.shape[1], 1)
        q = self.head(torch.cat([emb, actions.unsqueeze(-1), vl], dim=-1)).squeeze(-1)
        return q.mean(dim=1)


# ---------------------------------------------------------------------------
# PPO


def ppo_policy_loss(logp_new: torch.Tensor, logp_old: torch.Tensor, adv: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    """Negative clipped surrogate ``-mean(min(r*A, clip(r, 1-eps, 1+eps)*A))``."""
    ratio = torch.exp(logp_new - logp_old)
    clipped = torch.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return -torch.min(ratio * adv, clipped * adv).mean()


@dataclass
class PolicyBatch:
    """Flattened per-sample training data for a feed-forward controller."""

    images: torch.Tensor
    actions: torch.Tensor
    logp_old: torch.Tensor
    advantages: torch.Tensor


class PPO:
    """Clipped-surrogate PPO holding optimizer state across updates."""

    def __init__(self, controller: Controller, critic: ValueCritic, cfg: PPOConfig, rng: np.random.Generator):
        self.controller = controller
        self.critic = critic
        self.cfg = cfg
        self.rng = rng
        self.opt_policy = torch.optim.Adam(controller.parameters(), lr=cfg.lr_policy)
        self.opt_value = torch.optim.Adam(critic.parameters(), lr=cfg.lr_value)

    def _dtype(self) -> torch.dtype:
        return self.controller.head.weight.dtype

    def _step(self, opt, loss, params) -> None:
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite PPO loss {loss.item()}")
        opt.zero_grad()
        loss.backward()
        if self.cfg.max_grad_norm is not None:
            nn.utils.clip_grad_norm_(params, self.cfg.max_grad_norm)
        opt.step()

    def advantages(self, traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
        """GAE advantages and value targets; the episode end is terminal."""
        with torch.no_grad():
            values = self.critic(traj.batch_images().to(self._dtype()), self._val_losses(traj)).double().numpy()
        adv = gae(traj.rewards, values, self.cfg.gamma, self.cfg.gae_lambda, last_value=0.0)
        return adv, adv + values

    def _val_losses(self, traj: Trajectory) -> torch.Tensor:
        return torch.tensor([s.val_loss for s in traj.steps], dtype=self._dtype())

    def update(self, trajectories: list[Trajectory]) -> dict:
        if not trajectories:
            raise ValueError("no trajectories to learn from")
        advs, rets = zip(*(self.advantages(t) for t in trajectories))
        flat = np.concatenate(advs)
        if not np.all(np.isfinite(flat)):
            raise NonFiniteError("non-finite advantage estimate")
        if self.cfg.normalize_advantages and flat.size > 1:
            mean, std = flat.mean(), flat.std()
            advs = [(a - mean) / (std + 1e-8) for a in advs]
        stats = {"value_loss": self._update_critic(trajectories, rets)}
        if self.controller.recurrent:
            stats["policy_loss"] = self._update_recurrent(trajectories, advs)
        else:
            stats["policy_loss"] = self.update_policy(self.policy_batch(trajectories, advs))
        return stats

    def policy_batch(self, trajectories: list[Trajectory], advs) -> PolicyBatch:
        dtype = self._dtype()
        images = torch.cat([t.batch_images().flatten(0, 1) for t in trajectories]).to(dtype)
        actions = np.concatenate([s.actions for t in trajectories for s in t.steps])
        logp_old = np.concatenate([s.log_prob_old for t in trajectories for s in t.steps])
        adv = np.concatenate(
            [np.repeat(a, [len(s.actions) for s in t.steps]) for t, a in zip(trajectories, advs)]
        )
        return PolicyBatch(
            images,
            torch.as_tensor(actions, dtype=dtype),
            torch.as_tensor(logp_old, dtype=dtype),
            torch.as_tensor(adv, dtype=dtype),
        )

    def update_policy(self, batch: PolicyBatch) -> float:
        """Run ``epochs`` passes of clipped-surrogate steps over a flat batch."""
        n = len(batch.actions)
        mb = self.cfg.minibatch_size or n
        params = list(self.controller.parameters())
        loss_value = 0.0
        for _ in range(self.cfg.epochs):
            order = self.rng.permutation(n) if mb < n else np.arange(n)
            for start in range(0, n, mb):
                idx = torch.as_tensor(order[start : start + mb])
                scores = self.controller.score(batch.images[idx])
                logp = bernoulli_log_prob(scores, batch.actions[idx])
                loss = ppo_policy_loss(logp, batch.logp_old[idx], batch.advantages[idx], self.cfg.clip_ratio)
                if self.cfg.entropy_coef:
                    loss = loss - self.cfg.entropy_coef * _bernoulli_entropy(scores).mean()
                self._step(self.opt_policy, loss, params)
                loss_value = float(loss.item())
        return loss_value

    def _update_recurrent(self, trajectories: list[Trajectory], advs) -> float:
        dtype = self._dtype()
        seqs = []
        for traj, adv in zip(trajectories, advs):
            if traj.memory0 is None:
                raise MisuseError("recurrent trajectories must record their starting memory")
            images = traj.batch_images().flatten(0, 1).to(dtype)
            ctx = torch.as_tensor(np.concatenate([s.contexts for s in traj.steps]), dtype=dtype)
            actions = torch.as_tensor(np.concatenate([s.actions for s in traj.steps]), dtype=dtype)
            logp_old = torch.as_tensor(np.concatenate([s.log_prob_old for s in traj.steps]), dtype=dtype)
            a = torch.as_tensor(np.repeat(adv, [len(s.actions) for s in traj.steps]), dtype=dtype)
            seqs.append((traj.memory0, images, ctx, actions, logp_old, a))
        params = list(self.controller.parameters())
        loss_value = 0.0
        for _ in range(self.cfg.epochs):
            losses = []
            for memory0, images, ctx, actions, logp_old, a in seqs:
                scores, _ = self.controller.run_sequence(memory0, self.controller.embed(images), ctx)
                logp = bernoulli_log_prob(scores, actions)
                loss = ppo_policy_loss(logp, logp_old, a, self.cfg.clip_ratio)
                if self.cfg.entropy_coef:
                    loss = loss - self.cfg.entropy_coef * _bernoulli_entropy(scores).mean()
                losses.append(loss)
            total = torch.stack(losses).mean()
            self._step(self.opt_policy, total, params)
            loss_value = float(total.item())
        return loss_value

    def _update_critic(self, trajectories: list[Trajectory], rets) -> float:
        dtype = self._dtype()
        images = torch.cat([t.batch_images() for t in trajectories]).to(dtype)
        vl = torch.cat([self._val_losses(t) for t in trajectories])
        target = torch.as_tensor(np.concatenate(rets), dtype=dtype)
        params = list(self.critic.parameters())
        loss_value = 0.0
        for _ in range(self.cfg.epochs):
            loss = F.mse_loss(self.critic(images, vl), target)
            self._step(self.opt_value, loss, params)
            loss_value = float(loss.item())
        return loss_value


def _bernoulli_entropy(h: torch.Tensor) -> torch.Tensor:
    h = h.clamp(1e-6, 1 - 1e-6)
    return -(h * torch.log(h) + (1 - h) * torch.log1p(-h))


def ppo_update(ppo: PPO, trajectories: list[Trajectory]) -> tuple[Controller, ValueCritic]:
    ppo.update(trajectories)
    return ppo.controller, ppo.critic


# ---------------------------------------------------------------------------
# DDPG


@dataclass
class Transition:
    batch_ids: np.ndarray
    val_loss: float
    actions: np.ndarray
    reward: float
    next_batch_ids: np.ndarray
    next_val_loss: float
    done: bool


@dataclass
class ReplayBuffer:
    capacity: int
    items: list[Transition] = field(default_factory=list)
    cursor: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self.cursor] = tr
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.choice(len(self.items), size=n, replace=False)
        return [self.items[i] for i in idx]


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for pt, po in zip(target.parameters(), online.parameters()):
            pt.mul_(1.0 - tau).add_(po, alpha=tau)


class DDPG:
    """Deterministic actor (the feed-forward controller) with a batch Q critic.

    Exploration perturbs each score with clipped Gaussian noise; the
    environment then selects samples by Bernoulli draws from the noisy
    scores.
    """

    def __init__(self, actor: Controller, critic: QCritic, cfg: DDPGConfig, rng: np.random.Generator):
        if actor.recurrent:
            raise MisuseError("DDPG needs a feed-forward controller; recurrent memory does not survive replay sampling")
        self.actor = actor
        self.critic = critic
        self.cfg = cfg
        self.rng = rng
        self.target_actor = copy.deepcopy(actor)
        self.target_critic = copy.deepcopy(critic)
        self.opt_actor = torch.optim.Adam(actor.parameters(), lr=cfg.lr_actor)
        self.opt_critic = torch.optim.Adam(critic.parameters(), lr=cfg.lr_critic)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)

    def explore(self, scores: np.ndarray) -> np.ndarray:
        noise = self.rng.normal(0.0, self.cfg.exploration_noise_std, size=np.shape(scores))
        return np.clip(np.asarray(scores) + noise, 0.0, 1.0)

    def ready(self) -> bool:
        return len(self.buffer) >= self.cfg.batch_size

    def update(self, images: torch.Tensor) -> dict:
        """One critic + actor step from a replay minibatch; ``images`` is the train-image store."""
        if not self.ready():
            raise ValueError("replay buffer holds fewer transitions than batch_size")
        dtype = self.actor.head.weight.dtype
        batch = self.buffer.sample(self.cfg.batch_size, self.rng)
        x = images[torch.as_tensor(np.stack([t.batch_ids for t in batch]))].to(dtype)
        x_next = images[torch.as_tensor(np.stack([t.next_batch_ids for t in batch]))].to(dtype)
        vl = torch.tensor([t.val_loss for t in batch], dtype=dtype)
        vl_next = torch.tensor([t.next_val_loss for t in batch], dtype=dtype)
        a = torch.as_tensor(np.stack([t.actions for t in batch]), dtype=dtype)
        r = torch.tensor([t.reward for t in batch], dtype=dtype)
        done = torch.tensor([float(t.done) for t in batch], dtype=dtype)

        with torch.no_grad():
            a_next = self.target_actor.score(x_next.flatten(0, 1)).reshape(a.shape)
            y = r + self.cfg.gamma * (1.0 - done) * self.target_critic(x_next, vl_next, a_next)
        critic_loss = F.mse_loss(self.critic(x, vl, a), y)
        if not torch.isfinite(critic_loss):
            raise NonFiniteError("non-finite DDPG critic loss")
        self.opt_critic.zero_grad()
        critic_loss.backward()
        self.opt_critic.step()

        mu = self.actor.score(x.flatten(0, 1)).reshape(a.shape)
        actor_loss = -self.critic(x, vl, mu).mean()
        self.opt_actor.zero_grad()
        actor_loss.backward()
        self.opt_actor.step()

        soft_update(self.target_actor, self.actor, self.cfg.tau)
        soft_update(self.target_critic, self.critic, self.cfg.tau)
        return {"critic_loss": float(critic_loss.item()), "actor_loss": float(actor_loss.item())}


def ddpg_update(agent: DDPG, images: torch.Tensor) -> tuple[Controller, QCritic]:
    agent.update(images)
    return agent.actor, agent.critic
