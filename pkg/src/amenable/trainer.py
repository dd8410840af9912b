"""Controller/predictor co-training loops.

An :class:`Environment` bundles a train/validation set with a task predictor,
a reward strategy and a reward clipper.  Each time-step draws a train batch,
scores it with the controller, samples Bernoulli selections, updates the
predictor on the selected samples, and turns validation metric losses into
a reward.

* :class:`SingleEnvTrainer` - one environment, feed-forward controller,
  dense per-step rewards, PPO or DDPG.
* :class:`MetaTrainer` - a distribution of environments, recurrent
  controller, one environment per trial with memory reset at each trial
  start, sparse end-of-episode rewards, PPO after every episode, and an
  optionally shared predictor synchronised by Reptile.
* :func:`adapt` - frozen-weight adaptation to a new environment, driven only
  by the controller's recurrent memory (and predictor updates).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .controller import Controller, ControllerMemory, StepContext, bernoulli_log_prob, sample_actions
from .data import Dataset
from .errors import ConfigError, MisuseError
from .predictor import Predictor, anneal_epsilon, reptile_update
from .rewards import RewardClipper, RewardStrategy, clip, unclipped_reward
from .rl import DDPG, PPO, DDPGConfig, PPOConfig, QCritic, Step, Trajectory, Transition, ValueCritic
from .seeding import child_rng, torch_generator

log = logging.getLogger(__name__)


@dataclass
class TrialConfig:
    trials: int = 40
    episodes_per_trial: int = 5
    steps_per_episode: int = 10
    batch_size: int = 32
    seed: int = 0
    early_stop: bool = False
    early_stop_window: int = 20
    early_stop_tol: float = 1e-3

    def __post_init__(self) -> None:
        for name in ("trials", "episodes_per_trial", "steps_per_episode", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def total_episodes(self) -> int:
        return self.trials * self.episodes_per_trial


@dataclass(frozen=True)
class Ablation:
    """Switches that turn the full meta-RL method into its ablated variants."""

    env_level_trials: bool = True
    use_reptile: bool = True
    reset_memory_before_adapt: bool = True


class BatchSampler:
    """Epoch-cycling shuffle: every index is drawn once before any repeats."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty set")
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.cursor = 0

    def next(self, size: int) -> np.ndarray:
        size = min(size, self.n)
        out = []
        while size:
            if self.cursor == self.n:
                self.perm = self.rng.permutation(self.n)
                self.cursor = 0
            take = min(size, self.n - self.cursor)
            out.append(self.perm[self.cursor : self.cursor + take])
            self.cursor += take
            size -= take
        return np.concatenate(out)


@dataclass
class Environment:
    """One MDP: training data, validation data, predictor and reward machinery.

    Arrays are indexed positions into ``train_*``/``val_*``; ``val_*`` is
    already restricted to oracle-clean samples for the ``fixed`` strategy.
    """

    id: str
    train_images: torch.Tensor
    train_labels: np.ndarray
    val_images: torch.Tensor
    val_labels: np.ndarray
    predictor: Predictor
    reward_strategy: RewardStrategy
    clipper: RewardClipper
    sampler: BatchSampler
    shadow: Predictor | None = None
    shadow_rng: np.random.Generator | None = None
    current_val_loss: float | None = None

    @classmethod
    def from_dataset(
        cls,
        env_id: str,
        dataset: Dataset,
        predictor: Predictor,
        strategy: RewardStrategy,
        *,
        seed: int,
        alpha: float = 0.9,
        clip_mode: str = "moving_average",
        train_ids: np.ndarray | None = None,
        val_ids: np.ndarray | None = None,
    ) -> "Environment":
        train = dataset.indices("train") if train_ids is None else np.asarray(train_ids)
        val = dataset.indices("val") if val_ids is None else np.asarray(val_ids)
        if strategy.kind == "fixed":
            val = val[dataset.oracle_flags[val]]
        if len(val) == 0:
            raise ConfigError(f"environment {env_id!r} has an empty validation set")
        if tuple(predictor.arch.input_shape) != tuple(dataset.shape):
            raise ConfigError("predictor input shape does not match the dataset")
        return cls._build(
            env_id,
            dataset.images[train],
            dataset.labels[train],
            dataset.images[val],
            dataset.labels[val],
            predictor,
            strategy,
            seed=seed,
            alpha=alpha,
            clip_mode=clip_mode,
        )

    @classmethod
    def _build(cls, env_id, tx, ty, vx, vy, predictor, strategy, *, seed, alpha, clip_mode, salt=0):
        shadow = shadow_rng = None
        if clip_mode == "external":
            shadow = predictor.clone()
            shadow_rng = child_rng(seed, "env", 1, salt)
        return cls(
            id=env_id,
            train_images=torch.as_tensor(np.asarray(tx, dtype=np.float32)),
            train_labels=np.asarray(ty),
            val_images=torch.as_tensor(np.asarray(vx, dtype=np.float32)),
            val_labels=np.asarray(vy),
            predictor=predictor,
            reward_strategy=strategy,
            clipper=RewardClipper(alpha=alpha, mode=clip_mode),
            sampler=BatchSampler(len(tx), child_rng(seed, "batches", salt)),
            shadow=shadow,
            shadow_rng=shadow_rng,
        )

    @classmethod
    def pooled(cls, env_id: str, envs: list["Environment"], predictor: Predictor, *, seed: int) -> "Environment":
        """All train and validation data of ``envs`` merged into one environment."""
        first = envs[0]
        return cls._build(
            env_id,
            torch.cat([e.train_images for e in envs]).numpy(),
            np.concatenate([e.train_labels for e in envs]),
            torch.cat([e.val_images for e in envs]).numpy(),
            np.concatenate([e.val_labels for e in envs]),
            predictor,
            first.reward_strategy,
            seed=seed,
            alpha=first.clipper.alpha,
            clip_mode=first.clipper.mode,
            salt=99,
        )

    def subset(self, train_pos: np.ndarray, val_pos: np.ndarray, *, seed: int) -> "Environment":
        return self._build(
            self.id,
            self.train_images[torch.as_tensor(train_pos)].numpy(),
            self.train_labels[train_pos],
            self.val_images[torch.as_tensor(val_pos)].numpy(),
            self.val_labels[val_pos],
            self.predictor,
            self.reward_strategy,
            seed=seed,
            alpha=self.clipper.alpha,
            clip_mode=self.clipper.mode,
            salt=7,
        )

    @property
    def n_train(self) -> int:
        return len(self.train_labels)

    @property
    def n_val(self) -> int:
        return len(self.val_labels)

    def val_loss(self) -> float:
        return float(self.predictor.evaluate_metric(self.val_images, self.val_labels).mean())


@dataclass
class EnvironmentDistribution:
    environments: list[Environment]
    sampling_weights: list[float] | None = None
    share_predictor: bool = True
    share_images: bool = True

    def __post_init__(self) -> None:
        if not self.environments:
            raise ConfigError("environment distribution is empty")
        if self.sampling_weights is None:
            self.sampling_weights = [1.0 / len(self.environments)] * len(self.environments)
        w = np.asarray(self.sampling_weights, dtype=np.float64)
        if len(w) != len(self.environments) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigError("sampling weights must be non-negative and sum to 1")

    def sample(self, rng: np.random.Generator) -> Environment:
        if len(self.environments) == 1:
            return self.environments[0]
        return self.environments[int(rng.choice(len(self.environments), p=self.sampling_weights))]


@dataclass
class RecurrentState:
    memory: ControllerMemory
    context: StepContext = field(default_factory=StepContext)


LogFn = Callable[[dict], None]


# ---------------------------------------------------------------------------
# one episode


def _val_scores(controller: Controller, env: Environment, val_emb, state: RecurrentState | None):
    with torch.no_grad():
        if not controller.recurrent:
            return torch.sigmoid(controller.head(val_emb)).squeeze(-1).double().numpy()
        n = val_emb.shape[0]
        h = state.memory.h.unsqueeze(1).expand(-1, n, -1).contiguous()
        c = state.memory.c.unsqueeze(1).expand(-1, n, -1).contiguous()
        ctx = torch.tensor([state.context.as_list()], dtype=val_emb.dtype).expand(n, 3)
        return controller.step(h, c, val_emb, ctx)[0].double().numpy()


def run_episode(
    env: Environment,
    controller: Controller,
    state: RecurrentState | None,
    rng: np.random.Generator,
    cfg: TrialConfig,
    *,
    sparse: bool = False,
    ddpg: DDPG | None = None,
    force_scores: float | None = None,
    on_step: LogFn | None = None,
) -> tuple[Trajectory, Environment, RecurrentState | None]:
    """Run ``cfg.steps_per_episode`` steps; returns the trajectory, env and advanced memory.

    With ``sparse=True`` the emitted reward is zero except at the final step.
    ``force_scores`` replaces controller scores by a constant (baselines,
    tests).  With ``ddpg`` the scores are perturbed for exploration and
    transitions are pushed to its replay buffer, with one DDPG update per
    step once the buffer is warm.
    """
    recurrent = controller.recurrent
    if recurrent and state is None:
        raise MisuseError("recurrent controller needs a memory state")
    T, B = cfg.steps_per_episode, min(cfg.batch_size, env.n_train)
    needs_scores = env.reward_strategy.kind != "fixed"
    with torch.no_grad():
        val_emb = controller.embed(env.val_images) if needs_scores and force_scores is None else None
    if env.current_val_loss is None:
        env.current_val_loss = env.val_loss()
    memory0 = state.memory if recurrent else None
    steps: list[Step] = []
    pending: Transition | None = None

    for t in range(T):
        done = t == T - 1
        ids = env.sampler.next(B)
        x = env.train_images[torch.as_tensor(ids)]
        y = env.train_labels[ids]
        contexts = None
        if recurrent:
            with torch.no_grad():
                emb = controller.embed(x)
                h = state.memory.h.unsqueeze(1)
                c = state.memory.c.unsqueeze(1)
                scores = np.empty(len(ids))
                actions = np.empty(len(ids))
                contexts = np.empty((len(ids), 3))
                ctx = state.context.as_list()
                for i in range(len(ids)):
                    contexts[i] = ctx
                    s, h, c = controller.step(h, c, emb[i : i + 1], torch.tensor([ctx], dtype=emb.dtype))
                    scores[i] = float(s[0]) if force_scores is None else force_scores
                    actions[i] = float(rng.random() < scores[i])
                    ctx = [actions[i], 0.0, 0.0]
                state = RecurrentState(ControllerMemory(h.squeeze(1), c.squeeze(1)), StepContext(*ctx))
        else:
            if force_scores is not None:
                scores = np.full(len(ids), float(force_scores))
            else:
                with torch.no_grad():
                    scores = controller.score(x).double().numpy()
                if ddpg is not None:
                    scores = ddpg.explore(scores)
            actions = sample_actions(scores, rng)
        logp = bernoulli_log_prob(scores, actions)

        val_loss_before = env.current_val_loss
        env.predictor.weighted_train_step(x, y, actions)
        losses = env.predictor.evaluate_metric(env.val_images, env.val_labels)
        hv = None
        if needs_scores:
            hv = np.ones(env.n_val) if val_emb is None else _val_scores(controller, env, val_emb, state)
        r_tilde = unclipped_reward(env.reward_strategy, losses, hv)
        baseline = None
        if env.shadow is not None:
            rand = (env.shadow_rng.random(len(ids)) < actions.mean()).astype(np.float64)
            env.shadow.weighted_train_step(x, y, rand)
            baseline = unclipped_reward(
                env.reward_strategy, env.shadow.evaluate_metric(env.val_images, env.val_labels), hv
            )
        reward, env.clipper = clip(env.clipper, r_tilde, baseline)
        emitted = reward if (done or not sparse) else 0.0
        env.current_val_loss = float(losses.mean())

        steps.append(
            Step(
                batch_ids=ids,
                scores=scores,
                actions=actions,
                log_prob_old=logp,
                reward=emitted,
                done=done,
                val_loss=val_loss_before,
                r_tilde=r_tilde,
                contexts=contexts,
            )
        )
        if recurrent:
            state = replace(state, context=StepContext(state.context.prev_action, emitted, float(done)))
        if ddpg is not None:
            if pending is not None:
                pending.next_batch_ids = ids
                pending.next_val_loss = val_loss_before
                ddpg.buffer.add(pending)
            replayed = actions if ddpg.cfg.replay_action == "selection" else scores
            pending = Transition(ids, val_loss_before, replayed, emitted, ids, env.current_val_loss, done)
            if done:
                ddpg.buffer.add(pending)
            if ddpg.ready():
                ddpg.update(env.train_images)
        if on_step is not None:
            on_step(
                {
                    "env": env.id,
                    "step": t,
                    "r_tilde": r_tilde,
                    "reward": emitted,
                    "val_metric": env.current_val_loss,
                    "n_selected": int(actions.sum()),
                }
            )
    return Trajectory(steps, env.train_images, memory0), env, state


# ---------------------------------------------------------------------------
# trainers


class _PlateauDetector:
    def __init__(self, cfg: TrialConfig):
        self.cfg = cfg
        self.history: list[float] = []

    def update(self, value: float) -> bool:
        self.history.append(value)
        w = self.cfg.early_stop_window
        if not self.cfg.early_stop or len(self.history) < 2 * w:
            return False
        prev = float(np.mean(self.history[-2 * w : -w]))
        last = float(np.mean(self.history[-w:]))
        return abs(last - prev) <= self.cfg.early_stop_tol * max(abs(prev), 1e-12)


def _make_critic(controller: Controller, seed: int):
    return ValueCritic(controller.input_shape, generator=torch_generator(seed, "init", 10))


class SingleEnvTrainer:
    """Dense-reward RL on one environment with a feed-forward controller."""

    def __init__(
        self,
        env: Environment,
        controller: Controller,
        cfg: TrialConfig,
        *,
        algorithm: str = "ppo",
        ppo: PPOConfig | None = None,
        ddpg: DDPGConfig | None = None,
    ):
        if controller.recurrent:
            raise MisuseError("single-environment training uses a feed-forward controller")
        self.env = env
        self.controller = controller
        self.cfg = cfg
        self.algorithm = algorithm
        self.action_rng = child_rng(cfg.seed, "actions")
        rl_rng = child_rng(cfg.seed, "rl")
        if algorithm == "ppo":
            self.learner = PPO(controller, _make_critic(controller, cfg.seed), ppo or PPOConfig(), rl_rng)
        elif algorithm == "ddpg":
            critic = QCritic(controller.input_shape, generator=torch_generator(cfg.seed, "init", 11))
            self.learner = DDPG(controller, critic, ddpg or DDPGConfig(), rl_rng)
        else:
            raise ConfigError(f"unknown RL algorithm {algorithm!r}")
        self.episode = 0
        self.plateau = _PlateauDetector(cfg)
        self.stopped_early = False

    def run(self, on_step: LogFn | None = None, on_episode: Callable[["SingleEnvTrainer"], None] | None = None):
        while self.episode < self.cfg.total_episodes and not self.stopped_early:
            episode = self.episode

            def log_step(row, episode=episode):
                if on_step is not None:
                    on_step({"trial": episode // self.cfg.episodes_per_trial, "episode": episode, **row})

            traj, self.env, _ = run_episode(
                self.env,
                self.controller,
                None,
                self.action_rng,
                self.cfg,
                ddpg=self.learner if self.algorithm == "ddpg" else None,
                on_step=log_step,
            )
            if self.algorithm == "ppo":
                self.learner.update([traj])
            self.episode += 1
            self.stopped_early = self.plateau.update(float(np.mean([s.r_tilde for s in traj.steps])))
            if on_episode is not None:
                on_episode(self)
        return self.controller, self.env


def run_single_env_training(env, controller, cfg, **kwargs):
    return SingleEnvTrainer(env, controller, cfg, **kwargs).run()


class MetaTrainer:
    """Trial loop over a distribution of environments with a recurrent controller."""

    def __init__(
        self,
        dist: EnvironmentDistribution,
        controller: Controller,
        cfg: TrialConfig,
        *,
        ppo: PPOConfig | None = None,
        ablation: Ablation = Ablation(),
        meta_predictor: Predictor | None = None,
    ):
        if not controller.recurrent:
            raise MisuseError("meta-RL training needs a recurrent controller")
        self.cfg = cfg
        self.ablation = ablation
        self.controller = controller
        self.source_dist = dist
        if not ablation.env_level_trials:
            pooled_pred = meta_predictor.clone() if meta_predictor is not None else dist.environments[0].predictor
            pooled = Environment.pooled("pooled", dist.environments, pooled_pred, seed=cfg.seed)
            dist = EnvironmentDistribution([pooled], None, dist.share_predictor, dist.share_images)
        self.dist = dist
        self.meta_predictor = meta_predictor
        if dist.share_predictor and meta_predictor is None:
            raise ConfigError("share_predictor needs a meta predictor")
        self.learner = PPO(controller, _make_critic(controller, cfg.seed), ppo or PPOConfig(), child_rng(cfg.seed, "rl"))
        self.action_rng = child_rng(cfg.seed, "actions")
        self.env_rng = child_rng(cfg.seed, "env")
        self.trial = 0
        self.state: RecurrentState | None = None
        self.env_history: list[str] = []
        self.memory_at_trial_start: list[bool] = []
        self.plateau = _PlateauDetector(cfg)
        self.stopped_early = False

    def run(self, on_step: LogFn | None = None, on_trial: Callable[["MetaTrainer"], None] | None = None):
        while self.trial < self.cfg.trials and not self.stopped_early:
            trial = self.trial
            env = self.dist.sample(self.env_rng)
            self.env_history.append(env.id)
            self.state = RecurrentState(self.controller.initial_memory())
            self.memory_at_trial_start.append(self.state.memory.is_zero())
            w_base = None
            if self.dist.share_predictor:
                w_base = self.meta_predictor.get_flat()
                env.predictor.set_flat(w_base)
                env.predictor.reset_optimizer()
                env.current_val_loss = None
            rewards = []
            for e in range(self.cfg.episodes_per_trial):

                def log_step(row, e=e):
                    if on_step is not None:
                        on_step({"trial": trial, "episode": e, **row})

                traj, env, self.state = run_episode(
                    env, self.controller, self.state, self.action_rng, self.cfg, sparse=True, on_step=log_step
                )
                self.learner.update([traj])
                rewards.append(np.mean([s.r_tilde for s in traj.steps]))
            if self.dist.share_predictor:
                w_new = env.predictor.get_flat()
                eps = anneal_epsilon(trial, self.cfg.trials) if self.ablation.use_reptile else 1.0
                self.meta_predictor.set_flat(reptile_update(w_base, w_new, eps).astype(np.float32))
            self.trial += 1
            self.stopped_early = self.plateau.update(float(np.mean(rewards)))
            if on_trial is not None:
                on_trial(self)
        return self.controller, self.dist


def run_meta_training(dist, controller, cfg, **kwargs):
    return MetaTrainer(dist, controller, cfg, **kwargs).run()


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptResult:
    state: RecurrentState
    predictor: Predictor
    n_train: int
    n_val: int


def adapt(
    controller: Controller,
    env_new: Environment,
    k: float,
    cfg: TrialConfig,
    *,
    episodes: int = 20,
    reset_memory: bool = True,
    state: RecurrentState | None = None,
    on_step: LogFn | None = None,
) -> AdaptResult:
    """Adapt to ``env_new`` using ``k`` of its train and validation data.

    Controller weights stay frozen; its memory evolves across ``episodes``
    episodes without further resets, and ``env_new.predictor`` trains on the
    selected batches.  ``k = 0`` performs no interaction.
    """
    if not controller.recurrent:
        raise MisuseError("adaptation needs a recurrent controller")
    if not 0.0 <= k <= 1.0:
        raise ConfigError("k must lie in [0, 1]")
    if reset_memory or state is None:
        state = RecurrentState(controller.initial_memory())
    if k == 0.0:
        return AdaptResult(state, env_new.predictor, 0, 0)
    rng = child_rng(cfg.seed, "adapt")
    n_train = int(np.floor(k * env_new.n_train + 1e-9))
    n_val = int(np.floor(k * env_new.n_val + 1e-9))
    if n_train == 0 or n_val == 0:
        raise ConfigError(f"k={k} leaves {n_train} train / {n_val} validation samples")
    train_pos = rng.permutation(env_new.n_train)[:n_train]
    val_pos = rng.permutation(env_new.n_val)[:n_val]
    env = env_new.subset(train_pos, val_pos, seed=cfg.seed)
    before = controller.get_flat()
    action_rng = child_rng(cfg.seed, "adapt", 1)
    for e in range(episodes):

        def log_step(row, e=e):
            if on_step is not None:
                on_step({"trial": -1, "episode": e, **row})

        _, env, state = run_episode(env, controller, state, action_rng, cfg, sparse=True, on_step=log_step)
    assert np.array_equal(before, controller.get_flat()), "controller weights changed during adaptation"
    return AdaptResult(state, env.predictor, n_train, n_val)


# ---------------------------------------------------------------------------
# baselines


def train_non_selective(env: Environment, steps: int, batch_size: int) -> Predictor:
    """Train ``env.predictor`` on every sampled batch with unit weights."""
    for _ in range(steps):
        ids = env.sampler.next(min(batch_size, env.n_train))
        env.predictor.weighted_train_step(env.train_images[torch.as_tensor(ids)], env.train_labels[ids], np.ones(len(ids)))
    return env.predictor
