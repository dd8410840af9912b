"""Experiment orchestration behind the command line: build, train, adapt, evaluate.

A run directory holds::

    manifest.json        resolved config, version string, status, artifact list
    rewards.csv          trial,episode,step,r_tilde,reward,val_metric,env
    checkpoints/         controller.ckpt, predictor.ckpt (+ periodic copies)
    state.pt             pickled trainer state for resuming (periodic runs only)
    memory.pt            final recurrent memory (meta and adapt runs)
    eval/sweep.csv       ratio,metric_mean,metric_std,n_retained
    eval/contingency.json, eval/summary.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig, config_from_dict, load_raw
from .controller import Controller, StepContext
from .data import Dataset, SynthSpec, generate_observer_study, generate_synthetic, load_manifest
from .errors import ConfigError
from .evaluation import contingency, controller_scores, select_holdout, sweep_from_scores
from .predictor import ArchSpec, Predictor
from .rewards import RewardStrategy
from .rl import DDPGConfig, PPOConfig
from .seeding import child_int, child_rng, torch_generator
from .trainer import (
    Ablation,
    Environment,
    EnvironmentDistribution,
    MetaTrainer,
    RecurrentState,
    SingleEnvTrainer,
    TrialConfig,
    adapt,
    train_non_selective,
)

log = logging.getLogger(__name__)

REWARD_FIELDS = ["trial", "episode", "step", "r_tilde", "reward", "val_metric", "env"]
SWEEP_FIELDS = ["ratio", "metric_mean", "metric_std", "n_retained"]


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# construction from config


def synth_spec(cfg: RunConfig) -> SynthSpec:
    s = cfg.data.synth
    return SynthSpec(
        n_samples=s.n_samples,
        n_subjects=s.n_subjects or s.n_samples,
        shape=tuple(s.shape),
        task_kind=cfg.task,
        corrupt_fraction=s.corrupt_fraction,
        seed=child_int(cfg.seed, "data"),
        split_fractions=tuple(s.split_fractions),
        flip_probability=s.flip_probability,
        positive_fraction=s.positive_fraction,
    )


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.path is not None:
        ds = load_manifest(cfg.data.path)
        if ds.task_kind != cfg.task:
            raise ConfigError(f"data.path holds a {ds.task_kind} dataset but task is {cfg.task}")
        return ds
    return generate_synthetic(synth_spec(cfg))


def load_observer_study(cfg: RunConfig) -> tuple[Dataset, list[Dataset]]:
    if cfg.data.path is not None:
        raise ConfigError("meta and adapt modes generate an observer study; data.path is not supported")
    return generate_observer_study(synth_spec(cfg), cfg.data.observer_flip_rates)


def arch_for(cfg: RunConfig, shape) -> ArchSpec:
    return ArchSpec(cfg.task, tuple(shape), hidden=cfg.predictor.hidden, channels=cfg.predictor.channels)


def make_predictor(cfg: RunConfig, shape, *extra: int) -> Predictor:
    return Predictor(
        arch_for(cfg, shape),
        optimizer=cfg.predictor.optimizer,
        lr=cfg.predictor.lr,
        generator=torch_generator(cfg.seed, "init", 0, *extra),
    )


def make_controller(cfg: RunConfig, shape) -> Controller:
    c = cfg.controller
    return Controller(
        tuple(shape),
        encoder=tuple(c.encoder),
        recurrent=bool(c.recurrent),
        hidden_dim=c.hidden_dim,
        num_layers=c.num_layers,
        generator=torch_generator(cfg.seed, "init", 1),
    )


def reward_strategy(cfg: RunConfig) -> RewardStrategy:
    s_rej = cfg.reward.s_rej if cfg.reward.strategy == "selective" else 0.0
    return RewardStrategy(cfg.reward.strategy, s_rej)


def make_env(cfg: RunConfig, env_id: str, dataset: Dataset, predictor: Predictor, salt: int = 0) -> Environment:
    return Environment.from_dataset(
        env_id,
        dataset,
        predictor,
        reward_strategy(cfg),
        seed=child_int(cfg.seed, "env", 2, salt),
        alpha=cfg.reward.alpha,
        clip_mode=cfg.reward.clip_mode,
    )


def trial_config(cfg: RunConfig) -> TrialConfig:
    t = cfg.training
    return TrialConfig(
        trials=t.trials,
        episodes_per_trial=t.episodes_per_trial,
        steps_per_episode=t.steps_per_episode,
        batch_size=t.batch_size,
        seed=cfg.seed,
        early_stop=t.early_stop,
        early_stop_window=t.early_stop_window,
        early_stop_tol=t.early_stop_tol,
    )


def ppo_config(cfg: RunConfig) -> PPOConfig:
    return PPOConfig(**cfg.rl.ppo.model_dump())


def ddpg_config(cfg: RunConfig) -> DDPGConfig:
    return DDPGConfig(**cfg.rl.ddpg.model_dump())


def ablation(cfg: RunConfig) -> Ablation:
    return Ablation(**cfg.ablation.model_dump())


# ---------------------------------------------------------------------------
# run directory plumbing


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RewardLog:
    """Append-only CSV of per-step rewards that can be truncated back to a resume point."""

    def __init__(self, path: Path, resume_offset: int | None = None):
        self.path = path
        if resume_offset is None:
            self.fh = open(path, "w", encoding="utf-8", newline="")
            self.fh.write(",".join(REWARD_FIELDS) + "\n")
        else:
            self.fh = open(path, "r+", encoding="utf-8", newline="")
            self.fh.truncate(resume_offset)
            self.fh.seek(resume_offset)

    def __call__(self, row: dict) -> None:
        self.fh.write(",".join(_fmt(row.get(k, "")) for k in REWARD_FIELDS) + "\n")

    def offset(self) -> int:
        self.fh.flush()
        return self.fh.tell()

    def close(self) -> None:
        self.fh.close()


def write_manifest(out: Path, cfg: RunConfig, status: str, artifacts: list[str], extra: dict | None = None) -> None:
    doc = {
        "version": version_string(),
        "status": status,
        "config": cfg.model_dump(mode="json"),
        "artifacts": sorted(artifacts),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_run_config(run_dir: str | Path) -> RunConfig:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"{run_dir} is not a run directory (no manifest.json)")
    return config_from_dict(json.loads(path.read_text(encoding="utf-8"))["config"])


def _save_memory(path: Path, state: RecurrentState) -> None:
    ctx = state.context
    torch.save(
        {"h": state.memory.h, "c": state.memory.c, "context": [float(v) for v in ctx.as_list()]},
        path,
    )


def _load_memory(path: Path) -> RecurrentState:
    from .controller import ControllerMemory

    d = torch.load(path, weights_only=True)
    return RecurrentState(ControllerMemory(d["h"], d["c"]), StepContext(*d["context"]))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalOutput:
    summary: dict
    sweep_rows: list[dict]
    table: dict


def evaluate_holdout(
    cfg: RunConfig,
    controller: Controller,
    predictor: Predictor,
    dataset: Dataset,
    state: RecurrentState | None = None,
    ratios: list[float] | None = None,
) -> EvalOutput:
    """Rejection sweep, contingency table and headline numbers on the holdout split."""
    idx = dataset.indices("holdout")
    images = dataset.images[idx]
    labels = dataset.labels[idx]
    flags = dataset.oracle_flags[idx]
    scores = controller_scores(controller, images, state)
    performance = 1.0 - predictor.evaluate_metric(images, labels)
    subjects = None
    if dataset.has_informative_subjects():
        subjects = np.array([dataset.samples[i].subject_id for i in idx])
    ratios = list(ratios if ratios is not None else cfg.evaluation.ratios)
    sweep = sweep_from_scores(
        scores,
        performance,
        ratios,
        subjects=subjects,
        rng=child_rng(cfg.seed, "bootstrap"),
        n_resamples=cfg.evaluation.n_bootstrap,
    )
    hr = cfg.evaluation.holdout_ratio
    keep = select_holdout(scores, hr)
    table = contingency(scores, flags, hr) if flags.any() and (~flags).any() else None
    summary = {
        "n_holdout": int(len(idx)),
        "holdout_ratio": hr,
        "metric_all": float(performance.mean()),
        "metric_selected": float(performance[keep].mean()),
        "best_ratio": sweep.best_ratio() if sweep.ratios else None,
        "kappa": None if table is None or not table.kappa_defined else table.kappa,
    }
    return EvalOutput(summary, sweep.rows(), table.to_json() if table is not None else {})


def write_eval(out: Path, result: EvalOutput) -> list[str]:
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO(newline="")
    w = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in result.sweep_rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    (d / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    (d / "contingency.json").write_text(json.dumps(result.table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (d / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["eval/sweep.csv", "eval/contingency.json", "eval/summary.json"]


# ---------------------------------------------------------------------------
# training runs


def _prepare(out: Path, cfg: RunConfig, resume: bool) -> None:
    if not resume and (out / "manifest.json").exists():
        prev = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        if prev.get("status") == "complete":
            log.info("overwriting completed run in %s", out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    write_manifest(out, cfg, "incomplete", [])


def _save_state(out: Path, trainer, log_offset: int) -> None:
    tmp = out / "state.pt.tmp"
    torch.save({"trainer": trainer, "log_offset": log_offset}, tmp)
    os.replace(tmp, out / "state.pt")


def _load_state(out: Path):
    path = out / "state.pt"
    if not path.is_file():
        raise ConfigError(f"cannot resume: {path} not found")
    d = torch.load(path, weights_only=False)
    return d["trainer"], d["log_offset"]


def run_single(cfg: RunConfig, out: Path, resume: bool = False) -> EvalOutput:
    dataset = load_dataset(cfg)
    _prepare(out, cfg, resume)
    if resume:
        trainer, offset = _load_state(out)
    else:
        predictor = make_predictor(cfg, dataset.shape)
        env = make_env(cfg, "env0", dataset, predictor)
        controller = make_controller(cfg, dataset.shape)
        trainer = SingleEnvTrainer(
            env,
            controller,
            trial_config(cfg),
            algorithm=cfg.rl.algorithm,
            ppo=ppo_config(cfg),
            ddpg=ddpg_config(cfg),
        )
        offset = None
    rlog = RewardLog(out / "rewards.csv", offset)
    every = cfg.training.checkpoint_every

    def on_episode(tr: SingleEnvTrainer) -> None:
        if every and tr.episode % every == 0:
            tr.controller.save(out / "checkpoints" / f"controller_{tr.episode:06d}.ckpt")
            _save_state(out, tr, rlog.offset())

    try:
        trainer.run(on_step=rlog, on_episode=on_episode)
    finally:
        rlog.close()
    trainer.controller.save(out / "checkpoints" / "controller.ckpt")
    trainer.env.predictor.save(out / "checkpoints" / "predictor.ckpt")
    result = evaluate_holdout(cfg, trainer.controller, trainer.env.predictor, dataset)
    arts = ["rewards.csv", "checkpoints/controller.ckpt", "checkpoints/predictor.ckpt", *write_eval(out, result)]
    write_manifest(out, cfg, "complete", arts, {"episodes": trainer.episode, "stopped_early": trainer.stopped_early})
    return result


def build_meta(cfg: RunConfig, observers: list[Dataset]) -> tuple[EnvironmentDistribution, Predictor | None]:
    shape = observers[0].shape
    meta_predictor = make_predictor(cfg, shape) if cfg.training.share_predictor else None
    envs = []
    for k, ds in enumerate(observers):
        pred = meta_predictor.clone() if meta_predictor is not None else make_predictor(cfg, shape, k + 1)
        envs.append(make_env(cfg, f"observer{k}", ds, pred, salt=k))
    dist = EnvironmentDistribution(
        envs, share_predictor=cfg.training.share_predictor, share_images=cfg.training.share_images
    )
    return dist, meta_predictor


def run_meta(cfg: RunConfig, out: Path, resume: bool = False) -> EvalOutput:
    expert, observers = load_observer_study(cfg)
    _prepare(out, cfg, resume)
    if resume:
        trainer, offset = _load_state(out)
    else:
        dist, meta_predictor = build_meta(cfg, observers)
        controller = make_controller(cfg, expert.shape)
        trainer = MetaTrainer(
            dist,
            controller,
            trial_config(cfg),
            ppo=ppo_config(cfg),
            ablation=ablation(cfg),
            meta_predictor=meta_predictor,
        )
        offset = None
    rlog = RewardLog(out / "rewards.csv", offset)
    every = cfg.training.checkpoint_every

    def on_trial(tr: MetaTrainer) -> None:
        if every and tr.trial % every == 0:
            tr.controller.save(out / "checkpoints" / f"controller_{tr.trial:06d}.ckpt")
            _save_state(out, tr, rlog.offset())

    try:
        trainer.run(on_step=rlog, on_trial=on_trial)
    finally:
        rlog.close()
    predictor = trainer.meta_predictor if trainer.meta_predictor is not None else trainer.dist.environments[0].predictor
    trainer.controller.save(out / "checkpoints" / "controller.ckpt")
    predictor.save(out / "checkpoints" / "predictor.ckpt")
    _save_memory(out / "memory.pt", trainer.state)
    # zero-shot view: fresh memory on the expert holdout
    result = evaluate_holdout(cfg, trainer.controller, predictor, expert, RecurrentState(trainer.controller.zero_memory()))
    arts = [
        "rewards.csv",
        "checkpoints/controller.ckpt",
        "checkpoints/predictor.ckpt",
        "memory.pt",
        *write_eval(out, result),
    ]
    write_manifest(out, cfg, "complete", arts, {"trials": trainer.trial, "env_history": trainer.env_history})
    return result


def run_adapt(cfg: RunConfig, out: Path) -> EvalOutput:
    """Adapt a meta-trained controller (``cfg.adapt.checkpoint_dir``) to the expert environment."""
    src = cfg.adapt.checkpoint_dir
    if src is None:
        raise ConfigError("adapt.checkpoint_dir: required in adapt mode")
    src = Path(src)
    train_cfg = read_run_config(src)
    expert, _ = load_observer_study(train_cfg)
    controller = Controller.load(src / "checkpoints" / "controller.ckpt")
    predictor = Predictor.load(src / "checkpoints" / "predictor.ckpt")
    predictor.lr = cfg.predictor.lr
    predictor.reset_optimizer()
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, "incomplete", [])
    env = make_env(cfg, "expert", expert, predictor, salt=100)
    state = None
    if not cfg.ablation.reset_memory_before_adapt:
        state = _load_memory(src / "memory.pt")
    rlog = RewardLog(out / "rewards.csv")
    try:
        res = adapt(
            controller,
            env,
            cfg.adapt.k,
            trial_config(cfg),
            episodes=cfg.adapt.episodes,
            reset_memory=cfg.ablation.reset_memory_before_adapt,
            state=state,
            on_step=rlog,
        )
    finally:
        rlog.close()
    (out / "checkpoints").mkdir(exist_ok=True)
    res.predictor.save(out / "checkpoints" / "predictor.ckpt")
    controller.save(out / "checkpoints" / "controller.ckpt")
    _save_memory(out / "memory.pt", res.state)
    result = evaluate_holdout(cfg, controller, res.predictor, expert, res.state)
    arts = [
        "rewards.csv",
        "checkpoints/controller.ckpt",
        "checkpoints/predictor.ckpt",
        "memory.pt",
        *write_eval(out, result),
    ]
    write_manifest(out, cfg, "complete", arts, {"n_train": res.n_train, "n_val": res.n_val, "source": str(src)})
    return result


def non_selective_baseline(cfg: RunConfig, dataset: Dataset | None = None) -> float:
    """Full-holdout performance of a predictor trained on every sample.

    Uses the same data, predictor initialisation and predictor-step budget
    as a single-environment run of ``cfg``.
    """
    dataset = dataset if dataset is not None else load_dataset(cfg)
    env = make_env(cfg, "baseline", dataset, make_predictor(cfg, dataset.shape))
    t = cfg.training
    train_non_selective(env, t.trials * t.episodes_per_trial * t.steps_per_episode, t.batch_size)
    idx = dataset.indices("holdout")
    return float(1.0 - env.predictor.evaluate_metric(dataset.images[idx], dataset.labels[idx]).mean())


def run(cfg: RunConfig, out: str | Path | None = None, resume: bool = False) -> EvalOutput:
    torch.set_num_threads(1)
    out = Path(out if out is not None else cfg.output_dir)
    if cfg.mode == "single":
        return run_single(cfg, out, resume)
    if cfg.mode == "meta":
        return run_meta(cfg, out, resume)
    if resume:
        raise ConfigError("adapt runs are short and cannot be resumed; rerun them")
    return run_adapt(cfg, out)


def evaluate_run(run_dir: str | Path, ratios: list[float] | None = None, out: str | Path | None = None) -> EvalOutput:
    """Re-evaluate a finished run directory from its checkpoints."""
    run_dir = Path(run_dir)
    cfg = read_run_config(run_dir)
    controller = Controller.load(run_dir / "checkpoints" / "controller.ckpt")
    predictor = Predictor.load(run_dir / "checkpoints" / "predictor.ckpt")
    if cfg.mode == "single":
        dataset, state = load_dataset(cfg), None
    else:
        src_cfg = cfg if cfg.mode == "meta" else read_run_config(cfg.adapt.checkpoint_dir)
        dataset = load_observer_study(src_cfg)[0]
        state = _load_memory(run_dir / "memory.pt") if cfg.mode == "adapt" else RecurrentState(controller.zero_memory())
    result = evaluate_holdout(cfg, controller, predictor, dataset, state, ratios)
    write_eval(Path(out) if out is not None else run_dir, result)
    return result


def config_with_overrides(base: dict, overrides: dict[str, object]) -> RunConfig:
    """Apply dotted-path overrides (``{"reward.s_rej": 0.1}``) to a raw config."""
    raw = json.loads(json.dumps(base))
    for path, value in overrides.items():
        node = raw
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{path}: cannot override inside a non-table value")
        node[leaf] = value
    return config_from_dict(raw)


def load_config_file(path: str | Path) -> dict:
    return load_raw(path)
