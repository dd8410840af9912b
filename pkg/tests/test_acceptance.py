"""End-to-end acceptance criteria A1-A9.

Each test prints (and adds to the terminal summary) one PASS/FAIL line.
The training-based criteria take minutes each; the whole module runs in
roughly an hour on one CPU core.
"""

import itertools
import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import torch
from sklearn.metrics import cohen_kappa_score

from amenable.controller import Controller, log_prob
from amenable.data import SynthSpec, generate_synthetic
from amenable.evaluation import auroc, controller_scores, select_holdout, table_from_counts
from amenable.predictor import anneal_epsilon, dice, reptile_update
from amenable.rewards import RewardClipper, RewardStrategy, clip, unclipped_reward
from amenable.rl import discounted_returns
from amenable.runner import config_with_overrides, evaluate_run, load_dataset, non_selective_baseline, run

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]

# single-environment setting: 2000 train / 400 val / 400 holdout, 30% corrupted
SINGLE = {
    "mode": "single",
    "task": "classification",
    "data": {"synth": {"n_samples": 2800, "corrupt_fraction": 0.3}},
    "training": {"trials": 200, "episodes_per_trial": 5, "steps_per_episode": 10, "batch_size": 32},
    "evaluation": {"holdout_ratio": 0.3, "n_bootstrap": 200},
}

# observer study: three noisy-label environments over shared images, clean labels held out
META_TRIALS = 150
META = {
    "mode": "meta",
    "task": "classification",
    "data": {"synth": {"n_samples": 2800, "corrupt_fraction": 0.0}, "observer_flip_rates": [0.1, 0.15, 0.2]},
    "training": {"trials": META_TRIALS, "episodes_per_trial": 5, "steps_per_episode": 10, "batch_size": 32},
    "evaluation": {"n_bootstrap": 200},
}
ADAPT_EPISODES = 20
# clean-label comparator: the same number of controller steps as meta-training plus adaptation
CLEAN_TRIALS = (META_TRIALS * 5 * 10 + ADAPT_EPISODES * 10) // 50
VARIANT = {"env_level_trials": False, "use_reptile": False, "reset_memory_before_adapt": False}
NO_REPTILE = {"use_reptile": False}


def median(values):
    return statistics.median(values)


def holdout_auroc(run_dir, cfg):
    dataset = load_dataset(cfg)
    idx = dataset.indices("holdout")
    ctrl = Controller.load(run_dir / "checkpoints" / "controller.ckpt")
    scores = controller_scores(ctrl, dataset.images[idx])
    flags = dataset.oracle_flags[idx]
    return auroc(scores, flags), float(scores[flags].mean() - scores[~flags].mean())


def single_runs(root, overrides=None, *, with_baseline=False):
    out = []
    for seed in SEEDS:
        cfg = config_with_overrides(SINGLE, {"seed": seed, **(overrides or {})})
        run_dir = root / f"seed{seed}"
        res = run(cfg, run_dir)
        row = {"cfg": cfg, "dir": run_dir, "summary": res.summary, "sweep": res.sweep_rows}
        if with_baseline:
            row["baseline"] = non_selective_baseline(cfg)
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# A1


def test_a1_unit_exactness(report):
    t0 = time.perf_counter()
    errors = {}
    g = np.random.default_rng(0)

    def frac_mean(xs):
        xs = [Fraction(x) for x in xs]
        return sum(xs) / len(xs)

    losses, scores = g.random(20), g.random(20)
    errors["fixed"] = abs(unclipped_reward(RewardStrategy("fixed"), losses) + float(frac_mean(losses)))
    weighted = -float(frac_mean([Fraction(l) * Fraction(h) for l, h in zip(losses, scores)]))
    errors["weighted"] = abs(unclipped_reward(RewardStrategy("weighted"), losses, scores) - weighted)
    kept = sorted(range(20), key=lambda i: (-scores[i], i))[: math.floor(0.85 * 20)]
    selective = -float(frac_mean([losses[i] for i in kept]))
    errors["selective"] = abs(unclipped_reward(RewardStrategy("selective", 0.15), losses, scores) - selective)

    clipper, prev, worst = RewardClipper(alpha=0.9), None, 0.0
    for r in -g.random(200):
        reward, clipper = clip(clipper, float(r))
        worst = max(worst, abs(reward - (0.0 if prev is None else r - prev)))
        prev = r if prev is None else 0.9 * prev + 0.1 * r
    errors["clipper"] = max(worst, abs(clipper.running_mean - prev))

    base, new = g.normal(size=50), g.normal(size=50)
    errors["reptile"] = max(
        float(np.max(np.abs(reptile_update(base, new, 0.3) - (base + 0.3 * (new - base))))),
        float(np.max(np.abs(reptile_update(base, new, 1.0) - new))),
    )
    errors["epsilon"] = max(abs(anneal_epsilon(i, 40) - (1 - i / 40)) for i in range(41))

    rewards = g.normal(size=10)
    brute = [sum(0.9**k * rewards[t + k] for k in range(10 - t)) for t in range(10)]
    errors["returns"] = float(np.max(np.abs(discounted_returns(rewards, 0.9) - brute)))

    worst = 0.0
    for b in range(1, 11):
        h = g.random(b)
        total = math.fsum(math.exp(log_prob(h, a)) for a in itertools.product([0, 1], repeat=b))
        worst = max(worst, abs(total - 1.0))
    errors["log_prob"] = worst

    a = (g.random((5, 8, 8)) > 0.5).astype(float)
    b = (g.random((5, 8, 8)) > 0.5).astype(float)
    ref = [float((2 * Fraction(int((x * y).sum())) + Fraction(1e-7)) / (int(x.sum() + y.sum()) + Fraction(1e-7))) for x, y in zip(a, b)]
    errors["dice"] = float(np.max(np.abs(dice(a, b) - ref)))
    pred, lab = g.integers(0, 2, 100), g.integers(0, 2, 100)
    errors["accuracy"] = abs(float(np.mean(pred == lab)) - float(Fraction(int((pred == lab).sum()), 100)))

    counts = np.array([[9, 3], [3, 85]])
    rater_a = [0] * 12 + [1] * 88
    rater_b = [0] * 9 + [1] * 3 + [0] * 3 + [1] * 85
    errors["kappa"] = abs(table_from_counts(counts).kappa - cohen_kappa_score(rater_a, rater_b))

    worst = 0
    for _ in range(100):
        n, r = int(g.integers(1, 1000)), float(g.random() * 0.99)
        worst = max(worst, abs(select_holdout(g.random(n), r).size - (n - math.floor(r * n))))
    errors["select_holdout"] = float(worst)

    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = all(v <= 1e-9 for v in errors.values()) and elapsed < 10.0
    report("A1", ok, f"{len(errors)} oracle checks, max error {errors[worst_name]:.1e} ({worst_name}), {elapsed:.1f}s")
    assert ok, errors


# ---------------------------------------------------------------------------
# A2-A4: single-environment PPO with the weighted reward


@pytest.fixture(scope="module")
def ppo_runs(tmp_path_factory):
    t0 = time.perf_counter()
    rows = single_runs(tmp_path_factory.mktemp("a2"), with_baseline=True)
    return rows, time.perf_counter() - t0


def test_a2_selection_beats_non_selection(ppo_runs, report):
    rows, elapsed = ppo_runs
    gains = [r["summary"]["metric_selected"] - r["baseline"] for r in rows]
    ok = median(gains) >= 0.02 and elapsed <= 15 * 60
    detail = ", ".join(f"{r['summary']['metric_selected']:.3f}/{r['baseline']:.3f}" for r in rows)
    report("A2", ok, f"median gain {median(gains):+.3f} (selected@0.3/baseline: {detail}), {elapsed / 60:.1f} min")
    assert ok


def test_a3_controller_oracle_agreement(ppo_runs, report):
    rows, _ = ppo_runs
    aurocs, kappas, gaps = [], [], []
    for r in rows:
        a, gap = holdout_auroc(r["dir"], r["cfg"])
        aurocs.append(a)
        gaps.append(gap)
        kappas.append(r["summary"]["kappa"])
    ok = median(aurocs) >= 0.80 and median(kappas) >= 0.4 and median(gaps) > 0
    report(
        "A3",
        ok,
        f"median AUROC {median(aurocs):.3f}, median kappa@0.3 {median(kappas):.3f}, "
        f"median clean-minus-corrupted score {median(gaps):+.3f}",
    )
    assert ok


def test_a4_sweep_shape(ppo_runs, report):
    rows, _ = ppo_runs
    ratios = [row["ratio"] for row in rows[0]["sweep"]]
    curve = np.mean([[row["metric_mean"] for row in r["sweep"]] for r in rows], axis=0)
    at = dict(zip(ratios, curve))
    positive = [r for r in ratios if 0.05 - 1e-9 <= r <= 0.5 + 1e-9]
    best = max(positive, key=at.get)
    ok = len(ratios) >= 10 and at[best] > at[0.0]
    report("A4", ok, f"{len(ratios)} ratios, ratio 0: {at[0.0]:.3f}, best ratio {best:.2f}: {at[best]:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# A5-A6: meta-RL over observer environments, adaptation to clean labels


def meta_then_adapt(root, seed, ablation, ks):
    cfg = config_with_overrides(META, {"seed": seed, "ablation": ablation})
    run(cfg, root / "meta")
    out = {}
    for k in ks:
        acfg = config_with_overrides(
            META,
            {
                "seed": seed,
                "mode": "adapt",
                "ablation": ablation,
                "adapt": {"k": k, "episodes": ADAPT_EPISODES, "checkpoint_dir": str(root / "meta")},
            },
        )
        out[k] = run(acfg, root / f"adapt_k{k}").summary["metric_selected"]
    return out


@pytest.fixture(scope="module")
def meta_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("a5")
    rows, t0 = [], time.perf_counter()
    for seed in SEEDS:
        full = meta_then_adapt(root / f"full{seed}", seed, {}, [0.0, 0.2, 0.3])
        clean_cfg = config_with_overrides(
            {**META, "mode": "single"}, {"seed": seed, "training.trials": CLEAN_TRIALS}
        )
        clean = run(clean_cfg, root / f"clean{seed}").summary["metric_selected"]
        rows.append({"full": full, "clean": clean})
    a5_elapsed = time.perf_counter() - t0
    for seed, row in zip(SEEDS, rows):
        row["variant"] = meta_then_adapt(root / f"variant{seed}", seed, VARIANT, [0.0, 0.2])
        row["no_reptile"] = meta_then_adapt(root / f"norep{seed}", seed, NO_REPTILE, [0.0])
    return rows, a5_elapsed


def test_a5_meta_adaptation(meta_runs, report):
    rows, elapsed = meta_runs
    k3 = median([r["full"][0.3] for r in rows])
    k0 = median([r["full"][0.0] for r in rows])
    clean = median([r["clean"] for r in rows])
    ok = k3 >= clean - 0.02 and k0 < k3 and elapsed <= 45 * 60
    report(
        "A5",
        ok,
        f"median selected accuracy k=0.3 {k3:.3f} vs clean single-env {clean:.3f}, k=0.0 {k0:.3f}, "
        f"{elapsed / 60:.1f} min",
    )
    assert ok


def test_a6_ablations(meta_runs, report):
    rows, _ = meta_runs
    checks = {
        "variant k=0.0": (median([r["full"][0.0] for r in rows]), median([r["variant"][0.0] for r in rows])),
        "variant k=0.2": (median([r["full"][0.2] for r in rows]), median([r["variant"][0.2] for r in rows])),
        "no-Reptile k=0.0": (median([r["full"][0.0] for r in rows]), median([r["no_reptile"][0.0] for r in rows])),
    }
    ok = all(full - other >= -0.01 for full, other in checks.values())
    detail = "; ".join(f"{name}: full {f:.3f} vs {o:.3f}" for name, (f, o) in checks.items())
    report("A6", ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# A7: selective reward rejection fraction


S_REJ = [0.0, 0.1, 0.2, 0.3, 0.4]


def test_a7_s_rej_sensitivity(tmp_path_factory, report):
    root = tmp_path_factory.mktemp("a7")
    curve = {}
    for s in S_REJ:
        rows = single_runs(root / f"s{s}", {"reward": {"strategy": "selective", "s_rej": s}})
        curve[s] = median([r["summary"]["metric_selected"] for r in rows])
    best = max(S_REJ, key=lambda s: (curve[s], -s))
    ok = best not in (S_REJ[0], S_REJ[-1])
    detail = ", ".join(f"{s:.1f}: {v:.3f}" for s, v in curve.items())
    report("A7", ok, f"best s_rej {best:.1f} (median selected accuracy {detail})")
    assert ok


# ---------------------------------------------------------------------------
# A8: DDPG alongside PPO


def test_a8_ddpg_parity(ppo_runs, tmp_path_factory, report):
    rows, _ = ppo_runs
    ddpg = single_runs(tmp_path_factory.mktemp("a8"), {"rl": "ddpg"})
    base = median([r["baseline"] for r in rows])
    ppo_sel = median([r["summary"]["metric_selected"] for r in rows])
    ddpg_sel = median([r["summary"]["metric_selected"] for r in ddpg])
    ok = ppo_sel > base and ddpg_sel > base
    report("A8", ok, f"median selected accuracy PPO {ppo_sel:.3f}, DDPG {ddpg_sel:.3f}, non-selective {base:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# A9: determinism


TINY = {
    "seed": 11,
    "data": {"synth": {"n_samples": 210, "corrupt_fraction": 0.3}},
    "training": {"trials": 2, "episodes_per_trial": 2, "steps_per_episode": 4, "batch_size": 8},
    "evaluation": {"n_bootstrap": 50},
    "controller": {"hidden_dim": 16},
}
ARTIFACTS = [
    "rewards.csv",
    "checkpoints/controller.ckpt",
    "checkpoints/predictor.ckpt",
    "eval/sweep.csv",
    "eval/summary.json",
    "eval/contingency.json",
]


@pytest.mark.parametrize("mode,extra", [("single", {}), ("single", {"rl": "ddpg"}), ("meta", {})])
def test_a9_determinism(mode, extra, tmp_path, report):
    cfg = config_with_overrides({**TINY, "mode": mode, **extra}, {})
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    evaluate_run(tmp_path / "a", out=tmp_path / "ea")
    evaluate_run(tmp_path / "a", out=tmp_path / "eb")
    differing = [f for f in ARTIFACTS if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    differing += [f for f in ARTIFACTS[3:] if (tmp_path / "ea" / f).read_bytes() != (tmp_path / "eb" / f).read_bytes()]
    ok = not differing
    label = mode + ("/ddpg" if extra else "")
    report("A9", ok, f"{label}: {len(ARTIFACTS)} train and {len(ARTIFACTS) - 3} evaluate artifacts byte-identical" if ok else f"{label}: differing {differing}")
    assert ok
