"""``amenable`` command line: generate-data, train, adapt, evaluate, sweep."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context
from pathlib import Path

from .data import SynthSpec, generate_synthetic, save_manifest
from .errors import AmenableError, ConfigError, InvalidSpecError
from .seeding import child_int

log = logging.getLogger("amenable")


def _parse_ratios(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _parse_override(text: str) -> tuple[str, list]:
    """``key.path=v1,v2`` -> (``key.path``, [v1, v2]) with JSON-typed values."""
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value[,value...], got {text!r}")
    key, _, values = text.partition("=")
    parsed = []
    for v in values.split(","):
        try:
            parsed.append(json.loads(v))
        except json.JSONDecodeError:
            parsed.append(v)
    return key.strip(), parsed


def _load_config(args, extra: dict | None = None):
    from .runner import config_with_overrides, load_config_file

    raw = load_config_file(args.config)
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "output_dir", None) is not None:
        overrides["output_dir"] = args.output_dir
    return config_with_overrides(raw, overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    obj = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
    if args.seed is not None:
        obj["seed"] = child_int(args.seed, "data")
    obj.setdefault("n_subjects", obj.get("n_samples"))
    try:
        spec = SynthSpec.from_json(obj)
    except TypeError as exc:
        raise InvalidSpecError(f"incomplete synth spec: {exc}") from None
    ds = generate_synthetic(spec)
    save_manifest(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .runner import run

    cfg = _load_config(args)
    if cfg.mode == "adapt":
        raise ConfigError("mode: use `amenable adapt` for adapt-mode configs")
    result = run(cfg, resume=args.resume)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_adapt(args) -> int:
    from .runner import run

    extra: dict = {"mode": "adapt"}
    if args.checkpoint is not None:
        extra["adapt.checkpoint_dir"] = str(args.checkpoint)
    if args.k is not None:
        extra["adapt.k"] = args.k
    cfg = _load_config(args, extra)
    result = run(cfg)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    from .runner import evaluate_run

    result = evaluate_run(args.checkpoint, args.ratios, args.out)
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def _sweep_child(payload: tuple[dict, str]) -> dict:
    from .runner import config_from_dict, run

    raw, out = payload
    cfg = config_from_dict(raw)
    return run(cfg, out).summary


def cmd_sweep(args) -> int:
    from .runner import config_with_overrides, load_config_file

    raw = load_config_file(args.config)
    root = Path(args.output_dir or raw.get("output_dir", "runs/sweep"))
    keys = [k for k, _ in args.set]
    grids = [vals for _, vals in args.set]
    seeds = args.seeds or [raw.get("seed", 0)]
    jobs = []
    for seed in seeds:
        for combo in itertools.product(*grids) if grids else [()]:
            overrides = dict(zip(keys, combo))
            name = "_".join([f"seed{seed}"] + [f"{k}={v}" for k, v in overrides.items()])
            cfg = config_with_overrides(raw, {**overrides, "seed": seed, "output_dir": str(root / name)})
            jobs.append((name, overrides, seed, cfg.model_dump(mode="json"), str(root / name)))
    root.mkdir(parents=True, exist_ok=True)
    payloads = [(cfg, out) for _, _, _, cfg, out in jobs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs, mp_context=get_context("spawn")) as pool:
            summaries = list(pool.map(_sweep_child, payloads))
    else:
        summaries = [_sweep_child(p) for p in payloads]
    fields = ["run", "seed", *keys, "metric_all", "metric_selected", "best_ratio", "kappa"]
    with open(root / "sweep_summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for (name, overrides, seed, _, _), s in zip(jobs, summaries):
            w.writerow({"run": name, "seed": seed, **overrides, **{k: s.get(k) for k in fields[2 + len(keys) :]}})
    print(f"{len(jobs)} runs; summary in {root / 'sweep_summary.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amenable", description="Learn task amenability by controller/predictor co-training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{generate-data,train,adapt,evaluate,sweep}")

    g = sub.add_parser("generate-data", help="write a synthetic dataset manifest")
    g.add_argument("--spec", type=Path, help="JSON synth spec (n_samples, n_subjects, shape, task_kind, ...)")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--seed", type=int, help="root seed (overrides the seed in --spec)")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="single-environment RL or meta-RL training, then holdout evaluation")
    t.add_argument("--config", type=Path, required=True, help="run config (JSON or TOML)")
    t.add_argument("--seed", type=int)
    t.add_argument("--output-dir", type=str)
    t.add_argument("--resume", action="store_true", help="continue from output_dir/state.pt")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="adapt a meta-trained controller to the held-out environment")
    a.add_argument("--config", type=Path, required=True)
    a.add_argument("--checkpoint", type=Path, help="meta-training run directory")
    a.add_argument("--k", type=float, help="fraction of the new environment's data to use")
    a.add_argument("--seed", type=int)
    a.add_argument("--output-dir", type=str)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="rejection sweep and contingency table for a finished run")
    e.add_argument("--checkpoint", type=Path, required=True, help="run directory")
    e.add_argument("--ratios", type=_parse_ratios, help="comma-separated holdout rejection ratios")
    e.add_argument("--out", type=Path, help="directory for eval/ outputs (default: the run directory)")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run a grid of configs/seeds as parallel child runs")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--set", type=_parse_override, action="append", default=[], metavar="KEY=V1,V2")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--output-dir", type=str)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (AmenableError, ValueError, TypeError, FileNotFoundError) as exc:
        print(f"amenable {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
