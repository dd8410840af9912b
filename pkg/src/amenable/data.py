"""Datasets, deterministic synthetic generation, corruptions and manifest I/O.

Synthetic images are a textured background with a bright blob.  The
classification task asks whether a blob is present; the segmentation task
asks for the blob mask.  A chosen fraction of samples is corrupted with
random-pixel noise and a zeroed occlusion block, and (optionally) has its
label flipped, which makes those samples genuinely harmful to train on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import InvalidSpecError, ManifestError

TaskKind = Literal["classification", "segmentation"]
TASK_KINDS = ("classification", "segmentation")
SPLITS = ("train", "val", "holdout")

NOISE_MAX = 0.8
OCCLUSION_MAX = 1.0


@dataclass(frozen=True)
class CorruptionRecord:
    noise_intensity: float
    occlusion_intensity: float
    label_flipped: bool
    rng_seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_intensity <= NOISE_MAX:
            raise InvalidSpecError(f"noise_intensity {self.noise_intensity} outside [0, {NOISE_MAX}]")
        if not 0.0 <= self.occlusion_intensity <= OCCLUSION_MAX:
            raise InvalidSpecError(
                f"occlusion_intensity {self.occlusion_intensity} outside [0, {OCCLUSION_MAX}]"
            )

    def to_json(self) -> dict:
        return {
            "noise_intensity": self.noise_intensity,
            "occlusion_intensity": self.occlusion_intensity,
            "label_flipped": self.label_flipped,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorruptionRecord":
        return cls(
            noise_intensity=float(obj["noise_intensity"]),
            occlusion_intensity=float(obj["occlusion_intensity"]),
            label_flipped=bool(obj["label_flipped"]),
            rng_seed=int(obj["rng_seed"]),
        )


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    subject_id: str
    image: np.ndarray
    label: int | np.ndarray
    oracle_amenable: bool | None = None
    corruption: CorruptionRecord | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.subject_id == other.subject_id
            and self.oracle_amenable == other.oracle_amenable
            and self.corruption == other.corruption
            and np.array_equal(self.image, other.image)
            and np.array_equal(np.asarray(self.label), np.asarray(other.label))
        )


def _check_sample(s: Sample, shape: tuple[int, int], task_kind: str) -> None:
    if s.image.shape != shape:
        raise ManifestError(f"sample {s.id}: image shape {s.image.shape} != dataset shape {shape}")
    if not np.all(np.isfinite(s.image)) or s.image.min() < 0.0 or s.image.max() > 1.0:
        raise ManifestError(f"sample {s.id}: pixel values outside [0, 1]")
    if task_kind == "segmentation":
        mask = np.asarray(s.label)
        if mask.shape != shape:
            raise ManifestError(f"sample {s.id}: mask shape {mask.shape} != image shape {shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ManifestError(f"sample {s.id}: mask values must be 0 or 1")
    elif not isinstance(s.label, (int, np.integer)) or s.label < 0:
        raise ManifestError(f"sample {s.id}: classification label must be a class index")


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of samples with subject-disjoint splits.

    ``images`` and ``labels`` stack all samples in order; per-split index
    arrays come from :meth:`indices`.
    """

    samples: tuple[Sample, ...]
    splits: dict[str, tuple[str, ...]]
    shape: tuple[int, int]
    task_kind: TaskKind = "classification"
    images: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise ManifestError(f"unknown task_kind {self.task_kind!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        object.__setattr__(self, "splits", {k: tuple(v) for k, v in self.splits.items()})
        index = {}
        for i, s in enumerate(self.samples):
            if s.id in index:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            index[s.id] = i
            _check_sample(s, self.shape, self.task_kind)
        object.__setattr__(self, "_index", index)

        owner: dict[str, str] = {}
        subject_owner: dict[str, str] = {}
        for name, ids in self.splits.items():
            if len(ids) == 0:
                raise ManifestError(f"split {name!r} is empty")
            for sid in ids:
                if sid not in index:
                    raise ManifestError(f"dangling sample id {sid!r} in split {name!r}")
                if sid in owner:
                    raise ManifestError(f"sample {sid!r} appears in splits {owner[sid]!r} and {name!r}")
                owner[sid] = name
                subj = self.samples[index[sid]].subject_id
                if subject_owner.setdefault(subj, name) != name:
                    raise ManifestError(
                        f"subject {subj!r} appears in splits {subject_owner[subj]!r} and {name!r}"
                    )

        if self.images is None:
            stack = np.stack([s.image for s in self.samples]).astype(np.float32, copy=False)
            object.__setattr__(self, "images", stack)
        if self.task_kind == "classification":
            labels = np.array([int(s.label) for s in self.samples], dtype=np.int64)
        else:
            labels = np.stack([np.asarray(s.label, dtype=np.uint8) for s in self.samples])
        object.__setattr__(self, "labels", labels)
        object.__setattr__(
            self,
            "oracle_flags",
            np.array([s.oracle_amenable is not False for s in self.samples], dtype=bool),
        )
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.task_kind == other.task_kind
            and self.splits == other.splits
            and self.samples == other.samples
        )

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]  # type: ignore[attr-defined]

    def indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise KeyError(f"dataset has no split {split!r}")
        return np.array([self.index_of(s) for s in self.splits[split]], dtype=np.int64)

    def has_informative_subjects(self) -> bool:
        """True when at least one subject contributes several samples."""
        return len({s.subject_id for s in self.samples}) < len(self.samples)

    def with_labels(self, labels: Sequence) -> "Dataset":
        """Same images (shared, not copied) under a different label set."""
        if len(labels) != len(self.samples):
            raise ValueError("label set length does not match dataset")
        samples = tuple(replace(s, label=lab) for s, lab in zip(self.samples, labels))
        return Dataset(samples, self.splits, self.shape, self.task_kind, images=self.images)

    def with_splits(self, splits: dict[str, Iterable[str]]) -> "Dataset":
        return Dataset(self.samples, {k: tuple(v) for k, v in splits.items()}, self.shape, self.task_kind, images=self.images)


# ---------------------------------------------------------------------------
# corruption


def _occlusion_block(n_pixels: int, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of a connected, axis-aligned block of exactly ``n_pixels``.

    The block is ``n_pixels // w`` full rows of width ``w`` plus one partial
    row, placed at a random position that keeps it inside the image.
    """
    H, W = shape
    mask = np.zeros(shape, dtype=bool)
    if n_pixels <= 0:
        return mask
    if n_pixels >= H * W:
        mask[:] = True
        return mask
    w = min(W, max(1, math.ceil(math.sqrt(n_pixels * W / H))))
    rows = math.ceil(n_pixels / w)
    if rows > H:
        w = math.ceil(n_pixels / H)
        rows = math.ceil(n_pixels / w)
    top = int(rng.integers(0, H - rows + 1))
    left = int(rng.integers(0, W - w + 1))
    full, rest = divmod(n_pixels, w)
    mask[top : top + full, left : left + w] = True
    if rest:
        mask[top + full, left : left + rest] = True
    return mask


def corrupt(image: np.ndarray, record: CorruptionRecord) -> np.ndarray:
    """Apply the noise and occlusion described by ``record``.

    Noise replaces exactly ``round(noise_intensity * H * W)`` distinct pixels
    with uniform values in [0, 1]; occlusion then zeroes a contiguous block of
    ``round(occlusion_intensity * H * W)`` pixels.  Pure in (image, record).
    """
    H, W = image.shape
    rng = np.random.default_rng(record.rng_seed)
    out = np.array(image, dtype=np.float32, copy=True)
    n_noise = int(round(record.noise_intensity * H * W))
    if n_noise:
        flat = rng.choice(H * W, size=n_noise, replace=False)
        out.reshape(-1)[flat] = rng.random(n_noise).astype(np.float32)
    n_occ = int(round(record.occlusion_intensity * H * W))
    if n_occ:
        out[_occlusion_block(n_occ, (H, W), rng)] = 0.0
    return out


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int
    n_subjects: int
    shape: tuple[int, int] = (16, 16)
    task_kind: TaskKind = "classification"
    corrupt_fraction: float = 0.3
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    flip_probability: float = 0.5
    positive_fraction: float = 0.5
    blob_radius: tuple[float, float] = (1.5, 3.0)
    blob_amplitude: tuple[float, float] = (0.25, 0.6)
    background: float = 0.35
    texture_std: float = 0.05
    noise_range: tuple[float, float] = (0.0, NOISE_MAX)
    occlusion_range: tuple[float, float] = (0.0, OCCLUSION_MAX)

    def validate(self) -> None:
        if self.task_kind not in TASK_KINDS:
            raise InvalidSpecError(f"unknown task_kind {self.task_kind!r}")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise InvalidSpecError("corrupt_fraction must lie in [0, 1]")
        if not self.n_samples >= self.n_subjects >= 3:
            raise InvalidSpecError("need n_samples >= n_subjects >= 3")
        if len(self.split_fractions) != 3 or min(self.split_fractions) <= 0:
            raise InvalidSpecError("split_fractions must be three positive numbers")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidSpecError("flip_probability must lie in [0, 1]")
        lo, hi = self.noise_range
        if not 0.0 <= lo <= hi <= NOISE_MAX:
            raise InvalidSpecError(f"noise_range must lie within [0, {NOISE_MAX}]")
        lo, hi = self.occlusion_range
        if not 0.0 <= lo <= hi <= OCCLUSION_MAX:
            raise InvalidSpecError(f"occlusion_range must lie within [0, {OCCLUSION_MAX}]")
        margin = math.ceil(self.blob_radius[1])
        if min(self.shape) < 2 * margin + 2:
            raise InvalidSpecError(
                f"shape {tuple(self.shape)} too small to place a blob of radius {self.blob_radius[1]}"
            )

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        for key in ("shape", "split_fractions", "blob_radius", "blob_amplitude", "noise_range", "occlusion_range"):
            if key in obj:
                obj[key] = tuple(obj[key])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpecError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**obj)


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    total = float(sum(fractions))
    counts = [max(1, int(math.floor(f / total * n + 1e-9))) for f in fractions]
    counts[0] += n - sum(counts)
    if counts[0] < 1:
        raise InvalidSpecError("too few subjects for the requested split fractions")
    return counts


def _largest_remainder(total: int, quotas: Sequence[float]) -> list[int]:
    base = [int(math.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def _blob(shape, center, radius, amplitude):
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    bump = amplitude * np.exp(-0.5 * d2 / (0.6 * radius) ** 2)
    return bump, (d2 <= radius**2).astype(np.uint8)


def _random_blob(spec: SynthSpec, rng: np.random.Generator, amplitude: float | None = None):
    H, W = spec.shape
    radius = rng.uniform(*spec.blob_radius)
    margin = math.ceil(spec.blob_radius[1])
    center = (rng.uniform(margin, H - 1 - margin), rng.uniform(margin, W - 1 - margin))
    if amplitude is None:
        amplitude = rng.uniform(*spec.blob_amplitude)
    return _blob(spec.shape, center, radius, amplitude)


def degrade_label(label, record: CorruptionRecord, spec: SynthSpec):
    """Flipped class for classification; a mask of a blob elsewhere for segmentation."""
    if spec.task_kind == "classification":
        return 1 - int(label)
    rng = np.random.default_rng([record.rng_seed, 1])
    _, mask = _random_blob(spec, rng)
    return mask


def _generate(spec: SynthSpec) -> tuple[Dataset, np.ndarray]:
    spec.validate()
    H, W = spec.shape
    rng = np.random.default_rng(spec.seed)

    # subjects: each gets at least one sample
    subject_of = np.concatenate(
        [np.arange(spec.n_subjects), rng.integers(0, spec.n_subjects, spec.n_samples - spec.n_subjects)]
    )
    subject_of = rng.permutation(subject_of)
    subj_perm = rng.permutation(spec.n_subjects)
    counts = _split_counts(spec.n_subjects, spec.split_fractions)
    split_of_subject = np.empty(spec.n_subjects, dtype=np.int64)
    start = 0
    for k, c in enumerate(counts):
        split_of_subject[subj_perm[start : start + c]] = k
        start += c
    split_of_sample = split_of_subject[subject_of]

    # corrupted samples: exact global count, spread over splits by largest remainder
    n_corrupt = int(math.floor(spec.corrupt_fraction * spec.n_samples + 1e-9))
    members = [np.flatnonzero(split_of_sample == k) for k in range(3)]
    per_split = _largest_remainder(n_corrupt, [spec.corrupt_fraction * len(m) for m in members])
    corrupted = np.zeros(spec.n_samples, dtype=bool)
    for m, c in zip(members, per_split):
        corrupted[rng.choice(m, size=min(c, len(m)), replace=False)] = True

    samples = []
    amplitudes = np.zeros(spec.n_samples)
    width = len(str(spec.n_samples - 1))
    for i in range(spec.n_samples):
        base = spec.background + spec.texture_std * rng.standard_normal((H, W))
        if spec.task_kind == "classification":
            positive = rng.random() < spec.positive_fraction
            label: int | np.ndarray = int(positive)
            if positive:
                amplitudes[i] = rng.uniform(*spec.blob_amplitude)
                bump, _ = _random_blob(spec, rng, amplitudes[i])
                base = base + bump
        else:
            amplitudes[i] = rng.uniform(*spec.blob_amplitude)
            bump, label = _random_blob(spec, rng, amplitudes[i])
            base = base + bump
        image = np.clip(base, 0.0, 1.0).astype(np.float32)
        record = None
        if corrupted[i]:
            record = CorruptionRecord(
                noise_intensity=float(rng.uniform(*spec.noise_range)),
                occlusion_intensity=float(rng.uniform(*spec.occlusion_range)),
                label_flipped=bool(rng.random() < spec.flip_probability),
                rng_seed=int(rng.integers(0, 2**31 - 1)),
            )
            image = corrupt(image, record)
            if record.label_flipped:
                label = degrade_label(label, record, spec)
        samples.append(
            Sample(
                id=f"x{i:0{width}d}",
                subject_id=f"s{subject_of[i]:0{width}d}",
                image=image,
                label=label,
                oracle_amenable=not corrupted[i],
                corruption=record,
            )
        )
    splits = {name: tuple(samples[j].id for j in members[k]) for k, name in enumerate(SPLITS)}
    return Dataset(tuple(samples), splits, (H, W), spec.task_kind), amplitudes


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset for ``spec`` (same seed, identical output)."""
    return _generate(spec)[0]


def generate_observer_study(
    spec: SynthSpec, flip_rates: Sequence[float] = (0.1, 0.15, 0.2)
) -> tuple[Dataset, list[Dataset]]:
    """Expert-labelled dataset plus one dataset per non-expert observer.

    All datasets share one image store.  Observer ``k`` misses the faintest
    blobs: for classification the ``round(rate_k * n)`` lowest-amplitude
    positives are labelled negative; for segmentation the masks of the
    ``round(rate_k * n)`` faintest blobs are dropped to empty.  Lower-rate
    observers therefore differ from the expert on a subset of what
    higher-rate observers get wrong, a systematic rather than random bias.
    """
    expert, amplitudes = _generate(spec)
    n = len(expert)
    if spec.task_kind == "classification":
        candidates = np.flatnonzero(expert.labels == 1)
    else:
        candidates = np.arange(n)
    candidates = candidates[np.argsort(amplitudes[candidates], kind="stable")]
    observers = []
    for rate in flip_rates:
        n_flip = int(round(rate * n))
        if n_flip > len(candidates):
            raise InvalidSpecError(f"flip rate {rate} exceeds the number of flippable samples")
        flip = set(candidates[:n_flip].tolist())
        labels = []
        for i, s in enumerate(expert.samples):
            if i not in flip:
                labels.append(s.label)
            elif spec.task_kind == "classification":
                labels.append(0)
            else:
                labels.append(np.zeros(spec.shape, dtype=np.uint8))
        observers.append(expert.with_labels(labels))
    return expert, observers


# ---------------------------------------------------------------------------
# manifest I/O

MANIFEST = "manifest.json"
IMAGE_BLOB = "images.f32"
MASK_BLOB = "masks.u8"


def save_manifest(dataset: Dataset, path: str | Path) -> Path:
    """Write ``dataset`` to directory ``path`` (JSON manifest plus binary blobs)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = dataset.shape
    entries = []
    for i, s in enumerate(dataset.samples):
        entries.append(
            {
                "id": s.id,
                "subject_id": s.subject_id,
                "label": int(s.label) if dataset.task_kind == "classification" else None,
                "oracle_amenable": s.oracle_amenable,
                "corruption": None if s.corruption is None else s.corruption.to_json(),
                "offset": i * H * W,
            }
        )
    header = {
        "shape": [H, W],
        "task_kind": dataset.task_kind,
        "samples": entries,
        "splits": {k: list(v) for k, v in dataset.splits.items()},
    }
    (path / MANIFEST).write_text(json.dumps(header, indent=1), encoding="utf-8")
    dataset.images.astype("<f4").tofile(path / IMAGE_BLOB)
    if dataset.task_kind == "segmentation":
        dataset.labels.astype(np.uint8).tofile(path / MASK_BLOB)
    return path


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        header = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"no manifest at {path / MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ManifestError("malformed header: top level must be an object")
    for key in ("shape", "task_kind", "samples", "splits"):
        if key not in header:
            raise ManifestError(f"malformed header: missing {key!r}")
    shape = header["shape"]
    if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(v, int) and v > 0 for v in shape)):
        raise ManifestError("malformed header: shape must be [H, W]")
    H, W = shape
    task_kind = header["task_kind"]
    if task_kind not in TASK_KINDS:
        raise ManifestError(f"malformed header: unknown task_kind {task_kind!r}")
    if "val" not in header["splits"] or not header["splits"]["val"]:
        raise ManifestError("split 'val' is missing or empty (the reward needs at least one validation sample)")

    n = len(header["samples"])
    images = np.fromfile(path / IMAGE_BLOB, dtype="<f4")
    if images.size != n * H * W:
        raise ManifestError(f"shape mismatch: image blob holds {images.size} values, expected {n * H * W}")
    images = images.astype(np.float32).reshape(n, H, W)
    masks = None
    if task_kind == "segmentation":
        masks = np.fromfile(path / MASK_BLOB, dtype=np.uint8)
        if masks.size != n * H * W:
            raise ManifestError(f"shape mismatch: mask blob holds {masks.size} values, expected {n * H * W}")
        masks = masks.reshape(n, H, W)

    samples = []
    for i, e in enumerate(header["samples"]):
        try:
            off = int(e["offset"])
            if off % (H * W) or not 0 <= off // (H * W) < n:
                raise ManifestError(f"sample {e.get('id')}: bad offset {off}")
            j = off // (H * W)
            label = int(e["label"]) if task_kind == "classification" else masks[j]
            corruption = None if e["corruption"] is None else CorruptionRecord.from_json(e["corruption"])
            samples.append(
                Sample(
                    id=str(e["id"]),
                    subject_id=str(e["subject_id"]),
                    image=images[j],
                    label=label,
                    oracle_amenable=e["oracle_amenable"],
                    corruption=corruption,
                )
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed sample entry {i}: {exc}") from exc
    return Dataset(tuple(samples), {k: tuple(v) for k, v in header["splits"].items()}, (H, W), task_kind)
