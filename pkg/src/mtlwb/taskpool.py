"""Task registry and synthetic task generation.

A task is a small image-classification dataset with grouped train/val/test
splits (the group key plays the role of patient/slide provenance: samples of
one group never straddle a split boundary).  Pools of tasks carry a registry
of related-task groups that the leave-one-task-out planner must hold out
together.

Synthetic tasks are rendered from a latent "style" drawn from the task's
relatedness seed: each class gets a blob position, an RGB tint and a grating
texture.  Two tasks sharing a relatedness seed share class styles and are
therefore genuinely related (features transfer between them); tasks with
different seeds get independent styles.  All randomness is substream-derived,
so a (spec, seed) pair renders byte-identical data on any platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream_key, substream

POOL_MAGIC = b"MTPL"
POOL_FORMAT_VERSION = 1

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)  # train / val / test, by group


@dataclass
class SyntheticSpec:
    """Recipe for one synthetic task."""

    name: str
    class_count: int
    sample_count: int
    image_size: tuple[int, int] = (16, 16)  # (height, width); non-square allowed
    relatedness_seed: int = 0
    noise_level: float = 0.05
    family: str = "blob-grating"

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError(f"task '{self.name}': need at least 2 classes")
        if self.sample_count < 10 * self.class_count:
            raise ValueError(
                f"task '{self.name}': sample_count {self.sample_count} below "
                f"10 per class ({self.class_count} classes)"
            )
        if min(self.image_size) < 4:
            raise ValueError(f"task '{self.name}': image size too small")
        if self.noise_level < 0:
            raise ValueError(f"task '{self.name}': negative noise level")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "class_count": self.class_count,
            "sample_count": self.sample_count,
            "image_size": list(self.image_size),
            "relatedness_seed": self.relatedness_seed,
            "noise_level": self.noise_level,
            "family": self.family,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(
            name=d["name"],
            class_count=int(d["class_count"]),
            sample_count=int(d["sample_count"]),
            image_size=tuple(d.get("image_size", (16, 16))),
            relatedness_seed=int(d.get("relatedness_seed", 0)),
            noise_level=float(d.get("noise_level", 0.05)),
            family=d.get("family", "blob-grating"),
        )


@dataclass
class Task:
    """One classification task with grouped splits."""

    task_id: str
    name: str
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    group_keys: np.ndarray  # (N,) int64; provenance analog
    splits: dict[str, np.ndarray]  # train/val/test -> index arrays
    metric_kind: str  # "acc" | "roc_auc"
    related_group: str | None = None
    spec: SyntheticSpec | None = None

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def n_train(self) -> int:
        return int(self.splits["train"].shape[0])

    def split_indices(self, split: str) -> np.ndarray:
        return self.splits[split]

    def validate(self) -> None:
        n = self.n_samples
        all_idx = np.concatenate([self.splits[s] for s in ("train", "val", "test")])
        if sorted(all_idx.tolist()) != list(range(n)):
            raise ValueError(f"task {self.task_id}: splits are not disjoint and exhaustive")
        for a in ("train", "val", "test"):
            for b in ("train", "val", "test"):
                if a >= b:
                    continue
                ga = set(self.group_keys[self.splits[a]].tolist())
                gb = set(self.group_keys[self.splits[b]].tolist())
                if ga & gb:
                    raise ValueError(f"task {self.task_id}: group straddles {a}/{b}")
        train_classes = set(self.labels[self.splits["train"]].tolist())
        if train_classes != set(range(self.n_classes)):
            raise ValueError(f"task {self.task_id}: some class has no train sample")


@dataclass
class TaskPool:
    """The pool of tasks plus the related-group registry."""

    tasks: list[Task]
    related_groups: list[list[str]] = field(default_factory=list)
    normalization: "NormalizationStats | None" = None
    pool_seed: int = 0

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        known = set(ids)
        seen: set[str] = set()
        for group in self.related_groups:
            for tid in group:
                if tid not in known:
                    raise ValueError(f"related group references unknown task '{tid}'")
                if tid in seen:
                    raise ValueError(f"task '{tid}' appears in two related groups")
                seen.add(tid)

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task '{task_id}' in pool")

    def subset(self, task_ids: list[str]) -> "TaskPool":
        """Pool restricted to the given tasks (related groups filtered)."""
        keep = set(task_ids)
        tasks = [t for t in self.tasks if t.task_id in keep]
        groups = [[tid for tid in g if tid in keep] for g in self.related_groups]
        groups = [g for g in groups if len(g) >= 2]
        return TaskPool(tasks, groups, self.normalization, self.pool_seed)


@dataclass
class NormalizationStats:
    mean: np.ndarray  # per channel
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive per channel")


def normalize(image: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Channelwise (x - mean) / std with the pool's fixed global statistics."""
    return (image - stats.mean[:, None, None]) / stats.std[:, None, None]


def denormalize(image: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return image * stats.std[:, None, None] + stats.mean[:, None, None]


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random square crop (if non-square), then horizontal and vertical flips.

    Draw order is fixed: crop offset (only when the input is not square),
    then one uniform draw per flip, each applied with probability 0.5.
    """
    c, h, w = image.shape
    if h != w:
        size = min(h, w)
        top = int(rng.integers(0, h - size + 1)) if h > size else 0
        left = int(rng.integers(0, w - size + 1)) if w > size else 0
        image = image[:, top : top + size, left : left + size]
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
    if rng.random() < 0.5:
        image = image[:, ::-1, :]
    return np.ascontiguousarray(image)


def center_crop(image: np.ndarray) -> np.ndarray:
    """Deterministic square crop used outside of training."""
    c, h, w = image.shape
    size = min(h, w)
    top = (h - size) // 2
    left = (w - size) // 2
    return np.ascontiguousarray(image[:, top : top + size, left : left + size])


# -- synthetic rendering ----------------------------------------------------


def _class_styles(spec: SyntheticSpec) -> list[dict]:
    """Latent per-class style parameters, a pure function of relatedness_seed.

    Tasks sharing a relatedness seed draw identical style palettes and assign
    class k to palette entry k, which is what makes them related.
    """
    rng = substream(spec.relatedness_seed, "style-palette", spec.family)
    styles = []
    for _ in range(10):  # palette covers up to 10 classes
        styles.append(
            {
                "blob_cx": float(rng.uniform(0.25, 0.75)),
                "blob_cy": float(rng.uniform(0.25, 0.75)),
                "blob_r": float(rng.uniform(0.10, 0.18)),
                "tint": rng.uniform(0.25, 1.0, size=3),
                "freq": rng.uniform(1.5, 4.5, size=2),
                "phase_jitter": float(rng.uniform(0.5, np.pi)),
                "amp": float(rng.uniform(0.6, 1.0)),
            }
        )
    if spec.class_count > len(styles):
        raise ValueError(f"task '{spec.name}': more classes than palette entries")
    return styles[: spec.class_count]


def _render_class(
    style: dict, count: int, image_size: tuple[int, int], noise: float, rng: np.random.Generator
) -> np.ndarray:
    h, w = image_size
    ys = np.linspace(0.0, 1.0, h, dtype=np.float64)[None, :, None]
    xs = np.linspace(0.0, 1.0, w, dtype=np.float64)[None, None, :]

    cx = style["blob_cx"] + rng.uniform(-0.06, 0.06, size=(count, 1, 1))
    cy = style["blob_cy"] + rng.uniform(-0.06, 0.06, size=(count, 1, 1))
    r = style["blob_r"] * rng.uniform(0.85, 1.15, size=(count, 1, 1))
    blob = np.exp(-(((xs - cx) ** 2) + ((ys - cy) ** 2)) / (2 * r**2))

    fx, fy = style["freq"]
    phase = rng.uniform(-style["phase_jitter"], style["phase_jitter"], size=(count, 1, 1))
    grating = np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)

    tint = style["tint"][None, :, None, None]
    amp = style["amp"] * rng.uniform(0.8, 1.2, size=(count, 1, 1, 1))
    img = (
        0.42
        + 0.50 * tint * blob[:, None, :, :]
        + 0.16 * amp * grating[:, None, :, :]
        + rng.normal(0.0, noise, size=(count, 3, h, w))
    )
    return img


def _grouped_splits(
    n: int, group_keys: np.ndarray, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """60/20/20 split over provenance groups; groups never straddle splits."""
    groups = np.unique(group_keys)
    order = groups[rng.permutation(len(groups))]
    n_train = max(1, int(round(SPLIT_FRACTIONS[0] * len(order))))
    n_val = max(1, int(round(SPLIT_FRACTIONS[1] * len(order))))
    if n_train + n_val >= len(order):
        n_train = max(1, len(order) - 2)
        n_val = 1
    train_g = set(order[:n_train].tolist())
    val_g = set(order[n_train : n_train + n_val].tolist())
    splits = {"train": [], "val": [], "test": []}
    for i in range(n):
        g = group_keys[i]
        if g in train_g:
            splits["train"].append(i)
        elif g in val_g:
            splits["val"].append(i)
        else:
            splits["test"].append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}


def generate_task(spec: SyntheticSpec, seed: int, task_id: str | None = None) -> Task:
    """Render one synthetic task, deterministic in (spec, seed)."""
    styles = _class_styles(spec)
    n, c_count = spec.sample_count, spec.class_count

    # round-robin labels keep classes balanced within the 1.3 ratio bound
    labels = np.arange(n, dtype=np.int64) % c_count

    # contiguous chunks act as provenance groups; chunk size >= class count
    # guarantees every group (hence every split) sees every class
    group_size = max(8, 2 * c_count)
    group_keys = np.arange(n, dtype=np.int64) // group_size

    images = np.empty((n, 3) + tuple(spec.image_size), dtype=np.float64)
    for k in range(c_count):
        idx = np.where(labels == k)[0]
        cls_rng = substream(seed, "render", spec.name, k)
        images[idx] = _render_class(styles[k], len(idx), spec.image_size, spec.noise_level, cls_rng)

    # per-group tint offset: a slide-level batch effect
    offs_rng = substream(seed, "group-offset", spec.name)
    offsets = offs_rng.normal(0.0, 0.02, size=(int(group_keys.max()) + 1, 3))
    images += offsets[group_keys][:, :, None, None]
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    splits = _grouped_splits(n, group_keys, substream(seed, "splits", spec.name))
    task = Task(
        task_id=task_id or spec.name,
        name=spec.name,
        images=images,
        labels=labels,
        group_keys=group_keys,
        splits=splits,
        metric_kind="roc_auc" if c_count == 2 else "acc",
        spec=spec,
    )
    task.validate()
    return task


def compute_normalization(tasks: list[Task], per_task_cap: int = 256) -> NormalizationStats:
    """Fixed global per-channel stats from a capped sample of every task."""
    chunks = []
    for t in tasks:
        take = min(per_task_cap, t.n_samples)
        chunks.append(center_crop_batch(t.images[:take]))
    data = np.concatenate([c.reshape(c.shape[0], 3, -1) for c in chunks], axis=2)
    mean = data.mean(axis=(0, 2))
    std = data.std(axis=(0, 2))
    return NormalizationStats(mean=mean, std=np.maximum(std, 1e-4))


def center_crop_batch(images: np.ndarray) -> np.ndarray:
    n, c, h, w = images.shape
    if h == w:
        return images
    size = min(h, w)
    top = (h - size) // 2
    left = (w - size) // 2
    return np.ascontiguousarray(images[:, :, top : top + size, left : left + size])


def build_pool(
    specs: list[SyntheticSpec],
    pool_seed: int,
    related_groups: list[list[str]] | None = None,
) -> TaskPool:
    """Generate every task of the pool; per-task streams are independent."""
    tasks = [generate_task(spec, stream_seed(pool_seed, spec.name)) for spec in specs]
    related_groups = related_groups or []
    by_id = {t.task_id: t for t in tasks}
    for i, group in enumerate(related_groups):
        for tid in group:
            if tid in by_id:
                by_id[tid].related_group = f"rel{i}"
    return TaskPool(
        tasks=tasks,
        related_groups=related_groups,
        normalization=compute_normalization(tasks),
        pool_seed=pool_seed,
    )


def stream_seed(pool_seed: int, task_name: str) -> int:
    """Per-task generation seed; independent of generation order."""
    return stream_key(pool_seed, "task-data", task_name) % (2**63)


def default_desk_specs() -> tuple[list[SyntheticSpec], list[list[str]]]:
    """The 12-task desk pool: binary and 3-9-class tasks, sizes 200..20000,
    two related pairs, two non-square tasks."""
    sizes = [200, 400, 700, 1200, 2000, 3200, 5000, 8000, 12000, 16000, 20000, 6000]
    classes = [2, 2, 3, 2, 5, 3, 2, 9, 4, 2, 2, 7]
    specs = []
    for i, (n, c) in enumerate(zip(sizes, classes)):
        image_size = (16, 20) if i in (4, 9) else (16, 16)
        specs.append(
            SyntheticSpec(
                name=f"synth{i:02d}",
                class_count=c,
                sample_count=n,
                image_size=image_size,
                relatedness_seed=100 + i,
                noise_level=0.05,
            )
        )
    # two related pairs: same styles, different draw of samples
    specs[1].relatedness_seed = specs[0].relatedness_seed
    specs[3].relatedness_seed = specs[2].relatedness_seed
    related = [["synth00", "synth01"], ["synth02", "synth03"]]
    return specs, related


# -- summaries ---------------------------------------------------------------


def pool_summary(pool) -> dict:
    """Totals over the pool: {task_count, class_total, image_total}.

    Accepts a TaskPool or a manifest dict (entries need n_images/n_classes),
    so count fixtures can be checked without rendering any pixels.
    """
    if isinstance(pool, TaskPool):
        entries = [(t.n_samples, t.n_classes) for t in pool.tasks]
    else:
        entries = [(int(t["n_images"]), int(t["n_classes"])) for t in pool["tasks"]]
    return {
        "task_count": len(entries),
        "class_total": sum(c for _, c in entries),
        "image_total": sum(n for n, _ in entries),
    }


# -- persistence --------------------------------------------------------------


def write_tensor_file(path: Path, array: np.ndarray) -> None:
    """Flat binary tensor: magic, version u32, ndim u32, dims u32*, f32 data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(POOL_MAGIC)
        f.write(struct.pack("<I", POOL_FORMAT_VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tensor_file(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != POOL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != POOL_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported tensor file version {version}")
        (ndim,) = struct.unpack("<I", f.read(4))
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        payload = f.read()
        expected = int(np.prod(dims)) * 4
        if len(payload) != expected:
            raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_pool(pool: TaskPool, out_dir: Path) -> Path:
    """Write manifest.json plus one tensor file per task; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "mtlwb-pool",
        "version": POOL_FORMAT_VERSION,
        "pool_seed": pool.pool_seed,
        "related_groups": pool.related_groups,
        "normalization": {
            "mean": pool.normalization.mean.tolist(),
            "std": pool.normalization.std.tolist(),
        },
        "tasks": [],
    }
    for t in pool.tasks:
        fname = f"task_{t.task_id}.mtpl"
        write_tensor_file(out_dir / fname, t.images)
        manifest["tasks"].append(
            {
                "task_id": t.task_id,
                "name": t.name,
                "n_images": t.n_samples,
                "n_classes": t.n_classes,
                "metric_kind": t.metric_kind,
                "related_group": t.related_group,
                "tensor_file": fname,
                "labels": t.labels.tolist(),
                "group_keys": t.group_keys.tolist(),
                "splits": {k: v.tolist() for k, v in t.splits.items()},
                "spec": t.spec.to_dict() if t.spec else None,
            }
        )
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return path


def load_pool(manifest_path: Path) -> TaskPool:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "mtlwb-pool":
        raise ValueError(f"{manifest_path}: not a pool manifest")
    base = manifest_path.parent
    tasks = []
    for entry in manifest["tasks"]:
        images = read_tensor_file(base / entry["tensor_file"])
        tasks.append(
            Task(
                task_id=entry["task_id"],
                name=entry["name"],
                images=images,
                labels=np.asarray(entry["labels"], dtype=np.int64),
                group_keys=np.asarray(entry["group_keys"], dtype=np.int64),
                splits={k: np.asarray(v, dtype=np.int64) for k, v in entry["splits"].items()},
                metric_kind=entry["metric_kind"],
                related_group=entry.get("related_group"),
                spec=SyntheticSpec.from_dict(entry["spec"]) if entry.get("spec") else None,
            )
        )
    norm = NormalizationStats(
        mean=np.asarray(manifest["normalization"]["mean"]),
        std=np.asarray(manifest["normalization"]["std"]),
    )
    return TaskPool(
        tasks=tasks,
        related_groups=[list(g) for g in manifest["related_groups"]],
        normalization=norm,
        pool_seed=int(manifest.get("pool_seed", 0)),
    )
