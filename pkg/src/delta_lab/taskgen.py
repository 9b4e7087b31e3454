"""Deterministic synthetic multi-task suites and the curvature reference set.

Each task is ``C`` isotropic Gaussian blobs, one per class, with centers drawn
far apart from every other task's centers. The reference set mixes samples
from all blobs with broad background noise and doubles as pre-training data.
Background labels come from a fixed random linear "pretext" labeler. A blob
sample keeps its true class with probability ``hint_rate`` and otherwise gets
a uniformly random one, so pre-training sees the task regions only faintly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from delta_lab import container
from delta_lab.errors import ConfigError, DataError, HashMismatchError

MAX_CENTER_RETRIES = 10_000
TRAIN_FRACTION = 0.8
REFERENCE_VARIANTS = ("broad", "union_only", "single_task_proxy")


@dataclass(frozen=True)
class SuiteSpec:
    n_tasks: int = 4
    input_dim: int = 16
    n_classes: int = 3
    samples_per_task: int = 2000
    center_separation: float = 6.0
    cluster_std: float = 1.0
    reference_factor: int = 4
    hint_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1 or self.input_dim < 1 or self.n_classes < 2:
            raise ConfigError(f"invalid suite dimensions: {self}")
        if self.samples_per_task < 5 * self.n_classes:
            raise ConfigError("samples_per_task too small to split every class 80/20")
        if self.center_separation <= 0 or self.cluster_std <= 0 or self.reference_factor < 1:
            raise ConfigError(f"invalid suite geometry: {self}")
        if not 0.0 <= self.hint_rate <= 1.0:
            raise ConfigError(f"hint_rate must lie in [0, 1], got {self.hint_rate}")

    @property
    def center_scale(self) -> float:
        return self.center_separation / 2.0

    @property
    def background_std(self) -> float:
        return 2.0 * self.center_separation / 3.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SuiteSpec:
        return cls(**d)


@dataclass(eq=False)
class TaskDataset:
    task_id: str
    inputs: np.ndarray  # (N, D), float32-representable
    labels: np.ndarray  # (N,)
    train_idx: np.ndarray
    test_idx: np.ndarray
    n_classes: int
    params: dict = field(default_factory=dict)
    centers: np.ndarray | None = None  # (C, D) for tasks
    source: np.ndarray | None = None  # reference set only: blob index, -1 for background

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.labels.shape != (n,):
            raise DataError(f"{self.task_id}: labels shape {self.labels.shape} != ({n},)")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"{self.task_id}: label out of range")
        both = np.concatenate([self.train_idx, self.test_idx])
        if not np.array_equal(np.sort(both), np.arange(n)):
            raise DataError(f"{self.task_id}: train/test split is not a partition")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.test_idx], self.labels[self.test_idx]

    @property
    def content_hash(self) -> str:
        return container.sha256_hex(_encode(self))


@dataclass(eq=False)
class Suite:
    spec: SuiteSpec
    tasks: list[TaskDataset]
    reference: TaskDataset
    centers: np.ndarray  # (T, C, D)

    def test_inputs(self) -> np.ndarray:
        return np.concatenate([t.test()[0] for t in self.tasks])


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _place_centers(spec: SuiteSpec, rng: np.random.Generator) -> np.ndarray:
    k = spec.n_tasks * spec.n_classes
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < k:
        tries += 1
        if tries > MAX_CENTER_RETRIES:
            raise ConfigError(
                f"could not place {k} centers {spec.center_separation} apart after "
                f"{MAX_CENTER_RETRIES} draws; try another seed or a smaller separation"
            )
        c = rng.normal(0.0, spec.center_scale, spec.input_dim)
        if all(np.linalg.norm(c - o) >= spec.center_separation for o in centers):
            centers.append(c)
    return _f32(np.array(centers)).reshape(spec.n_tasks, spec.n_classes, spec.input_dim)


def _stratified_split(labels: np.ndarray, n_classes: int, rng: np.random.Generator):
    train, test = [], []
    for c in range(n_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = int(round(TRAIN_FRACTION * idx.size))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _balanced_counts(n: int, k: int) -> np.ndarray:
    counts = np.full(k, n // k)
    counts[: n % k] += 1
    return counts


def _make_task(spec: SuiteSpec, t: int, centers: np.ndarray, rng: np.random.Generator) -> TaskDataset:
    labels = np.repeat(np.arange(spec.n_classes), _balanced_counts(spec.samples_per_task, spec.n_classes))
    labels = labels[rng.permutation(labels.size)]
    X = centers[labels] + spec.cluster_std * rng.standard_normal((labels.size, spec.input_dim))
    train, test = _stratified_split(labels, spec.n_classes, rng)
    return TaskDataset(
        task_id=f"task_{t}",
        inputs=_f32(X),
        labels=labels.astype(np.int64),
        train_idx=train,
        test_idx=test,
        n_classes=spec.n_classes,
        params={"suite": spec.to_dict(), "task_index": t},
        centers=centers,
    )


def _make_reference(spec: SuiteSpec, centers: np.ndarray, labeler: np.ndarray, rng, hint_rng) -> TaskDataset:
    n = spec.reference_factor * spec.samples_per_task
    n_blob = n // 2
    flat = centers.reshape(-1, spec.input_dim)
    source = np.repeat(np.arange(flat.shape[0]), _balanced_counts(n_blob, flat.shape[0]))
    blobs = flat[source] + spec.cluster_std * rng.standard_normal((n_blob, spec.input_dim))
    background = spec.background_std * rng.standard_normal((n - n_blob, spec.input_dim))
    X = _f32(np.concatenate([blobs, background]))
    source = np.concatenate([source, np.full(n - n_blob, -1)])
    labels = np.argmax(X @ labeler.T, axis=1).astype(np.int64)
    if spec.hint_rate > 0:
        blob = source >= 0
        keep = hint_rng.random(n) < spec.hint_rate
        noise = hint_rng.integers(0, spec.n_classes, n)
        labels[blob] = np.where(keep, source % spec.n_classes, noise)[blob]
    train, test = _stratified_split(labels, spec.n_classes, rng)
    return TaskDataset(
        task_id="reference",
        inputs=X,
        labels=labels,
        train_idx=train,
        test_idx=test,
        n_classes=spec.n_classes,
        params={"suite": spec.to_dict(), "variant": "broad"},
        source=source.astype(np.int64),
    )


def make_suite(spec: SuiteSpec = SuiteSpec()) -> Suite:
    """Generate all task datasets and the broad reference set from ``spec.seed``."""
    # streams: centers, labeler, reference, one per task, reference hints
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4 + spec.n_tasks)]
    centers = _place_centers(spec, streams[0])
    labeler = streams[1].standard_normal((spec.n_classes, spec.input_dim))
    tasks = [_make_task(spec, t, centers[t], streams[3 + t]) for t in range(spec.n_tasks)]
    reference = _make_reference(spec, centers, labeler, streams[2], streams[-1])
    return Suite(spec, tasks, reference, centers)


def _subset(ds: TaskDataset, rows: np.ndarray, variant: str, **extra) -> TaskDataset:
    pos = {int(r): i for i, r in enumerate(rows)}
    train = np.array([pos[int(i)] for i in ds.train_idx if int(i) in pos], dtype=np.int64)
    test = np.array([pos[int(i)] for i in ds.test_idx if int(i) in pos], dtype=np.int64)
    return TaskDataset(
        task_id=f"reference_{variant}",
        inputs=ds.inputs[rows],
        labels=ds.labels[rows],
        train_idx=train,
        test_idx=test,
        n_classes=ds.n_classes,
        params={**ds.params, "variant": variant, **extra},
        source=ds.source[rows],
    )


def make_reference_variant(spec: SuiteSpec, variant: str, task_index: int | None = None) -> TaskDataset:
    """Reference set for curvature estimation.

    ``broad`` is the suite's reference set; ``union_only`` keeps its blob
    samples and drops the background; ``single_task_proxy`` keeps only the
    blob samples of one task (the last one unless ``task_index`` is given).
    """
    if variant not in REFERENCE_VARIANTS:
        raise ConfigError(f"variant must be one of {REFERENCE_VARIANTS}, got {variant!r}")
    return reference_subset(make_suite(spec).reference, spec, variant, task_index)


def reference_subset(broad: TaskDataset, spec: SuiteSpec, variant: str, task_index: int | None = None) -> TaskDataset:
    """Derive a reference variant from an already generated broad reference set."""
    if variant not in REFERENCE_VARIANTS:
        raise ConfigError(f"variant must be one of {REFERENCE_VARIANTS}, got {variant!r}")
    if broad.source is None:
        raise DataError("reference set carries no blob provenance")
    if variant == "broad":
        return broad
    if variant == "union_only":
        return _subset(broad, np.flatnonzero(broad.source >= 0), variant)
    t = spec.n_tasks - 1 if task_index is None else task_index
    if not 0 <= t < spec.n_tasks:
        raise ConfigError(f"task_index must be in [0, {spec.n_tasks}), got {task_index}")
    owner = broad.source // spec.n_classes
    return _subset(broad, np.flatnonzero((broad.source >= 0) & (owner == t)), variant, task_index=t)


def min_center_distance(centers: np.ndarray) -> float:
    """Smallest pairwise Euclidean distance over all task centers (inf for one center)."""
    flat = np.asarray(centers).reshape(-1, centers.shape[-1])
    if flat.shape[0] < 2:
        return float("inf")
    d = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    return float(d[np.triu_indices(flat.shape[0], 1)].min())


def _sections(ds: TaskDataset) -> dict[str, np.ndarray]:
    sections = {"inputs": ds.inputs.astype("<f4"), "labels": ds.labels.astype("<i4")}
    if ds.centers is not None:
        sections["centers"] = ds.centers.astype("<f8")
    if ds.source is not None:
        sections["source"] = ds.source.astype("<i4")
    return sections


def _meta(ds: TaskDataset, sections: dict[str, np.ndarray]) -> dict:
    return {
        "task_id": ds.task_id,
        "n_classes": ds.n_classes,
        "params": ds.params,
        "train_idx": ds.train_idx.tolist(),
        "test_idx": ds.test_idx.tolist(),
        "section_sha256": {k: container.sha256_hex(v.tobytes()) for k, v in sections.items()},
    }


def _encode(ds: TaskDataset) -> bytes:
    sections = _sections(ds)
    return container.encode("dataset", _meta(ds, sections), sections)


def save_dataset(ds: TaskDataset, path: str | Path) -> str:
    blob = _encode(ds)
    Path(path).write_bytes(blob)
    return container.sha256_hex(blob)


def load_dataset(path: str | Path) -> TaskDataset:
    header, arrays = container.read(path, "dataset")
    meta = header["meta"]
    for name, digest in meta["section_sha256"].items():
        if name not in arrays or container.sha256_hex(arrays[name].tobytes()) != digest:
            raise HashMismatchError(f"{path}: section {name!r} does not match its manifest hash")
    return TaskDataset(
        task_id=meta["task_id"],
        inputs=arrays["inputs"].astype(np.float64),
        labels=arrays["labels"].astype(np.int64),
        train_idx=np.array(meta["train_idx"], dtype=np.int64),
        test_idx=np.array(meta["test_idx"], dtype=np.int64),
        n_classes=int(meta["n_classes"]),
        params=meta["params"],
        centers=arrays.get("centers"),
        source=arrays["source"].astype(np.int64) if "source" in arrays else None,
    )
