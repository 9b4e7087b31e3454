"""File-based pipeline stages behind the command-line interface.

Each stage reads its inputs from disk, writes into one output directory and
leaves a ``manifest.json`` there with the effective configuration and the
sha256 of every input and output. Artifacts never embed timestamps or pool
sizes (those live under the manifest's ``runtime`` key), so rerunning a stage
with the same configuration reproduces the same bytes.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from delta_lab import __version__, container
from delta_lab import arithmetic as ar
from delta_lab import curvature as cv
from delta_lab import linearize as lz
from delta_lab import metrics as mt
from delta_lab import network as nw
from delta_lab import taskgen as tg
from delta_lab import trainer as tr
from delta_lab.errors import ConfigError, DataError, HashMismatchError

MANIFEST = "manifest.json"
THREADS_ENV = "DELTA_LAB_THREADS"
CHECKPOINT = "checkpoint.dlab"
CURVATURE = "ekfac.dlab"
REFERENCE = "reference.dlab"

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "tasks": 4,
        "dim": 16,
        "classes": 3,
        "samples": 2000,
        "separation": 6.0,
        "cluster_std": 1.0,
        "reference_factor": 4,
        "hint_rate": tg.SuiteSpec.hint_rate,
        "seed": 0,
    },
    "pretrain": {
        "hidden": [256, 128],
        "features": 8,
        "activation": "tanh",
        "steps": 500,
        "learning_rate": 1e-2,
        "batch_size": 128,
        "seed": 0,
        "head_scale": 3.0,
        "head_seed": 1,
    },
    "curvature": {"damping": cv.DEFAULT_DAMPING, "reference": "broad", "task_index": None, "oracle": False},
    "train": {
        "method": "delta",
        "tasks": None,
        "label": None,
        "steps": tr.TrainConfig.steps,
        "batch_size": tr.TrainConfig.batch_size,
        "learning_rate": tr.TrainConfig.learning_rate,
        "weight_decay": tr.TrainConfig.weight_decay,
        "beta_T": tr.TrainConfig.beta_T,
        "beta_S": tr.TrainConfig.beta_S,
        "gamma": tr.TrainConfig.gamma,
        "apkd_mode": tr.TrainConfig.apkd_mode,
        "alpha_range": list(tr.TrainConfig.alpha_range),
        "seed": tr.TrainConfig.seed,
        "student_ce_at_alpha": False,
    },
    "merge": {"alpha": 1.0, "sweep": False, "grid": list(ar.ADDITION_GRID), "role": "student", "tasks": None},
    "negate": {
        "alpha": 1.0,
        "sweep": False,
        "grid": list(ar.NEGATION_GRID),
        "budget": 0.03,
        "role": "student",
        "targets": None,
    },
    "report": {
        "heatmap_grid": list(mt.HEATMAP_GRID),
        "addition_grid": list(ar.ADDITION_GRID),
        "negation_grid": list(ar.NEGATION_GRID),
        "negation_budget": 0.03,
        "robustness_range": [0.3, 1.0],
        "bins": lz.HIST_BINS,
    },
}


# ---------------------------------------------------------------- utilities


def resolve_workers(flag: int | None = None) -> int:
    """Pool size: explicit flag, then ``DELTA_LAB_THREADS``, then the CPU count."""
    if flag is not None:
        n = int(flag)
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError(f"worker count must be positive, got {n}")
    return n


def pmap(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map; results are assembled by input index whatever the pool size."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def effective_config(command: str, file_config: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults, then the config file, then explicit flags (``None`` means unset)."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = dict(DEFAULTS[command])
    file_config = file_config or {}
    section = file_config.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {command!r} must be an object")
    shared = {k: v for k, v in file_config.items() if k not in DEFAULTS}
    for source in (shared, section, flags or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in cfg:
                raise ConfigError(f"unknown option {key!r} for {command}")
            cfg[key] = value
    return cfg


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def fmt(x) -> str:
    return f"{x:.6g}"


def _round6(obj):
    """Recursively round floats to 6 significant digits for JSON output."""
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(fmt(float(obj)))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round6(obj.tolist())
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_round6(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    version: str = __version__
    extra: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> None:
        (out_dir / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, run_dir: str | Path) -> RunManifest:
        path = Path(run_dir) / MANIFEST
        if not path.is_file():
            raise DataError(f"{run_dir}: no {MANIFEST}; not a pipeline output directory")
        try:
            return cls(**json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}: unreadable manifest ({exc})") from None

    def comparable(self) -> dict:
        """Everything except run-time facts (wall clock, pool size)."""
        d = asdict(self)
        d.pop("runtime")
        return d


class _Stage:
    """Collects input/output hashes while a stage runs and writes the manifest at the end."""

    def __init__(self, command: str, config: dict, out_dir: str | Path, workers: int, seed=None):
        self.command = command
        self.config = config
        self.out = Path(out_dir)
        self.workers = workers
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}
        self.start = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def used(self, path: str | Path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"missing input file: {path}")
        self.inputs[str(path)] = container.file_sha256(path)
        return path

    def path(self, name: str) -> Path:
        return self.out / name

    def wrote(self, name: str) -> None:
        self.outputs[name] = container.file_sha256(self.out / name)

    def finish(self) -> RunManifest:
        m = RunManifest(
            command=self.command,
            config=self.config,
            inputs=dict(sorted(self.inputs.items())),
            outputs=dict(sorted(self.outputs.items())),
            seed=self.seed,
            extra=self.extra,
            runtime={"workers": self.workers, "wall_clock_ms": (time.perf_counter() - self.start) * 1e3},
        )
        m.write(self.out)
        return m


# ------------------------------------------------------------ data loading


def suite_spec_from_config(cfg: dict) -> tg.SuiteSpec:
    return tg.SuiteSpec(
        n_tasks=int(cfg["tasks"]),
        input_dim=int(cfg["dim"]),
        n_classes=int(cfg["classes"]),
        samples_per_task=int(cfg["samples"]),
        center_separation=float(cfg["separation"]),
        cluster_std=float(cfg["cluster_std"]),
        reference_factor=int(cfg["reference_factor"]),
        hint_rate=float(cfg["hint_rate"]),
        seed=int(cfg["seed"]),
    )


@dataclass
class SuiteFiles:
    spec: tg.SuiteSpec
    tasks: list
    reference: tg.TaskDataset
    paths: list[Path]
    hash: str = ""


def load_suite(data_dir: str | Path, stage: _Stage | None = None) -> SuiteFiles:
    data_dir = Path(data_dir)
    manifest = RunManifest.read(data_dir)
    if manifest.command != "gen-data":
        raise DataError(f"{data_dir} was written by {manifest.command!r}, expected gen-data output")
    spec = suite_spec_from_config(manifest.config)
    paths = [data_dir / f"task_{t}.dlab" for t in range(spec.n_tasks)] + [data_dir / REFERENCE]
    for p in paths:
        if not p.is_file():
            raise DataError(f"missing dataset file: {p}")
        if stage is not None:
            stage.used(p)
        if manifest.outputs.get(p.name) != container.file_sha256(p):
            raise HashMismatchError(f"{p}: contents do not match the data manifest")
    tasks = [tg.load_dataset(p) for p in paths[:-1]]
    digest = container.sha256_hex("".join(container.file_sha256(p) for p in paths).encode())
    return SuiteFiles(spec, tasks, tg.load_dataset(paths[-1]), paths, digest)


def save_checkpoint(path: str | Path, spec: nw.NetworkSpec, theta: nw.ParameterVector, head: nw.Head, extra=None) -> str:
    """Pre-trained weights plus the frozen head, stored in 32-bit."""
    meta = {"spec": spec.to_dict(), "spec_hash": spec.hash, "content_hash": theta.content_hash, **(extra or {})}
    sections = {
        "theta": theta.values.astype("<f4"),
        "head_weights": head.weights.astype("<f4"),
        "head_bias": head.bias.astype("<f4"),
    }
    return container.write(path, "checkpoint", meta, sections)


def load_checkpoint(path: str | Path):
    header, arrays = container.read(path, "checkpoint")
    meta = header["meta"]
    spec = nw.NetworkSpec.from_dict(meta["spec"])
    if spec.hash != meta["spec_hash"]:
        raise HashMismatchError(f"{path}: stored spec does not match its hash")
    theta = nw.ParameterVector.of(spec, arrays["theta"].astype(np.float64))
    if theta.content_hash != meta["content_hash"]:
        raise HashMismatchError(f"{path}: weights do not match the recorded content hash")
    head = nw.Head(arrays["head_weights"].astype(np.float64), arrays["head_bias"].astype(np.float64))
    return spec, theta, head, meta


def _file_in(path: str | Path, name: str) -> Path:
    path = Path(path)
    return path / name if path.is_dir() else path


@dataclass
class Model:
    spec: nw.NetworkSpec
    theta0: nw.ParameterVector
    head: nw.Head
    meta: dict


def load_model(checkpoint: str | Path, stage: _Stage | None = None) -> Model:
    path = _file_in(checkpoint, CHECKPOINT)
    if not path.is_file():
        raise DataError(f"missing pre-trained checkpoint: {path}")
    if stage is not None:
        stage.used(path)
    spec, theta, head, meta = load_checkpoint(path)
    return Model(spec, theta, head, meta)


# ------------------------------------------------------------------ stages


def gen_data(cfg: dict, out: str | Path, force: bool = False, workers: int = 1) -> RunManifest:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        _clear_previous(out)
    spec = suite_spec_from_config(cfg)
    stage = _Stage("gen-data", cfg, out, workers, seed=spec.seed)
    suite = tg.make_suite(spec)
    datasets = [(f"task_{t}.dlab", ds) for t, ds in enumerate(suite.tasks)] + [(REFERENCE, suite.reference)]

    def write(item):
        name, ds = item
        tg.save_dataset(ds, stage.path(name))
        return name

    for name in pmap(write, datasets, workers):
        stage.wrote(name)
    stage.extra["min_center_distance"] = tg.min_center_distance(suite.centers)
    return stage.finish()


def _clear_previous(out: Path) -> None:
    # only files a previous pipeline run declared are removed
    try:
        previous = RunManifest.read(out)
    except DataError:
        raise ConfigError(f"{out} is not empty and holds no pipeline manifest; refusing to overwrite") from None
    for name in previous.outputs:
        (out / name).unlink(missing_ok=True)
    (out / MANIFEST).unlink()


def network_spec_from_config(cfg: dict, input_dim: int) -> nw.NetworkSpec:
    hidden = cfg["hidden"]
    if isinstance(hidden, str):
        hidden = [int(h) for h in hidden.split(",") if h.strip()]
    return nw.NetworkSpec((input_dim, *[int(h) for h in hidden], int(cfg["features"])), cfg["activation"], True)


def pretrain(cfg: dict, data: str | Path, out: str | Path, workers: int = 1) -> RunManifest:
    stage = _Stage("pretrain", cfg, out, workers, seed=int(cfg["seed"]))
    suite = load_suite(data, stage)
    spec = network_spec_from_config(cfg, suite.spec.input_dim)
    head = nw.Head.random(spec.feature_dim, suite.spec.n_classes, int(cfg["head_seed"]), float(cfg["head_scale"]))
    theta = tr.pretrain(
        spec,
        suite.reference,
        head,
        steps=int(cfg["steps"]),
        learning_rate=float(cfg["learning_rate"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
    )
    theta0 = nw.ParameterVector.of(spec, ar.round_f32(theta))
    head = nw.Head(ar.round_f32(head.weights), ar.round_f32(head.bias))
    save_checkpoint(stage.path(CHECKPOINT), spec, theta0, head, {"reference_hash": suite.reference.content_hash})
    stage.wrote(CHECKPOINT)
    stage.extra["reference_accuracy"] = mt.accuracy(spec, theta0, head, suite.reference)
    stage.extra["task_accuracy"] = [mt.accuracy(spec, theta0, head, t) for t in suite.tasks]
    return stage.finish()


def curvature(cfg: dict, data: str | Path, checkpoint: str | Path, out: str | Path, workers: int = 1) -> RunManifest:
    stage = _Stage("curvature", cfg, out, workers)
    suite = load_suite(data, stage)
    model = load_model(checkpoint, stage)
    reference = tg.reference_subset(suite.reference, suite.spec, cfg["reference"], cfg["task_index"])
    damping = float(cfg["damping"])
    state = cv.ekfac(model.spec, model.theta0, reference, damping)
    extra = {"theta0_hash": model.theta0.content_hash, "reference_variant": cfg["reference"], "reference_size": len(reference)}
    cv.save_ekfac(state, stage.path(CURVATURE), extra)
    stage.wrote(CURVATURE)
    stage.extra.update(extra)
    if cfg["oracle"]:
        exact = cv.exact_ggn(model.spec, model.theta0, reference).matrix
        undamped = cv.EkfacState(state.U_A, state.U_G, [s - damping for s in state.S], 0.0, state.spec, state.dataset_hash)
        stage.extra["oracle"] = {
            "ekfac_frobenius_gap": float(np.linalg.norm(cv.ekfac_dense(undamped) - exact)),
            "kfac_frobenius_gap": float(np.linalg.norm(cv.kfac_dense(cv.kfac_factors(model.spec, model.theta0, reference)) - exact)),
            "exact_frobenius_norm": float(np.linalg.norm(exact)),
        }
    return stage.finish()


def load_curvature(path: str | Path, model: Model, stage: _Stage | None = None) -> cv.EkfacState:
    path = _file_in(path, CURVATURE)
    if not path.is_file():
        raise DataError(f"missing curvature file: {path}")
    if stage is not None:
        stage.used(path)
    state = cv.load_ekfac(path)
    meta = container.read(path, "ekfac")[0]["meta"]
    if state.spec_hash != model.spec.hash:
        raise HashMismatchError(f"{path}: curvature was computed for a different network spec")
    if meta.get("theta0_hash") != model.theta0.content_hash:
        raise HashMismatchError(f"{path}: curvature was computed around a different pre-trained model")
    return state


def _select_tasks(tasks: list, wanted) -> list[int]:
    if wanted is None:
        return list(range(len(tasks)))
    if isinstance(wanted, str):
        wanted = [w for w in wanted.split(",") if w]
    ids = [t.task_id for t in tasks]
    out = []
    for w in wanted:
        w = f"task_{w}" if isinstance(w, int) or str(w).isdigit() else str(w)
        if w not in ids:
            raise ConfigError(f"unknown task {w!r}; available: {', '.join(ids)}")
        out.append(ids.index(w))
    return out


def train_config(cfg: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        method=cfg["method"],
        steps=int(cfg["steps"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        weight_decay=float(cfg["weight_decay"]),
        beta_T=float(cfg["beta_T"]),
        beta_S=float(cfg["beta_S"]),
        gamma=float(cfg["gamma"]),
        apkd_mode=cfg["apkd_mode"],
        alpha_range=tuple(float(a) for a in cfg["alpha_range"]),
        seed=int(cfg["seed"]),
        student_ce_at_alpha=bool(cfg["student_ce_at_alpha"]),
    )


def train(
    cfg: dict,
    data: str | Path,
    checkpoint: str | Path,
    out: str | Path,
    curvature_path: str | Path | None = None,
    workers: int = 1,
) -> RunManifest:
    config = train_config(cfg)
    cfg = {**cfg, "label": cfg.get("label") or config.method}
    stage = _Stage("train", {**cfg, "effective": config.to_dict()}, out, workers, seed=config.seed)
    suite = load_suite(data, stage)
    model = load_model(checkpoint, stage)
    state = None
    if curvature_path is not None:
        state = load_curvature(curvature_path, model, stage)
    elif config.needs_curvature:
        raise ConfigError(f"method {config.method} with beta > 0 needs --curvature")
    chosen = _select_tasks(suite.tasks, cfg["tasks"])
    stage.extra["suite_hash"] = suite.hash

    def run(t: int):
        return tr.train(model.spec, config, suite.tasks[t], model.theta0, model.head, state)

    outcomes = pmap(run, chosen, workers)
    for t, outcome in zip(chosen, outcomes):
        tid = suite.tasks[t].task_id
        ar.save_task_vector(outcome.tau_student, stage.path(f"{tid}.student.dlab"))
        stage.wrote(f"{tid}.student.dlab")
        if outcome.tau_teacher is not None and outcome.tau_teacher is not outcome.tau_student:
            ar.save_task_vector(outcome.tau_teacher, stage.path(f"{tid}.teacher.dlab"))
            stage.wrote(f"{tid}.teacher.dlab")
        outcome.write_trace(stage.path(f"{tid}.trace.csv"))
        stage.wrote(f"{tid}.trace.csv")
    stage.extra["train_wall_clock_ms"] = {suite.tasks[t].task_id: o.wall_clock_ms for t, o in zip(chosen, outcomes)}
    return stage.finish()


@dataclass
class TrainRun:
    path: Path
    manifest: RunManifest
    label: str
    method: str
    students: dict  # task_id -> TaskVector
    teachers: dict

    @property
    def config(self) -> dict:
        return self.manifest.config


def load_run(run_dir: str | Path, model: Model, stage: _Stage | None = None, suite: SuiteFiles | None = None) -> TrainRun:
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    if manifest.command != "train":
        raise DataError(f"{run_dir} was written by {manifest.command!r}, expected train output")
    if suite is not None and manifest.extra.get("suite_hash") != suite.hash:
        raise HashMismatchError(f"{run_dir}: trained on a different task suite than {suite.paths[0].parent}")
    students, teachers = {}, {}
    for name in manifest.outputs:
        if not name.endswith(".dlab"):
            continue
        path = run_dir / name
        if stage is not None:
            stage.used(path)
        tau = ar.load_task_vector(path)
        if tau.base_hash != model.theta0.lineage or tau.spec_hash != model.spec.hash:
            raise HashMismatchError(f"{path}: task vector was trained from a different pre-trained model")
        (teachers if name.endswith(".teacher.dlab") else students)[tau.task_id] = tau
    if not students:
        raise DataError(f"{run_dir}: no task vectors found")
    cfg = manifest.config
    return TrainRun(run_dir, manifest, cfg.get("label") or cfg["method"], cfg["method"], students, teachers)


class Evaluator:
    """Accuracy of composed models on the suite's held-out splits."""

    def __init__(self, model: Model, suite: SuiteFiles):
        self.model = model
        self.suite = suite
        self.tasks = suite.tasks
        self.control = suite.reference.test()

    def accuracy(self, theta, dataset, linearized: bool) -> float:
        m = self.model
        return mt.accuracy(m.spec, theta, m.head, dataset, m.theta0.values, linearized)

    def pretrained(self) -> list[float]:
        return [self.accuracy(self.model.theta0.values, t, False) for t in self.tasks]

    def pretrained_control(self) -> float:
        return self.accuracy(self.model.theta0.values, self.control, False)

    def mean_accuracy(self, theta, indices: Sequence[int], linearized: bool) -> float:
        return float(np.mean([self.accuracy(theta, self.tasks[i], linearized) for i in indices]))


def _vectors(run: TrainRun, role: str, indices: Sequence[int], tasks) -> list[ar.TaskVector]:
    pool = run.students if role == "student" else run.teachers
    out = []
    for i in indices:
        tid = tasks[i].task_id
        if tid not in pool:
            raise DataError(f"{run.path}: no {role} vector for {tid}")
        out.append(pool[tid])
    return out


def addition(ev: Evaluator, taus: list[ar.TaskVector], indices: Sequence[int], grid, workers: int):
    """Merged-model accuracy per task along a shared-alpha grid."""
    lin = ar.evaluates_linearized(taus[0])
    theta0 = ev.model.theta0

    def point(alpha):
        theta = ar.compose(theta0, [(alpha, t) for t in taus]).values
        return [ev.accuracy(theta, ev.tasks[i], lin) for i in indices]

    return pmap(point, [float(a) for a in grid], workers)


def individual_accuracy(ev: Evaluator, taus: list[ar.TaskVector], indices: Sequence[int], workers: int) -> list[float]:
    theta0 = ev.model.theta0

    def one(k):
        tau = taus[k]
        return ev.accuracy(ar.compose(theta0, [(1.0, tau)]).values, ev.tasks[indices[k]], ar.evaluates_linearized(tau))

    return pmap(one, range(len(taus)), workers)


def merge(cfg: dict, data, checkpoint, vectors, out, workers: int = 1) -> RunManifest:
    stage = _Stage("merge", cfg, out, workers)
    suite = load_suite(data, stage)
    model = load_model(checkpoint, stage)
    run = load_run(vectors, model, stage, suite)
    ev = Evaluator(model, suite)
    indices = _select_tasks(suite.tasks, cfg["tasks"])
    taus = _vectors(run, cfg["role"], indices, suite.tasks)
    ids = [suite.tasks[i].task_id for i in indices]
    individual = individual_accuracy(ev, taus, indices, workers)
    method = taus[0].method
    if cfg["sweep"]:
        grid = [float(a) for a in cfg["grid"]]
        if not grid:
            raise ConfigError("alpha grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("alpha grid must be strictly increasing")
        curve = addition(ev, taus, indices, grid, workers)
        sweep = ar.SweepResult(grid, [float(np.mean(c)) for c in curve])
        alpha = sweep.argmax
        absolute = curve[grid.index(alpha)]
        write_csv(stage.path("sweep.csv"), ["alpha", "mean_accuracy", *ids], [[a, m, *c] for a, m, c in zip(grid, sweep.values, curve)])
        stage.wrote("sweep.csv")
    else:
        alpha = float(cfg["alpha"])
        absolute = addition(ev, taus, indices, [alpha], 1)[0]
    report = mt.EvalReport(method, alpha, ids, absolute, individual)
    write_json(stage.path("merge.json"), {"label": run.label, "role": cfg["role"], **report.to_dict()})
    stage.path("merge.txt").write_text(report.to_text() + "\n")
    stage.wrote("merge.json")
    stage.wrote("merge.txt")
    return stage.finish()


@dataclass
class NegationResult:
    task_id: str
    alphas: list
    target: list
    control: list
    pretrained_target: float
    pretrained_control: float
    budget: float
    alpha: float | None  # selected alpha, None when no grid point meets the budget
    relaxed_alpha: float | None = None
    needed_budget: float | None = None

    @property
    def feasible(self) -> bool:
        return self.alpha is not None

    def at(self, alpha: float) -> tuple[float, float]:
        k = self.alphas.index(alpha)
        return self.target[k], self.control[k]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feasible"] = self.feasible
        chosen = self.alpha if self.feasible else self.relaxed_alpha
        d["selected_target"], d["selected_control"] = self.at(chosen)
        return d


def select_negation(task_id, alphas, target, control, pre_target, pre_control, budget) -> NegationResult:
    """Lowest target accuracy whose control accuracy stays within ``budget`` of pre-trained.

    Ties go to the smallest alpha. When no grid point qualifies, the point
    with the highest control accuracy is reported with the budget it needs.
    """
    floor = pre_control - budget
    best = None
    for k, (t, c) in enumerate(zip(target, control)):
        if c >= floor - 1e-12 and (best is None or t < target[best]):
            best = k
    res = NegationResult(task_id, list(alphas), list(target), list(control), pre_target, pre_control, budget,
                         alphas[best] if best is not None else None)
    if best is None:
        k = int(np.argmax(control))
        res.relaxed_alpha = alphas[k]
        res.needed_budget = float(pre_control - control[k])
    return res


def negation(ev: Evaluator, tau: ar.TaskVector, index: int, grid, budget: float, pre_target: float, pre_control: float, workers: int):
    lin = ar.evaluates_linearized(tau)
    theta0 = ev.model.theta0
    task = ev.tasks[index]

    def point(alpha):
        theta = ar.negate(theta0, tau, alpha).values
        return ev.accuracy(theta, task, lin), ev.accuracy(theta, ev.control, lin)

    grid = [float(a) for a in grid]
    vals = pmap(point, grid, workers)
    return select_negation(task.task_id, grid, [v[0] for v in vals], [v[1] for v in vals], pre_target, pre_control, budget)


def negate(cfg: dict, data, checkpoint, vectors, out, workers: int = 1) -> RunManifest:
    stage = _Stage("negate", cfg, out, workers)
    suite = load_suite(data, stage)
    model = load_model(checkpoint, stage)
    run = load_run(vectors, model, stage, suite)
    ev = Evaluator(model, suite)
    indices = _select_tasks(suite.tasks, cfg["targets"])
    taus = _vectors(run, cfg["role"], indices, suite.tasks)
    pre = ev.pretrained()
    pre_control = ev.pretrained_control()
    grid = [float(a) for a in cfg["grid"]] if cfg["sweep"] else [float(cfg["alpha"])]
    if not grid:
        raise ConfigError("alpha grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("alpha grid must be strictly increasing")
    results = [negation(ev, tau, i, grid, float(cfg["budget"]), pre[i], pre_control, workers) for tau, i in zip(taus, indices)]
    rows = []
    for r in results:
        rows += [[r.task_id, a, t, c, int(c >= r.pretrained_control - r.budget - 1e-12)] for a, t, c in zip(r.alphas, r.target, r.control)]
    write_csv(stage.path("negation_sweep.csv"), ["task_id", "alpha", "target_accuracy", "control_accuracy", "within_budget"], rows)
    summary = _negation_summary(results)
    write_json(stage.path("negation.json"), {"label": run.label, "role": cfg["role"], **summary})
    stage.path("negation.txt").write_text(_negation_text(results) + "\n")
    for name in ("negation_sweep.csv", "negation.json", "negation.txt"):
        stage.wrote(name)
    return stage.finish()


def _negation_summary(results: list[NegationResult]) -> dict:
    rows = [r.to_dict() for r in results]
    feasible = all(r.feasible for r in results)
    return {
        "targets": rows,
        "all_feasible": feasible,
        "mean_pretrained_target": float(np.mean([r.pretrained_target for r in results])),
        "mean_target": float(np.mean([d["selected_target"] for d in rows])),
        "mean_target_drop": float(np.mean([r.pretrained_target - d["selected_target"] for r, d in zip(results, rows)])),
        "pretrained_control": results[0].pretrained_control,
        "max_control_deviation": float(max(abs(d["selected_control"] - r.pretrained_control) for r, d in zip(results, rows))),
    }


def _negation_text(results: list[NegationResult]) -> str:
    lines = [f"{'task':<12}{'alpha':>8}{'target':>10}{'pre':>10}{'control':>10}{'pre':>10}  note"]
    for r in results:
        d = r.to_dict()
        alpha = r.alpha if r.feasible else r.relaxed_alpha
        note = "" if r.feasible else f"infeasible: needs budget {r.needed_budget:.6g}"
        lines.append(
            f"{r.task_id:<12}{alpha:>8.6g}{d['selected_target']:>10.6g}{r.pretrained_target:>10.6g}"
            f"{d['selected_control']:>10.6g}{r.pretrained_control:>10.6g}  {note}".rstrip()
        )
    return "\n".join(lines)


# ------------------------------------------------------------------ report


def _hist_rows(values: np.ndarray, bins: int):
    prof = lz.summarize(values, bins)
    return [[lo, hi, int(c)] for lo, hi, c in zip(prof.bin_edges[:-1], prof.bin_edges[1:], prof.counts)]


def report(cfg: dict, data, checkpoint, runs: Sequence, out, workers: int = 1) -> RunManifest:
    stage = _Stage("report", cfg, out, workers)
    suite = load_suite(data, stage)
    model = load_model(checkpoint, stage)
    loaded = [load_run(r, model, stage, suite) for r in runs]
    if not loaded:
        raise ConfigError("report needs at least one train run directory")
    labels = [r.label for r in loaded]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"run labels must be unique, got {labels}; pass --label when training")
    ev = Evaluator(model, suite)
    T = len(suite.tasks)
    ids = [t.task_id for t in suite.tasks]
    pre = ev.pretrained()
    pre_control = ev.pretrained_control()
    bins = int(cfg["bins"])
    lo, hi = (float(a) for a in cfg["robustness_range"])
    pairwise = T >= 2
    summary = {
        "tasks": ids,
        "pretrained": {"task_accuracy": pre, "control_accuracy": pre_control},
        "runs": {},
        "notes": [] if pairwise else [f"pairwise analyses need at least 2 tasks; the suite has {T}"],
    }
    test_inputs = np.concatenate([t.test()[0] for t in suite.tasks])
    raw_sections: dict[str, np.ndarray] = {}

    for run in loaded:
        L = run.label
        missing = [tid for tid in ids if tid not in run.students]
        if missing:
            raise DataError(f"{run.path}: report needs a vector for every task; missing {missing}")
        taus = [run.students[tid] for tid in ids]
        lin = ar.evaluates_linearized(taus[0])
        all_idx = list(range(T))
        individual = individual_accuracy(ev, taus, all_idx, workers)
        entry: dict = {"method": run.method, "run_dir": run.path.name, "linearized_eval": lin,
                       "train_config": run.config.get("effective", {}), "individual": individual}

        grid = [float(a) for a in cfg["addition_grid"]]
        curve = addition(ev, taus, all_idx, grid, workers)
        means = [float(np.mean(c)) for c in curve]
        sweep = ar.SweepResult(grid, means)
        write_csv(stage.path(f"{L}.alpha_curve.csv"), ["alpha", "mean_accuracy", *ids], [[a, m, *c] for a, m, c in zip(grid, means, curve)])
        stage.wrote(f"{L}.alpha_curve.csv")
        at1 = addition(ev, taus, all_idx, [1.0], 1)[0]
        merged = mt.EvalReport(run.method, 1.0, ids, at1, individual)
        in_range = [m for a, m in zip(grid, means) if lo - 1e-9 <= a <= hi + 1e-9]
        entry["merged_alpha1"] = merged.to_dict()
        entry["addition_sweep"] = {
            "alphas": grid,
            "mean_accuracy": means,
            "best_alpha": sweep.argmax,
            "best_accuracy": max(means),
            "robustness_range": [lo, hi],
            "accuracy_range": float(max(in_range) - min(in_range)) if in_range else None,
        }

        if run.teachers:
            teach = [run.teachers[tid] for tid in ids if tid in run.teachers]
            if len(teach) == T:
                t_acc = individual_accuracy(ev, teach, all_idx, workers)
                entry["teacher_individual"] = t_acc
                write_csv(stage.path(f"{L}.student_teacher.csv"), ["task_id", "student", "teacher", "student_minus_teacher"],
                          [[tid, s, t, s - t] for tid, s, t in zip(ids, individual, t_acc)])
                stage.wrote(f"{L}.student_teacher.csv")

        if pairwise:
            thetas = [ar.compose(model.theta0, [(1.0, t)]).values for t in taus]
            if lin:
                linerr = np.zeros(test_inputs.shape[0])  # linearized ensembles are affine in the weights
            else:
                linerr = np.atleast_1d(lz.linearization_error(model.spec, thetas, test_inputs))
            raw_sections[f"{L}.linearization_error"] = linerr
            prof = lz.summarize(linerr, bins)
            entry["linearization_error"] = {k: v for k, v in prof.to_dict().items() if k not in ("values", "bin_edges", "counts")}
            write_csv(stage.path(f"{L}.linerr.values.csv"), ["sample", "task_id", "value"],
                      [[k, _owner(k, suite.tasks), v] for k, v in enumerate(linerr)])
            write_csv(stage.path(f"{L}.linerr.hist.csv"), ["bin_lo", "bin_hi", "count"], _hist_rows(linerr, bins))
            stage.wrote(f"{L}.linerr.values.csv")
            stage.wrote(f"{L}.linerr.hist.csv")

            hgrid = [float(a) for a in cfg["heatmap_grid"]]
            pairs = [(i, j) for i in range(T) for j in range(i + 1, T)]

            def heat(pair):
                i, j = pair
                return mt.disentanglement_heatmap(model.spec, model.theta0.values, model.head, taus[i].values, taus[j].values,
                                                  suite.tasks[i], suite.tasks[j], hgrid, hgrid, lin)

            maps = pmap(heat, pairs, workers)
            entry["disentanglement"] = {}
            for (i, j), hm in zip(pairs, maps):
                name = f"{L}.heatmap.{ids[i]}-{ids[j]}.csv"
                hm.to_csv(stage.path(name))
                stage.wrote(name)
                entry["disentanglement"][f"{ids[i]}-{ids[j]}"] = hm.mean

        cells = mt.localization_profile(model.spec, model.theta0.values, [ar.compose(model.theta0, [(1.0, t)]).values for t in taus],
                                        suite.tasks, linearized=lin)
        rows = []
        for c in cells:
            rows += [[c.task_id, "in_domain", v] for v in c.in_domain]
            if c.out_of_domain is not None:
                rows += [[c.task_id, "out_of_domain", v] for v in c.out_of_domain]
        write_csv(stage.path(f"{L}.edit_distance.values.csv"), ["model_task", "domain", "value"], rows)
        stage.wrote(f"{L}.edit_distance.values.csv")
        ind_all = np.concatenate([c.in_domain for c in cells])
        raw_sections[f"{L}.edit_in_domain"] = ind_all
        hist_rows = [["in_domain", *r] for r in _hist_rows(ind_all, bins)]
        loc = {"cells": [c.summary() for c in cells], "in_domain_median": float(np.median(ind_all))}
        if pairwise:
            ood_all = np.concatenate([c.out_of_domain for c in cells])
            raw_sections[f"{L}.edit_out_of_domain"] = ood_all
            hist_rows += [["out_of_domain", *r] for r in _hist_rows(ood_all, bins)]
            loc["out_of_domain_median"] = float(np.median(ood_all))
            loc["ratio"] = loc["in_domain_median"] / loc["out_of_domain_median"] if loc["out_of_domain_median"] > 0 else None
        else:
            loc["out_of_domain_median"] = None
            loc["ratio"] = None
        write_csv(stage.path(f"{L}.edit_distance.hist.csv"), ["domain", "bin_lo", "bin_hi", "count"], hist_rows)
        stage.wrote(f"{L}.edit_distance.hist.csv")
        entry["localization"] = loc

        ngrid = [float(a) for a in cfg["negation_grid"]]
        budget = float(cfg["negation_budget"])
        results = [negation(ev, taus[i], i, ngrid, budget, pre[i], pre_control, workers) for i in range(T)]
        nrows = []
        for r in results:
            nrows += [[r.task_id, a, t, c] for a, t, c in zip(r.alphas, r.target, r.control)]
        write_csv(stage.path(f"{L}.negation_curve.csv"), ["task_id", "alpha", "target_accuracy", "control_accuracy"], nrows)
        stage.wrote(f"{L}.negation_curve.csv")
        entry["negation"] = _negation_summary(results)
        summary["runs"][L] = entry

    if raw_sections:
        container.write(stage.path("raw_values.dlab"), "report_values", {"labels": labels}, raw_sections)
        stage.wrote("raw_values.dlab")
    write_json(stage.path("summary.json"), summary)
    stage.path("summary.txt").write_text(_summary_text(summary) + "\n")
    stage.wrote("summary.json")
    stage.wrote("summary.txt")
    return stage.finish()


def _owner(k: int, tasks) -> str:
    for t in tasks:
        n = len(t.test_idx)
        if k < n:
            return t.task_id
        k -= n
    raise IndexError(k)


def _summary_text(summary: dict) -> str:
    lines = ["pretrained task accuracy: " + " ".join(fmt(a) for a in summary["pretrained"]["task_accuracy"]),
             f"pretrained control accuracy: {fmt(summary['pretrained']['control_accuracy'])}", ""]
    cols = ["indiv", "merged@1", "norm%", "best", "range", "linerr", "disent", "loc", "neg drop"]
    head = f"{'run':<22}" + "".join(f"{c:>11}" for c in cols)
    lines.append(head)
    for label, e in summary["runs"].items():
        le = e.get("linearization_error")
        dis = e.get("disentanglement")
        ratio = e["localization"]["ratio"]
        vals = [
            fmt(np.mean(e["individual"])),
            fmt(e["merged_alpha1"]["mean_absolute"]),
            fmt(e["merged_alpha1"]["mean_normalized"]),
            fmt(e["addition_sweep"]["best_accuracy"]),
            fmt(e["addition_sweep"]["accuracy_range"]),
            fmt(le["mean"]) if le else "-",
            fmt(np.mean(list(dis.values()))) if dis else "-",
            fmt(ratio) if ratio is not None else "-",
            fmt(e["negation"]["mean_target_drop"]),
        ]
        lines.append(f"{label:<22}" + "".join(f"{v:>11}" for v in vals))
    lines += summary["notes"]
    return "\n".join(lines)
