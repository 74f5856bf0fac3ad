"""Synthetic continual-learning benchmark and evaluation metrics.

Tasks are Gaussian mixtures whose class means live on a ring in the first
two input dimensions; a task is a planar rotation of the shared base
layout.  The source suite covers a fan of small rotations, the target
task is rotated far outside that fan and its clusters are relabeled, so
fine-tuning on it pulls the model away from the source tasks.

Everything is deterministic: datasets are a pure function of their
TaskSpec, and experiment cells are seeded explicitly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .tensors import TensorMap
from .trainer import (
    BASELINE_METHODS,
    SPIDER_METHODS,
    Batch,
    RunLog,
    ToyModel,
    TrainConfig,
    batches_of,
    build_model,
    finetune_baseline,
    finetune_spider,
    forward,
    set_trainable_tail,
)

ZERO_SHOT = "zero_shot"

# selection-strategy arms run through the binary-mask driver
SELECTION_ARMS = {
    "select_random": "random",
    "select_magnitude": "magnitude",
    "select_gradient": "gradient",
}

METHOD_CHOICES = (ZERO_SHOT,) + BASELINE_METHODS + SPIDER_METHODS + tuple(SELECTION_ARMS)

DEFAULT_INPUT_DIM = 8
DEFAULT_CLASS_COUNT = 3
DEFAULT_SAMPLES = 400
EVAL_SAMPLES = 1500
PRETRAIN_EPOCHS = 10
DEFAULT_COVARIANCE = 0.35
_BASE_ANGLES_DEG = (0.0, 100.0, 205.0)  # irregular spacing: no rotation maps the ring onto itself
_BASE_RADIUS = 2.0
SOURCE_ROTATIONS_DEG = (0.0, 25.0, 50.0, 75.0)
TARGET_ROTATION_DEG = 120.0
# lift the target clusters off the source plane: partial input-space overlap
# gives selective methods something to preserve while full updates forget
TARGET_LIFT = 2.5


# ---------------------------------------------------------------------------
# Task generation
# ---------------------------------------------------------------------------


@dataclass
class TaskSpec:
    task_id: str
    class_count: int
    input_dim: int
    means: np.ndarray  # (class_count, input_dim)
    covariance_scale: float
    rotation_angle: float  # radians, applied in the (0, 1) plane
    sample_seed: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)


@dataclass
class TaskData:
    spec: TaskSpec
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray


def _rotate_plane(points: np.ndarray, angle: float) -> np.ndarray:
    """Givens rotation in dimensions 0 and 1; other coordinates pass through."""
    c, s = math.cos(angle), math.sin(angle)
    out = points.copy()
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def _check_spec(spec: TaskSpec, n: int) -> None:
    if spec.class_count < 2:
        raise ConfigError(f"{spec.task_id}: need at least 2 classes")
    if spec.input_dim < 2:
        raise ConfigError(f"{spec.task_id}: rotation needs input_dim >= 2")
    if spec.means.shape != (spec.class_count, spec.input_dim):
        raise ConfigError(
            f"{spec.task_id}: means shape {spec.means.shape} != "
            f"({spec.class_count}, {spec.input_dim})"
        )
    if spec.covariance_scale <= 0:
        raise ConfigError(f"{spec.task_id}: covariance_scale must be positive")
    for i in range(spec.class_count):
        for j in range(i + 1, spec.class_count):
            if not np.any(spec.means[i] != spec.means[j]):
                raise ConfigError(f"{spec.task_id}: class means {i} and {j} coincide")
    if n < spec.class_count:
        raise ConfigError(f"{spec.task_id}: need at least one sample per class")


def generate_task(spec: TaskSpec, n: int = DEFAULT_SAMPLES) -> TaskData:
    """Sample n labeled points and split 80/20 by index stride.

    Labels are assigned round-robin so every prefix is class-balanced;
    every fifth sample goes to the test split.
    """
    _check_spec(spec, n)
    rng = np.random.default_rng(spec.sample_seed)
    labels = np.arange(n, dtype=np.int64) % spec.class_count
    centers = _rotate_plane(spec.means, spec.rotation_angle)
    points = centers[labels] + spec.covariance_scale * rng.standard_normal(
        (n, spec.input_dim)
    )
    test = np.arange(n) % 5 == 4
    return TaskData(
        spec=spec,
        train_inputs=points[~test],
        train_labels=labels[~test],
        test_inputs=points[test],
        test_labels=labels[test],
    )


def _base_means(class_count: int = DEFAULT_CLASS_COUNT, input_dim: int = DEFAULT_INPUT_DIM):
    if class_count != len(_BASE_ANGLES_DEG):
        raise ConfigError("default layout is defined for 3 classes")
    means = np.zeros((class_count, input_dim))
    for c, deg in enumerate(_BASE_ANGLES_DEG):
        theta = math.radians(deg)
        means[c, 0] = _BASE_RADIUS * math.cos(theta)
        means[c, 1] = _BASE_RADIUS * math.sin(theta)
    return means


def default_suite() -> list[TaskSpec]:
    """Four source tasks: the base mixture under a fan of small rotations."""
    means = _base_means()
    return [
        TaskSpec(
            task_id=f"src_rot{int(deg):03d}",
            class_count=DEFAULT_CLASS_COUNT,
            input_dim=DEFAULT_INPUT_DIM,
            means=means,
            covariance_scale=DEFAULT_COVARIANCE,
            rotation_angle=math.radians(deg),
            sample_seed=1000 + i,
        )
        for i, deg in enumerate(SOURCE_ROTATIONS_DEG)
    ]


def default_target() -> TaskSpec:
    """Far rotation, cyclic relabeling, and a lift off the source plane."""
    means = np.roll(_base_means(), -1, axis=0)
    means[:, 2] += TARGET_LIFT
    return TaskSpec(
        task_id=f"target_rot{int(TARGET_ROTATION_DEG):03d}",
        class_count=DEFAULT_CLASS_COUNT,
        input_dim=DEFAULT_INPUT_DIM,
        means=means,
        covariance_scale=DEFAULT_COVARIANCE,
        rotation_angle=math.radians(TARGET_ROTATION_DEG),
        sample_seed=2000,
    )


# ---------------------------------------------------------------------------
# Pretraining and evaluation
# ---------------------------------------------------------------------------

HIDDEN_DIMS = (16, 16)


def _interleaved_train_set(datasets: Sequence[TaskData]) -> tuple[np.ndarray, np.ndarray]:
    sizes = {d.train_inputs.shape[0] for d in datasets}
    if len(sizes) != 1:
        raise ConfigError("suite tasks must have equal train sizes for interleaving")
    inputs = np.stack([d.train_inputs for d in datasets], axis=1)
    labels = np.stack([d.train_labels for d in datasets], axis=1)
    return inputs.reshape(-1, inputs.shape[-1]), labels.reshape(-1)


def pretrain(
    suite: Sequence[TaskSpec],
    cfg: TrainConfig,
    n_per_task: int = DEFAULT_SAMPLES,
) -> tuple[ToyModel, TensorMap]:
    """Train one shared model on the interleaved union of the source tasks.

    All layers are trainable here; freezing happens at fine-tuning time.
    Returns the model and a frozen copy of its weights.
    """
    if not suite:
        raise ConfigError("pretrain needs a non-empty suite")
    dims = {(s.input_dim, s.class_count) for s in suite}
    if len(dims) != 1:
        raise ConfigError("suite tasks must share input_dim and class_count")
    input_dim, class_count = dims.pop()

    datasets = [generate_task(spec, n_per_task) for spec in suite]
    inputs, labels = _interleaved_train_set(datasets)
    model = build_model([input_dim, *HIDDEN_DIMS, class_count], seed=cfg.seed)
    init = model.tensor_map().copy()
    run_cfg = replace(cfg, method="full_ft")
    finetune_baseline(model, init, batches_of(inputs, labels, cfg.batch_size), run_cfg)
    return model, model.tensor_map().copy()


def predict(model: ToyModel, inputs: np.ndarray) -> np.ndarray:
    batch = Batch(inputs, np.zeros(inputs.shape[0], dtype=np.int64))
    _, cache = forward(model, batch)
    return np.argmax(cache.probs, axis=1)


def evaluate(model: ToyModel, task: TaskSpec, n: int = DEFAULT_SAMPLES) -> float:
    """Accuracy on the task's held-out split.  Read-only on the model."""
    data = generate_task(task, n)
    if data.test_inputs.shape[0] == 0:
        raise ConfigError(f"{task.task_id}: empty test split")
    return float(np.mean(predict(model, data.test_inputs) == data.test_labels))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def h_average(a_s: float, a_t: float) -> float:
    """Harmonic mean of the source and target scores."""
    if a_s <= 0 or a_t <= 0:
        raise DomainError(f"harmonic mean needs positive inputs, got ({a_s}, {a_t})")
    return 2.0 * a_s * a_t / (a_s + a_t)


def o_average(a_s: float, a_t: float) -> float:
    """Arithmetic mean of the source and target scores."""
    return (a_s + a_t) / 2.0


def source_average(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise DomainError("source average over an empty suite")
    return float(np.mean(np.asarray(values, dtype=np.float64)))


@dataclass
class MetricsReport:
    method: str
    seed: int
    per_source_accuracy: dict[str, float]
    source_avg: float
    target_accuracy: float
    h_avg: float
    o_avg: float
    pid_trace: list[tuple[int, float]] = field(default_factory=list)
    mask_density_trace: list[tuple[int, float]] = field(default_factory=list)


def build_report(
    method: str, seed: int, source_accs: dict[str, float], target_acc: float, log: RunLog
) -> MetricsReport:
    a_s = source_average(list(source_accs.values()))
    # harmonic mean degenerates to 0 when either side has no accuracy at all
    h = h_average(a_s, target_acc) if min(a_s, target_acc) > 0 else 0.0
    return MetricsReport(
        method=method,
        seed=seed,
        per_source_accuracy=dict(source_accs),
        source_avg=a_s,
        target_accuracy=target_acc,
        h_avg=h,
        o_avg=o_average(a_s, target_acc),
        pid_trace=list(enumerate(log.pid)),
        mask_density_trace=list(enumerate(log.mask_density)),
    )


# ---------------------------------------------------------------------------
# Experiment pipeline
# ---------------------------------------------------------------------------


def finetune_with_method(
    model: ToyModel,
    pretrained: TensorMap,
    data: Sequence[Batch],
    cfg: TrainConfig,
    method: str,
) -> tuple[ToyModel, RunLog]:
    """Dispatch a method tag to the right driver (or to no-op for zero_shot)."""
    if method == ZERO_SHOT:
        return model, RunLog(method=ZERO_SHOT)
    if method in SELECTION_ARMS:
        run_cfg = replace(cfg, method="spider_binary", selection=SELECTION_ARMS[method])
        return finetune_spider(model, pretrained, data, run_cfg)
    if method in SPIDER_METHODS:
        return finetune_spider(model, pretrained, data, replace(cfg, method=method))
    if method in BASELINE_METHODS:
        return finetune_baseline(model, pretrained, data, replace(cfg, method=method))
    raise ConfigError(f"unknown method {method!r}")


def _finetune_cell(
    base_model: ToyModel,
    train_inputs: np.ndarray,
    train_labels: np.ndarray,
    cfg: TrainConfig,
    method: str,
) -> tuple[ToyModel, RunLog]:
    model = base_model.copy()
    set_trainable_tail(model, cfg.trainable_layer_count)
    pretrained = model.tensor_map(trainable_only=True).copy()
    data = batches_of(train_inputs, train_labels, cfg.batch_size)
    return finetune_with_method(model, pretrained, data, cfg, method)


def run_experiment(
    suite: Sequence[TaskSpec],
    target: TaskSpec,
    methods: Sequence[str],
    cfg: TrainConfig,
    seeds: Sequence[int],
    n_per_task: int = DEFAULT_SAMPLES,
    n_eval: int = EVAL_SAMPLES,
    pretrain_epochs: int = PRETRAIN_EPOCHS,
) -> list[MetricsReport]:
    """Pretrain once per seed, fine-tune per method, evaluate everything.

    Evaluation regenerates each task at n_eval samples; the stride split
    guarantees no eval point was a training point even when n_eval exceeds
    n_per_task.  Reports come back ordered by (method, seed) following the
    argument order, and the whole sweep is deterministic in its arguments.
    """
    if target.task_id in {s.task_id for s in suite}:
        raise ConfigError("target task must not be part of the source suite")
    for method in methods:
        if method not in METHOD_CHOICES:
            raise ConfigError(f"unknown method {method!r}")

    target_data = generate_task(target, n_per_task)
    by_cell: dict[tuple[str, int], MetricsReport] = {}
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed)
        base_model, _ = pretrain(
            suite, replace(seed_cfg, epochs=pretrain_epochs), n_per_task
        )
        for method in methods:
            model, log = _finetune_cell(
                base_model, target_data.train_inputs, target_data.train_labels, seed_cfg, method
            )
            source_accs = {s.task_id: evaluate(model, s, n_eval) for s in suite}
            target_acc = evaluate(model, target, n_eval)
            by_cell[(method, seed)] = build_report(method, seed, source_accs, target_acc, log)

    return [by_cell[(m, s)] for m in methods for s in seeds]


def measure_pid_direction(
    suite: Sequence[TaskSpec],
    target: TaskSpec,
    cfg: TrainConfig,
    seed: int,
    n_per_task: int = DEFAULT_SAMPLES,
    pretrain_epochs: int = PRETRAIN_EPOCHS,
) -> tuple[float, float]:
    """Final importance-divergence of a target run vs a source-replay run.

    Both runs start from the same pretrained model and use plain full
    fine-tuning with the same seed.  The replay run draws fresh samples
    from every source task and interleaves them (the pretraining
    distribution), truncated to the target run's length so step counts
    match exactly.
    """
    if cfg.epochs < 1:
        raise ConfigError("importance-divergence comparison needs at least one epoch")
    seed_cfg = replace(cfg, seed=seed, method="full_ft")
    base_model, _ = pretrain(suite, replace(seed_cfg, epochs=pretrain_epochs), n_per_task)

    target_data = generate_task(target, n_per_task)
    fresh = [
        generate_task(replace(s, sample_seed=s.sample_seed + 7919), n_per_task)
        for s in suite
    ]
    replay_inputs, replay_labels = _interleaved_train_set(fresh)
    keep = target_data.train_inputs.shape[0]

    pids = []
    for inputs, labels in (
        (target_data.train_inputs, target_data.train_labels),
        (replay_inputs[:keep], replay_labels[:keep]),
    ):
        _, log = _finetune_cell(base_model, inputs, labels, seed_cfg, "full_ft")
        pids.append(log.pid[-1])
    return pids[0], pids[1]


# ---------------------------------------------------------------------------
# CSV reporting
# ---------------------------------------------------------------------------

CSV_HEADER = ("method", "seed", "task", "metric", "value")


def metrics_csv_rows(reports: Sequence[MetricsReport]) -> list[tuple[str, ...]]:
    """Flatten reports to (method, seed, task, metric, value) rows."""
    rows = [CSV_HEADER]
    for r in reports:
        for task_id, acc in r.per_source_accuracy.items():
            rows.append((r.method, str(r.seed), task_id, "accuracy", repr(acc)))
        rows.append((r.method, str(r.seed), "target", "accuracy", repr(r.target_accuracy)))
        rows.append((r.method, str(r.seed), "", "source_avg", repr(r.source_avg)))
        rows.append((r.method, str(r.seed), "", "h_average", repr(r.h_avg)))
        rows.append((r.method, str(r.seed), "", "o_average", repr(r.o_avg)))
    return rows


def metrics_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(metrics_csv_rows(reports))
    return buf.getvalue()
