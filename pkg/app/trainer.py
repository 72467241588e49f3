# app/trainer.py
"""
Module: trainer.py

Seeded optimization loop for joint source/target training.

One training step draws one rotation per target image, runs the shared
encoder once over ``[source | target originals | target rotations]``, forms
the four losses on their slices, and applies one SGD-with-momentum update to
all parameters. One epoch is one pass over the source set; the target loader
cycles independently. Every ``eval_every`` epochs (and after the last one) the
net is evaluated on the labeled target split, which never reaches a loss.

Each run owns its network, its random generators and its autodiff graphs.
``run_tasks`` fans independent runs out to worker processes and returns the
results in submission order, so outputs do not depend on ``jobs``.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app import autodiff as ad
from app.datagen import DomainDataset, Example, augment_images, rotate_images, stack_images, stack_labels
from app.errors import LabelLeakageError, ShapeError
from app.losses import (
    LossBreakdown,
    LossParts,
    LossWeights,
    consistency_loss,
    entropy_loss,
    main_loss,
    pretext_loss,
    total_loss,
)
from app.network import ArchSpec, MultiHeadNet, encode, init, main_logits, pretext_logits

logger = logging.getLogger(__name__)

EVAL_CHUNK = 500
EVAL_ROTATION_SEED = 12345
METRIC_FIELDS = (
    "loss_main",
    "loss_pretext",
    "loss_consistency",
    "loss_entropy",
    "loss_total",
    "target_accuracy",
    "pretext_accuracy",
    "wall_time_s",
)


class TrainConfig(BaseModel):
    epochs: int = Field(30, ge=1, description="Fixed epoch budget")
    batch_size_source: int = Field(64, ge=1)
    batch_size_target: int = Field(64, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weights: LossWeights = Field(default_factory=LossWeights)
    seed: int = Field(0, ge=0, lt=2**64)
    eval_every: int = Field(1, ge=1, description="Evaluate every N epochs")
    strict: bool = Field(True, description="Fail on non-finite values")
    record_wall_time: bool = Field(True, description="Write real wall times; False writes 0.0")


class MetricsRecord(BaseModel):
    run_id: str = ""
    epoch: int = Field(..., ge=1)
    seed: int
    loss_main: float
    loss_pretext: float
    loss_consistency: float
    loss_entropy: float
    loss_total: float
    target_accuracy: float = Field(..., ge=0.0, le=1.0)
    pretext_accuracy: float = Field(..., ge=0.0, le=1.0)
    wall_time_s: float = Field(..., ge=0.0)


@dataclass(frozen=True)
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class UnlabeledBatch:
    """Target images only; there is no label field to leak."""

    images: np.ndarray


class Evaluation(NamedTuple):
    target_accuracy: float
    pretext_accuracy: float


OptimizerState = Dict[str, np.ndarray]


def sgd_update(
    params: Dict[str, ad.Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: OptimizerState,
    lr: float,
    momentum: float,
) -> OptimizerState:
    """
    SGD with heavy-ball momentum: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    A missing gradient counts as zero. Velocities live in ``state`` keyed by
    parameter name and are created on first use.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.data.shape:
            logger.error(f"sgd_update shape mismatch for {name}: {grad.shape} vs {param.data.shape}")
            raise ShapeError(f"sgd_update {name}", grad.shape, param.data.shape)
        velocity = state.get(name)
        velocity = grad.copy() if velocity is None else momentum * velocity + grad
        state[name] = velocity
        param.data = param.data - lr * velocity
    return state


def compute_losses(
    net: MultiHeadNet,
    source: LabeledBatch,
    target_images: np.ndarray,
    rotated: np.ndarray,
    rot_labels: np.ndarray,
    weights: LossWeights,
) -> LossBreakdown:
    """Forward pass of all four losses with one shared encoder pass."""
    n_s = source.images.shape[0]
    n_t = target_images.shape[0]
    features = encode(net, np.concatenate([source.images, target_images, rotated]))
    logits = main_logits(net, features)
    src_logits = ad.slice_rows(logits, 0, n_s)
    tgt_logits = ad.slice_rows(logits, n_s, n_s + n_t)
    rot_logits = ad.slice_rows(logits, n_s + n_t, n_s + 2 * n_t)
    rot_features = ad.slice_rows(features, n_s + n_t, n_s + 2 * n_t)
    parts = LossParts(
        l_main=main_loss(src_logits, source.labels),
        l_pretext=pretext_loss(pretext_logits(net, rot_features), rot_labels),
        l_consistency=consistency_loss(tgt_logits, rot_logits),
        l_entropy=entropy_loss(tgt_logits),
    )
    return total_loss(parts, weights)


def train_step(
    net: MultiHeadNet,
    source_batch: LabeledBatch,
    target_batch: UnlabeledBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    state: Optional[OptimizerState] = None,
) -> LossBreakdown:
    """
    One joint update on a labeled source batch and an unlabeled target batch.

    Returns the loss breakdown measured before the update. ``rng`` is consumed
    only by the rotation draw, one label per target image.
    """
    if not isinstance(target_batch, UnlabeledBatch) or hasattr(target_batch, "labels"):
        logger.error("Target batch carries labels")
        raise LabelLeakageError("target batches must be UnlabeledBatch instances")
    state = {} if state is None else state
    rotated, rot_labels = augment_images(target_batch.images, rng)
    net.zero_grads()
    breakdown = compute_losses(net, source_batch, target_batch.images, rotated, rot_labels, config.weights)
    ad.backward(breakdown.l_total)
    grads = {name: p.grad for name, p in net.params.items()}
    sgd_update(net.params, grads, state, config.learning_rate, config.momentum)
    return breakdown


def _predict(net: MultiHeadNet, images: np.ndarray, rotated: np.ndarray):
    main_pred = np.empty(images.shape[0], dtype=np.int64)
    rot_pred = np.empty(images.shape[0], dtype=np.int64)
    with ad.no_grad():
        for start in range(0, images.shape[0], EVAL_CHUNK):
            stop = start + EVAL_CHUNK
            main_pred[start:stop] = main_logits(net, encode(net, images[start:stop])).data.argmax(axis=1)
            rot_pred[start:stop] = pretext_logits(net, encode(net, rotated[start:stop])).data.argmax(axis=1)
    return main_pred, rot_pred


def evaluate_arrays(net: MultiHeadNet, images: np.ndarray, labels: np.ndarray) -> Evaluation:
    if images.shape[0] == 0:
        logger.error("evaluate() called with an empty set")
        raise ValueError("evaluation set is empty")
    rot_labels = np.random.default_rng(EVAL_ROTATION_SEED).integers(0, 4, size=images.shape[0])
    main_pred, rot_pred = _predict(net, images, rotate_images(images, rot_labels))
    return Evaluation(float(np.mean(main_pred == labels)), float(np.mean(rot_pred == rot_labels)))


def evaluate(net: MultiHeadNet, labeled_set: Sequence[Example]) -> Evaluation:
    """
    Main-head accuracy and rotation-head accuracy on a labeled set.

    Rotated copies come from a fixed generator, so evaluating twice gives the
    same numbers; no parameter is touched.
    """
    if not labeled_set:
        logger.error("evaluate() called with an empty set")
        raise ValueError("evaluation set is empty")
    return evaluate_arrays(net, stack_images(labeled_set), stack_labels(labeled_set))


def per_class_accuracy(net: MultiHeadNet, images: np.ndarray, labels: np.ndarray, n_classes: int) -> List[float]:
    with ad.no_grad():
        preds = np.concatenate(
            [main_logits(net, encode(net, images[s:s + EVAL_CHUNK])).data.argmax(axis=1) for s in range(0, len(images), EVAL_CHUNK)]
        )
    return [float(np.mean(preds[labels == k] == k)) if np.any(labels == k) else 0.0 for k in range(n_classes)]


class TargetCycler:
    """Endless, independently shuffled stream of fixed-size target batches."""

    def __init__(self, images: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.images = images
        self.batch_size = min(batch_size, images.shape[0])
        self.rng = rng
        self._order = rng.permutation(images.shape[0])
        self._pos = 0

    def next_batch(self) -> UnlabeledBatch:
        picked: List[np.ndarray] = []
        needed = self.batch_size
        while needed:
            if self._pos == self._order.size:
                self._order = self.rng.permutation(self.images.shape[0])
                self._pos = 0
            take = self._order[self._pos:self._pos + needed]
            picked.append(take)
            self._pos += take.size
            needed -= take.size
        return UnlabeledBatch(self.images[np.concatenate(picked)])


def source_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[LabeledBatch]:
    order = rng.permutation(images.shape[0])
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        yield LabeledBatch(images[idx], labels[idx])


@dataclass
class RunResult:
    run_id: str
    seed: int
    records: List[MetricsRecord]
    state: Dict[str, np.ndarray]
    per_class: List[float]

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def train_run(
    config: TrainConfig,
    dataset: DomainDataset,
    run_id: str = "run",
    arch: Optional[ArchSpec] = None,
) -> RunResult:
    """Train one network from scratch for ``config.epochs`` epochs."""
    arch = arch or ArchSpec(image_size=dataset.image_size, n_classes=dataset.n_classes)
    logger.info(f"[{run_id}] seed={config.seed} weights={config.weights.model_dump()} epochs={config.epochs}")
    with ad.strict_mode(config.strict):
        net = init(config.seed, arch)
        order_rng = np.random.default_rng([config.seed, 1])
        augment_rng = np.random.default_rng([config.seed, 2])
        target = TargetCycler(dataset.target_images, config.batch_size_target, np.random.default_rng([config.seed, 3]))
        src_images, src_labels = dataset.source_images, dataset.source_labels
        eval_images, eval_labels = stack_images(dataset.target_eval), dataset.target_eval_labels
        state: OptimizerState = {}
        records: List[MetricsRecord] = []
        started = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            totals = dict.fromkeys(METRIC_FIELDS[:5], 0.0)
            steps = 0
            for batch in source_batches(src_images, src_labels, config.batch_size_source, order_rng):
                breakdown = train_step(net, batch, target.next_batch(), config, augment_rng, state)
                for key, value in breakdown.values().items():
                    totals[key] += value
                steps += 1
            if epoch % config.eval_every and epoch != config.epochs:
                continue
            evaluation = evaluate_arrays(net, eval_images, eval_labels)
            wall = time.perf_counter() - started if config.record_wall_time else 0.0
            record = MetricsRecord(
                run_id=run_id,
                epoch=epoch,
                seed=config.seed,
                **{key: value / steps for key, value in totals.items()},
                target_accuracy=evaluation.target_accuracy,
                pretext_accuracy=evaluation.pretext_accuracy,
                wall_time_s=wall,
            )
            records.append(record)
            logger.info(
                f"[{run_id}] seed={config.seed} epoch={epoch} loss={record.loss_total:.4f} "
                f"target_acc={record.target_accuracy:.4f} pretext_acc={record.pretext_accuracy:.4f}"
            )
        per_class = per_class_accuracy(net, eval_images, eval_labels, dataset.n_classes)
    logger.debug(f"[{run_id}] seed={config.seed} per-class target accuracy {per_class}")
    return RunResult(run_id, config.seed, records, net.state_dict(), per_class)


# ----------------------------------------------------------------------
# multi-seed repetition and process-pool fan-out
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class RunTask:
    run_id: str
    config: TrainConfig
    arch: Optional[ArchSpec] = None


_WORKER_DATASET: Optional[DomainDataset] = None


def _init_worker(dataset: DomainDataset) -> None:
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_task(task: RunTask) -> RunResult:
    return train_run(task.config, _WORKER_DATASET, task.run_id, task.arch)


def run_tasks(tasks: Sequence[RunTask], dataset: DomainDataset, jobs: int = 1) -> List[RunResult]:
    """Run independent trainings, in parallel when ``jobs > 1``; results keep task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [train_run(t.config, dataset, t.run_id, t.arch) for t in tasks]
    workers = min(jobs, len(tasks))
    logger.info(f"Running {len(tasks)} trainings on {workers} worker processes")
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(dataset,)) as pool:
        return list(pool.map(_run_task, tasks))


class MetricSummary(BaseModel):
    mean: float
    std: float


class ExperimentSummary(BaseModel):
    run_id: str
    seeds: List[int]
    records: List[MetricsRecord]
    final_accuracies: List[float]
    metrics: Dict[str, MetricSummary]

    @property
    def mean_accuracy(self) -> float:
        return self.metrics["target_accuracy"].mean

    @property
    def std_accuracy(self) -> float:
        return self.metrics["target_accuracy"].std


def summarize(run_id: str, results: Sequence[RunResult]) -> ExperimentSummary:
    """Mean and population std (ddof=0) of every metric over the final records of each seed."""
    finals = [r.final for r in results]
    metrics = {}
    for key in METRIC_FIELDS:
        values = np.array([getattr(rec, key) for rec in finals])
        metrics[key] = MetricSummary(mean=float(np.mean(values)), std=float(np.std(values)))
    return ExperimentSummary(
        run_id=run_id,
        seeds=[r.seed for r in results],
        records=[rec for r in results for rec in r.records],
        final_accuracies=[rec.target_accuracy for rec in finals],
        metrics=metrics,
    )


def seed_tasks(run_id: str, config: TrainConfig, n_seeds: int, arch: Optional[ArchSpec] = None) -> List[RunTask]:
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    return [RunTask(run_id, config.model_copy(update={"seed": config.seed + i}), arch) for i in range(n_seeds)]


def run_experiment(
    config: TrainConfig,
    dataset: DomainDataset,
    n_seeds: int = 3,
    jobs: int = 1,
    run_id: str = "run",
    arch: Optional[ArchSpec] = None,
) -> ExperimentSummary:
    """
    Repeat training with seeds ``config.seed + 0 .. n_seeds - 1`` and summarize.

    The default of three seeds follows the usual three-repetition protocol.
    """
    results = run_tasks(seed_tasks(run_id, config, n_seeds, arch), dataset, jobs)
    summary = summarize(run_id, results)
    logger.info(f"[{run_id}] target accuracy {summary.mean_accuracy:.4f} ± {summary.std_accuracy:.4f} over {n_seeds} seeds")
    return summary
