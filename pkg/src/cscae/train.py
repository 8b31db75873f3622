"""Training loop, detection/classification evaluation and fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledImage, augment, to_batch
from .model import CaeClassifier, CaeModel, reconstruction_loss
from .optim import SgdMomentumState, sgd_step
from .sparsity import extract_detections
from .tensor import NonFiniteError, Tensor, make_node, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.03
    momentum: float = 0.9
    epochs: int = 6
    lr_drop_factor: float = 10.0
    plateau_patience: int = 3
    plateau_threshold: float = 0.01
    seed: int = 0
    augment: bool = False
    warmup_epochs: int = 2

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    t: float
    sparsity: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h.loss for h in self.history]


class PlateauSchedule:
    """Divide the learning rate when epoch loss stops improving by ``threshold``."""

    def __init__(self, factor: float, patience: int, threshold: float, best: float = math.inf, stale: int = 0):
        self.factor, self.patience, self.threshold = factor, patience, threshold
        self.best, self.stale = best, stale

    def step(self, loss: float, lr: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best, self.stale = loss, 0
            return lr
        self.best = min(self.best, loss)
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return lr / self.factor
        return lr


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single example
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def _write_metrics_header(path: Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(["epoch", "loss", "lr", "t", "sparsity"])


def _append_metrics(path: Path, rec: EpochRecord) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([rec.epoch, f"{rec.loss:.6f}", f"{rec.lr:.6g}", f"{rec.t:.6f}", f"{rec.sparsity:.6f}"])


def _trainer_extras(state: SgdMomentumState, epoch: int, sched: PlateauSchedule, history: list[EpochRecord]) -> dict:
    extras = {f"optim.velocity.{k}": v for k, v in state.velocity.items()}
    extras["optim.lr"] = np.array([state.learning_rate])
    extras["train.epoch"] = np.array([epoch])
    extras["train.plateau"] = np.array([sched.best if math.isfinite(sched.best) else -1.0, sched.stale])
    if history:
        extras["train.history"] = np.array([[h.epoch, h.loss, h.lr, h.t, h.sparsity] for h in history])
    return extras


def train(
    model: CaeModel,
    dataset: Sequence[LabeledImage],
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimise reconstruction RMSE with SGD + momentum over shuffled batches.

    With ``out_dir`` a checkpoint ``epoch_NNN.ckpt`` is written after every
    epoch (and ``epoch_000.ckpt`` before the first) alongside ``metrics.csv``.
    A non-finite loss raises :class:`TrainingDiverged`; checkpoints already
    on disk are left as they were.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    params = model.parameters()
    state = SgdMomentumState(config.learning_rate, config.momentum)
    sched = PlateauSchedule(config.lr_drop_factor, config.plateau_patience, config.plateau_threshold)
    result = TrainResult()
    start_epoch = 0
    if resume_from is not None:
        extras = load_checkpoint(resume_from, model)
        start_epoch = int(extras["train.epoch"][0])
        state.learning_rate = float(extras["optim.lr"][0])
        state.velocity = {k[len("optim.velocity."):]: v for k, v in extras.items() if k.startswith("optim.velocity.")}
        best, stale = extras["train.plateau"]
        sched.best, sched.stale = (math.inf if best < 0 else float(best)), int(stale)
        if "train.history" in extras:
            result.history = [EpochRecord(int(r[0]), *map(float, r[1:])) for r in extras["train.history"]]

    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.csv"
        if resume_from is None or not metrics.exists():
            _write_metrics_header(metrics)
            for rec in result.history:
                _append_metrics(metrics, rec)
        if resume_from is None:
            path = out / "epoch_000.ckpt"
            save_checkpoint(path, model, _trainer_extras(state, 0, sched, []))
            result.checkpoints.append(str(path))

    aug_rng = np.random.default_rng([config.seed, 1])
    size = model.config.input_size
    model.train()
    for epoch in range(start_epoch + 1, config.epochs + 1):
        # one stream per epoch keeps resumed runs on the uninterrupted schedule
        rng = np.random.default_rng([config.seed, epoch])
        losses, rates, weights = [], [], []
        for step, idx in enumerate(_batches(len(dataset), config.batch_size, rng)):
            items = [dataset[i] for i in idx]
            if config.augment:
                items = [augment(im, aug_rng, size) for im in items]
            images = Tensor(to_batch(items))
            try:
                outputs = model(images)
                loss = reconstruction_loss(outputs, images)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch} step {step}: loss is {value}")
            model.zero_grad()
            loss.backward()
            try:
                sgd_step(params, state)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {e}") from e
            losses.append(value)
            weights.append(len(idx))
            rates.append(float(outputs.binary_detection_map().mean()))
            if on_step is not None:
                on_step(step, value)
        epoch_loss = float(np.average(losses, weights=weights))
        rec = EpochRecord(epoch, epoch_loss, state.learning_rate, float(model.part5.t[0]), float(np.average(rates, weights=weights)))
        result.history.append(rec)
        log.info("epoch %d loss %.5f lr %.4g t %.4f sparsity %.4f", rec.epoch, rec.loss, rec.lr, rec.t, rec.sparsity)
        state.learning_rate = sched.step(epoch_loss, state.learning_rate)
        if out is not None:
            path = out / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(path, model, _trainer_extras(state, epoch, sched, result.history))
            result.checkpoints.append(str(path))
            _append_metrics(metrics, rec)
    return result


# -- detection evaluation ---------------------------------------------------


def _pairs_within(dets, gts, radius: float) -> np.ndarray:
    if not len(dets) or not len(gts):
        return np.zeros((len(dets), len(gts)))
    d = np.asarray(dets, dtype=np.float64)[:, None, :2] - np.asarray(gts, dtype=np.float64)[None, :, :2]
    return np.hypot(d[..., 0], d[..., 1])


def greedy_match(dets, gts, radius: float) -> list[tuple[int, int]]:
    """Nearest-first one-to-one matching within ``radius`` (inclusive)."""
    dist = _pairs_within(dets, gts, radius)
    cand = sorted((dist[i, j], i, j) for i in range(dist.shape[0]) for j in range(dist.shape[1]) if dist[i, j] <= radius)
    used_d, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_d and j not in used_g:
            used_d.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def optimal_match(dets, gts, radius: float) -> list[tuple[int, int]]:
    """Maximum-cardinality one-to-one matching within ``radius``.

    Among maximum matchings the one with the least total distance wins.
    """
    dist = _pairs_within(dets, gts, radius)
    if dist.size == 0:
        return []
    ok = dist <= radius
    if not ok.any():
        return []
    # a disallowed pair costs more than any full set of allowed ones
    big = float(dist[ok].sum()) + 1.0
    cost = np.where(ok, dist, big * (1 + min(dist.shape)))
    rows, cols = linear_sum_assignment(cost)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if ok[i, j]]


@dataclass
class EvalReport:
    rmse: float
    crosswise_sparsity: float
    detection_precision: float
    detection_recall: float
    precision_defined: bool = True
    num_detections: int = 0
    num_ground_truth: int = 0
    num_matched: int = 0
    loss_history: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def detection_counts(detections_per_image, centers_per_image, radius: float, matcher=optimal_match) -> tuple[int, int, int]:
    tp = n_det = n_gt = 0
    for dets, gts in zip(detections_per_image, centers_per_image):
        dets = [(d[0], d[1]) for d in dets]
        tp += len(matcher(dets, gts, radius))
        n_det += len(dets)
        n_gt += len(gts)
    return tp, n_det, n_gt


def precision_recall(tp: int, n_det: int, n_gt: int) -> tuple[float, float, bool]:
    defined = n_det > 0
    precision = tp / n_det if defined else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall, defined


def evaluate(model: CaeModel, dataset: Sequence[LabeledImage], batch_size: int = 64, history: Sequence[float] = ()) -> EvalReport:
    """Eval-mode RMSE, detection-map activation rate and detection precision/recall.

    The model's train/eval mode is restored afterwards.
    """
    was_training = model.training
    model.eval()
    stride = model.config.grid_stride
    rmses, rates, all_dets, all_gts = [], [], [], []
    try:
        with no_grad():
            for i in range(0, len(dataset), batch_size):
                items = dataset[i : i + batch_size]
                x = to_batch(items)
                outputs = model(Tensor(x))
                diff = outputs.reconstruction.data.astype(np.float64) - x
                rmses.extend(np.sqrt((diff**2).mean(axis=(1, 2, 3))).tolist())
                dmap = outputs.detection_map.data
                rates.extend((dmap >= 0.5).mean(axis=(1, 2, 3)).tolist())
                for k, im in enumerate(items):
                    all_dets.append(extract_detections(dmap[k], stride))
                    all_gts.append(im.centers)
    finally:
        model.train(was_training)
    tp, n_det, n_gt = detection_counts(all_dets, all_gts, stride)
    precision, recall, defined = precision_recall(tp, n_det, n_gt)
    return EvalReport(
        float(np.mean(rmses)),
        float(np.mean(rates)),
        precision,
        recall,
        defined,
        n_det,
        n_gt,
        tp,
        list(history),
    )


# -- classifier fine-tuning -------------------------------------------------


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of Bernoulli targets under ``sigmoid(logits)``."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = 1.0 / (1.0 + np.exp(-z))
    return make_node("bce", np.asarray(per.mean(), dtype=z.dtype), (logits,), lambda g: (g * (p - y) / n,))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc: needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def crop_grid(pixels: np.ndarray, crop: int, n: int = 5) -> np.ndarray:
    """``n x n`` evenly spaced crops of a (3, h, w) image, stacked."""
    h = pixels.shape[-1]
    offs = np.linspace(0, h - crop, n).round().astype(int)
    return np.stack([pixels[:, y : y + crop, x : x + crop] for y in offs for x in offs])


def predict(classifier: CaeClassifier, images: Sequence[LabeledImage], batch_size: int = 64, multi_crop: bool = False) -> np.ndarray:
    """Sigmoid scores; with ``multi_crop`` each score averages 25 crops."""
    was = classifier.training
    classifier.eval()
    size = classifier.config.input_size
    out = []
    try:
        with no_grad():
            if multi_crop:
                for im in images:
                    crops = crop_grid(im.pixels, size)
                    out.append(float(classifier(Tensor(crops)).data.mean()))
            else:
                for i in range(0, len(images), batch_size):
                    x = to_batch(images[i : i + batch_size])
                    out.extend(classifier(Tensor(x)).data[:, 0].tolist())
    finally:
        classifier.train(was)
    return np.asarray(out)


@dataclass
class FinetuneResult:
    auroc: float
    history: list[float]


def finetune_classifier(
    classifier: CaeClassifier,
    train_set: Sequence[LabeledImage],
    test_set: Sequence[LabeledImage],
    config: TrainConfig,
    multi_crop: bool = False,
) -> FinetuneResult:
    """Binary cross-entropy training: new layers only for ``warmup_epochs``, then everything."""
    labels = np.array([im.label for im in train_set], dtype=np.float32)
    if len(np.unique(labels)) < 2:
        raise ValueError("finetune_classifier: training labels contain a single class")
    test_labels = [im.label for im in test_set]
    if len(set(test_labels)) < 2:
        raise ValueError("finetune_classifier: test labels contain a single class")
    all_params = classifier.parameters()
    new_params = classifier.new_parameters()
    state = SgdMomentumState(config.learning_rate, config.momentum)
    sched = PlateauSchedule(config.lr_drop_factor, config.plateau_patience, config.plateau_threshold)
    aug_rng = np.random.default_rng([config.seed, 2])
    size = classifier.config.input_size
    history = []
    classifier.train()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, 100 + epoch])
        active = new_params if epoch <= config.warmup_epochs else all_params
        losses = []
        for idx in _batches(len(train_set), config.batch_size, rng):
            items = [train_set[i] for i in idx]
            if config.augment:
                items = [augment(im, aug_rng, size) for im in items]
            x = Tensor(to_batch(items))
            loss = bce_with_logits(classifier.logits(x), labels[idx])
            classifier.zero_grad()
            loss.backward()
            sgd_step(active, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        state.learning_rate = sched.step(history[-1], state.learning_rate)
    scores = predict(classifier, test_set, multi_crop=multi_crop)
    return FinetuneResult(auroc(scores, test_labels), history)


def split_dataset(images: Sequence[LabeledImage], held_out: float, seed: int) -> tuple[list, list]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_test = int(round(held_out * len(images)))
    test = [images[i] for i in sorted(order[:n_test])]
    train_ = [images[i] for i in sorted(order[n_test:])]
    return train_, test

