"""Crosswise sparsity: detection-map thresholding, gating and sparsity metrics.

The detection map is ``D = sigmoid(r * (D' - t))`` where ``t`` tracks the
upper ``p``-percent tail of ``D'`` by a running average.  Foreground
features are gated as ``X = X' * D`` with ``D`` broadcast over channels, so
a location is either active in every foreground map or in none.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

from .layers import Module
from .tensor import ShapeError, Tensor, mul, relu, sigmoid, sub

NONZERO_TOL = 1e-6


@dataclass(frozen=True)
class SparsityGateConfig:
    r: float = 20.0
    p: float = 1.6
    alpha: float = 0.1
    percentile_convention: str = "upper"

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"slope r must be positive, got {self.r}")
        if not 0 < self.p < 100:
            raise ValueError(f"sparsity rate p must be in (0, 100), got {self.p}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.percentile_convention != "upper":
            raise ValueError("only the 'upper' percentile convention is supported")


def _rank(n: int, p: float) -> int:
    # exact decimal arithmetic: ceil((1 - p/100) * n) without float drift
    k = math.ceil((100 - Fraction(str(p))) * n / 100)
    return min(max(k, 1), n)


def upper_percentile(values, p: float) -> float:
    """Nearest-rank threshold exceeded by at most ``p`` percent of ``values``.

    Sorts ascending and returns the element at 1-based rank
    ``ceil((1 - p/100) * N)``.
    """
    flat = np.asarray(values).reshape(-1)
    if flat.size == 0:
        raise ValueError("upper_percentile: empty input")
    if not 0 < p < 100:
        raise ValueError(f"upper_percentile: p must be in (0, 100), got {p}")
    k = _rank(flat.size, p) - 1
    return float(np.partition(flat, k)[k])


@dataclass
class RunningThreshold:
    t: float = 0.0
    initialized: bool = False

    def update(self, batch_percentile: float, alpha: float) -> "RunningThreshold":
        return update_running_threshold(self, batch_percentile, alpha)


def update_running_threshold(state: RunningThreshold, batch_percentile: float, alpha: float) -> RunningThreshold:
    """``t <- (1 - alpha) t + alpha * percentile``; the first value seeds ``t``."""
    if not math.isfinite(batch_percentile):
        raise FloatingPointError(f"non-finite batch percentile {batch_percentile}")
    if not state.initialized:
        return RunningThreshold(float(batch_percentile), True)
    return RunningThreshold((1.0 - alpha) * state.t + alpha * float(batch_percentile), True)


def soft_binarize(d_prime: Tensor, t: float, r: float) -> Tensor:
    """``sigmoid(r * (D' - t))``; ``t`` is a constant, no gradient reaches it."""
    return sigmoid(mul(sub(d_prime, float(t), name="threshold"), float(r), name="slope"), name="detection_map")


def gate_foreground(x_prime: Tensor, d: Tensor) -> Tensor:
    """Multiply every foreground channel by the one-channel detection map."""
    if x_prime.ndim != 4 or d.ndim != 4 or d.shape[1] != 1:
        raise ShapeError(f"gate_foreground: expected (b,f,s,s) and (b,1,s,s), got {x_prime.shape} and {d.shape}")
    if x_prime.shape[0] != d.shape[0] or x_prime.shape[2:] != d.shape[2:]:
        raise ShapeError(f"gate_foreground: spatial mismatch {x_prime.shape} vs {d.shape}")
    return mul(x_prime, d, name="gate")


def _nonzero(maps) -> np.ndarray:
    return np.abs(np.asarray(maps)) > NONZERO_TOL


def conventional_sparsity_rate(maps) -> float:
    """Fraction of nonzero entries over all ``f`` maps of size ``s x s``."""
    nz = _nonzero(maps)
    return float(nz.mean()) if nz.size else 0.0


def crosswise_sparsity_rate(maps) -> float:
    """Fraction of spatial locations where at least one map is nonzero.

    ``maps`` is (f, s, s); a leading batch axis is averaged over.
    """
    nz = _nonzero(maps)
    if nz.ndim == 4:
        return float(nz.any(axis=1).mean())
    return float(nz.any(axis=0).mean())


class Detection(NamedTuple):
    x: int
    y: int
    score: float


def extract_detections(d, grid_stride: int, binarize_at: float = 0.5, offset: int | None = None) -> list[Detection]:
    """Pixel centres of detection-map cells with ``D >= binarize_at``.

    ``d`` is one image's map, (s, s) or (1, s, s), indexed [row, col].  Cell
    (row, col) maps to pixel ``x = col*stride + offset, y = row*stride + offset``
    with ``offset = stride // 2`` by default.
    """
    d = np.asarray(d.data if isinstance(d, Tensor) else d)
    if d.ndim == 3:
        d = d[0]
    if offset is None:
        offset = grid_stride // 2
    rows, cols = np.nonzero(d >= binarize_at)
    return [Detection(int(c * grid_stride + offset), int(r * grid_stride + offset), float(d[r, c])) for r, c in zip(rows, cols)]


def write_detections_csv(path, detections: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "score"])
        for det in detections:
            w.writerow([det.x, det.y, f"{det.score:.6f}"])


def read_detections_csv(path) -> list[Detection]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Detection(int(r["x"]), int(r["y"]), float(r["score"])) for r in rows]


class _RunningPercentileGate(Module):
    """Shared running-threshold state; ``t`` lives in float32 buffers."""

    def __init__(self, config: SparsityGateConfig):
        super().__init__()
        self.config = config
        self.register_buffer("t", np.zeros(1, dtype=np.float32))
        self.register_buffer("initialized", np.zeros(1, dtype=np.float32))
        self.last_threshold: float = 0.0

    @property
    def state(self) -> RunningThreshold:
        return RunningThreshold(float(self.t[0]), bool(self.initialized[0]))

    @state.setter
    def state(self, value: RunningThreshold) -> None:
        self.t[0] = np.float32(value.t)
        self.initialized[0] = 1.0 if value.initialized else 0.0

    def threshold_for(self, values: np.ndarray) -> float:
        """Batch statistic while training (updating ``t``); stored ``t`` otherwise."""
        if self.training:
            pct = upper_percentile(values, self.config.p)
            self.state = update_running_threshold(self.state, pct, self.config.alpha)
            self.last_threshold = pct
        else:
            self.last_threshold = float(self.t[0])
        return self.last_threshold


class DetectionThreshold(_RunningPercentileGate):
    """Soft-binarise the detection map ``D'`` at a running upper percentile."""

    def forward(self, d_prime: Tensor) -> Tensor:
        t = self.threshold_for(d_prime.data)
        return soft_binarize(d_prime, t, self.config.r)


class ConventionalThreshold(_RunningPercentileGate):
    """Element-wise ``ReLU(X' - t)`` sparsification without crosswise coupling.

    ``t`` is the running upper ``p``-percentile of all foreground entries, so
    each channel switches on independently.
    """

    def forward(self, x_prime: Tensor) -> Tensor:
        t = self.threshold_for(x_prime.data)
        return relu(sub(x_prime, t, name="threshold"), name="conventional_gate")
