"""The crosswise-sparse convolutional autoencoder and its classifier variant.

Layer plan (full width, 100x100 RGB input)::

    Part 1  shared trunk        100^2x3 -> 25^2x1024
    Part 2  detection head      -> 25^2x1   (D')
    Part 3  foreground features -> 25^2x100 (X')
    Part 4  background encoder  -> 5^2x5
    Part 5  thresholding        D = sigmoid(r (D' - t))
    Part 6  gating              X = X' * D
    Part 7  foreground decoder  -> 100^2x3
    Part 8  background decoder  -> 100^2x3

The reconstruction is the pixel-wise sum of the two decoder outputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .layers import AvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, LeakyReLU, Linear, Module, global_avg_pool
from .sparsity import ConventionalThreshold, DetectionThreshold, SparsityGateConfig, gate_foreground
from .tensor import ShapeError, Tensor, concat, mean, sigmoid, sqrt, sub

BACKGROUND_POOL = 5


class LayerRow(NamedTuple):
    """One row of the layer plan: output is ``size^2 x channels``."""

    part: int
    layer: str
    kernel: str
    stride: str
    size: int
    channels: int

    def describe(self) -> str:
        return f"Part {self.part} | {self.layer:<7} | {self.kernel:<5} | {self.stride:<4} | {self.size}^2x{self.channels}"


def _r(part, layer, k, stride, size, ch):
    return LayerRow(part, layer, k, stride, size, ch)


TABLE1: tuple[LayerRow, ...] = (
    _r(1, "Input", "-", "-", 100, 3),
    _r(1, "Conv", "5x5", "1", 100, 100),
    _r(1, "Conv", "5x5", "1", 100, 120),
    _r(1, "Pool", "2x2", "2", 50, 120),
    _r(1, "Conv", "3x3", "1", 50, 240),
    _r(1, "Conv", "3x3", "1", 50, 320),
    _r(1, "Pool", "2x2", "2", 25, 320),
    _r(1, "Conv", "3x3", "1", 25, 640),
    _r(1, "Conv", "3x3", "1", 25, 1024),
    _r(2, "Conv", "1x1", "1", 25, 100),
    _r(2, "Conv", "1x1", "1", 25, 1),
    _r(3, "Conv", "1x1", "1", 25, 640),
    _r(3, "Conv", "1x1", "1", 25, 100),
    _r(4, "Conv", "1x1", "1", 25, 128),
    _r(4, "Pool", "5x5", "5", 5, 128),
    _r(4, "Conv", "3x3", "1", 5, 64),
    _r(4, "Conv", "1x1", "1", 5, 5),
    _r(5, "Thres.", "Eq.", "-", 25, 1),
    _r(6, "Filter.", "Eq.", "-", 25, 100),
    _r(7, "Deconv", "3x3", "1", 25, 1024),
    _r(7, "Deconv", "3x3", "1", 25, 640),
    _r(7, "Deconv", "4x4", "0.5", 50, 640),
    _r(7, "Deconv", "3x3", "1", 50, 320),
    _r(7, "Deconv", "3x3", "1", 50, 320),
    _r(7, "Deconv", "4x4", "0.5", 100, 320),
    _r(7, "Deconv", "5x5", "1", 100, 120),
    _r(7, "Deconv", "5x5", "1", 100, 100),
    _r(7, "Deconv", "1x1", "1", 100, 3),
    _r(8, "Deconv", "3x3", "1", 5, 256),
    _r(8, "Deconv", "3x3", "1", 5, 128),
    _r(8, "Deconv", "9x9", "0.2", 25, 128),
    _r(8, "Deconv", "3x3", "1", 25, 128),
    _r(8, "Deconv", "3x3", "1", 25, 128),
    _r(8, "Deconv", "4x4", "0.5", 50, 128),
    _r(8, "Deconv", "3x3", "1", 50, 64),
    _r(8, "Deconv", "3x3", "1", 50, 64),
    _r(8, "Deconv", "4x4", "0.5", 100, 64),
    _r(8, "Deconv", "5x5", "1", 100, 32),
    _r(8, "Deconv", "5x5", "1", 100, 32),
    _r(8, "Deconv", "1x1", "1", 100, 3),
)


@dataclass(frozen=True)
class CaeConfig:
    input_size: int = 100
    input_channels: int = 3
    width_scale: float = 1.0
    foreground_channels: int = 100
    background_channels: int = 5
    background_size: int = 5
    detection_grid: int = 25
    gate: SparsityGateConfig = field(default_factory=SparsityGateConfig)
    gate_mode: str = "crosswise"
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        problems = []
        if self.input_size <= 0 or self.input_size % 4:
            problems.append(f"input_size={self.input_size} must be a positive multiple of 4")
        elif self.detection_grid != self.input_size // 4:
            problems.append(f"detection_grid={self.detection_grid} must equal input_size/4={self.input_size // 4}")
        if self.detection_grid % BACKGROUND_POOL or self.background_size != self.detection_grid // BACKGROUND_POOL:
            problems.append(
                f"background_size={self.background_size} must equal detection_grid/{BACKGROUND_POOL} with no remainder"
            )
        if not self.width_scale > 0:
            problems.append(f"width_scale={self.width_scale} must be positive")
        if self.foreground_channels < 1 or self.background_channels < 1 or self.input_channels < 1:
            problems.append("channel counts must be >= 1")
        if self.gate_mode not in ("crosswise", "conventional"):
            problems.append(f"gate_mode={self.gate_mode!r} must be 'crosswise' or 'conventional'")
        if problems:
            raise ValueError("invalid CaeConfig: " + "; ".join(problems))

    @classmethod
    def desk(cls, **overrides) -> "CaeConfig":
        """1/8-width, 40x40-input variant for single-CPU training."""
        base = dict(input_size=40, width_scale=1 / 8, foreground_channels=13, background_size=2, detection_grid=10)
        base.update(overrides)
        return cls(**base)

    def ch(self, n: int) -> int:
        """Scaled channel count, rounded half-up, at least 1."""
        return max(1, int(math.floor(n * self.width_scale + 0.5)))

    @property
    def grid_stride(self) -> int:
        return self.input_size // self.detection_grid

    def with_gate(self, **kw) -> "CaeConfig":
        return replace(self, gate=replace(self.gate, **kw))


def expected_rows(config: CaeConfig) -> list[LayerRow]:
    """Layer plan rows rescaled to ``config`` (identical to TABLE1 at full config)."""
    s = config.input_size
    scale_size = {100: s, 50: s // 2, 25: s // 4, 5: config.background_size}
    rows = []
    for row in TABLE1:
        ch = row.channels
        if row.part == 1 and row.layer == "Input":
            ch = config.input_channels
        elif row.channels == 3 and row.layer == "Deconv":
            ch = config.input_channels
        elif row.channels == 1:
            ch = 1
        elif (row.part == 3 and row.channels == 100 and row.kernel == "1x1") or row.part == 6:
            ch = config.foreground_channels
        elif row.part == 4 and row.channels == 5:
            ch = config.background_channels
        else:
            ch = config.ch(row.channels)
        rows.append(row._replace(size=scale_size[row.size], channels=ch))
    return rows


class ConvBlock(Module):
    """(De)convolution optionally followed by batch norm and leaky ReLU."""

    def __init__(self, conv: Module, bn: BatchNorm2d | None, act: LeakyReLU | None):
        super().__init__()
        self.conv = conv
        if bn is not None:
            self.bn = bn
        else:
            object.__setattr__(self, "bn", None)
        object.__setattr__(self, "act", act)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.act is not None:
            x = self.act(x)
        return x


class Part(Module):
    """An ordered stack of blocks, each tied to one layer-plan row."""

    def __init__(self, number: int):
        super().__init__()
        self.number = number
        object.__setattr__(self, "blocks", [])

    def add(self, row: LayerRow, block: Module) -> None:
        setattr(self, str(len(self.blocks)), block)
        self.blocks.append((row, block))

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        for row, block in self.blocks:
            x = block(x)
            if trace is not None:
                trace.append((row, x.shape[1:]))
        return x


@dataclass
class CaeOutputs:
    reconstruction: Tensor
    foreground_recon: Tensor
    background_recon: Tensor
    detection_map: Tensor
    foreground_features: Tensor
    background_features: Tensor
    dense_features: Tensor
    d_prime: Tensor | None = None
    threshold: float = 0.0

    def binary_detection_map(self, at: float = 0.5) -> np.ndarray:
        return (np.asarray(self.detection_map.data) >= at).astype(np.float32)


GATE_OVERRIDES = (None, "ones", "zeros", "none")


class CaeModel(Module):
    def __init__(self, config: CaeConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self._rows = iter(expected_rows(config))
        self.part1 = self._trunk(rng)
        if config.gate_mode == "crosswise":
            self.part2 = self._detection_head(rng)
            self.part3 = self._foreground_encoder(rng)
        else:
            next(self._rows), next(self._rows)
            self.part3 = self._foreground_encoder(rng)
        self.part4 = self._background_encoder(rng)
        self.row5, self.row6 = next(self._rows), next(self._rows)
        if config.gate_mode == "crosswise":
            self.part5 = DetectionThreshold(config.gate)
        else:
            self.part5 = ConventionalThreshold(config.gate)
        self.part7 = self._decoder(7, config.foreground_channels, rng)
        self.part8 = self._decoder(8, config.background_channels, rng)
        del self._rows

    # -- construction ----------------------------------------------------
    def _block(self, kind: str, in_ch: int, row: LayerRow, rng, linear: bool = False, bn_only: bool = False, name: str = ""):
        c = self.config
        k = int(row.kernel.split("x")[0])
        if kind == "conv":
            conv = Conv2d(in_ch, row.channels, k, 1, rng, name=name)
        else:
            up = int(round(1 / float(row.stride)))
            conv = ConvTranspose2d(in_ch, row.channels, k, up, rng, name=name)
        if linear:
            return ConvBlock(conv, None, None)
        bn = BatchNorm2d(row.channels, c.bn_momentum, c.bn_eps, name=name + ".bn")
        return ConvBlock(conv, bn, None if bn_only else LeakyReLU(c.leaky_slope))

    def _stack(self, number: int, n_rows: int, in_ch: int, rng, kind: str, last: dict | None = None) -> Part:
        part = Part(number)
        for i in range(n_rows):
            row = next(self._rows)
            name = f"part{number}.{i}"
            if row.layer == "Pool":
                part.add(row, AvgPool2d(int(row.stride), name=name))
                continue
            if row.layer == "Input":
                continue
            opts = last if (last and i == n_rows - 1) else {}
            part.add(row, self._block(kind, in_ch, row, rng, name=name, **opts))
            in_ch = row.channels
        return part

    def _trunk(self, rng) -> Part:
        part = Part(1)
        self.input_row = next(self._rows)
        in_ch = self.config.input_channels
        for i in range(8):
            row = next(self._rows)
            name = f"part1.{i}"
            if row.layer == "Pool":
                part.add(row, AvgPool2d(int(row.stride), name=name))
            else:
                part.add(row, self._block("conv", in_ch, row, rng, name=name))
                in_ch = row.channels
        self.trunk_channels = in_ch
        return part

    def _detection_head(self, rng) -> Part:
        # final 1x1 conv feeds batch norm and then thresholding: no activation
        return self._stack(2, 2, self.trunk_channels, rng, "conv", last={"bn_only": True})

    def _foreground_encoder(self, rng) -> Part:
        return self._stack(3, 2, self.trunk_channels, rng, "conv")

    def _background_encoder(self, rng) -> Part:
        return self._stack(4, 4, self.trunk_channels, rng, "conv")

    def _decoder(self, number: int, in_ch: int, rng) -> Part:
        n = sum(1 for r in TABLE1 if r.part == number)
        return self._stack(number, n, in_ch, rng, "deconv", last={"linear": True})

    # -- forward ---------------------------------------------------------
    def encode(self, images: Tensor, gate: str | None = None, trace: list | None = None):
        """Parts 1-6: returns (D, X, X', background features, D')."""
        c = self.config
        if not isinstance(images, Tensor):
            images = Tensor(images)
        if images.ndim != 4 or images.shape[1:] != (c.input_channels, c.input_size, c.input_size):
            raise ShapeError(
                f"cae_forward: expected images (b, {c.input_channels}, {c.input_size}, {c.input_size}), got {images.shape}"
            )
        if gate not in GATE_OVERRIDES:
            raise ValueError(f"gate override must be one of {GATE_OVERRIDES}, got {gate!r}")
        if trace is not None:
            trace.append((self.input_row, images.shape[1:]))
        h = self.part1(images, trace)
        d_prime = None
        if c.gate_mode == "crosswise":
            d_prime = self.part2(h, trace)
        x_prime = self.part3(h, trace)
        bg = self.part4(h, trace)

        if c.gate_mode == "crosswise":
            d = self.part5(d_prime)
            if gate == "ones":
                d = Tensor(np.ones(d.shape, dtype=d.dtype))
            elif gate == "zeros":
                d = Tensor(np.zeros(d.shape, dtype=d.dtype))
            if trace is not None:
                trace.append((self.row5, d.shape[1:]))
            x = x_prime if gate == "none" else gate_foreground(x_prime, d)
        else:
            x = x_prime if gate == "none" else self.part5(x_prime)
            if gate == "ones":
                x = x_prime
            elif gate == "zeros":
                x = Tensor(np.zeros(x_prime.shape, dtype=x_prime.dtype))
            active = (np.abs(x.data) > 1e-6).any(axis=1, keepdims=True)
            d = Tensor(active.astype(x.dtype))
            if trace is not None:
                trace.append((self.row5, d.shape[1:]))
        if trace is not None:
            trace.append((self.row6, x.shape[1:]))
        return d, x, x_prime, bg, d_prime

    def forward(self, images: Tensor, gate: str | None = None, background_override: np.ndarray | None = None, trace: list | None = None) -> CaeOutputs:
        d, x, x_prime, bg, d_prime = self.encode(images, gate, trace)
        if background_override is not None:
            bg = Tensor(np.broadcast_to(np.asarray(background_override, dtype=bg.dtype), bg.shape).copy())
        fg_rec = self.part7(x, trace)
        bg_rec = self.part8(bg, trace)
        rec = fg_rec + bg_rec
        return CaeOutputs(rec, fg_rec, bg_rec, d, x, bg, x_prime, d_prime, self.part5.last_threshold)

    def shape_trace(self, images: Tensor) -> list[tuple[LayerRow, tuple[int, ...]]]:
        trace: list = []
        self.forward(images, trace=trace)
        return trace

    def threshold_state(self):
        return self.part5.state


def build_cae(config: CaeConfig, seed: int = 0) -> CaeModel:
    return CaeModel(config, seed)


def cae_forward(model: CaeModel, images: Tensor, **kwargs) -> CaeOutputs:
    return model(images, **kwargs)


def reconstruction_loss(outputs: CaeOutputs | Tensor, images: Tensor) -> Tensor:
    """Pixel-wise RMSE over batch, channels and pixels."""
    rec = outputs.reconstruction if isinstance(outputs, CaeOutputs) else outputs
    if rec.shape != images.shape:
        raise ShapeError(f"reconstruction_loss: {rec.shape} vs {images.shape}")
    diff = sub(rec, images)
    return sqrt(mean(diff * diff))


# -- classifier -------------------------------------------------------------


class CaeClassifier(Module):
    """Parts 1-6 of a trained CAE plus two pooled heads and a sigmoid output."""

    def __init__(self, cae: CaeModel, num_outputs: int = 1, seed: int = 0):
        super().__init__()
        c = cae.config
        self.config = c
        rng = np.random.default_rng(seed)
        self.part1 = copy.deepcopy(cae.part1)
        if c.gate_mode == "crosswise":
            self.part2 = copy.deepcopy(cae.part2)
        self.part3 = copy.deepcopy(cae.part3)
        self.part4 = copy.deepcopy(cae.part4)
        self.part5 = copy.deepcopy(cae.part5)
        width = c.ch(320)
        fg, in_ch = [], c.foreground_channels
        for i in range(4):
            fg.append(self._head_block(in_ch, width, 1, rng, f"fg_head.{i}"))
            in_ch = width
        bg, in_ch = [], c.background_channels
        for i in range(2):
            bg.append(self._head_block(in_ch, width, 3, rng, f"bg_head.{i}"))
            in_ch = width
        self.fg_head = _Chain(fg)
        self.bg_head = _Chain(bg)
        self.feature_width = 2 * width
        self.output = Linear(self.feature_width, num_outputs, rng, name="output")
        self.copied_prefixes = ("part1.", "part2.", "part3.", "part4.", "part5.")

    def _head_block(self, in_ch, out_ch, k, rng, name):
        c = self.config
        return ConvBlock(Conv2d(in_ch, out_ch, k, 1, rng, name=name), BatchNorm2d(out_ch, c.bn_momentum, c.bn_eps, name=name + ".bn"), LeakyReLU(c.leaky_slope))

    def features(self, images: Tensor) -> Tensor:
        c = self.config
        h = self.part1(images)
        x_prime = self.part3(h)
        if c.gate_mode == "crosswise":
            x = gate_foreground(x_prime, self.part5(self.part2(h)))
        else:
            x = self.part5(x_prime)
        bg = self.part4(h)
        f = global_avg_pool(self.fg_head(x))
        b = global_avg_pool(self.bg_head(bg))
        return concat([f, b], axis=1)

    def logits(self, images: Tensor) -> Tensor:
        return self.output(self.features(images))

    def forward(self, images: Tensor) -> Tensor:
        return sigmoid(self.logits(images))

    def new_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if not k.startswith(self.copied_prefixes)}


class _Chain(Module):
    def __init__(self, blocks):
        super().__init__()
        object.__setattr__(self, "blocks", list(blocks))
        for i, b in enumerate(blocks):
            setattr(self, str(i), b)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def build_classifier_from_cae(model: CaeModel, num_outputs: int = 1, seed: int = 0) -> CaeClassifier:
    return CaeClassifier(model, num_outputs, seed)
