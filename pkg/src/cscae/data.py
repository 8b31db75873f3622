"""Synthetic nucleus images with ground truth, augmentation and dataset IO.

The generator paints dark, soft-edged ellipses ("nuclei") on a smooth,
low-frequency background ("tissue") and adds pixel noise.  Each image draws
from its own random stream derived from ``(seed, index)``, so a dataset is
reproducible regardless of how it is split across workers.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .ppm import read_image, write_image


class Nucleus(NamedTuple):
    x: float
    y: float
    a: float  # semi-axis along ``angle``
    b: float
    angle: float


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 40
    nuclei_per_image: tuple[int, int] = (0, 3)
    nucleus_radius: tuple[float, float] = (3.0, 4.5)
    nucleus_aspect: tuple[float, float] = (0.7, 1.0)
    nucleus_color: tuple[tuple[float, float], ...] = ((0.20, 0.40), (0.05, 0.20), (0.35, 0.55))
    background_palette: tuple[tuple[float, float], ...] = ((0.75, 0.95), (0.50, 0.75), (0.65, 0.85))
    background_smoothness: float = 1.0
    background_amplitude: float = 0.08
    edge_softness: float = 0.6
    min_gap: float = 1.0
    noise_std: float = 0.02
    seed: int = 0
    max_retries: int = 200
    max_restarts: int = 20

    def __post_init__(self):
        lo, hi = self.nuclei_per_image
        rlo, rhi = self.nucleus_radius
        if not 0 <= lo <= hi:
            raise ValueError(f"nuclei_per_image must satisfy 0 <= lo <= hi, got {self.nuclei_per_image}")
        if not 2 <= rlo <= rhi:
            raise ValueError(f"nucleus radii must be >= 2, got {self.nucleus_radius}")
        if 2 * rhi >= self.image_size:
            raise ValueError(f"nuclei of radius {rhi} do not fit a {self.image_size}px image")
        for name in ("nucleus_color", "background_palette"):
            for c_lo, c_hi in getattr(self, name):
                if not 0 <= c_lo <= c_hi <= 1:
                    raise ValueError(f"{name} ranges must lie in [0, 1]")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (3, h, w) float32 in [0, 1]
    centers: list[tuple[float, float]]  # (x, y): x is the column, y the row
    label: int | None = None
    nuclei: list[Nucleus] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _background(rng: np.random.Generator, cfg: SynthConfig, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    n = cfg.image_size
    base = np.array([rng.uniform(lo, hi) for lo, hi in cfg.background_palette])
    img = np.broadcast_to(base[:, None, None], (3, n, n)).copy()
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, 2 * np.pi)
        cycles = rng.uniform(0.2, 1.0) * cfg.background_smoothness
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-cfg.background_amplitude, cfg.background_amplitude, size=3)
        wave = np.cos(2 * np.pi * cycles * (np.cos(theta) * xx + np.sin(theta) * yy) / n + phase)
        img += amp[:, None, None] * wave
    return img


def ellipse_coverage(nucleus: Nucleus, yy: np.ndarray, xx: np.ndarray, softness: float) -> np.ndarray:
    """Soft membership in [0, 1]; crosses 0.5 exactly on the ellipse boundary."""
    dx, dy = xx - nucleus.x, yy - nucleus.y
    c, s = np.cos(nucleus.angle), np.sin(nucleus.angle)
    u = (c * dx + s * dy) / nucleus.a
    v = (-s * dx + c * dy) / nucleus.b
    rho = np.sqrt(u * u + v * v)
    # signed distance to the boundary, in pixels along the mean radius
    dist = (1.0 - rho) * 0.5 * (nucleus.a + nucleus.b)
    return 1.0 / (1.0 + np.exp(-dist / softness))


def occupancy_mask(nuclei: Sequence[Nucleus], size: int) -> np.ndarray:
    """Pixels inside any nucleus ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for nuc in nuclei:
        mask |= ellipse_coverage(nuc, yy, xx, 1.0) >= 0.5
    return mask


def _place_nuclei(rng: np.random.Generator, cfg: SynthConfig, count: int) -> list[Nucleus]:
    """Rejection-sample non-overlapping nuclei, restarting the layout when it jams."""
    n = cfg.image_size
    for _restart in range(cfg.max_restarts):
        placed: list[Nucleus] = []
        for _ in range(count):
            for _attempt in range(cfg.max_retries):
                r = rng.uniform(*cfg.nucleus_radius)
                b = r * rng.uniform(*cfg.nucleus_aspect)
                x = rng.uniform(r, n - 1 - r)
                y = rng.uniform(r, n - 1 - r)
                if all(np.hypot(x - p.x, y - p.y) > r + p.a + cfg.min_gap for p in placed):
                    placed.append(Nucleus(x, y, r, b, rng.uniform(0, np.pi)))
                    break
            else:
                break
        if len(placed) == count:
            return placed
    raise RuntimeError(
        f"could not place {count} non-overlapping nuclei in a {n}px image "
        f"after {cfg.max_restarts} layouts of {cfg.max_retries} retries"
    )


def synth_image(cfg: SynthConfig, index: int) -> LabeledImage:
    rng = _stream(cfg.seed, index)
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = _background(rng, cfg, yy, xx)
    lo, hi = cfg.nuclei_per_image
    nuclei = _place_nuclei(rng, cfg, int(rng.integers(lo, hi + 1)))
    for nuc in nuclei:
        color = np.array([rng.uniform(c_lo, c_hi) for c_lo, c_hi in cfg.nucleus_color])
        m = ellipse_coverage(nuc, yy, xx, cfg.edge_softness)
        img = img * (1.0 - m) + color[:, None, None] * m
    img += rng.normal(0.0, cfg.noise_std, size=img.shape)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels, [(nuc.x, nuc.y) for nuc in nuclei], None, nuclei)


def synth_generate(cfg: SynthConfig, count: int, start: int = 0) -> list[LabeledImage]:
    return [synth_image(cfg, start + i) for i in range(count)]


def label_by_count(images: Sequence[LabeledImage], k: int) -> list[LabeledImage]:
    """Set ``label = 1`` when an image holds at least ``k`` nuclei."""
    for im in images:
        im.label = int(len(im.centers) >= k)
    return list(images)


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    crop_x: int
    crop_y: int
    crop_size: int
    color_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotations: int = 0  # quarter turns, counter-clockwise as displayed
    mirror: bool = False

    @classmethod
    def identity(cls, source_size: int, crop_size: int) -> "AugmentParams":
        off = (source_size - crop_size) // 2
        return cls(off, off, crop_size)


def sample_augment(rng: np.random.Generator, source_size: int, crop_size: int) -> AugmentParams:
    if crop_size > source_size:
        raise ValueError(f"crop {crop_size} larger than source image {source_size}")
    slack = source_size - crop_size
    return AugmentParams(
        int(rng.integers(0, slack + 1)),
        int(rng.integers(0, slack + 1)),
        crop_size,
        tuple(float(v) for v in rng.uniform(0.9, 1.1, size=3)),
        tuple(float(v) for v in rng.uniform(-0.05, 0.05, size=3)),
        int(rng.integers(0, 4)),
        bool(rng.integers(0, 2)),
    )


def transform_point(x: float, y: float, params: AugmentParams) -> tuple[float, float]:
    """Where a source-image point lands after :func:`apply_augment`."""
    x, y = x - params.crop_x, y - params.crop_y
    last = params.crop_size - 1
    for _ in range(params.rotations % 4):
        x, y = y, last - x
    if params.mirror:
        x = last - x
    return x, y


def apply_augment(image: LabeledImage, params: AugmentParams) -> LabeledImage:
    src = image.pixels
    if params.crop_size > src.shape[-1] or params.crop_size > src.shape[-2]:
        raise ValueError(f"crop {params.crop_size} larger than source image {src.shape[-2:]}")
    c = params.crop_size
    out = src[:, params.crop_y : params.crop_y + c, params.crop_x : params.crop_x + c]
    scale = np.asarray(params.color_scale, dtype=np.float32)[:, None, None]
    shift = np.asarray(params.color_shift, dtype=np.float32)[:, None, None]
    if np.any(scale != 1) or np.any(shift != 0):
        out = np.clip(out * scale + shift, 0.0, 1.0)
    out = np.rot90(out, params.rotations % 4, axes=(1, 2))
    if params.mirror:
        out = out[:, :, ::-1]
    centers = []
    for x, y in image.centers:
        tx, ty = transform_point(x, y, params)
        if 0 <= tx <= c - 1 and 0 <= ty <= c - 1:
            centers.append((tx, ty))
    return LabeledImage(np.ascontiguousarray(out, dtype=np.float32), centers, image.label)


def augment(image: LabeledImage, rng: np.random.Generator, crop_size: int | None = None) -> LabeledImage:
    crop_size = image.size if crop_size is None else crop_size
    return apply_augment(image, sample_augment(rng, image.size, crop_size))


# -- dataset directory ------------------------------------------------------


def write_dataset(root: str | os.PathLike, images: Sequence[LabeledImage]) -> None:
    """``images/NNNNNN.ppm`` plus ``labels.csv`` (index,x,y) and ``classes.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as lf, open(root / "classes.csv", "w", newline="") as cf:
        lw, cw = csv.writer(lf), csv.writer(cf)
        lw.writerow(["index", "x", "y"])
        cw.writerow(["index", "label"])
        for i, im in enumerate(images):
            write_image(root / "images" / f"{i:06d}.ppm", im.pixels)
            for x, y in im.centers:
                lw.writerow([i, f"{x:.3f}", f"{y:.3f}"])
            cw.writerow([i, "" if im.label is None else im.label])


def read_dataset(root: str | os.PathLike) -> list[LabeledImage]:
    root = Path(root)
    files = sorted((root / "images").glob("*.ppm"))
    centers: dict[int, list] = {}
    labels: dict[int, int | None] = {}
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            centers.setdefault(int(row["index"]), []).append((float(row["x"]), float(row["y"])))
    classes = root / "classes.csv"
    if classes.exists():
        with open(classes, newline="") as fh:
            for row in csv.DictReader(fh):
                labels[int(row["index"])] = int(row["label"]) if row["label"] != "" else None
    out = []
    for f in files:
        i = int(f.stem)
        out.append(LabeledImage(read_image(f), centers.get(i, []), labels.get(i)))
    return out


def to_batch(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images]).astype(np.float32)
