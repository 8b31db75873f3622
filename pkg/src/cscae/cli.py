"""Command-line driver: ``cscae {synth,train,eval,detect,reconstruct,shapes}``.

Settings come from built-in defaults, then an optional ``key = value`` file
(``--config``), then command-line flags.  Errors print a single line
``cscae: error[<kind>]: <message>`` to stderr and exit with 2 (config),
3 (IO) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import SynthConfig, label_by_count, read_dataset, synth_generate, write_dataset
from .model import CaeConfig, CaeModel, build_cae, expected_rows
from .ppm import PPMError, read_image, write_image
from .sparsity import SparsityGateConfig, extract_detections, write_detections_csv
from .tensor import NonFiniteError, Tensor, no_grad
from .train import TrainConfig, TrainingDiverged, evaluate, train

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
SIDECAR = "run.cfg"
MODEL_KEYS = ("preset", "gate_mode", "sparsity", "slope", "alpha")


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # model
    preset: str = "desk"
    gate_mode: str = "crosswise"
    sparsity: float = 1.6
    slope: float = 20.0
    alpha: float = 0.1
    # training
    batch: int = 32
    lr: float = 0.03
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0
    augment: bool = False
    lr_drop_factor: float = 10.0
    plateau_patience: int = 3
    # synthetic data
    count: int = 2000
    image_size: int = 40
    nuclei_min: int = 0
    nuclei_max: int = 3
    noise: float = 0.02
    labels_k: int = 2
    # paths
    data: str = ""
    out: str = ""
    checkpoint: str = ""
    image: str = ""

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, file_values: dict[str, str], overrides: dict[str, object]) -> "RunConfig":
        """Defaults, then file values (strings), then typed overrides."""
        cfg = cls()
        types = {f.name: type(getattr(cfg, f.name)) for f in fields(cls)}
        merged = {}
        for key, raw in file_values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                merged[key] = _parse_bool(raw) if types[key] is bool else types[key](raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                merged[key] = value
        cfg = replace(cfg, **merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.preset not in ("desk", "full"):
            raise ConfigError(f"preset must be 'desk' or 'full', got {self.preset!r}")
        try:
            self.cae_config()
            self.train_config()
            if self.count < 0:
                raise ValueError(f"count must be >= 0, got {self.count}")
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def cae_config(self) -> CaeConfig:
        gate = SparsityGateConfig(r=self.slope, p=self.sparsity, alpha=self.alpha)
        if self.preset == "desk":
            return CaeConfig.desk(gate=gate, gate_mode=self.gate_mode)
        return CaeConfig(gate=gate, gate_mode=self.gate_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch,
            learning_rate=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            lr_drop_factor=self.lr_drop_factor,
            plateau_patience=self.plateau_patience,
            seed=self.seed,
            augment=self.augment,
        )

    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(
                image_size=self.image_size,
                nuclei_per_image=(self.nuclei_min, self.nuclei_max),
                noise_std=self.noise,
                seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def dump(self, keys=None) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in (keys or self.keys()))


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


# -- helpers ----------------------------------------------------------------


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _require_dataset(path: str) -> Path:
    if not path:
        raise ConfigError("--data is required")
    p = Path(path)
    if not (p / "images").is_dir() or not (p / "labels.csv").is_file():
        raise FileNotFoundError(f"{path} is not a dataset directory (needs images/ and labels.csv)")
    return p


def _model_for_checkpoint(cfg: RunConfig, checkpoint: Path) -> CaeModel:
    """Rebuild the architecture recorded next to ``checkpoint`` and load it."""
    sidecar = checkpoint.parent / SIDECAR
    if sidecar.is_file():
        recorded = {k: v for k, v in read_config_file(sidecar).items() if k in MODEL_KEYS}
        cfg = RunConfig.from_sources(recorded, {})
    model = build_cae(cfg.cae_config(), 0)
    load_checkpoint(checkpoint, model)
    model.eval()
    return model


def _load_input(model: CaeModel, path: Path) -> np.ndarray:
    img = read_image(path)
    n = model.config.input_size
    if img.shape != (model.config.input_channels, n, n):
        raise ConfigError(f"{path}: image is {img.shape[2]}x{img.shape[1]}, model expects {n}x{n}")
    return img


def draw_overlay(image: np.ndarray, detections, half: int = 2) -> np.ndarray:
    """Green square outline around each detection."""
    out = image.copy()
    _, h, w = out.shape
    color = np.array([0.0, 1.0, 0.0], dtype=out.dtype)[:, None]
    for det in detections:
        x0, x1 = max(det.x - half, 0), min(det.x + half, w - 1)
        y0, y1 = max(det.y - half, 0), min(det.y + half, h - 1)
        out[:, y0, x0 : x1 + 1] = color
        out[:, y1, x0 : x1 + 1] = color
        out[:, y0 : y1 + 1, x0] = color
        out[:, y0 : y1 + 1, x1] = color
    return out


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg: RunConfig, force: bool = False) -> int:
    if not cfg.out:
        raise ConfigError("--out is required")
    root = Path(cfg.out)
    synth = cfg.synth_config()
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} is not empty; pass --force to overwrite")
        for f in (root / "images").glob("*.ppm"):
            f.unlink()
        for name in ("labels.csv", "classes.csv"):
            (root / name).unlink(missing_ok=True)
    images = label_by_count(synth_generate(synth, cfg.count), cfg.labels_k)
    write_dataset(root, images)
    print(f"wrote {len(images)} images to {root}")
    return 0


def cmd_train(cfg: RunConfig, resume: str = "") -> int:
    data = _require_dataset(cfg.data)
    resume_path = _require_file(resume, "resume") if resume else None
    out = Path(cfg.out) if cfg.out else (resume_path.parent if resume_path else None)
    if out is None:
        raise ConfigError("--out is required")
    out.mkdir(parents=True, exist_ok=True)
    dataset = read_dataset(data)
    if not dataset:
        raise ConfigError(f"{data} holds no images")
    model = build_cae(cfg.cae_config(), cfg.seed)
    print(
        f"cscae train: batch={cfg.batch} lr={cfg.lr} momentum={cfg.momentum} sparsity={cfg.sparsity} "
        f"slope={cfg.slope} alpha={cfg.alpha} epochs={cfg.epochs} seed={cfg.seed} "
        f"preset={cfg.preset} gate_mode={cfg.gate_mode} images={len(dataset)}",
        flush=True,
    )
    (out / SIDECAR).write_text(cfg.dump())
    result = train(model, dataset, cfg.train_config(), out_dir=out, resume_from=resume_path)
    for rec in result.history:
        print(f"epoch {rec.epoch} loss {rec.loss:.6f} lr {rec.lr:g} t {rec.t:.4f} sparsity {rec.sparsity:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, report: str = "") -> int:
    data = _require_dataset(cfg.data)
    checkpoint = _require_file(cfg.checkpoint, "checkpoint")
    model = _model_for_checkpoint(cfg, checkpoint)
    history = []
    metrics = checkpoint.parent / "metrics.csv"
    if metrics.is_file():
        rows = metrics.read_text().splitlines()[1:]
        history = [float(r.split(",")[1]) for r in rows if r]
    result = evaluate(model, read_dataset(data), history=history)
    text = result.to_json()
    if report:
        Path(report).write_text(text + "\n")
    print(text)
    return 0


def cmd_detect(cfg: RunConfig) -> int:
    checkpoint = _require_file(cfg.checkpoint, "checkpoint")
    image_path = _require_file(cfg.image, "image")
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    model = _model_for_checkpoint(cfg, checkpoint)
    img = _load_input(model, image_path)
    with no_grad():
        outputs = model(Tensor(img[None]))
    dets = extract_detections(outputs.detection_map.data[0, 0], model.config.grid_stride)
    stem = image_path.stem
    write_detections_csv(out / f"{stem}.detections.csv", dets)
    write_image(out / f"{stem}.overlay.ppm", draw_overlay(img, dets))
    print(f"{len(dets)} detections written to {out / (stem + '.detections.csv')}")
    return 0


def cmd_reconstruct(cfg: RunConfig) -> int:
    checkpoint = _require_file(cfg.checkpoint, "checkpoint")
    image_path = _require_file(cfg.image, "image")
    out = Path(cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    model = _model_for_checkpoint(cfg, checkpoint)
    img = _load_input(model, image_path)
    with no_grad():
        outputs = model(Tensor(img[None]))
    stem = image_path.stem
    for name, t in (
        ("foreground", outputs.foreground_recon),
        ("background", outputs.background_recon),
        ("reconstruction", outputs.reconstruction),
    ):
        write_image(out / f"{stem}.{name}.ppm", t.data[0])
    print(f"wrote {stem}.foreground.ppm, {stem}.background.ppm, {stem}.reconstruction.ppm to {out}")
    return 0


def shape_report(config: CaeConfig) -> tuple[list[str], int]:
    """One line per layer row; returns (lines, number of mismatches)."""
    model = build_cae(config, 0)
    model.eval()
    n = config.input_size
    with no_grad():
        trace = model.shape_trace(Tensor(np.zeros((1, config.input_channels, n, n))))
    rows = expected_rows(config)
    lines, bad = [], 0
    if len(trace) != len(rows):
        return [f"layer count {len(trace)} != {len(rows)}"], max(1, abs(len(trace) - len(rows)))
    for row, (traced, shape) in zip(rows, trace):
        want = (row.channels, row.size, row.size)
        ok = tuple(shape) == want and (traced.part, traced.layer) == (row.part, row.layer)
        bad += not ok
        got = f"{shape[1]}^2x{shape[0]}" if len(shape) == 3 else str(shape)
        lines.append(f"{row.describe()} | {got:<9} | {'OK' if ok else 'MISMATCH'}")
    return lines, bad


def cmd_shapes(cfg: RunConfig) -> int:
    lines, bad = shape_report(cfg.cae_config())
    print("\n".join(lines))
    print(f"{len(lines) - bad}/{len(lines)} rows OK")
    if bad:
        raise ArithmeticError(f"{bad} layer rows do not match the layer plan")
    return 0


# -- entry point ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "preset": dict(choices=("desk", "full"), help="architecture size (default desk)"),
        "gate_mode": dict(choices=("crosswise", "conventional"), help="detection gate or conventional sparsity ablation"),
        "sparsity": dict(type=float, help="sparsity rate p in percent (default 1.6)"),
        "slope": dict(type=float, help="sigmoid slope r of the detection map (default 20)"),
        "alpha": dict(type=float, help="running threshold update rate (default 0.1)"),
        "batch": dict(type=int, help="minibatch size (default 32)"),
        "lr": dict(type=float, help="learning rate (default 0.03)"),
        "momentum": dict(type=float, help="SGD momentum (default 0.9)"),
        "epochs": dict(type=int, help="training epochs (default 10)"),
        "seed": dict(type=int, help="random seed (default 0)"),
        "augment": dict(action="store_const", const=True, help="random crop/colour/rotation/mirror augmentation"),
        "count": dict(type=int, help="number of synthetic images (default 2000)"),
        "image_size": dict(type=int, help="synthetic image side in pixels (default 40)"),
        "nuclei_min": dict(type=int, help="fewest nuclei per image (default 0)"),
        "nuclei_max": dict(type=int, help="most nuclei per image (default 3)"),
        "noise": dict(type=float, help="pixel noise standard deviation (default 0.02)"),
        "labels_k": dict(type=int, help="class label is 1 when an image holds >= k nuclei (default 2)"),
        "data": dict(help="dataset directory"),
        "out": dict(help="output directory"),
        "checkpoint": dict(help="checkpoint file"),
        "image": dict(help="input PPM image"),
    }
    p.add_argument("--config", help="key = value settings file; flags override it")
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **flags[name])


MODEL_FLAGS = ("preset", "gate_mode", "sparsity", "slope", "alpha")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cscae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic nucleus dataset")
    _add_common(p, "out", "count", "seed", "image_size", "nuclei_min", "nuclei_max", "noise", "labels_k")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("train", help="train the autoencoder")
    _add_common(p, "data", "out", *MODEL_FLAGS, "batch", "lr", "momentum", "epochs", "seed", "augment")
    p.add_argument("--resume", default="", help="continue from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset, print a JSON report")
    _add_common(p, "data", "checkpoint", *MODEL_FLAGS)
    p.add_argument("--report", default="", help="also write the JSON report here")

    p = sub.add_parser("detect", help="write detections CSV and overlay PPM for one image")
    _add_common(p, "checkpoint", "image", "out", *MODEL_FLAGS)

    p = sub.add_parser("reconstruct", help="write foreground, background and reconstruction PPMs")
    _add_common(p, "checkpoint", "image", "out", *MODEL_FLAGS)

    p = sub.add_parser("shapes", help="check layer output sizes against the layer plan")
    _add_common(p, *MODEL_FLAGS)
    return parser


def _apply_thread_limit() -> None:
    raw = os.environ.get("CSCAE_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CSCAE_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        _apply_thread_limit()
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k in RunConfig.keys()}
        cfg = RunConfig.from_sources(file_values, overrides)
        if args.command == "synth":
            return cmd_synth(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.report)
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg)
        return cmd_shapes(cfg)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except (OSError, PPMError, CheckpointError) as e:
        return _fail(EXIT_IO, "io", e)
    except (TrainingDiverged, NonFiniteError, ArithmeticError) as e:
        return _fail(EXIT_NUMERIC, "numeric", e)
    except ValueError as e:
        return _fail(EXIT_CONFIG, "config", e)


def _fail(code: int, kind: str, err: Exception) -> int:
    message = " ".join(str(err).split()) or type(err).__name__
    print(f"cscae: error[{kind}]: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
