"""Run directories: model construction per kind, the training loop, checkpoints and resume."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch.nn as nn

from . import checkpoint as ckpt
from .config import ConfigError, ModelConfig
from .math_core import ContractError, RandomSource
from .rjgan import RJGAN, ImageGAN, ImageGANTrainer, RJGANTrainer
from .rjvae import RJVAE, RJVAETrainer
from .rmocogan import RMoCoGAN, RMoCoGANTrainer
from .synth_data import LoadedDataset

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
LOSS_FILE = "loss.csv"
CKPT_DIR = "checkpoints"
LATEST_FILE = "LATEST"


def init_seed(cfg: ModelConfig) -> int:
    return RandomSource(cfg.seed).spawn("init").torch_seed()


def step_rng(cfg: ModelConfig, step: int) -> RandomSource:
    """Per-step stream, so a resumed run draws exactly what an uninterrupted one would."""
    return RandomSource(cfg.seed).spawn("train").spawn(step)


def build_model(cfg: ModelConfig, seed: int | None = None) -> nn.Module:
    seed = init_seed(cfg) if seed is None else seed
    if cfg.kind == "rjvae":
        return RJVAE.build(cfg, seed)
    if cfg.kind in ("rjgan", "rjgan-chain"):
        return RJGAN.build(cfg, seed)
    if cfg.kind == "rmocogan":
        return RMoCoGAN.build(cfg, seed)
    if cfg.kind == "baseline-image":
        return ImageGAN.build(cfg, seed)
    raise ConfigError(f"unknown model kind {cfg.kind!r}")


def build_trainer(model: nn.Module, cfg: ModelConfig):
    if cfg.kind == "rjvae":
        return RJVAETrainer(model, cfg)
    if cfg.kind in ("rjgan", "rjgan-chain"):
        return RJGANTrainer(model, cfg)
    if cfg.kind == "rmocogan":
        return RMoCoGANTrainer(model, cfg)
    return ImageGANTrainer(model.g_image, model.d_image, cfg)


def gan_mode(cfg: ModelConfig, data: LoadedDataset) -> str:
    if cfg.kind == "rjgan-chain":
        return "chain"
    return "mixed" if data.num_images else "video_only"


def make_step_fn(trainer, cfg: ModelConfig, data: LoadedDataset) -> Callable[[RandomSource], dict[str, float]]:
    videos = data.videos
    if cfg.kind == "rjvae":
        return lambda rng: trainer.train_step(trainer.sample_batch(videos, rng), rng)
    if cfg.kind in ("rjgan", "rjgan-chain"):
        mode = gan_mode(cfg, data)
        images = data.images if data.num_images else None

        def gan_step(rng):
            vid, img = trainer.sample_batch(videos, images, rng, mode)
            return trainer.train_step(vid, img, rng, mode)

        return gan_step
    if cfg.kind == "rmocogan":
        return lambda rng: trainer.train_step(trainer.sample_batch(videos, rng), rng)
    frames = data.all_frames()[0]
    return lambda rng: trainer.train_step(trainer.sample_batch(None, frames, rng), rng)


def fit_config_to_data(cfg: ModelConfig, data: LoadedDataset) -> ModelConfig:
    """Frame size and video length follow the dataset."""
    if data.num_videos == 0 and cfg.kind != "baseline-image":
        raise ContractError(f"{cfg.kind} needs at least one video in the dataset")
    fs = int(data.frame_shape[-1])
    T = int(data.videos.shape[1]) if data.num_videos else cfg.T
    return cfg.override(frame_size=fs, T=T, clip_len=min(cfg.clip_len, T)).validate()


def dataset_hash(data: LoadedDataset) -> str:
    h = hashlib.sha256()
    for arr in (data.videos, data.video_labels, data.images, data.image_labels):
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory: Path, cfg: ModelConfig, step: int, model: nn.Module, trainer=None,
                    extra: dict[str, Any] | None = None) -> Path:
    arrays = ckpt.state_arrays(model.parameter_groups())
    if trainer is not None:
        arrays.update(ckpt.optimizer_arrays(trainer.optimizers()))
    return ckpt.save_arrays(directory, cfg.kind, cfg.to_dict(), step, arrays, extra)


def resolve_checkpoint(path: str | os.PathLike) -> Path:
    """A checkpoint directory itself, or the latest checkpoint of a run directory."""
    p = Path(path)
    if (p / "meta.json").exists():
        return p
    latest = p / LATEST_FILE
    if latest.exists():
        return p / CKPT_DIR / latest.read_text().strip()
    raise FileNotFoundError(f"no checkpoint found at {path}")


@dataclass
class LoadedModel:
    model: nn.Module
    cfg: ModelConfig
    step: int
    path: Path
    arrays: dict[str, np.ndarray]


def load_model(path: str | os.PathLike) -> LoadedModel:
    where = resolve_checkpoint(path)
    meta, arrays = ckpt.load_arrays(where)
    cfg = ModelConfig.from_dict(meta["config"]).validate()
    model = build_model(cfg)
    ckpt.restore_modules(model.parameter_groups(), arrays)
    model.eval()
    return LoadedModel(model, cfg, int(meta["step"]), where, arrays)


def transfer_image_pair(model: nn.Module, source: str | os.PathLike) -> str:
    """Copy G_I and D_I from another run's checkpoint into ``model``."""
    src = load_model(source)
    groups = {k: v for k, v in model.parameter_groups().items() if k in ("g_image", "d_image")}
    if not groups:
        raise ConfigError(f"{type(model).__name__} has no G_I/D_I to pre-train")
    try:
        ckpt.restore_modules(groups, src.arrays)
    except (KeyError, RuntimeError) as exc:
        raise ConfigError(f"cannot take G_I/D_I from {src.path}: {exc}") from exc
    return str(src.path)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _write_config(run: Path, cfg: ModelConfig, resume: bool) -> None:
    path = run / CONFIG_FILE
    if path.exists():
        old = ModelConfig.from_dict(json.loads(path.read_text()))
        if old != cfg:
            raise ConfigError(f"{path} holds a different config; the snapshot is immutable once a run starts")
        return
    if resume:
        raise ConfigError(f"nothing to resume in {run}")
    path.write_text(cfg.to_json())


def _truncate_losses(path: Path, step: int) -> list[str] | None:
    if not path.exists():
        return None
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return None
    header, body = rows[0], [r for r in rows[1:] if int(r[0]) <= step]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
    return header


def train_run(run_dir: str | os.PathLike, data: LoadedDataset, cfg: ModelConfig, ckpt_every: int = 100,
              resume: bool = False, pretrain_from: str | os.PathLike | None = None,
              stop_after: int | None = None) -> Path:
    """Train ``cfg.kind`` on ``data`` for ``cfg.iterations`` steps inside ``run_dir``.

    Steps are numbered from 1. A checkpoint is written every ``ckpt_every``
    steps and after the last one. ``stop_after`` ends the process early, as
    an interruption would, for resume testing.
    """
    if ckpt_every < 1:
        raise ConfigError("--ckpt-every must be >= 1")
    run = Path(run_dir)
    if run.exists() and not resume and any(run.iterdir()):
        raise ConfigError(f"run directory {run} is not empty (use --resume to continue it)")
    run.mkdir(parents=True, exist_ok=True)
    cfg = fit_config_to_data(cfg, data)
    _write_config(run, cfg, resume)

    model = build_model(cfg)
    trainer = build_trainer(model, cfg)
    extra = {"dataset_hash": dataset_hash(data)}
    start = 0
    header = None
    if resume and (run / LATEST_FILE).exists():
        where = resolve_checkpoint(run)
        meta, arrays = ckpt.load_arrays(where)
        if meta["extra"].get("dataset_hash") != extra["dataset_hash"]:
            raise ConfigError("resume dataset differs from the one this run was trained on")
        ckpt.restore_modules(model.parameter_groups(), arrays)
        ckpt.restore_optimizers(trainer.optimizers(), arrays)
        start = int(meta["step"])
        trainer.step_count = start
        extra.update({k: v for k, v in meta["extra"].items() if k != "dataset_hash"})
        header = _truncate_losses(run / LOSS_FILE, start)
        log.info("resumed %s at step %d", run, start)
    elif pretrain_from is not None:
        extra["pretrained_from"] = transfer_image_pair(model, pretrain_from)

    step_fn = make_step_fn(trainer, cfg, data)
    last = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    with (run / LOSS_FILE).open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start + 1, last + 1):
            report = step_fn(step_rng(cfg, step))
            if header is None:
                header = ["step", *report]
                writer.writerow(header)
            writer.writerow([step, *(repr(report[k]) for k in header[1:])])
            if step % ckpt_every == 0 or step == cfg.iterations:
                fh.flush()
                _checkpoint(run, cfg, step, model, trainer, extra)
    if last == start and not (run / LATEST_FILE).exists():
        _checkpoint(run, cfg, start, model, trainer, extra)
    return run


def _checkpoint(run: Path, cfg: ModelConfig, step: int, model, trainer, extra) -> None:
    name = f"step_{step:07d}"
    target = run / CKPT_DIR / name
    if target.exists():
        shutil.rmtree(target)
    save_checkpoint(target, cfg, step, model, trainer, extra)
    (run / LATEST_FILE).write_text(name + "\n")


def read_losses(run_dir: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    with (Path(run_dir) / LOSS_FILE).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


def train_steps(model: nn.Module, cfg: ModelConfig, data: LoadedDataset, steps: int,
                trainer=None, stream: str = "train") -> list[dict[str, float]]:
    """In-memory training without a run directory (experiments, tests)."""
    trainer = build_trainer(model, cfg) if trainer is None else trainer
    step_fn = make_step_fn(trainer, cfg, data)
    root = RandomSource(cfg.seed).spawn(stream)
    return [step_fn(root.spawn(step)) for step in range(1, steps + 1)]
