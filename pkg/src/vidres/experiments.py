"""Multi-seed comparison protocols: pre-training, image benchmark, mixed-dataset training."""

from __future__ import annotations

import json
import logging
import os
import statistics
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ModelConfig, desk_preset
from .math_core import ContractError, RandomSource
from .metrics import fvd_analog, inception_score, standard_probe
from .rjgan import pretrain_images
from .runs import build_model, fit_config_to_data, train_steps
from .synth_data import LoadedDataset, dataset_in_memory, disintegrate_in_memory

log = logging.getLogger(__name__)

EXPERIMENTS = ("pretrain-compare", "image-bench", "mixed-train")
DEFAULT_SEEDS = (0, 1, 2)


def _eval_videos(cfg: ModelConfig, num: int, seed: int) -> np.ndarray:
    return dataset_in_memory(num, cfg.T, cfg.frame_size, seed).videos


@torch.no_grad()
def generated_videos(model, num: int, rng: RandomSource) -> torch.Tensor:
    model.eval()
    return model.generate(num, rng).video


def pretrain_compare(data: LoadedDataset, seeds=DEFAULT_SEEDS, iterations: int = 300, pretrain_steps: int = 500,
                     eval_num: int = 256, eval_seed: int = 9001, probe_dir=None, base: ModelConfig | None = None,
                     probe=None) -> dict[str, Any]:
    """Cold vs image-pre-trained RJGAN, FVD-analog after the same number of video iterations."""
    base = fit_config_to_data(base or desk_preset("rjgan"), data)
    probe = probe or standard_probe("video_3d", 0, base.frame_size, base.T, base.clip_len, probe_dir)
    real = _eval_videos(base, eval_num, eval_seed)
    frames = data.all_frames()[0]
    rows = []
    for seed in seeds:
        cfg = base.override(seed=seed, iterations=iterations)
        row: dict[str, Any] = {"seed": seed}
        for arm in ("cold", "pretrained"):
            model = build_model(cfg)
            if arm == "pretrained":
                pretrain_images(model, frames, pretrain_steps, RandomSource(seed).spawn("pretrain"), cfg)
            train_steps(model, cfg, data, iterations)
            fake = generated_videos(model, eval_num, RandomSource(seed).spawn("eval"))
            row[arm] = fvd_analog(real, fake, probe)
        row["pretrained_better"] = row["pretrained"] < row["cold"]
        log.info("seed %d: cold %.4f pretrained %.4f", seed, row["cold"], row["pretrained"])
        rows.append(row)
    cold = statistics.median(r["cold"] for r in rows)
    pre = statistics.median(r["pretrained"] for r in rows)
    return {"experiment": "pretrain-compare", "metric": "fvd_analog", "iterations": iterations,
            "pretrain_steps": pretrain_steps, "eval_num": eval_num, "seeds": list(seeds), "rows": rows,
            "median": {"cold": cold, "pretrained": pre}, "pretrained_better_median": pre < cold,
            "failing_seeds": [r["seed"] for r in rows if not r["pretrained_better"]],
            "probe": probe.meta}


def image_bench(data: LoadedDataset, seeds=DEFAULT_SEEDS, iterations: int = 300, num_batches: int = 10,
                batch_size: int = 128, probe_dir=None, probe=None) -> dict[str, Any]:
    """Inception Score of baseline image-GAN samples vs RJGAN summary frames G_I(mu)."""
    rj = fit_config_to_data(desk_preset("rjgan"), data)
    img = fit_config_to_data(desk_preset("baseline-image"), data)
    probe = probe or standard_probe("image_2d", 0, rj.frame_size, rj.T, rj.clip_len, probe_dir)
    n = num_batches * batch_size
    frames = data.all_frames()[0]
    if len(frames) < n:
        log.info("real-frame reference uses %d frames with replacement", n)
    real = frames[RandomSource(0).spawn("real").integers(0, len(frames), size=n)]
    reference = inception_score(real, probe, num_batches, batch_size)
    rows = []
    for seed in seeds:
        row: dict[str, Any] = {"seed": seed}
        for arm, base in (("baseline-image", img), ("rjgan-summary", rj)):
            cfg = base.override(seed=seed, iterations=iterations)
            model = build_model(cfg)
            train_steps(model, cfg, data, iterations)
            model.eval()
            with torch.no_grad():
                images = model.summary_frame(model.sample_mu(n, RandomSource(seed).spawn("eval")))
            row[arm] = list(inception_score(images, probe, num_batches, batch_size))
        rows.append(row)
    summary = {arm: statistics.median(r[arm][0] for r in rows) for arm in ("baseline-image", "rjgan-summary")}
    return {"experiment": "image-bench", "metric": "inception_score", "iterations": iterations,
            "num_batches": num_batches, "batch_size": batch_size, "seeds": list(seeds), "rows": rows,
            "median": summary, "real_frames": list(reference), "probe": probe.meta}


def mixed_train(data: LoadedDataset, seeds=DEFAULT_SEEDS, iterations: int = 300, fraction: float = 0.5,
                eval_num: int = 256, eval_seed: int = 9001, probe_dir=None, probe=None) -> dict[str, Any]:
    """RJGAN on the half-disintegrated dataset beside RJGAN on all videos."""
    if data.num_images:
        raise ContractError("mixed-train expects a video-only dataset and disintegrates it itself")
    base = fit_config_to_data(desk_preset("rjgan"), data)
    probe = probe or standard_probe("video_3d", 0, base.frame_size, base.T, base.clip_len, probe_dir)
    real = _eval_videos(base, eval_num, eval_seed)
    mixed = disintegrate_in_memory(data, fraction, RandomSource(0).spawn("disintegrate"))
    rows = []
    for seed in seeds:
        cfg = base.override(seed=seed, iterations=iterations)
        row: dict[str, Any] = {"seed": seed}
        for arm, d in (("mixed", mixed), ("videos", data)):
            model = build_model(cfg)
            train_steps(model, cfg, d, iterations)
            row[arm] = fvd_analog(real, generated_videos(model, eval_num, RandomSource(seed).spawn("eval")), probe)
        rows.append(row)
    return {"experiment": "mixed-train", "metric": "fvd_analog", "iterations": iterations, "fraction": fraction,
            "dataset": {"videos": mixed.num_videos, "images": mixed.num_images}, "seeds": list(seeds),
            "rows": rows, "median": {arm: statistics.median(r[arm] for r in rows) for arm in ("mixed", "videos")},
            "probe": probe.meta}


def format_table(report: dict[str, Any]) -> str:
    rows = report["rows"]
    arms = [k for k in rows[0] if k not in ("seed", "pretrained_better")]
    lines = [f"{report['experiment']} ({report['metric']})", "seed  " + "  ".join(f"{a:>16}" for a in arms)]

    def cell(v):
        return f"{v[0]:10.4f}+-{v[1]:.3f}" if isinstance(v, list) else f"{v:16.4f}"

    for r in rows:
        lines.append(f"{r['seed']:>4}  " + "  ".join(f"{cell(r[a]):>16}" for a in arms))
    lines.append("median" + "".join(f"  {report['median'][a]:16.4f}" for a in arms if a in report["median"]))
    return "\n".join(lines) + "\n"


def write_report(report: dict[str, Any], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / f"{report['experiment']}.json"
    txt = out / f"{report['experiment']}.txt"
    js.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    txt.write_text(format_table(report))
    return js, txt


RUNNERS = {"pretrain-compare": pretrain_compare, "image-bench": image_bench, "mixed-train": mixed_train}
