"""Probe classifiers, Inception Score and a Frechet video/image distance on probe features."""

from __future__ import annotations

import logging
import math
import os
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .math_core import ContractError, FeatureStats, RandomSource, frechet_distance, torch_seeded
from .nets import ImageDiscriminator, VideoDiscriminator
from .synth_data import ACTIONS, NUM_IDENTITIES, LoadedDataset, batch_clip_starts, dataset_in_memory, take_clips

log = logging.getLogger(__name__)

PROBE_KINDS = ("image_2d", "video_3d")
LABELS = ("identity", "action")
PROB_FLOOR = 1e-12


class ProbeClassifier(nn.Module):
    """Small classifier whose penultimate layer doubles as a feature extractor.

    The image probe shares the D_I architecture; the video probe shares D_V's.
    """

    def __init__(self, kind: str, num_classes: int, frame_size: int = 32, clip_len: int = 8,
                 width: int = 16, feature_dim: int = 64, pool: bool = True):
        super().__init__()
        if kind not in PROBE_KINDS:
            raise ContractError(f"unknown probe kind {kind!r}")
        self.kind = kind
        self.num_classes = num_classes
        self.frame_size = frame_size
        self.clip_len = clip_len
        self.width = width
        self.feature_dim = feature_dim
        self.pool = pool
        self.meta: dict[str, Any] = {}
        if kind == "image_2d":
            self.net = ImageDiscriminator(frame_size, width, out_dim=num_classes, feature_dim=feature_dim,
                                          pool=pool)
        else:
            self.net = VideoDiscriminator(frame_size, clip_len, width, out_dim=num_classes, feature_dim=feature_dim,
                                          pool=pool)

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float32)
        want = 4 if self.kind == "image_2d" else 5
        if x.dim() != want:
            raise ContractError(f"{self.kind} probe expects {want}-D input, got shape {tuple(x.shape)}")
        if self.kind == "video_3d" and x.shape[1] != self.clip_len:
            raise ContractError(f"video probe expects clips of {self.clip_len} frames, got {x.shape[1]}")
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    @torch.no_grad()
    def _batched(self, x, fn, batch_size: int = 256) -> np.ndarray:
        x = self._check(x)
        self.eval()
        return np.concatenate([fn(x[i:i + batch_size]).double().numpy() for i in range(0, len(x), batch_size)])

    def features(self, x) -> np.ndarray:
        return self._batched(x, self.net.features)

    def predict_proba(self, x) -> np.ndarray:
        return self._batched(x, lambda b: F.softmax(self.net(b).double(), -1))

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(-1)

    def save(self, directory: str | os.PathLike) -> None:
        config = {"kind": self.kind, "num_classes": self.num_classes, "frame_size": self.frame_size,
                  "clip_len": self.clip_len, "width": self.width, "feature_dim": self.feature_dim, "pool": self.pool}
        ckpt.save_arrays(directory, f"probe-{self.kind}", config, 0, ckpt.state_arrays({"net": self.net}),
                         extra=self.meta)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ProbeClassifier":
        meta, arrays = ckpt.load_arrays(directory)
        probe = cls(**meta["config"])
        ckpt.restore_modules({"net": probe.net}, arrays)
        probe.meta = meta.get("extra", {})
        probe.eval()
        return probe


def _label_column(label: str) -> int:
    if label not in LABELS:
        raise ContractError(f"label must be one of {LABELS}")
    return LABELS.index(label)


def _probe_samples(data: LoadedDataset, kind: str, label: str, clip_len: int, rng: RandomSource | None):
    col = _label_column(label)
    if kind == "image_2d":
        frames, labels = data.all_frames()
        return frames, labels[:, col]
    if data.num_videos == 0:
        raise ContractError("video probe needs videos")
    T = data.videos.shape[1]
    if T == clip_len or rng is None:
        return data.videos[:, :clip_len], data.video_labels[:, col]
    starts = batch_clip_starts(data.num_videos, T, clip_len, rng)
    return take_clips(data.videos, starts, clip_len), data.video_labels[:, col]


def probe_accuracy(probe: ProbeClassifier, data: LoadedDataset, label: str) -> float:
    x, y = _probe_samples(data, probe.kind, label, probe.clip_len, None)
    return float(np.mean(probe.predict(x) == y))


# sized so both probes clear their held-out accuracy targets on a 2048-video training draw
PROBE_DEFAULTS = {
    "image_2d": {"width": 32, "steps": 4000},
    "video_3d": {"width": 16, "steps": 1500},
}
PROBE_TRAIN_VIDEOS = 2048


def train_probe(data: LoadedDataset, kind: str, label: str, rng: RandomSource,
                holdout: LoadedDataset | None = None, steps: int | None = None, batch_size: int = 32,
                lr: float = 1e-3, clip_len: int = 8, width: int | None = None, feature_dim: int = 64,
                pool: bool = True) -> ProbeClassifier:
    """Fit a probe on ``data`` and record held-out accuracy in ``probe.meta``.

    Without an explicit ``holdout`` set, a quarter of the videos (or images)
    is held out.
    """
    if kind not in PROBE_KINDS:
        raise ContractError(f"unknown probe kind {kind!r}")
    steps = PROBE_DEFAULTS[kind]["steps"] if steps is None else steps
    width = PROBE_DEFAULTS[kind]["width"] if width is None else width
    col = _label_column(label)
    num_classes = NUM_IDENTITIES if label == "identity" else len(ACTIONS)
    if holdout is None:
        data, holdout = _split(data, rng.spawn("split"))
    x_all, y_all = _probe_samples(data, kind, label, clip_len, None)
    if len(np.unique(y_all)) < 2:
        raise ContractError("probe training needs at least 2 classes")
    frame_size = int(data.frame_shape[-1])
    with torch_seeded(rng.spawn("init").torch_seed()):
        probe = ProbeClassifier(kind, num_classes, frame_size, clip_len, width, feature_dim, pool)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    # cosine decay to zero: the final iterate is what gets frozen, so it must not sit on a noisy step
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, steps))
    draw = rng.spawn("batches")
    x_t = torch.as_tensor(x_all, dtype=torch.float32)
    y_t = torch.as_tensor(y_all, dtype=torch.long)
    probe.train()
    for _ in range(steps):
        idx = torch.as_tensor(draw.integers(0, len(x_t), size=min(batch_size, len(x_t))))
        loss = F.cross_entropy(probe(x_t[idx]), y_t[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    probe.eval()
    probe.meta = {
        "label": label,
        "label_column": col,
        "train_accuracy": float(np.mean(probe.predict(x_all) == y_all)),
        "heldout_accuracy": probe_accuracy(probe, holdout, label) if holdout is not None else None,
        "steps": steps,
        "feature_layer": "penultimate",
    }
    return probe


def probe_datasets(seed: int, frame_size: int = 32, frames: int = 8,
                   num_train: int = PROBE_TRAIN_VIDEOS, num_holdout: int = 64) -> tuple[LoadedDataset, LoadedDataset]:
    """Fresh training draw plus a disjoint-seed 64-video held-out set."""
    root = RandomSource(seed)
    train_seed = int(root.spawn("probe-train").integers(0, 2**31 - 1))
    holdout_seed = int(root.spawn("probe-holdout").integers(0, 2**31 - 1))
    return (dataset_in_memory(num_train, frames, frame_size, train_seed),
            dataset_in_memory(num_holdout, frames, frame_size, holdout_seed))


def probe_cache_path(cache_dir, kind: str, seed: int = 0, frame_size: int = 32, frames: int = 8,
                     clip_len: int = 8) -> str:
    label = "identity" if kind == "image_2d" else "action"
    d = PROBE_DEFAULTS[kind]
    # training settings are part of the key so a retuned probe never loads a stale cache
    name = f"probe-{kind}-{label}-fs{frame_size}-T{frames}-L{clip_len}-w{d['width']}-n{d['steps']}-s{seed}"
    return os.path.join(os.fspath(cache_dir), name)


def standard_probe(kind: str, seed: int = 0, frame_size: int = 32, frames: int = 8, clip_len: int = 8,
                   cache_dir: str | os.PathLike | None = None, data=None) -> ProbeClassifier:
    """Identity probe for ``image_2d``, action probe for ``video_3d``; loaded from ``cache_dir`` when present."""
    label = "identity" if kind == "image_2d" else "action"
    path = None
    if cache_dir is not None:
        path = probe_cache_path(cache_dir, kind, seed, frame_size, frames, clip_len)
        if os.path.exists(os.path.join(path, "meta.json")):
            return ProbeClassifier.load(path)
    train, holdout = data if data is not None else probe_datasets(seed, frame_size, frames)
    probe = train_probe(train, kind, label, RandomSource(seed).spawn(kind), holdout=holdout, clip_len=clip_len)
    log.info("%s probe held-out accuracy %.4f", kind, probe.meta["heldout_accuracy"])
    if path is not None:
        probe.save(path)
    return probe


def _split(data: LoadedDataset, rng: RandomSource) -> tuple[LoadedDataset, LoadedDataset]:
    def part(arr, lab):
        n = len(arr)
        perm = rng.permutation(n)
        k = max(1, n // 4) if n > 1 else 0
        return (arr[perm[k:]], lab[perm[k:]]), (arr[perm[:k]], lab[perm[:k]])

    (tv, tvl), (hv, hvl) = part(data.videos, data.video_labels)
    (ti, til), (hi, hil) = part(data.images, data.image_labels)
    return LoadedDataset(tv, tvl, ti, til), LoadedDataset(hv, hvl, hi, hil)


# ---------------------------------------------------------------------------
# Inception Score
# ---------------------------------------------------------------------------


def inception_score_from_probs(probs: np.ndarray, num_batches: int, batch_size: int) -> tuple[float, float]:
    """Mean and std over batches of ``exp(mean_x KL(p(y|x) || p_batch(y)))``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ContractError("probs must be N x C")
    if p.shape[0] < num_batches * batch_size:
        raise ContractError(f"need {num_batches * batch_size} samples, got {p.shape[0]}")
    C = p.shape[1]
    scores = []
    for b in range(num_batches):
        chunk = p[b * batch_size:(b + 1) * batch_size]
        marginal = chunk.mean(0, keepdims=True)
        kl = (chunk * (np.log(np.maximum(chunk, PROB_FLOOR)) - np.log(np.maximum(marginal, PROB_FLOOR)))).sum(1)
        # the batch mean KL is a mutual information, so it lies in [0, ln C]
        mean_kl = float(np.clip(kl.mean(), 0.0, math.log(C)))
        scores.append(math.exp(mean_kl))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images, probe: ProbeClassifier, num_batches: int = 10, batch_size: int = 128) -> tuple[float, float]:
    if probe.kind != "image_2d":
        raise ContractError("Inception Score needs an image probe")
    images = torch.as_tensor(images, dtype=torch.float32)
    if len(images) < num_batches * batch_size:
        raise ContractError(f"need {num_batches * batch_size} images, got {len(images)}")
    return inception_score_from_probs(probe.predict_proba(images[: num_batches * batch_size]), num_batches, batch_size)


# ---------------------------------------------------------------------------
# Frechet distance on probe features
# ---------------------------------------------------------------------------


def extract_features(samples, probe: ProbeClassifier) -> np.ndarray:
    return probe.features(samples)


def fit_stats(features: np.ndarray) -> FeatureStats:
    n, f = features.shape
    if n < f + 1:
        log.warning("only %d samples for %d features; covariance shrinkage applied", n, f)
    return FeatureStats.fit(features)


def frechet_from_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_distance(fit_stats(a), fit_stats(b))


def fvd_analog(real_videos, generated_videos, probe: ProbeClassifier) -> float:
    """Frechet distance between Gaussian fits of video-probe features of two clip sets."""
    if probe.kind != "video_3d":
        raise ContractError("fvd_analog needs a video probe")
    if len(real_videos) == 0 or len(generated_videos) == 0:
        raise ContractError("fvd_analog needs nonempty sets")
    L = probe.clip_len
    real = torch.as_tensor(real_videos, dtype=torch.float32)[:, :L]
    gen = torch.as_tensor(generated_videos, dtype=torch.float32)[:, :L]
    return frechet_from_features(probe.features(real), probe.features(gen))


def frechet_image_distance(real_images, generated_images, probe: ProbeClassifier) -> float:
    if probe.kind != "image_2d":
        raise ContractError("frechet_image_distance needs an image probe")
    return frechet_from_features(probe.features(real_images), probe.features(generated_images))


def metric_report(metric: str, value: float, std: float | None, num_samples: int, probe_checkpoint: str | None,
                  seed: int, **extra) -> dict[str, Any]:
    report = {"metric": metric, "value": float(value), "std": None if std is None else float(std),
              "num_samples": int(num_samples), "probe_checkpoint": probe_checkpoint, "seed": int(seed)}
    report.update(extra)
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["metric", "value", "std", "num_samples", "probe_checkpoint", "seed"],
    "properties": {
        "metric": {"type": "string"},
        "value": {"type": "number"},
        "std": {"type": ["number", "null"]},
        "num_samples": {"type": "integer", "minimum": 1},
        "probe_checkpoint": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
    },
}
