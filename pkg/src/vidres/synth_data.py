"""Procedural sprite videos: rendering, on-disk datasets, mixing and frame/clip samplers."""

from __future__ import annotations

import colorsys
import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .math_core import ContractError, RandomSource

SHAPES = ("circle", "square", "triangle", "star")
ACTIONS = ("translate_right", "translate_up", "grow_shrink", "rotate")
NUM_COLORS = 4
NUM_IDENTITIES = len(SHAPES) * NUM_COLORS
SUPERSAMPLE = 4
MANIFEST_VERSION = 1
SIZE_RANGE = (0.15, 0.35)


@dataclass(frozen=True)
class SpriteSpec:
    """A sprite with fixed appearance following one linear motion program.

    Positions are centre coordinates in frame units (``[0, 1]``, y pointing
    down). ``size`` is the radius of the circle the shape is inscribed in.
    ``speed`` is frame units per frame for translations and growth, radians
    per frame for rotation.
    """

    shape: str
    hue: float
    size: float
    action: str
    speed: float
    start_pos: tuple[float, float]
    background_hue: float
    color_id: int = 0
    angle0: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ContractError(f"unknown shape {self.shape!r}")
        if self.action not in ACTIONS:
            raise ContractError(f"unknown action {self.action!r}")
        if not (SIZE_RANGE[0] <= self.size <= SIZE_RANGE[1]):
            raise ContractError(f"size {self.size} outside {SIZE_RANGE}")
        if not (0.0 <= self.hue < 1.0 and 0.0 <= self.background_hue < 1.0):
            raise ContractError("hues must be in [0, 1)")

    @property
    def identity_id(self) -> int:
        return SHAPES.index(self.shape) * NUM_COLORS + self.color_id

    @property
    def action_id(self) -> int:
        return ACTIONS.index(self.action)

    def state(self, t: int) -> tuple[float, float, float, float]:
        """(x, y, size, angle) at frame ``t``."""
        x, y = self.start_pos
        size, angle = self.size, self.angle0
        if self.action == "translate_right":
            x = x + self.speed * t
        elif self.action == "translate_up":
            y = y - self.speed * t
        elif self.action == "grow_shrink":
            size = size + self.speed * t
        else:
            angle = angle + self.speed * t
        return x, y, size, angle

    def fits(self, max_frames: int) -> bool:
        for t in range(max_frames):
            x, y, size, _ = self.state(t)
            r = sprite_radius(size)
            if not (SIZE_RANGE[0] - 1e-9 <= size <= SIZE_RANGE[1] + 1e-9):
                return False
            if x - r < 0.0 or x + r > 1.0 or y - r < 0.0 or y + r > 1.0:
                return False
        return True

    def validate(self, max_frames: int) -> "SpriteSpec":
        if not self.fits(max_frames):
            raise ContractError(f"sprite leaves the frame or size range within {max_frames} frames")
        return self


# ---------------------------------------------------------------------------
# Rasterisation
# ---------------------------------------------------------------------------


def sprite_radius(size: float) -> float:
    """Circumradius in frame units; ``size`` is read as radius, not diameter."""
    return size


def _inside(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Membership mask in sprite-local coordinates (already rotated)."""
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "square":
        h = r / math.sqrt(2.0)
        return (np.abs(u) <= h) & (np.abs(v) <= h)
    if shape == "triangle":
        return _star_or_polygon(u, v, [r] * 3, 3)
    return _star_or_polygon(u, v, [r, 0.45 * r] * 5, 10)


def _star_or_polygon(u, v, radii, n):
    # polygon with vertices at angles -pi/2 + 2 pi k / n, tested by even-odd rule
    ang = -math.pi / 2 + 2 * math.pi * np.arange(n) / n
    px = np.array(radii) * np.cos(ang)
    py = np.array(radii) * np.sin(ang)
    inside = np.zeros(u.shape, dtype=bool)
    j = n - 1
    for i in range(n):
        xi, yi, xj, yj = px[i], py[i], px[j], py[j]
        crosses = (yi > v) != (yj > v)
        x_at = (xj - xi) * (v - yi) / (yj - yi + 1e-300) + xi
        inside ^= crosses & (u < x_at)
        j = i
    return inside


def _rgb(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue, sat, val), dtype=np.float64)


def quantize(frame01: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` colours to 8-bit codes."""
    return np.clip(np.floor(frame01 * 255.0 + 0.5), 0, 255).astype(np.uint8)


def codes_to_pixels(codes: np.ndarray) -> np.ndarray:
    """8-bit codes to float32 pixels in ``[-1, 1]``."""
    return (codes.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def pixels_to_codes(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def render_frame(spec: SpriteSpec, t: int, frame_size: int = 32) -> np.ndarray:
    """Render frame ``t`` as a ``3 x H x W`` float32 array in ``[-1, 1]``.

    Pixels are 4x4 supersampled and quantised to 8 bits, so writing the
    frame to PNG and reading it back is lossless.
    """
    if t < 0:
        raise ContractError("t must be >= 0")
    n = frame_size * SUPERSAMPLE
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    x, y, size, angle = spec.state(t)
    r = sprite_radius(size)
    dx, dy = xx - x, yy - y
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    body = _inside(spec.shape, u, v, r)
    # small marker so rotation is visible for every shape
    mu_, mv_ = u - 0.0, v + 0.45 * r
    marker = body & (mu_ * mu_ + mv_ * mv_ <= (0.18 * r) ** 2)

    def coverage(mask):
        return mask.reshape(frame_size, SUPERSAMPLE, frame_size, SUPERSAMPLE).mean(axis=(1, 3))

    a_body = coverage(body & ~marker)[None]
    a_mark = coverage(marker)[None]
    fg = _rgb(spec.hue, 0.85, 0.95)[:, None, None]
    bg = _rgb(spec.background_hue, 0.35, 0.35)[:, None, None]
    mk = _rgb(spec.hue, 0.85, 0.25)[:, None, None]
    img = bg * (1.0 - a_body - a_mark) + fg * a_body + mk * a_mark
    return codes_to_pixels(quantize(img))


def render_video(spec: SpriteSpec, num_frames: int, frame_size: int = 32) -> np.ndarray:
    return np.stack([render_frame(spec, t, frame_size) for t in range(num_frames)])


# ---------------------------------------------------------------------------
# Spec sampling
# ---------------------------------------------------------------------------

_COLOR_ANCHORS = (0.0, 0.25, 0.5, 0.75)


def round_robin_cell(k: int) -> tuple[int, int, int]:
    """(shape index, action index, colour index) of the k-th video."""
    return k % len(SHAPES), (k // len(SHAPES)) % len(ACTIONS), (k // (len(SHAPES) * len(ACTIONS))) % NUM_COLORS


def sample_spec(rng: RandomSource, shape_idx: int, action_idx: int, color_idx: int, max_frames: int) -> SpriteSpec:
    """Rejection-sample motion and placement until the sprite stays in frame."""
    g = rng.generator
    action = ACTIONS[action_idx]
    for _ in range(10_000):
        hue = (_COLOR_ANCHORS[color_idx] + g.uniform(-0.03, 0.03)) % 1.0
        bg = (_COLOR_ANCHORS[color_idx] + 0.5 + g.uniform(-0.05, 0.05)) % 1.0
        size = g.uniform(*SIZE_RANGE)
        if action in ("translate_right", "translate_up"):
            speed = g.uniform(1.5, 3.0) / 64.0
        elif action == "grow_shrink":
            speed = g.uniform(0.010, 0.0175) * (1 if g.uniform() < 0.5 else -1)
        else:
            speed = g.uniform(0.25, 0.5) * (1 if g.uniform() < 0.5 else -1)
        pos = (g.uniform(0.0, 1.0), g.uniform(0.0, 1.0))
        angle0 = g.uniform(0.0, 2 * math.pi)
        try:
            spec = SpriteSpec(SHAPES[shape_idx], float(hue), float(size), action, float(speed),
                              (float(pos[0]), float(pos[1])), float(bg), color_idx, float(angle0))
        except ContractError:
            continue
        if spec.fits(max_frames):
            return spec
    raise RuntimeError("could not sample an in-frame sprite")  # pragma: no cover


def make_specs(num_videos: int, frames_per_video: int, seed: int) -> list[SpriteSpec]:
    root = RandomSource(seed)
    specs = []
    for k in range(num_videos):
        si, ai, ci = round_robin_cell(k)
        specs.append(sample_spec(root.spawn(k), si, ai, ci, frames_per_video))
    return specs


# ---------------------------------------------------------------------------
# In-memory video containers
# ---------------------------------------------------------------------------


@dataclass
class VideoTensor:
    frames: np.ndarray  # T x C x H x W, float32 in [-1, 1]
    labels: tuple[int, int] | None = None  # (identity_id, action_id)

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[1] != 3:
            raise ContractError(f"VideoTensor must be T x 3 x H x W with T >= 1, got {f.shape}")
        if not np.isfinite(f).all() or f.min() < -1.0 or f.max() > 1.0:
            raise ContractError("VideoTensor pixels must be finite and in [-1, 1]")
        self.frames = f

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class DatasetEntry:
    path: str
    num_frames: int
    identity_id: int
    action_id: int
    is_image: bool = False


@dataclass
class DatasetManifest:
    version: int
    videos: list[DatasetEntry]
    frame_size: tuple[int, int]
    seed: int
    root: Path | None = field(default=None, compare=False)

    def to_json(self) -> str:
        d = {
            "version": self.version,
            "videos": [asdict(v) for v in self.videos],
            "frame_size": list(self.frame_size),
            "seed": self.seed,
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str, root: Path | None = None) -> "DatasetManifest":
        d = json.loads(text)
        videos = [DatasetEntry(**v) for v in d["videos"]]
        for v in videos:
            if v.is_image and v.num_frames != 1:
                raise ContractError(f"image entry {v.path} has {v.num_frames} frames")
        return cls(int(d["version"]), videos, tuple(d["frame_size"]), int(d["seed"]), root)

    def write(self) -> None:
        assert self.root is not None
        (self.root / "manifest.json").write_text(self.to_json())

    @property
    def num_frames_total(self) -> int:
        return sum(v.num_frames for v in self.videos)

    def video_entries(self) -> list[DatasetEntry]:
        return [v for v in self.videos if not v.is_image]

    def image_entries(self) -> list[DatasetEntry]:
        return [v for v in self.videos if v.is_image]


def frame_path(root: Path, entry_path: str, t: int) -> Path:
    return Path(root) / entry_path / f"frame_{t:04d}.png"


def _write_png(path: Path, frame: np.ndarray) -> None:
    codes = pixels_to_codes(frame).transpose(1, 2, 0)
    Image.fromarray(codes, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def build_dataset(num_videos: int, frames_per_video: int, frame_size: int, seed: int, out_dir: str | os.PathLike) -> DatasetManifest:
    """Render ``num_videos`` sprite videos to ``out_dir`` and write ``manifest.json``.

    Video ``k`` gets shape ``k % 4``, action ``(k // 4) % 4`` and colour
    ``(k // 16) % 4``, so any multiple of 16 videos is exactly balanced over the
    shape x action grid.
    """
    if num_videos < 1 or frames_per_video < 1:
        raise ContractError("num_videos and frames_per_video must be >= 1")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    specs = make_specs(num_videos, frames_per_video, seed)
    entries = []
    for k, spec in enumerate(specs):
        rel = f"v{k}"
        (root / rel).mkdir(exist_ok=True)
        for t in range(frames_per_video):
            _write_png(frame_path(root, rel, t), render_frame(spec, t, frame_size))
        entries.append(DatasetEntry(rel, frames_per_video, spec.identity_id, spec.action_id, False))
    manifest = DatasetManifest(MANIFEST_VERSION, entries, (frame_size, frame_size), int(seed), root)
    manifest.write()
    return manifest


def load_manifest(root: str | os.PathLike) -> DatasetManifest:
    root = Path(root)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text(), root)
    for v in manifest.videos:
        files = sorted((root / v.path).glob("frame_*.png"))
        if len(files) != v.num_frames:
            raise ContractError(f"{v.path}: expected {v.num_frames} frames, found {len(files)}")
    return manifest


def load_entry(manifest: DatasetManifest, entry: DatasetEntry) -> VideoTensor:
    frames = []
    for t in range(entry.num_frames):
        with Image.open(frame_path(manifest.root, entry.path, t)) as im:
            codes = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if codes.shape[:2] != tuple(manifest.frame_size):
            raise ContractError(f"{entry.path}: frame size {codes.shape[:2]} != {manifest.frame_size}")
        frames.append(codes_to_pixels(codes.transpose(2, 0, 1)))
    return VideoTensor(np.stack(frames), (entry.identity_id, entry.action_id))


@dataclass
class LoadedDataset:
    """Dataset held in memory as dense arrays."""

    videos: np.ndarray  # N x T x C x H x W
    video_labels: np.ndarray  # N x 2 (identity, action)
    images: np.ndarray  # M x C x H x W
    image_labels: np.ndarray  # M x 2

    @property
    def num_videos(self) -> int:
        return int(self.videos.shape[0])

    @property
    def num_images(self) -> int:
        return int(self.images.shape[0])

    @property
    def frame_shape(self) -> tuple[int, ...]:
        arr = self.videos if self.num_videos else self.images
        return tuple(arr.shape[-3:])

    def all_frames(self) -> tuple[np.ndarray, np.ndarray]:
        """Every frame (video frames then standalone images) with labels."""
        parts, labels = [], []
        if self.num_videos:
            n, t = self.videos.shape[:2]
            parts.append(self.videos.reshape(n * t, *self.videos.shape[2:]))
            labels.append(np.repeat(self.video_labels, t, axis=0))
        if self.num_images:
            parts.append(self.images)
            labels.append(self.image_labels)
        return np.concatenate(parts), np.concatenate(labels)


def load_dataset(root: str | os.PathLike) -> LoadedDataset:
    manifest = load_manifest(root)
    vids, vlab, imgs, ilab = [], [], [], []
    lengths = {v.num_frames for v in manifest.video_entries()}
    if len(lengths) > 1:
        raise ContractError(f"videos must share one length, found {sorted(lengths)}")
    for entry in manifest.videos:
        vt = load_entry(manifest, entry)
        if entry.is_image:
            imgs.append(vt.frames[0])
            ilab.append(vt.labels)
        else:
            vids.append(vt.frames)
            vlab.append(vt.labels)
    h, w = manifest.frame_size
    return LoadedDataset(
        np.stack(vids) if vids else np.zeros((0, 1, 3, h, w), np.float32),
        np.asarray(vlab, dtype=np.int64).reshape(-1, 2),
        np.stack(imgs) if imgs else np.zeros((0, 3, h, w), np.float32),
        np.asarray(ilab, dtype=np.int64).reshape(-1, 2),
    )


def dataset_in_memory(num_videos: int, frames_per_video: int, frame_size: int, seed: int) -> LoadedDataset:
    """Same content as :func:`build_dataset` without touching disk."""
    specs = make_specs(num_videos, frames_per_video, seed)
    videos = np.stack([render_video(s, frames_per_video, frame_size) for s in specs])
    labels = np.array([(s.identity_id, s.action_id) for s in specs], dtype=np.int64)
    return LoadedDataset(videos, labels, np.zeros((0, 3, frame_size, frame_size), np.float32),
                         np.zeros((0, 2), np.int64))


def disintegrate(manifest: DatasetManifest, fraction: float, rng: RandomSource) -> DatasetManifest:
    """Split a random ``fraction`` of the videos into single-frame image entries.

    Frame files are moved on disk into ``v<k>_f<t>/frame_0000.png``; the
    manifest is rewritten. Total frame count is preserved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("fraction must be in [0, 1]")
    videos = manifest.video_entries()
    n_split = int(round(fraction * len(videos)))
    if n_split == 0:
        return manifest
    chosen = {videos[i].path for i in rng.permutation(len(videos))[:n_split]}
    root = manifest.root
    new_entries: list[DatasetEntry] = []
    for entry in manifest.videos:
        if entry.path not in chosen:
            new_entries.append(entry)
            continue
        for t in range(entry.num_frames):
            rel = f"{entry.path}_f{t}"
            (root / rel).mkdir(exist_ok=True)
            os.replace(frame_path(root, entry.path, t), frame_path(root, rel, 0))
            new_entries.append(DatasetEntry(rel, 1, entry.identity_id, entry.action_id, True))
        shutil.rmtree(root / entry.path)
    out = DatasetManifest(manifest.version, new_entries, manifest.frame_size, manifest.seed, root)
    out.write()
    return out


def disintegrate_in_memory(data: LoadedDataset, fraction: float, rng: RandomSource) -> LoadedDataset:
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("fraction must be in [0, 1]")
    n = data.num_videos
    n_split = int(round(fraction * n))
    chosen = np.sort(rng.permutation(n)[:n_split])
    keep = np.setdiff1d(np.arange(n), chosen)
    t = data.videos.shape[1]
    new_imgs = data.videos[chosen].reshape(-1, *data.videos.shape[2:])
    new_lab = np.repeat(data.video_labels[chosen], t, axis=0)
    return LoadedDataset(
        data.videos[keep], data.video_labels[keep],
        np.concatenate([data.images, new_imgs]), np.concatenate([data.image_labels, new_lab]),
    )


# ---------------------------------------------------------------------------
# S_1 / S_T samplers
# ---------------------------------------------------------------------------


def sample_frame_S1(v: VideoTensor, rng: RandomSource) -> np.ndarray:
    """Uniformly random frame of ``v``."""
    return v.frames[int(rng.integers(0, v.num_frames))]


def sample_clip_ST(v: VideoTensor, clip_len: int, rng: RandomSource) -> VideoTensor:
    """Contiguous ``clip_len``-frame clip with a uniformly random start."""
    if clip_len < 1 or v.num_frames < clip_len:
        raise ContractError(f"clip_len {clip_len} invalid for a {v.num_frames}-frame video")
    start = int(rng.integers(0, v.num_frames - clip_len + 1))
    return VideoTensor(v.frames[start:start + clip_len], v.labels)


def batch_frame_indices(batch: int, num_frames: int, rng: RandomSource) -> np.ndarray:
    return rng.integers(0, num_frames, size=batch)


def batch_clip_starts(batch: int, num_frames: int, clip_len: int, rng: RandomSource) -> np.ndarray:
    if num_frames < clip_len:
        raise ContractError(f"clip_len {clip_len} exceeds video length {num_frames}")
    return rng.integers(0, num_frames - clip_len + 1, size=batch)


def take_frames(videos, indices):
    """``videos[b, indices[b]]`` for numpy arrays or torch tensors (B x T x ...)."""
    import torch

    if isinstance(videos, torch.Tensor):
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return videos[torch.arange(videos.shape[0]), idx]
    return videos[np.arange(videos.shape[0]), np.asarray(indices)]


def take_clips(videos, starts, clip_len: int):
    import torch

    offsets = np.asarray(starts)[:, None] + np.arange(clip_len)[None, :]
    if isinstance(videos, torch.Tensor):
        idx = torch.as_tensor(offsets, dtype=torch.long)
        return videos[torch.arange(videos.shape[0])[:, None], idx]
    return videos[np.arange(videos.shape[0])[:, None], offsets]


def label_histogram(entries: Iterable[DatasetEntry]) -> dict[tuple[int, int], int]:
    """Count of videos per (shape, action) cell."""
    hist: dict[tuple[int, int], int] = {}
    for e in entries:
        key = (e.identity_id // NUM_COLORS, e.action_id)
        hist[key] = hist.get(key, 0) + 1
    return hist
