"""Sample strips, summary frames and latent interpolation grids as PNG."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .config import ModelConfig
from .math_core import ContractError, RandomSource
from .rjgan import RJGAN, ImageGAN
from .rjvae import RJVAE
from .rmocogan import RMoCoGAN
from .synth_data import pixels_to_codes


def to_uint8(frames) -> np.ndarray:
    """``... x C x H x W`` in ``[-1, 1]`` to ``... x H x W x C`` bytes."""
    x = np.asarray(torch.as_tensor(frames).detach().float().clamp(-1, 1).numpy(), dtype=np.float64)
    return np.moveaxis(pixels_to_codes(x), -3, -1)


def tile_rows(rows) -> np.ndarray:
    """``R x K x C x H x W`` tiles to one ``(R*H) x (K*W) x C`` image, no padding."""
    codes = to_uint8(rows)
    R, K, H, W, C = codes.shape
    return codes.transpose(0, 2, 1, 3, 4).reshape(R * H, K * W, C)


def save_png(image: np.ndarray, path: str | os.PathLike) -> None:
    # fixed compression settings and no metadata keep bytes reproducible
    Image.fromarray(image, mode="RGB").save(os.fspath(path), format="PNG", optimize=False, compress_level=6)


@dataclass
class Samples:
    """Generated frames ``N x T x C x H x W`` and per-sample summary frames ``N x C x H x W``."""

    videos: torch.Tensor
    summaries: torch.Tensor
    codes: torch.Tensor


def latent_dim(cfg: ModelConfig) -> int:
    return cfg.d_c if cfg.kind == "rmocogan" else cfg.d_z


@torch.no_grad()
def sample_with_code(model: nn.Module, cfg: ModelConfig, code: torch.Tensor, rng: RandomSource,
                     T: int | None = None) -> Samples:
    """Videos for given summary codes (``mu``, ``z_0`` or ``z_C``); the rest is drawn from ``rng``."""
    model.eval()
    T = T or cfg.T
    B = code.shape[0]
    if isinstance(model, RJVAE):
        videos = model.generate(T, rng, batch=B, mu=code)[0]
        summaries = model.summary_frame(code)
    elif isinstance(model, RJGAN):
        videos = model.generate(B, rng, T, mu=code).video
        summaries = model.summary_frame(code)
    elif isinstance(model, RMoCoGAN):
        videos = model.generate(B, rng, T, z_c=code)[0]
        summaries = model.content_frame(code)
    elif isinstance(model, ImageGAN):
        summaries = model.summary_frame(code)
        videos = summaries.unsqueeze(1)
    else:
        raise ContractError(f"cannot sample from {type(model).__name__}")
    return Samples(videos, summaries, code)


def sample_codes(cfg: ModelConfig, batch: int, rng: RandomSource) -> torch.Tensor:
    return rng.normal((batch, latent_dim(cfg)), scale=cfg.sigma_mu)


def draw_samples(model: nn.Module, cfg: ModelConfig, num: int, seed: int) -> Samples:
    root = RandomSource(seed)
    return sample_with_code(model, cfg, sample_codes(cfg, num, root.spawn("codes")), root.spawn("motion"))


def sample_grid(samples: Samples, summary_frames: bool = False) -> np.ndarray:
    """One horizontal strip per video; with ``summary_frames`` the summary tile comes first."""
    rows = samples.videos
    if summary_frames:
        rows = torch.cat([samples.summaries.unsqueeze(1), rows], 1)
    return tile_rows(rows)


def interpolation_codes(mu0: torch.Tensor, mu1: torch.Tensor, steps: int) -> torch.Tensor:
    if steps < 2:
        raise ContractError("interpolation needs at least 2 steps")
    if mu0.shape != mu1.shape or mu0.dim() != 1:
        raise ContractError("endpoints must be two vectors of the same length")
    lam = torch.linspace(0.0, 1.0, steps, dtype=mu0.dtype)
    out = (1 - lam)[:, None] * mu0 + lam[:, None] * mu1
    out[0], out[-1] = mu0, mu1  # endpoints exactly, whatever the rounding of (1 - lam) * mu
    return out


@torch.no_grad()
def interpolation_rows(model: nn.Module, cfg: ModelConfig, mu0: torch.Tensor, mu1: torch.Tensor, steps: int,
                       seed: int) -> torch.Tensor:
    """``steps x (T+1)`` tiles: summary frame then video for each ``mu_lambda``.

    Every row reuses the motion stream of ``seed``, so row ``k`` equals
    sampling at ``mu_lambda_k`` with that seed.
    """
    rows = []
    for code in interpolation_codes(mu0, mu1, steps):
        s = sample_with_code(model, cfg, code[None], RandomSource(seed).spawn("motion"))
        rows.append(torch.cat([s.summaries.unsqueeze(1), s.videos], 1)[0])
    return torch.stack(rows)


def endpoint_from_seed(cfg: ModelConfig, seed: int) -> torch.Tensor:
    return sample_codes(cfg, 1, RandomSource(seed).spawn("codes"))[0]
