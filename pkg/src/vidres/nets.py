"""Convolutional building blocks shared by the generative models and probes."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def _num_resamples(frame_size: int) -> int:
    n = int(round(math.log2(frame_size / 4)))
    if n < 1 or 4 * 2**n != frame_size:
        raise ValueError(f"frame_size must be 4 * 2^k with k >= 1, got {frame_size}")
    return n


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels >= 2 * g:
            return g
    return 1


class ImageGenerator(nn.Module):
    """G_I: latent code -> 3 x H x W frame in ``[-1, 1]``.

    Linear projection to a 4x4 map, stride-2 transposed convolutions up to the
    frame size, then a 3x3 convolution and tanh. GroupNorm keeps every sample
    independent of the rest of its batch.
    """

    def __init__(self, latent_dim: int, frame_size: int = 32, width: int = 32, act: str = "relu"):
        super().__init__()
        n_up = _num_resamples(frame_size)
        self.latent_dim = latent_dim
        self.frame_size = frame_size
        chans = [width * 2 ** (n_up - i) for i in range(n_up + 1)]
        self.c0 = chans[0]
        Act = nn.SiLU if act == "silu" else nn.ReLU
        self.project = nn.Linear(latent_dim, self.c0 * 16)
        layers: list[nn.Module] = [nn.GroupNorm(_groups(self.c0), self.c0), Act()]
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.GroupNorm(_groups(cout), cout), Act()]
        layers += [nn.Conv2d(chans[-1], 3, 3, 1, 1), nn.Tanh()]
        self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        h = self.project(z.reshape(-1, z.shape[-1])).view(-1, self.c0, 4, 4)
        x = self.body(h)
        return x.view(*lead, *x.shape[1:])


class FrameEncoder(nn.Module):
    """CNN mapping a frame to a flat feature vector (mirror of :class:`ImageGenerator`)."""

    def __init__(self, out_dim: int, frame_size: int = 32, width: int = 32):
        super().__init__()
        n_down = _num_resamples(frame_size)
        chans = [width * 2**i for i in range(n_down + 1)]
        layers: list[nn.Module] = [nn.Conv2d(3, chans[0], 3, 1, 1), nn.SiLU()]
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, 2, 1), nn.SiLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1] * 16, out_dim)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        lead = x.shape[:-3]
        h = self.body(x.reshape(-1, *x.shape[-3:]))
        return self.head(h.flatten(1)).view(*lead, self.out_dim)


class ImageDiscriminator(nn.Module):
    """D_I: strided 2-D convolutions, LeakyReLU and BatchNorm; returns one logit per frame.

    ``features`` exposes the penultimate layer so the same architecture can
    serve as an image probe classifier.
    """

    def __init__(self, frame_size: int = 32, width: int = 32, out_dim: int = 1, feature_dim: int | None = None,
                 pool: bool = False):
        super().__init__()
        n_down = _num_resamples(frame_size)
        chans = [3] + [width * 2**i for i in range(n_down)]
        layers: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.Conv2d(cin, cout, 4, 2, 1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
        if pool:
            layers.append(nn.AdaptiveAvgPool2d(1))
        self.body = nn.Sequential(*layers)
        flat = chans[-1] * (1 if pool else 16)
        if feature_dim is None:
            self.feature = nn.Identity()
            self.feature_dim = flat
        else:
            self.feature = nn.Sequential(nn.Linear(flat, feature_dim), nn.LeakyReLU(0.2))
            self.feature_dim = feature_dim
        self.out = nn.Linear(self.feature_dim, out_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature(self.body(x).flatten(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        o = self.out(self.features(x))
        return o.squeeze(-1) if o.shape[-1] == 1 else o


class VideoDiscriminator(nn.Module):
    """D_V: spatio-temporal 3-D convolutions over a ``B x T x C x H x W`` clip.

    Kernels are 3 frames deep with stride 1 in time so an 8-frame clip
    shrinks 8 -> 6 -> 4 -> 2 over the three layers.
    """

    def __init__(self, frame_size: int = 32, clip_len: int = 8, width: int = 32, depth: int = 3,
                 out_dim: int = 1, feature_dim: int | None = None, pool: bool = False):
        super().__init__()
        n_down = _num_resamples(frame_size)
        depth = min(depth, n_down)
        if clip_len - 2 * depth < 1:
            raise ValueError(f"clip_len {clip_len} too short for depth {depth}")
        chans = [3] + [width * 2**i for i in range(depth)]
        layers: list[nn.Module] = []
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(nn.Conv3d(cin, cout, (3, 4, 4), (1, 2, 2), (0, 1, 1), bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm3d(cout))
            layers.append(nn.LeakyReLU(0.2))
        if pool:
            layers.append(nn.AdaptiveAvgPool3d(1))
        self.body = nn.Sequential(*layers)
        spatial = frame_size // 2**depth
        flat = chans[-1] * (1 if pool else (clip_len - 2 * depth) * spatial * spatial)
        if feature_dim is None:
            self.feature = nn.Identity()
            self.feature_dim = flat
        else:
            self.feature = nn.Sequential(nn.Linear(flat, feature_dim), nn.LeakyReLU(0.2))
            self.feature_dim = feature_dim
        self.out = nn.Linear(self.feature_dim, out_dim)
        self.clip_len = clip_len

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        # B x T x C x H x W -> B x C x T x H x W
        return self.feature(self.body(clips.transpose(1, 2)).flatten(1))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        o = self.out(self.features(clips))
        return o.squeeze(-1) if o.shape[-1] == 1 else o


def zero_output_layer(disc: nn.Module) -> None:
    """Make a discriminator output logit 0 (probability 0.5) for every input."""
    with torch.no_grad():
        disc.out.weight.zero_()
        disc.out.bias.zero_()
