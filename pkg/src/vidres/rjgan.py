"""Residual Joint GAN: frames decoded from ``mu + delta_t`` with a GRU residual generator.

Also holds the chain ablation (``z_t = z_{t-1} + delta_t``), the image-only
baseline GAN and image pre-training of ``G_I``/``D_I``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .math_core import NumericalError, RandomSource, torch_seeded
from .nets import ImageDiscriminator, ImageGenerator, VideoDiscriminator
from .rjvae import LatentPath
from .synth_data import batch_clip_starts, batch_frame_indices, take_clips, take_frames

PROB_EPS = 1e-7
_NLL_MIN = -math.log1p(-PROB_EPS)
_NLL_MAX = -math.log(PROB_EPS)

TRAIN_MODES = ("video_only", "mixed", "chain")
EQ1_TERMS = ("image_real", "image_fake", "video_real", "video_fake", "image_real_repeat", "summary_fake")


def nll_real(logits: torch.Tensor) -> torch.Tensor:
    """Mean ``-log D`` with ``D = sigmoid(logits)`` clamped to ``[1e-7, 1 - 1e-7]``."""
    return (-F.logsigmoid(logits)).clamp(_NLL_MIN, _NLL_MAX).mean()


def nll_fake(logits: torch.Tensor) -> torch.Tensor:
    """Mean ``-log(1 - D)`` under the same clamp."""
    return (-F.logsigmoid(-logits)).clamp(_NLL_MIN, _NLL_MAX).mean()


def eq1_terms(d_i_real, d_i_fake, d_v_real, d_v_fake, d_i_summary) -> dict[str, torch.Tensor]:
    """The six expectations of the joint image/video objective from discriminator logits.

    The real-image term appears twice, as in the published objective.
    ``d_i_summary`` may be ``None`` when the summary-frame term is skipped.
    """
    image_real = nll_real(d_i_real)
    terms = {
        "image_real": image_real,
        "image_fake": nll_fake(d_i_fake),
        "video_real": nll_real(d_v_real),
        "video_fake": nll_fake(d_v_fake),
        "image_real_repeat": image_real,
    }
    if d_i_summary is not None:
        terms["summary_fake"] = nll_fake(d_i_summary)
    return terms


def discriminator_loss(terms: dict[str, torch.Tensor], deduplicate: bool = False) -> torch.Tensor:
    keys = [k for k in EQ1_TERMS if k in terms and not (deduplicate and k == "image_real_repeat")]
    return sum(terms[k] for k in keys)


def generator_loss(d_i_fake, d_v_fake, d_i_summary) -> torch.Tensor:
    """Non-saturating generator loss: ``-log D`` on every generated input."""
    loss = nll_real(d_i_fake) + nll_real(d_v_fake)
    if d_i_summary is not None:
        loss = loss + nll_real(d_i_summary)
    return loss


@dataclass
class GeneratedVideo:
    video: torch.Tensor  # B x T x C x H x W
    path: LatentPath
    noise: torch.Tensor  # B x T x d_eps

    @property
    def mu(self) -> torch.Tensor:
        return self.path.mu


class RJGAN(nn.Module):
    def __init__(self, cfg: ModelConfig, chain: bool | None = None):
        super().__init__()
        self.cfg = cfg
        self.chain = cfg.kind == "rjgan-chain" if chain is None else chain
        d = cfg.d_z
        self.g_image = ImageGenerator(d, cfg.frame_size, cfg.width)
        self.r_motion = nn.ModuleDict({"cell": nn.GRUCell(2 * d, d), "head": nn.Linear(d, d)})
        self.d_image = ImageDiscriminator(cfg.frame_size, cfg.disc_width)
        self.d_video = VideoDiscriminator(cfg.frame_size, cfg.clip_len, cfg.disc_width)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int, chain: bool | None = None) -> "RJGAN":
        with torch_seeded(seed):
            return cls(cfg, chain)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {"g_image": self.g_image, "r_motion": self.r_motion, "d_image": self.d_image,
                "d_video": self.d_video}

    def generator_parameters(self):
        return list(self.g_image.parameters()) + list(self.r_motion.parameters())

    def discriminator_parameters(self):
        return list(self.d_image.parameters()) + list(self.d_video.parameters())

    # -- sampling --------------------------------------------------------

    def sample_mu(self, batch: int, rng: RandomSource) -> torch.Tensor:
        return rng.normal((batch, self.cfg.d_z), scale=self.cfg.sigma_mu)

    def sample_noise(self, batch: int, T: int, rng: RandomSource) -> torch.Tensor:
        return rng.normal((batch, T, self.cfg.d_z), scale=self.cfg.sigma_eps)

    def gen_residual_seq(self, mu: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """``delta_t = R_M([mu, eps_t]; h_{t-1})`` with ``h_0 = 0``; ``B x T x d``."""
        if noise.shape[-1] != self.cfg.d_z or mu.shape[-1] != self.cfg.d_z:
            raise ValueError("mu / noise dimension does not match d_z")
        B, T = noise.shape[:2]
        h = torch.zeros(B, self.cfg.d_z, dtype=mu.dtype)
        deltas = []
        for t in range(T):
            h = self.r_motion["cell"](torch.cat([mu, noise[:, t]], -1), h)
            deltas.append(self.r_motion["head"](h))
        return torch.stack(deltas, 1)

    def summary_frame(self, mu: torch.Tensor) -> torch.Tensor:
        return self.g_image(mu)

    def gen_video(self, mu: torch.Tensor, noise: torch.Tensor) -> GeneratedVideo:
        deltas = self.gen_residual_seq(mu, noise)
        path = LatentPath(mu, deltas)
        return GeneratedVideo(self.g_image(path.frame_codes), path, noise)

    def gen_video_chain(self, z0: torch.Tensor, noise: torch.Tensor) -> GeneratedVideo:
        """Chain ablation: ``z_t = z_0 + sum_{s<=t} delta_s``.

        The returned path stores ``z_0`` as ``mu`` and the cumulative offsets
        as ``deltas`` so ``frame_codes`` are the chain codes.
        """
        increments = self.gen_residual_seq(z0, noise)
        path = LatentPath(z0, torch.cumsum(increments, 1))
        return GeneratedVideo(self.g_image(path.frame_codes), path, noise)

    def generate(self, batch: int, rng: RandomSource, T: int | None = None,
                 mu: torch.Tensor | None = None) -> GeneratedVideo:
        T = T or self.cfg.T
        mu = self.sample_mu(batch, rng) if mu is None else mu
        noise = self.sample_noise(mu.shape[0], T, rng)
        return self.gen_video_chain(mu, noise) if self.chain else self.gen_video(mu, noise)

    # -- objective -------------------------------------------------------

    def objective_terms(self, real_videos: torch.Tensor, generated: GeneratedVideo, rng: RandomSource,
                        real_images: torch.Tensor | None = None, with_summary: bool = True) -> dict[str, torch.Tensor]:
        """Discriminator-side terms for one batch (S_1 frames, S_T clips, summary frames)."""
        inputs = self.discriminator_inputs(real_videos, generated, rng, real_images, with_summary)
        logits = self.discriminator_logits(inputs)
        return eq1_terms(*logits)

    def discriminator_inputs(self, real_videos, generated: GeneratedVideo, rng: RandomSource,
                             real_images=None, with_summary: bool = True) -> dict[str, torch.Tensor | None]:
        B, T = real_videos.shape[:2]
        Bg, Tg = generated.video.shape[:2]
        L = self.cfg.clip_len
        real_frames = take_frames(real_videos, batch_frame_indices(B, T, rng))
        if real_images is not None and len(real_images):
            real_frames = torch.cat([real_frames, real_images], 0)
        fake_frames = take_frames(generated.video, batch_frame_indices(Bg, Tg, rng))
        real_clips = take_clips(real_videos, batch_clip_starts(B, T, L, rng), L)
        fake_clips = take_clips(generated.video, batch_clip_starts(Bg, Tg, L, rng), L)
        summary = self.summary_frame(generated.mu) if with_summary else None
        return {"real_frames": real_frames, "fake_frames": fake_frames, "real_clips": real_clips,
                "fake_clips": fake_clips, "summary": summary}

    def discriminator_logits(self, inputs, detach_fake: bool = False):
        def f(x):
            return x.detach() if detach_fake and x is not None else x

        summary = f(inputs["summary"])
        return (
            self.d_image(inputs["real_frames"]),
            self.d_image(f(inputs["fake_frames"])),
            self.d_video(inputs["real_clips"]),
            self.d_video(f(inputs["fake_clips"])),
            self.d_image(summary) if summary is not None else None,
        )


def _adam(params, cfg: ModelConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def _check_finite(report: dict[str, float], where: str) -> None:
    bad = {k: v for k, v in report.items() if not math.isfinite(v)}
    if bad:
        raise NumericalError(f"non-finite values in {where}: {bad}")


class RJGANTrainer:
    """Alternating updates: the discriminators (D_I, D_V) jointly, then the generator (G_I, R_M)."""

    def __init__(self, model: RJGAN, cfg: ModelConfig | None = None):
        self.model = model
        self.cfg = cfg or model.cfg
        self.opt_g = _adam(model.generator_parameters(), self.cfg)
        self.opt_d = _adam(model.discriminator_parameters(), self.cfg)
        self.step_count = 0

    def modules(self) -> dict[str, nn.Module]:
        return self.model.parameter_groups()

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"g": self.opt_g, "d": self.opt_d}

    def sample_batch(self, videos: np.ndarray, images: np.ndarray | None, rng: RandomSource, mode: str = "video_only"):
        B = self.cfg.batch_size
        vid = videos[rng.integers(0, videos.shape[0], size=B)]
        img = None
        if mode == "mixed" and images is not None and len(images):
            img = images[rng.integers(0, images.shape[0], size=B)]
        return vid, img

    def train_step(self, videos, images, rng: RandomSource, mode: str = "video_only") -> dict[str, float]:
        if mode not in TRAIN_MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if (mode == "chain") != self.model.chain:
            raise ValueError("mode 'chain' requires a chain-ablation model and vice versa")
        m, cfg = self.model, self.cfg
        m.train()
        real = torch.as_tensor(videos, dtype=torch.float32)
        real_images = torch.as_tensor(images, dtype=torch.float32) if mode == "mixed" and images is not None else None
        with_summary = self.step_count % cfg.summary_term_period == 0
        gen = m.generate(real.shape[0], rng)
        inputs = m.discriminator_inputs(real, gen, rng, real_images, with_summary)

        terms = eq1_terms(*m.discriminator_logits(inputs, detach_fake=True))
        d_loss = discriminator_loss(terms, cfg.eq1_deduplicate)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        d_i_fake = m.d_image(inputs["fake_frames"])
        d_v_fake = m.d_video(inputs["fake_clips"])
        d_i_sum = m.d_image(inputs["summary"]) if inputs["summary"] is not None else None
        g_loss = generator_loss(d_i_fake, d_v_fake, d_i_sum)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_d.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        self.opt_d.zero_grad(set_to_none=True)

        self.step_count += 1
        report = {k: terms[k].item() if k in terms else 0.0 for k in EQ1_TERMS}
        report["d_loss"] = d_loss.item()
        report["g_loss"] = g_loss.item()
        _check_finite(report, f"RJGAN step {self.step_count}")
        return report


# ---------------------------------------------------------------------------
# Image-only GAN (baseline and pre-training)
# ---------------------------------------------------------------------------


class ImageGAN(nn.Module):
    """Standard image GAN with the same G_I and D_I architectures as :class:`RJGAN`."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.g_image = ImageGenerator(cfg.d_z, cfg.frame_size, cfg.width)
        self.d_image = ImageDiscriminator(cfg.frame_size, cfg.disc_width)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "ImageGAN":
        with torch_seeded(seed):
            return cls(cfg)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {"g_image": self.g_image, "d_image": self.d_image}

    def sample_mu(self, batch: int, rng: RandomSource) -> torch.Tensor:
        return rng.normal((batch, self.cfg.d_z), scale=self.cfg.sigma_mu)

    def summary_frame(self, mu: torch.Tensor) -> torch.Tensor:
        return self.g_image(mu)


class ImageGANTrainer:
    """Trains a (G_I, D_I) pair; other modules sharing those networks are untouched."""

    def __init__(self, g_image: nn.Module, d_image: nn.Module, cfg: ModelConfig):
        self.g_image, self.d_image, self.cfg = g_image, d_image, cfg
        self.opt_g = _adam(g_image.parameters(), cfg)
        self.opt_d = _adam(d_image.parameters(), cfg)
        self.step_count = 0

    def modules(self) -> dict[str, nn.Module]:
        return {"g_image": self.g_image, "d_image": self.d_image}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"g": self.opt_g, "d": self.opt_d}

    def sample_batch(self, videos: np.ndarray | None, images: np.ndarray | None, rng: RandomSource) -> np.ndarray:
        """Standalone images when present, otherwise S_1 frames of random videos."""
        B = self.cfg.batch_size
        if images is not None and len(images):
            return images[rng.integers(0, images.shape[0], size=B)]
        vids = videos[rng.integers(0, videos.shape[0], size=B)]
        return take_frames(vids, batch_frame_indices(B, vids.shape[1], rng))

    def train_step(self, real_images, rng: RandomSource) -> dict[str, float]:
        self.g_image.train()
        self.d_image.train()
        real = torch.as_tensor(real_images, dtype=torch.float32)
        mu = rng.normal((real.shape[0], self.cfg.d_z), scale=self.cfg.sigma_mu)
        fake = self.g_image(mu)
        d_real, d_fake = self.d_image(real), self.d_image(fake.detach())
        d_loss = nll_real(d_real) + nll_fake(d_fake)
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()
        g_loss = nll_real(self.d_image(fake))
        self.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        self.opt_d.zero_grad(set_to_none=True)
        self.step_count += 1
        report = {"image_real": nll_real(d_real).item(), "image_fake": nll_fake(d_fake).item(),
                  "d_loss": d_loss.item(), "g_loss": g_loss.item()}
        _check_finite(report, f"image GAN step {self.step_count}")
        return report


def pretrain_images(model: RJGAN, images: np.ndarray, steps: int, rng: RandomSource,
                    cfg: ModelConfig | None = None) -> RJGAN:
    """Image-GAN training of ``model.g_image``/``model.d_image`` only; R_M and D_V stay bit-identical."""
    if images is None or len(images) == 0:
        raise ValueError("pretrain_images needs at least one image")
    trainer = ImageGANTrainer(model.g_image, model.d_image, cfg or model.cfg)
    for _ in range(steps):
        trainer.train_step(trainer.sample_batch(None, images, rng), rng)
    return model


def baseline_image_gan(videos: np.ndarray, cfg: ModelConfig, rng: RandomSource,
                       steps: int | None = None) -> tuple[ImageGAN, ImageGANTrainer]:
    """Image-only baseline trained on S_1-sampled frames of the training videos."""
    model = ImageGAN.build(cfg, rng.spawn("init").torch_seed())
    trainer = ImageGANTrainer(model.g_image, model.d_image, cfg)
    train_rng = rng.spawn("train")
    for _ in range(cfg.iterations if steps is None else steps):
        trainer.train_step(trainer.sample_batch(videos, None, train_rng), train_rng)
    return model, trainer
