"""Residual MoCoGAN: per-frame content ``z_C + delta_C(z_C, z_M^t)`` beside a GRU motion path."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .math_core import RandomSource, torch_seeded
from .nets import ImageDiscriminator, ImageGenerator, VideoDiscriminator
from .rjgan import _adam, _check_finite, nll_fake, nll_real
from .synth_data import batch_clip_starts, batch_frame_indices, take_clips, take_frames

MOCOGAN_TERMS = ("image_real", "image_fake", "video_real", "video_fake")


def mocogan_terms(d_i_real, d_i_fake, d_v_real, d_v_fake) -> dict[str, torch.Tensor]:
    return {
        "image_real": nll_real(d_i_real),
        "image_fake": nll_fake(d_i_fake),
        "video_real": nll_real(d_v_real),
        "video_fake": nll_fake(d_v_fake),
    }


class ResidualContentNet(nn.Module):
    """NN_delta: two hidden layers of affine + BatchNorm1d + ReLU, then an affine output."""

    def __init__(self, d_c: int, d_m: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_c + d_m, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, d_c),
        )

    def forward(self, z_c: torch.Tensor, z_m: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z_c, z_m], -1)
        lead = x.shape[:-1]
        return self.net(x.reshape(-1, x.shape[-1])).view(*lead, -1)


class RMoCoGAN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dc, dm = cfg.d_c, cfg.d_m
        self.g_image = ImageGenerator(dc + dm, cfg.frame_size, cfg.width)
        self.r_motion = nn.ModuleDict({"cell": nn.GRUCell(dm, dm), "head": nn.Linear(dm, dm)})
        self.nn_delta = ResidualContentNet(dc, dm, cfg.nn_delta_hidden)
        self.d_image = ImageDiscriminator(cfg.frame_size, cfg.disc_width)
        self.d_video = VideoDiscriminator(cfg.frame_size, cfg.clip_len, cfg.disc_width)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "RMoCoGAN":
        with torch_seeded(seed):
            return cls(cfg)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {"g_image": self.g_image, "r_motion": self.r_motion, "nn_delta": self.nn_delta,
                "d_image": self.d_image, "d_video": self.d_video}

    def generator_parameters(self):
        return [p for m in (self.g_image, self.r_motion, self.nn_delta) for p in m.parameters()]

    def discriminator_parameters(self):
        return list(self.d_image.parameters()) + list(self.d_video.parameters())

    def sample_content(self, batch: int, rng: RandomSource) -> torch.Tensor:
        return rng.normal((batch, self.cfg.d_c), scale=self.cfg.sigma_mu)

    def sample_motion_noise(self, batch: int, T: int, rng: RandomSource) -> torch.Tensor:
        return rng.normal((batch, T, self.cfg.d_m), scale=self.cfg.sigma_eps)

    def motion_path(self, noise: torch.Tensor) -> torch.Tensor:
        """``z_M^t`` from ``eps_1..t`` alone (never sees the content code); ``B x T x d_m``."""
        B, T = noise.shape[:2]
        h = torch.zeros(B, self.cfg.d_m, dtype=noise.dtype)
        out = []
        for t in range(T):
            h = self.r_motion["cell"](noise[:, t], h)
            out.append(self.r_motion["head"](h))
        return torch.stack(out, 1)

    def residual_content(self, z_c: torch.Tensor, z_m_t: torch.Tensor) -> torch.Tensor:
        return self.nn_delta(z_c, z_m_t)

    def residual_path(self, z_c: torch.Tensor, z_m: torch.Tensor) -> torch.Tensor:
        T = z_m.shape[1]
        return self.nn_delta(z_c.unsqueeze(1).expand(-1, T, -1), z_m)

    def gen_video(self, z_c: torch.Tensor, z_m: torch.Tensor, zero_residual: bool = False) -> torch.Tensor:
        """Frames ``G_I([z_C + delta_C^t, z_M^t])``; ``zero_residual`` gives the plain MoCoGAN path."""
        T = z_m.shape[1]
        content = z_c.unsqueeze(1).expand(-1, T, -1)
        if not zero_residual:
            content = content + self.residual_path(z_c, z_m)
        return self.g_image(torch.cat([content, z_m], -1))

    def generate(self, batch: int, rng: RandomSource, T: int | None = None,
                 z_c: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        T = T or self.cfg.T
        z_c = self.sample_content(batch, rng) if z_c is None else z_c
        z_m = self.motion_path(self.sample_motion_noise(z_c.shape[0], T, rng))
        return self.gen_video(z_c, z_m), z_c, z_m

    def content_frame(self, z_c: torch.Tensor) -> torch.Tensor:
        """Frame for a content code with zero residual and zero motion code."""
        return self.g_image(torch.cat([z_c, torch.zeros(*z_c.shape[:-1], self.cfg.d_m)], -1))


class RMoCoGANTrainer:
    def __init__(self, model: RMoCoGAN, cfg: ModelConfig | None = None):
        self.model = model
        self.cfg = cfg or model.cfg
        self.opt_g = _adam(model.generator_parameters(), self.cfg)
        self.opt_d = _adam(model.discriminator_parameters(), self.cfg)
        self.step_count = 0

    def modules(self) -> dict[str, nn.Module]:
        return self.model.parameter_groups()

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"g": self.opt_g, "d": self.opt_d}

    def sample_batch(self, videos: np.ndarray, rng: RandomSource) -> np.ndarray:
        return videos[rng.integers(0, videos.shape[0], size=self.cfg.batch_size)]

    def train_step(self, videos, rng: RandomSource) -> dict[str, float]:
        m, cfg = self.model, self.cfg
        m.train()
        real = torch.as_tensor(videos, dtype=torch.float32)
        B, T = real.shape[:2]
        L = cfg.clip_len
        fake, _, _ = m.generate(B, rng, T)
        real_frames = take_frames(real, batch_frame_indices(B, T, rng))
        fake_frames = take_frames(fake, batch_frame_indices(B, T, rng))
        real_clips = take_clips(real, batch_clip_starts(B, T, L, rng), L)
        fake_clips = take_clips(fake, batch_clip_starts(B, T, L, rng), L)

        terms = mocogan_terms(m.d_image(real_frames), m.d_image(fake_frames.detach()),
                              m.d_video(real_clips), m.d_video(fake_clips.detach()))
        d_loss = sum(terms.values())
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        g_loss = nll_real(m.d_image(fake_frames)) + nll_real(m.d_video(fake_clips))
        self.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        self.opt_g.step()
        self.opt_d.zero_grad(set_to_none=True)
        self.step_count += 1
        report = {k: v.item() for k, v in terms.items()}
        report["d_loss"] = d_loss.item()
        report["g_loss"] = g_loss.item()
        _check_finite(report, f"RMoCoGAN step {self.step_count}")
        return report


@torch.no_grad()
def disentangle_probe(model: RMoCoGAN, identity_probe, action_probe, num_content: int, num_motion: int,
                      rng: RandomSource) -> tuple[torch.Tensor, dict]:
    """Fix each content code, resample the motion path ``num_motion`` times, and label the videos.

    Returns the ``num_content x num_motion x T x C x H x W`` grid and a report
    whose ``entries`` follow ``{content_id, motion_id, identity_label, action_label}``.
    The identity label of a video is the majority image-probe vote over its frames.
    """
    model.eval()
    T = model.cfg.T
    z_c = model.sample_content(num_content, rng)
    noise = model.sample_motion_noise(num_content * num_motion, T, rng)
    z_m = model.motion_path(noise)
    z_c_rep = z_c.repeat_interleave(num_motion, 0)
    videos = model.gen_video(z_c_rep, z_m)
    flat = videos.reshape(-1, *videos.shape[2:])
    frame_ids = identity_probe.predict(flat).reshape(num_content * num_motion, T)
    identity = np.array([np.bincount(row, minlength=identity_probe.num_classes).argmax() for row in frame_ids])
    action = action_probe.predict(videos[:, : action_probe.clip_len])
    entries = []
    consistent = 0
    for c in range(num_content):
        ids = identity[c * num_motion:(c + 1) * num_motion]
        consistent += int(len(set(ids.tolist())) == 1)
        for k in range(num_motion):
            entries.append({"content_id": c, "motion_id": k, "identity_label": int(ids[k]),
                            "action_label": int(action[c * num_motion + k])})
    report = {
        "entries": entries,
        "num_content": num_content,
        "num_motion": num_motion,
        "identity_consistency": consistent / num_content,
    }
    grid = videos.view(num_content, num_motion, *videos.shape[1:])
    return grid, report


@torch.no_grad()
def motion_replay_agreement(model: RMoCoGAN, action_probe, num_pairs: int, rng: RandomSource) -> float:
    """Fraction of pairs (same motion path, two content codes) given the same action label."""
    model.eval()
    T = model.cfg.T
    z_m = model.motion_path(model.sample_motion_noise(num_pairs, T, rng))
    a = model.gen_video(model.sample_content(num_pairs, rng), z_m)
    b = model.gen_video(model.sample_content(num_pairs, rng), z_m)
    la = action_probe.predict(a[:, : action_probe.clip_len])
    lb = action_probe.predict(b[:, : action_probe.clip_len])
    return float(np.mean(la == lb))
