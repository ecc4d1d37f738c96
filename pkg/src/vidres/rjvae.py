"""Residual Joint VAE: summary vector plus recurrent residuals, with its exact ELBO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .math_core import (
    DiagonalGaussian,
    NumericalError,
    RandomSource,
    gaussian_kl,
    gaussian_log_density,
    reparam_sample,
    torch_seeded,
)
from .nets import FrameEncoder, ImageGenerator


@dataclass
class LatentPath:
    """Summary vector ``mu`` (``... x d``) and residuals ``deltas`` (``... x T x d``)."""

    mu: torch.Tensor
    deltas: torch.Tensor

    @property
    def frame_codes(self) -> torch.Tensor:
        return self.mu.unsqueeze(-2) + self.deltas

    @property
    def num_frames(self) -> int:
        return int(self.deltas.shape[-2])


@dataclass
class RecurrentState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=torch.float32) -> "RecurrentState":
        return cls(torch.zeros(batch, size, dtype=dtype), torch.zeros(batch, size, dtype=dtype))


@dataclass
class ELBOTerms:
    """Per-video ELBO pieces, averaged over posterior samples.

    ``sample_totals`` (``S x B``) holds the per-sample estimates so callers can
    form standard errors.
    """

    total: torch.Tensor
    recon: torch.Tensor
    kl_delta: torch.Tensor
    kl_mu: torch.Tensor
    sample_totals: torch.Tensor


def _split_gaussian(out: torch.Tensor) -> DiagonalGaussian:
    mean, log_var = out.chunk(2, dim=-1)
    return DiagonalGaussian(mean, log_var)


class RJVAE(nn.Module):
    """Generative model ``p(mu) prod_t p(delta_t | delta_<t, mu) N(x_t | G_I(mu + delta_t), I)``
    with inference model ``q(mu | x_1:T) prod_t q(delta_t | mu, x_t)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h = cfg.d_z, cfg.rnn_hidden
        self.decoder = ImageGenerator(d, cfg.frame_size, cfg.width, act="silu")
        self.prior = nn.ModuleDict({
            "cell": nn.LSTMCell(2 * d, h),
            "head": nn.Linear(h, 2 * d),
        })
        self.mu_encoder = nn.ModuleDict({
            "rnn": nn.LSTM(cfg.phi_dim, h, batch_first=True, bidirectional=True),
            "head": nn.Linear(2 * h, 2 * d),
        })
        self.delta_encoder = nn.ModuleDict({
            "cnn": FrameEncoder(cfg.phi_dim, cfg.frame_size, cfg.width),
            "head": nn.Sequential(nn.Linear(cfg.phi_dim + d, h), nn.SiLU(), nn.Linear(h, 2 * d)),
        })

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "RJVAE":
        with torch_seeded(seed):
            return cls(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.project.weight.dtype

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {"decoder": self.decoder, "prior": self.prior, "mu_encoder": self.mu_encoder,
                "delta_encoder": self.delta_encoder}

    # -- generative side -------------------------------------------------

    def prior_mu(self, batch_shape=()) -> DiagonalGaussian:
        return DiagonalGaussian.standard(self.cfg.d_z, self.cfg.sigma_mu, self.dtype, batch_shape)

    def initial_state(self, batch: int) -> RecurrentState:
        return RecurrentState.zeros(batch, self.cfg.rnn_hidden, self.dtype)

    def prior_delta_step(self, mu: torch.Tensor, delta_prev: torch.Tensor,
                         state: RecurrentState) -> tuple[DiagonalGaussian, RecurrentState]:
        """One LSTM update giving ``p(delta_t | delta_<t, mu)``; ``mu``/``delta_prev`` are ``B x d``."""
        if not (torch.isfinite(state.hidden).all() and torch.isfinite(state.cell).all()):
            raise NumericalError("prior LSTM state is not finite")
        h, c = self.prior["cell"](torch.cat([mu, delta_prev], -1), (state.hidden, state.cell))
        return _split_gaussian(self.prior["head"](h)), RecurrentState(h, c)

    def decode_frame(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def summary_frame(self, mu: torch.Tensor) -> torch.Tensor:
        return self.decode_frame(mu)

    def decode_path(self, path: LatentPath) -> torch.Tensor:
        return self.decode_frame(path.frame_codes)

    def sample_path(self, T: int, rng: RandomSource, batch: int = 1, mu: torch.Tensor | None = None) -> LatentPath:
        if T < 1:
            raise ValueError("T must be >= 1")
        d = self.cfg.d_z
        if mu is None:
            mu = reparam_sample(self.prior_mu((batch,)), rng.normal((batch, d), self.dtype))
        batch = mu.shape[0]
        state = self.initial_state(batch)
        delta = torch.zeros(batch, d, dtype=self.dtype)
        deltas = []
        for _ in range(T):
            p, state = self.prior_delta_step(mu, delta, state)
            delta = reparam_sample(p, rng.normal((batch, d), self.dtype))
            deltas.append(delta)
        return LatentPath(mu, torch.stack(deltas, 1))

    @torch.no_grad()
    def generate(self, T: int, rng: RandomSource, batch: int = 1,
                 mu: torch.Tensor | None = None) -> tuple[torch.Tensor, LatentPath]:
        """Ancestral sample; frames are the likelihood means ``G_I(mu + delta_t)`` (``B x T x C x H x W``)."""
        path = self.sample_path(T, rng, batch, mu)
        return self.decode_path(path), path

    # -- inference side --------------------------------------------------

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        return self.delta_encoder["cnn"](frames)

    def infer_mu_from_features(self, phi: torch.Tensor) -> DiagonalGaussian:
        _, (h_n, _) = self.mu_encoder["rnn"](phi)
        # h_n: (2, B, h) -> forward and backward final states, concatenated
        h = torch.cat([h_n[0], h_n[1]], -1)
        return _split_gaussian(self.mu_encoder["head"](h))

    def infer_mu(self, video: torch.Tensor) -> DiagonalGaussian:
        """``q(mu | x_1:T)`` for ``B x T x C x H x W`` (or a single ``T x C x H x W``) video."""
        single = video.dim() == 4
        v = video.unsqueeze(0) if single else video
        q = self.infer_mu_from_features(self.encode_frames(v))
        return DiagonalGaussian(q.mean[0], q.log_var[0]) if single else q

    def infer_delta_from_features(self, phi_t: torch.Tensor, mu: torch.Tensor) -> DiagonalGaussian:
        return _split_gaussian(self.delta_encoder["head"](torch.cat([phi_t, mu], -1)))

    def infer_delta(self, mu: torch.Tensor, frame: torch.Tensor) -> DiagonalGaussian:
        """``q(delta_t | mu, x_t)`` from one frame (``C x H x W`` or ``B x C x H x W``)."""
        return self.infer_delta_from_features(self.encode_frames(frame), mu)

    # -- objective -------------------------------------------------------

    def draw_noise(self, video: torch.Tensor, rng: RandomSource, num_samples: int) -> tuple[torch.Tensor, torch.Tensor]:
        B, T = video.shape[:2]
        d = self.cfg.d_z
        return rng.normal((num_samples, B, d), self.dtype), rng.normal((num_samples, B, T, d), self.dtype)

    def elbo(self, video: torch.Tensor, rng: RandomSource, num_samples: int | None = None) -> ELBOTerms:
        num_samples = num_samples or self.cfg.elbo_samples
        eps_mu, eps_delta = self.draw_noise(video, rng, num_samples)
        return self.elbo_with_noise(video, eps_mu, eps_delta)

    def elbo_with_noise(self, video: torch.Tensor, eps_mu: torch.Tensor, eps_delta: torch.Tensor) -> ELBOTerms:
        """Reparameterised ELBO with frozen noise.

        ``video`` is ``B x T x C x H x W``; ``eps_mu`` is ``S x B x d`` and
        ``eps_delta`` is ``S x B x T x d``. KL terms are closed form; the
        delta prior is conditioned on the sampled ``mu`` and the sampled
        previous residual.
        """
        B, T = video.shape[:2]
        S = eps_mu.shape[0]
        d = self.cfg.d_z
        phi = self.encode_frames(video)  # B x T x phi
        q_mu = self.infer_mu_from_features(phi)
        kl_mu = gaussian_kl(q_mu, self.prior_mu((B,)))  # B

        def tile(x):
            return x.unsqueeze(0).expand(S, *x.shape).reshape(S * B, *x.shape[1:])

        mu = reparam_sample(DiagonalGaussian(tile(q_mu.mean), tile(q_mu.log_var)), eps_mu.reshape(S * B, d))
        phi_s = tile(phi)
        target = tile(video)
        state = self.initial_state(S * B)
        delta_prev = torch.zeros(S * B, d, dtype=self.dtype)
        kl_delta = torch.zeros(S * B, dtype=self.dtype)
        recon = torch.zeros(S * B, dtype=self.dtype)
        eps_d = eps_delta.reshape(S * B, T, d)
        for t in range(T):
            p_t, state = self.prior_delta_step(mu, delta_prev, state)
            q_t = self.infer_delta_from_features(phi_s[:, t], mu)
            delta = reparam_sample(q_t, eps_d[:, t])
            kl_delta = kl_delta + gaussian_kl(q_t, p_t)
            recon = recon + gaussian_log_density(target[:, t], self.decode_frame(mu + delta))
            delta_prev = delta
        recon = recon.view(S, B)
        kl_delta = kl_delta.view(S, B)
        sample_totals = recon - kl_delta - kl_mu.unsqueeze(0)
        terms = ELBOTerms(sample_totals.mean(0), recon.mean(0), kl_delta.mean(0), kl_mu, sample_totals)
        for name in ("recon", "kl_delta", "kl_mu"):
            if not torch.isfinite(getattr(terms, name)).all():
                raise NumericalError(f"ELBO component {name} is not finite: {getattr(terms, name)}")
        return terms

    @torch.no_grad()
    def reconstruct(self, video: torch.Tensor) -> torch.Tensor:
        """Decode posterior means (``B x T x C x H x W``)."""
        phi = self.encode_frames(video)
        mu = self.infer_mu_from_features(phi).mean
        deltas = torch.stack([self.infer_delta_from_features(phi[:, t], mu).mean
                              for t in range(video.shape[1])], 1)
        return self.decode_path(LatentPath(mu, deltas))


class RJVAETrainer:
    """Adam ascent on the ELBO; the only writer of the model's parameters."""

    def __init__(self, model: RJVAE, cfg: ModelConfig | None = None):
        self.model = model
        self.cfg = cfg or model.cfg
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.cfg.lr,
                                          betas=(self.cfg.beta1, self.cfg.beta2),
                                          weight_decay=self.cfg.weight_decay)
        self.step_count = 0

    def modules(self) -> dict[str, nn.Module]:
        return self.model.parameter_groups()

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"vae": self.optimizer}

    def train_step(self, batch: np.ndarray | torch.Tensor, rng: RandomSource) -> dict[str, float]:
        video = torch.as_tensor(batch, dtype=self.model.dtype)
        self.model.train()
        terms = self.model.elbo(video, rng)
        loss = -terms.total.mean()
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        bad = [n for n, p in self.model.named_parameters()
               if p.grad is not None and not torch.isfinite(p.grad).all()]
        if bad:
            raise NumericalError(f"non-finite gradients in {bad[:5]} (loss={float(loss)})")
        self.optimizer.step()
        self.step_count += 1
        with torch.no_grad():
            return {"loss": loss.item(), "elbo": terms.total.mean().item(), "recon": terms.recon.mean().item(),
                    "kl_delta": terms.kl_delta.mean().item(), "kl_mu": terms.kl_mu.mean().item()}

    def sample_batch(self, videos: np.ndarray, rng: RandomSource) -> np.ndarray:
        idx = rng.integers(0, videos.shape[0], size=min(self.cfg.batch_size, videos.shape[0]))
        return videos[idx]


def reconstruction_mse(model: RJVAE, videos: np.ndarray | torch.Tensor) -> float:
    v = torch.as_tensor(videos, dtype=model.dtype)
    model.eval()
    out = model.reconstruct(v)
    return float(((out - v) ** 2).mean())


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")

