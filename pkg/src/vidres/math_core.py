"""Gaussian primitives, Frechet distance, seeded randomness and a finite-difference checker."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

LOG_VAR_MIN = -20.0
LOG_VAR_MAX = 20.0
LOG_2PI = math.log(2.0 * math.pi)


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite or out-of-tolerance values."""


# ---------------------------------------------------------------------------
# Random source
# ---------------------------------------------------------------------------


class RandomSource:
    """Seeded, counter-based random stream (Philox) with deterministic splitting.

    Every draw advances an internal counter, so the same seed and the same call
    sequence always give bit-identical results. Children obtained with
    :meth:`spawn` are independent of the parent's call history.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, key={self.key})"

    def spawn(self, key: int | str) -> "RandomSource":
        if isinstance(key, str):
            key = _str_key(key)
        return RandomSource(self.seed, self.key + (int(key),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, dtype=torch.float32, scale: float = 1.0) -> torch.Tensor:
        draw = self._gen.standard_normal(size=tuple(shape))
        if scale != 1.0:
            draw = draw * scale
        return torch.from_numpy(draw).to(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def torch_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))


def _str_key(name: str) -> int:
    # stable across processes, unlike hash()
    value = 0
    for ch in name.encode("utf-8"):
        value = (value * 131 + ch) % (2**61 - 1)
    return value


@contextlib.contextmanager
def torch_seeded(seed: int) -> Iterator[None]:
    """Run a block (e.g. module construction) under a fixed torch seed without leaking global state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


# ---------------------------------------------------------------------------
# Diagonal Gaussians
# ---------------------------------------------------------------------------


@dataclass
class DiagonalGaussian:
    """Diagonal Gaussian given by mean and log-variance tensors of matching shape.

    The last axis is the event dimension; leading axes are batch axes.
    ``log_var`` is clamped to ``[-20, 20]`` at construction.
    """

    mean: torch.Tensor
    log_var: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.mean = torch.as_tensor(self.mean)
        if self.log_var is None:
            self.log_var = torch.zeros_like(self.mean)
        self.log_var = torch.as_tensor(self.log_var, dtype=self.mean.dtype)
        if self.mean.shape != self.log_var.shape:
            raise ContractError(
                f"mean shape {tuple(self.mean.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )
        if self.mean.dim() == 0 or self.mean.shape[-1] < 1:
            raise ContractError("DiagonalGaussian needs dimension d >= 1")
        if not bool(torch.isfinite(self.mean).all()):
            raise NumericalError("DiagonalGaussian mean has non-finite entries")
        if torch.isnan(self.log_var).any():
            raise NumericalError("DiagonalGaussian log_var has NaN entries")
        self.log_var = self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def standard(cls, dim: int, scale: float = 1.0, dtype=torch.float32, batch_shape=()) -> "DiagonalGaussian":
        shape = tuple(batch_shape) + (dim,)
        mean = torch.zeros(shape, dtype=dtype)
        log_var = torch.full(shape, 2.0 * math.log(scale), dtype=dtype)
        return cls(mean, log_var)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log density summed over the event axis."""
        if x.shape[-1] != self.dim:
            raise ContractError(f"sample dim {x.shape[-1]} != distribution dim {self.dim}")
        sq = (x - self.mean) ** 2 * torch.exp(-self.log_var)
        return -0.5 * (sq + self.log_var + LOG_2PI).sum(-1)


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the event axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ContractError(f"KL dimension mismatch: {q.dim} vs {p.dim}")
    var_ratio = torch.exp(q.log_var - p.log_var)
    mahal = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    kl = 0.5 * (var_ratio + mahal - 1.0 - (q.log_var - p.log_var))
    # each coordinate term is >= 0 analytically; clip rounding noise
    return kl.clamp_min(0.0).sum(-1)


def reparam_sample(d: DiagonalGaussian, noise: torch.Tensor | None = None, rng: RandomSource | None = None) -> torch.Tensor:
    """Return ``mean + exp(0.5 * log_var) * noise``; draws the noise from ``rng`` when not given."""
    if noise is None:
        if rng is None:
            raise ContractError("reparam_sample needs explicit noise or a RandomSource")
        noise = rng.normal(d.mean.shape, dtype=d.mean.dtype)
    if noise.shape[-1] != d.dim:
        raise ContractError(f"noise dim {noise.shape[-1]} != distribution dim {d.dim}")
    return d.mean + d.std * noise


def gaussian_log_density(x: torch.Tensor, mean: torch.Tensor, unit_variance: bool = True) -> torch.Tensor:
    """Unit-variance Gaussian log density ``-0.5 * |x - mean|^2 - (D / 2) log(2 pi)``.

    A 1-D input is a single vector. For higher rank the first axis is a batch
    axis and everything after it is the event, so a batch of frames
    ``B x C x H x W`` gives ``B`` values.
    """
    if not unit_variance:
        raise ContractError("only the unit-variance likelihood is supported")
    if x.shape != mean.shape:
        raise ContractError(f"shape mismatch: {tuple(x.shape)} vs {tuple(mean.shape)}")
    if x.dim() == 0:
        raise ContractError("gaussian_log_density needs at least one dimension")
    flat_x = x.reshape(x.shape[0], -1) if x.dim() > 1 else x.reshape(1, -1)
    flat_m = mean.reshape(flat_x.shape)
    D = flat_x.shape[-1]
    out = -0.5 * ((flat_x - flat_m) ** 2).sum(-1) - 0.5 * D * LOG_2PI
    return out if x.dim() > 1 else out[0]


# ---------------------------------------------------------------------------
# Feature statistics and Frechet distance (float64 throughout)
# ---------------------------------------------------------------------------

PSD_TOL = 1e-6


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        f = self.mean.shape[0]
        if self.cov.shape != (f, f):
            raise ContractError(f"cov shape {self.cov.shape} does not match mean dim {f}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0.0):
            raise ContractError("covariance is not symmetric within 1e-8")
        if self.count < 2:
            raise ContractError("FeatureStats needs count >= 2")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def fit(cls, features: np.ndarray, shrink_if_degenerate: bool = True) -> "FeatureStats":
        """Gaussian fit of an ``N x f`` feature matrix.

        When ``N < f + 1`` the sample covariance is rank deficient and
        ``1e-6 * trace / f`` is added to its diagonal.
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ContractError("fit needs an N x f matrix with N >= 2")
        n, f = x.shape
        mean = x.mean(axis=0)
        cov = np.cov(x, rowvar=False).reshape(f, f)
        cov = 0.5 * (cov + cov.T)
        if n < f + 1 and shrink_if_degenerate:
            lam = 1e-6 * max(np.trace(cov), 1e-12) / f
            cov = cov + lam * np.eye(f)
        return cls(mean, cov, n)


def _psd_sqrt(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    if w.min() < -PSD_TOL:
        raise NumericalError(f"{what} is not PSD: min eigenvalue {w.min():.3e} < -{PSD_TOL:g}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, w


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between the Gaussian fits ``a`` and ``b``.

    The cross term uses ``Tr((C_b^1/2 C_a C_b^1/2)^1/2)``, which equals
    ``Tr((C_a C_b)^1/2)`` but only needs symmetric eigendecompositions.
    """
    if a.dim != b.dim:
        raise ContractError(f"feature dims differ: {a.dim} vs {b.dim}")
    _psd_sqrt(a.cov, "covariance a")
    sqrt_b, _ = _psd_sqrt(b.cov, "covariance b")
    inner = sqrt_b @ a.cov @ sqrt_b
    _, w = _psd_sqrt(inner, "C_b^1/2 C_a C_b^1/2")
    cross = float(np.sqrt(w).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    if not math.isfinite(value):
        raise NumericalError("Frechet distance is not finite")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    loss_fn: Callable[[], float | torch.Tensor],
    params: Sequence[tuple[torch.Tensor, tuple[int, ...]]] | torch.Tensor,
    epsilon: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. selected tensor entries.

    ``params`` is a list of ``(tensor, index)`` pairs; a bare tensor means every
    one of its entries. Entries are perturbed in place and restored exactly.
    ``loss_fn`` must be deterministic (freeze any noise beforehand).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    if isinstance(params, torch.Tensor):
        tensor = params
        params = [(tensor, tuple(int(i) for i in idx)) for idx in np.ndindex(*tensor.shape)]

    def evaluate() -> float:
        value = loss_fn()
        value = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(value):
            raise NumericalError("loss is not finite during finite differencing")
        return value

    grads = np.empty(len(params), dtype=np.float64)
    with torch.no_grad():
        for k, (tensor, index) in enumerate(params):
            original = tensor[index].clone()
            tensor[index] = original + epsilon
            plus = evaluate()
            tensor[index] = original - epsilon
            minus = evaluate()
            tensor[index] = original
            grads[k] = (plus - minus) / (2.0 * epsilon)
    return grads
