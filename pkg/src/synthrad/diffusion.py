"""Pixel-space conditional DDPM with a small U-Net denoiser.

Timesteps are 1-based throughout: ``t`` ranges over 1..T and
``schedule.alpha_bars[t - 1]`` is the cumulative product up to step ``t``.
"""

from __future__ import annotations

import difflib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from synthrad import autodiff as ad
from synthrad import nn
from synthrad.autodiff import Tape, Tensor
from synthrad.data import DISEASE_TOKENS, POSITIONS, PromptedExample, require_train
from synthrad.optim import AdamState, adam_step
from synthrad.rng import Rng

NULL_TOKEN = "<null>"
VOCABULARY: tuple[str, ...] = DISEASE_TOKENS + POSITIONS + (NULL_TOKEN,)


class ConfigError(ValueError):
    pass


class UnknownTokenError(ValueError):
    def __init__(self, token: str):
        self.token = token
        self.suggestions = difflib.get_close_matches(token, VOCABULARY, n=3, cutoff=0.5)
        hint = f" Did you mean: {', '.join(self.suggestions)}?" if self.suggestions else ""
        super().__init__(f"unknown prompt token {token!r}.{hint} Vocabulary: {', '.join(VOCABULARY)}")


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t.min()}..{t.max()}")


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ConfigError("need at least one beta")
    if not np.all((b > 0) & (b < 1)):
        raise ConfigError("every beta must lie in (0, 1)")
    a = 1.0 - b
    return NoiseSchedule(b, a, np.cumprod(a))


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def mix(x0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps; ``alpha_bar`` scalar or per-sample."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    out = np.sqrt(ab) * np.asarray(x0, np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, np.float64)
    return out.astype(np.float32)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Sample of x_t given x_0 and the noise; ``t`` is an int or one int per sample."""
    if np.shape(eps) != np.shape(x0):
        raise ValueError(f"noise shape {np.shape(eps)} differs from image shape {np.shape(x0)}")
    schedule.check_step(t)
    return mix(x0, eps, schedule.alpha_bars[np.asarray(t) - 1])


def simple_loss(eps_pred: Tensor, eps: Tensor) -> Tensor:
    """Mean squared error between predicted and true noise."""
    return ad.mse(eps_pred, eps)


# ---------------------------------------------------------------------------
# conditioning


def token_ids(prompt: Sequence[str]) -> list[int]:
    ids = []
    for tok in prompt:
        try:
            ids.append(VOCABULARY.index(tok))
        except ValueError:
            raise UnknownTokenError(tok) from None
    return ids or [VOCABULARY.index(NULL_TOKEN)]


def token_counts(prompts: Sequence[Sequence[str]]) -> np.ndarray:
    """(N, V) matrix of token counts; an empty prompt counts as the null token."""
    m = np.zeros((len(prompts), len(VOCABULARY)), dtype=np.float32)
    for i, p in enumerate(prompts):
        for j in token_ids(p):
            m[i, j] += 1.0
    return m


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class ConditionEmbedding(nn.Module):
    def __init__(self, dim: int, rng: Rng):
        self.table = nn.param(rng.normal((len(VOCABULARY), dim)) * np.float32(0.5))

    def __call__(self, prompts: Sequence[Sequence[str]]) -> Tensor:
        # summed token embeddings, as a counts @ table product
        return ad.matmul(Tensor(token_counts(prompts)), self.table)


# ---------------------------------------------------------------------------
# network


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, d_emb: int, groups: int, rng: Rng):
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.norm1 = nn.GroupNorm(groups, c_out)
        self.emb = nn.Linear(d_emb, c_out, rng, gain=1.0)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng, gain=1.0) if c_in != c_out else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = ad.silu(self.norm1(self.conv1(x)))
        h = ad.add_channels(h, self.emb(emb))
        h = ad.silu(self.norm2(self.conv2(h)))
        return ad.add(h, self.skip(x) if self.skip is not None else x)


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 28
    channels: tuple[int, int] = (16, 32)
    time_dim: int = 32
    emb_dim: int = 64
    groups: int = 4

    def __post_init__(self):
        if self.resolution % 4:
            raise ConfigError(f"resolution must be divisible by 4, got {self.resolution}")
        if any(c % self.groups for c in self.channels):
            raise ConfigError(f"channel widths {self.channels} not divisible by {self.groups} groups")


class DenoiserNet(nn.Module):
    """U-Net with two downsampling stages predicting the added noise.

    The timestep embedding and the summed prompt-token embedding are added
    and injected into every residual block.
    """

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        rng = Rng(seed, 0xD1FF)
        c1, c2 = config.channels
        d, g = config.emb_dim, config.groups
        self.config = config
        self.cond = ConditionEmbedding(d, rng)
        self.t1 = nn.Linear(config.time_dim, d, rng)
        self.t2 = nn.Linear(d, d, rng, gain=1.0)
        self.inc = nn.Conv2d(1, c1, 3, rng)
        self.down1 = ResBlock(c1, c1, d, g, rng)
        self.down2 = ResBlock(c1, c2, d, g, rng)
        self.mid = ResBlock(c2, c2, d, g, rng)
        self.up2 = ResBlock(2 * c2, c1, d, g, rng)
        self.up1 = ResBlock(2 * c1, c1, d, g, rng)
        self.out = nn.Conv2d(c1, 1, 3, rng, gain=0.05)

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def __call__(self, x: Tensor, t: np.ndarray, prompts: Sequence[Sequence[str]]) -> Tensor:
        temb = Tensor(timestep_embedding(t, self.config.time_dim))
        emb = self.t2(ad.silu(self.t1(temb)))
        emb = ad.silu(ad.add(emb, self.cond(prompts)))
        h = self.inc(x)
        s1 = self.down1(h, emb)
        s2 = self.down2(ad.avgpool2(s1), emb)
        m = self.mid(ad.avgpool2(s2), emb)
        u = self.up2(ad.concat([ad.upsample2x(m), s2]), emb)
        u = self.up1(ad.concat([ad.upsample2x(u), s1]), emb)
        return self.out(u)


# ---------------------------------------------------------------------------
# training and sampling


def stack_images(batch: Sequence[PromptedExample]) -> np.ndarray:
    return np.stack([e.image for e in batch])[:, None, :, :].astype(np.float32)


def train_step(
    batch: Sequence[PromptedExample], net: DenoiserNet, schedule: NoiseSchedule, opt: AdamState, rng: Rng
) -> float:
    """One Adam step on the noise-prediction loss; returns the batch loss."""
    if not batch:
        raise ValueError("empty batch")
    x0 = stack_images(batch)
    if x0.min() < -1.0 or x0.max() > 1.0:
        raise ValueError("images must be normalised to [-1, 1]")
    n = len(batch)
    t = rng.integers(1, schedule.T + 1, n)
    eps = rng.normal(x0.shape)
    xt = forward_diffuse(x0, t, eps, schedule)
    params = net.parameters()
    with Tape() as tape:
        loss = simple_loss(net(Tensor(xt), t, [e.prompt for e in batch]), Tensor(eps))
    tape.backward(loss, wrt=params)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"diffusion loss is {value}")
    adam_step(params, opt)
    return value


def train_diffusion(
    data,
    net: DenoiserNet,
    schedule: NoiseSchedule,
    opt: AdamState,
    steps: int,
    batch_size: int = 16,
    seed: int = 0,
    start_step: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Run steps ``start_step + 1 .. steps``; step k draws from its own stream, so resuming is exact."""
    data = require_train(data)
    losses = []
    for step in range(start_step + 1, steps + 1):
        rng = Rng(seed, 1, step)
        idx = rng.integers(0, len(data), batch_size)
        loss = train_step([data[int(i)] for i in idx], net, schedule, opt, rng)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss)
    return losses


def sample(
    net: Callable,
    schedule: NoiseSchedule,
    prompt: Sequence[str],
    seed: int,
    n: int,
    resolution: int | None = None,
) -> list[np.ndarray]:
    """Ancestral sampling from pure noise; returns ``n`` (H, W) images clamped to [-1, 1].

    ``net`` is any callable ``(x, t, prompts) -> predicted noise``.
    """
    return sample_prompts(net, schedule, [tuple(prompt)] * n, seed, resolution)


def sample_prompts(
    net: Callable,
    schedule: NoiseSchedule,
    prompts: Sequence[Sequence[str]],
    seed: int,
    resolution: int | None = None,
) -> list[np.ndarray]:
    """Like :func:`sample` with one prompt per generated image."""
    for p in prompts:
        token_ids(p)
    n = len(prompts)
    res = resolution or net.resolution
    rng = Rng(seed, 2)
    x = rng.normal((n, 1, res, res))
    prompts = [tuple(p) for p in prompts]
    for t in range(schedule.T, 0, -1):
        eps_hat = net(Tensor(x), np.full(n, t), prompts).data.astype(np.float64)
        beta, alpha, ab = schedule.betas[t - 1], schedule.alphas[t - 1], schedule.alpha_bars[t - 1]
        mean = (x - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            mean = mean + math.sqrt(beta) * rng.normal(x.shape, dtype=np.float64)
        x = mean.astype(np.float32)
    return [img[0] for img in np.clip(x, -1.0, 1.0)]
