"""Progressive-growing GAN over single-channel images.

Both networks are lists of per-resolution stages.  The generator's newest
stage is faded in by blending its to-image head with the nearest-upsampled
image of the previous stage; the discriminator mirrors this on its input
side.  Stages are appended, never rebuilt, so parameters of older stages keep
their values across growth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from synthrad import autodiff as ad
from synthrad import nn
from synthrad.autodiff import Tape, Tensor
from synthrad.data import require_train
from synthrad.optim import AdamState, adam_step
from synthrad.rng import Rng

CLAMP = 1e-7


class ScheduleExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Stage:
    resolution: int
    steps_fade: int
    steps_stable: int


@dataclass(frozen=True)
class GrowthSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("growth schedule needs at least one stage")
        for prev, cur in zip(self.stages, self.stages[1:]):
            if cur.resolution != 2 * prev.resolution:
                raise ValueError(f"resolutions must double per stage, got {prev.resolution} -> {cur.resolution}")
        for s in self.stages:
            if s.steps_fade < 0 or s.steps_stable < 0:
                raise ValueError("stage step counts must be >= 0")

    @classmethod
    def doubling(cls, base: int = 4, final: int = 32, steps_fade: int = 100, steps_stable: int = 100) -> "GrowthSchedule":
        stages, res = [], base
        while res <= final:
            stages.append(Stage(res, 0 if res == base else steps_fade, steps_stable))
            res *= 2
        if stages[-1].resolution != final:
            raise ValueError(f"final resolution {final} is not base {base} times a power of two")
        return cls(tuple(stages))

    @property
    def total_steps(self) -> int:
        return sum(s.steps_fade + s.steps_stable for s in self.stages)

    def locate(self, step: int) -> tuple[int, int]:
        """(stage index, k) for 1-based global ``step``; k is the 1-based fade step, 0 once stable."""
        before = 0
        for i, s in enumerate(self.stages):
            if step <= before + s.steps_fade:
                return i, step - before
            before += s.steps_fade
            if step <= before + s.steps_stable:
                return i, 0
            before += s.steps_stable
        raise ScheduleExhausted(f"step {step} beyond schedule of {self.total_steps} steps")

    def fade(self, step: int) -> tuple[int, float, float]:
        """(stage, coefficient used during ``step``, coefficient reached after it).

        The k-th fade step runs at (k - 1) / steps_fade and leaves k / steps_fade.
        """
        stage, k = self.locate(step)
        if k == 0:
            return stage, 1.0, 1.0
        n = self.stages[stage].steps_fade
        return stage, (k - 1) / n, k / n


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 64
    base_resolution: int = 4
    final_resolution: int = 32
    channels: tuple[int, ...] = (32, 32, 16, 16)
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.final_resolution / self.base_resolution))) + 1

    def __post_init__(self):
        if self.base_resolution * 2 ** (self.n_stages - 1) != self.final_resolution:
            raise ValueError("final resolution must be the base resolution times a power of two")
        if len(self.channels) < self.n_stages:
            raise ValueError(f"need {self.n_stages} channel widths, got {len(self.channels)}")


# ---------------------------------------------------------------------------
# networks


class GenStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, first: bool, rng: Rng, head_gain: float):
        self.first = first
        self.conv1 = None if first else nn.Conv2d(c_in, c_out, 3, rng)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng)
        self.head = nn.Conv2d(c_out, 1, 1, rng, gain=head_gain)

    def features(self, h: Tensor) -> Tensor:
        if not self.first:
            h = ad.leaky_relu(self.conv1(ad.upsample2x(h)))
        return ad.leaky_relu(self.conv2(h))

    def image(self, h: Tensor) -> Tensor:
        return ad.tanh(self.head(h))


class Generator(nn.Module):
    def __init__(self, config: GanConfig, seed: int = 0):
        self.config = config
        self._rng = Rng(seed, 0x6E4)
        c0, b = config.channels[0], config.base_resolution
        self.project = nn.Linear(config.latent_dim, c0 * b * b, self._rng)
        self.stages: list[GenStage] = [GenStage(c0, c0, True, self._rng, 1.0)]
        self.alpha = 1.0

    @property
    def stage(self) -> int:
        return len(self.stages) - 1

    @property
    def resolution(self) -> int:
        return self.config.base_resolution * 2**self.stage

    def add_stage(self) -> None:
        k = len(self.stages)
        ch = self.config.channels
        self.stages.append(GenStage(ch[k - 1], ch[k], False, self._rng.child(k), 0.1))

    def __call__(self, z: Tensor, alpha: float | None = None) -> Tensor:
        a = self.alpha if alpha is None else alpha
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"fade coefficient must lie in [0, 1], got {a}")
        c0, b = self.config.channels[0], self.config.base_resolution
        h = ad.leaky_relu(self.project(z))
        h = ad.reshape(h, (z.shape[0], c0, b, b))
        for st in self.stages[:-1]:
            h = st.features(h)
        last = self.stages[-1]
        new = last.image(last.features(h))
        if len(self.stages) == 1:
            return new
        old = ad.upsample2x(self.stages[-2].image(h))
        a32 = np.float32(a)
        return ad.add(ad.scale(old, np.float32(1.0) - a32), ad.scale(new, a32))


class DiscStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, first: bool, rng: Rng):
        self.first = first
        self.from_image = nn.Conv2d(1, c_in, 1, rng)
        self.conv1 = nn.Conv2d(c_in, c_in, 3, rng)
        self.conv2 = None if first else nn.Conv2d(c_in, c_out, 3, rng)

    def entry(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(self.from_image(x))

    def features(self, h: Tensor) -> Tensor:
        h = ad.leaky_relu(self.conv1(h))
        if not self.first:
            h = ad.avgpool2(ad.leaky_relu(self.conv2(h)))
        return h


class Discriminator(nn.Module):
    def __init__(self, config: GanConfig, seed: int = 0):
        self.config = config
        self._rng = Rng(seed, 0xD15C)
        c0, b = config.channels[0], config.base_resolution
        self.final = nn.Linear(c0 * b * b, 1, self._rng, gain=1.0)
        self.stages: list[DiscStage] = [DiscStage(c0, c0, True, self._rng)]
        self.alpha = 1.0

    @property
    def resolution(self) -> int:
        return self.config.base_resolution * 2 ** (len(self.stages) - 1)

    def add_stage(self) -> None:
        k = len(self.stages)
        ch = self.config.channels
        self.stages.append(DiscStage(ch[k], ch[k - 1], False, self._rng.child(k)))

    def __call__(self, x: Tensor, alpha: float | None = None) -> Tensor:
        """Scores in (0, 1), shape (N,)."""
        a = self.alpha if alpha is None else alpha
        if x.shape[2:] != (self.resolution, self.resolution):
            raise ad.ShapeError(f"discriminator expects {self.resolution}x{self.resolution}, got {x.shape[2:]}")
        last = self.stages[-1]
        h = last.features(last.entry(x))
        if len(self.stages) > 1:
            old = self.stages[-2].entry(ad.avgpool2(x))
            a32 = np.float32(a)
            h = ad.add(ad.scale(old, np.float32(1.0) - a32), ad.scale(h, a32))
        for st in reversed(self.stages[:-1]):
            h = st.features(h)
        score = ad.sigmoid(self.final(nn.flatten(h)))
        return ad.reshape(score, (x.shape[0],))


def grow(gen: Generator, disc: Discriminator) -> None:
    """Append one stage to both networks and restart the fade at 0."""
    if gen.stage + 1 >= gen.config.n_stages:
        raise ScheduleExhausted("schedule exhausted: networks are at the final resolution")
    gen.add_stage()
    disc.add_stage()
    gen.alpha = disc.alpha = 0.0


def blended_forward(gen: Generator, z, alpha: float) -> np.ndarray:
    """Generator output at fade coefficient ``alpha`` (no gradient recording)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fade coefficient must lie in [0, 1], got {alpha}")
    return gen(z if isinstance(z, Tensor) else Tensor(z), alpha).data


# ---------------------------------------------------------------------------
# objective and training


def _clamped(scores) -> Tensor:
    t = scores if isinstance(scores, Tensor) else Tensor(np.atleast_1d(np.asarray(scores, dtype=np.float32)))
    if t.size == 0:
        raise ValueError("empty score batch")
    return ad.clip(t, CLAMP, 1 - CLAMP)


def discriminator_loss(d_real, d_fake) -> Tensor:
    """-mean(log D(x)) - mean(log(1 - D(G(z))))."""
    return ad.add(ad.bce(_clamped(d_real), 1.0), ad.bce(_clamped(d_fake), 0.0))


def generator_loss(d_fake) -> Tensor:
    """Non-saturating form, -mean(log D(G(z)))."""
    return ad.bce(_clamped(d_fake), 1.0)


def gan_losses(d_real, d_fake) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss); scores are clamped to [1e-7, 1 - 1e-7]."""
    return discriminator_loss(d_real, d_fake), generator_loss(d_fake)


def downsample_to(images: np.ndarray, res: int) -> np.ndarray:
    """Average-pool (N, 1, H, W) by powers of two down to ``res``."""
    while images.shape[-1] > res:
        n, c, h, w = images.shape
        images = images.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if images.shape[-1] != res:
        raise ValueError(f"cannot pool {images.shape[-1]} down to {res}")
    return images.astype(np.float32)


@dataclass
class StepRecord:
    step: int
    stage: int
    alpha: float
    loss_d: float
    loss_g: float


@dataclass
class GanTrainer:
    """Holds both networks, their optimisers and the global step so training can resume."""

    config: GanConfig
    schedule: GrowthSchedule
    seed: int = 0
    gen: Generator = None
    disc: Discriminator = None
    opt_g: AdamState = None
    opt_d: AdamState = None
    step: int = 0
    trace: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.schedule.stages[0].resolution != self.config.base_resolution:
            raise ValueError("schedule must start at the configured base resolution")
        if self.schedule.stages[-1].resolution > self.config.final_resolution:
            raise ValueError("schedule grows past the configured final resolution")
        c = self.config
        self.gen = self.gen or Generator(c, self.seed)
        self.disc = self.disc or Discriminator(c, self.seed)
        self.opt_g = self.opt_g or AdamState(lr=c.lr, beta1=c.beta1, beta2=c.beta2)
        self.opt_d = self.opt_d or AdamState(lr=c.lr, beta1=c.beta1, beta2=c.beta2)

    def sync_stage(self, stage: int) -> None:
        while self.gen.stage < stage:
            grow(self.gen, self.disc)

    def train_step(self, images: np.ndarray) -> StepRecord:
        """One discriminator update followed by one generator update."""
        step = self.step + 1
        stage, alpha, alpha_after = self.schedule.fade(step)
        self.sync_stage(stage)
        self.gen.alpha = self.disc.alpha = alpha
        res = self.gen.resolution
        rng = Rng(self.seed, 5, step)
        n = self.config.batch_size
        idx = rng.integers(0, len(images), n)
        real = downsample_to(images[idx], res)
        if alpha < 1.0:
            # real images fade in the same way as the generator output
            coarse = np.repeat(np.repeat(downsample_to(real, res // 2), 2, axis=2), 2, axis=3)
            real = ((1.0 - alpha) * coarse + alpha * real).astype(np.float32)

        d_params = self.disc.parameters()
        z = Tensor(rng.normal((n, self.config.latent_dim)))
        fake = Tensor(self.gen(z).data)
        with Tape() as tape:
            loss_d = discriminator_loss(self.disc(Tensor(real)), self.disc(fake))
        tape.backward(loss_d, wrt=d_params)
        ld = loss_d.item()
        if not math.isfinite(ld):
            raise FloatingPointError(f"non-finite discriminator loss at step {step} (stage {stage}, alpha {alpha})")
        adam_step(d_params, self.opt_d)

        g_params = self.gen.parameters()
        z = Tensor(rng.normal((n, self.config.latent_dim)))
        with Tape() as tape:
            loss_g = generator_loss(self.disc(self.gen(z)))
        tape.backward(loss_g, wrt=g_params)
        for p in d_params:
            p.grad = None
        lg = loss_g.item()
        if not math.isfinite(lg):
            raise FloatingPointError(f"non-finite generator loss at step {step} (stage {stage}, alpha {alpha})")
        adam_step(g_params, self.opt_g)

        self.gen.alpha = self.disc.alpha = alpha_after
        self.step = step
        rec = StepRecord(step, stage, alpha, ld, lg)
        self.trace.append(rec)
        return rec

    def run(self, data, until: int | None = None, on_step: Callable[[StepRecord], None] | None = None) -> Generator:
        data = require_train(data)
        images = np.stack([e.image for e in data])[:, None, :, :].astype(np.float32)
        if images.shape[-1] != self.schedule.stages[-1].resolution:
            raise ValueError(
                f"training images are {images.shape[-1]}px, schedule ends at {self.schedule.stages[-1].resolution}px"
            )
        until = self.schedule.total_steps if until is None else until
        while self.step < until:
            rec = self.train_step(images)
            if on_step is not None:
                on_step(rec)
        return self.gen


def train_gan(data, schedule: GrowthSchedule, config: GanConfig, seed: int = 0) -> tuple[Generator, list[StepRecord]]:
    trainer = GanTrainer(config, schedule, seed)
    trainer.run(data)
    return trainer.gen, trainer.trace


# ---------------------------------------------------------------------------
# post-hoc class latents


@dataclass(frozen=True)
class ClassLatent:
    token: str
    vector: np.ndarray
    count: int


def derive_class_latents(
    gen: Generator,
    scorer: Callable[[np.ndarray, str], np.ndarray],
    token: str,
    n_probe: int,
    rng: Rng,
) -> ClassLatent:
    """Mean of the probe latents whose images score in the top tenth for ``token``.

    ``scorer(images, token)`` maps (N, H, W) images to per-image probabilities.
    Ties keep probe order.
    """
    if n_probe < 10:
        raise ValueError(f"n_probe must be >= 10, got {n_probe}")
    z = rng.normal((n_probe, gen.config.latent_dim))
    images = np.concatenate(
        [gen(Tensor(z[i:i + 256])).data[:, 0] for i in range(0, n_probe, 256)]
    )
    scores = np.asarray(scorer(images, token), dtype=np.float64)
    if scores.shape != (n_probe,):
        raise ValueError(f"scorer returned shape {scores.shape}, expected ({n_probe},)")
    keep = max(1, n_probe // 10)
    top = np.argsort(-scores, kind="stable")[:keep]
    return ClassLatent(token, z[top].astype(np.float64).mean(axis=0).astype(np.float32), keep)


def classifier_scorer(net) -> Callable[[np.ndarray, str], np.ndarray]:
    """Adapt a classifier with ``classes`` and ``predict_proba`` to the scorer interface.

    Images smaller than the classifier input are nearest-upsampled by an integer factor.
    """

    def score(images: np.ndarray, token: str) -> np.ndarray:
        k = net.resolution // images.shape[-1]
        if k > 1:
            images = np.repeat(np.repeat(images, k, axis=1), k, axis=2)
        return net.predict_proba(images)[:, list(net.classes).index(token)]

    return score
