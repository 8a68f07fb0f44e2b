"""Local adversarial training: value function, update steps, base loop.

The adversarial value of a generator/discriminator pair under a measure
function ``phi`` is

    V(G, D) = E_x[phi(D(x))] + E_z[phi(1 - D(G(z)))]

estimated by batch means.  The discriminator ascends V; the generator uses
the non-saturating heuristic (ascend ``phi(D(G(z)))``) rather than
descending the second term, which is the standard trainable form -- the
value reported by :func:`gan_value` still follows the two-term definition
exactly.  Value computations are pure (eval mode, no gradients); step
functions mutate exactly one model in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .architectures import (
    DescriptorNet,
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)
from .measures import MeasureFunction

DEFAULT_STEP_SIZE = 2e-4
ADAM_BETAS = (0.5, 0.999)


class NonFiniteGradientError(RuntimeError):
    """Raised when a step produces NaN/inf gradients; parameters are untouched."""


class ShardExhaustedError(RuntimeError):
    """Raised when a shard is smaller than the requested batch size."""


@dataclass
class LabeledBatch:
    """A batch of images (B, H, W, C) in [-1, 1] with optional class labels."""

    samples: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be (B, H, W, C), got shape {self.samples.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.samples):
                raise ValueError("labels and samples must have equal length")

    def __len__(self) -> int:
        return len(self.samples)


def to_model_input(samples: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(B, H, W, C) numpy to NCHW torch tensor."""
    t = torch.from_numpy(np.ascontiguousarray(samples)).to(dtype)
    return t.permute(0, 3, 1, 2).contiguous()


def to_images(tensor: torch.Tensor) -> np.ndarray:
    """NCHW torch tensor to (B, H, W, C) float32 numpy."""
    return tensor.detach().permute(0, 2, 3, 1).contiguous().cpu().float().numpy()


def _as_latent(latent_batch: Union[np.ndarray, torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if isinstance(latent_batch, np.ndarray):
        latent_batch = torch.from_numpy(latent_batch)
    return latent_batch.to(dtype)


def _as_labels(labels: Union[np.ndarray, torch.Tensor, None]) -> Optional[torch.Tensor]:
    if labels is None:
        return None
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    return labels.long()


class GanPair:
    """One generator/discriminator pair plus its optimizers and RNG stream.

    ``rng`` seeds parameter init and is then consumed by shard shuffling and
    latent draws, so two pairs built from the same seed and stepped through
    the same schedule stay bit-identical.
    """

    def __init__(self, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int,
                 step_size: float = DEFAULT_STEP_SIZE, dtype: torch.dtype = torch.float32):
        if gen_spec.conditional != disc_spec.conditional:
            raise ValueError("generator and discriminator must agree on conditioning")
        self.gen_spec = gen_spec
        self.disc_spec = disc_spec
        self.seed = int(seed)
        self.dtype = dtype
        self.step_size = step_size
        self.rng = torch.Generator().manual_seed(int(seed))
        self.generator = build_generator(gen_spec, self.rng, dtype=dtype)
        self.discriminator = build_discriminator(disc_spec, self.rng, dtype=dtype)
        self.g_opt = torch.optim.Adam(self.generator.parameters(), lr=step_size, betas=ADAM_BETAS)
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=step_size, betas=ADAM_BETAS)

    @property
    def latent(self):
        return self.gen_spec.latent

    @property
    def conditional(self) -> bool:
        return self.gen_spec.conditional

    def sample_latent(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return self.latent.sample(n, generator if generator is not None else self.rng,
                                  dtype=self.dtype)

    def sample_labels(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        g = generator if generator is not None else self.rng
        return torch.randint(0, self.gen_spec.n_classes, (n,), generator=g)

    def generate(self, latent_batch, labels=None) -> np.ndarray:
        """Images (B, H, W, C) from latents; pure, no parameter mutation."""
        z = _as_latent(latent_batch, self.dtype)
        y = _as_labels(labels)
        self.generator.eval()
        with torch.no_grad():
            out = self.generator(z, y) if self.conditional else self.generator(z)
        self.generator.train()
        return to_images(out)


def build_gan_pair(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec, seed: int,
                   step_size: float = DEFAULT_STEP_SIZE,
                   dtype: torch.dtype = torch.float32) -> GanPair:
    return GanPair(gen_spec, disc_spec, seed, step_size=step_size, dtype=dtype)


def _value_terms(gen: DescriptorNet, disc: DescriptorNet, real: torch.Tensor,
                 z: torch.Tensor, phi: MeasureFunction,
                 real_labels: Optional[torch.Tensor] = None,
                 fake_labels: Optional[torch.Tensor] = None,
                 detach_fake: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (real_term, fake_term) of the adversarial value."""
    d_real = disc(real, real_labels) if real_labels is not None else disc(real)
    fake = gen(z, fake_labels) if fake_labels is not None else gen(z)
    if detach_fake:
        fake = fake.detach()
    d_fake = disc(fake, fake_labels) if fake_labels is not None else disc(fake)
    real_term = phi(d_real.reshape(-1)).mean()
    fake_term = phi(1.0 - d_fake.reshape(-1)).mean()
    return real_term, fake_term


def _check_batches(real_batch: LabeledBatch, latent_batch) -> None:
    if len(real_batch) == 0:
        raise ValueError("empty real batch")
    if len(latent_batch) == 0:
        raise ValueError("empty latent batch")


def gan_value(gen: DescriptorNet, disc: DescriptorNet, real_batch: LabeledBatch,
              latent_batch, phi: MeasureFunction,
              dtype: torch.dtype = torch.float32) -> float:
    """Two-term adversarial value on given batches (pure; batch means).

    For conditional models use :func:`conditional_gan_value`.
    """
    if getattr(gen, "embedding", None) is not None or getattr(disc, "embedding", None) is not None:
        raise ValueError("conditional models require conditional_gan_value")
    _check_batches(real_batch, latent_batch)
    real = to_model_input(real_batch.samples, dtype)
    z = _as_latent(latent_batch, dtype)
    gen.eval(), disc.eval()
    with torch.no_grad():
        rt, ft = _value_terms(gen, disc, real, z, phi)
    gen.train(), disc.train()
    return float(rt + ft)


def conditional_gan_value(gen: DescriptorNet, disc: DescriptorNet, real_batch: LabeledBatch,
                          latent_batch, labels, phi: MeasureFunction,
                          dtype: torch.dtype = torch.float32) -> float:
    """Adversarial value with class-conditioned models: D(x|y) and D(G(z|y)|y)."""
    if real_batch.labels is None:
        raise ValueError("conditional value requires labels on the real batch")
    _check_batches(real_batch, latent_batch)
    y_fake = _as_labels(labels)
    if y_fake is None:
        raise ValueError("conditional value requires labels for the latent batch")
    real = to_model_input(real_batch.samples, dtype)
    z = _as_latent(latent_batch, dtype)
    y_real = _as_labels(real_batch.labels)
    gen.eval(), disc.eval()
    with torch.no_grad():
        rt, ft = _value_terms(gen, disc, real, z, phi, real_labels=y_real, fake_labels=y_fake)
    gen.train(), disc.train()
    return float(rt + ft)


def _grads_finite(params) -> bool:
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return False
    return True


def _apply_step(optimizer: torch.optim.Optimizer, step_size: Optional[float]) -> None:
    if step_size is not None:
        for group in optimizer.param_groups:
            group["lr"] = step_size
    optimizer.step()


def discriminator_step(pair: GanPair, real_batch: LabeledBatch, latent_batch,
                       phi: MeasureFunction, step_size: Optional[float] = None) -> float:
    """One ascent step of the adversarial value w.r.t. discriminator parameters.

    Generator parameters are untouched (its samples are detached).  Returns
    the minimized loss, i.e. the negated value on the training batch.
    Non-finite gradients abort the step with :class:`NonFiniteGradientError`.
    """
    _check_batches(real_batch, latent_batch)
    real = to_model_input(real_batch.samples, pair.dtype)
    z = _as_latent(latent_batch, pair.dtype)
    y = _as_labels(real_batch.labels) if pair.conditional else None
    if pair.conditional and y is None:
        raise ValueError("conditional pair requires a labeled real batch")
    rt, ft = _value_terms(pair.generator, pair.discriminator, real, z, phi,
                          real_labels=y, fake_labels=y, detach_fake=True)
    loss = -(rt + ft)
    pair.d_opt.zero_grad()
    loss.backward()
    if not _grads_finite(pair.discriminator.parameters()):
        raise NonFiniteGradientError("discriminator step aborted: non-finite gradient")
    _apply_step(pair.d_opt, step_size)
    return float(loss)


def generator_step(pair: GanPair, latent_batch, phi: MeasureFunction,
                   step_size: Optional[float] = None,
                   extra_loss_terms: Sequence[torch.Tensor] = (),
                   labels=None) -> float:
    """One descent step of the generator objective plus any extra penalties.

    The base objective is the non-saturating form ``-mean phi(D(G(z)))``;
    ``extra_loss_terms`` are differentiable scalars (e.g. the federation
    penalty) added before the backward pass.  Discriminator parameters are
    left unchanged.  Returns the total minimized loss.
    """
    if len(latent_batch) == 0:
        raise ValueError("empty latent batch")
    z = _as_latent(latent_batch, pair.dtype)
    y = _as_labels(labels)
    if pair.conditional and y is None:
        raise ValueError("conditional pair requires labels for generation")
    fake = pair.generator(z, y) if pair.conditional else pair.generator(z)
    d_fake = pair.discriminator(fake, y) if pair.conditional else pair.discriminator(fake)
    loss = -phi(d_fake.reshape(-1)).mean()
    for term in extra_loss_terms:
        loss = loss + term
    pair.g_opt.zero_grad()
    loss.backward()
    if not _grads_finite(pair.generator.parameters()):
        raise NonFiniteGradientError("generator step aborted: non-finite gradient")
    _apply_step(pair.g_opt, step_size)
    return float(loss)


class ShardLoader:
    """Cycles through one site's private shard in seeded shuffled order.

    The shuffle consumes the owning pair's RNG stream, so a training loop's
    total draw sequence is reproducible.  ``indices`` records which rows of
    the source dataset this shard holds (used to check shard disjointness).
    """

    def __init__(self, images: np.ndarray, labels: Optional[np.ndarray],
                 rng: torch.Generator, indices: Optional[np.ndarray] = None):
        self.images = np.asarray(images)
        self.labels = None if labels is None else np.asarray(labels)
        if self.images.ndim != 4:
            raise ValueError("shard images must be (N, H, W, C)")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("shard labels must match images")
        self.rng = rng
        self.indices = None if indices is None else np.asarray(indices)
        self._order: Optional[np.ndarray] = None
        self._cursor = 0

    def __len__(self) -> int:
        return len(self.images)

    def next_batch(self, batch_size: int) -> LabeledBatch:
        n = len(self.images)
        if batch_size > n:
            raise ShardExhaustedError(f"shard has {n} samples, batch size {batch_size} requested")
        if self._order is None or self._cursor + batch_size > n:
            self._order = torch.randperm(n, generator=self.rng).numpy()
            self._cursor = 0
        take = self._order[self._cursor:self._cursor + batch_size]
        self._cursor += batch_size
        labels = None if self.labels is None else self.labels[take]
        return LabeledBatch(self.images[take], labels)


def train_gan(pair: GanPair, loader: ShardLoader, rounds: int, phi: MeasureFunction,
              batch_size: int = 64, checkpoint_every: Optional[int] = None,
              store=None, site_id: int = 0, seed_tag: int = 0,
              log_every: int = 0) -> List[Tuple[float, float]]:
    """Plain (non-federated) training loop: one D step then one G step per round.

    Draw order per round is fixed (real shuffle, D latents, G latents and,
    when conditional, G labels) so federated runs with zero coupling can be
    compared bit-for-bit against this loop.  Optionally checkpoints the
    generator into ``store`` every ``checkpoint_every`` rounds.
    """
    history: List[Tuple[float, float]] = []
    for r in range(1, rounds + 1):
        real = loader.next_batch(batch_size)
        z_d = pair.sample_latent(batch_size)
        d_loss = discriminator_step(pair, real, z_d, phi)
        z_g = pair.sample_latent(batch_size)
        if pair.conditional:
            y_g = pair.sample_labels(batch_size)
            g_loss = generator_step(pair, z_g, phi, labels=y_g)
        else:
            g_loss = generator_step(pair, z_g, phi)
        history.append((d_loss, g_loss))
        if store is not None and checkpoint_every and r % checkpoint_every == 0:
            store.save(pair, site_id=site_id, epoch=r, seed=seed_tag)
        if log_every and r % log_every == 0:
            print(f"round {r}/{rounds}  d_loss={d_loss:.4f}  g_loss={g_loss:.4f}")
    return history
