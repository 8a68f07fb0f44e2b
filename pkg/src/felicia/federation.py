"""Federated adversarial training coupled through a central source classifier.

N sites each hold a private shard and a local generator/discriminator pair.
The only cross-site signal is a central adversary: an N-way classifier that
sees *synthetic samples only* and tries to attribute each to its source
generator.  The federated objective is

    sum_i  V(G_i, D_i)  +  lambda_i * R_i,      R_i = E_z[ phi(p_i(G_i(z))) ]

where ``p_i`` is the adversary's probability that a sample came from site i.
The adversary ascends attribution accuracy (N-class cross-entropy); each
generator additionally *minimizes* its weighted penalty ``lambda_i * R_i``,
which drives cross-site indistinguishability.  With all lambdas zero, a
round is exactly N independent local trainings (bitwise, in deterministic
single-threaded runs), because every site keeps its own RNG stream and the
penalty path is skipped outright.

Round order: local discriminators, then the central adversary, then local
generators.  Site-local phases may run concurrently across sites (the
adversary is only read in phase 3); deterministic runs keep everything
sequential in site order.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .architectures import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    spec_hash,
)
from .gan import (
    GanPair,
    LabeledBatch,
    NonFiniteGradientError,
    ShardLoader,
    _apply_step,
    _as_labels,
    _as_latent,
    _grads_finite,
    _value_terms,
    build_gan_pair,
    discriminator_step,
    generator_step,
    to_images,
    to_model_input,
)
from .measures import MeasureFunction
from .seeding import derive_seed

ADAM_BETAS = (0.5, 0.999)


class RoundAbortedError(RuntimeError):
    """A training round hit a non-finite loss or gradient and was abandoned."""


@dataclass(frozen=True)
class LambdaVector:
    """Per-site coupling weights; nonnegative and finite."""

    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("lambda vector cannot be empty")
        for v in vals:
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"lambda values must be finite and >= 0, got {v}")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return self.values[i]


@dataclass
class SyntheticBatch:
    """Generator output tagged with its source site.

    This is the *only* type the central adversary accepts, which is what
    keeps real samples out of it: real data enters the system as
    :class:`LabeledBatch` and nothing converts one into the other.
    """

    samples: np.ndarray
    source_site: int
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 4:
            raise ValueError("synthetic samples must be (B, H, W, C)")
        self.source_site = int(self.source_site)
        if self.source_site < 0:
            raise ValueError("source_site must be >= 0")

    def __len__(self) -> int:
        return len(self.samples)


class CentralAdversary:
    """N-way source classifier trained exclusively on synthetic batches.

    Architecturally it is the site discriminator re-headed with an N-unit
    final layer (softmax instead of the sigmoid squashing).  Its published
    output is a probability vector over sites summing to one.
    """

    def __init__(self, disc_spec: DiscriminatorSpec, n_sites: int, seed: int,
                 step_size: float = 2e-4, dtype: torch.dtype = torch.float32):
        if n_sites < 1:
            raise ValueError("adversary needs at least one site")
        self.n_sites = int(n_sites)
        self.disc_spec = disc_spec
        self.dtype = dtype
        self.rng = torch.Generator().manual_seed(int(seed))
        self.module = build_discriminator(disc_spec, self.rng, dtype=dtype, n_outputs=n_sites)
        self.optimizer = torch.optim.Adam(self.module.parameters(), lr=step_size, betas=ADAM_BETAS)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    def probabilities_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.module(x), dim=1)

    def probabilities(self, batch: SyntheticBatch) -> np.ndarray:
        """Per-sample source probabilities, shape (B, n_sites), rows sum to 1."""
        if not isinstance(batch, SyntheticBatch):
            raise TypeError("central adversary accepts only SyntheticBatch inputs")
        x = to_model_input(batch.samples, self.dtype)
        self.module.eval()
        with torch.no_grad():
            p = self.probabilities_tensor(x)
        self.module.train()
        return p.cpu().double().numpy()

    def attribution_accuracy(self, batches: Sequence[SyntheticBatch]) -> float:
        """Fraction of synthetic samples attributed to their true source."""
        correct = 0
        total = 0
        for b in batches:
            p = self.probabilities(b)
            correct += int((p.argmax(axis=1) == b.source_site).sum())
            total += len(b)
        if total == 0:
            raise ValueError("no samples given")
        return correct / total


def build_adversary(disc_spec: DiscriminatorSpec, n_sites: int, seed: int,
                    step_size: float = 2e-4, dtype: torch.dtype = torch.float32) -> CentralAdversary:
    return CentralAdversary(disc_spec, n_sites, seed, step_size=step_size, dtype=dtype)


@dataclass
class SiteState:
    """One simulated data owner: its pair, private shard, and coupling stream.

    ``coupling_rng`` feeds only the penalty-term latents, keeping the site's
    own stream identical to what a stand-alone training would consume.
    """

    site_id: int
    pair: GanPair
    loader: ShardLoader
    coupling_rng: torch.Generator

    @property
    def conditional(self) -> bool:
        return self.pair.conditional

    def sample_synthetic(self, n: int, rng: torch.Generator,
                         labels: Optional[np.ndarray] = None) -> SyntheticBatch:
        """Generate a provenance-tagged batch from this site's generator."""
        z = self.pair.latent.sample(n, rng, dtype=self.pair.dtype)
        if self.conditional:
            if labels is None:
                y = torch.randint(0, self.pair.gen_spec.n_classes, (n,), generator=rng)
            else:
                y = _as_labels(labels)
            images = self.pair.generate(z, y)
            return SyntheticBatch(images, self.site_id, labels=y.numpy())
        images = self.pair.generate(z)
        return SyntheticBatch(images, self.site_id)


class FeliciaState:
    """Full federation state: sites, central adversary, weights, round counter."""

    def __init__(self, sites: Sequence[SiteState], adversary: CentralAdversary,
                 lambdas: LambdaVector, measure: MeasureFunction):
        sites = list(sites)
        if len(sites) != len(lambdas) or adversary.n_sites != len(sites):
            raise ValueError(
                f"site/lambda/adversary arity mismatch: {len(sites)} sites, "
                f"{len(lambdas)} lambdas, adversary expects {adversary.n_sites}"
            )
        index_sets = [s.loader.indices for s in sites]
        if all(ix is not None for ix in index_sets):
            seen: set = set()
            for ix in index_sets:
                as_set = set(int(i) for i in ix)
                if seen & as_set:
                    raise ValueError("site shards must be pairwise disjoint")
                seen |= as_set
        self.sites = sites
        self.adversary = adversary
        self.lambdas = lambdas
        self.measure = measure
        self.round = 0

    @property
    def n_sites(self) -> int:
        return len(self.sites)


def build_felicia(gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                  shards: Sequence[Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]],
                  lambdas: Sequence[float], measure: MeasureFunction, master_seed: int,
                  step_size: float = 2e-4, dtype: torch.dtype = torch.float32) -> FeliciaState:
    """Assemble a federation over ``shards`` = [(images, labels, indices), ...].

    Site i's pair is seeded with ``derive_seed(master_seed, "site", i)`` --
    the same seed a matching stand-alone training should use.  The adversary
    and the per-site coupling streams get their own derived seeds.
    """
    sites = []
    for i, (images, labels, indices) in enumerate(shards):
        pair = build_gan_pair(gen_spec, disc_spec, derive_seed(master_seed, "site", i),
                              step_size=step_size, dtype=dtype)
        loader = ShardLoader(images, labels, pair.rng, indices=indices)
        coupling = torch.Generator().manual_seed(derive_seed(master_seed, "coupling", i))
        sites.append(SiteState(i, pair, loader, coupling))
    adversary = build_adversary(disc_spec, len(sites), derive_seed(master_seed, "adversary"),
                                step_size=step_size, dtype=dtype)
    return FeliciaState(sites, adversary, LambdaVector(tuple(lambdas)), measure)


def _regularizer_term(adversary: CentralAdversary, generator, latent_batch,
                      phi: MeasureFunction, site_index: int,
                      labels: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Differentiable mean of phi at the adversary's site-i probability."""
    if not (0 <= site_index < adversary.n_sites):
        raise IndexError(f"site index {site_index} out of range for {adversary.n_sites} sites")
    z = _as_latent(latent_batch, adversary.dtype)
    fake = generator(z, labels) if labels is not None else generator(z)
    probs = adversary.probabilities_tensor(fake)
    return phi(probs[:, site_index]).mean()


def regularizer_value(adversary: CentralAdversary, generator, latent_batch,
                      phi: MeasureFunction, site_index: int, labels=None) -> float:
    """Mean phi(p_i(G_i(z))) over the batch; the unweighted global term."""
    y = _as_labels(labels)
    generator.eval(), adversary.module.eval()
    with torch.no_grad():
        val = _regularizer_term(adversary, generator, latent_batch, phi, site_index, labels=y)
    generator.train(), adversary.module.train()
    return float(val)


@dataclass
class FeliciaLossReport:
    """Total federated loss plus the per-site (local, global) decomposition.

    ``per_site`` holds (local adversarial value, unweighted global term);
    the total is ``sum(local_i + lambda_i * global_i)``.
    """

    total: float
    per_site: List[Tuple[float, float]]
    lambdas: Tuple[float, ...]


def felicia_loss(state: FeliciaState, site_real_batches: Sequence[LabeledBatch],
                 site_latent_batches: Sequence) -> FeliciaLossReport:
    """Evaluate the federated objective on one batch per site (pure)."""
    n = state.n_sites
    if len(site_real_batches) != n or len(site_latent_batches) != n:
        raise ValueError(f"expected {n} real and latent batches")
    per_site: List[Tuple[float, float]] = []
    total = 0.0
    for i, site in enumerate(state.sites):
        real, z = site_real_batches[i], site_latent_batches[i]
        pair = site.pair
        reals = to_model_input(real.samples, pair.dtype)
        zt = _as_latent(z, pair.dtype)
        y = _as_labels(real.labels) if site.conditional else None
        if site.conditional and y is None:
            raise ValueError(f"site {i} is conditional; real batch needs labels")
        pair.generator.eval(), pair.discriminator.eval(), state.adversary.module.eval()
        with torch.no_grad():
            rt, ft = _value_terms(pair.generator, pair.discriminator, reals, zt,
                                  state.measure, real_labels=y, fake_labels=y)
            local = float(rt + ft)
            glob = float(_regularizer_term(state.adversary, pair.generator, zt,
                                           state.measure, i, labels=y))
        pair.generator.train(), pair.discriminator.train(), state.adversary.module.train()
        per_site.append((local, glob))
        total += local + state.lambdas[i] * glob
    return FeliciaLossReport(total=total, per_site=per_site, lambdas=state.lambdas.values)


def adversary_step(adversary: CentralAdversary, synthetic_batches: Sequence[SyntheticBatch],
                   step_size: Optional[float] = None) -> float:
    """One cross-entropy step on source attribution over synthetic batches.

    Every site must contribute exactly one batch; anything that is not a
    :class:`SyntheticBatch` is rejected outright.
    """
    for b in synthetic_batches:
        if not isinstance(b, SyntheticBatch):
            raise TypeError("central adversary accepts only SyntheticBatch inputs")
    sources = sorted(b.source_site for b in synthetic_batches)
    if sources != list(range(adversary.n_sites)):
        raise ValueError(f"need one batch per site 0..{adversary.n_sites - 1}, got sources {sources}")
    ordered = sorted(synthetic_batches, key=lambda b: b.source_site)
    xs = torch.cat([to_model_input(b.samples, adversary.dtype) for b in ordered])
    ys = torch.cat([torch.full((len(b),), b.source_site, dtype=torch.long) for b in ordered])
    logits = adversary.logits(xs)
    loss = F.cross_entropy(logits, ys)
    adversary.optimizer.zero_grad()
    loss.backward()
    if not _grads_finite(adversary.module.parameters()):
        raise NonFiniteGradientError("adversary step aborted: non-finite gradient")
    _apply_step(adversary.optimizer, step_size)
    return float(loss)


def generator_global_penalty(adversary: CentralAdversary, generator, latent_batch,
                             phi: MeasureFunction, lambda_i: float, site_index: int,
                             labels=None) -> torch.Tensor:
    """Differentiable penalty ``lambda_i * R_i`` for generator ``site_index``.

    Wire the returned scalar into :func:`felicia.gan.generator_step` as an
    extra loss term: minimizing it makes the site's samples harder for the
    central adversary to attribute.
    """
    if lambda_i < 0:
        raise ValueError("lambda must be >= 0")
    y = _as_labels(labels)
    return lambda_i * _regularizer_term(adversary, generator, latent_batch, phi,
                                        site_index, labels=y)


@dataclass
class RoundReport:
    """Losses observed during one federated round."""

    round: int
    d_losses: List[float]
    adversary_loss: float
    g_losses: List[float]
    penalties: List[float]


def train_round(state: FeliciaState, batch_size: int,
                step_size: Optional[float] = None) -> RoundReport:
    """Run one full federated round and advance the round counter.

    Phases: (1) each site's discriminator on its own real/fake batch;
    (2) the central adversary on one fresh synthetic batch per site;
    (3) each site's generator with its coupling penalty.  A zero lambda
    skips the penalty path entirely for that site.  Non-finite losses abort
    the round (counter untouched) with :class:`RoundAbortedError`.
    """
    phi = state.measure
    d_losses: List[float] = []
    try:
        for site in state.sites:
            real = site.loader.next_batch(batch_size)
            z_d = site.pair.sample_latent(batch_size)
            d_losses.append(discriminator_step(site.pair, real, z_d, phi, step_size=step_size))

        synthetic = [site.sample_synthetic(batch_size, state.adversary.rng)
                     for site in state.sites]
        adv_loss = adversary_step(state.adversary, synthetic, step_size=step_size)

        g_losses: List[float] = []
        penalties: List[float] = []
        for i, site in enumerate(state.sites):
            z_g = site.pair.sample_latent(batch_size)
            y_g = site.pair.sample_labels(batch_size) if site.conditional else None
            lam = state.lambdas[i]
            extra: List[torch.Tensor] = []
            penalty_val = 0.0
            if lam != 0.0:
                z_pen = site.pair.latent.sample(batch_size, site.coupling_rng,
                                                dtype=site.pair.dtype)
                y_pen = None
                if site.conditional:
                    y_pen = torch.randint(0, site.pair.gen_spec.n_classes, (batch_size,),
                                          generator=site.coupling_rng)
                term = generator_global_penalty(state.adversary, site.pair.generator,
                                                z_pen, phi, lam, i, labels=y_pen)
                extra.append(term)
                penalty_val = float(term)
            g_losses.append(generator_step(site.pair, z_g, phi, step_size=step_size,
                                           extra_loss_terms=extra, labels=y_g))
            penalties.append(penalty_val)
    except NonFiniteGradientError as e:
        raise RoundAbortedError(f"round {state.round + 1} aborted: {e}") from e

    state.round += 1
    return RoundReport(round=state.round, d_losses=d_losses, adversary_loss=adv_loss,
                       g_losses=g_losses, penalties=penalties)


class CheckpointStore:
    """Directory of generator parameter snapshots plus a JSON manifest.

    Files are named ``site{ID}_epoch{E}_seed{S}.ckpt``; the manifest maps
    checkpoint id -> (site, epoch, seed, architecture hash).  Snapshots
    round-trip bit-exactly.
    """

    MANIFEST = "manifest.json"

    def __init__(self, directory: str):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)
        self._manifest_path = os.path.join(self.directory, self.MANIFEST)
        if os.path.exists(self._manifest_path):
            with open(self._manifest_path) as f:
                self.manifest: Dict[str, dict] = json.load(f)
        else:
            self.manifest = {}

    def _write_manifest(self) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(self.manifest, f, indent=1, sort_keys=True)
        os.replace(tmp, self._manifest_path)

    def save(self, pair: GanPair, site_id: int, epoch: int, seed: int) -> str:
        """Persist one generator snapshot; returns its checkpoint id."""
        ckpt_id = f"site{site_id}_epoch{epoch}_seed{seed}"
        payload = {
            "state_dict": {k: v.cpu() for k, v in pair.generator.state_dict().items()},
            "generator_spec": pair.gen_spec.to_dict(),
            "site_id": int(site_id),
            "epoch": int(epoch),
            "seed": int(seed),
            "dtype": str(pair.dtype).replace("torch.", ""),
        }
        path = os.path.join(self.directory, ckpt_id + ".ckpt")
        tmp = path + ".tmp"
        torch.save(payload, tmp)
        os.replace(tmp, path)
        self.manifest[ckpt_id] = {
            "site": int(site_id),
            "epoch": int(epoch),
            "seed": int(seed),
            "arch_hash": spec_hash(pair.gen_spec),
            "file": os.path.basename(path),
        }
        self._write_manifest()
        return ckpt_id

    def ids(self) -> List[str]:
        return sorted(self.manifest)

    def meta(self, ckpt_id: str) -> dict:
        return dict(self.manifest[ckpt_id])

    def epochs(self, site_id: int, seed: Optional[int] = None) -> List[int]:
        out = [m["epoch"] for m in self.manifest.values()
               if m["site"] == site_id and (seed is None or m["seed"] == seed)]
        return sorted(out)

    def load_generator(self, ckpt_id: str):
        """Rebuild the generator module for a checkpoint (bit-exact weights)."""
        if ckpt_id not in self.manifest:
            raise KeyError(f"unknown checkpoint id {ckpt_id!r}")
        path = os.path.join(self.directory, self.manifest[ckpt_id]["file"])
        payload = torch.load(path, weights_only=False)
        spec = GeneratorSpec.from_dict(payload["generator_spec"])
        dtype = getattr(torch, payload["dtype"])
        gen = build_generator(spec, generator=None, dtype=dtype)
        gen.load_state_dict(payload["state_dict"])
        gen.eval()
        return gen, spec


def checkpoint_generators(state: FeliciaState, epoch: int, store: CheckpointStore,
                          seed: int = 0) -> List[str]:
    """Snapshot every site's generator at ``epoch``; returns checkpoint ids."""
    return [store.save(site.pair, site_id=site.site_id, epoch=epoch, seed=seed)
            for site in state.sites]


def train_felicia(state: FeliciaState, rounds: int, batch_size: int,
                  checkpoint_every: Optional[int] = None, store: Optional[CheckpointStore] = None,
                  seed_tag: int = 0, log_every: int = 0) -> List[RoundReport]:
    """Run ``rounds`` federated rounds with optional generator checkpointing."""
    reports: List[RoundReport] = []
    for _ in range(rounds):
        report = train_round(state, batch_size)
        reports.append(report)
        if store is not None and checkpoint_every and state.round % checkpoint_every == 0:
            checkpoint_generators(state, state.round, store, seed=seed_tag)
        if log_every and state.round % log_every == 0:
            print(f"round {state.round}/{rounds}  d={np.mean(report.d_losses):.4f}  "
                  f"adv={report.adversary_loss:.4f}  g={np.mean(report.g_losses):.4f}")
    return reports
