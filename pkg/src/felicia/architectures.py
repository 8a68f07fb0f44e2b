"""Architecture descriptors and their translation into torch modules.

Generators and discriminators are described declaratively (a layer list of
dense / conv / transpose-conv entries) so the same descriptor can be loaded
from a harness config file, hashed for checkpoint manifests, and duplicated
across federation sites.  Builders enforce the two output contracts: a
generator ends in tanh (pixels in [-1, 1]) and a discriminator ends in a
sigmoid scalar in [0, 1].  The source classifier used by the federation is
the discriminator body with a widened final layer and no squashing (it
returns logits; the softmax lives in the classifier wrapper).

Conditioning follows the usual embedding recipe: the label embedding is
concatenated to the latent vector at the generator input, and to the first
flattened (dense) stage of the discriminator.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .measures import LatentPrior

LAYER_KINDS = ("dense", "conv", "conv_transpose", "flatten", "reshape")
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "none")

WEIGHT_INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    """One entry of an architecture descriptor.

    ``units`` applies to dense layers, ``filters``/``kernel``/``stride`` to
    conv layers, and ``shape`` (H, W, C) to reshape.  ``padding`` defaults to
    kernel // 2 and ``output_padding`` to stride - 1, which makes a
    stride-2 transpose conv an exact 2x upsampler for odd kernels.
    """

    kind: str
    units: Optional[int] = None
    filters: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    padding: Optional[int] = None
    output_padding: Optional[int] = None
    shape: Optional[Tuple[int, int, int]] = None
    activation: str = "none"
    batch_norm: bool = False

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "dense" and (self.units is None or self.units <= 0):
            raise ValueError("dense layer requires positive units")
        if self.kind in ("conv", "conv_transpose"):
            if self.filters is None or self.kernel is None:
                raise ValueError(f"{self.kind} layer requires filters and kernel")
        if self.kind == "reshape" and (self.shape is None or len(self.shape) != 3):
            raise ValueError("reshape layer requires shape (H, W, C)")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.kind not in ("conv", "conv_transpose"):
            d.pop("stride", None)
        if not self.batch_norm:
            d.pop("batch_norm", None)
        if self.activation == "none":
            d.pop("activation", None)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        known = {
            "kind", "units", "filters", "kernel", "stride", "padding",
            "output_padding", "shape", "activation", "batch_norm",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown layer keys: {sorted(unknown)}")
        d = dict(d)
        if "shape" in d and d["shape"] is not None:
            d["shape"] = tuple(int(x) for x in d["shape"])
        return LayerSpec(**d)


def dense(units: int, activation: str = "none", batch_norm: bool = False) -> LayerSpec:
    return LayerSpec(kind="dense", units=units, activation=activation, batch_norm=batch_norm)


def conv(filters: int, kernel: int, stride: int = 1, activation: str = "none",
         batch_norm: bool = False, padding: Optional[int] = None) -> LayerSpec:
    return LayerSpec(kind="conv", filters=filters, kernel=kernel, stride=stride,
                     activation=activation, batch_norm=batch_norm, padding=padding)


def conv_transpose(filters: int, kernel: int, stride: int = 1, activation: str = "none",
                   batch_norm: bool = False, padding: Optional[int] = None,
                   output_padding: Optional[int] = None) -> LayerSpec:
    return LayerSpec(kind="conv_transpose", filters=filters, kernel=kernel, stride=stride,
                     activation=activation, batch_norm=batch_norm, padding=padding,
                     output_padding=output_padding)


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def reshape(h: int, w: int, c: int) -> LayerSpec:
    return LayerSpec(kind="reshape", shape=(h, w, c))


@dataclass(frozen=True)
class GeneratorSpec:
    """Descriptor of a generator network.

    ``output_shape`` is (H, W, C); the final layer must use tanh so samples
    land in [-1, 1].  When ``conditional`` the forward pass takes a label
    batch and concatenates its embedding to the latent input.
    """

    latent: LatentPrior
    layers: Tuple[LayerSpec, ...]
    output_shape: Tuple[int, int, int]
    conditional: bool = False
    n_classes: int = 0
    embed_dim: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "output_shape", tuple(int(x) for x in self.output_shape))
        if not self.layers:
            raise ValueError("generator needs at least one layer")
        if self.layers[-1].activation != "tanh":
            raise ValueError("generator output must be tanh-bounded; set activation='tanh' on the last layer")
        if self.conditional and self.n_classes < 2:
            raise ValueError("conditional generator requires n_classes >= 2")

    def to_dict(self) -> dict:
        return {
            "latent": {"dimension": self.latent.dimension, "distribution": self.latent.distribution},
            "layers": [l.to_dict() for l in self.layers],
            "output_shape": list(self.output_shape),
            "conditional": self.conditional,
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "GeneratorSpec":
        known = {"latent", "layers", "output_shape", "conditional", "n_classes", "embed_dim"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        latent = LatentPrior(**d["latent"])
        layers = tuple(LayerSpec.from_dict(l) for l in d["layers"])
        return GeneratorSpec(
            latent=latent,
            layers=layers,
            output_shape=tuple(d["output_shape"]),
            conditional=bool(d.get("conditional", False)),
            n_classes=int(d.get("n_classes", 0)),
            embed_dim=int(d.get("embed_dim", 16)),
        )


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Descriptor of a discriminator network over (H, W, C) images.

    The final layer must be a 1-unit sigmoid dense layer.  The same body,
    re-headed with an n-way linear layer, serves as the federation's source
    classifier.
    """

    input_shape: Tuple[int, int, int]
    layers: Tuple[LayerSpec, ...]
    conditional: bool = False
    n_classes: int = 0
    embed_dim: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        if not self.layers:
            raise ValueError("discriminator needs at least one layer")
        last = self.layers[-1]
        if last.kind != "dense" or last.units != 1 or last.activation != "sigmoid":
            raise ValueError("discriminator must end with a 1-unit sigmoid dense layer")
        if self.conditional and self.n_classes < 2:
            raise ValueError("conditional discriminator requires n_classes >= 2")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "conditional": self.conditional,
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "DiscriminatorSpec":
        known = {"input_shape", "layers", "conditional", "n_classes", "embed_dim"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown discriminator keys: {sorted(unknown)}")
        layers = tuple(LayerSpec.from_dict(l) for l in d["layers"])
        return DiscriminatorSpec(
            input_shape=tuple(d["input_shape"]),
            layers=layers,
            conditional=bool(d.get("conditional", False)),
            n_classes=int(d.get("n_classes", 0)),
            embed_dim=int(d.get("embed_dim", 16)),
        )


def spec_hash(spec) -> str:
    """Stable hash of an architecture descriptor, used by checkpoint manifests."""
    payload = json.dumps(spec.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _activation_module(name: str) -> Optional[nn.Module]:
    if name == "none":
        return None
    return {
        "relu": nn.ReLU(),
        "leaky_relu": nn.LeakyReLU(0.2),
        "tanh": nn.Tanh(),
        "sigmoid": nn.Sigmoid(),
    }[name]


class _Step(nn.Module):
    """One executable step: an optional module plus structural bookkeeping."""

    def __init__(self, kind: str, module: Optional[nn.Module] = None,
                 shape: Optional[Tuple[int, int, int]] = None, concat_label: bool = False):
        super().__init__()
        self.kind = kind
        self.module = module
        self.shape = shape           # (C, H, W) for reshape steps
        self.concat_label = concat_label


class DescriptorNet(nn.Module):
    """Network assembled from a layer-list descriptor.

    ``forward(x, y=None)`` expects a flat latent batch for generators and an
    NCHW image batch for discriminators; ``y`` is a long tensor of class
    indices, required iff the descriptor is conditional.
    """

    def __init__(self, steps: Sequence[_Step], embedding: Optional[nn.Embedding],
                 output_image_shape: Optional[Tuple[int, int, int]] = None):
        super().__init__()
        self.steps = nn.ModuleList(steps)
        self.embedding = embedding
        self.output_image_shape = output_image_shape  # (C, H, W) or None
        self.concat_at_input = any(s.kind == "input_concat" for s in steps)

    def forward(self, x: torch.Tensor, y: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.embedding is not None and y is None:
            raise ValueError("conditional network requires labels")
        if self.embedding is None and y is not None:
            raise ValueError("unconditional network does not take labels")
        emb = None
        if self.embedding is not None:
            if y.min() < 0 or y.max() >= self.embedding.num_embeddings:
                raise ValueError("label index out of range")
            emb = self.embedding(y)
        for step in self.steps:
            if step.kind == "input_concat":
                x = torch.cat([x, emb], dim=1)
            elif step.kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif step.kind == "reshape":
                c, h, w = step.shape
                x = x.reshape(x.shape[0], c, h, w)
            elif step.kind == "concat_dense":
                x = torch.cat([x, emb], dim=1)
                x = step.module(x)
            else:
                x = step.module(x)
        if self.output_image_shape is not None and x.dim() == 2:
            c, h, w = self.output_image_shape
            x = x.reshape(x.shape[0], c, h, w)
        return x


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_transpose_out(size: int, kernel: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _assemble(layers: Sequence[LayerSpec], in_flat: Optional[int],
              in_image: Optional[Tuple[int, int, int]], embed_dim: int,
              concat_at_first_dense: bool, final_units_override: Optional[int] = None,
              strip_final_activation: bool = False):
    """Walk the descriptor, inferring shapes and instantiating modules.

    Exactly one of ``in_flat`` / ``in_image`` (C, H, W) is given.  Returns
    (steps, out_flat, out_image).
    """
    steps: List[_Step] = []
    flat, image = in_flat, in_image
    pending_concat = concat_at_first_dense
    n = len(layers)
    for idx, layer in enumerate(layers):
        is_last = idx == n - 1
        activation = layer.activation
        units = layer.units
        if is_last and final_units_override is not None:
            units = final_units_override
        if is_last and strip_final_activation:
            activation = "none"

        if layer.kind == "flatten":
            if image is None:
                raise ValueError("flatten requires an image stage")
            c, h, w = image
            flat, image = c * h * w, None
            steps.append(_Step("flatten"))
            continue
        if layer.kind == "reshape":
            h, w, c = layer.shape
            if flat is None or flat != c * h * w:
                raise ValueError(f"reshape to {layer.shape} does not match {flat} incoming features")
            image, flat = (c, h, w), None
            steps.append(_Step("reshape", shape=(c, h, w)))
            continue
        if layer.kind == "dense":
            if flat is None:
                # implicit flatten keeps MLP descriptors terse
                c, h, w = image
                flat, image = c * h * w, None
                steps.append(_Step("flatten"))
            in_features = flat
            kind = "module"
            if pending_concat:
                in_features += embed_dim
                kind = "concat_dense"
                pending_concat = False
            mods: List[nn.Module] = [nn.Linear(in_features, units)]
            if layer.batch_norm:
                mods.append(nn.BatchNorm1d(units))
            act = _activation_module(activation)
            if act is not None:
                mods.append(act)
            steps.append(_Step(kind, nn.Sequential(*mods)))
            flat = units
            continue
        # conv / conv_transpose
        if image is None:
            raise ValueError(f"{layer.kind} requires an image stage; add a reshape layer first")
        c, h, w = image
        padding = layer.padding if layer.padding is not None else layer.kernel // 2
        if layer.kind == "conv":
            mods = [nn.Conv2d(c, layer.filters, layer.kernel, stride=layer.stride, padding=padding)]
            h2 = _conv_out(h, layer.kernel, layer.stride, padding)
            w2 = _conv_out(w, layer.kernel, layer.stride, padding)
        else:
            output_padding = (layer.output_padding if layer.output_padding is not None
                              else layer.stride - 1)
            mods = [nn.ConvTranspose2d(c, layer.filters, layer.kernel, stride=layer.stride,
                                       padding=padding, output_padding=output_padding)]
            h2 = _conv_transpose_out(h, layer.kernel, layer.stride, padding, output_padding)
            w2 = _conv_transpose_out(w, layer.kernel, layer.stride, padding, output_padding)
        if h2 <= 0 or w2 <= 0:
            raise ValueError(f"layer {idx} shrinks the image to {h2}x{w2}")
        if layer.batch_norm:
            mods.append(nn.BatchNorm2d(layer.filters))
        act = _activation_module(activation)
        if act is not None:
            mods.append(act)
        steps.append(_Step("module", nn.Sequential(*mods)))
        image = (layer.filters, h2, w2)
    return steps, flat, image


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministically (re)initialize all parameters from ``generator``.

    Dense/conv weights draw from N(0, 0.02) after the DCGAN convention,
    biases start at zero, batch-norm scales at N(1, 0.02), and label
    embeddings at N(0, 1).
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, WEIGHT_INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            with torch.no_grad():
                m.weight.normal_(1.0, WEIGHT_INIT_STD, generator=generator)
                m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=generator)


def build_generator(spec: GeneratorSpec, generator: Optional[torch.Generator] = None,
                    dtype: torch.dtype = torch.float32) -> DescriptorNet:
    """Instantiate a generator module from its descriptor."""
    embed = nn.Embedding(spec.n_classes, spec.embed_dim) if spec.conditional else None
    in_flat = spec.latent.dimension + (spec.embed_dim if spec.conditional else 0)
    steps, flat, image = _assemble(spec.layers, in_flat, None, spec.embed_dim,
                                   concat_at_first_dense=False)
    if spec.conditional:
        steps = [_Step("input_concat")] + steps
    h, w, c = spec.output_shape
    if image is not None:
        if image != (c, h, w):
            raise ValueError(f"generator produces {image}, expected {(c, h, w)}")
        out_shape = None
    else:
        if flat != c * h * w:
            raise ValueError(f"generator produces {flat} features, expected {c * h * w}")
        out_shape = (c, h, w)
    net = DescriptorNet(steps, embed, output_image_shape=out_shape)
    net.to(dtype)
    if generator is not None:
        init_parameters(net, generator)
    return net


def build_discriminator(spec: DiscriminatorSpec, generator: Optional[torch.Generator] = None,
                        dtype: torch.dtype = torch.float32, n_outputs: int = 1) -> DescriptorNet:
    """Instantiate a discriminator from its descriptor.

    With ``n_outputs > 1`` the final layer is re-headed to that many units
    and its squashing removed, yielding the logits body used by the
    federation's source classifier (always unconditional).
    """
    h, w, c = spec.input_shape
    multiway = n_outputs != 1
    conditional = spec.conditional and not multiway
    embed = nn.Embedding(spec.n_classes, spec.embed_dim) if conditional else None
    steps, flat, image = _assemble(
        spec.layers, None, (c, h, w), spec.embed_dim,
        concat_at_first_dense=conditional,
        final_units_override=n_outputs if multiway else None,
        strip_final_activation=multiway,
    )
    if flat != n_outputs:
        raise ValueError(f"discriminator head produced {flat} features, expected {n_outputs}")
    net = DescriptorNet(steps, embed)
    net.to(dtype)
    if generator is not None:
        init_parameters(net, generator)
    return net


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def get_flat_params(module: nn.Module) -> np.ndarray:
    """All parameters concatenated into one float64 vector (fixed traversal order)."""
    return np.concatenate([p.detach().cpu().double().reshape(-1).numpy()
                           for p in module.parameters()])


def set_flat_params(module: nn.Module, values: np.ndarray) -> None:
    """Inverse of :func:`get_flat_params`; casts into each parameter's dtype."""
    offset = 0
    for p in module.parameters():
        n = p.numel()
        chunk = torch.from_numpy(np.asarray(values[offset:offset + n])).reshape(p.shape)
        with torch.no_grad():
            p.copy_(chunk.to(p.dtype))
        offset += n
    if offset != len(values):
        raise ValueError(f"parameter vector has {len(values)} entries, module needs {offset}")
