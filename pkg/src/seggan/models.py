"""The four segmentation generators, the attention gate, the four fully
connected discriminators, and their pairing into adversarial models.

Generator family (all map (1, H, W) images to (1, H, W) logits, H and W
divisible by 16):

* ``unet`` - encoder/decoder with four pooling levels and skip concatenation.
* ``attention_unet`` - each skip is re-weighted by an attention gate fed with
  the upsampled decoder stream before concatenation (4 gates).
* ``advanced_attention_unet`` - every encoder output is additionally pushed
  down to all deeper levels through cascaded stride-2 convolutions; a decoder
  level gates the concatenation of everything that arrived on its level
  (4 gates, 6 transmission convolutions at depth 4).
* ``full_attention_unet`` - attention runs on the encoder side instead: each
  non-topside encoder level is gated against the next deeper one, and the
  decoder concatenates the gate outputs (3 gates).

Discriminators score a flattened (ground truth, prediction) pair and differ
along two axes: depth of the linear chain (d4 vs d6) and per-layer thickness
(d4v, d5v add same-width linear+ReLU stages).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import (
    Conv2d,
    ConvTranspose2d,
    DoubleConv,
    Dropout,
    Linear,
    Module,
    ModuleList,
    channel_scale,
    flatten,
    max_pool2d,
    relu,
    sigmoid,
    upsample_nearest2x,
)
from .seeding import stream_rng
from .tensor import ShapeError, Tensor

__all__ = [
    "GENERATOR_TOPOLOGIES",
    "DISCRIMINATOR_DESIGNS",
    "GeneratorSpec",
    "DiscriminatorSpec",
    "AttentionGate",
    "UNet",
    "AttentionUNet",
    "AdvancedAttentionUNet",
    "FullAttentionUNet",
    "Discriminator",
    "GanModel",
    "build_generator",
    "build_discriminator",
    "build_combined",
]

GENERATOR_TOPOLOGIES = ("unet", "attention_unet", "advanced_attention_unet", "full_attention_unet")
DISCRIMINATOR_DESIGNS = ("d4", "d6", "d4v", "d5v")


@dataclass(frozen=True)
class GeneratorSpec:
    """Declarative description of a generator build."""

    topology: str = "unet"
    base_channels: int = 64
    in_channels: int = 1
    out_channels: int = 1
    upsample: str = "tconv"  # "tconv" (learned, halves channels) or "nearest"

    def __post_init__(self):
        if self.topology not in GENERATOR_TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; choose from {GENERATOR_TOPOLOGIES}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.upsample not in ("tconv", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")


@dataclass(frozen=True)
class DiscriminatorSpec:
    design: str = "d4"
    input_width: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.design not in DISCRIMINATOR_DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DISCRIMINATOR_DESIGNS}")
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")


class AttentionGate(Module):
    """Additive attention over a feature map.

    ``g`` is the map being re-weighted (the skip-side input) and ``x_l`` the
    coarser signal paired with it.  Both go through 1x1 convolutions into a
    shared intermediate width; ``x_l`` is aligned to ``g``'s grid by nearest
    2x upsampling (or 2x2 max pooling when it is finer).  The coefficient map
    alpha = sigmoid(psi(relu(Wg g + Wx x_l))) multiplies every channel of
    ``g``, so the output keeps g's shape.  The map from the latest forward is
    kept on ``last_alpha`` for inspection.
    """

    def __init__(self, c_g: int, c_x: int, rng: np.random.Generator, c_int: int | None = None):
        super().__init__()
        if c_int is None:
            c_int = max(1, c_g // 2)
        self.wg = Conv2d(c_g, c_int, 1, rng)
        self.wx = Conv2d(c_x, c_int, 1, rng)
        self.psi = Conv2d(c_int, 1, 1, rng, init="xavier")
        self.last_alpha = None

    @staticmethod
    def _align(x: ad.Node, target_hw: tuple[int, int]) -> ad.Node:
        th, tw = target_hw
        h, w = x.shape[1], x.shape[2]
        while h < th or w < tw:
            if th % h or tw % w or (th // h) != (tw // w):
                raise ShapeError(f"cannot align {x.shape[1:]} to {target_hw}")
            x = upsample_nearest2x(x)
            h, w = x.shape[1], x.shape[2]
        while h > th or w > tw:
            if h % th or w % tw or (h // th) != (w // tw):
                raise ShapeError(f"cannot align {x.shape[1:]} to {target_hw}")
            x = max_pool2d(x)
            h, w = x.shape[1], x.shape[2]
        if (h, w) != (th, tw):
            raise ShapeError(f"cannot align {x.shape[1:]} to {target_hw}")
        return x

    def __call__(self, g: ad.Node, x_l: ad.Node) -> ad.Node:
        q = self.wg(g)
        r = self._align(self.wx(x_l), (g.shape[1], g.shape[2]))
        alpha = sigmoid(self.psi(relu(q + r)))
        self.last_alpha = alpha.value.data
        return channel_scale(g, alpha)


class _GeneratorBase(Module):
    """Shared encoder/decoder scaffolding for the four topologies."""

    DEPTH = 4

    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        # Channels double per level; index 4 is the bottom block.
        self.channels = [b * (2**i) for i in range(self.DEPTH + 1)]
        c = self.channels
        self.encoders = ModuleList(
            [DoubleConv(spec.in_channels if i == 0 else c[i - 1], c[i], rng) for i in range(self.DEPTH)]
        )
        self.bottom = DoubleConv(c[3], c[4], rng)
        if spec.upsample == "tconv":
            self.ups = ModuleList([ConvTranspose2d(c[i + 1], c[i], rng) for i in range(self.DEPTH)])
            self._up_channels = [c[i] for i in range(self.DEPTH)]
        else:
            self.ups = None
            self._up_channels = [c[i + 1] for i in range(self.DEPTH)]
        self.decoders = ModuleList(
            [DoubleConv(self._skip_channels(i) + self._up_channels[i], c[i], rng) for i in range(self.DEPTH)]
        )
        self.head = Conv2d(c[0], spec.out_channels, 1, rng, init="xavier")
        self.gates = ModuleList([])

    # Hooks the variants override -------------------------------------------------
    def _skip_channels(self, level: int) -> int:
        return self.channels[level]

    def _skip(self, level: int, enc, bottom, up: ad.Node) -> ad.Node:
        raise NotImplementedError

    # -----------------------------------------------------------------------------
    def attention_gate_count(self) -> int:
        return len(self.gates)

    def _check_input(self, x: ad.Node) -> None:
        if x.value.ndim != 3 or x.shape[0] != self.spec.in_channels:
            raise ShapeError(f"expected ({self.spec.in_channels}, H, W) input, got {x.shape}")
        h, w = x.shape[1], x.shape[2]
        if h % 16 or w % 16:
            raise ShapeError(f"H and W must be divisible by 16, got {(h, w)}")

    def _upsample(self, level: int, stream: ad.Node) -> ad.Node:
        if self.ups is not None:
            return self.ups[level](stream)
        return upsample_nearest2x(stream)

    def _encode(self, x: ad.Node):
        enc = []
        h = x
        for i in range(self.DEPTH):
            if i > 0:
                h = max_pool2d(h)
            h = self.encoders[i](h)
            enc.append(h)
        bottom = self.bottom(max_pool2d(enc[-1]))
        return enc, bottom

    def __call__(self, x: ad.Node) -> ad.Node:
        self._check_input(x)
        enc, bottom = self._encode(x)
        stream = bottom
        for level in range(self.DEPTH - 1, -1, -1):
            up = self._upsample(level, stream)
            skip = self._skip(level, enc, bottom, up)
            stream = self.decoders[level](ad.concat([skip, up], axis=0))
        return self.head(stream)


class UNet(_GeneratorBase):
    """Plain encoder/decoder with raw skip concatenation."""

    def _skip(self, level, enc, bottom, up):
        return enc[level]


class AttentionUNet(_GeneratorBase):
    """Skips pass an attention gate fed by the upsampled decoder stream."""

    def __init__(self, spec, rng):
        super().__init__(spec, rng)
        self.gates = ModuleList(
            [AttentionGate(self.channels[i], self._up_channels[i], rng) for i in range(self.DEPTH)]
        )

    def _skip(self, level, enc, bottom, up):
        return self.gates[level](enc[level], up)


class AdvancedAttentionUNet(_GeneratorBase):
    """Encoder outputs are cascaded down to every deeper level before gating.

    Each encoder level j owns a chain of stride-2 convolutions producing a
    representation of its output on every deeper level (the topmost output is
    convolved three times at depth 4, giving 3+2+1 = 6 transmission convs).
    Decoder level i gates the concatenation of its own skip plus all routed
    representations, with the upsampled decoder stream as the pairing signal.
    """

    def __init__(self, spec, rng):
        super().__init__(spec, rng)
        c = self.channels
        chains = []
        for j in range(self.DEPTH - 1):
            chains.append(
                ModuleList(
                    [Conv2d(c[k - 1], c[k], 3, rng, stride=2, pad=1) for k in range(j + 1, self.DEPTH)]
                )
            )
        self.transmit = ModuleList(chains)
        self.gates = ModuleList(
            [AttentionGate((i + 1) * c[i], self._up_channels[i], rng) for i in range(self.DEPTH)]
        )

    def transmission_conv_count(self) -> int:
        return sum(len(chain) for chain in self.transmit)

    def _skip_channels(self, level):
        return (level + 1) * self.channels[level]

    def __call__(self, x: ad.Node) -> ad.Node:
        self._check_input(x)
        enc, bottom = self._encode(x)
        # routed[j][i] is encoder j's representation on level i (i >= j)
        routed = []
        for j in range(self.DEPTH):
            reps = {j: enc[j]}
            if j < self.DEPTH - 1:
                h = enc[j]
                for step, conv in enumerate(self.transmit[j]):
                    h = conv(h)
                    reps[j + 1 + step] = h
            routed.append(reps)
        stream = bottom
        for level in range(self.DEPTH - 1, -1, -1):
            up = self._upsample(level, stream)
            gathered = ad.concat([routed[j][level] for j in range(level + 1)], axis=0)
            skip = self.gates[level](gathered, up)
            stream = self.decoders[level](ad.concat([skip, up], axis=0))
        return self.head(stream)


class FullAttentionUNet(_GeneratorBase):
    """Attention between adjacent encoder levels; the topside skip stays raw.

    For each level below the topside, the level's encoding is gated against
    the next deeper encoding (the bottom block standing in below the last
    level), and the decoder concatenates the gate output instead of the raw
    skip.  3 gates at depth 4.
    """

    def __init__(self, spec, rng):
        super().__init__(spec, rng)
        c = self.channels
        # gates for levels 1..3; x_l comes from level k+1 (bottom for k=3)
        self.gates = ModuleList(
            [AttentionGate(c[k], c[k + 1], rng) for k in range(1, self.DEPTH)]
        )

    def _skip(self, level, enc, bottom, up):
        if level == 0:
            return enc[0]
        deeper = enc[level + 1] if level + 1 < self.DEPTH else bottom
        return self.gates[level - 1](enc[level], deeper)


_GENERATOR_CLASSES = {
    "unet": UNet,
    "attention_unet": AttentionUNet,
    "advanced_attention_unet": AdvancedAttentionUNet,
    "full_attention_unet": FullAttentionUNet,
}


class Discriminator(Module):
    """Fully connected pair classifier emitting a probability in (0, 1).

    The chain is a sequence of forepart layers (linear + ReLU + dropout, with
    the v-variants inserting same-width linear+ReLU stages before the
    dropout) and one rear layer (linear to width 1 followed by sigmoid).
    ``forward_logit`` exposes the pre-sigmoid value for numerically stable
    losses.
    """

    _FOREPART = {
        "d4": [512, 1024, 256, 64],
        "d6": [512, 1024, 512, 256, 128, 64],
        "d4v": [512, 1024, 256, 64],
        "d5v": [512, 1024, 256, 64, 64],
    }
    # number of same-width linear+ReLU repeats per forepart layer
    _REPEATS = {
        "d4": [0, 0, 0, 0],
        "d6": [0, 0, 0, 0, 0, 0],
        "d4v": [1, 1, 1, 1],
        "d5v": [1, 2, 2, 1, 1],
    }

    def __init__(self, spec: DiscriminatorSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        kinds: list[str] = []
        stages = ModuleList([])
        width = spec.input_width
        for out_width, repeats in zip(self._FOREPART[spec.design], self._REPEATS[spec.design]):
            stages.append(Linear(width, out_width, rng))
            kinds.append("linear")
            kinds.append("relu")
            for _ in range(repeats):
                stages.append(Linear(out_width, out_width, rng))
                kinds.append("linear")
                kinds.append("relu")
            stages.append(Dropout(spec.dropout_rate))
            kinds.append("dropout")
            width = out_width
        stages.append(Linear(width, 1, rng, init="xavier"))
        kinds.append("linear")
        self.stages = stages
        self.kinds = kinds

    def linear_layer_count(self) -> int:
        return self.kinds.count("linear")

    def forward_logit(self, x: ad.Node) -> ad.Node:
        if x.value.ndim != 1 or x.shape[0] != self.spec.input_width:
            raise ShapeError(f"expected flat input of width {self.spec.input_width}, got {x.shape}")
        it = iter(self.stages)
        h = x
        for kind in self.kinds:
            if kind == "relu":
                h = relu(h)
            else:
                h = next(it)(h)
        return h

    def __call__(self, x: ad.Node) -> ad.Node:
        return sigmoid(self.forward_logit(x))


class GanModel(Module):
    """A generator/discriminator pair; generator-only forward is transparent."""

    def __init__(self, generator: _GeneratorBase, discriminator: Discriminator):
        super().__init__()
        self.generator = generator
        self.discriminator = discriminator

    def __call__(self, x: ad.Node) -> ad.Node:
        return self.generator(x)

    def pair_logit(self, reference: ad.Node, candidate: ad.Node) -> ad.Node:
        """Discriminator logit for a (ground truth, candidate mask) pair."""
        pair = ad.concat([flatten(reference), flatten(candidate)], axis=0)
        return self.discriminator.forward_logit(pair)

    def pair_score(self, reference: ad.Node, candidate: ad.Node) -> ad.Node:
        return sigmoid(self.pair_logit(reference, candidate))


def build_generator(spec: GeneratorSpec, seed: int) -> _GeneratorBase:
    """Deterministically build a generator; identical (spec, seed) gives identical weights."""
    rng = stream_rng(seed, "generator_init")
    return _GENERATOR_CLASSES[spec.topology](spec, rng)


def build_discriminator(design: str, input_width: int, seed: int, dropout_rate: float = 0.5) -> Discriminator:
    spec = DiscriminatorSpec(design=design, input_width=input_width, dropout_rate=dropout_rate)
    return Discriminator(spec, stream_rng(seed, "discriminator_init"))


def build_combined(
    gen_spec: GeneratorSpec,
    disc_design: str,
    image_hw: tuple[int, int],
    seed: int,
    dropout_rate: float = 0.5,
) -> GanModel:
    """Pair any generator topology with any discriminator design.

    The discriminator sees the ground truth and the prediction flattened and
    concatenated, so its input width is twice the generator's output size.
    """
    h, w = image_hw
    width = 2 * gen_spec.out_channels * h * w
    generator = build_generator(gen_spec, seed)
    discriminator = build_discriminator(disc_design, width, seed, dropout_rate)
    return GanModel(generator, discriminator)
