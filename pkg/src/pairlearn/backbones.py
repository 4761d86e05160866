"""The two branches: a small residual CNN and a small vision transformer.

Both emit a BranchOutput carrying the pre-classifier embedding H and the
logits Z. When the branches disagree on embedding width, an affine bridge
owned by the narrower branch projects its H up to the wider width; logits
always come from the branch's own unbridged feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConfigError, Layer
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description for one branch."""

    kind: str  # "conv" or "transformer"
    depth: int
    width: int
    classes: int
    heads: int | None = None
    patch: int | None = None

    def validate(self, image_size: int, channels: int) -> None:
        if self.kind not in ("conv", "transformer"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be positive, got {self.depth}")
        if self.width < 4:
            raise ConfigError(f"width must be at least 4, got {self.width}")
        if self.classes < 2:
            raise ConfigError(f"class count must be at least 2, got {self.classes}")
        if self.kind == "conv":
            if self.heads is not None or self.patch is not None:
                raise ConfigError("heads and patch apply only to transformer backbones")
            if self.width % (1 << (self.depth - 1)) != 0:
                raise ConfigError(
                    f"conv width {self.width} must be divisible by 2^(depth-1)={1 << (self.depth - 1)}"
                )
        else:
            if self.heads is None or self.patch is None:
                raise ConfigError("transformer backbones need heads and patch")
            if self.width % self.heads != 0:
                raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")
            if image_size % self.patch != 0:
                raise ConfigError(f"patch {self.patch} does not divide image size {image_size}")
        del channels


@dataclass
class BranchOutput:
    """Per-branch forward result: embeddings H (N, d) and logits Z (N, C)."""

    embeddings: Tensor
    logits: Tensor


class TinyCnn(Layer):
    """Residual stages with doubling widths, global average pooling, linear head.

    The default (depth 4, width 128) runs widths 16/32/64/128 with strides
    1/2/2/2, about 0.3M parameters on 32x32 inputs.
    """

    def __init__(self, spec: BackboneSpec, channels: int, rng: np.random.Generator):
        super().__init__()
        widths = [spec.width >> (spec.depth - 1 - i) for i in range(spec.depth)]
        self.stem = self._add_child("stem", nn.Conv2d(channels, widths[0], 3, rng, stride=1, pad=1))
        self.stem_bn = self._add_child("stem_bn", nn.BatchNorm2d(widths[0]))
        self.stages: list[nn.ResidualBlock] = []
        c_in = widths[0]
        for i, c_out in enumerate(widths):
            stride = 1 if i == 0 else 2
            blk = nn.ResidualBlock(c_in, c_out, stride, rng)
            self._add_child(f"stage{i}", blk)
            self.stages.append(blk)
            c_in = c_out
        self.head = self._add_child("head", nn.Linear(c_in, spec.classes, rng, scheme="kaiming"))
        self.embed_dim = c_in
        self.spec = spec

    def __call__(self, x: Tensor, train: bool) -> tuple[Tensor, Tensor]:
        y = T.relu(self.stem_bn(self.stem(x), train))
        for blk in self.stages:
            y = blk(y, train)
        h = T.mean(y, axis=(2, 3))
        return h, self.head(h)


class TinyVit(Layer):
    """Patch embedding, class token, pre-norm transformer blocks, linear head.

    The default (depth 4, width 128, 4 heads, patch 4) is about 0.8M
    parameters on 32x32 inputs; H is the class token after the final norm.
    """

    mlp_ratio = 4

    def __init__(self, spec: BackboneSpec, channels: int, image_size: int,
                 rng: np.random.Generator):
        super().__init__()
        self.patch_embed = self._add_child(
            "patch_embed", nn.PatchEmbed(channels, image_size, spec.patch, spec.width, rng)
        )
        tokens = self.patch_embed.tokens + 1
        self.cls = self._add_param("cls", nn.trunc_normal((1, 1, spec.width), 0.02, rng))
        self.pos = self._add_param("pos", nn.trunc_normal((1, tokens, spec.width), 0.02, rng))
        self.blocks: list[nn.TransformerBlock] = []
        for i in range(spec.depth):
            blk = nn.TransformerBlock(spec.width, spec.heads, self.mlp_ratio, rng)
            self._add_child(f"block{i}", blk)
            self.blocks.append(blk)
        self.norm = self._add_child("norm", nn.LayerNorm(spec.width))
        self.head = self._add_child("head", nn.Linear(spec.width, spec.classes, rng))
        self.embed_dim = spec.width
        self.spec = spec

    def __call__(self, x: Tensor, train: bool) -> tuple[Tensor, Tensor]:
        del train  # no stochastic layers; kept for a uniform branch interface
        tok = self.patch_embed(x)
        n = tok.shape[0]
        cls = T.add(self.cls, Tensor(np.zeros((n, 1, self.embed_dim), dtype=np.float32)))
        seq = T.add(T.concat([cls, tok], axis=1), self.pos)
        for blk in self.blocks:
            seq = blk(seq)
        h = T.reshape(
            T.gather_rows(self.norm(seq), [0], axis=1), (n, self.embed_dim)
        )
        return h, self.head(h)


class Branch(Layer):
    """A backbone plus its optional affine bridge up to the pair width."""

    def __init__(self, backbone: Layer, bridge_to: int | None, rng: np.random.Generator):
        super().__init__()
        self.backbone = self._add_child("backbone", backbone)
        self.bridge = None
        if bridge_to is not None and bridge_to != backbone.embed_dim:
            self.bridge = self._add_child(
                "bridge", nn.Linear(backbone.embed_dim, bridge_to, rng)
            )
        self.embed_dim = bridge_to if self.bridge is not None else backbone.embed_dim

    def __call__(self, x: Tensor, train: bool) -> BranchOutput:
        h, z = self.backbone(x, train)
        if self.bridge is not None:
            h = self.bridge(h)
        return BranchOutput(embeddings=h, logits=z)


def build_backbone(spec: BackboneSpec, channels: int, image_size: int,
                   rng: np.random.Generator) -> Layer:
    spec.validate(image_size, channels)
    if spec.kind == "conv":
        return TinyCnn(spec, channels, rng)
    return TinyVit(spec, channels, image_size, rng)


def branch_rng(seed: int, index: int) -> np.random.Generator:
    """Generator derived from (seed, branch index) only, independent of mode."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_pair(spec_a: BackboneSpec, spec_b: BackboneSpec, channels: int,
               image_size: int, seed: int) -> tuple[Branch, Branch]:
    """Two branches with the narrower one bridged up to the wider width."""
    if spec_a.classes != spec_b.classes:
        raise ConfigError(
            f"branches disagree on class count: {spec_a.classes} vs {spec_b.classes}"
        )
    rng_a = branch_rng(seed, 0)
    rng_b = branch_rng(seed, 1)
    bb_a = build_backbone(spec_a, channels, image_size, rng_a)
    bb_b = build_backbone(spec_b, channels, image_size, rng_b)
    d = max(bb_a.embed_dim, bb_b.embed_dim)
    return Branch(bb_a, d, rng_a), Branch(bb_b, d, rng_b)
