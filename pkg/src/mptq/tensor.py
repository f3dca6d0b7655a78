"""Dense float32 operators and a small ViT-style encoder.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every operator
returns a fresh array and never mutates its inputs.

The encoder exposes named *sites*: the points where quantization is simulated
(matmul inputs, weights, and in fully-quantized mode the inputs of Softmax and
LayerNorm). ``forward`` accepts a mapping ``site -> callable`` applied at each
site and can record the pre-quantization tensors ("taps").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import DimensionError, UnknownSiteError

LN_EPS = 1e-6

Quantizer = Callable[[np.ndarray], np.ndarray]


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return np.matmul(a, b, dtype=np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = np.matmul(x, weight.T, dtype=np.float32)
    if bias is not None:
        y = y + bias
    return y


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: last dim {x.shape[-1]} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / np.sqrt(var + np.float32(eps))
    return (normed * gamma + beta).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GeLU, ``x * Phi(x)``, evaluated in float64 then rounded."""
    x64 = np.asarray(x, dtype=np.float64)
    return (0.5 * x64 * (1.0 + erf(x64 / math.sqrt(2.0)))).astype(np.float32)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


# --------------------------------------------------------------------------
# Model containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class LayerNorm:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class EncoderBlock:
    ln1: LayerNorm
    qkv: Linear
    proj: Linear
    ln2: LayerNorm
    fc1: Linear
    fc2: Linear
    num_heads: int

    def __post_init__(self):
        dim = self.proj.out_features
        if self.qkv.out_features != 3 * dim:
            raise DimensionError("qkv output dim must be 3 x embed dim")
        if self.fc1.out_features != self.fc2.in_features:
            raise DimensionError("fc1 output dim must equal fc2 input dim")
        for ln in (self.ln1, self.ln2):
            if ln.gamma.shape != (dim,) or ln.beta.shape != (dim,):
                raise DimensionError("LayerNorm parameters must match the embed dim")
        if dim % self.num_heads:
            raise DimensionError("embed dim must be divisible by the head count")


@dataclass(frozen=True)
class ToyViT:
    patch_embed: Linear
    blocks: tuple[EncoderBlock, ...]
    norm: LayerNorm
    head: Linear

    @property
    def embed_dim(self) -> int:
        return self.patch_embed.out_features

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def in_dim(self) -> int:
        return self.patch_embed.in_features

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {
            "patch_embed.weight": self.patch_embed.weight,
            "patch_embed.bias": self.patch_embed.bias,
        }
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            for name in ("ln1", "ln2"):
                ln = getattr(blk, name)
                out[p + name + ".gamma"] = ln.gamma
                out[p + name + ".beta"] = ln.beta
            for name in ("qkv", "proj", "fc1", "fc2"):
                lin = getattr(blk, name)
                out[p + name + ".weight"] = lin.weight
                out[p + name + ".bias"] = lin.bias
        out["norm.gamma"] = self.norm.gamma
        out["norm.beta"] = self.norm.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def config(self) -> dict:
        return {
            "depth": self.depth,
            "embed_dim": self.embed_dim,
            "in_dim": self.in_dim,
            "num_classes": self.num_classes,
            "num_heads": [b.num_heads for b in self.blocks],
        }

    @classmethod
    def from_state_dict(cls, tensors: Mapping[str, np.ndarray], config: Mapping) -> "ToyViT":
        def lin(prefix):
            return Linear(as_tensor(tensors[prefix + ".weight"]), as_tensor(tensors[prefix + ".bias"]))

        def ln(prefix):
            return LayerNorm(as_tensor(tensors[prefix + ".gamma"]), as_tensor(tensors[prefix + ".beta"]))

        blocks = tuple(
            EncoderBlock(
                ln1=ln(f"blocks.{i}.ln1"),
                qkv=lin(f"blocks.{i}.qkv"),
                proj=lin(f"blocks.{i}.proj"),
                ln2=ln(f"blocks.{i}.ln2"),
                fc1=lin(f"blocks.{i}.fc1"),
                fc2=lin(f"blocks.{i}.fc2"),
                num_heads=int(config["num_heads"][i]),
            )
            for i in range(int(config["depth"]))
        )
        return cls(lin("patch_embed"), blocks, ln("norm"), lin("head"))

    def with_block(self, index: int, block: EncoderBlock) -> "ToyViT":
        blocks = list(self.blocks)
        blocks[index] = block
        return replace(self, blocks=tuple(blocks))


def init_toy_vit(
    seed: int,
    *,
    in_dim: int = 32,
    embed_dim: int = 32,
    depth: int = 4,
    num_heads: int = 4,
    mlp_ratio: int = 4,
    num_classes: int = 10,
    outlier_channels: int = 2,
    outlier_gain: float = 4.0,
) -> ToyViT:
    """Seeded random encoder.

    Linear weights are N(0, 1/fan_in). LayerNorm affine parameters get a few
    shared high-gain, offset channels so the post-LayerNorm activations show
    the channel outliers and asymmetry that real ViTs have; the weight columns
    that read those channels are scaled down by the same gain, as in trained
    models, so the outliers do not dominate the layer outputs.
    """
    rng = np.random.default_rng(seed)
    hidden = embed_dim * mlp_ratio
    outliers = rng.choice(embed_dim, size=min(outlier_channels, embed_dim), replace=False)

    def lin(fan_in, fan_out, after_ln=False):
        w = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
        b = 0.02 * rng.standard_normal(fan_out)
        if after_ln:
            w[:, outliers] /= outlier_gain
        return Linear(as_tensor(w), as_tensor(b))

    def ln():
        gamma = 1.0 + 0.1 * rng.standard_normal(embed_dim)
        beta = 0.2 * rng.standard_normal(embed_dim)
        gamma[outliers] *= outlier_gain
        beta[outliers] -= 0.5 * outlier_gain
        return LayerNorm(as_tensor(gamma), as_tensor(beta))

    patch = lin(in_dim, embed_dim)
    blocks = []
    for _ in range(depth):
        blocks.append(
            EncoderBlock(
                ln1=ln(),
                qkv=lin(embed_dim, 3 * embed_dim, after_ln=True),
                proj=lin(embed_dim, embed_dim),
                ln2=ln(),
                fc1=lin(embed_dim, hidden, after_ln=True),
                fc2=lin(hidden, embed_dim),
                num_heads=num_heads,
            )
        )
    norm = ln()
    return ToyViT(patch, tuple(blocks), norm, lin(embed_dim, num_classes, after_ln=True))


# --------------------------------------------------------------------------
# Quantizable sites
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Site:
    name: str
    kind: str  # "weight" or "activation"
    quantizer: str = "uniform"  # "uniform" or "opt-m"
    operator_io: bool = False  # Softmax/LayerNorm input, fully-quantized mode only

    @property
    def block(self) -> str:
        parts = self.name.split(".")
        return ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]


def quantizable_sites(model: ToyViT, fully_quantized: bool = False) -> list[Site]:
    sites = [Site("patch_embed.weight", "weight"), Site("patch_embed.input", "activation")]
    for i in range(model.depth):
        p = f"blocks.{i}."
        if fully_quantized:
            sites.append(Site(p + "ln1.input", "activation", operator_io=True))
        sites += [
            Site(p + "qkv.weight", "weight"),
            Site(p + "qkv.input", "activation"),
            Site(p + "attn.q", "activation"),
            Site(p + "attn.k", "activation"),
        ]
        if fully_quantized:
            sites.append(Site(p + "attn.scores", "activation", operator_io=True))
        sites += [
            Site(p + "attn.probs", "activation"),
            Site(p + "attn.v", "activation"),
            Site(p + "proj.weight", "weight"),
            Site(p + "proj.input", "activation"),
        ]
        if fully_quantized:
            sites.append(Site(p + "ln2.input", "activation", operator_io=True))
        sites += [
            Site(p + "fc1.weight", "weight"),
            Site(p + "fc1.input", "activation"),
            Site(p + "fc2.weight", "weight"),
            Site(p + "fc2.input", "activation", quantizer="opt-m"),
        ]
    if fully_quantized:
        sites.append(Site("norm.input", "activation", operator_io=True))
    sites += [Site("head.weight", "weight"), Site("head.input", "activation")]
    return sites


def site_names(model: ToyViT, fully_quantized: bool = True) -> list[str]:
    return [s.name for s in quantizable_sites(model, fully_quantized)]


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


class _Sites:
    """Applies per-site quantizers and records taps during one forward pass."""

    def __init__(self, quantizers: Mapping[str, Quantizer] | None, tap_names: Iterable[str] | None):
        self.quantizers = quantizers or {}
        self.tap_names = frozenset(tap_names or ())
        self.taps: dict[str, np.ndarray] = {}

    def __call__(self, name: str, t: np.ndarray) -> np.ndarray:
        if name in self.tap_names:
            self.taps[name] = t
        q = self.quantizers.get(name)
        return t if q is None else as_tensor(q(t))


def _attention(blk: EncoderBlock, h: np.ndarray, site: _Sites, p: str) -> np.ndarray:
    bsz, tokens, dim = h.shape
    heads = blk.num_heads
    hd = dim // heads
    qkv = linear(h, site(p + "qkv.weight", blk.qkv.weight), blk.qkv.bias)
    qkv = qkv.reshape(bsz, tokens, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    q = site(p + "attn.q", np.ascontiguousarray(q))
    k = site(p + "attn.k", np.ascontiguousarray(k))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * np.float32(1.0 / math.sqrt(hd))
    scores = site(p + "attn.scores", scores)
    probs = site(p + "attn.probs", softmax(scores))
    v = site(p + "attn.v", np.ascontiguousarray(v))
    out = matmul(probs, v).transpose(0, 2, 1, 3).reshape(bsz, tokens, dim)
    out = site(p + "proj.input", np.ascontiguousarray(out))
    return linear(out, site(p + "proj.weight", blk.proj.weight), blk.proj.bias)


def _block(blk: EncoderBlock, x: np.ndarray, site: _Sites, p: str) -> np.ndarray:
    h = site(p + "ln1.input", x)
    h = layer_norm(h, blk.ln1.gamma, blk.ln1.beta)
    h = site(p + "qkv.input", h)
    x = x + _attention(blk, h, site, p)
    h = site(p + "ln2.input", x)
    h = layer_norm(h, blk.ln2.gamma, blk.ln2.beta)
    h = site(p + "fc1.input", h)
    h = gelu(linear(h, site(p + "fc1.weight", blk.fc1.weight), blk.fc1.bias))
    h = site(p + "fc2.input", h)
    return x + linear(h, site(p + "fc2.weight", blk.fc2.weight), blk.fc2.bias)


def _forward(model: ToyViT, x: np.ndarray, site: _Sites) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != model.in_dim:
        raise DimensionError(f"expected input (batch, tokens, {model.in_dim}), got {x.shape}")
    x = site("patch_embed.input", x)
    x = linear(x, site("patch_embed.weight", model.patch_embed.weight), model.patch_embed.bias)
    for i, blk in enumerate(model.blocks):
        x = _block(blk, x, site, f"blocks.{i}.")
    x = site("norm.input", x)
    x = layer_norm(x, model.norm.gamma, model.norm.beta)
    pooled = site("head.input", x.mean(axis=1))
    return linear(pooled, site("head.weight", model.head.weight), model.head.bias)


def forward(
    model: ToyViT,
    x: np.ndarray,
    quantizers: Mapping[str, Quantizer] | None = None,
) -> np.ndarray:
    """Logits of shape (batch, classes); ``quantizers`` maps site -> fake-quantizer."""
    return _forward(model, x, _Sites(quantizers, None))


def forward_with_taps(
    model: ToyViT,
    x: np.ndarray,
    tap_spec: Iterable[str] = (),
    quantizers: Mapping[str, Quantizer] | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Forward pass that also returns the pre-quantization tensor at each tapped site.

    Weight sites tap the weight matrix itself.
    """
    tap_spec = list(tap_spec)
    valid = set(site_names(model, fully_quantized=True))
    for name in tap_spec:
        if name not in valid:
            raise UnknownSiteError(name)
    site = _Sites(quantizers, tap_spec)
    logits = _forward(model, x, site)
    return logits, {name: site.taps[name] for name in tap_spec}
