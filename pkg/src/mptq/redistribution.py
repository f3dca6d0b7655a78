"""Equivalent per-channel shift/smooth transforms fused into LayerNorm -> Linear pairs.

A LayerNorm output ``Y`` feeding ``Y @ W.T + b`` is rewritten as::

    ((Y - mu) / eps) @ (eps * W).T + (b + W @ mu)

and the division is folded into the LayerNorm affine parameters, so the fused
model has exactly the same operators and shapes as the original.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError
from .quant import QuantSpec, fake_quantize, minmax_scale
from .tensor import LayerNorm, Linear, ToyViT, as_tensor

STRATEGIES = ("none", "sq", "sq-b", "osup-shift", "osup-smooth", "osup")


@dataclass(frozen=True)
class RedistParams:
    epsilon: np.ndarray
    mu: np.ndarray
    strategy: str = "sq-b"

    def __post_init__(self):
        if self.epsilon.shape != self.mu.shape or self.epsilon.ndim != 1:
            raise DimensionError("epsilon and mu must be vectors of equal length")
        if not np.all(self.epsilon > 0):
            raise ValueError("epsilon must be strictly positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @classmethod
    def identity(cls, channels: int) -> "RedistParams":
        return cls(np.ones(channels, np.float32), np.zeros(channels, np.float32), "none")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "epsilon": [float(v) for v in self.epsilon],
            "mu": [float(v) for v in self.mu],
        }

    @classmethod
    def from_dict(cls, d) -> "RedistParams":
        return cls(as_tensor(d["epsilon"]), as_tensor(d["mu"]), d["strategy"])


@dataclass(frozen=True)
class FusedPair:
    gamma: np.ndarray
    beta: np.ndarray
    weight: np.ndarray
    bias: np.ndarray


def _channels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    return y.reshape(-1, y.shape[-1])


def compute_sq_epsilon(y, weight, alpha: float = 0.5) -> np.ndarray:
    """SmoothQuant factor ``(max|Y_j| / max|W_j|)^alpha`` per input channel j.

    ``weight`` is (out, in); its column j multiplies activation channel j.
    Channels where either maximum is zero get 1.
    """
    y = _channels(y)
    weight = np.asarray(weight)
    if weight.shape[1] != y.shape[1]:
        raise DimensionError(f"activation has {y.shape[1]} channels, weight expects {weight.shape[1]}")
    a = np.abs(y).max(axis=0).astype(np.float64)
    w = np.abs(weight).max(axis=0).astype(np.float64)
    eps = np.ones_like(a)
    ok = (a > 0) & (w > 0)
    eps[ok] = (a[ok] / w[ok]) ** alpha
    return eps.astype(np.float32)


def compute_sqb_mu(y) -> np.ndarray:
    y = _channels(y)
    if y.shape[0] == 0:
        raise ValueError("empty calibration activation")
    return y.astype(np.float64).mean(axis=0).astype(np.float32)


def compute_osup_mu(y) -> np.ndarray:
    """Range midpoint ``(max + min) / 2`` per channel."""
    y = _channels(y).astype(np.float64)
    return ((y.max(axis=0) + y.min(axis=0)) / 2).astype(np.float32)


def _osup_epsilon(t: float, ranges: np.ndarray) -> np.ndarray:
    eps = np.ones_like(ranges)
    big = ranges > t
    eps[big] = ranges[big] / t
    return eps


def compute_osup_epsilon(
    y,
    mu,
    weight,
    bits: int = 8,
    weight_bits: int | None = None,
    grid_size: int = 20,
) -> np.ndarray:
    """Outlier-Suppression+ style smoothing with a grid-searched threshold t.

    Channels whose shifted range ``max|Y_j - mu_j|`` exceeds t are squeezed to
    t (``eps_j = range_j / t``); narrower channels keep ``eps_j = 1``. The t
    candidates are ``k/grid_size`` of the widest range; the one minimizing the
    linear-layer output MSE under fake quantization wins (smallest t on ties).
    Weights are quantized only if ``weight_bits`` is given.
    """
    y = _channels(y).astype(np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    shifted = y - np.asarray(mu, dtype=np.float64)
    ranges = np.abs(shifted).max(axis=0)
    top = float(ranges.max()) if ranges.size else 0.0
    if top == 0.0:
        return np.ones(y.shape[1], np.float32)
    reference = shifted @ weight.T
    best_err, best_eps = np.inf, None
    for k in range(1, grid_size + 1):
        eps = _osup_epsilon(top * k / grid_size, ranges)
        z = shifted / eps
        zq = fake_quantize(z, minmax_scale(z, bits)).astype(np.float64)
        w = weight * eps
        if weight_bits is not None:
            w = fake_quantize(w, minmax_scale(w, weight_bits)).astype(np.float64)
        err = float(np.mean((zq @ w.T - reference) ** 2))
        if err < best_err:
            best_err, best_eps = err, eps
    return best_eps.astype(np.float32)


def compute_redist_params(
    y,
    weight,
    strategy: str,
    bits: int = 8,
    weight_bits: int | None = None,
) -> RedistParams:
    """Per-channel (epsilon, mu) for one LayerNorm -> Linear pair.

    ``sq`` smooths only; ``sq-b`` shifts channels to zero mean then smooths the
    shifted activation; the ``osup*`` variants swap in the range-midpoint shift
    and/or the grid-searched smoothing factor.
    """
    y = _channels(y)
    c = y.shape[1]
    if strategy == "none":
        return RedistParams.identity(c)
    if strategy == "sq":
        return RedistParams(compute_sq_epsilon(y, weight), np.zeros(c, np.float32), strategy)
    mu = compute_osup_mu(y) if strategy in ("osup-shift", "osup") else compute_sqb_mu(y)
    shifted = y.astype(np.float64) - mu
    if strategy in ("osup-smooth", "osup"):
        eps = compute_osup_epsilon(y, mu, weight, bits=bits, weight_bits=weight_bits)
    elif strategy in ("sq-b", "osup-shift"):
        eps = compute_sq_epsilon(shifted, weight)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return RedistParams(eps, mu, strategy)


def fuse(gamma, beta, weight, bias, params: RedistParams) -> FusedPair:
    """Fold (epsilon, mu) into LayerNorm affine and the following linear layer."""
    c = len(gamma)
    if len(beta) != c or weight.shape[1] != c or len(params.epsilon) != c or len(bias) != weight.shape[0]:
        raise DimensionError("fuse: LayerNorm, linear and redistribution sizes disagree")
    if params.strategy == "none":
        return FusedPair(gamma, beta, weight, bias)
    eps = params.epsilon.astype(np.float64)
    mu = params.mu.astype(np.float64)
    w64 = np.asarray(weight, dtype=np.float64)
    return FusedPair(
        gamma=as_tensor(np.asarray(gamma, np.float64) / eps),
        beta=as_tensor((np.asarray(beta, np.float64) - mu) / eps),
        weight=as_tensor(w64 * eps),
        bias=as_tensor(np.asarray(bias, np.float64) + w64 @ mu),
    )


def ln_linear_pairs(model: ToyViT, include_head: bool = True) -> list[tuple[str, str]]:
    """(layernorm path, linear path) pairs eligible for fusion."""
    pairs = []
    for i in range(model.depth):
        pairs.append((f"blocks.{i}.ln1", f"blocks.{i}.qkv"))
        pairs.append((f"blocks.{i}.ln2", f"blocks.{i}.fc1"))
    if include_head:
        pairs.append(("norm", "head"))
    return pairs


def _get(model: ToyViT, path: str):
    obj = model
    for part in path.split("."):
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj


def apply_redistribution(model: ToyViT, params: dict[str, RedistParams]) -> ToyViT:
    """Return a new model with ``params[linear_path]`` fused into each pair."""
    for ln_path, lin_path in ln_linear_pairs(model, include_head=True):
        if lin_path not in params:
            continue
        ln, lin = _get(model, ln_path), _get(model, lin_path)
        f = fuse(ln.gamma, ln.beta, lin.weight, lin.bias, params[lin_path])
        new_ln, new_lin = LayerNorm(f.gamma, f.beta), Linear(f.weight, f.bias)
        if ln_path == "norm":
            model = replace(model, norm=new_ln, head=new_lin)
        else:
            idx = int(ln_path.split(".")[1])
            blk = model.blocks[idx]
            ln_name, lin_name = ln_path.split(".")[2], lin_path.split(".")[2]
            model = model.with_block(idx, replace(blk, **{ln_name: new_ln, lin_name: new_lin}))
    return model


def clamping_loss(y, spec: QuantSpec) -> float:
    """Squared magnitude lost to saturation: sum of (|x| - boundary)^2 over clipped elements."""
    y = np.asarray(y, dtype=np.float64)
    hi = spec.qmax * spec.scale
    lo = spec.qmin * spec.scale
    over = np.clip(y - hi, 0, None)
    under = np.clip(lo - y, 0, None)
    return float(np.sum(over**2) + np.sum(under**2))
