"""Small neural-net building blocks on top of the tensor engine.

Parameters live in flat name -> Tensor dicts; the helpers here just apply
them. Linear layers flatten leading axes into one big 2-D matmul, which is
what keeps the CPU path BLAS-bound.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis, any number of leading axes."""
    return T.affine(x, w, b)


def ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Two-layer feed-forward block: linear -> silu -> linear."""
    h = T.silu(linear(x, params[f"{prefix}.fc0.w"], params[f"{prefix}.fc0.b"]))
    return linear(h, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"])


def ffn_pre_ln(x: Tensor, params: dict, prefix: str) -> Tensor:
    """LayerNorm followed by the two-layer feed-forward block."""
    h = T.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"])
    return ffn(h, params, prefix)


def init_array(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    """Deterministic initialization by parameter-name convention."""
    if name.endswith(".b") or name.endswith("ln.b"):
        return np.zeros(shape, dtype=dtype)
    if name.endswith("ln.g"):
        return np.ones(shape, dtype=dtype)
    if "embed" in name:
        return rng.normal(0.0, 1.0, size=shape).astype(dtype)
    fan_in, fan_out = shape[0], shape[-1]
    std = float(np.sqrt(2.0 / (fan_in + fan_out)))
    return rng.normal(0.0, std, size=shape).astype(dtype)
