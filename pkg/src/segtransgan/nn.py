"""Differentiable layers: linear, norms, multi-head self-attention, transformer blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (
    DTYPE,
    Rng,
    ShapeError,
    Tensor,
    _node,
    add,
    matmul,
    permute_rows,
    relu,
    reshape,
    softmax,
    transpose,
)

INIT_STD = 0.02
NORM_EPS = 1e-5
# small enough that normalised tokens have unit variance to ~1e-8 relative
LAYER_NORM_EPS = 1e-8


class ParamSet:
    """Named parameters keyed by dotted layer paths, iterated in sorted order.

    Each entry also records a role (``weight``, ``bias`` or ``gain``) that
    ``init_params`` uses to pick the initial values.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._roles: dict[str, str] = {}

    def add(self, name: str, shape: tuple[int, ...], role: str) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if role not in ("weight", "bias", "gain"):
            raise ValueError(f"unknown parameter role {role!r}")
        t = Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)
        self._params[name] = t
        self._roles[name] = role
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self:
            yield name, self._params[name]

    def role(self, name: str) -> str:
        return self._roles[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in state.items():
            if arr.shape != self._params[name].shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {self._params[name].shape}")
        for name, arr in state.items():
            self._params[name].data = np.array(arr, dtype=DTYPE)


def param_count(params: ParamSet) -> int:
    return int(sum(t.size for _, t in params.items()))


def init_params(params: ParamSet, rng: Rng) -> None:
    """Weights ~ N(0, 0.02), gains 1, biases 0; draws taken in sorted name order."""
    for name, t in params.items():
        role = params.role(name)
        if role == "weight":
            t.data = rng.normal(0.0, INIT_STD, t.shape)
        elif role == "gain":
            t.data = np.ones(t.shape, dtype=DTYPE)
        else:
            t.data = np.zeros(t.shape, dtype=DTYPE)


def add_linear(params: ParamSet, prefix: str, d_in: int, d_out: int, bias: bool = True) -> None:
    params.add(f"{prefix}.weight", (d_in, d_out), "weight")
    if bias:
        params.add(f"{prefix}.bias", (d_out,), "bias")


def add_conv(params: ParamSet, prefix: str, c_in: int, c_out: int, k: int, transposed: bool = False,
             bias: bool = True) -> None:
    shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
    params.add(f"{prefix}.weight", shape, "weight")
    if bias:
        params.add(f"{prefix}.bias", (c_out,), "bias")


def add_layer_norm(params: ParamSet, prefix: str, d: int) -> None:
    params.add(f"{prefix}.gain", (d,), "gain")
    params.add(f"{prefix}.bias", (d,), "bias")


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., d_in] @ w[d_in, d_out] + b[d_out]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    xm = x.data.reshape(-1, w.shape[0])
    out = xm @ w.data
    if b is not None:
        out += b.data

    def bw(g):
        gm = g.reshape(-1, w.shape[1])
        gx = (gm @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = xm.T @ gm if w.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(lead + (w.shape[1],)), parents, bw, "linear")


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - xhat * gxm)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = _normalize_backward(g * gain.data, xhat, inv_std, (-1,)) if x.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), bw, "layer_norm")


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardisation over H and W; no affine terms."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects [B,C,H,W], got {x.shape}")
    axes = (2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def bw(g):
        return (_normalize_backward(g, xhat, inv_std, axes),)

    return _node(xhat, (x,), bw, "instance_norm")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.n_blocks < 0:
            raise ValueError(f"attention sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


def add_mhsa(params: ParamSet, prefix: str, d_model: int) -> None:
    # a key bias only shifts each query's scores by a constant, which softmax cancels
    for proj in ("q", "k", "v", "o"):
        add_linear(params, f"{prefix}.{proj}", d_model, d_model, bias=proj != "k")


def add_transformer_block(params: ParamSet, prefix: str, d_model: int) -> None:
    add_layer_norm(params, f"{prefix}.ln1", d_model)
    add_mhsa(params, f"{prefix}.attn", d_model)
    add_layer_norm(params, f"{prefix}.ln2", d_model)
    add_linear(params, f"{prefix}.mlp.fc1", d_model, 2 * d_model)
    add_linear(params, f"{prefix}.mlp.fc2", 2 * d_model, d_model)


def _lin(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    bias = f"{prefix}.bias"
    return linear(x, params[f"{prefix}.weight"], params[bias] if bias in params else None)


def mhsa(x: Tensor, params: ParamSet, prefix: str, cfg: AttentionConfig,
         return_weights: bool = False):
    """Bidirectional multi-head self-attention over tokens.

    x is [T, d_model] or [B, T, d_model].  With ``return_weights`` the
    attention matrix [B, heads, T, T] is returned alongside the output.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ShapeError(f"mhsa expects [T,{cfg.d_model}] or [B,T,{cfg.d_model}], got {x.shape}")
    b, t, _ = x.shape
    h, dk = cfg.n_heads, cfg.d_k
    # Attend over tokens in lexicographic order and undo it at the end: the
    # key-axis sums then run in the same order for any permutation of x, so
    # equivariance holds bitwise rather than up to rounding.
    order = np.stack([np.lexsort(xb.T[::-1]) for xb in x.data])
    x = permute_rows(x, order)

    def heads(z: Tensor) -> Tensor:
        z = transpose(reshape(z, (b, t, h, dk)), (0, 2, 1, 3))
        return reshape(z, (b * h, t, dk))

    q = heads(_lin(x, params, f"{prefix}.q"))
    k = heads(_lin(x, params, f"{prefix}.k"))
    v = heads(_lin(x, params, f"{prefix}.v"))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)
    ctx = reshape(transpose(reshape(ctx, (b, h, t, dk)), (0, 2, 1, 3)), (b, t, cfg.d_model))
    out = permute_rows(_lin(ctx, params, f"{prefix}.o"), np.argsort(order, axis=1))
    if squeeze:
        out = reshape(out, (t, cfg.d_model))
    if return_weights:
        # back to input token order on both query and key axes
        inv = np.argsort(order, axis=1)
        w = weights.data.reshape(b, h, t, t)
        w = np.take_along_axis(w, inv[:, None, :, None], axis=2)
        w = np.take_along_axis(w, inv[:, None, None, :], axis=3)
        return out, Tensor(w)
    return out


def transformer_block(x: Tensor, params: ParamSet, prefix: str, cfg: AttentionConfig) -> Tensor:
    """Pre-norm residual block: attention sublayer then a 2x-wide relu MLP."""
    x = add(x, mhsa(layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"]),
                    params, f"{prefix}.attn", cfg))
    hdn = layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    hdn = _lin(relu(_lin(hdn, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")
    return add(x, hdn)


def positional_encoding_2d(h: int, w: int, d_model: int) -> Tensor:
    """Fixed sinusoidal 2D encoding, rows in the first half of the channels and
    columns in the second half; returns [h*w, d_model] in row-major token order."""
    if d_model % 4:
        raise ValueError(f"d_model={d_model} must be divisible by 4")
    half = d_model // 2

    def encode(n: int) -> np.ndarray:
        pos = np.arange(n, dtype=DTYPE)[:, None]
        freq = 1.0 / 10000.0 ** (np.arange(0, half, 2, dtype=DTYPE) / half)
        enc = np.zeros((n, half), dtype=DTYPE)
        enc[:, 0::2] = np.sin(pos * freq)
        enc[:, 1::2] = np.cos(pos * freq)
        return enc

    rows, cols = encode(h), encode(w)
    pe = np.concatenate(
        [np.repeat(rows, w, axis=0), np.tile(cols, (h, 1))], axis=1
    )
    return Tensor(pe)

