"""Convolutional-transformer generator and whole-image / patch / pixel discriminators."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    AttentionConfig,
    ParamSet,
    add_conv,
    add_transformer_block,
    init_params,
    instance_norm,
    positional_encoding_2d,
    transformer_block,
)
from .tensor import (
    NonFiniteError,
    Rng,
    ShapeError,
    Tensor,
    add,
    check_finite,
    concat,
    conv2d,
    conv2d_transpose,
    leaky_relu,
    mean,
    relu,
    reshape,
    sigmoid,
    transpose,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 1
    base_channels: int = 16
    downsample_stages: int = 2
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    out_channels: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.out_channels) < 1 or self.downsample_stages < 0:
            raise ConfigError(f"generator sizes must be positive: {self}")
        if self.bottleneck_channels != self.attention.d_model:
            raise ConfigError(
                f"bottleneck width {self.bottleneck_channels} (base_channels * 2**downsample_stages) "
                f"must equal attention.d_model={self.attention.d_model}"
            )

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.downsample_stages

    @property
    def divisor(self) -> int:
        return 2 ** self.downsample_stages


def build_generator(cfg: GeneratorConfig, rng: Rng | None = None) -> ParamSet:
    p = ParamSet()
    c = cfg.base_channels
    # convolutions feeding an instance norm carry no bias: the norm removes it
    add_conv(p, "encoder.conv0", cfg.in_channels, c, 7, bias=False)
    for i in range(cfg.downsample_stages):
        add_conv(p, f"encoder.down{i + 1}", c * 2 ** i, c * 2 ** (i + 1), 3, bias=False)
    for i in range(cfg.attention.n_blocks):
        add_transformer_block(p, f"transformer.block{i}", cfg.attention.d_model)
    for i in range(cfg.downsample_stages):
        c_in = c * 2 ** (cfg.downsample_stages - i)
        add_conv(p, f"decoder.up{i + 1}", c_in, c_in // 2, 3, transposed=True, bias=False)
    add_conv(p, "decoder.head", c, cfg.out_channels, 7)
    if rng is not None:
        init_params(p, rng)
    return p


@contextmanager
def _layer(name: str):
    """Re-raise non-finite failures from inside a layer with the layer's name."""
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"layer {name}: {exc}") from exc


def _checked(x: Tensor, layer: str) -> Tensor:
    check_finite(x, f"layer {layer}")
    return x


def generator_forward(image: Tensor, params: ParamSet, cfg: GeneratorConfig) -> Tensor:
    """Map [B, C_in, H, W] images to per-pixel probabilities [B, C_out, H, W]."""
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"generator expects [B,{cfg.in_channels},H,W], got {image.shape}")
    b, _, h, w = image.shape
    if h % cfg.divisor or w % cfg.divisor:
        raise ConfigError(f"input {h}x{w} not divisible by {cfg.divisor}")

    def conv(x, name, stride=1, pad=0):
        bias = params[f"{name}.bias"] if f"{name}.bias" in params else None
        return conv2d(x, params[f"{name}.weight"], bias, stride, pad)

    with _layer("encoder.conv0"):
        x = _checked(relu(instance_norm(conv(image, "encoder.conv0", 1, 3))), "encoder.conv0")
    for i in range(cfg.downsample_stages):
        name = f"encoder.down{i + 1}"
        with _layer(name):
            x = _checked(relu(instance_norm(conv(x, name, 2, 1))), name)

    d = cfg.attention.d_model
    hh, ww = h // cfg.divisor, w // cfg.divisor
    tokens = reshape(transpose(x, (0, 2, 3, 1)), (b, hh * ww, d))
    pe = positional_encoding_2d(hh, ww, d).data
    tokens = add(tokens, Tensor(np.broadcast_to(pe, (b, hh * ww, d)).copy()))
    for i in range(cfg.attention.n_blocks):
        name = f"transformer.block{i}"
        with _layer(name):
            tokens = _checked(transformer_block(tokens, params, name, cfg.attention), name)
    x = transpose(reshape(tokens, (b, hh, ww, d)), (0, 3, 1, 2))

    for i in range(cfg.downsample_stages):
        name = f"decoder.up{i + 1}"
        with _layer(name):
            x = conv2d_transpose(x, params[f"{name}.weight"], None, 2, 1, 1)
            x = _checked(relu(instance_norm(x)), name)
    with _layer("decoder.head"):
        return _checked(sigmoid(conv(x, "decoder.head", 1, 3)), "decoder.head")


PATCH_STAGES = {8: 2, 16: 3, 32: 4, 70: 5}


@dataclass(frozen=True)
class DiscriminatorKind:
    """Decision granularity of a discriminator.

    ``pixel`` scores every pixel, ``patch`` scores overlapping regions of
    roughly ``patch_size`` pixels, ``whole`` averages the patch scores into
    one logit per sample.
    """

    variant: str = "pixel"
    patch_size: int = 70
    conditional: bool = True
    base_channels: int = 32

    def __post_init__(self):
        if self.variant not in ("pixel", "patch", "whole"):
            raise ConfigError(f"unknown discriminator variant {self.variant!r}")
        if self.variant != "pixel" and self.patch_size not in PATCH_STAGES:
            raise ConfigError(f"patch_size must be one of {sorted(PATCH_STAGES)}, got {self.patch_size}")

    @property
    def in_channels(self) -> int:
        return 2 if self.conditional else 1

    @property
    def receptive_field(self) -> int:
        if self.variant == "pixel":
            return 1
        return 2 ** (PATCH_STAGES[self.patch_size] + 1) - 1


def _patch_widths(kind: DiscriminatorKind) -> list[int]:
    return [min(kind.base_channels * 2 ** i, 256) for i in range(PATCH_STAGES[kind.patch_size])]


def build_discriminator(kind: DiscriminatorKind, rng: Rng | None = None) -> ParamSet:
    p = ParamSet()
    c_in = kind.in_channels
    if kind.variant == "pixel":
        for i, c_out in enumerate((kind.base_channels, 2 * kind.base_channels)):
            add_conv(p, f"conv{i}", c_in, c_out, 1)
            c_in = c_out
    else:
        for i, c_out in enumerate(_patch_widths(kind)):
            add_conv(p, f"conv{i}", c_in, c_out, 3)
            c_in = c_out
    add_conv(p, "head", c_in, 1, 1)
    if rng is not None:
        init_params(p, rng)
    return p


def discriminator_forward(image: Tensor, mask: Tensor, params: ParamSet, kind: DiscriminatorKind) -> Tensor:
    """Raw real/fake logits for (image, mask) pairs.

    Output shapes: pixel [B,1,H,W]; patch [B,1,H/2^k,W/2^k]; whole [B,1,1,1].
    """
    if image.shape != mask.shape:
        raise ShapeError(f"discriminator inputs differ spatially: image {image.shape} vs mask {mask.shape}")
    x = concat([image, mask], axis=1) if kind.conditional else mask
    n_layers = sum(1 for name in params if name.startswith("conv") and name.endswith(".weight"))
    stride, pad = (1, 0) if kind.variant == "pixel" else (2, 1)
    for i in range(n_layers):
        with _layer(f"discriminator.conv{i}"):
            x = leaky_relu(conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride, pad), 0.2)
    with _layer("discriminator.head"):
        x = conv2d(x, params["head.weight"], params["head.bias"])
    if kind.variant == "whole":
        x = mean(x, axis=(2, 3), keepdims=True)
    return _checked(x, "discriminator.head")
