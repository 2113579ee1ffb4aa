"""Finite-difference verification of every differentiable op, layer and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import models as M
from . import nn as N
from . import tensor as T
from . import training as TR

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-4
H = 1e-5
# Whole networks sum thousands of rounded terms; at 1e-5 that roundoff (~1e-10
# in the difference quotient) swamps coordinates whose gradient is ~1e-7.
NETWORK_H = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    checked: int
    excluded: int
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol


# each case returns (loss_fn, tensors) or a list of such pairs
REGISTRY: dict[str, tuple[Callable, float, float]] = {}


def register(name: str, tol: float, h: float = H):
    def deco(fn):
        if name in REGISTRY:
            raise KeyError(f"duplicate gradcheck {name!r}")
        REGISTRY[name] = (fn, tol, h)
        return fn

    return deco


def fd_check(loss_fn: Callable[[], T.Tensor], tensors: dict[str, T.Tensor], tol: float,
             name: str = "", h: float = H, kink_tol: float = 1e-2) -> CheckResult:
    """Compare autograd gradients of ``loss_fn()`` w.r.t. ``tensors`` with central differences.

    Coordinates whose one-sided differences disagree (relu-style kinks) are
    excluded rather than failed.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    T.backward(loss_fn())
    analytic = {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}
    worst, checked, excluded = 0.0, 0, 0
    with T.no_grad():
        f0 = float(loss_fn().data)
        for key, t in tensors.items():
            flat = t.data.reshape(-1)
            assert np.shares_memory(flat, t.data)
            ga = analytic[key].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    excluded += 1
                    continue
                worst = max(worst, float(T.relative_error(ga[i], (fp - fm) / (2 * h))))
                checked += 1
    return CheckResult(name, worst, tol, checked, excluded)


def _rng(seed: int = 0) -> T.Rng:
    return T.Rng(seed)


def _t(arr) -> T.Tensor:
    return T.Tensor(np.array(arr, dtype=T.DTYPE), requires_grad=True)


def _project(out: T.Tensor, rng: T.Rng) -> T.Tensor:
    """Scalarise ``out`` with fixed random weights so no gradient is trivially uniform."""
    return T.sum_(T.mul(out, T.Tensor(rng.normal(0.0, 1.0, out.shape))))


def _scaled_params(params: N.ParamSet, rng: T.Rng, std: float) -> dict[str, T.Tensor]:
    for _, t in params.items():
        t.data = rng.normal(0.0, std, t.shape)
    return {name: t for name, t in params.items()}


# ---------------------------------------------------------------------------
# primitives

def _unary(kind, low, high, **kw):
    def case():
        r = _rng()
        x = _t(r.uniform(low, high, (3, 4)))
        return (lambda: _project(T.elementwise(kind, x, **kw), _rng(1))), {"x": x}
    return case


for _kind, _lo, _hi, _kw in [
    ("neg", -2, 2, {}), ("exp", -2, 2, {}), ("log", 0.2, 3, {}), ("sigmoid", -4, 4, {}),
    ("relu", -2, 2, {}), ("leaky_relu", -2, 2, {"slope": 0.2}), ("power", 0.5, 2, {"p": 2.5}),
    ("abs", -2, 2, {}),
]:
    register(f"elementwise.{_kind}", PRIMITIVE_TOL)(_unary(_kind, _lo, _hi, **_kw))


def _binary(kind):
    def case():
        r = _rng()
        a = _t(r.uniform(-2, 2, (3, 4)))
        b = _t(r.uniform(0.5, 2, (3, 4)))
        s = _t(r.uniform(0.5, 2, ()))
        return (lambda: _project(T.elementwise(kind, a, b), _rng(1)) + _project(T.elementwise(kind, a, s), _rng(2))), \
            {"a": a, "b": b, "s": s}
    return case


for _kind in ("add", "sub", "mul", "div"):
    register(f"elementwise.{_kind}", PRIMITIVE_TOL)(_binary(_kind))


@register("matmul", PRIMITIVE_TOL)
def _matmul():
    r = _rng()
    a, b = _t(r.normal(size=(3, 4))), _t(r.normal(size=(4, 5)))
    a3, b3 = _t(r.normal(size=(2, 3, 4))), _t(r.normal(size=(2, 4, 2)))
    return (lambda: _project(T.matmul(a, b), _rng(1)) + _project(T.matmul(a3, b3), _rng(2))), \
        {"a": a, "b": b, "a3": a3, "b3": b3}


@register("softmax", PRIMITIVE_TOL)
def _softmax():
    x = _t(_rng().normal(size=(3, 5)))
    return (lambda: _project(T.softmax(x, 0), _rng(1)) + _project(T.softmax(x, -1), _rng(2))), {"x": x}


@register("reductions", PRIMITIVE_TOL)
def _reductions():
    x = _t(_rng().normal(size=(2, 3, 4)))
    return (lambda: _project(T.sum_(x, 1), _rng(1)) + _project(T.mean(x, (0, 2), keepdims=True), _rng(2))
            + T.mean(x)), {"x": x}


@register("shape_ops", PRIMITIVE_TOL)
def _shape_ops():
    r = _rng()
    x, y = _t(r.normal(size=(2, 1, 3, 4))), _t(r.normal(size=(2, 2, 3, 4)))

    def f():
        z = T.concat([x, y], axis=1)
        z = T.transpose(z, (0, 2, 3, 1))
        z = T.reshape(z, (6, 12))
        z = T.slice_(z, (slice(1, 5), slice(None, None, 2)))
        order = np.array([[2, 0, 3, 1]])
        return _project(T.permute_rows(T.reshape(z, (1, 4, 6)), order), _rng(1))

    return f, {"x": x, "y": y}


@register("conv2d", PRIMITIVE_TOL)
def _conv2d():
    r = _rng()
    x, w, b = _t(r.normal(size=(1, 1, 6, 6))), _t(r.normal(size=(2, 1, 3, 3))), _t(r.normal(size=2))
    x2, w2, b2 = _t(r.normal(size=(2, 3, 7, 7))), _t(r.normal(size=(2, 3, 3, 3))), _t(r.normal(size=2))

    def f():
        return (_project(T.conv2d(x, w, b, 1, 0), _rng(1))
                + _project(T.conv2d(x2, w2, b2, 2, 1), _rng(2)))

    return f, {"x": x, "w": w, "b": b, "x2": x2, "w2": w2, "b2": b2}


@register("conv2d_transpose", PRIMITIVE_TOL)
def _conv2d_transpose():
    r = _rng()
    x, w, b = _t(r.normal(size=(2, 3, 3, 3))), _t(r.normal(size=(3, 2, 3, 3))), _t(r.normal(size=2))
    return (lambda: _project(T.conv2d_transpose(x, w, b, 2, 1, 1), _rng(1))), {"x": x, "w": w, "b": b}


@register("bce_with_logits", PRIMITIVE_TOL)
def _bce():
    r = _rng()
    z, y = _t(r.normal(0, 3, (4, 5))), _t(r.uniform(0, 1, (4, 5)))
    return (lambda: TR.bce_with_logits(z, y)), {"z": z, "y": y}


# ---------------------------------------------------------------------------
# layers

@register("linear", 1e-6)
def _linear():
    r = _rng()
    x, w, b = _t(r.normal(size=(4, 3))), _t(r.normal(size=(3, 5))), _t(r.normal(size=5))
    return (lambda: _project(N.linear(x, w, b), _rng(1))), {"x": x, "w": w, "b": b}


@register("layer_norm", PRIMITIVE_TOL)
def _layer_norm():
    r = _rng()
    x, g, b = _t(r.normal(size=(2, 3, 6))), _t(r.normal(1, 0.3, 6)), _t(r.normal(size=6))
    return (lambda: _project(N.layer_norm(x, g, b), _rng(1))), {"x": x, "gain": g, "bias": b}


@register("instance_norm", PRIMITIVE_TOL)
def _instance_norm():
    x = _t(_rng().normal(size=(2, 3, 4, 4)))
    return (lambda: _project(N.instance_norm(x), _rng(1))), {"x": x}


@register("mhsa", COMPOSITE_TOL)
def _mhsa():
    cfg = N.AttentionConfig(8, 2, 1)
    p = N.ParamSet()
    N.add_mhsa(p, "attn", 8)
    tensors = _scaled_params(p, _rng(3), 0.5)
    x = _t(_rng().normal(size=(2, 5, 8)))
    tensors["x"] = x
    return (lambda: _project(N.mhsa(x, p, "attn", cfg), _rng(1))), tensors


@register("transformer_block", COMPOSITE_TOL)
def _block():
    cfg = N.AttentionConfig(8, 2, 1)
    p = N.ParamSet()
    N.add_transformer_block(p, "blk", 8)
    tensors = _scaled_params(p, _rng(3), 0.5)
    x = _t(_rng().normal(size=(5, 8)))
    tensors["x"] = x
    return (lambda: _project(N.transformer_block(x, p, "blk", cfg), _rng(1))), tensors


# ---------------------------------------------------------------------------
# networks and losses

GRADCHECK_GENERATOR = M.GeneratorConfig(base_channels=4, attention=N.AttentionConfig(16, 2, 2))
TINY_GENERATOR = M.GeneratorConfig(base_channels=2, attention=N.AttentionConfig(8, 2, 1))
TINY_PIXEL = M.DiscriminatorKind("pixel", base_channels=4)


def _images(seed: int, shape=(1, 1, 8, 8)):
    r = _rng(seed)
    image = T.Tensor(r.uniform(0, 1, shape))
    mask = T.Tensor((r.uniform(0, 1, shape) > 0.5).astype(float))
    return image, mask


@register("generator_end_to_end", COMPOSITE_TOL, NETWORK_H)
def _generator():
    p = M.build_generator(GRADCHECK_GENERATOR)
    tensors = _scaled_params(p, _rng(3), 0.3)
    image, _ = _images(0)
    return (lambda: _project(M.generator_forward(image, p, GRADCHECK_GENERATOR), _rng(1))), tensors


def _disc_case(kind: M.DiscriminatorKind):
    def case():
        p = M.build_discriminator(kind)
        tensors = _scaled_params(p, _rng(3), 0.3)
        image, mask = _images(0, (2, 1, 8, 8))
        tensors["image"] = image
        return (lambda: _project(M.discriminator_forward(image, mask, p, kind), _rng(1))), tensors
    return case


register("discriminator.pixel", COMPOSITE_TOL)(_disc_case(M.DiscriminatorKind("pixel", base_channels=8)))
register("discriminator.patch", COMPOSITE_TOL)(_disc_case(M.DiscriminatorKind("patch", 8, base_channels=4)))
register("discriminator.whole", COMPOSITE_TOL)(_disc_case(M.DiscriminatorKind("whole", 16, base_channels=4)))


@register("bce_probs", PRIMITIVE_TOL)
def _bce_probs():
    r = _rng()
    p, y = _t(r.uniform(0.05, 0.95, (2, 1, 4, 4))), T.Tensor((r.uniform(0, 1, (2, 1, 4, 4)) > 0.5) * 1.0)
    return (lambda: TR.bce_probs(p, y)), {"probs": p}


@register("dice_loss", 1e-6)
def _dice():
    r = _rng()
    p, y = _t(r.uniform(0.05, 0.95, (2, 1, 4, 4))), T.Tensor((r.uniform(0, 1, (2, 1, 4, 4)) > 0.5) * 1.0)
    return (lambda: TR.dice_loss(p, y)), {"probs": p}


def _gan_nets():
    g = M.build_generator(TINY_GENERATOR)
    d = M.build_discriminator(TINY_PIXEL)
    tg = _scaled_params(g, _rng(3), 0.3)
    td = _scaled_params(d, _rng(4), 0.3)
    return TR.GanNets(g, d, TINY_GENERATOR, TINY_PIXEL), tg, td


@register("gan_losses", COMPOSITE_TOL, NETWORK_H)
def _gan():
    nets, tg, td = _gan_nets()
    image, mask = _images(0)
    tg = {f"G.{k}": v for k, v in tg.items()}
    td = {f"D.{k}": v for k, v in td.items()}
    # the prediction is detached inside loss_D, so it is checked against D only
    return [
        (lambda: TR.gan_losses(nets, image, mask, 1.0)[0], td),
        (lambda: TR.gan_losses(nets, image, mask, 1.0)[1], tg | td),
    ]


@register("cyclegan_losses", COMPOSITE_TOL, NETWORK_H)
def _cyclegan():
    g1, g2 = M.build_generator(TINY_GENERATOR), M.build_generator(TINY_GENERATOR)
    d1, d2 = M.build_discriminator(TINY_PIXEL), M.build_discriminator(TINY_PIXEL)
    gens, discs = {}, {}
    for i, (tag, p) in enumerate((("G1", g1), ("G2", g2), ("D1", d1), ("D2", d2))):
        target = gens if tag.startswith("G") else discs
        target |= {f"{tag}.{k}": v for k, v in _scaled_params(p, _rng(10 + i), 0.3).items()}
    nets = TR.CycleNets(g1, g2, d1, d2, TINY_GENERATOR, TINY_PIXEL)
    image, mask = _images(0)

    def d_terms():
        b = TR.cyclegan_losses(nets, image, mask, 1.0, 1.0)
        return b.loss_d1 + b.loss_d2

    return [
        (d_terms, discs),
        (lambda: TR.cyclegan_losses(nets, image, mask, 1.0, 1.0).generator_total, gens | discs),
    ]


# ---------------------------------------------------------------------------


def run_check(name: str) -> CheckResult:
    fn, tol, h = REGISTRY[name]
    t0 = time.perf_counter()
    parts = fn()
    if isinstance(parts, tuple):
        parts = [parts]
    res = CheckResult(name, 0.0, tol, 0, 0)
    for loss_fn, tensors in parts:
        r = fd_check(loss_fn, tensors, tol, name, h=h)
        res.max_rel_error = max(res.max_rel_error, r.max_rel_error)
        res.checked += r.checked
        res.excluded += r.excluded
    res.seconds = time.perf_counter() - t0
    return res


def run_all(names=None, out=print) -> list[CheckResult]:
    results = []
    out(f"{'check':<28} {'max_rel_err':>12} {'tol':>8} {'checked':>8} {'kinks':>6}  status")
    for name in names or REGISTRY:
        res = run_check(name)
        results.append(res)
        out(f"{name:<28} {res.max_rel_error:12.3e} {res.tol:8.0e} {res.checked:8d} {res.excluded:6d}  "
            f"{'PASS' if res.passed else 'FAIL'}")
    return results
