"""Finite-difference gradient checks for every differentiable block.

Each check builds a small 64-bit instance, drives it with a fixed random
input and a random linear read-out (so every output entry matters) and
returns a :class:`GradCheckReport`. Input gradients are checked through a
wrapper parameter holding the input itself.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .attention import WindowAttention
from .cmam import CMAM
from .config import ModelConfig, ShiftConfig
from .network import EncoderStage, MaskRadarNet, TapGrads, loss, loss_backward
from .numerics import Conv3d, GradCheckReport, LayerNorm, Linear, Parameter, bce, bce_backward, grad_check, sigmoid

F64 = np.float64


def _readout(rng, shape):
    return rng.normal(size=shape)


def _check(forward, backward, params, x_param, corrupt, tol, max_entries, seed):
    """Scalar ``sum(w * forward(x))``; ``backward(dy)`` returns the input gradient."""
    w = None

    def fn(with_grad):
        nonlocal w
        y = forward(x_param.value)
        if w is None:
            w = _readout(np.random.default_rng(seed + 1), y.shape)
        if with_grad:
            dx = backward(w.copy())
            if corrupt:
                for p in params:
                    p.grad *= 1.5
                dx = dx * 1.5
            x_param.grad += dx
        return float(np.sum(w * y))

    return grad_check(fn, params + [x_param], tol=tol, max_entries=max_entries, seed=seed)


def _named(module, extra=()):
    module.assign_names()
    return [p for _, p in module.named_parameters()] + list(extra)


def check_linear(corrupt=False, tol=1e-4, seed=0, max_entries=None) -> GradCheckReport:
    """Linear layer under a BCE loss on its sigmoid output."""
    rng = np.random.default_rng(seed)
    lin = Linear(5, 3, rng, F64)
    lin.bias.value[...] = rng.normal(size=3) * 0.1
    x = Parameter(rng.normal(size=(4, 5)), name="input")
    target = rng.random((4, 3))

    def fn(with_grad):
        y = sigmoid(lin(x.value))
        if with_grad:
            dy = bce_backward(y, target) * y * (1 - y)
            x.grad += lin.backward(dy) * (1.5 if corrupt else 1.0)
            if corrupt:
                lin.weight.grad *= 1.5
        return bce(y, target)

    return grad_check(fn, _named(lin) + [x], tol=tol, max_entries=max_entries, seed=seed)


def check_layernorm(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    rng = np.random.default_rng(seed)
    ln = LayerNorm(6, dtype=F64)
    ln.gain.value[...] = 1 + 0.1 * rng.normal(size=6)
    x = Parameter(rng.normal(size=(3, 4, 6)), name="input")
    return _check(ln.forward, ln.backward, _named(ln), x, corrupt, tol, max_entries, seed)


def check_conv3d(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    rng = np.random.default_rng(seed)
    conv = Conv3d(2, 3, (3, 3, 3), rng, stride=(1, 2, 2), padding=(1, 1, 1), dtype=F64)
    conv.weight.value[...] = rng.normal(size=conv.weight.value.shape) * 0.2
    x = Parameter(rng.normal(size=(2, 4, 6, 6)), name="input")
    return _check(conv.forward, conv.backward, _named(conv), x, corrupt, tol, max_entries, seed)


def _attention_case(shifted, cross, corrupt, tol, seed, max_entries):
    rng = np.random.default_rng(seed)
    attn = WindowAttention(8, 2, rng, window=(2, 4, 4), shifted=shifted, cross=cross, dtype=F64)
    for _, p in attn.named_parameters():
        p.value[...] = rng.normal(size=p.value.shape) * 0.3
    shape = (4, 6, 6, 8)
    x = Parameter(rng.normal(size=shape), name="input")
    params = _named(attn)
    if not cross:
        return _check(lambda v: attn(v)[0], attn.backward, params, x, corrupt, tol, max_entries, seed)
    k = Parameter(rng.normal(size=shape), name="enc_k")
    v = Parameter(rng.normal(size=shape), name="enc_v")

    def backward(dy):
        dx, dk, dv = attn.backward(dy)
        k.grad += dk
        v.grad += dv
        return dx

    return _check(lambda val: attn(val, k.value, v.value)[0], backward, params + [k, v], x,
                  corrupt, tol, max_entries, seed)


def check_wmsa(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    return _attention_case(False, False, corrupt, tol, seed, max_entries)


def check_swmsa(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    return _attention_case(True, False, corrupt, tol, seed, max_entries)


def check_wmca(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    return _attention_case(False, True, corrupt, tol, seed, max_entries)


def check_swmca(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    return _attention_case(True, True, corrupt, tol, seed, max_entries)


def check_cmam(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    """Enhanced output and the class-space prior both feed the scalar."""
    rng = np.random.default_rng(seed)
    cmam = CMAM(8, 3, rng, beta_init=0.7, dtype=F64)
    for _, p in cmam.named_parameters():
        if p.value.ndim:
            p.value[...] = rng.normal(size=p.value.shape) * 0.3
    x = Parameter(rng.normal(size=(2, 4, 4, 8)), name="input")
    w = _readout(np.random.default_rng(seed + 1), (2, 4, 4, 8))
    wp = _readout(np.random.default_rng(seed + 2), (2, 4, 4, 3))
    params = _named(cmam)

    def fn(with_grad):
        out, prior = cmam(x.value)
        if with_grad:
            x.grad += cmam.backward(w, wp)
            if corrupt:
                for p in params + [x]:
                    p.grad *= 1.5
        return float(np.sum(w * out) + np.sum(wp * prior))

    return grad_check(fn, params + [x], tol=tol, max_entries=max_entries, seed=seed)


def _tiny_model_cfg(n_stages=1):
    widths = (8, 16, 32)[:n_stages]
    heads = (2, 2, 4)[:n_stages]
    return ModelConfig(widths=widths, heads=heads, window=(2, 4, 4), kernel=(3, 3, 3),
                       precision="float64", beta_init=0.5, init_seed=3)


def check_encoder_stage(corrupt=False, tol=1e-4, seed=0, max_entries=None):
    """One full stage: channel-shift/WMSA block, patch-shift/SWMSA block and CMAM."""
    rng = np.random.default_rng(seed)
    cfg = _tiny_model_cfg()
    stage = EncoderStage(8, 2, rng, cfg, ShiftConfig(pattern="C"))
    for _, p in stage.named_parameters():
        if p.value.ndim == 2:
            p.value[...] = rng.normal(size=p.value.shape) * 0.3
    x = Parameter(rng.normal(size=(4, 6, 6, 8)), name="input")
    return _check(lambda v: stage(v)[0], lambda dy: stage.backward(dy, TapGrads()), _named(stage), x,
                  corrupt, tol, max_entries, seed)


def check_network(corrupt=False, tol=1e-4, seed=0, max_entries=12):
    """Whole one-stage network at ``2x8x16x16`` under the combined loss."""
    cfg = _tiny_model_cfg()
    model = MaskRadarNet(cfg, ShiftConfig(pattern="C"))
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.value.ndim >= 2:
            p.value[...] = rng.normal(size=p.value.shape) * 0.2
    x = rng.normal(size=(2, 8, 16, 16))
    gt = rng.random((8, 16, 16, 3))

    def fn(with_grad):
        out = model.forward(x, train=True)
        if with_grad:
            d_conf, d_prior = loss_backward(out.conf, out.prior, gt, 0.4)
            model.backward(d_conf, d_prior, wrt_logits=True)
            if corrupt:
                for p in model.parameters():
                    p.grad *= 1.5
        return loss(out.conf, out.prior, gt, 0.4).total

    return grad_check(fn, model.parameters(), tol=tol, max_entries=max_entries, seed=seed)


BLOCKS: dict[str, Callable[..., GradCheckReport]] = {
    "linear": check_linear,
    "layernorm": check_layernorm,
    "conv3d": check_conv3d,
    "wmsa": check_wmsa,
    "swmsa": check_swmsa,
    "wmca": check_wmca,
    "swmca": check_swmca,
    "cmam": check_cmam,
    "encoder_stage": check_encoder_stage,
    "network": check_network,
}
