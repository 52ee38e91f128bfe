"""Encoder, main and auxiliary decoders, combined loss and the training step.

Data flow for the default three-stage model on a ``2x16x128x128`` input::

    conv embed (stride 1x2x2)          -> stage 1  16x64x64x32
    conv downsample                    -> stage 2  16x32x32x64
    conv downsample                    -> stage 3  16x16x16x128 (bottleneck)
    upsample + skip(stage 2) + blocks  -> 16x32x32x64
    upsample + skip(stage 1) + blocks  -> 16x64x64x32
    sub-pixel expand + sigmoid         -> 16x128x128x3

Each encoder stage runs a channel-shift/WMSA block, a patch-shift/SWMSA
block and CMAM. Every attention block exports its key/value volumes; the
decoder stage at the same resolution cross-attends to them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import WindowAttention
from .cmam import CMAM
from .config import ModelConfig, ShiftConfig
from .numerics import (
    FFN, Conv3d, LayerNorm, Linear, Module, Parameter, ShapeError, bce, bce_logit_grad,
    sigmoid, sigmoid_backward, upsample_nearest, upsample_nearest_backward,
)
from .shift import (
    ChannelShiftSpec, ShiftPattern, channel_shift, channel_shift_adjoint, make_pattern,
    patch_shift, patch_shift_back,
)


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


class StructureError(ValueError):
    """Encoder taps are missing or inconsistent with the decoder."""


def resolve_pattern(cfg: ShiftConfig) -> ShiftPattern:
    if cfg.pattern == "custom":
        return ShiftPattern(cfg.cell, name="custom")
    if cfg.pattern == "none":
        return ShiftPattern(((0,),), name="none")
    return make_pattern(cfg.pattern)


@dataclass
class StageTaps:
    k1: np.ndarray
    v1: np.ndarray
    k2: np.ndarray
    v2: np.ndarray
    prior: np.ndarray
    feature: np.ndarray


@dataclass
class TapGrads:
    k1: np.ndarray | None = None
    v1: np.ndarray | None = None
    k2: np.ndarray | None = None
    v2: np.ndarray | None = None
    prior: np.ndarray | None = None
    feature: np.ndarray | None = None


@dataclass
class EncoderTaps:
    stages: list[StageTaps]

    @property
    def kv_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [pair for t in self.stages for pair in ((t.k1, t.v1), (t.k2, t.v2))]

    @property
    def priors(self) -> list[np.ndarray]:
        return [t.prior for t in self.stages]

    @property
    def features(self) -> list[np.ndarray]:
        return [t.feature for t in self.stages]


@dataclass
class NetworkOutput:
    conf: np.ndarray
    prior: np.ndarray | None = None


def _attn(cfg: ModelConfig, dim, heads, rng, **kw):
    return WindowAttention(dim, heads, rng, window=cfg.window, rel_pos_bias=cfg.rel_pos_bias,
                           scale_logits=cfg.attn_scale, dtype=cfg.dtype, **kw)


class ChannelShiftBlock(Module):
    def __init__(self, dim, heads, rng, cfg: ModelConfig, spec: ChannelShiftSpec):
        self.spec = spec
        self.norm1 = LayerNorm(dim, dtype=cfg.dtype)
        self.attn = _attn(cfg, dim, heads, rng)
        self.norm2 = LayerNorm(dim, dtype=cfg.dtype)
        self.ffn = FFN(dim, rng, cfg.ffn_ratio, cfg.dtype)

    def forward(self, x):
        y, k, v = self.attn(channel_shift(self.norm1(x), self.spec))
        xh = y + x
        return self.ffn(self.norm2(xh)) + xh, k, v

    def backward(self, d_out, dk=None, dv=None):
        dxh = d_out + self.norm2.backward(self.ffn.backward(d_out))
        da = channel_shift_adjoint(self.attn.backward(dxh, dk, dv), self.spec)
        return dxh + self.norm1.backward(da)


class PatchShiftBlock(Module):
    def __init__(self, dim, heads, rng, cfg: ModelConfig, pattern: ShiftPattern):
        self.pattern = pattern
        self.norm1 = LayerNorm(dim, dtype=cfg.dtype)
        self.attn = _attn(cfg, dim, heads, rng, shifted=True)
        self.norm2 = LayerNorm(dim, dtype=cfg.dtype)
        self.ffn = FFN(dim, rng, cfg.ffn_ratio, cfg.dtype)

    def forward(self, x):
        y, k, v = self.attn(patch_shift(self.norm1(x), self.pattern))
        xh = patch_shift_back(y, self.pattern) + x
        return self.ffn(self.norm2(xh)) + xh, k, v

    def backward(self, d_out, dk=None, dv=None):
        dxh = d_out + self.norm2.backward(self.ffn.backward(d_out))
        dy = patch_shift(dxh, self.pattern)
        da = patch_shift_back(self.attn.backward(dy, dk, dv), self.pattern)
        return dxh + self.norm1.backward(da)


class EncoderStage(Module):
    def __init__(self, dim, heads, rng, cfg: ModelConfig, shift_cfg: ShiftConfig):
        self.cs_block = ChannelShiftBlock(dim, heads, rng, cfg, ChannelShiftSpec(shift_cfg.ratio))
        self.ps_block = PatchShiftBlock(dim, heads, rng, cfg, resolve_pattern(shift_cfg))
        self.cmam = CMAM(dim, cfg.num_classes, rng, max_tokens=cfg.cmam_max_tokens,
                         scale_logits=cfg.cmam_scale, share_qk=cfg.cmam_share_qk,
                         beta_init=cfg.beta_init, ffn_ratio=cfg.ffn_ratio, dtype=cfg.dtype)

    def forward(self, x):
        x, k1, v1 = self.cs_block(x)
        x, k2, v2 = self.ps_block(x)
        out, prior = self.cmam(x)
        return out, StageTaps(k1, v1, k2, v2, prior, out)

    def backward(self, d_out, g: TapGrads):
        if g.feature is not None:
            d_out = d_out + g.feature
        d = self.cmam.backward(d_out, g.prior)
        d = self.ps_block.backward(d, g.k2, g.v2)
        return self.cs_block.backward(d, g.k1, g.v1)


class TSwinBlock(Module):
    """Decoder block fusing self-attention and encoder cross-attention with a learned gate."""

    def __init__(self, dim, heads, rng, cfg: ModelConfig, shifted: bool):
        self.norm1 = LayerNorm(dim, dtype=cfg.dtype)
        self.self_attn = _attn(cfg, dim, heads, rng, shifted=shifted)
        self.cross_attn = _attn(cfg, dim, heads, rng, shifted=shifted, cross=True)
        self.gamma = Parameter(np.full((), cfg.gamma_init, dtype=cfg.dtype))
        self.norm2 = LayerNorm(dim, dtype=cfg.dtype)
        self.ffn = FFN(dim, rng, cfg.ffn_ratio, cfg.dtype)
        self._cache = None

    def gate(self):
        return np.clip(self.gamma.value, 0, 1)

    def forward(self, x, k_prev, v_prev):
        a = self.norm1(x)
        sa = self.self_attn(a)[0] + x
        ca = self.cross_attn(a, k_prev, v_prev)[0] + x
        g = self.gate()
        xh = g * ca + (1 - g) * sa
        self._cache = (sa, ca)
        return self.ffn(self.norm2(xh)) + xh

    def backward(self, d_out):
        sa, ca = self._cache
        g = self.gate()
        dxh = d_out + self.norm2.backward(self.ffn.backward(d_out))
        if 0 <= self.gamma.value <= 1:
            self.gamma.grad += np.sum(dxh * (ca - sa))
        d_ca = g * dxh
        d_sa = (1 - g) * dxh
        da = self.self_attn.backward(d_sa)
        da_c, dk, dv = self.cross_attn.backward(d_ca)
        return d_ca + d_sa + self.norm1.backward(da + da_c), dk, dv


class DecoderStage(Module):
    def __init__(self, dim, heads, rng, cfg: ModelConfig, in_dim: int | None, up: tuple[int, int, int]):
        self.up = up
        self.in_dim = in_dim
        self.reduce = Linear(in_dim + dim, dim, rng, cfg.dtype) if in_dim is not None else None
        self.block1 = TSwinBlock(dim, heads, rng, cfg, shifted=False)
        self.block2 = TSwinBlock(dim, heads, rng, cfg, shifted=True)

    def forward(self, x, taps: StageTaps):
        if self.reduce is not None:
            u = upsample_nearest(x, self.up)
            if u.shape[:3] != taps.feature.shape[:3]:
                raise ShapeError(f"decoder feature {u.shape} does not match skip {taps.feature.shape}")
            x = self.reduce(np.concatenate([u, taps.feature], axis=-1))
        x = self.block1(x, taps.k1, taps.v1)
        return self.block2(x, taps.k2, taps.v2)

    def backward(self, d):
        d, dk2, dv2 = self.block2.backward(d)
        d, dk1, dv1 = self.block1.backward(d)
        grads = TapGrads(k1=dk1, v1=dv1, k2=dk2, v2=dv2)
        if self.reduce is None:
            return d, grads
        dc = self.reduce.backward(d)
        grads.feature = dc[..., self.in_dim:]
        return upsample_nearest_backward(dc[..., :self.in_dim], self.up), grads


class MaskRadarNet(Module):
    def __init__(self, cfg: ModelConfig | None = None, shift_cfg: ShiftConfig | None = None):
        cfg = cfg or ModelConfig()
        shift_cfg = shift_cfg or ShiftConfig()
        self.cfg = cfg
        self.shift_cfg = shift_cfg
        rng = np.random.default_rng(cfg.init_seed)
        widths, heads, dt = cfg.widths, cfg.heads, cfg.dtype
        pad = tuple(k // 2 for k in cfg.kernel)
        self.embed = Conv3d(cfg.in_channels, widths[0], cfg.kernel, rng, cfg.stride, pad, dt, input_grad=False)
        self.stages = [EncoderStage(w, h, rng, cfg, shift_cfg) for w, h in zip(widths, heads)]
        self.downs = [Conv3d(widths[i], widths[i + 1], cfg.kernel, rng, cfg.stride, pad, dt)
                      for i in range(len(widths) - 1)]
        n = len(widths)
        self.decoder_stage_ids = list(range(n - 2, -1, -1)) if n > 1 else [0]
        self.decoders = [
            DecoderStage(widths[s], heads[s], rng, cfg, widths[s + 1] if n > 1 else None, tuple(cfg.stride))
            for s in self.decoder_stage_ids
        ]
        self.expand = tuple(cfg.stride[1:])
        fh, fw = self.expand
        self.head = Linear(widths[0], fh * fw * cfg.num_classes, rng, dt)
        self.aux_refine = Linear(cfg.num_classes, cfg.num_classes, rng, dt)
        # start both heads near the background rate so early steps are not spent unlearning 0.5
        prior_logit = np.log(cfg.head_prior / (1 - cfg.head_prior))
        self.head.bias.value[...] = prior_logit
        self.aux_refine.bias.value[...] = prior_logit
        self.aux_calls = 0
        self._cache = {}
        self.assign_names()

    # -- shape bookkeeping -------------------------------------------------

    def check_input(self, x):
        c = self.cfg
        if x.ndim != 4 or x.shape[0] != c.in_channels:
            raise ShapeError(f"expected input [{c.in_channels},T,H,W], got {x.shape}")
        need = (c.stride[1] ** len(c.widths), c.stride[2] ** len(c.widths))
        if x.shape[2] % need[0] or x.shape[3] % need[1]:
            raise ShapeError(
                f"spatial extents {x.shape[2:]} must be divisible by {need} for {len(c.widths)} stages")

    def stage_extents(self, input_shape) -> list[tuple[int, int, int, int]]:
        _, t, h, w = input_shape
        out = []
        for width in self.cfg.widths:
            h //= self.cfg.stride[1]
            w //= self.cfg.stride[2]
            out.append((t, h, w, width))
        return out

    # -- encoder -----------------------------------------------------------

    def encode(self, x):
        self.check_input(x)
        f = self.embed(np.asarray(x, dtype=self.cfg.dtype)).transpose(1, 2, 3, 0)
        taps = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                f = self.downs[s - 1](f.transpose(3, 0, 1, 2)).transpose(1, 2, 3, 0)
            f, tap = stage(f)
            taps.append(tap)
        return f, EncoderTaps(taps)

    def encode_backward(self, d_bottleneck, grads: list[TapGrads]):
        d = d_bottleneck
        for s in reversed(range(len(self.stages))):
            d = self.stages[s].backward(d, grads[s])
            if s > 0:
                d = self.downs[s - 1].backward(d.transpose(3, 0, 1, 2)).transpose(1, 2, 3, 0)
        self.embed.backward(d.transpose(3, 0, 1, 2))

    # -- main decoder ------------------------------------------------------

    def decode_main(self, bottleneck, taps: EncoderTaps):
        if len(taps.stages) != len(self.stages):
            raise StructureError(f"expected taps for {len(self.stages)} stages, got {len(taps.stages)}")
        x = bottleneck
        for dec, s in zip(self.decoders, self.decoder_stage_ids):
            t = taps.stages[s]
            if any(a is None for a in (t.k1, t.v1, t.k2, t.v2, t.feature)):
                raise StructureError(f"encoder stage {s} is missing a key/value or skip tap")
            x = dec(x, t)
        logits = self.head(x)
        t_, h, w, _ = logits.shape
        fh, fw = self.expand
        k = self.cfg.num_classes
        logits = logits.reshape(t_, h, w, fh, fw, k).transpose(0, 1, 3, 2, 4, 5).reshape(t_, h * fh, w * fw, k)
        conf = sigmoid(logits)
        self._cache["conf"] = conf
        return conf

    def decode_main_backward(self, d_conf, wrt_logits=False):
        conf = self._cache["conf"]
        d = d_conf if wrt_logits else sigmoid_backward(conf, d_conf)
        t_, hh, ww, k = d.shape
        fh, fw = self.expand
        d = d.reshape(t_, hh // fh, fh, ww // fw, fw, k).transpose(0, 1, 3, 2, 4, 5)
        d = self.head.backward(d.reshape(t_, hh // fh, ww // fw, fh * fw * k))
        grads = [TapGrads() for _ in self.stages]
        for dec, s in zip(reversed(self.decoders), reversed(self.decoder_stage_ids)):
            d, g = dec.backward(d)
            grads[s] = g
        return d, grads

    # -- auxiliary decoder -------------------------------------------------

    def decode_aux(self, priors):
        """Sum nearest-upsampled priors at stage-1 resolution, expand, refine, sigmoid."""
        self.aux_calls += 1
        k = priors[0].shape[-1]
        if any(p.shape[-1] != k for p in priors):
            raise ShapeError(f"prior class counts differ: {[p.shape[-1] for p in priors]}")
        t, h0, w0, _ = priors[0].shape
        factors = [(1, h0 // p.shape[1], w0 // p.shape[2]) for p in priors]
        total = sum(upsample_nearest(p, f) for p, f in zip(priors, factors))
        full = upsample_nearest(total, (1,) + self.expand)
        prior = sigmoid(self.aux_refine(full))
        self._cache["aux"] = (factors, prior)
        return prior

    def decode_aux_backward(self, d_prior, wrt_logits=False):
        factors, prior = self._cache["aux"]
        d = self.aux_refine.backward(d_prior if wrt_logits else sigmoid_backward(prior, d_prior))
        d = upsample_nearest_backward(d, (1,) + self.expand)
        return [upsample_nearest_backward(d, f) for f in factors]

    # -- whole network -----------------------------------------------------

    def forward(self, x, train: bool = True) -> NetworkOutput:
        bottleneck, taps = self.encode(x)
        conf = self.decode_main(bottleneck, taps)
        prior = self.decode_aux(taps.priors) if train else None
        return NetworkOutput(conf, prior)

    def predict(self, x) -> np.ndarray:
        """Inference path: encoder and main decoder only."""
        return self.forward(x, train=False).conf

    def backward(self, d_conf, d_prior=None, wrt_logits=False):
        """``wrt_logits`` means the incoming gradients are already taken w.r.t. pre-sigmoid values."""
        d_bottleneck, grads = self.decode_main_backward(d_conf, wrt_logits)
        if d_prior is not None:
            for g, dp in zip(grads, self.decode_aux_backward(d_prior, wrt_logits)):
                g.prior = dp
        self.encode_backward(d_bottleneck, grads)


# ---------------------------------------------------------------------------
# loss and training


@dataclass
class LossTerms:
    total: float
    main: float
    aux: float


def loss(conf, prior, gt, alpha: float = 0.4, reduction: str = "sum") -> LossTerms:
    """``main + alpha * aux`` with both terms binary cross entropy against ``gt``."""
    if not (conf.shape == prior.shape == gt.shape):
        raise ShapeError(f"loss: conf {conf.shape}, prior {prior.shape}, gt {gt.shape} differ")
    main = bce(conf, gt, reduction)
    aux = bce(prior, gt, reduction)
    return LossTerms(main + alpha * aux, main, aux)


def loss_backward(conf, prior, gt, alpha: float = 0.4, reduction: str = "sum"):
    """Gradients of :func:`loss` w.r.t. the main and auxiliary logits."""
    return bce_logit_grad(conf, gt, reduction), alpha * bce_logit_grad(prior, gt, reduction)


def train_step(model: MaskRadarNet, optimizer, batch, alpha: float = 0.4, reduction: str = "sum") -> LossTerms:
    """Forward, combined loss, backward and one Adam update over ``batch``.

    ``batch`` is a sequence of ``(rf [2,T,H,W], gt [T,H,W,class])`` pairs;
    gradients are summed over its items.
    """
    optimizer.zero_grad()
    main = aux = 0.0
    for rf, gt in batch:
        out = model.forward(rf, train=True)
        gt = np.asarray(gt, dtype=out.conf.dtype)
        terms = loss(out.conf, out.prior, gt, alpha, reduction)
        if not (math.isfinite(terms.main) and math.isfinite(terms.aux)):
            raise NumericError(f"non-finite loss: main={terms.main} aux={terms.aux}")
        d_conf, d_prior = loss_backward(out.conf, out.prior, gt, alpha, reduction)
        model.backward(d_conf, d_prior if alpha > 0 else None, wrt_logits=True)
        main += terms.main
        aux += terms.aux
    for p in optimizer.params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {p.name}")
    optimizer.step()
    return LossTerms(main + alpha * aux, main, aux)
