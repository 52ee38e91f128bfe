"""Class masking attention: global attention scored in class space.

Queries and keys are linear projections of the features down to one
channel per class, values keep the full width. The similarity matrix is
``softmax(Q K^T)`` over all ``T*H*W`` positions, so memory grows
quadratically with the token count; a hard token limit guards it. Rows are
processed in blocks (each row of the softmax is independent, so this is
exact). When the full matrix fits ``_CACHE_ELEMS`` it is kept for the
backward pass, otherwise blocks are recomputed there.
"""
from __future__ import annotations

import numpy as np

from .numerics import FFN, LayerNorm, Linear, Module, Parameter, ShapeError, softmax

_BLOCK_ELEMS = 1 << 22
_CACHE_ELEMS = 1 << 23


class CapacityError(RuntimeError):
    """The similarity matrix would exceed the configured token budget."""


def similarity(q: np.ndarray, k: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Full row-stochastic score matrix ``softmax(q k^T)`` for ``[N, class]`` inputs."""
    logits = q @ k.T
    if scale != 1.0:
        logits *= scale
    return softmax(logits, axis=-1, inplace=True)


class CMAM(Module):
    def __init__(self, dim, num_classes, rng, max_tokens=65536, scale_logits=False, share_qk=False,
                 beta_init=0.0, ffn_ratio=4, block_rows=None, dtype=np.float32):
        if num_classes < 1:
            raise ValueError("CMAM needs at least one class")
        self.dim = dim
        self.num_classes = num_classes
        self.max_tokens = max_tokens
        self.scale = num_classes ** -0.5 if scale_logits else 1.0
        self.share_qk = share_qk
        self.block_rows = block_rows
        self.q_embed = Linear(dim, num_classes, rng, dtype)
        self.k_embed = None if share_qk else Linear(dim, num_classes, rng, dtype)
        self.v_embed = Linear(dim, dim, rng, dtype)
        self.beta = Parameter(np.full((), beta_init, dtype=dtype))
        self.norm = LayerNorm(dim, dtype=dtype)
        self.ffn = FFN(dim, rng, ffn_ratio, dtype)
        self._cache = None

    def _rows(self, n: int) -> int:
        return self.block_rows or max(1, _BLOCK_ELEMS // n)

    def _check(self, x):
        if x.ndim != 4 or x.shape[-1] != self.dim:
            raise ShapeError(f"CMAM expects [T,H,W,{self.dim}], got {x.shape}")
        n = x.shape[0] * x.shape[1] * x.shape[2]
        if n > self.max_tokens:
            raise CapacityError(
                f"CMAM over {n} positions exceeds the limit of {self.max_tokens} tokens "
                f"({n}x{n} similarity matrix); raise cmam_max_tokens or shrink the input")
        return n

    def forward(self, x):
        """Returns ``(enhanced, prior)``; ``prior`` is the raw class-space query."""
        n = self._check(x)
        q_vol = self.q_embed(x)
        k_vol = q_vol if self.share_qk else self.k_embed(x)
        v_vol = self.v_embed(x)
        q = q_vol.reshape(n, -1)
        k = k_vol.reshape(n, -1)
        v = v_vol.reshape(n, -1)
        if n * n <= _CACHE_ELEMS:
            s = similarity(q, k, self.scale)
            r = s @ v
        else:
            s = None
            r = np.empty_like(v)
            step = self._rows(n)
            for i in range(0, n, step):
                r[i: i + step] = similarity(q[i: i + step], k, self.scale) @ v
        r = r.reshape(x.shape)
        x_res = self.beta.value * r + x
        out = self.ffn(self.norm(x_res)) + x_res
        self._cache = (x.shape, q, k, v, r, s)
        return out, q_vol

    def backward(self, d_out, d_prior=None):
        shape, q, k, v, r, s_full = self._cache
        n = q.shape[0]
        d_res = d_out + self.norm.backward(self.ffn.backward(d_out))
        self.beta.grad += np.sum(d_res * r)
        d_r = (self.beta.value * d_res).reshape(n, -1)
        dq = np.empty_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        step = n if s_full is not None else self._rows(n)
        for i in range(0, n, step):
            s = s_full if s_full is not None else similarity(q[i: i + step], k, self.scale)
            g = d_r[i: i + step]
            dv += s.T @ g
            ds = g @ v.T
            ds -= np.sum(ds * s, axis=-1, keepdims=True)
            ds *= s
            if self.scale != 1.0:
                ds *= self.scale
            dl = ds
            dq[i: i + step] = dl @ k
            dk += dl.T @ q[i: i + step]
        dq_vol = dq.reshape(shape[:3] + (-1,))
        dk_vol = dk.reshape(shape[:3] + (-1,))
        if d_prior is not None:
            dq_vol = dq_vol + d_prior
        if self.share_qk:
            dx = self.q_embed.backward(dq_vol + dk_vol)
        else:
            dx = self.q_embed.backward(dq_vol) + self.k_embed.backward(dk_vol)
        return d_res + dx + self.v_embed.backward(dv.reshape(shape))
