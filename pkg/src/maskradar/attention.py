"""3D window partitioning and window-restricted multi-head attention.

A :class:`WindowGrid` fixes how a ``[T, H, W, C]`` volume is padded,
cyclically displaced and cut into non-overlapping windows. The matching
:class:`WindowLayout` is a gather table built once per grid: window
partition, merge, padding and the cyclic shift all reduce to fancy
indexing with it.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import Linear, Module, Parameter, ShapeError, softmax, trunc_normal


@dataclass(frozen=True)
class WindowGrid:
    extents: tuple[int, int, int]
    window: tuple[int, int, int]
    shift: tuple[int, int, int]

    @property
    def padded(self) -> tuple[int, int, int]:
        return tuple(-(-n // w) * w for n, w in zip(self.extents, self.window))

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(p // w for p, w in zip(self.padded, self.window))

    @property
    def N(self) -> int:
        return int(np.prod(self.counts))

    @property
    def P(self) -> int:
        return int(np.prod(self.window))


def make_grid(extents, window=(4, 4, 4), shift=(0, 0, 0)) -> WindowGrid:
    """Clamp the window to the volume; no displacement along clamped axes."""
    win, sh = [], []
    for n, w, s in zip(extents, window, shift):
        if n <= w:
            win.append(int(n))
            sh.append(0)
        else:
            win.append(int(w))
            sh.append(int(s) % int(w))
    return WindowGrid(tuple(int(n) for n in extents), tuple(win), tuple(sh))


@dataclass(frozen=True, eq=False)
class WindowLayout:
    grid: WindowGrid
    token_index: np.ndarray  # [N, P] flat source position, -1 for padding
    valid: np.ndarray  # [N, P]
    region: np.ndarray  # [N, P] pre-shift region label

    @property
    def allowed(self) -> np.ndarray:
        """[N, P, P]: query i may attend key j."""
        same = self.region[:, :, None] == self.region[:, None, :]
        return same & self.valid[:, None, :]


def _axis_regions(length: int, window: int, shift: int) -> np.ndarray:
    lab = np.zeros(length, dtype=np.int64)
    if shift:
        lab[length - window: length - shift] = 1
        lab[length - shift:] = 2
    return lab


def _to_windows(vol: np.ndarray, grid: WindowGrid) -> np.ndarray:
    nt, nh, nw = grid.counts
    pt, ph, pw = grid.window
    v = vol.reshape(nt, pt, nh, ph, nw, pw)
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(grid.N, grid.P)


@lru_cache(maxsize=256)
def make_layout(grid: WindowGrid) -> WindowLayout:
    t, h, w = grid.extents
    tp, hp, wp = grid.padded
    idx = np.full((tp, hp, wp), -1, dtype=np.int64)
    idx[:t, :h, :w] = np.arange(t * h * w).reshape(t, h, w)
    lt, lh, lw = (_axis_regions(n, win, s) for n, win, s in zip(grid.padded, grid.window, grid.shift))
    # labels live on the shifted grid: only the wrapped tail of each axis is split off
    region = lt[:, None, None] * 9 + lh[None, :, None] * 3 + lw[None, None, :]
    idx = np.roll(idx, tuple(-s for s in grid.shift), axis=(0, 1, 2))
    token_index = _to_windows(idx, grid)
    return WindowLayout(grid, token_index, token_index >= 0, _to_windows(region, grid))


def window_partition(x: np.ndarray, grid: WindowGrid) -> tuple[np.ndarray, np.ndarray]:
    """``[T,H,W,C]`` -> windows ``[N,P,C]`` (zero rows at padding) and validity mask ``[N,P]``."""
    if tuple(x.shape[:3]) != grid.extents:
        raise ShapeError(f"volume {x.shape} does not match window grid extents {grid.extents}")
    layout = make_layout(grid)
    c = x.shape[-1]
    flat = np.concatenate([x.reshape(-1, c), np.zeros((1, c), dtype=x.dtype)])
    return flat[layout.token_index], layout.valid


def window_merge(windows: np.ndarray, grid: WindowGrid) -> np.ndarray:
    layout = make_layout(grid)
    c = windows.shape[-1]
    out = np.empty((int(np.prod(grid.extents)), c), dtype=windows.dtype)
    out[layout.token_index[layout.valid]] = windows[layout.valid]
    return out.reshape(grid.extents + (c,))


def relative_position_index(window, table_window) -> np.ndarray:
    """[P, P] index into a bias table sized for ``table_window``."""
    coords = np.stack(np.meshgrid(*[np.arange(w) for w in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    tt, th, tw = (2 * w - 1 for w in table_window)
    rel = rel + np.array([w - 1 for w in table_window])[:, None, None]
    return rel[0] * th * tw + rel[1] * tw + rel[2]


def _split_heads(x, heads):
    n, p, c = x.shape
    return x.reshape(n, p, heads, c // heads).transpose(0, 2, 1, 3)


def _join_heads(x):
    n, h, p, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, p, h * d)


class WindowAttention(Module):
    """Multi-head attention restricted to 3D windows.

    ``shifted=True`` displaces the grid by half a window (or ``shift``) and
    masks pairs drawn from different pre-shift regions. With ``cross=True``
    keys and values are supplied by the caller instead of projected from
    the input.

    ``forward`` returns ``(y, k, v)``; ``k`` and ``v`` are the key and value
    volumes actually attended to, so a self-attention layer can hand them to
    a cross-attention layer elsewhere in the network.
    """

    def __init__(self, dim, heads, rng, window=(4, 4, 4), shifted=False, shift=None, cross=False,
                 rel_pos_bias=True, scale_logits=True, dtype=np.float32):
        if dim % heads:
            raise ShapeError(f"{heads} heads do not divide channel width {dim}")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        if shift is None:
            shift = tuple(w // 2 for w in self.window) if shifted else (0, 0, 0)
        self.shift = tuple(shift)
        self.cross = cross
        self.scale = (dim // heads) ** -0.5 if scale_logits else 1.0
        self.q = Linear(dim, dim, rng, dtype)
        if not cross:
            self.k = Linear(dim, dim, rng, dtype)
            self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        if rel_pos_bias:
            size = int(np.prod([2 * w - 1 for w in self.window]))
            self.rel_bias = Parameter(trunc_normal(rng, (size, heads), dtype=dtype))
        else:
            self.rel_bias = None
        self._cache = None
        self.last_weights = None

    def grid_for(self, extents) -> WindowGrid:
        return make_grid(extents, self.window, self.shift)

    def _bias(self, grid):
        if self.rel_bias is None:
            return None, None
        index = relative_position_index(grid.window, self.window)
        return self.rel_bias.value[index].transpose(2, 0, 1), index

    def forward(self, x, k_vol=None, v_vol=None):
        if x.ndim != 4 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects [T,H,W,{self.dim}], got {x.shape}")
        if self.cross:
            if k_vol is None or v_vol is None:
                raise ValueError("cross-attention needs key and value volumes")
            if k_vol.shape != x.shape or v_vol.shape != x.shape:
                raise ShapeError(
                    f"encoder key/value {k_vol.shape}/{v_vol.shape} do not match decoder feature {x.shape}")
        else:
            k_vol = self.k(x)
            v_vol = self.v(x)
        q_vol = self.q(x)
        grid = self.grid_for(x.shape[:3])
        layout = make_layout(grid)
        q = _split_heads(window_partition(q_vol, grid)[0], self.heads)
        k = _split_heads(window_partition(k_vol, grid)[0], self.heads)
        v = _split_heads(window_partition(v_vol, grid)[0], self.heads)
        logits = (q @ k.transpose(0, 1, 3, 2)) * self.scale
        bias, index = self._bias(grid)
        if bias is not None:
            logits = logits + bias[None]
        logits = np.where(layout.allowed[:, None], logits, -np.inf)
        attn = softmax(logits, axis=-1, inplace=True)
        out = window_merge(_join_heads(attn @ v), grid)
        self._cache = (grid, index, q, k, v, attn)
        self.last_weights = attn
        return self.proj(out), k_vol, v_vol

    def backward(self, dy, dk_ext=None, dv_ext=None):
        """Returns ``dx`` (self) or ``(dx, dk, dv)`` (cross)."""
        grid, index, q, k, v, attn = self._cache
        do = _split_heads(window_partition(self.proj.backward(dy), grid)[0], self.heads)
        d_attn = do @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ do
        dlog = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
        if self.rel_bias is not None:
            np.add.at(self.rel_bias.grad, index, dlog.sum(axis=0).transpose(1, 2, 0))
        dlog = dlog * self.scale
        dq = dlog @ k
        dk = dlog.transpose(0, 1, 3, 2) @ q
        dq_vol = window_merge(_join_heads(dq), grid)
        dk_vol = window_merge(_join_heads(dk), grid)
        dv_vol = window_merge(_join_heads(dv), grid)
        dx = self.q.backward(dq_vol)
        if self.cross:
            return dx, dk_vol, dv_vol
        if dk_ext is not None:
            dk_vol = dk_vol + dk_ext
        if dv_ext is not None:
            dv_vol = dv_vol + dv_ext
        return dx + self.k.backward(dk_vol) + self.v.backward(dv_vol)


def wmsa(dim, heads, rng, window=(4, 4, 4), **kw) -> WindowAttention:
    return WindowAttention(dim, heads, rng, window=window, **kw)


def swmsa(dim, heads, rng, window=(4, 4, 4), **kw) -> WindowAttention:
    return WindowAttention(dim, heads, rng, window=window, shifted=True, **kw)


def wmca(dim, heads, rng, window=(4, 4, 4), **kw) -> WindowAttention:
    return WindowAttention(dim, heads, rng, window=window, cross=True, **kw)


def swmca(dim, heads, rng, window=(4, 4, 4), **kw) -> WindowAttention:
    return WindowAttention(dim, heads, rng, window=window, shifted=True, cross=True, **kw)
