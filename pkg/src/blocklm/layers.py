"""Shared decoder-layer machinery.

Pre-norm transformer layers with rotary position embeddings, GELU
feedforward at 4x expansion, and optional cross-attention between the
self-attention and feedforward sublayers (token-decoder cross variant).
Incremental decoding appends to preallocated per-layer KV buffers and is
equivalent to a full forward over the concatenated history.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import FlopMeter, Tensor, parameter
from .errors import CacheError, ShapeError

ROPE_BASE = 10000.0


def rotary_tables(max_pos: int, head_dim: int, base: float = ROPE_BASE):
    """(cos, sin) tables of shape (max_pos, head_dim//2), float32."""
    half = head_dim // 2
    inv = base ** (-np.arange(0, half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(max_pos, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rotary_positions(tables, offset: int, length: int):
    """Rotation table rows for absolute positions offset..offset+length-1."""
    cos, sin = tables
    if offset < 0 or offset + length > cos.shape[0]:
        raise ShapeError(f"rotary positions [{offset}, {offset + length}) exceed "
                         f"table of {cos.shape[0]} positions")
    return cos[offset:offset + length], sin[offset:offset + length]


class LayerKVState:
    """Preallocated K/V buffer for one layer of one generation stream."""

    __slots__ = ("k", "v", "length", "capacity")

    def __init__(self, batch: int, heads: int, capacity: int, head_dim: int):
        self.k = np.zeros((batch, heads, capacity, head_dim), dtype=np.float32)
        self.v = np.zeros((batch, heads, capacity, head_dim), dtype=np.float32)
        self.length = 0
        self.capacity = capacity

    def append(self, k_new: np.ndarray, v_new: np.ndarray):
        t = k_new.shape[2]
        if self.length + t > self.capacity:
            raise CacheError(f"KV cache overflow: {self.length}+{t} entries exceed "
                             f"capacity {self.capacity}")
        self.k[:, :, self.length:self.length + t] = k_new
        self.v[:, :, self.length:self.length + t] = v_new
        self.length += t

    def view(self):
        return self.k[:, :, :self.length], self.v[:, :, :self.length]

    def reset(self):
        self.length = 0

    @property
    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes


def _linear_init(rng, fan_in: int, fan_out: int, std: float = 0.02):
    return parameter(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32))


def _zeros(n: int):
    return parameter(np.zeros(n, dtype=np.float32))


def _ones(n: int):
    return parameter(np.ones(n, dtype=np.float32))


class DecoderLayer:
    def __init__(self, dim: int, n_heads: int, rng, out_std: float, with_cross: bool = False):
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.wq = _linear_init(rng, dim, dim)
        self.wk = _linear_init(rng, dim, dim)
        self.wv = _linear_init(rng, dim, dim)
        self.wo = _linear_init(rng, dim, dim, std=out_std)
        self.bq, self.bk, self.bv, self.bo = (_zeros(dim) for _ in range(4))
        self.w1 = _linear_init(rng, dim, 4 * dim)
        self.b1 = _zeros(4 * dim)
        self.w2 = _linear_init(rng, 4 * dim, dim, std=out_std)
        self.b2 = _zeros(dim)
        self.ln1_g, self.ln1_b = _ones(dim), _zeros(dim)
        self.ln2_g, self.ln2_b = _ones(dim), _zeros(dim)
        self.with_cross = with_cross
        if with_cross:
            self.xq = _linear_init(rng, dim, dim)
            self.xk = _linear_init(rng, dim, dim)
            self.xv = _linear_init(rng, dim, dim)
            self.xo = _linear_init(rng, dim, dim, std=out_std)
            self.xbq, self.xbk, self.xbv, self.xbo = (_zeros(dim) for _ in range(4))
            self.lnx_g, self.lnx_b = _ones(dim), _zeros(dim)

    def _heads(self, x: Tensor, t: int, b: int) -> Tensor:
        return ops.transpose(ops.reshape(x, (b, t, self.n_heads, self.head_dim)),
                             (0, 2, 1, 3))

    def _unheads(self, x: Tensor, t: int, b: int) -> Tensor:
        return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, self.dim))

    def forward(self, x: Tensor, rope, *, causal: bool = True, cache: LayerKVState = None,
                cross_ctx: Tensor = None, cross_cache=None, record=None) -> Tensor:
        b, t, _ = x.shape
        h = ops.layernorm(x, self.ln1_g, self.ln1_b)
        q = self._heads(ops.linear(h, self.wq, self.bq), t, b)
        k = self._heads(ops.linear(h, self.wk, self.bk), t, b)
        v = self._heads(ops.linear(h, self.wv, self.bv), t, b)
        cos, sin = rope
        q = ops.rotary(q, cos, sin)
        k = ops.rotary(k, cos, sin)
        if cache is not None:
            cache.append(k.data, v.data)
            kc, vc = cache.view()
            k, v = Tensor(kc), Tensor(vc)
            offset = cache.length - t
        else:
            offset = 0
        rec = record if record is None else record.setdefault("self", [])
        att = ops.attention(q, k, v, causal=causal, offset=offset, record_to=rec)
        x = ops.add(x, ops.linear(self._unheads(att, t, b), self.wo, self.bo))

        if cross_ctx is not None or cross_cache is not None:
            if not self.with_cross:
                raise ShapeError("cross context supplied to a layer without cross weights")
            hx = ops.layernorm(x, self.lnx_g, self.lnx_b)
            cq = self._heads(ops.linear(hx, self.xq, self.xbq), t, b)
            if cross_cache is not None and cross_cache.length > 0:
                ck_, cv_ = cross_cache.view()
                ck, cv = Tensor(ck_), Tensor(cv_)
            else:
                tc = cross_ctx.shape[1]
                ck = self._heads(ops.linear(cross_ctx, self.xk, self.xbk), tc, b)
                cv = self._heads(ops.linear(cross_ctx, self.xv, self.xbv), tc, b)
                if cross_cache is not None:
                    cross_cache.append(ck.data, cv.data)
            xrec = record if record is None else record.setdefault("cross", [])
            xa = ops.attention(cq, ck, cv, causal=False, record_to=xrec)
            x = ops.add(x, ops.linear(self._unheads(xa, t, b), self.xo, self.xbo))

        h2 = ops.layernorm(x, self.ln2_g, self.ln2_b)
        f = ops.linear(ops.gelu(ops.linear(h2, self.w1, self.b1)), self.w2, self.b2)
        return ops.add(x, f)

    def params(self, prefix: str) -> dict:
        p = {
            f"{prefix}.attn.q": self.wq, f"{prefix}.attn.k": self.wk,
            f"{prefix}.attn.v": self.wv, f"{prefix}.attn.o": self.wo,
            f"{prefix}.attn.q_b": self.bq, f"{prefix}.attn.k_b": self.bk,
            f"{prefix}.attn.v_b": self.bv, f"{prefix}.attn.o_b": self.bo,
            f"{prefix}.ffn.w1": self.w1, f"{prefix}.ffn.w1_b": self.b1,
            f"{prefix}.ffn.w2": self.w2, f"{prefix}.ffn.w2_b": self.b2,
            f"{prefix}.ln1.g": self.ln1_g, f"{prefix}.ln1.b": self.ln1_b,
            f"{prefix}.ln2.g": self.ln2_g, f"{prefix}.ln2.b": self.ln2_b,
        }
        if self.with_cross:
            p.update({
                f"{prefix}.xattn.q": self.xq, f"{prefix}.xattn.k": self.xk,
                f"{prefix}.xattn.v": self.xv, f"{prefix}.xattn.o": self.xo,
                f"{prefix}.xattn.q_b": self.xbq, f"{prefix}.xattn.k_b": self.xbk,
                f"{prefix}.xattn.v_b": self.xbv, f"{prefix}.xattn.o_b": self.xbo,
                f"{prefix}.ln_x.g": self.lnx_g, f"{prefix}.ln_x.b": self.lnx_b,
            })
        return p


class TransformerStack:
    """A stack of DecoderLayers plus final layernorm and rotary tables."""

    def __init__(self, name: str, n_layers: int, dim: int, n_heads: int, max_pos: int,
                 rng=None, with_cross: bool = False):
        if dim % n_heads:
            raise ShapeError(f"{name}: dim {dim} not divisible by heads {n_heads}")
        rng = rng or np.random.default_rng(0)
        out_std = 0.02 / np.sqrt(max(2 * n_layers, 1))
        self.name = name
        self.dim = dim
        self.n_heads = n_heads
        self.max_pos = max_pos
        self.layers = [DecoderLayer(dim, n_heads, rng, out_std, with_cross)
                       for _ in range(n_layers)]
        self.final_g, self.final_b = _ones(dim), _zeros(dim)
        self.rope = rotary_tables(max_pos, dim // n_heads)
        self.meter = FlopMeter(name)

    def forward(self, x: Tensor, *, causal: bool = True, pos_offset: int = 0,
                caches=None, cross_ctx: Tensor = None, cross_caches=None,
                record=None) -> Tensor:
        b, t, d = x.shape
        if d != self.dim:
            raise ShapeError(f"{self.name}: input dim {d} != stack dim {self.dim}")
        if cross_ctx is not None and self.layers and not self.layers[0].with_cross:
            raise ShapeError(f"{self.name}: cross context supplied to a stack "
                             "without cross weights")
        rope = rotary_positions(self.rope, pos_offset, t)
        with self.meter:
            for i, layer in enumerate(self.layers):
                rec = None if record is None else record.setdefault(i, {})
                layer_cache = None if caches is None else caches[i]
                xcache = None if cross_caches is None else cross_caches[i]
                x = layer.forward(x, rope, causal=causal, cache=layer_cache,
                                  cross_ctx=cross_ctx, cross_cache=xcache, record=rec)
            x = ops.layernorm(x, self.final_g, self.final_b)
        return x

    def make_caches(self, batch: int, capacity: int):
        hd = self.dim // self.n_heads
        return [LayerKVState(batch, self.n_heads, capacity, hd) for _ in self.layers]

    def params(self, prefix: str) -> dict:
        p = {}
        for i, layer in enumerate(self.layers):
            p.update(layer.params(f"{prefix}.layer{i}"))
        p[f"{prefix}.final_ln.g"] = self.final_g
        p[f"{prefix}.final_ln.b"] = self.final_b
        return p
