"""Multi-head attention, position-wise FFN and the transformer blocks built on them.

Sequence tensors are laid out ``(B, N, D)`` with model width ``D = p * d``.
"""
import numpy as np

from prefact.errors import ShapeError
from prefact.layers.base import (
    Leaf, LayerSpec, Module, check_rank, he_uniform, lin_backward, lin_forward, lin_init,
    lin_macs, lin_shapes, register, xavier_uniform,
)
from prefact.layers.basic import Dropout, LayerNorm

PROJ = ("wq", "wk", "wv", "wo")


@register
class MultiHeadAttention(Leaf):
    """``p`` heads of width ``d``; projections ``wq, wk, wv, wo`` are (D, D), no bias.

    A factorized layer replaces each projection by ``_u`` (D, r) and ``_v`` (r, D).
    ``forward(x)`` is self-attention; ``forward(x, memory)`` attends from ``x``
    to ``memory`` and its backward returns ``(grad_x, grad_memory)``.
    """
    kind = "MultiHeadAttention"

    def __init__(self, p, d, causal=False, rank=None, name=""):
        super().__init__(name)
        self.p, self.d, self.causal = int(p), int(d), bool(causal)
        self.D = self.p * self.d
        self.r = check_rank("MultiHeadAttention", rank, self.D)
        self.last_attention = None

    @staticmethod
    def rank_bound(dims):
        return dims["p"] * dims["d"]

    @property
    def spec(self):
        return LayerSpec("MultiHeadAttention", self.name,
                         {"p": self.p, "d": self.d, "causal": self.causal}, self.r, False)

    @classmethod
    def from_spec(cls, spec):
        d = spec.dims
        return cls(d["p"], d["d"], d.get("causal", False), spec.rank, spec.name)

    def param_shapes(self):
        shapes = {}
        for key in PROJ:
            shapes.update(lin_shapes(key, self.D, self.D, self.r))
        return shapes

    def init_params(self, rng):
        D = self.D
        out = {}
        for key in PROJ:
            out.update(lin_init(rng, key, D, D, self.r, 1.0 / D,
                                lambda g, s: xavier_uniform(g, s, D, D)))
        return out

    def _heads(self, t):
        B, N, _ = t.shape
        return t.reshape(B, N, self.p, self.d).transpose(0, 2, 1, 3)

    def _merge(self, t):
        B, _, N, _ = t.shape
        return t.transpose(0, 2, 1, 3).reshape(B, N, self.D)

    def forward(self, x, memory=None):
        if x.ndim != 3 or x.shape[-1] != self.D:
            raise ShapeError(f"{self.name}: expected (B, N, {self.D}), got {x.shape}")
        src = x if memory is None else memory
        if src.shape[0] != x.shape[0] or src.shape[-1] != self.D:
            raise ShapeError(f"{self.name}: memory shape {src.shape} incompatible with {x.shape}")
        p = self.params
        q = self._heads(lin_forward(p, "wq", x))
        k = self._heads(lin_forward(p, "wk", src))
        v = self._heads(lin_forward(p, "wv", src))
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d)
        if self.causal:
            N, M = scores.shape[-2:]
            scores = np.where(np.triu(np.ones((N, M), dtype=bool), 1), -np.inf, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        ctx = self._merge(a @ v)
        self.last_attention = a
        self._cache = (x, memory, q, k, v, a, ctx)
        return lin_forward(p, "wo", ctx)

    def backward(self, g):
        x, memory, q, k, v, a, ctx = self._need_cache()
        p, gr = self.params, self.grads
        gctx = self._heads(lin_backward(p, gr, "wo", ctx, g))
        ga = gctx @ v.transpose(0, 1, 3, 2)
        gv = a.transpose(0, 1, 3, 2) @ gctx
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) / np.sqrt(self.d)
        gq = gs @ k
        gk = gs.transpose(0, 1, 3, 2) @ q
        src = x if memory is None else memory
        gx = lin_backward(p, gr, "wq", x, self._merge(gq))
        gsrc = (lin_backward(p, gr, "wk", src, self._merge(gk))
                + lin_backward(p, gr, "wv", src, self._merge(gv)))
        if memory is None:
            return gx + gsrc
        return gx, gsrc

    def macs(self, in_shape, mem_len=None):
        N = in_shape[0]
        M = N if mem_len is None else mem_len
        proj = lin_macs(self.D, self.D, self.r)
        return (2 * N + 2 * M) * proj + 2 * N * M * self.D


@register
class FFN(Leaf):
    """Position-wise ``max(0, x W1 + b1) W2 + b2`` with hidden width ``4D``."""
    kind = "FFN"

    def __init__(self, p, d, rank=None, name=""):
        super().__init__(name)
        self.p, self.d = int(p), int(d)
        self.D = self.p * self.d
        self.r = check_rank("FFN", rank, self.D)

    @staticmethod
    def rank_bound(dims):
        return dims["p"] * dims["d"]

    @property
    def spec(self):
        return LayerSpec("FFN", self.name, {"p": self.p, "d": self.d}, self.r, True)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["p"], spec.dims["d"], spec.rank, spec.name)

    def param_shapes(self):
        D, H = self.D, 4 * self.D
        shapes = lin_shapes("w1", D, H, self.r)
        shapes["b1"] = (H,)
        shapes.update(lin_shapes("w2", H, D, self.r))
        shapes["b2"] = (D,)
        return shapes

    def init_params(self, rng):
        D, H = self.D, 4 * self.D
        out = lin_init(rng, "w1", D, H, self.r, 2.0 / D, lambda g, s: he_uniform(g, s, D))
        out["b1"] = np.zeros(H)
        out.update(lin_init(rng, "w2", H, D, self.r, 2.0 / H, lambda g, s: he_uniform(g, s, H)))
        out["b2"] = np.zeros(D)
        return out

    def forward(self, x):
        if x.shape[-1] != self.D:
            raise ShapeError(f"{self.name}: expected last dim {self.D}, got {x.shape}")
        p = self.params
        pre = lin_forward(p, "w1", x) + p["b1"]
        hid = np.maximum(pre, 0.0)
        self._cache = (x, hid)
        return lin_forward(p, "w2", hid) + p["b2"]

    def backward(self, g):
        x, hid = self._need_cache()
        p, gr = self.params, self.grads
        gr["b2"] += g.reshape(-1, self.D).sum(axis=0)
        gh = lin_backward(p, gr, "w2", hid, g) * (hid > 0)
        gr["b1"] += gh.reshape(-1, 4 * self.D).sum(axis=0)
        return lin_backward(p, gr, "w1", x, gh)

    def macs(self, in_shape):
        rows = int(np.prod(in_shape[:-1])) if len(in_shape) > 1 else 1
        D = self.D
        return rows * (lin_macs(D, 4 * D, self.r) + lin_macs(4 * D, D, self.r))


class EncoderBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""
    kind = "EncoderBlock"

    def __init__(self, p, d, dropout=0.0, causal=False, name=""):
        super().__init__(name)
        D = p * d
        self.ln1 = LayerNorm(D, name=f"{name}.ln1")
        self.attn = MultiHeadAttention(p, d, causal=causal, name=f"{name}.self_attn")
        self.drop1 = Dropout(dropout, name=f"{name}.drop1")
        self.ln2 = LayerNorm(D, name=f"{name}.ln2")
        self.ffn = FFN(p, d, name=f"{name}.ffn")
        self.drop2 = Dropout(dropout, name=f"{name}.drop2")

    def children(self):
        return [self.ln1, self.attn, self.drop1, self.ln2, self.ffn, self.drop2]

    def forward(self, x):
        x = x + self.drop1(self.attn(self.ln1(x)))
        return x + self.drop2(self.ffn(self.ln2(x)))

    def backward(self, g):
        g = g + self.ln2.backward(self.ffn.backward(self.drop2.backward(g)))
        return g + self.ln1.backward(self.attn.backward(self.drop1.backward(g)))

    def account(self, in_shape, records):
        for m in self.children():
            m.account(in_shape, records)
        return in_shape


class DecoderBlock(Module):
    """Pre-norm decoder block: causal self-attention, cross-attention, FFN."""
    kind = "DecoderBlock"

    def __init__(self, p, d, dropout=0.0, name=""):
        super().__init__(name)
        D = p * d
        self.ln1 = LayerNorm(D, name=f"{name}.ln1")
        self.self_attn = MultiHeadAttention(p, d, causal=True, name=f"{name}.self_attn")
        self.drop1 = Dropout(dropout, name=f"{name}.drop1")
        self.ln2 = LayerNorm(D, name=f"{name}.ln2")
        self.cross_attn = MultiHeadAttention(p, d, name=f"{name}.cross_attn")
        self.drop2 = Dropout(dropout, name=f"{name}.drop2")
        self.ln3 = LayerNorm(D, name=f"{name}.ln3")
        self.ffn = FFN(p, d, name=f"{name}.ffn")
        self.drop3 = Dropout(dropout, name=f"{name}.drop3")

    def children(self):
        return [self.ln1, self.self_attn, self.drop1, self.ln2, self.cross_attn,
                self.drop2, self.ln3, self.ffn, self.drop3]

    def forward(self, x, memory):
        x = x + self.drop1(self.self_attn(self.ln1(x)))
        x = x + self.drop2(self.cross_attn(self.ln2(x), memory))
        return x + self.drop3(self.ffn(self.ln3(x)))

    def backward(self, g):
        g = g + self.ln3.backward(self.ffn.backward(self.drop3.backward(g)))
        gq, gmem = self.cross_attn.backward(self.drop2.backward(g))
        g = g + self.ln2.backward(gq)
        g = g + self.ln1.backward(self.self_attn.backward(self.drop1.backward(g)))
        return g, gmem

    def account(self, in_shape, records, mem_len=None):
        for m in self.children():
            if m is self.cross_attn:
                rec_len = len(records)
                m.account(in_shape, records)
                records[rec_len]["macs"] = int(m.macs(in_shape, mem_len))
            else:
                m.account(in_shape, records)
        return in_shape
