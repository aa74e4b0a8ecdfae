"""Normalisation, pooling, activation and embedding layers."""
import numpy as np

from prefact.errors import ArgumentError, ShapeError
from prefact.layers.base import Leaf, LayerSpec, register
from prefact.numerics import col2im_batch, conv_output_size, im2col_batch


@register
class BatchNorm(Leaf):
    """Batch normalisation over channel axis 1 of ``(B, C)`` or ``(B, C, H, W)``."""
    kind = "BatchNorm"

    def __init__(self, c, eps=1e-5, momentum=0.1, name=""):
        super().__init__(name)
        self.c, self.eps, self.momentum = int(c), eps, momentum

    @property
    def spec(self):
        return LayerSpec("BatchNorm", self.name, {"c": self.c}, None, True)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["c"], name=spec.name)

    def param_shapes(self):
        return {"weight": (self.c,), "bias": (self.c,)}

    def init_params(self, rng):
        return {"weight": np.ones(self.c), "bias": np.zeros(self.c)}

    def buffer_shapes(self):
        return {"running_mean": (self.c,), "running_var": (self.c,)}

    def init_buffers(self):
        return {"running_mean": np.zeros(self.c), "running_var": np.ones(self.c)}

    def _axes(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.c:
            raise ShapeError(f"{self.name}: expected (B, {self.c}[, H, W]), got {x.shape}")
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x):
        axes = self._axes(x)
        p, buf = self.params, self.buffers
        if self.training:
            if x.shape[0] == 1:
                raise ArgumentError(f"{self.name}: train-mode batch norm needs batch size > 1")
            n = x.size // self.c
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            buf["running_mean"] = (1 - self.momentum) * buf["running_mean"] + self.momentum * mean
            buf["running_var"] = ((1 - self.momentum) * buf["running_var"]
                                  + self.momentum * var * n / (n - 1))
        else:
            mean, var = buf["running_mean"], buf["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv, x.ndim)
        self._cache = (xhat, inv, axes, self.training)
        return xhat * self._bcast(p["weight"], x.ndim) + self._bcast(p["bias"], x.ndim)

    def backward(self, g):
        xhat, inv, axes, training = self._need_cache()
        nd = g.ndim
        gamma = self.params["weight"]
        self.grads["weight"] += (g * xhat).sum(axis=axes)
        self.grads["bias"] += g.sum(axis=axes)
        gx_hat = g * self._bcast(gamma, nd)
        if not training:
            return gx_hat * self._bcast(inv, nd)
        n = g.size // self.c
        s1 = self._bcast(gx_hat.sum(axis=axes), nd)
        s2 = self._bcast((gx_hat * xhat).sum(axis=axes), nd)
        return self._bcast(inv, nd) / n * (n * gx_hat - s1 - xhat * s2)

    def macs(self, in_shape):
        return 2 * int(np.prod(in_shape))


@register
class LayerNorm(Leaf):
    kind = "LayerNorm"

    def __init__(self, dim, eps=1e-6, name=""):
        super().__init__(name)
        self.dim, self.eps = int(dim), eps

    @property
    def spec(self):
        return LayerSpec("LayerNorm", self.name, {"dim": self.dim}, None, True)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["dim"], name=spec.name)

    def param_shapes(self):
        return {"weight": (self.dim,), "bias": (self.dim,)}

    def init_params(self, rng):
        return {"weight": np.ones(self.dim), "bias": np.zeros(self.dim)}

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: expected last dim {self.dim}, got {x.shape}")
        mean = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv)
        return xhat * self.params["weight"] + self.params["bias"]

    def backward(self, g):
        xhat, inv = self._need_cache()
        lead = tuple(range(g.ndim - 1))
        self.grads["weight"] += (g * xhat).sum(axis=lead)
        self.grads["bias"] += g.sum(axis=lead)
        gh = g * self.params["weight"]
        n = self.dim
        return inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))

    def macs(self, in_shape):
        return 2 * int(np.prod(in_shape))


@register
class Pool(Leaf):
    """Max / average pooling over k x k windows, or global average (-> (B, C))."""
    kind = "Pool"

    def __init__(self, mode="max", k=2, stride=None, pad=0, name=""):
        super().__init__(name)
        if mode not in ("max", "avg", "global"):
            raise ArgumentError(f"unknown pool mode {mode!r}")
        self.mode, self.k, self.pad = mode, int(k), int(pad)
        self.stride = int(stride) if stride is not None else self.k

    @property
    def spec(self):
        return LayerSpec("Pool", self.name, {"mode": self.mode, "k": self.k,
                                             "stride": self.stride, "pad": self.pad})

    @classmethod
    def from_spec(cls, spec):
        d = spec.dims
        return cls(d.get("mode", "max"), d.get("k", 2), d.get("stride"), d.get("pad", 0), spec.name)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (B, C, H, W), got {x.shape}")
        B, C, H, W = x.shape
        if self.mode == "global":
            self._cache = x.shape
            return x.mean(axis=(2, 3))
        Ho, Wo = self.output_shape((C, H, W))[1:]
        xr = x.reshape(B * C, 1, H, W)
        if self.mode == "max" and self.pad:
            xr = np.pad(xr, ((0, 0), (0, 0), (self.pad,) * 2, (self.pad,) * 2),
                        constant_values=-np.inf)
            cols = im2col_batch(xr, self.k, self.stride, 0)
        else:
            cols = im2col_batch(xr, self.k, self.stride, self.pad)
        if self.mode == "max":
            arg = cols.argmax(axis=0)
            out = cols[arg, np.arange(cols.shape[1])]
            self._cache = (x.shape, xr.shape, arg)
        else:
            out = cols.mean(axis=0)
            self._cache = (x.shape, xr.shape, None)
        return out.reshape(B, C, Ho, Wo)

    def backward(self, g):
        cache = self._need_cache()
        if self.mode == "global":
            B, C, H, W = cache
            return np.broadcast_to(g[:, :, None, None] / (H * W), cache).copy()
        x_shape, xr_shape, arg = cache
        kk = self.k * self.k
        n = g.size
        if self.mode == "max":
            gcols = np.zeros((kk, n))
            gcols[arg, np.arange(n)] = g.ravel()
            gx = col2im_batch(gcols, xr_shape, self.k, self.stride, 0)
            if self.pad:
                p = self.pad
                gx = gx[:, :, p:-p, p:-p]
        else:
            gcols = np.broadcast_to(g.reshape(1, n) / kk, (kk, n))
            gx = col2im_batch(gcols, xr_shape, self.k, self.stride, self.pad)
        return np.ascontiguousarray(gx).reshape(x_shape)

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if self.mode == "global":
            return (C,)
        Ho = conv_output_size(H, self.k, self.stride, self.pad)
        Wo = conv_output_size(W, self.k, self.stride, self.pad)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"{self.name}: degenerate pool output for {H}x{W}")
        return (C, Ho, Wo)

    def macs(self, in_shape):
        return int(np.prod(in_shape))


@register
class ReLU(Leaf):
    kind = "ReLU"

    @property
    def spec(self):
        return LayerSpec("ReLU", self.name)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.name)

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._need_cache()

    def macs(self, in_shape):
        return int(np.prod(in_shape))


@register
class Flatten(Leaf):
    kind = "Flatten"

    @property
    def spec(self):
        return LayerSpec("Flatten", self.name)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.name)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@register
class Dropout(Leaf):
    """Inverted dropout with its own seeded stream; identity in eval mode."""
    kind = "Dropout"

    def __init__(self, p=0.0, name=""):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ArgumentError(f"dropout probability {p} outside [0, 1)")
        self.p = float(p)
        self._rng = None

    @property
    def spec(self):
        return LayerSpec("Dropout", self.name, {"p": self.p})

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims.get("p", 0.0), spec.name)

    def reset_rng(self):
        self._rng = np.random.default_rng(np.random.SeedSequence(self.seed))

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self._cache = 1.0
            return x
        if self._rng is None:
            self.reset_rng()
        mask = (self._rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, g):
        return g * self._need_cache()


@register
class Embedding(Leaf):
    """Token lookup ``weight[idx] * scale``. May be called several times per step
    (shared source/target tables); backward pops calls in reverse order."""
    kind = "Embedding"

    def __init__(self, vocab, dim, scale=1.0, init_bound=0.1, name=""):
        super().__init__(name)
        self.vocab, self.dim, self.scale, self.init_bound = int(vocab), int(dim), scale, init_bound
        self.shared = False  # set by owners that call it more than once per step
        self._stack = []

    @property
    def spec(self):
        return LayerSpec("Embedding", self.name, {"vocab": self.vocab, "dim": self.dim})

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["vocab"], spec.dims["dim"], name=spec.name)

    def param_shapes(self):
        return {"weight": (self.vocab, self.dim)}

    def init_params(self, rng):
        b = self.init_bound
        return {"weight": rng.uniform(-b, b, size=(self.vocab, self.dim))}

    def forward(self, idx):
        idx = np.asarray(idx)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ShapeError(f"{self.name}: token ids must be integers, got {idx.dtype}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.vocab):
            raise ArgumentError(f"{self.name}: token id outside [0, {self.vocab})")
        if self.shared:
            self._stack.append(idx)
        else:
            self._stack = [idx]
        return self.params["weight"][idx] * self.scale

    def backward(self, g):
        if not self._stack:
            self._cache = None
            self._need_cache()
        idx = self._stack.pop()
        np.add.at(self.grads["weight"], idx.ravel(), g.reshape(-1, self.dim) * self.scale)
        return None

    def output_shape(self, in_shape):
        return tuple(in_shape) + (self.dim,)


@register
class TiedLinear(Leaf):
    """Output projection reusing an embedding table: ``y = x E^T (+ b)``."""
    kind = "TiedLinear"

    def __init__(self, embedding, bias=True, name=""):
        super().__init__(name)
        self.embedding = embedding
        self.has_bias = bool(bias)

    @property
    def spec(self):
        return LayerSpec("TiedLinear", self.name,
                         {"vocab": self.embedding.vocab, "dim": self.embedding.dim},
                         None, self.has_bias)

    def param_shapes(self):
        return {"bias": (self.embedding.vocab,)} if self.has_bias else {}

    def init_params(self, rng):
        return {"bias": np.zeros(self.embedding.vocab)} if self.has_bias else {}

    def forward(self, x):
        w = self.embedding.params["weight"]
        y = x @ w.T
        if self.has_bias:
            y = y + self.params["bias"]
        self._cache = x
        return y

    def backward(self, g):
        x = self._need_cache()
        w = self.embedding.params["weight"]
        D, V = self.embedding.dim, self.embedding.vocab
        g2 = g.reshape(-1, V)
        self.embedding.grads["weight"] += g2.T @ x.reshape(-1, D)
        if self.has_bias:
            self.params  # materialise grads
            self.grads["bias"] += g2.sum(axis=0)
        return g @ w

    def output_shape(self, in_shape):
        return tuple(in_shape[:-1]) + (self.embedding.vocab,)

    def macs(self, in_shape):
        rows = int(np.prod(in_shape[:-1])) if len(in_shape) > 1 else 1
        return rows * self.embedding.vocab * self.embedding.dim


@register
class PositionalEncoding(Leaf):
    """Fixed sinusoidal position signal added to ``(B, N, D)`` inputs."""
    kind = "PositionalEncoding"

    def __init__(self, dim, name=""):
        super().__init__(name)
        self.dim = int(dim)

    @property
    def spec(self):
        return LayerSpec("PositionalEncoding", self.name, {"dim": self.dim})

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["dim"], spec.name)

    def table(self, n):
        pos = np.arange(n)[:, None]
        rate = np.exp(-np.log(10000.0) * (np.arange(0, self.dim, 2) / self.dim))
        pe = np.zeros((n, self.dim))
        pe[:, 0::2] = np.sin(pos * rate)
        pe[:, 1::2] = np.cos(pos * rate[: self.dim // 2])
        return pe

    def forward(self, x):
        return x + self.table(x.shape[-2])

    def backward(self, g):
        return g
