"""Module base classes, layer specs and initialisers.

A model is a tree of :class:`Module` objects. Leaves own parameters; containers
only route data. Parameters are materialised lazily from a per-leaf seed so that
paper-scale models can be built and counted without allocating their weights.
"""
from dataclasses import dataclass, field

import numpy as np

from prefact.errors import ArgumentError, ShapeError, StateError

# kinds whose weights can be factorized; also the index domain for K
FACTORIZABLE = ("FC", "Conv2d", "LSTMCell", "MultiHeadAttention", "FFN")

_REGISTRY = {}


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def layer_class(kind):
    try:
        return _REGISTRY[kind]
    except KeyError:
        raise ArgumentError(f"unknown layer kind {kind!r}") from None


@dataclass
class LayerSpec:
    """Typed description of one leaf layer.

    ``dims`` is kind specific: FC ``m, n``; Conv2d ``c_in, c_out, k, stride, pad``;
    LSTMCell ``d, h``; MultiHeadAttention ``p, d`` (heads, per-head dim) and
    ``causal``; FFN ``p, d``. ``rank`` is None for a vanilla layer.
    """
    kind: str
    name: str = ""
    dims: dict = field(default_factory=dict)
    rank: int = None
    has_bias: bool = False

    @property
    def factorized(self):
        return self.rank is not None

    def natural_rank_bound(self):
        return layer_class(self.kind).rank_bound(self.dims)

    def to_json(self):
        return {"kind": self.kind, "name": self.name, "dims": dict(self.dims),
                "rank": self.rank, "has_bias": self.has_bias}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["kind"], obj.get("name", ""), dict(obj.get("dims", {})),
                   obj.get("rank"), bool(obj.get("has_bias", False)))


def build_layer(spec):
    cls = layer_class(spec.kind)
    return cls.from_spec(spec)


def param_count(spec):
    return build_layer(spec).param_count()


def mac_count(spec, input_shape):
    return build_layer(spec).macs(tuple(input_shape))


# --- initialisers -------------------------------------------------------------

def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def factor_pair(rng, m, n, r, vanilla_var):
    """Random ``(m, r)``, ``(r, n)`` factors whose product has the variance of the
    vanilla init: U has variance 1/m, V has variance ``vanilla_var * m / r``."""
    u = rng.uniform(-1.0, 1.0, size=(m, r)) * np.sqrt(3.0 / m)
    v = rng.uniform(-1.0, 1.0, size=(r, n)) * np.sqrt(3.0 * vanilla_var * m / r)
    return u, v


def check_rank(kind, r, bound):
    if r is None:
        return None
    r = int(r)
    if not (1 <= r <= bound):
        raise ArgumentError(f"{kind} rank {r} outside [1, {bound}]")
    return r


# --- linear maps shared by several kinds ---------------------------------------

def lin_forward(params, key, x):
    """``x @ W`` or ``(x @ U) @ V`` over the last axis of ``x``."""
    if key in params:
        return x @ params[key]
    return (x @ params[key + "_u"]) @ params[key + "_v"]


def lin_backward(params, grads, key, x, g):
    """Accumulate weight grads for :func:`lin_forward` and return ``dL/dx``."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    if key in params:
        w = params[key]
        grads[key] += x2.T @ g2
        return (g2 @ w.T).reshape(x.shape)
    u, v = params[key + "_u"], params[key + "_v"]
    t = x2 @ u
    grads[key + "_v"] += t.T @ g2
    gt = g2 @ v.T
    grads[key + "_u"] += x2.T @ gt
    return (gt @ u.T).reshape(x.shape)


def lin_shapes(key, m, n, r):
    if r is None:
        return {key: (m, n)}
    return {key + "_u": (m, r), key + "_v": (r, n)}


def lin_init(rng, key, m, n, r, vanilla_var, sampler):
    if r is None:
        return {key: sampler(rng, (m, n))}
    u, v = factor_pair(rng, m, n, r, vanilla_var)
    return {key + "_u": u, key + "_v": v}


def lin_macs(m, n, r):
    return m * n if r is None else r * (m + n)


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- module tree ------------------------------------------------------------------

class Module:
    kind = "Module"

    def __init__(self, name=""):
        self.name = name
        self.training = True

    def children(self):
        return []

    def leaves(self):
        out = []
        for c in self.children():
            if isinstance(c, Leaf):
                out.append(c)
            else:
                out.extend(c.leaves())
        return out

    def train(self, mode=True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)

    def account(self, in_shape, records):
        """Append per-leaf count records and return the per-sample output shape."""
        raise NotImplementedError


class Leaf(Module):
    """A layer owning parameters (possibly none) and optional buffers."""

    def __init__(self, name=""):
        super().__init__(name)
        self.seed = 0
        self._params = None
        self._buffers = None
        self.grads = {}
        self._cache = None

    # subclasses provide these
    def param_shapes(self):
        return {}

    def init_params(self, rng):
        return {}

    def buffer_shapes(self):
        return {}

    def init_buffers(self):
        return {}

    @property
    def spec(self):
        raise NotImplementedError

    @classmethod
    def from_spec(cls, spec):
        raise NotImplementedError

    @staticmethod
    def rank_bound(dims):
        raise ArgumentError("layer kind has no weight to factorize")

    @property
    def rank(self):
        return getattr(self, "r", None)

    # lazy storage
    @property
    def params(self):
        if self._params is None:
            rng = np.random.default_rng(np.random.SeedSequence(self.seed))
            raw = self.init_params(rng)
            self._params = {k: np.asarray(raw[k], dtype=np.float64) for k in self.param_shapes()}
            self.grads = {k: np.zeros_like(v) for k, v in self._params.items()}
        return self._params

    @property
    def buffers(self):
        if self._buffers is None:
            self._buffers = {k: np.asarray(v, dtype=np.float64) for k, v in self.init_buffers().items()}
        return self._buffers

    @property
    def materialized(self):
        return self._params is not None

    def set_params(self, values):
        shapes = self.param_shapes()
        if set(values) != set(shapes):
            raise ShapeError(f"{self.name}: expected params {sorted(shapes)}, got {sorted(values)}")
        out = {}
        for k, shp in shapes.items():
            v = np.array(values[k], dtype=np.float64)
            if v.shape != tuple(shp):
                raise ShapeError(f"{self.name}.{k}: expected shape {tuple(shp)}, got {v.shape}")
            out[k] = v
        self._params = out
        self.grads = {k: np.zeros_like(v) for k, v in out.items()}

    def set_buffers(self, values):
        shapes = self.buffer_shapes()
        self._buffers = {}
        for k, shp in shapes.items():
            v = np.array(values[k], dtype=np.float64)
            if v.shape != tuple(shp):
                raise ShapeError(f"{self.name}.{k}: expected shape {tuple(shp)}, got {v.shape}")
            self._buffers[k] = v

    def zero_grad(self):
        if self._params is not None:
            for g in self.grads.values():
                g.fill(0.0)

    def param_count(self):
        return int(sum(int(np.prod(s)) for s in self.param_shapes().values()))

    def macs(self, in_shape):
        return 0

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def account(self, in_shape, records):
        out = self.output_shape(in_shape)
        records.append({
            "name": self.name, "kind": self.kind, "rank": self.rank,
            "params": self.param_count(), "macs": int(self.macs(in_shape)),
            "input_shape": list(_plain(in_shape)), "output_shape": list(_plain(out)),
        })
        return out

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name or self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache


def _plain(shape):
    return [list(s) if isinstance(s, tuple) else s for s in shape]


class Sequential(Module):
    kind = "Sequential"

    def __init__(self, modules, name=""):
        super().__init__(name)
        self.modules = list(modules)

    def children(self):
        return self.modules

    def forward(self, x):
        for m in self.modules:
            x = m.forward(x)
        return x

    def backward(self, g):
        for m in reversed(self.modules):
            g = m.backward(g)
        return g

    def account(self, in_shape, records):
        for m in self.modules:
            in_shape = m.account(in_shape, records)
        return in_shape
