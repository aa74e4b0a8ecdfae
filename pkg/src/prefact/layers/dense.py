"""Fully connected and convolution layers, vanilla and factorized."""
import numpy as np

from prefact.errors import ShapeError
from prefact.layers.base import (
    Leaf, LayerSpec, check_rank, factor_pair, he_uniform, lin_backward, lin_forward,
    lin_init, lin_macs, lin_shapes, register,
)
from prefact.numerics import (
    col2im_batch, conv2d, conv_output_size, roll_conv_weight, unroll_conv_weight,
)


@register
class FC(Leaf):
    """``y = x W + b`` with ``W`` of shape (m, n); factorized ``W = U V``."""
    kind = "FC"

    def __init__(self, m, n, bias=True, rank=None, name=""):
        super().__init__(name)
        self.m, self.n, self.has_bias = int(m), int(n), bool(bias)
        self.r = check_rank("FC", rank, min(self.m, self.n))

    @staticmethod
    def rank_bound(dims):
        return min(dims["m"], dims["n"])

    @property
    def spec(self):
        return LayerSpec("FC", self.name, {"m": self.m, "n": self.n}, self.r, self.has_bias)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["m"], spec.dims["n"], spec.has_bias, spec.rank, spec.name)

    def param_shapes(self):
        shapes = lin_shapes("weight", self.m, self.n, self.r)
        if self.has_bias:
            shapes["bias"] = (self.n,)
        return shapes

    def init_params(self, rng):
        out = lin_init(rng, "weight", self.m, self.n, self.r, 2.0 / self.m,
                       lambda g, s: he_uniform(g, s, self.m))
        if self.has_bias:
            out["bias"] = np.zeros(self.n)
        return out

    def forward(self, x):
        if x.shape[-1] != self.m:
            raise ShapeError(f"{self.name}: expected last dim {self.m}, got shape {x.shape}")
        p = self.params
        y = lin_forward(p, "weight", x)
        if self.has_bias:
            y = y + p["bias"]
        self._cache = x
        return y

    def backward(self, g):
        x = self._need_cache()
        if self.has_bias:
            self.grads["bias"] += g.reshape(-1, self.n).sum(axis=0)
        return lin_backward(self.params, self.grads, "weight", x, g)

    def output_shape(self, in_shape):
        if in_shape[-1] != self.m:
            raise ShapeError(f"{self.name}: expected last dim {self.m}, got shape {in_shape}")
        return tuple(in_shape[:-1]) + (self.n,)

    def macs(self, in_shape):
        rows = int(np.prod(in_shape[:-1])) if len(in_shape) > 1 else 1
        return rows * lin_macs(self.m, self.n, self.r)


def _conv_backward(x_shape, cols, w, g, stride, pad):
    c_in, c_out, k, _ = w.shape
    G = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
    wm = unroll_conv_weight(w)
    gw = roll_conv_weight(cols @ G.T, c_in, k)
    gx = col2im_batch(wm @ G, x_shape, k, stride, pad)
    return gx, gw, G.sum(axis=1)


@register
class Conv2d(Leaf):
    """2-D convolution, weight layout (c_in, c_out, k, k).

    The factorized form is a conv with ``r`` filters (weight ``(c_in, r, k, k)``)
    followed by a 1x1 conv (weight ``(r, c_out, 1, 1)``). For a strided 1x1
    layer the stride sits on the second conv; the map is the same either way.
    """
    kind = "Conv2d"

    def __init__(self, c_in, c_out, k, stride=1, pad=0, bias=False, rank=None, name=""):
        super().__init__(name)
        self.c_in, self.c_out, self.k = int(c_in), int(c_out), int(k)
        self.stride, self.pad, self.has_bias = int(stride), int(pad), bool(bias)
        self.r = check_rank("Conv2d", rank, min(self.c_in * self.k ** 2, self.c_out))

    @staticmethod
    def rank_bound(dims):
        return min(dims["c_in"] * dims["k"] ** 2, dims["c_out"])

    @property
    def spec(self):
        dims = {"c_in": self.c_in, "c_out": self.c_out, "k": self.k,
                "stride": self.stride, "pad": self.pad}
        return LayerSpec("Conv2d", self.name, dims, self.r, self.has_bias)

    @classmethod
    def from_spec(cls, spec):
        d = spec.dims
        return cls(d["c_in"], d["c_out"], d["k"], d.get("stride", 1), d.get("pad", 0),
                   spec.has_bias, spec.rank, spec.name)

    @property
    def _strides(self):
        # (stride of the U conv, stride of the V conv)
        if self.k == 1 and self.stride > 1:
            return 1, self.stride
        return self.stride, 1

    def param_shapes(self):
        if self.r is None:
            shapes = {"weight": (self.c_in, self.c_out, self.k, self.k)}
        else:
            shapes = {"weight_u": (self.c_in, self.r, self.k, self.k),
                      "weight_v": (self.r, self.c_out, 1, 1)}
        if self.has_bias:
            shapes["bias"] = (self.c_out,)
        return shapes

    def init_params(self, rng):
        fan_in = self.c_in * self.k ** 2
        if self.r is None:
            out = {"weight": roll_conv_weight(he_uniform(rng, (fan_in, self.c_out), fan_in),
                                              self.c_in, self.k)}
        else:
            u, v = factor_pair(rng, fan_in, self.c_out, self.r, 2.0 / fan_in)
            out = {"weight_u": roll_conv_weight(u, self.c_in, self.k),
                   "weight_v": v.reshape(self.r, self.c_out, 1, 1)}
        if self.has_bias:
            out["bias"] = np.zeros(self.c_out)
        return out

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected (B, {self.c_in}, H, W), got {x.shape}")
        p = self.params
        if self.r is None:
            y, cols = conv2d(x, p["weight"], self.stride, self.pad)
            self._cache = (x.shape, cols, None, None)
        else:
            su, sv = self._strides
            t, cols_u = conv2d(x, p["weight_u"], su, self.pad)
            y, cols_v = conv2d(t, p["weight_v"], sv, 0)
            self._cache = (x.shape, cols_u, t.shape, cols_v)
        if self.has_bias:
            y += p["bias"][None, :, None, None]
        return y

    def backward(self, g):
        x_shape, cols, t_shape, cols_v = self._need_cache()
        p = self.params
        if self.r is None:
            gx, gw, gb = _conv_backward(x_shape, cols, p["weight"], g, self.stride, self.pad)
            self.grads["weight"] += gw
        else:
            su, sv = self._strides
            gt, gv, gb = _conv_backward(t_shape, cols_v, p["weight_v"], g, sv, 0)
            gx, gu, _ = _conv_backward(x_shape, cols, p["weight_u"], gt, su, self.pad)
            self.grads["weight_v"] += gv
            self.grads["weight_u"] += gu
        if self.has_bias:
            self.grads["bias"] += gb
        return gx

    def _out_hw(self, H, W, stride, pad, k):
        Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"{self.name}: degenerate output for input {H}x{W}")
        return Ho, Wo

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if C != self.c_in:
            raise ShapeError(f"{self.name}: expected {self.c_in} input channels, got {C}")
        return (self.c_out,) + self._out_hw(H, W, self.stride, self.pad, self.k)

    def macs(self, in_shape):
        _, H, W = in_shape
        if self.r is None:
            Ho, Wo = self._out_hw(H, W, self.stride, self.pad, self.k)
            return self.c_in * self.c_out * self.k ** 2 * Ho * Wo
        su, sv = self._strides
        Hu, Wu = self._out_hw(H, W, su, self.pad, self.k)
        Ho, Wo = self._out_hw(Hu, Wu, sv, 0, 1)
        return self.r * self.c_in * self.k ** 2 * Hu * Wu + self.r * self.c_out * Ho * Wo
