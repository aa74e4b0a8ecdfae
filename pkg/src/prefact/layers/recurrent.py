"""LSTM layer (one stacked cell unrolled over a sequence)."""
import numpy as np

from prefact.errors import ShapeError
from prefact.layers.base import (
    Leaf, LayerSpec, check_rank, lin_backward, lin_forward, lin_init, lin_macs,
    lin_shapes, register, sigmoid,
)

GATES = ("i", "f", "g", "o")


@register
class LSTMCell(Leaf):
    """LSTM over a ``(T, B, d)`` sequence, returning ``(T, B, h)``.

    Gate ``q`` in (i, f, g, o) has input weight ``weight_i{q}`` (d, h), hidden
    weight ``weight_h{q}`` (h, h) and a single bias ``bias_{q}``. The
    factorized cell replaces each weight by a ``_u``/``_v`` pair sharing one
    rank ``r``.

    Initial state comes from ``forward(x, state)``, else from ``self.state``
    when ``stateful`` is set (truncated BPTT: no gradient flows into it).
    """
    kind = "LSTMCell"

    def __init__(self, d, h, rank=None, name="", stateful=False):
        super().__init__(name)
        self.d, self.h = int(d), int(h)
        self.r = check_rank("LSTMCell", rank, min(self.d, self.h))
        self.stateful = stateful
        self.state = None
        self.final_state = None
        self.grad_initial_state = None

    @staticmethod
    def rank_bound(dims):
        return min(dims["d"], dims["h"])

    @property
    def spec(self):
        return LayerSpec("LSTMCell", self.name, {"d": self.d, "h": self.h}, self.r, True)

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.dims["d"], spec.dims["h"], spec.rank, spec.name)

    def param_shapes(self):
        shapes = {}
        for q in GATES:
            shapes.update(lin_shapes(f"weight_i{q}", self.d, self.h, self.r))
        for q in GATES:
            shapes.update(lin_shapes(f"weight_h{q}", self.h, self.h, self.r))
        for q in GATES:
            shapes[f"bias_{q}"] = (self.h,)
        return shapes

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.h)
        var = bound * bound / 3.0
        sample = lambda g, s: g.uniform(-bound, bound, size=s)
        out = {}
        for q in GATES:
            out.update(lin_init(rng, f"weight_i{q}", self.d, self.h, self.r, var, sample))
        for q in GATES:
            out.update(lin_init(rng, f"weight_h{q}", self.h, self.h, self.r, var, sample))
        for q in GATES:
            out[f"bias_{q}"] = sample(rng, (self.h,))
        return out

    def reset_state(self):
        self.state = None

    def forward(self, x, state=None):
        if x.ndim != 3 or x.shape[2] != self.d:
            raise ShapeError(f"{self.name}: expected (T, B, {self.d}), got {x.shape}")
        T, B, _ = x.shape
        p = self.params
        if state is None and self.stateful and self.state is not None and self.state[0].shape[0] == B:
            state = self.state
        if state is None:
            h0, c0 = np.zeros((B, self.h)), np.zeros((B, self.h))
        else:
            h0, c0 = (np.asarray(s, dtype=np.float64) for s in state)

        zx = {q: lin_forward(p, f"weight_i{q}", x) + p[f"bias_{q}"] for q in GATES}
        hs = np.empty((T + 1, B, self.h))
        cs = np.empty((T + 1, B, self.h))
        acts = {q: np.empty((T, B, self.h)) for q in GATES}
        hs[0], cs[0] = h0, c0
        for t in range(T):
            hp = hs[t]
            i = sigmoid(zx["i"][t] + lin_forward(p, "weight_hi", hp))
            f = sigmoid(zx["f"][t] + lin_forward(p, "weight_hf", hp))
            g = np.tanh(zx["g"][t] + lin_forward(p, "weight_hg", hp))
            o = sigmoid(zx["o"][t] + lin_forward(p, "weight_ho", hp))
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            acts["i"][t], acts["f"][t], acts["g"][t], acts["o"][t] = i, f, g, o
        self.final_state = (hs[T].copy(), cs[T].copy())
        if self.stateful:
            self.state = self.final_state
        self._cache = (x, hs, cs, acts)
        return hs[1:].copy()

    def backward(self, gy):
        x, hs, cs, acts = self._need_cache()
        p, gr = self.params, self.grads
        T = x.shape[0]
        da = {q: np.empty_like(acts[q]) for q in GATES}
        dh_next = np.zeros_like(hs[0])
        dc_next = np.zeros_like(cs[0])
        for t in range(T - 1, -1, -1):
            i, f, g, o = (acts[q][t] for q in GATES)
            tc = np.tanh(cs[t + 1])
            dh = gy[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da["i"][t] = dc * g * i * (1.0 - i)
            da["f"][t] = dc * cs[t] * f * (1.0 - f)
            da["g"][t] = dc * i * (1.0 - g * g)
            da["o"][t] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = np.zeros_like(dh)
            for q in GATES:
                dh_next += lin_backward(p, gr, f"weight_h{q}", hs[t], da[q][t])
        gx = np.zeros_like(x)
        for q in GATES:
            gx += lin_backward(p, gr, f"weight_i{q}", x, da[q])
            gr[f"bias_{q}"] += da[q].sum(axis=(0, 1))
        self.grad_initial_state = (dh_next, dc_next)
        return gx

    def output_shape(self, in_shape):
        if in_shape[-1] != self.d:
            raise ShapeError(f"{self.name}: expected feature dim {self.d}, got {in_shape}")
        return tuple(in_shape[:-1]) + (self.h,)

    def macs(self, in_shape):
        steps = int(np.prod(in_shape[:-1])) if len(in_shape) > 1 else 1
        per_token = 4 * lin_macs(self.d, self.h, self.r) + 4 * lin_macs(self.h, self.h, self.r)
        return steps * per_token
