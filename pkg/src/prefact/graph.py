"""ModelGraph: a module tree plus the bookkeeping the rest of the package needs."""
import numpy as np

from prefact.errors import ArgumentError, ShapeError
from prefact.layers import FACTORIZABLE, BatchNorm, LayerNorm, LSTMCell


class ModelGraph:
    """Ordered leaves with named parameters.

    Parameter names are ``"{leaf name}.{role}"``. Each leaf draws its initial
    values from ``SeedSequence([seed, leaf index])`` so a rebuild with the same
    arch and seed is bitwise identical, whatever order weights are touched in.
    """

    def __init__(self, root, arch_id, meta=None, mode="vanilla", plan=None, seed=0, options=None):
        self.root = root
        self.arch_id = arch_id
        self.meta = dict(meta or {})
        self.mode = mode
        self.plan = plan
        self.seed = int(seed)
        self.options = dict(options or {})
        self.leaves = root.leaves()
        names = [lf.name for lf in self.leaves]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ArgumentError(f"duplicate layer names: {dup}")
        self._by_name = {lf.name: lf for lf in self.leaves}
        for i, lf in enumerate(self.leaves):
            lf.seed = [self.seed, i]
        self.param_layers = [lf for lf in self.leaves if lf.kind in FACTORIZABLE]

    # --- lookup -------------------------------------------------------------------
    def leaf(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise ArgumentError(f"no layer named {name!r} in {self.arch_id}") from None

    def __contains__(self, name):
        return name in self._by_name

    def layer_index(self, name):
        """1-based position among parameterized layers (the index domain of K)."""
        for i, lf in enumerate(self.param_layers, 1):
            if lf.name == name:
                return i
        raise ArgumentError(f"{name!r} is not a parameterized layer")

    def ranks(self):
        return {lf.name: lf.rank for lf in self.param_layers}

    # --- parameters -----------------------------------------------------------------
    def param_shapes(self):
        out = {}
        for lf in self.leaves:
            for k, s in lf.param_shapes().items():
                out[f"{lf.name}.{k}"] = tuple(s)
        return out

    def named_parameters(self):
        return [(f"{lf.name}.{k}", v) for lf in self.leaves for k, v in lf.params.items()]

    def named_grads(self):
        out = []
        for lf in self.leaves:
            lf.params
            out.extend((f"{lf.name}.{k}", lf.grads[k]) for k in lf.param_shapes())
        return out

    def named_buffers(self):
        return [(f"{lf.name}.{k}", v) for lf in self.leaves for k, v in lf.buffers.items()]

    def decay_mask(self):
        """True where weight decay applies; normalisation parameters are exempt."""
        return [not isinstance(lf, (BatchNorm, LayerNorm))
                for lf in self.leaves for _ in lf.param_shapes()]

    def state_dict(self):
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state, strict=True):
        for lf in self.leaves:
            pk = {k: state[f"{lf.name}.{k}"] for k in lf.param_shapes() if f"{lf.name}.{k}" in state}
            if pk or lf.param_shapes():
                if strict and len(pk) != len(lf.param_shapes()):
                    missing = [k for k in lf.param_shapes() if f"{lf.name}.{k}" not in state]
                    raise ShapeError(f"{lf.name}: missing tensors {missing}")
                if pk:
                    lf.set_params(pk)
            bk = {k: state[f"{lf.name}.{k}"] for k in lf.buffer_shapes() if f"{lf.name}.{k}" in state}
            if bk:
                lf.set_buffers(bk)
        if strict:
            known = set(self.param_shapes())
            known.update(f"{lf.name}.{k}" for lf in self.leaves for k in lf.buffer_shapes())
            extra = sorted(set(state) - known)
            if extra:
                raise ShapeError(f"unexpected tensors: {extra}")

    def zero_grad(self):
        for lf in self.leaves:
            lf.zero_grad()

    # --- execution ----------------------------------------------------------------------
    def forward(self, x):
        return self.root.forward(x)

    __call__ = forward

    def backward(self, g):
        return self.root.backward(g)

    def train(self, mode=True):
        self.root.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def reset_state(self):
        for lf in self.leaves:
            if isinstance(lf, LSTMCell):
                lf.reset_state()

    def set_stateful(self, flag=True):
        for lf in self.leaves:
            if isinstance(lf, LSTMCell):
                lf.stateful = flag
                lf.state = None

    # --- accounting -------------------------------------------------------------------
    def param_count(self):
        return sum(lf.param_count() for lf in self.leaves)

    def count_report(self, input_shape=None):
        """Per-leaf and total parameter / MAC counts for one input sample."""
        shape = self.meta.get("input_shape") if input_shape is None else input_shape
        shape = _as_shape(shape)
        records = []
        out = self.root.account(shape, records)
        return {
            "arch_id": self.arch_id,
            "mode": self.mode,
            "input_shape": _listify(shape),
            "output_shape": _listify(out),
            "params": int(sum(r["params"] for r in records)),
            "macs": int(sum(r["macs"] for r in records)),
            "layers": records,
        }


def _as_shape(s):
    if isinstance(s, (list, tuple)) and s and isinstance(s[0], (list, tuple)):
        return tuple(tuple(int(v) for v in part) for part in s)
    return tuple(int(v) for v in s)


def _listify(s):
    return [list(p) if isinstance(p, tuple) else p for p in s]
