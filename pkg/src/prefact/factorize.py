"""Hybrid planning and SVD warm-start weight transfer.

A plan keeps the first ``K - 1`` parameterized layers full-rank and factorizes
the rest at ``floor(ratio * natural bound)``. The first convolution and the
final FC layer are never factorized; per-layer exceptions override the rest.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from prefact.errors import ArgumentError, PlanError
from prefact.layers import FACTORIZABLE
from prefact.numerics import roll_conv_weight, truncated_split, unroll_conv_weight

ACTIONS = ("full", "rank")


def parse_ratio(value):
    """``"1/4"``, ``"0.25"``, a float or a Fraction -> Fraction in (0, 1]."""
    if isinstance(value, Fraction):
        ratio = value
    else:
        try:
            ratio = Fraction(str(value).strip())
        except (ValueError, ZeroDivisionError):
            raise ArgumentError(f"cannot parse rank ratio {value!r}") from None
    if not (0 < ratio <= 1):
        raise ArgumentError(f"rank ratio {ratio} outside (0, 1]")
    return ratio


def rank_for(spec, ratio):
    """``floor(ratio * natural bound)``, at least 1."""
    ratio = parse_ratio(ratio)
    bound = spec.natural_rank_bound()
    return max(1, int(ratio * bound))


@dataclass
class FactorizationPlan:
    arch_id: str
    K: int
    ratio: Fraction = Fraction(1, 4)
    exceptions: list = field(default_factory=list)

    def __post_init__(self):
        self.ratio = parse_ratio(self.ratio)
        self.K = int(self.K)
        clean = []
        for ex in self.exceptions:
            action = ex.get("action")
            if action not in ACTIONS:
                raise PlanError(f"exception action must be one of {ACTIONS}, got {action!r}")
            item = {"layer": str(ex["layer"]), "action": action}
            if action == "rank":
                if "rank" not in ex:
                    raise PlanError(f"exception for {ex['layer']!r} needs a rank")
                item["rank"] = int(ex["rank"])
            clean.append(item)
        self.exceptions = clean

    def to_json(self):
        return {"arch_id": self.arch_id, "K": self.K,
                "ratio": f"{self.ratio.numerator}/{self.ratio.denominator}",
                "exceptions": [dict(e) for e in self.exceptions]}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["arch_id"], obj["K"], obj.get("ratio", "1/4"), obj.get("exceptions", []))
        except KeyError as exc:
            raise PlanError(f"plan missing field {exc.args[0]!r}") from None

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))

    def resolve(self, model):
        """Map each parameterized layer name to its rank (None = full-rank)."""
        layers = model.param_layers
        if not 1 <= self.K <= len(layers) + 1:
            raise PlanError(f"K={self.K} outside [1, {len(layers) + 1}] for {model.arch_id}")
        first_conv = next((lf.name for lf in layers if lf.kind == "Conv2d"), None)
        last_fc = layers[-1].name if layers and layers[-1].kind == "FC" else None
        out = {}
        for i, lf in enumerate(layers, 1):
            if i < self.K or lf.name in (first_conv, last_fc):
                out[lf.name] = None
            else:
                out[lf.name] = rank_for(lf.spec, self.ratio)
        for ex in self.exceptions:
            name = ex["layer"]
            if name not in out:
                raise PlanError(f"plan names unknown layer {name!r} for {model.arch_id}")
            if ex["action"] == "full":
                out[name] = None
                continue
            if name == last_fc:
                raise PlanError(f"the final FC layer {name!r} cannot be factorized")
            bound = model.leaf(name).spec.natural_rank_bound()
            if not 1 <= ex["rank"] <= bound:
                raise PlanError(f"rank {ex['rank']} for {name!r} outside [1, {bound}]")
            out[name] = ex["rank"]
        return out


def make_plan(model, K, ratio=Fraction(1, 4), exceptions=()):
    plan = FactorizationPlan(model.arch_id, K, ratio, list(exceptions))
    plan.resolve(model)
    return plan


def vanilla_plan(model):
    return FactorizationPlan(model.arch_id, len(model.param_layers) + 1, Fraction(1, 1))


def layer_savings(model, plan):
    """Per-layer parameter drop ``vanilla count - split count`` under ``plan``."""
    from prefact.layers import build_layer

    out = {}
    for name, r in plan.resolve(model).items():
        if r is None:
            continue
        spec = model.leaf(name).spec
        spec.rank = None
        full = build_layer(spec).param_count()
        spec.rank = r
        out[name] = full - build_layer(spec).param_count()
    return out


def _split_leaf(vanilla, hybrid):
    """Factor every weight of ``vanilla`` that ``hybrid`` holds as a _u/_v pair."""
    src = vanilla.params
    shapes = hybrid.param_shapes()
    r = hybrid.rank
    out = {}
    for key, w in src.items():
        if key in shapes:
            out[key] = w.copy()
            continue
        if key + "_u" not in shapes:
            raise PlanError(f"{vanilla.name}: no factor slots for {key!r}")
        if w.ndim == 4:
            c_in, _, k, _ = w.shape
            u, v = truncated_split(unroll_conv_weight(w), r)
            out[key + "_u"] = roll_conv_weight(u, c_in, k)
            out[key + "_v"] = v.reshape(r, -1, 1, 1)
        else:
            out[key + "_u"], out[key + "_v"] = truncated_split(w, r)
    return out


def factorize_model(trained, plan, workers=None):
    """Build the hybrid twin of a trained vanilla model.

    Full-rank layers, biases and normalisation tensors (including BN running
    statistics) are copied verbatim. Each planned layer's weight goes through
    :func:`truncated_split`; conv weights are unrolled first and the factors
    reshaped to the thin conv / 1x1 conv pair. SVDs may run on ``workers``
    threads; the result is assembled in layer order.
    """
    from prefact.zoo import build_model

    if plan.arch_id != trained.arch_id:
        raise PlanError(f"plan is for {plan.arch_id!r}, model is {trained.arch_id!r}")
    if any(lf.rank is not None for lf in trained.param_layers):
        raise PlanError("model is already factorized")
    hybrid = build_model(trained.arch_id, "hybrid", plan=plan, seed=trained.seed, **trained.options)

    jobs = []
    for old in trained.leaves:
        new = hybrid.leaf(old.name)
        if new.kind in FACTORIZABLE and new.rank is not None:
            jobs.append((old, new))
        else:
            if old.param_shapes():
                new.set_params({k: v.copy() for k, v in old.params.items()})
            if old.buffer_shapes():
                new.set_buffers({k: v.copy() for k, v in old.buffers.items()})
    if workers and workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _split_leaf(*j), jobs))
    else:
        results = [_split_leaf(*j) for j in jobs]
    for (_, new), values in zip(jobs, results):
        new.set_params(values)
    hybrid.train(trained.root.training)
    return hybrid


def ranks_of(model):
    return {k: v for k, v in model.ranks().items()}


def reconstruction_errors(vanilla, hybrid):
    """Frobenius error between each vanilla weight and its factor product."""
    out = {}
    for new in hybrid.param_layers:
        if new.rank is None:
            continue
        old = vanilla.leaf(new.name)
        err = 0.0
        for key, w in old.params.items():
            if key + "_u" not in new.params:
                continue
            u, v = new.params[key + "_u"], new.params[key + "_v"]
            if w.ndim == 4:
                approx = unroll_conv_weight(u) @ v.reshape(v.shape[0], -1)
                err += float(np.sum((unroll_conv_weight(w) - approx) ** 2))
            else:
                err += float(np.sum((w - u @ v) ** 2))
        out[new.name] = float(np.sqrt(err))
    return out
