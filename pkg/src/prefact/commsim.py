"""Analytical ring-allreduce cost model for data-parallel gradient exchange.

One allreduce of ``n`` bytes over ``p`` nodes (reduce-scatter then allgather)::

    T(n) = 2 (p - 1) alpha + 2 n (p - 1) / (p beta)

``flat`` mode packs every gradient into one buffer (one call per iteration);
``per_layer`` mode issues one call for each layer that has parameters.
Gradients are FP32 (4 bytes per scalar).
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from prefact.errors import ArgumentError

MODES = ("flat", "per_layer")


@dataclass(frozen=True)
class ClusterModel:
    p: int
    alpha: float
    beta: float
    bytes_per_scalar: int = 4

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 2:
            raise ArgumentError(f"node count must be an integer >= 2, got {self.p}")
        if not self.alpha >= 0:
            raise ArgumentError(f"latency must be >= 0, got {self.alpha}")
        if not self.beta > 0:
            raise ArgumentError(f"bandwidth must be > 0, got {self.beta}")


def allreduce_time(n_bytes, cluster):
    if n_bytes < 0:
        raise ArgumentError("byte count must be non-negative")
    p = cluster.p
    bw = 0.0 if math.isinf(cluster.beta) else 2.0 * n_bytes * (p - 1) / (p * cluster.beta)
    return 2.0 * (p - 1) * cluster.alpha + bw


def layer_payloads(model, bytes_per_scalar=4):
    """Gradient bytes per layer, for layers that have parameters, in layer order."""
    return {lf.name: lf.param_count() * bytes_per_scalar for lf in model.leaves if lf.param_count()}


def epoch_comm_time(model, cluster, iters_per_epoch, mode="flat"):
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    sizes = layer_payloads(model, cluster.bytes_per_scalar)
    per_iter = allreduce_time(sum(sizes.values()), cluster)
    if mode == "per_layer" and len(sizes) > 1:
        # sum over layers of T(b_l), regrouped: the bandwidth terms add up to the
        # flat one, leaving one extra latency term per additional call
        per_iter += (len(sizes) - 1) * allreduce_time(0, cluster)
    return iters_per_epoch * per_iter


@dataclass
class CommReport:
    arch_id: str
    mode: str
    nodes: int
    iters_per_epoch: int
    layer_bytes: dict = field(default_factory=dict)
    total_bytes: int = 0
    flat_seconds: float = 0.0
    per_layer_seconds: float = 0.0
    payload_ratio: float = None

    def to_json(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "bytes"])
        for name, b in self.layer_bytes.items():
            w.writerow([name, b])
        w.writerow(["TOTAL", self.total_bytes])
        return buf.getvalue()


def comm_report(model, cluster, iters_per_epoch, reference=None):
    """Payload and predicted per-epoch allreduce seconds; ``reference`` sets the ratio."""
    sizes = layer_payloads(model, cluster.bytes_per_scalar)
    total = sum(sizes.values())
    ratio = None
    if reference is not None:
        ratio = total / sum(layer_payloads(reference, cluster.bytes_per_scalar).values())
    return CommReport(model.arch_id, model.mode, cluster.p, iters_per_epoch, sizes, total,
                      epoch_comm_time(model, cluster, iters_per_epoch, "flat"),
                      epoch_comm_time(model, cluster, iters_per_epoch, "per_layer"), ratio)


def speedup_report(vanilla, hybrid, cluster, compute_seconds, iters_per_epoch, epochs=1,
                   warmup_epochs=0, mode="flat"):
    """Combine caller-supplied compute seconds per epoch ``(vanilla, hybrid)`` with
    modelled communication. The whole-run projection trains ``warmup_epochs``
    vanilla epochs then ``epochs - warmup_epochs`` hybrid epochs."""
    if not 0 <= warmup_epochs <= epochs:
        raise ArgumentError("need 0 <= warmup_epochs <= epochs")
    cv, ch = compute_seconds
    mv = epoch_comm_time(vanilla, cluster, iters_per_epoch, mode)
    mh = epoch_comm_time(hybrid, cluster, iters_per_epoch, mode)
    ev, eh = cv + mv, ch + mh
    run_v = epochs * ev
    run_h = epochs * eh + warmup_epochs * (ev - eh)
    return {
        "vanilla": comm_report(vanilla, cluster, iters_per_epoch).to_json(),
        "hybrid": comm_report(hybrid, cluster, iters_per_epoch, vanilla).to_json(),
        "mode": mode,
        "epoch_seconds": {"vanilla": ev, "hybrid": eh},
        "comm_seconds": {"vanilla": mv, "hybrid": mh},
        "epoch_speedup": ev / eh if eh > 0 else math.inf,
        "run_seconds": {"vanilla": run_v, "hybrid": run_h},
        "run_speedup": run_v / run_h if run_h > 0 else math.inf,
    }


def projection_table(vanilla, hybrid, nodes, alpha, beta, iters_per_epoch, mode="flat"):
    """Per-epoch comm seconds for each node count in ``nodes``."""
    rows = []
    for p in nodes:
        c = ClusterModel(int(p), alpha, beta)
        v = epoch_comm_time(vanilla, c, iters_per_epoch, mode)
        h = epoch_comm_time(hybrid, c, iters_per_epoch, mode)
        rows.append({"nodes": int(p), "vanilla_seconds": v, "hybrid_seconds": h,
                     "ratio": h / v if v > 0 else 1.0})
    return rows
