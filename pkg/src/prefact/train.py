"""SGD training and the warm-up -> factorize -> low-rank fine-tune procedure.

Epochs are 1-based. Warm-up epochs count toward the total: with ``E`` epochs
and ``E_wu`` warm-up epochs the vanilla model trains for epochs ``1..E_wu``,
is factorized once, and the hybrid trains for ``E_wu+1..E`` with the same
learning-rate schedule continuing. Optimizer state is reset at the switch.
"""
import csv
import io
import math
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from prefact.datasets import ClassificationData, TokenData
from prefact.errors import ArgumentError, ShapeError, TrainingError
from prefact.factorize import factorize_model
from prefact.zoo import build_model

LOG_COLUMNS = ("epoch", "phase", "lr", "loss", "metric", "param_count", "epoch_seconds")


@dataclass
class LRSchedule:
    """Per-epoch learning rate.

    ``milestones``: ``init * factor ** (number of milestones <= epoch)``.
    ``linear_warmup_then_milestones``: linear from ``start`` (epoch 1) to
    ``peak`` (epoch ``warmup_epochs``), then ``peak`` decayed at milestones.
    ``plateau``: starts at ``init``; multiplied by ``factor`` after every epoch
    whose monitored loss did not improve on the best so far.
    """
    kind: str = "milestones"
    init: float = 0.1
    factor: float = 0.1
    milestones: tuple = ()
    start: float = 0.1
    peak: float = 0.1
    warmup_epochs: int = 0
    epochs: int = None

    def __post_init__(self):
        if self.kind not in ("milestones", "linear_warmup_then_milestones", "plateau"):
            raise ArgumentError(f"unknown schedule kind {self.kind!r}")
        self.milestones = tuple(int(m) for m in self.milestones)
        vals = (self.init, self.start, self.peak) if self.kind != "plateau" else (self.init,)
        if any(not (v > 0 and math.isfinite(v)) for v in vals) or not self.factor > 0:
            raise ArgumentError("learning rates and decay factor must be positive and finite")
        if self.kind == "linear_warmup_then_milestones" and self.warmup_epochs < 1:
            raise ArgumentError("linear warm-up needs warmup_epochs >= 1")

    def to_json(self):
        return {"kind": self.kind, "init": self.init, "factor": self.factor,
                "milestones": list(self.milestones), "start": self.start, "peak": self.peak,
                "warmup_epochs": self.warmup_epochs, "epochs": self.epochs}

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def lr_at(schedule, epoch, history=None):
    """Learning rate for 1-based ``epoch``; ``history`` holds past losses (plateau)."""
    if epoch < 1 or (schedule.epochs is not None and epoch > schedule.epochs):
        raise ArgumentError(f"epoch {epoch} outside [1, {schedule.epochs}]")
    decays = sum(1 for m in schedule.milestones if m <= epoch)
    if schedule.kind == "milestones":
        return schedule.init * schedule.factor ** decays
    if schedule.kind == "linear_warmup_then_milestones":
        w = schedule.warmup_epochs
        if epoch <= w:
            if w == 1:
                return schedule.peak
            return schedule.start + (schedule.peak - schedule.start) * (epoch - 1) / (w - 1)
        return schedule.peak * schedule.factor ** decays
    lr, best = schedule.init, math.inf
    for loss in list(history or [])[: epoch - 1]:
        if loss < best:
            best = loss
        else:
            lr *= schedule.factor
    return lr


@dataclass
class TrainConfig:
    epochs: int = 1
    warmup_epochs: int = 0
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: LRSchedule = field(default_factory=LRSchedule)
    clip: float = None
    label_smoothing: float = 0.0
    seed: int = 0
    bptt: int = 35
    rewarm_lr: bool = False
    svd_workers: int = 1
    prefetch: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = LRSchedule.from_json(self.schedule)
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ArgumentError(f"need 0 <= E_wu ({self.warmup_epochs}) <= E ({self.epochs})")
        for name in ("momentum", "weight_decay", "label_smoothing"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ArgumentError(f"{name} must be finite and non-negative, got {v}")
        if self.clip is not None and not self.clip > 0:
            raise ArgumentError("clip bound must be positive")
        if self.batch_size < 1 or self.bptt < 1:
            raise ArgumentError("batch_size and bptt must be >= 1")

    def to_json(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["schedule"] = self.schedule.to_json()
        return out


# --- optimizer pieces -------------------------------------------------------------

def sgd_step(params, grads, velocity, lr, momentum, weight_decay, decay_mask=None):
    """In-place momentum SGD: ``v = m v + g + wd theta`` (masked), ``theta -= lr v``."""
    if not lr > 0:
        raise ArgumentError(f"learning rate must be positive, got {lr}")
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity lists differ in length")
    mask = decay_mask if decay_mask is not None else [True] * len(params)
    for theta, g, v, dec in zip(params, grads, velocity, mask):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {theta.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        if dec and weight_decay:
            v += weight_decay * theta
        theta -= lr * v
    return params, velocity


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads, bound):
    """Scale all grads by ``bound / norm`` when the global L2 norm exceeds ``bound``."""
    if not bound > 0:
        raise ArgumentError("clip bound must be positive")
    norm = global_norm(grads)
    if norm > bound:
        scale = bound / norm
        for g in grads:
            g *= scale
    return grads


def cross_entropy(logits, targets, smoothing=0.0):
    """Mean cross-entropy over all positions; returns ``(loss, dloss/dlogits)``."""
    C = logits.shape[-1]
    z = logits.reshape(-1, C)
    t = np.asarray(targets).reshape(-1)
    if len(t) != len(z):
        raise ShapeError(f"{len(t)} targets for {len(z)} logit rows")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(t)
    nll = -logp[np.arange(n), t]
    loss = nll if smoothing == 0 else (1 - smoothing) * nll - smoothing * logp.mean(axis=1)
    grad = np.exp(logp)
    grad[np.arange(n), t] -= 1.0 - smoothing
    if smoothing:
        grad -= smoothing / C
    return float(loss.mean()), (grad / n).reshape(logits.shape)


class SGD:
    """Momentum SGD bound to a model's parameter list."""

    def __init__(self, model, momentum=0.9, weight_decay=0.0, clip=None):
        self.model = model
        self.momentum, self.weight_decay, self.clip = momentum, weight_decay, clip
        self.names = [n for n, _ in model.named_parameters()]
        self.params = [p for _, p in model.named_parameters()]
        self.velocity = [np.zeros_like(p) for p in self.params]
        self.mask = model.decay_mask()

    def step(self, lr):
        grads = [g for _, g in self.model.named_grads()]
        if self.clip is not None:
            clip_grad_norm(grads, self.clip)
        sgd_step(self.params, grads, self.velocity, lr, self.momentum, self.weight_decay, self.mask)


# --- batching -------------------------------------------------------------------------

class Prefetcher:
    """Runs ``iterable`` on a worker thread, handing items over a bounded FIFO.

    Item order is the iterable's order, so it does not affect determinism.
    """
    _END = object()

    def __init__(self, iterable, depth=2):
        self._q = queue.Queue(maxsize=max(1, depth))
        self._err = None
        self._thread = threading.Thread(target=self._run, args=(iterable,), daemon=True)
        self._thread.start()

    def _run(self, iterable):
        try:
            for item in iterable:
                self._q.put(item)
        except BaseException as exc:  # re-raised in the consumer
            self._err = exc
        self._q.put(self._END)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is self._END:
                self._thread.join()
                if self._err is not None:
                    raise self._err
                return
            yield item


def classification_batches(data, model, batch_size, seed, epoch):
    shape = tuple(model.meta["input_shape"])
    x = data.x.reshape((len(data.x),) + shape) if data.x.shape[1:] != shape else data.x
    order = np.random.default_rng([seed, epoch]).permutation(len(x))
    bounds = list(range(0, len(x), batch_size)) + [len(x)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]  # a trailing single sample joins the previous batch
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        yield x[idx], data.y[idx]


def lm_batches(data, model, batch_size, bptt, seed, epoch):
    toks = data.tokens
    if model.meta.get("layout") == "time_major":
        n = len(toks) // batch_size
        if n < 2:
            raise ArgumentError("token stream too short for the batch size")
        grid = toks[: n * batch_size].reshape(batch_size, n).T
        for i in range(0, n - 1, bptt):
            T = min(bptt, n - 1 - i)
            yield grid[i:i + T], grid[i + 1:i + 1 + T]
        return
    N = int(model.meta["input_shape"][0])
    chunks = (len(toks) - 1) // N
    if chunks < 1:
        raise ArgumentError("token stream shorter than one window")
    order = np.random.default_rng([seed, epoch]).permutation(chunks)
    for a in range(0, chunks, batch_size):
        starts = order[a:a + batch_size] * N
        win = np.stack([toks[s:s + N + 1] for s in starts])
        yield win[:, :-1], win[:, 1:]


def _batches(model, data, config, epoch):
    task = model.meta.get("task")
    if task == "classification":
        if not isinstance(data, ClassificationData):
            raise ArgumentError(f"{model.arch_id} needs classification data")
        return classification_batches(data, model, config.batch_size, config.seed, epoch)
    if task == "lm":
        if not isinstance(data, TokenData):
            raise ArgumentError(f"{model.arch_id} needs a token stream")
        return lm_batches(data, model, config.batch_size, config.bptt, config.seed, epoch)
    raise ArgumentError(f"{model.arch_id} is built for counting and smoke tests only")


def _metric(task, loss, correct, count):
    if task == "lm":
        return math.exp(min(loss, 700.0))
    return correct / max(count, 1)


def train_epoch(model, data, config, epoch, optimizer=None, lr=None):
    """One pass over ``data``. Returns ``{loss, metric, lr, batches}``.

    ``metric`` is accuracy for classification and perplexity
    (``exp`` of the mean token loss) for language models.
    """
    if lr is None:
        lr = lr_at(config.schedule, epoch)
    if optimizer is None:
        optimizer = SGD(model, config.momentum, config.weight_decay, config.clip)
    task = model.meta.get("task")
    model.train()
    if task == "lm":
        model.set_stateful(True)
    batches = _batches(model, data, config, epoch)
    if config.prefetch:
        batches = Prefetcher(batches, config.prefetch)
    total, count, correct, nb = 0.0, 0, 0, 0
    for bi, (xb, yb) in enumerate(batches):
        model.zero_grad()
        logits = model.forward(xb)
        loss, grad = cross_entropy(logits, yb, config.label_smoothing)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}", batch_index=bi)
        model.backward(grad)
        optimizer.step(lr)
        n = int(np.size(yb))
        total += loss * n
        count += n
        if task == "classification":
            correct += int((logits.argmax(axis=-1) == yb).sum())
        nb += 1
    if task == "lm":
        model.set_stateful(False)
    mean = total / max(count, 1)
    return {"loss": mean, "metric": _metric(task, mean, correct, count), "lr": lr, "batches": nb}


def evaluate(model, data, config):
    """Mean loss and metric in eval mode, no parameter updates."""
    task = model.meta.get("task")
    model.eval()
    if task == "lm":
        model.set_stateful(True)
    total, count, correct = 0.0, 0, 0
    for xb, yb in _batches(model, data, config, 0):
        logits = model.forward(xb)
        loss, _ = cross_entropy(logits, yb)
        n = int(np.size(yb))
        total += loss * n
        count += n
        if task == "classification":
            correct += int((logits.argmax(axis=-1) == yb).sum())
    if task == "lm":
        model.set_stateful(False)
    model.train()
    mean = total / max(count, 1)
    return {"loss": mean, "metric": _metric(task, mean, correct, count)}


# --- the full procedure ------------------------------------------------------------------------

@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    switch_epoch: int = None

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], r["phase"], repr(float(r["lr"])), repr(float(r["loss"])),
                        repr(float(r["metric"])), r["param_count"], f"{r['epoch_seconds']:.6f}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def prefactorized_train(arch_id, config, plan=None, data=None, model_options=None,
                        on_epoch=None, initial_model=None):
    """Vanilla warm-up, one SVD factorization, then low-rank training.

    ``E_wu = 0`` trains a randomly initialised hybrid from scratch; ``E_wu = E``
    returns the factorized model with no fine-tune epochs. Returns
    ``(hybrid model, MetricsLog)``; the log's ``switch_epoch`` is ``E_wu``.
    """
    opts = dict(model_options or {})
    if plan is None:
        from prefact.zoo import default_plan
        plan = default_plan(arch_id, **opts)
    E, Ewu = config.epochs, config.warmup_epochs
    log = MetricsLog(switch_epoch=Ewu)

    if Ewu == 0:
        model = build_model(arch_id, "hybrid", plan=plan, seed=config.seed, **opts)
    else:
        model = initial_model or build_model(arch_id, "vanilla", seed=config.seed, **opts)
    phase = "hybrid" if Ewu == 0 else "vanilla"
    opt = SGD(model, config.momentum, config.weight_decay, config.clip)
    history = []
    for epoch in range(1, E + 1):
        sched_epoch = epoch - Ewu if (config.rewarm_lr and phase == "hybrid" and Ewu) else epoch
        lr = lr_at(config.schedule, sched_epoch, history)
        t0 = time.perf_counter()
        stats = train_epoch(model, data, config, epoch, opt, lr)
        row = {"epoch": epoch, "phase": phase, "lr": lr, "loss": stats["loss"],
               "metric": stats["metric"], "param_count": model.param_count(),
               "epoch_seconds": time.perf_counter() - t0}
        log.rows.append(row)
        history.append(stats["loss"])
        if on_epoch is not None:
            on_epoch(row, model)
        if epoch == Ewu:
            model = factorize_model(model, plan, workers=config.svd_workers)
            opt = SGD(model, config.momentum, config.weight_decay, config.clip)
            phase = "hybrid"
    return model, log
