"""Central finite-difference gradient checks for every layer kind.

The scalar probed is ``sum(out * R)`` for a fixed random ``R``, so the analytic
side is one ``backward(R)``. Error per tensor is
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
"""
import numpy as np

from prefact.layers import (
    FC, FFN, BatchNorm, Conv2d, DecoderBlock, Dropout, EncoderBlock, Embedding, Flatten,
    LayerNorm, LSTMCell, MultiHeadAttention, Pool, PositionalEncoding, ReLU, Residual, Seq2Seq,
    Sequential, TiedLinear,
)

EPS = 1e-5
TOL = 1e-4


def _rel(a, n):
    den = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / den)


def _dropouts(module):
    if isinstance(module, Dropout):
        return [module]
    return [lf for lf in getattr(module, "leaves", lambda: [])() if isinstance(lf, Dropout)]


def _leaves(module):
    return [module] if not module.children() else module.leaves()


def check(module, inputs, seed=0, eps=EPS, max_entries=None, input_grads=True):
    """Return ``{tensor name: relative error}`` for all params (and float inputs)."""
    rng = np.random.default_rng(seed)
    drops = _dropouts(module)

    def run():
        for d in drops:
            d.reset_rng()
        return module.forward(*inputs)

    out = run()
    R = rng.standard_normal(np.shape(out))
    leaves = _leaves(module)
    for lf in leaves:
        lf.params
        lf.zero_grad()
    run()
    gin = module.backward(R)
    if not isinstance(gin, tuple):
        gin = (gin,)

    def loss():
        return float(np.sum(run() * R))

    def numeric(arr, idx):
        old = arr[idx]
        arr[idx] = old + eps
        lp = loss()
        arr[idx] = old - eps
        lm = loss()
        arr[idx] = old
        return (lp - lm) / (2 * eps)

    def probe(arr, analytic, name, results):
        flat = list(np.ndindex(arr.shape))
        if max_entries is not None and len(flat) > max_entries:
            pick = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in sorted(pick)]
        a = np.array([analytic[i] for i in flat])
        n = np.array([numeric(arr, i) for i in flat])
        results[name] = _rel(a, n)

    results = {}
    seen = set()
    for lf in leaves:
        for k, arr in lf.params.items():
            if id(arr) in seen:
                continue
            seen.add(id(arr))
            probe(arr, lf.grads[k].copy(), f"{lf.name or lf.kind}.{k}", results)
    if input_grads:
        for i, (x, g) in enumerate(zip(inputs, gin)):
            if g is None or not np.issubdtype(np.asarray(x).dtype, np.floating):
                continue
            probe(x, g, f"input{i}", results)
    return results


def cases(seed=0):
    """Small instances of every layer kind: ``[(label, module, inputs)]``."""
    rng = np.random.default_rng(seed)
    rn = lambda *s: rng.standard_normal(s)
    out = []

    def add(label, module, *inputs):
        for i, lf in enumerate(_leaves(module)):
            lf.seed = [seed, len(out), i]
        out.append((label, module, list(inputs)))

    add("FC", FC(5, 4), rn(3, 5))
    add("FC factorized", FC(5, 4, rank=2), rn(3, 5))
    add("Conv2d", Conv2d(2, 3, 3, 1, 1, bias=True), rn(2, 2, 5, 5))
    add("Conv2d strided", Conv2d(2, 3, 3, 2, 0), rn(2, 2, 6, 6))
    add("Conv2d factorized", Conv2d(2, 4, 3, 1, 1, rank=2), rn(2, 2, 4, 4))
    add("Conv2d factorized 1x1 strided", Conv2d(3, 4, 1, 2, 0, rank=2), rn(2, 3, 5, 5))
    add("LSTMCell", LSTMCell(3, 4), rn(4, 2, 3))
    add("LSTMCell factorized", LSTMCell(3, 4, rank=2), rn(4, 2, 3))
    add("MultiHeadAttention", MultiHeadAttention(2, 3), rn(2, 4, 6))
    add("MultiHeadAttention causal factorized", MultiHeadAttention(2, 3, causal=True, rank=2),
        rn(2, 4, 6))
    add("MultiHeadAttention cross", MultiHeadAttention(2, 2), rn(2, 3, 4), rn(2, 5, 4))
    add("FFN", FFN(1, 3), rn(2, 3, 3))
    add("FFN factorized", FFN(1, 4, rank=2), rn(2, 3, 4))
    add("BatchNorm conv", BatchNorm(3), rn(4, 3, 2, 2))
    add("BatchNorm fc", BatchNorm(4), rn(5, 4))
    bn_eval = BatchNorm(3)
    bn_eval.set_buffers({"running_mean": rn(3), "running_var": rng.uniform(0.5, 2.0, 3)})
    bn_eval.eval()
    add("BatchNorm eval", bn_eval, rn(2, 3, 2, 2))
    add("LayerNorm", LayerNorm(5), rn(3, 5))
    add("Pool max padded", Pool("max", 3, 2, 1), rn(2, 2, 5, 5))
    add("Pool avg", Pool("avg", 2), rn(2, 2, 4, 4))
    add("Pool global", Pool("global"), rn(2, 3, 3, 3))
    add("ReLU", ReLU(), rn(3, 4))
    add("Flatten", Flatten(), rn(2, 2, 3))
    add("Dropout", Dropout(0.3), rn(4, 5))
    emb = Embedding(7, 4)
    add("Embedding", emb, rng.integers(0, 7, size=(3, 2)))
    emb2 = Embedding(6, 3)
    add("TiedLinear", Sequential([emb2, TiedLinear(emb2, bias=True)]), rng.integers(0, 6, size=(4, 2)))
    add("PositionalEncoding", PositionalEncoding(4), rn(2, 3, 4))
    body = Sequential([Conv2d(2, 2, 3, 1, 1), BatchNorm(2), ReLU(), Conv2d(2, 2, 3, 1, 1, rank=1)])
    add("Residual", Residual(body, None, ReLU()), rn(3, 2, 4, 4))
    add("EncoderBlock", EncoderBlock(2, 2, causal=True), rn(2, 3, 4))
    add("DecoderBlock", DecoderBlock(2, 2), rn(2, 3, 4), rn(2, 4, 4))
    add("Seq2Seq", Seq2Seq(9, 2, 2, 1, 1), (rng.integers(0, 9, (2, 3)), rng.integers(0, 9, (2, 4))))
    return out


def run_all(seed=0, eps=EPS, max_entries=None):
    """Check every case; returns ``[{case, tensor, rel_error, ok}]``."""
    rows = []
    for label, module, inputs in cases(seed):
        if label == "Seq2Seq":
            res = check(module, inputs, seed, eps, max_entries, input_grads=False)
        else:
            res = check(module, inputs, seed, eps, max_entries)
        for name, err in res.items():
            rows.append({"case": label, "tensor": name, "rel_error": err, "ok": err <= TOL})
    return rows
