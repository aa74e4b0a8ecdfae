"""Architecture builders (vanilla and hybrid) for the reference models and toy models.

Every builder takes ``ranks`` (layer name -> rank or None) so the same code
produces both the vanilla network and any hybrid.
"""
from fractions import Fraction

from prefact.errors import ArgumentError
from prefact.graph import ModelGraph
from prefact.layers import (
    FC, BatchNorm, Conv2d, Dropout, EncoderBlock, Embedding, Flatten, LayerNorm, LSTMCell, Pool,
    PositionalEncoding, ReLU, Residual, Seq2Seq, Sequential, TiedLinear,
)

ARCH_IDS = (
    "vgg19_cifar10", "resnet18_cifar10", "resnet50_imagenet", "wrn50_2_imagenet",
    "lstm_wikitext2", "transformer_wmt16", "toy_mlp", "toy_cnn", "toy_lstm", "toy_transformer",
)


def _conv_bn_relu(ranks, name, bn_name, c_in, c_out, k=3, stride=1, pad=1):
    return [Conv2d(c_in, c_out, k, stride, pad, rank=ranks.get(name), name=name),
            BatchNorm(c_out, name=bn_name), ReLU(name=f"{name}.relu")]


def vgg19(ranks, num_classes=10):
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
           512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
    mods, c_in, i, pools = [], 3, 0, 0
    for v in cfg:
        if v == "M":
            pools += 1
            mods.append(Pool("max", 2, name=f"pool{pools}"))
            continue
        i += 1
        mods += _conv_bn_relu(ranks, f"conv{i}", f"bn{i}", c_in, v)
        c_in = v
    mods += [Flatten(name="flatten"),
             FC(512, 512, rank=ranks.get("fc17"), name="fc17"), ReLU(name="fc17.relu"),
             FC(512, 512, rank=ranks.get("fc18"), name="fc18"), ReLU(name="fc18.relu"),
             FC(512, num_classes, rank=ranks.get("fc19"), name="fc19")]
    return Sequential(mods), {"input_shape": [3, 32, 32], "task": "classification",
                              "num_classes": num_classes}


def _basic_block(ranks, name, c_in, planes, stride):
    body = (_conv_bn_relu(ranks, f"{name}.conv1", f"{name}.bn1", c_in, planes, 3, stride, 1)
            + [Conv2d(planes, planes, 3, 1, 1, rank=ranks.get(f"{name}.conv2"), name=f"{name}.conv2"),
               BatchNorm(planes, name=f"{name}.bn2")])
    shortcut = None
    if stride != 1 or c_in != planes:
        ds = f"{name}.downsample"
        shortcut = Sequential([Conv2d(c_in, planes, 1, stride, 0, rank=ranks.get(ds), name=ds),
                               BatchNorm(planes, name=f"{ds}.bn")])
    return Residual(Sequential(body), shortcut, ReLU(name=f"{name}.relu"), name=name)


def resnet18(ranks, num_classes=10):
    # stem BN omitted: reproduces the published parameter total
    mods = [Conv2d(3, 64, 3, 1, 1, rank=ranks.get("conv1"), name="conv1"), ReLU(name="conv1.relu")]
    c_in = 64
    for li, (planes, stride) in enumerate([(64, 1), (128, 2), (256, 2), (512, 2)], 1):
        for b in range(2):
            mods.append(_basic_block(ranks, f"layer{li}.{b}", c_in, planes, stride if b == 0 else 1))
            c_in = planes
    mods += [Pool("global", name="avgpool"), FC(512, num_classes, rank=ranks.get("fc"), name="fc")]
    return Sequential(mods), {"input_shape": [3, 32, 32], "task": "classification",
                              "num_classes": num_classes}


def _bottleneck(ranks, name, c_in, width, out, stride, downsample):
    R = lambda s: ranks.get(f"{name}.{s}")
    body = (_conv_bn_relu(ranks, f"{name}.conv1", f"{name}.bn1", c_in, width, 1, 1, 0)
            + _conv_bn_relu(ranks, f"{name}.conv2", f"{name}.bn2", width, width, 3, stride, 1)
            + [Conv2d(width, out, 1, 1, 0, rank=R("conv3"), name=f"{name}.conv3"),
               BatchNorm(out, name=f"{name}.bn3")])
    shortcut = None
    if downsample:
        ds = f"{name}.downsample"
        shortcut = Sequential([Conv2d(c_in, out, 1, stride, 0, rank=ranks.get(ds), name=ds),
                               BatchNorm(out, name=f"{ds}.bn")])
    return Residual(Sequential(body), shortcut, ReLU(name=f"{name}.relu"), name=name)


def resnet50(ranks, num_classes=1000, width_mult=1):
    mods = (_conv_bn_relu(ranks, "conv1", "bn1", 3, 64, 7, 2, 3)
            + [Pool("max", 3, 2, 1, name="maxpool")])
    c_in = 64
    for li, (planes, blocks, stride) in enumerate([(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)], 1):
        width, out = planes * width_mult, planes * 4
        for b in range(blocks):
            mods.append(_bottleneck(ranks, f"layer{li}.{b}", c_in, width, out,
                                    stride if b == 0 else 1, b == 0))
            c_in = out
    mods += [Pool("global", name="avgpool"), FC(2048, num_classes, rank=ranks.get("fc"), name="fc")]
    return Sequential(mods), {"input_shape": [3, 224, 224], "task": "classification",
                              "num_classes": num_classes}


def lstm_lm(ranks, vocab=33278, dim=1500, layers=2, dropout=0.0):
    embed = Embedding(vocab, dim, name="embed")
    mods = [embed, Dropout(dropout, name="embed_drop")]
    for i in range(1, layers + 1):
        mods += [LSTMCell(dim, dim, rank=ranks.get(f"lstm{i}"), name=f"lstm{i}"),
                 Dropout(dropout, name=f"lstm{i}_drop")]
    mods.append(TiedLinear(embed, bias=True, name="decoder"))
    return Sequential(mods), {"input_shape": [1], "task": "lm", "vocab": vocab,
                              "layout": "time_major"}


def transformer(ranks, vocab=9521, p=8, d=64, n_enc=6, n_dec=6, dropout=0.0, seq_len=32):
    model = Seq2Seq(vocab, p, d, n_enc, n_dec, dropout)
    for lf in model.leaves():
        if lf.kind in ("MultiHeadAttention", "FFN") and ranks.get(lf.name) is not None:
            lf.r = ranks[lf.name]
    return model, {"input_shape": [[seq_len], [seq_len]], "task": "seq2seq", "vocab": vocab}


def toy_mlp(ranks, in_dim=16, hidden=64, depth=2, num_classes=4):
    mods, c = [], in_dim
    for i in range(1, depth + 1):
        mods += [FC(c, hidden, rank=ranks.get(f"fc{i}"), name=f"fc{i}"), ReLU(name=f"fc{i}.relu")]
        c = hidden
    last = f"fc{depth + 1}"
    mods.append(FC(c, num_classes, rank=ranks.get(last), name=last))
    return Sequential(mods), {"input_shape": [in_dim], "task": "classification",
                              "num_classes": num_classes}


def toy_cnn(ranks, num_classes=4, in_channels=1, image_size=8):
    if image_size % 4:
        raise ArgumentError("toy_cnn image_size must be a multiple of 4")
    side = image_size // 4
    mods = (_conv_bn_relu(ranks, "conv1", "bn1", in_channels, 8)
            + _conv_bn_relu(ranks, "conv2", "bn2", 8, 16) + [Pool("max", 2, name="pool1")]
            + _conv_bn_relu(ranks, "conv3", "bn3", 16, 32) + [Pool("max", 2, name="pool2")]
            + [Flatten(name="flatten"),
               FC(32 * side * side, 32, rank=ranks.get("fc1"), name="fc1"), ReLU(name="fc1.relu"),
               FC(32, num_classes, rank=ranks.get("fc2"), name="fc2")])
    return Sequential(mods), {"input_shape": [in_channels, image_size, image_size],
                              "task": "classification", "num_classes": num_classes}


def toy_lstm(ranks, vocab=32, dim=16, layers=2, dropout=0.0):
    model, meta = lstm_lm(ranks, vocab, dim, layers, dropout)
    return model, meta


def toy_transformer(ranks, vocab=32, p=2, d=8, layers=2, dropout=0.0, seq_len=16):
    D = p * d
    embed = Embedding(vocab, D, scale=D ** 0.5, init_bound=(3.0 / D) ** 0.5, name="embed")
    mods = [embed, PositionalEncoding(D, name="pos"), Dropout(dropout, name="embed_drop")]
    for i in range(1, layers + 1):
        blk = EncoderBlock(p, d, dropout, causal=True, name=f"block{i}")
        for lf in (blk.attn, blk.ffn):
            if ranks.get(lf.name) is not None:
                lf.r = ranks[lf.name]
        mods.append(blk)
    mods += [LayerNorm(D, name="norm"), TiedLinear(embed, bias=False, name="out_proj")]
    return Sequential(mods), {"input_shape": [seq_len], "task": "lm", "vocab": vocab,
                              "layout": "batch_major"}


BUILDERS = {
    "vgg19_cifar10": vgg19,
    "resnet18_cifar10": resnet18,
    "resnet50_imagenet": resnet50,
    "wrn50_2_imagenet": lambda ranks, **kw: resnet50(ranks, width_mult=2, **kw),
    "lstm_wikitext2": lstm_lm,
    "transformer_wmt16": transformer,
    "toy_mlp": toy_mlp,
    "toy_cnn": toy_cnn,
    "toy_lstm": toy_lstm,
    "toy_transformer": toy_transformer,
}


def _downsamples(model):
    return [{"layer": lf.name, "action": "full"} for lf in model.param_layers
            if lf.name.endswith(".downsample")]


# default hybrid plans: (K, exceptions(model))
DEFAULT_PLANS = {
    "vgg19_cifar10": (10, lambda m: []),
    "resnet18_cifar10": (4, _downsamples),
    "resnet50_imagenet": (44, lambda m: []),
    "wrn50_2_imagenet": (44, lambda m: []),
    "lstm_wikitext2": (1, lambda m: []),
    "transformer_wmt16": (3, lambda m: [{"layer": n, "action": "full"} for n in
                                        ("dec1.self_attn", "dec1.cross_attn", "dec1.ffn")]),
    "toy_mlp": (2, lambda m: []),
    "toy_cnn": (2, lambda m: []),
    "toy_lstm": (1, lambda m: []),
    "toy_transformer": (3, lambda m: []),
}


def _check_arch(arch_id):
    if arch_id not in BUILDERS:
        raise ArgumentError(f"unknown arch_id {arch_id!r}; expected one of {', '.join(ARCH_IDS)}")


def default_plan(arch_id, ratio=Fraction(1, 4), K=None, **options):
    """The hybrid plan used when none is given (optionally overriding K / ratio)."""
    from prefact.factorize import make_plan

    _check_arch(arch_id)
    vanilla = build_model(arch_id, "vanilla", **options)
    k_default, exc = DEFAULT_PLANS[arch_id]
    return make_plan(vanilla, k_default if K is None else K, ratio, exc(vanilla))


def build_model(arch_id, mode="vanilla", plan=None, seed=0, **options):
    """Build ``arch_id`` as a vanilla or hybrid graph with lazily seeded weights."""
    _check_arch(arch_id)
    if mode not in ("vanilla", "hybrid"):
        raise ArgumentError(f"mode must be 'vanilla' or 'hybrid', got {mode!r}")
    builder = BUILDERS[arch_id]
    try:
        root, meta = builder({}, **options)
    except TypeError as exc:
        raise ArgumentError(f"bad options for {arch_id}: {exc}") from None
    graph = ModelGraph(root, arch_id, meta, "vanilla", None, seed, options)
    if mode == "hybrid":
        if plan is None:
            k_default, exc = DEFAULT_PLANS[arch_id]
            from prefact.factorize import make_plan
            plan = make_plan(graph, k_default, Fraction(1, 4), exc(graph))
        elif plan.arch_id != arch_id:
            from prefact.errors import PlanError
            raise PlanError(f"plan is for {plan.arch_id!r}, not {arch_id!r}")
        ranks = plan.resolve(graph)
        root, meta = builder(ranks, **options)
        graph = ModelGraph(root, arch_id, meta, "hybrid", plan, seed, options)
    graph.count_report()  # validates that adjacent shapes compose
    return graph
