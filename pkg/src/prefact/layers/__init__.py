"""Layer kinds, vanilla and factorized, with forward/backward and counting."""
from prefact.layers.base import (
    FACTORIZABLE, LayerSpec, Leaf, Module, Sequential, build_layer, layer_class, mac_count,
    param_count,
)
from prefact.layers.dense import FC, Conv2d
from prefact.layers.recurrent import GATES, LSTMCell
from prefact.layers.basic import (
    BatchNorm, Dropout, Embedding, Flatten, LayerNorm, Pool, PositionalEncoding, ReLU, TiedLinear,
)
from prefact.layers.attention import FFN, DecoderBlock, EncoderBlock, MultiHeadAttention
from prefact.layers.containers import Residual, Seq2Seq

__all__ = [
    "FACTORIZABLE", "LayerSpec", "Leaf", "Module", "Sequential", "build_layer", "layer_class",
    "mac_count", "param_count", "FC", "Conv2d", "GATES", "LSTMCell", "BatchNorm", "Dropout",
    "Embedding", "Flatten", "LayerNorm", "Pool", "PositionalEncoding", "ReLU", "TiedLinear",
    "FFN", "DecoderBlock", "EncoderBlock", "MultiHeadAttention", "Residual", "Seq2Seq",
]
