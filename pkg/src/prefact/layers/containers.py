"""Containers that route data between leaves: residual blocks and the seq2seq transformer."""
import numpy as np

from prefact.layers.attention import DecoderBlock, EncoderBlock
from prefact.layers.base import Module, Sequential
from prefact.layers.basic import Dropout, Embedding, LayerNorm, PositionalEncoding, TiedLinear


class Residual(Module):
    """``post(body(x) + shortcut(x))``; identity shortcut when none is given."""
    kind = "Residual"

    def __init__(self, body, shortcut=None, post=None, name=""):
        super().__init__(name)
        self.body = body if isinstance(body, Module) else Sequential(body)
        self.shortcut = shortcut
        self.post = post

    def children(self):
        out = [self.body]
        if self.shortcut is not None:
            out.append(self.shortcut)
        if self.post is not None:
            out.append(self.post)
        return out

    def forward(self, x):
        y = self.body(x)
        y = y + (self.shortcut(x) if self.shortcut is not None else x)
        return self.post(y) if self.post is not None else y

    def backward(self, g):
        if self.post is not None:
            g = self.post.backward(g)
        gx = self.body.backward(g)
        return gx + (self.shortcut.backward(g) if self.shortcut is not None else g)

    def account(self, in_shape, records):
        out = self.body.account(in_shape, records)
        if self.shortcut is not None:
            self.shortcut.account(in_shape, records)
        if self.post is not None:
            out = self.post.account(out, records)
        return out


class Seq2Seq(Module):
    """Encoder-decoder transformer with one embedding table shared by source,
    target and the output projection. Input ``(src, tgt)`` token arrays of
    shape ``(B, Ns)``, ``(B, Nt)``; output logits ``(B, Nt, vocab)``."""
    kind = "Seq2Seq"

    def __init__(self, vocab, p, d, n_enc, n_dec, dropout=0.0, name=""):
        super().__init__(name)
        D = p * d
        self.embed = Embedding(vocab, D, scale=np.sqrt(D), init_bound=np.sqrt(3.0 / D),
                               name="embed")
        self.embed.shared = True
        self.pos = PositionalEncoding(D, name="pos")
        self.src_drop = Dropout(dropout, name="src_drop")
        self.tgt_drop = Dropout(dropout, name="tgt_drop")
        self.encoder = [EncoderBlock(p, d, dropout, name=f"enc{i + 1}") for i in range(n_enc)]
        self.enc_norm = LayerNorm(D, name="enc_norm")
        self.decoder = [DecoderBlock(p, d, dropout, name=f"dec{i + 1}") for i in range(n_dec)]
        self.dec_norm = LayerNorm(D, name="dec_norm")
        self.out = TiedLinear(self.embed, bias=False, name="out_proj")

    def children(self):
        return ([self.embed, self.pos, self.src_drop] + self.encoder + [self.enc_norm, self.tgt_drop]
                + self.decoder + [self.dec_norm, self.out])

    def forward(self, inputs):
        src, tgt = inputs
        self.embed._stack = []
        h = self.src_drop(self.pos(self.embed(src)))
        for blk in self.encoder:
            h = blk(h)
        memory = self.enc_norm(h)
        y = self.tgt_drop(self.pos(self.embed(tgt)))
        for blk in self.decoder:
            y = blk(y, memory)
        return self.out(self.dec_norm(y))

    def backward(self, g):
        g = self.dec_norm.backward(self.out.backward(g))
        gmem = 0.0
        for blk in reversed(self.decoder):
            g, gm = blk.backward(g)
            gmem = gmem + gm
        self.embed.backward(self.pos.backward(self.tgt_drop.backward(g)))
        g = self.enc_norm.backward(gmem)
        for blk in reversed(self.encoder):
            g = blk.backward(g)
        self.embed.backward(self.pos.backward(self.src_drop.backward(g)))
        return None

    def account(self, in_shape, records):
        src_shape, tgt_shape = in_shape
        h = self.embed.account(tuple(src_shape), records)
        h = self.pos.account(h, records)
        h = self.src_drop.account(h, records)
        for blk in self.encoder:
            h = blk.account(h, records)
        h = self.enc_norm.account(h, records)
        y = self.tgt_drop.account(self.embed.output_shape(tuple(tgt_shape)), records)
        for blk in self.decoder:
            y = blk.account(y, records, mem_len=h[0])
        y = self.dec_norm.account(y, records)
        return self.out.account(y, records)
