import json
import struct

import numpy as np
import pytest

from prefact.checkpoint import (
    ALIGN, HEADER, MAGIC, decode, encode, load_checkpoint, read_manifest, save_checkpoint,
)
from prefact.errors import BadMagicError, ManifestError, TruncatedCheckpointError
from prefact.factorize import factorize_model
from prefact.zoo import build_model, default_plan

ARCHS = ["toy_mlp", "toy_cnn", "toy_lstm", "toy_transformer"]


def f32(model):
    return {k: v.astype(np.float32) for k, v in model.state_dict().items()}


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("mode", ["vanilla", "hybrid"])
def test_round_trip(arch, mode, tmp_path):
    m = build_model(arch, mode, seed=7)
    path = tmp_path / "m.puff"
    save_checkpoint(m, path, epoch=3)
    back = load_checkpoint(path)
    assert back.arch_id == arch and back.mode == mode and back.epoch == 3
    a, b = f32(m), f32(back)
    assert list(a) == list(b)
    for k in a:
        assert np.array_equal(a[k], b[k])
    # save -> load -> save is byte-identical
    path2 = tmp_path / "m2.puff"
    save_checkpoint(back, path2, epoch=3)
    assert path.read_bytes() == path2.read_bytes()


def test_bn_stats_and_plan_survive():
    m = build_model("toy_cnn", "hybrid", plan=default_plan("toy_cnn", K=3))
    m.leaf("bn2").set_buffers({"running_mean": np.arange(16.0), "running_var": np.full(16, 2.5)})
    back = decode(encode(m))
    assert np.array_equal(back.leaf("bn2").buffers["running_mean"], np.arange(16.0))
    assert back.plan == m.plan and back.ranks() == m.ranks()


def test_layout():
    raw = encode(build_model("toy_mlp"))
    assert raw[:5] == MAGIC and raw[5:8] == b"\0\0\0"
    (mlen,) = struct.unpack("<Q", raw[8:16])
    man = json.loads(raw[HEADER:HEADER + mlen])
    start = (HEADER + mlen + ALIGN - 1) // ALIGN * ALIGN
    assert set(man) >= {"arch_id", "mode", "plan", "epoch", "tensors"}
    prev = 0
    for t in man["tensors"]:
        assert t["dtype"] == "f32" and t["offset"] % ALIGN == 0 and t["offset"] >= prev
        assert t["byte_len"] == 4 * int(np.prod(t["shape"]))
        prev = t["offset"] + t["byte_len"]
        a = start + t["offset"]
        arr = np.frombuffer(raw[a:a + t["byte_len"]], dtype="<f4")
        assert arr.size == np.prod(t["shape"])
    assert start + prev <= len(raw)


def test_bad_magic():
    raw = bytearray(encode(build_model("toy_mlp")))
    raw[0] ^= 0xFF
    with pytest.raises(BadMagicError, match="bad magic"):
        decode(bytes(raw))


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncation(cut):
    raw = encode(build_model("toy_mlp"))
    with pytest.raises(TruncatedCheckpointError):
        read_manifest(raw[:cut])


def test_manifest_mismatch():
    raw = encode(build_model("toy_mlp"))
    (mlen,) = struct.unpack("<Q", raw[8:16])
    man = json.loads(raw[HEADER:HEADER + mlen])
    man["tensors"][0]["shape"] = [3, 3]
    body = json.dumps(man, sort_keys=True, separators=(",", ":")).encode()
    bad = raw[:8] + struct.pack("<Q", len(body)) + body
    bad += bytes((-len(bad)) % ALIGN) + raw[(HEADER + mlen + ALIGN - 1) // ALIGN * ALIGN:]
    with pytest.raises(ManifestError):
        decode(bad)


def test_manifest_not_json():
    raw = bytearray(encode(build_model("toy_mlp")))
    raw[HEADER] = ord("#")
    with pytest.raises(ManifestError):
        read_manifest(bytes(raw))


def test_factorized_manifest_names(tmp_path):
    v = build_model("toy_cnn", seed=2)
    save_checkpoint(v, tmp_path / "v.puff")
    h = factorize_model(load_checkpoint(tmp_path / "v.puff"), default_plan("toy_cnn"))
    save_checkpoint(h, tmp_path / "h.puff")
    man, _ = read_manifest((tmp_path / "h.puff").read_bytes())
    names = [t["name"] for t in man["tensors"]]
    assert man["mode"] == "hybrid"
    assert "conv2.weight_u" in names and "conv2.weight_v" in names and "conv2.weight" not in names
    assert "conv1.weight" in names
