"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset 0   5 bytes   magic b"PUFF1"
    offset 5   3 bytes   zero
    offset 8   uint64    manifest length L in bytes
    offset 16  L bytes   manifest, UTF-8 JSON (sorted keys, no whitespace)
    ...        zero padding up to the next multiple of 64
    payload    tensors as raw IEEE-754 float32, each starting on a 64-byte
               boundary relative to the payload start, zero padded between

Manifest keys: ``format`` (1), ``arch_id``, ``mode``, ``plan`` (plan JSON or
null), ``epoch``, ``seed``, ``options`` (builder options), ``payload_bytes``
and ``tensors``: a list of ``{name, shape, dtype: "f32", offset, byte_len}``
in model order (parameters, then buffers such as BN running statistics).
"""
import json
import struct

import numpy as np

from prefact.errors import BadMagicError, ManifestError, ShapeError, TruncatedCheckpointError

MAGIC = b"PUFF1"
ALIGN = 64
HEADER = 16


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(model, epoch=0):
    tensors, blobs, offset = [], [], 0
    for name, arr in model.state_dict().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offset = _align(offset)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "byte_len": len(data)})
        blobs.append((offset, data))
        offset += len(data)
    manifest = {
        "format": 1, "arch_id": model.arch_id, "mode": model.mode,
        "plan": model.plan.to_json() if model.plan is not None else None,
        "epoch": int(epoch), "seed": model.seed, "options": model.options,
        "payload_bytes": offset, "tensors": tensors,
    }
    man = _canonical(manifest)
    start = _align(HEADER + len(man))
    buf = bytearray(start + offset)
    buf[0:5] = MAGIC
    buf[8:16] = struct.pack("<Q", len(man))
    buf[HEADER:HEADER + len(man)] = man
    for off, data in blobs:
        buf[start + off:start + off + len(data)] = data
    return bytes(buf)


def save_checkpoint(model, path, epoch=0):
    data = encode(model, epoch)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_manifest(raw):
    """Validate the header and return ``(manifest, payload start)``."""
    if len(raw) < HEADER:
        if raw[:5] != MAGIC[:len(raw[:5])]:
            raise BadMagicError("bad magic")
        raise TruncatedCheckpointError(f"truncated header ({len(raw)} bytes)")
    if raw[:5] != MAGIC or raw[5:8] != b"\0\0\0":
        raise BadMagicError("bad magic")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if HEADER + mlen > len(raw):
        raise TruncatedCheckpointError(f"manifest claims {mlen} bytes, file has {len(raw) - HEADER}")
    try:
        manifest = json.loads(raw[HEADER:HEADER + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    for key in ("arch_id", "mode", "tensors", "payload_bytes"):
        if key not in manifest:
            raise ManifestError(f"manifest missing {key!r}")
    start = _align(HEADER + mlen)
    prev_end = 0
    for t in manifest["tensors"]:
        try:
            off, n, shape = int(t["offset"]), int(t["byte_len"]), [int(s) for s in t["shape"]]
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"malformed tensor entry {t!r}") from None
        if t.get("dtype") != "f32":
            raise ManifestError(f"{t['name']}: unsupported dtype {t.get('dtype')!r}")
        if off % ALIGN or off < prev_end:
            raise ManifestError(f"{t['name']}: offset {off} misaligned or overlapping")
        if n != 4 * int(np.prod(shape)):
            raise ManifestError(f"{t['name']}: byte_len {n} does not match shape {shape}")
        prev_end = off + n
    if prev_end > manifest["payload_bytes"]:
        raise ManifestError("tensor data runs past the declared payload size")
    if start + manifest["payload_bytes"] > len(raw):
        raise TruncatedCheckpointError(
            f"payload needs {start + manifest['payload_bytes']} bytes, file has {len(raw)}")
    return manifest, start


def decode(raw):
    from prefact.factorize import FactorizationPlan
    from prefact.zoo import build_model

    manifest, start = read_manifest(raw)
    plan = FactorizationPlan.from_json(manifest["plan"]) if manifest.get("plan") else None
    try:
        model = build_model(manifest["arch_id"], manifest["mode"],
                            plan=plan if manifest["mode"] == "hybrid" else None,
                            seed=manifest.get("seed", 0), **manifest.get("options", {}))
    except Exception as exc:
        raise ManifestError(f"cannot rebuild model from manifest: {exc}") from None
    state = {}
    for t in manifest["tensors"]:
        a = start + t["offset"]
        arr = np.frombuffer(raw[a:a + t["byte_len"]], dtype="<f4").reshape(t["shape"])
        state[t["name"]] = arr.astype(np.float64)
    try:
        model.load_state_dict(state)
    except ShapeError as exc:
        raise ManifestError(f"manifest does not match {manifest['arch_id']}: {exc}") from None
    model.epoch = manifest.get("epoch", 0)
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode(raw)
