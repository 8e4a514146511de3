"""Flat binary checkpoint container.

Layout: a fixed header (magic ``CDDV``, u32 version, u32 sub-codebook
count, u32 primitives per sub-codebook, u32 primitive dim, all
little-endian), the codebook entries as little-endian f64 in
sub-codebook-major row-major order, the usage counters as u64, then a
sequence of tagged sections (allocator, encoder, decoder, optimizer,
meta). Each section is ``[12-byte NUL-padded ASCII tag][u64 length]
[payload]`` where the payload is a list of named arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from dynavq.allocator import AllocatorParams
from dynavq.autoencoder import MlpParams
from dynavq.codebook import Codebook
from dynavq.pipeline import Model

MAGIC = b"CDDV"
VERSION = 1
_TAG_LEN = 12

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("<u8")}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("<u8"): 2}


class CheckpointError(ValueError):
    pass


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr)
    key = data.dtype.newbyteorder("<")
    if key not in _DTYPE_CODES:
        if np.issubdtype(data.dtype, np.floating):
            data = data.astype("<f8")
        elif np.issubdtype(data.dtype, np.unsignedinteger):
            data = data.astype("<u8")
        elif np.issubdtype(data.dtype, np.integer):
            data = data.astype("<i8")
        else:
            raise CheckpointError(f"unsupported dtype {data.dtype} for {name}")
        key = data.dtype
    else:
        data = data.astype(key, copy=False)
    raw = data.tobytes()
    name_b = name.encode("ascii")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape) if data.ndim else b""
    head += struct.pack("<B", _DTYPE_CODES[key])
    return head + raw


def _unpack_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(payload):
        (name_len,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos:pos + name_len].decode("ascii")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, pos) if ndim else ()
        pos += 4 * ndim
        (code,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(payload[pos:pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        out[name] = arr.copy()
    return out


def _mlp_arrays(p: MlpParams) -> Dict[str, np.ndarray]:
    return {"w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2}


def _alloc_arrays(p: AllocatorParams) -> Dict[str, np.ndarray]:
    return {"conv1_w": p.conv1_w, "conv1_b": p.conv1_b,
            "conv2_w": p.conv2_w, "conv2_b": p.conv2_b}


@dataclass
class CheckpointData:
    """Everything a checkpoint holds; optimizer state is optional."""

    model: Model
    step: int = 0
    seed: int = 0
    adam_t: int = 0
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, data: CheckpointData) -> None:
    model = data.model
    cb = model.codebook
    blob = MAGIC + struct.pack(
        "<IIII", VERSION, cb.subcodebooks, cb.primitives_per_sub, cb.primitive_dim
    )
    blob += np.ascontiguousarray(cb.entries, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(cb.usage_counts, dtype="<u8").tobytes()

    def section(tag: str, arrays: Dict[str, np.ndarray]) -> bytes:
        payload = b"".join(_pack_array(k, v) for k, v in arrays.items())
        tag_b = tag.encode("ascii")
        if len(tag_b) > _TAG_LEN:
            raise CheckpointError(f"section tag too long: {tag}")
        return tag_b.ljust(_TAG_LEN, b"\x00") + struct.pack("<Q", len(payload)) + payload

    blob += section("allocator", _alloc_arrays(model.allocator))
    blob += section("encoder", _mlp_arrays(model.encoder))
    blob += section("decoder", _mlp_arrays(model.decoder))
    opt_arrays: Dict[str, np.ndarray] = {}
    for name, arr in data.opt_m.items():
        opt_arrays[f"m.{name}"] = arr
    for name, arr in data.opt_v.items():
        opt_arrays[f"v.{name}"] = arr
    blob += section("optimizer", opt_arrays)
    meta = {
        "step": np.array(data.step, dtype="<u8"),
        "seed": np.array(data.seed & 0xFFFFFFFFFFFFFFFF, dtype="<u8"),
        "adam_t": np.array(data.adam_t, dtype="<u8"),
        "patch_size": np.array(model.patch_size, dtype="<u8"),
        "top_k": np.array(model.top_k, dtype="<u8"),
        "pool": np.array(model.pool, dtype="<u8"),
        "temperature": np.array(model.temperature, dtype="<f8"),
        "beta": np.array(model.beta, dtype="<f8"),
        "weighting": np.frombuffer(
            model.weighting.encode("ascii"), dtype=np.uint8
        ).astype("<u8"),
    }
    blob += section("meta", meta)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, subs, prims, dim = struct.unpack_from("<IIII", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 4 + 16
    n_entries = subs * prims * dim
    entries = np.frombuffer(raw, dtype="<f8", count=n_entries, offset=pos)
    entries = entries.reshape(subs, prims, dim).copy()
    pos += n_entries * 8
    usage = np.frombuffer(raw, dtype="<u8", count=subs * prims, offset=pos)
    usage = usage.reshape(subs, prims).astype(np.uint64)
    pos += subs * prims * 8

    sections: Dict[str, Dict[str, np.ndarray]] = {}
    while pos < len(raw):
        tag = raw[pos:pos + _TAG_LEN].rstrip(b"\x00").decode("ascii")
        pos += _TAG_LEN
        (length,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        sections[tag] = _unpack_arrays(raw[pos:pos + length])
        pos += length

    for needed in ("allocator", "encoder", "decoder", "meta"):
        if needed not in sections:
            raise CheckpointError(f"{path}: missing section {needed!r}")
    alloc_s = sections["allocator"]
    enc_s = sections["encoder"]
    dec_s = sections["decoder"]
    meta = sections["meta"]

    def scalar(name):
        return meta[name].reshape(-1)[0]

    seed_u = int(scalar("seed"))
    if seed_u >= 1 << 63:
        seed_u -= 1 << 64
    model = Model(
        codebook=Codebook(entries=entries, usage_counts=usage),
        allocator=AllocatorParams(
            alloc_s["conv1_w"].astype(np.float64),
            alloc_s["conv1_b"].astype(np.float64),
            alloc_s["conv2_w"].astype(np.float64),
            alloc_s["conv2_b"].astype(np.float64),
        ),
        encoder=MlpParams(
            enc_s["w1"].astype(np.float64), enc_s["b1"].astype(np.float64),
            enc_s["w2"].astype(np.float64), enc_s["b2"].astype(np.float64),
        ),
        decoder=MlpParams(
            dec_s["w1"].astype(np.float64), dec_s["b1"].astype(np.float64),
            dec_s["w2"].astype(np.float64), dec_s["b2"].astype(np.float64),
        ),
        patch_size=int(scalar("patch_size")),
        top_k=int(scalar("top_k")),
        pool=int(scalar("pool")),
        temperature=float(scalar("temperature")),
        beta=float(scalar("beta")),
        weighting=bytes(
            meta["weighting"].astype(np.uint8).tobytes()
        ).decode("ascii"),
    )
    opt_m: Dict[str, np.ndarray] = {}
    opt_v: Dict[str, np.ndarray] = {}
    for name, arr in sections.get("optimizer", {}).items():
        if name.startswith("m."):
            opt_m[name[2:]] = arr.astype(np.float64)
        elif name.startswith("v."):
            opt_v[name[2:]] = arr.astype(np.float64)
    return CheckpointData(
        model=model,
        step=int(scalar("step")),
        seed=seed_u,
        adam_t=int(scalar("adam_t")),
        opt_m=opt_m,
        opt_v=opt_v,
    )
