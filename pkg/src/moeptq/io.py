"""Binary containers for models and calibration token streams.

Model container layout::

    b"MOEPTQ01"                8-byte magic
    uint64 LE                  header length in bytes
    UTF-8 JSON header          config, eps, gate_mode, tensor table, extra records
    payload                    tensors back to back in header order, little-endian

Each tensor-table entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the payload start. Full-precision model files use ``f32``
only; quantized files add ``i8`` code tensors and ``f64`` for unquantized tensors.

Token file layout: ``b"MOETOK01"``, uint32 LE sequence length, then uint32 LE
token ids. The id count must be a multiple of the sequence length.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import Expert, MoEConfig, MoELayer, MoEModel

MAGIC = b"MOEPTQ01"
TOKEN_MAGIC = b"MOETOK01"
FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i8": np.dtype("i1")}


class FormatError(ValueError):
    """A model or token file is malformed or corrupted."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(header: dict, tensors: list[tuple[str, np.ndarray, str]]) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr, dtype in tensors:
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, format_version=FORMAT_VERSION, tensors=table)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode_container(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a MOEPTQ01 model file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise FormatError(f"{source}: header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: malformed JSON header ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise FormatError(f"{source}: header has no tensor table")
    payload = memoryview(data)[16 + hlen :]
    out: dict[str, np.ndarray] = {}
    expected = 0
    for entry in header["tensors"]:
        try:
            name, dtype = entry["name"], DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{source}: bad tensor entry {entry!r} ({exc})") from None
        if offset != expected:
            raise FormatError(f"{source}: tensor {name!r} offset {offset}, expected {expected}")
        if int(np.prod(shape)) * dtype.itemsize != nbytes:
            raise FormatError(f"{source}: tensor {name!r} shape {list(shape)} does not match "
                              f"{nbytes} payload bytes")
        if offset + nbytes > len(payload):
            raise FormatError(f"{source}: payload truncated in tensor {name!r} "
                              f"(need {offset + nbytes} bytes, have {len(payload)})")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
        out[name] = arr.astype(np.float64) if dtype.kind == "f" else arr.astype(np.int8)
        expected = offset + nbytes
    if expected != len(payload):
        raise FormatError(f"{source}: {len(payload) - expected} trailing payload bytes")
    return header, out


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes(), str(path))


def model_tensors(model: MoEModel, dtype: str = "f32") -> list[tuple[str, np.ndarray, str]]:
    items = [("embed", model.embed, dtype), ("final_gain", model.final_gain, dtype)]
    for l, layer in enumerate(model.layers):
        items += [(f"layers.{l}.norm_gain", layer.norm_gain, dtype),
                  (f"layers.{l}.router", layer.router, dtype),
                  (f"layers.{l}.router_bias", layer.router_bias, dtype)]
        for i, e in enumerate(layer.experts):
            items += [(f"layers.{l}.experts.{i}.w1", e.w1, dtype),
                      (f"layers.{l}.experts.{i}.w2", e.w2, dtype)]
    return items


def model_header(model: MoEModel, kind: str = "fp") -> dict:
    cfg = model.config
    return {"kind": kind, "config": cfg.to_dict(), "eps": cfg.eps, "gate_mode": cfg.gate_mode}


def save_model(model: MoEModel, path) -> None:
    atomic_write(path, encode_container(model_header(model), model_tensors(model)))


def model_from_tensors(header: dict, tensors: dict[str, np.ndarray], source: str) -> MoEModel:
    try:
        cfg = MoEConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: bad config record ({exc})") from None

    def get(name, shape):
        if name not in tensors:
            raise FormatError(f"{source}: missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise FormatError(f"{source}: tensor {name!r} has shape {arr.shape}, config implies {shape}")
        return np.ascontiguousarray(arr, dtype=np.float64)

    d, n, h = cfg.d, cfg.n, cfg.hidden
    layers = []
    for l in range(cfg.layers):
        experts = [Expert(get(f"layers.{l}.experts.{i}.w1", (d, h)), get(f"layers.{l}.experts.{i}.w2", (h, d)))
                   for i in range(n)]
        layers.append(MoELayer(get(f"layers.{l}.norm_gain", (d,)), get(f"layers.{l}.router", (d, n)),
                               experts, get(f"layers.{l}.router_bias", (n,))))
    return MoEModel(cfg, get("embed", (cfg.vocab, d)), layers, get("final_gain", (d,)))


def load_model(path) -> MoEModel:
    header, tensors = read_container(path)
    if header.get("kind", "fp") != "fp":
        raise FormatError(f"{path}: expected a full-precision model, found kind={header.get('kind')!r}")
    return model_from_tensors(header, tensors, str(path))


def write_tokens(path, sequences) -> None:
    seqs = np.asarray(sequences)
    if seqs.ndim != 2 or seqs.shape[1] == 0:
        raise ValueError("token sequences must form a non-empty (num_seqs, seq_len) array")
    if seqs.size and (seqs.min() < 0 or seqs.max() >= 2**32):
        raise ValueError("token ids must fit in uint32")
    data = TOKEN_MAGIC + struct.pack("<I", seqs.shape[1]) + seqs.astype("<u4").tobytes()
    atomic_write(path, data)


def read_tokens(path) -> np.ndarray:
    """Load a token file as an int64 array of shape (num_seqs, seq_len)."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:8] != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic, not a MOETOK01 token file")
    (seq_len,) = struct.unpack("<I", data[8:12])
    body = data[12:]
    if seq_len == 0 or len(body) % (4 * seq_len):
        raise FormatError(f"{path}: {len(body)} payload bytes is not a whole number of "
                          f"length-{seq_len} sequences")
    return np.frombuffer(body, dtype="<u4").astype(np.int64).reshape(-1, seq_len)
