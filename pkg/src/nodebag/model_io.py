"""Binary model container.

Layout (all integers little-endian)::

    magic      8 bytes   b"NBAGMODL"
    version    uint32    FORMAT_VERSION
    header     uint64 length + UTF-8 JSON (sorted keys, no whitespace):
                 {"arch": {...},
                  "layers": [{"kind": str, "config": {...},
                              "params": [{"name": str, "shape": [int, ...]}, ...]}, ...]}
    payload    uint64 length + float32 tensors in header order, row-major
    checksum   32 bytes  SHA-256 of every preceding byte

Parameters are always stored as 32-bit floats; loading casts to the current
precision, so a 64-bit runtime widens them losslessly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .bagging import GroupSpec
from .layers import LAYER_KINDS, ConvGrouped, DenseGrouped, Model

MAGIC = b"NBAGMODL"
FORMAT_VERSION = 1
_DIGEST = 32


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class UnsupportedVersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


def encode_model(model: Model) -> bytes:
    layers, chunks = [], []
    for layer in model.layers:
        if layer.kind not in LAYER_KINDS:
            raise ModelFileError(f"cannot serialize layer kind {layer.kind!r}")
        entry = {"kind": layer.kind, "config": layer.config(), "params": []}
        for name, p in layer.params.items():
            entry["params"].append({"name": name, "shape": list(p.shape)})
            chunks.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        layers.append(entry)
    header = json.dumps({"arch": model.arch, "layers": layers}, sort_keys=True,
                        separators=(",", ":")).encode()
    payload = b"".join(chunks)
    body = (MAGIC + struct.pack("<I", FORMAT_VERSION)
            + struct.pack("<Q", len(header)) + header
            + struct.pack("<Q", len(payload)) + payload)
    return body + hashlib.sha256(body).digest()


def save_model(model: Model, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode_model(model)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _build_layer(kind, config, params):
    cls = LAYER_KINDS[kind]
    config = dict(config)
    if "spec" in config:
        spec = GroupSpec(**config.pop("spec"))
        if cls is DenseGrouped:
            return cls(spec, params["weights"], params["biases"], **config)
        return ConvGrouped(spec, params["weights"], params["biases"], **config)
    if "weights" in params:
        return cls(params["weights"], params["biases"], **config)
    return cls(**config)


def decode_model(data: bytes) -> Model:
    if len(data) < len(MAGIC) and MAGIC.startswith(data):
        raise ChecksumError("file truncated inside the magic")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a model file (magic {data[:len(MAGIC)]!r}, expected {MAGIC!r})")
    if len(data) < len(MAGIC) + 4:
        raise ChecksumError("file truncated inside the version field")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"model file version {version} is not supported "
                                      f"(this build reads version {FORMAT_VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if len(data) < len(MAGIC) + 4 + _DIGEST or hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is truncated or corrupted")

    pos = len(MAGIC) + 4
    (hlen,) = struct.unpack_from("<Q", body, pos)
    header = json.loads(body[pos + 8:pos + 8 + hlen])
    pos += 8 + hlen
    (plen,) = struct.unpack_from("<Q", body, pos)
    payload = body[pos + 8:pos + 8 + plen]
    if pos + 8 + plen != len(body):
        raise ModelFileError("section lengths do not add up to the file size")

    offset, layers = 0, []
    for entry in header["layers"]:
        params = {}
        for p in entry["params"]:
            count = int(np.prod(p["shape"], dtype=np.int64))
            if offset + 4 * count > len(payload):
                raise ModelFileError(f"payload too short for {entry['kind']}.{p['name']}")
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            params[p["name"]] = arr.reshape(p["shape"]).astype(T.get_dtype())
            offset += 4 * count
        layers.append(_build_layer(entry["kind"], entry["config"], params))
    if offset != len(payload):
        raise ModelFileError("payload longer than the declared tensors")
    return Model(layers, header["arch"])


def load_model(path) -> Model:
    return decode_model(Path(path).read_bytes())
