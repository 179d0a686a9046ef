"""The ``BVOD`` binary container shared by datasets, models and detector specs.

Layout (all integers little-endian)::

    magic    4 bytes  b"BVOD"
    version  u32      1
    count    u32      number of sections
    section  u32 name length, name (utf-8), u64 payload length, payload

Tensor payloads are ``u32 rank``, ``rank`` x ``u32 dim``, then the values as
IEEE-754 float64 in row-major order.  Everything is parsed and validated
before any object is built, so a bad file never yields a half-loaded result.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from .factorgen import Dataset
from .selection import DetectorSpec
from .vae import VaeConfig, VaeModel, layer_sizes

MAGIC = b"BVOD"
VERSION = 1

KIND_MODEL = "model"
KIND_DATASET = "dataset"
KIND_SPEC = "detector-spec"

PathLike = Union[str, os.PathLike]


class ContainerError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    head = struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + np.ascontiguousarray(a).astype("<f8", copy=False).tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise ContainerError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", payload, 0)
    head = 4 + 4 * rank
    if len(payload) < head:
        raise ContainerError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", payload, 4)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(payload) != head + 8 * count:
        raise ContainerError(f"tensor payload is {len(payload) - head} bytes, expected {8 * count}")
    return np.frombuffer(payload, dtype="<f8", offset=head).astype(np.float64).reshape(dims)


def pack(sections: list[tuple[str, bytes]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, payload in sections:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def unpack(data: bytes) -> dict[str, bytes]:
    if len(data) < 12:
        raise ContainerError("file too short for a container header")
    if data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    out: dict[str, bytes] = {}
    for _ in range(count):
        if pos + 4 > len(data):
            raise ContainerError("truncated section header")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n + 8 > len(data):
            raise ContainerError("truncated section name")
        try:
            name = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("section name is not utf-8") from exc
        pos += n
        (size,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + size > len(data):
            raise ContainerError(f"section {name!r} truncated")
        if name in out:
            raise ContainerError(f"duplicate section {name!r}")
        out[name] = data[pos:pos + size]
        pos += size
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after last section")
    return out


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _unjson(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed metadata: {exc}") from exc


def _model_sections(model: VaeModel, prefix: str = "") -> list[tuple[str, bytes]]:
    out = [(prefix + "config", _json(model.config.to_dict()))]
    for name in sorted(model.params):
        out.append((f"{prefix}param/{name}", encode_tensor(model.params[name])))
    return out


def _model_from(sections: dict[str, bytes], prefix: str = "") -> VaeModel:
    if prefix + "config" not in sections:
        raise ContainerError("model config section missing")
    cfg = _unjson(sections[prefix + "config"])
    try:
        config = VaeConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise ContainerError(f"bad model config: {exc}") from exc
    tag = prefix + "param/"
    params = {k[len(tag):]: decode_tensor(v) for k, v in sections.items() if k.startswith(tag)}
    enc, dec = layer_sizes(config)
    expected = {}
    for name, fan_in, fan_out in enc + dec:
        expected[f"{name}.W"] = (fan_in, fan_out)
        expected[f"{name}.b"] = (fan_out,)
    if set(params) != set(expected):
        raise ContainerError("model parameters do not match its config")
    for k, v in params.items():
        if v.shape != expected[k]:
            raise ContainerError(f"parameter {k} has shape {v.shape}, expected {expected[k]}")
    return VaeModel(config, {k: params[k] for k in expected})


def to_bytes(obj) -> bytes:
    if isinstance(obj, VaeModel):
        sections = [("kind", KIND_MODEL.encode())] + _model_sections(obj)
    elif isinstance(obj, Dataset):
        sections = [
            ("kind", KIND_DATASET.encode()),
            ("name", obj.name.encode("utf-8")),
            ("labels", _json(obj.labels)),
            ("scene_ids", _json([int(i) for i in obj.scene_ids])),
            ("pixels", encode_tensor(obj.pixels)),
        ]
    elif isinstance(obj, DetectorSpec):
        meta = {"factor": obj.factor, "latent": obj.latent, "percentile": obj.percentile,
                "beta": obj.beta, "n_latent": obj.n_latent}
        sections = [("kind", KIND_SPEC.encode()), ("spec", _json(meta)),
                    ("tau", encode_tensor(np.float64(obj.tau)))]
        sections += _model_sections(obj.model, "model/")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    return pack(sections)


def from_bytes(data: bytes):
    sections = unpack(data)
    kind = sections.get("kind", b"").decode("utf-8", "replace")
    try:
        if kind == KIND_MODEL:
            return _model_from(sections)
        if kind == KIND_DATASET:
            pixels = decode_tensor(sections["pixels"])
            labels = _unjson(sections["labels"])
            ids = _unjson(sections["scene_ids"])
            return Dataset(pixels, labels, np.array(ids, dtype=np.int64),
                           sections["name"].decode("utf-8"))
        if kind == KIND_SPEC:
            meta = _unjson(sections["spec"])
            tau = float(decode_tensor(sections["tau"]))
            model = _model_from(sections, "model/")
            return DetectorSpec(meta["factor"], model, int(meta["latent"]), tau,
                                int(meta["percentile"]), float(meta["beta"]), int(meta["n_latent"]))
    except KeyError as exc:
        raise ContainerError(f"missing section or field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ContainerError):
            raise
        raise ContainerError(f"invalid {kind} container: {exc}") from exc
    raise ContainerError(f"unknown container kind {kind!r}")


def save(obj, path: PathLike) -> Path:
    """Write atomically: the target is replaced only once the bytes are complete."""
    path = Path(path)
    data = to_bytes(obj)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: PathLike):
    return from_bytes(Path(path).read_bytes())
