"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TSAR"                     magic
    u32                         format version
    u32 + bytes                 length-prefixed UTF-8 JSON config
    u32                         number of arrays
    per array, names sorted:
        u16 + bytes             name
        u8                      dtype code (1 = <f4, 2 = <f8)
        u8 + u32 * ndim         shape
        u64 + bytes             row-major payload
    u64                         checksum (blake2b-64 of everything above)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..model import ClassifierConfig, RegulatorConfig, TsarModel, param_shapes, shape_mismatches

MAGIC = b"TSAR"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


class CheckpointError(ValueError):
    """A checkpoint failed validation; ``field`` names what was wrong."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(arrays: dict[str, np.ndarray], config: dict, dtype: str | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        target = np.dtype(dtype) if dtype else arr.dtype
        arr = np.ascontiguousarray(arr, dtype=target.newbyteorder("<"))
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError("dtype", f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, arr.ndim)]
        parts += [struct.pack("<I", d) for d in arr.shape]
        data = arr.tobytes(order="C")
        parts += [struct.pack("<Q", len(data)), data]
    body = b"".join(parts)
    return body + struct.pack("<Q", _checksum(body))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError("version", "file too short to hold a version")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version} (this build reads {VERSION})")
    if len(blob) < 16:
        raise CheckpointError("checksum", "file truncated before checksum")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checksum", "payload checksum mismatch (file corrupt or truncated)")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    config = json.loads(body[pos : pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (size,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        if code not in _DTYPES:
            raise CheckpointError("dtype", f"unknown dtype code {code} for {name}")
        arrays[name] = np.frombuffer(body[pos : pos + size], dtype=_DTYPES[code]).reshape(shape).copy()
        pos += size
    return arrays, config


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_config(model: TsarModel) -> dict:
    return {
        "variant": model.variant,
        "mode": model.mode,
        "classifier": asdict(model.classifier),
        "regulator": asdict(model.regulator) if model.regulator else None,
        "frozen": sorted(model.frozen),
    }


def save_checkpoint(model: TsarModel, config: dict | None, path, dtype: str | None = None) -> Path:
    """Write parameters plus the run config; ``dtype`` casts the payload (e.g. "<f4")."""
    path = Path(path)
    cfg = {"model": model_config(model), "run": config or {}}
    _atomic_write(path, encode(model.params, cfg, dtype))
    return path


def load_checkpoint(path) -> tuple[TsarModel, dict]:
    arrays, cfg = decode(Path(path).read_bytes())
    m = cfg["model"]
    clf = m["classifier"]
    clf["in_shape"] = tuple(clf["in_shape"])
    reg = RegulatorConfig(**m["regulator"]) if m["regulator"] else None
    model = TsarModel(
        classifier=ClassifierConfig(**clf),
        regulator=reg,
        variant=m["variant"],
        params=arrays,
        frozen=set(m["frozen"]),
        mode=m["mode"],
    )
    bad = shape_mismatches(model, param_shapes(model.classifier, model.regulator, model.variant))
    if bad:
        raise CheckpointError("shape", "; ".join(bad[:5]))
    return model, cfg.get("run", {})
