"""Stage-handoff artifacts: proxies JSON, label arrays, texel record blob.

Every file is versioned; readers reject mismatched schema versions so stale
intermediates fail loudly instead of corrupting a run.

Texel blob layout (little-endian), after a 16-byte header
(magic b"PLTX", uint32 version, uint64 count):
    plane_id  int32
    face_id   int32
    bary      3 x float64
    p         3 x float64
    uv        2 x int32   (patch-local pixel coordinates)
    color     3 x float64
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from planelite.partition import PlaneProxy
from planelite.texel_atlas import TexelSet

SCHEMA_VERSION = 1
_TEXEL_MAGIC = b"PLTX"
_TEXEL_DTYPE = np.dtype(
    [
        ("plane_id", "<i4"),
        ("face_id", "<i4"),
        ("bary", "<f8", 3),
        ("p", "<f8", 3),
        ("uv", "<i4", 2),
        ("color", "<f8", 3),
    ]
)


class SchemaMismatch(ValueError):
    pass


def write_proxies(proxies: list[PlaneProxy], path: str | Path) -> None:
    data = {
        "schema_version": SCHEMA_VERSION,
        "proxies": [p.to_dict() for p in proxies],
    }
    Path(path).write_text(json.dumps(data, indent=1))


def read_proxies(path: str | Path) -> list[PlaneProxy]:
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(
            f"{path}: proxies schema {data.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return [PlaneProxy.from_dict(d) for d in data["proxies"]]


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    np.save(path, np.asarray(labels, dtype=np.int64))


def read_labels(path: str | Path) -> np.ndarray:
    return np.load(path).astype(np.int64)


def write_texels(texels: TexelSet, path: str | Path) -> None:
    rec = np.zeros(len(texels), dtype=_TEXEL_DTYPE)
    rec["plane_id"] = texels.plane_id
    rec["face_id"] = texels.face_id
    rec["bary"] = texels.bary
    rec["p"] = texels.p
    rec["uv"] = texels.pix
    rec["color"] = texels.color
    with open(path, "wb") as fh:
        fh.write(_TEXEL_MAGIC)
        fh.write(struct.pack("<IQ", SCHEMA_VERSION, len(texels)))
        fh.write(rec.tobytes())


def read_texels(path: str | Path) -> TexelSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TEXEL_MAGIC:
            raise SchemaMismatch(f"{path}: not a texel blob")
        version, count = struct.unpack("<IQ", fh.read(12))
        if version != SCHEMA_VERSION:
            raise SchemaMismatch(f"{path}: texel schema {version} != {SCHEMA_VERSION}")
        rec = np.frombuffer(fh.read(), dtype=_TEXEL_DTYPE, count=count)
    return TexelSet(
        p=rec["p"].astype(np.float64),
        face_id=rec["face_id"].astype(np.int64),
        bary=rec["bary"].astype(np.float64),
        plane_id=rec["plane_id"].astype(np.int64),
        pix=rec["uv"].astype(np.int64),
        color=rec["color"].astype(np.float64),
        flags=np.zeros(count, dtype=np.uint8),
    )


def write_meta(path: str | Path, stage: str, **fields) -> None:
    meta = {"schema_version": SCHEMA_VERSION, "stage": stage}
    meta.update(fields)
    Path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_meta(path: str | Path) -> dict:
    meta = json.loads(Path(path).read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(
            f"{path}: bundle schema {meta.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return meta
