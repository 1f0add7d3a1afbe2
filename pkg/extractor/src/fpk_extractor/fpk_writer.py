"""Standalone FPK1 writer.

The byte layout is the only contract shared with the consumer library:

    bytes 0..3    ASCII magic "FPK1"
    bytes 4..7    version u32 little-endian = 1
    bytes 8..15   manifest length u64 little-endian
    16..16+L      UTF-8 JSON manifest
    remainder     contiguous raw blobs at absolute offsets

Float blobs are little-endian float32; labels and splits are
little-endian u32 (0 = train, 1 = test). Feature maps are stored as
(H*W, C) matrices, row-major over locations; each class's support
tensor is (N, H*W, C).
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"FPK1"
VERSION = 1
SPLIT_TRAIN = 0
SPLIT_TEST = 1


@dataclass
class PackPayload:
    """Everything that goes into one feature-pack file."""

    class_names: list
    prompt_template: str
    tau: float
    dims: tuple  # (H, W, C, C_t)
    normalize_locations: bool
    text_features: np.ndarray          # (D, C_t)
    support: list                      # per class: (N_c, H*W, C) arrays
    query_maps: np.ndarray             # (Q, H*W, C)
    query_globals: np.ndarray          # (Q, C_t)
    labels: np.ndarray                 # (Q,)
    splits: np.ndarray                 # (Q,) 0 train / 1 test


def _blobs(payload: PackPayload):
    h, w, c, c_t = payload.dims
    yield ("text_features", "text", None,
           np.ascontiguousarray(payload.text_features, dtype="<f4"))
    for ci, arr in enumerate(payload.support):
        yield (f"support_{ci:04d}", "support", ci,
               np.ascontiguousarray(arr, dtype="<f4"))
    yield ("query_maps", "query_map", None,
           np.ascontiguousarray(payload.query_maps, dtype="<f4").reshape(-1, h * w, c))
    yield ("query_globals", "query_global", None,
           np.ascontiguousarray(payload.query_globals, dtype="<f4").reshape(-1, c_t))
    yield ("labels", "labels", None,
           np.ascontiguousarray(payload.labels, dtype="<u4"))
    yield ("splits", "splits", None,
           np.ascontiguousarray(payload.splits, dtype="<u4"))


def pack_bytes(payload: PackPayload) -> bytes:
    entries = list(_blobs(payload))
    raw = [arr.tobytes(order="C") for *_, arr in entries]
    h, w, c, c_t = payload.dims

    def manifest_for(offsets) -> bytes:
        blobs = []
        for (name, kind, cid, arr), data, off in zip(entries, raw, offsets):
            entry = {"name": name, "kind": kind}
            if cid is not None:
                entry["class_id"] = cid
            entry["shape"] = list(arr.shape)
            entry["offset"] = off
            entry["byte_len"] = len(data)
            blobs.append(entry)
        manifest = {
            "class_names": list(payload.class_names),
            "prompt_template": payload.prompt_template,
            "tau": payload.tau,
            "dims": {"H": h, "W": w, "C": c, "C_t": c_t},
            "normalize_locations": payload.normalize_locations,
            "blobs": blobs,
        }
        return json.dumps(manifest, separators=(",", ":")).encode("utf-8")

    offsets = [0] * len(entries)
    for _ in range(8):
        manifest = manifest_for(offsets)
        pos = 16 + len(manifest)
        fresh = []
        for data in raw:
            fresh.append(pos)
            pos += len(data)
        if fresh == offsets:
            break
        offsets = fresh
    manifest = manifest_for(offsets)

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<Q", len(manifest)))
    out.write(manifest)
    for data in raw:
        out.write(data)
    return out.getvalue()


def write_pack(payload: PackPayload, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = pack_bytes(payload)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".fpk.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
