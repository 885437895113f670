"""STCK1 checkpoint container: JSON tensor manifest + raw little-endian payload.

Layout: magic "STCK1", u32 manifest byte length, UTF-8 JSON manifest
{"tensors": [{"name", "shape", "dtype", "offset"}...], "meta": {...}},
then the concatenated float32 tensor payload.
"""

import json
import struct

import numpy as np

MAGIC = b"STCK1"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f4", "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("bad magic")
    if len(blob) < len(MAGIC) + 4:
        raise ValueError("truncated checkpoint")
    (mlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + mlen:
        raise ValueError("truncated checkpoint")
    manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
    payload = blob[start + mlen :]
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, manifest.get("meta", {})
