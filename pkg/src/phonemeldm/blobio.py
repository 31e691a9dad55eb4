"""Little-endian float32 blobs with JSON manifests.

A blob set ``<stem>`` is two files: ``<stem>.f32`` (raw arrays back to back) and
``<stem>.json`` holding, per array, its name, shape and byte offset, plus the
blob's SHA-256 and free-form metadata.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "f32-blob-v1"
LE_F32 = np.dtype("<f4")


class BlobFormatError(ValueError):
    pass


class ManifestError(BlobFormatError):
    pass


class ChecksumError(BlobFormatError):
    pass


class BlobShapeError(BlobFormatError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def to_le_f32(arr) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr), dtype=LE_F32)


def read_checked(path: Path, expected_sha: str) -> bytes:
    raw = Path(path).read_bytes()
    if sha256_hex(raw) != expected_sha:
        raise ChecksumError(f"checksum mismatch for {path}")
    return raw


def write_blob_set(stem, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = to_le_f32(arr)
        chunks.append(a.tobytes())
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    blob = b"".join(chunks)
    blob_path = stem.with_suffix(".f32")
    blob_path.write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "blob": blob_path.name,
        "nbytes": len(blob),
        "sha256": sha256_hex(blob),
        "arrays": entries,
        "meta": meta or {},
    }
    man_path = stem.with_suffix(".json")
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return man_path


def read_blob_set(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    try:
        manifest = json.loads(stem.with_suffix(".json").read_text())
        blob_name = manifest["blob"]
        entries = manifest["arrays"]
        sha = manifest["sha256"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"bad manifest for {stem}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ManifestError(f"unknown format {manifest.get('format')!r}")
    raw = read_checked(stem.parent / blob_name, sha)
    arrays, cursor = {}, 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if int(e["offset"]) != cursor or cursor + n > len(raw):
            raise BlobShapeError(f"array {e['name']!r}: shape {shape} at offset {e['offset']} "
                                 f"does not fit the blob layout")
        arrays[e["name"]] = np.frombuffer(raw, dtype=LE_F32, count=n // 4, offset=cursor) \
            .reshape(shape).astype(np.float32)
        cursor += n
    if cursor != len(raw):
        raise BlobShapeError(f"manifest covers {cursor} bytes, blob has {len(raw)}")
    return arrays, manifest.get("meta", {})
