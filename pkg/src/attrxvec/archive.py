"""Versioned on-disk formats.

* Generic container: magic, format version, JSON header, raw little-endian
  arrays.  The header records the SHA-256 of the payload; readers verify it.
* Matrix archives (features, embeddings): ``<name>.ark`` with records
  ``(utt_id, shape, float32 row-major data)`` plus a text ``<name>.idx``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CONTAINER_MAGIC = b"AXVC"
CONTAINER_VERSION = 1
ARK_MAGIC = b"AXMA"
ARK_VERSION = 1


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _le(arr):
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def write_container(path, kind: str, meta: dict, arrays: dict) -> str:
    """Write ``arrays`` (name -> ndarray) with JSON-serializable ``meta``; returns the file hash."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = _le(np.asarray(arr)).tobytes()
        entries.append({"name": name, "dtype": np.asarray(arr).dtype.str.lstrip("<>|="),
                        "shape": list(np.asarray(arr).shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries,
                         "payload_sha256": sha256_bytes(payload)},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = CONTAINER_MAGIC + struct.pack("<HQ", CONTAINER_VERSION, len(header)) + header + payload
    Path(path).write_bytes(blob)
    return sha256_bytes(blob)


def read_container(path, kind: str | None = None):
    blob = Path(path).read_bytes()
    if blob[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not an attrxvec container")
    version, hlen = struct.unpack("<HQ", blob[4:14])
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    header = json.loads(blob[14:14 + hlen].decode("utf-8"))
    payload = blob[14 + hlen:]
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise FormatError(f"{path}: payload hash mismatch")
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {header['kind']!r}")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(
            e["shape"]).astype(np.dtype(e["dtype"]))
    return header["meta"], arrays


def write_matrix_archive(base, items: dict, ndim=2) -> str:
    """Write ``base.ark`` and ``base.idx``; values are stored as float32.

    ``ndim`` is 2 for (T, D) feature matrices and 1 for embedding vectors.
    Returns the SHA-256 of the ark file.
    """
    base = Path(base)
    parts = [ARK_MAGIC, struct.pack("<HB", ARK_VERSION, ndim)]
    offset = sum(len(p) for p in parts)
    index = []
    for utt, mat in items.items():
        mat = np.asarray(mat, dtype="<f4")
        if mat.ndim != ndim:
            raise FormatError(f"{utt}: expected {ndim}-d data, got shape {mat.shape}")
        key = utt.encode("utf-8")
        rec = struct.pack("<I", len(key)) + key + struct.pack("<" + "I" * ndim, *mat.shape)
        rec += np.ascontiguousarray(mat).tobytes()
        index.append(f"{utt} {offset} {' '.join(str(s) for s in mat.shape)}")
        parts.append(rec)
        offset += len(rec)
    blob = b"".join(parts)
    digest = sha256_bytes(blob)
    base.with_suffix(".ark").write_bytes(blob)
    header = f"#attrxvec-ark v{ARK_VERSION} ndim={ndim} sha256={digest}"
    base.with_suffix(".idx").write_text("\n".join([header] + index) + "\n", encoding="utf-8")
    return digest


def read_matrix_archive(base, verify=True) -> dict:
    base = Path(base)
    blob = base.with_suffix(".ark").read_bytes()
    if blob[:4] != ARK_MAGIC:
        raise FormatError(f"{base}.ark: bad magic")
    version, ndim = struct.unpack("<HB", blob[4:7])
    if version != ARK_VERSION:
        raise FormatError(f"{base}.ark: archive version {version}, expected {ARK_VERSION}")
    idx_path = base.with_suffix(".idx")
    if verify and idx_path.exists():
        header = idx_path.read_text(encoding="utf-8").splitlines()[0].split()
        if header[1] != f"v{ARK_VERSION}":
            raise FormatError(f"{idx_path}: index version mismatch")
        if header[3] != f"sha256={sha256_bytes(blob)}":
            raise FormatError(f"{idx_path}: archive content hash mismatch")
    items, pos = {}, 7
    while pos < len(blob):
        (klen,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        utt = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        shape = struct.unpack("<" + "I" * ndim, blob[pos:pos + 4 * ndim])
        pos += 4 * ndim
        count = int(np.prod(shape))
        items[utt] = np.frombuffer(blob[pos:pos + 4 * count], dtype="<f4").reshape(shape).astype(
            np.float32)
        pos += 4 * count
    return items


def write_features(out_dir, feats: dict) -> str:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return write_matrix_archive(Path(out_dir) / "feats", feats, ndim=2)


def read_features(path) -> dict:
    path = Path(path)
    base = path / "feats" if path.is_dir() else path.with_suffix("")
    return read_matrix_archive(base)


def write_embeddings(path, embeddings: dict) -> str:
    return write_matrix_archive(Path(path).with_suffix(""), embeddings, ndim=1)


def read_embeddings(path) -> dict:
    return read_matrix_archive(Path(path).with_suffix(""))
