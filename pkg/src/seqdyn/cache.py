"""Binary container format, content hashing, and the matrix disk cache.

Container layout: one UTF-8 JSON header line (descriptor, dtypes, shapes,
endianness, version) terminated by a newline, followed by the raw array
payloads in declared order, always little-endian.  Reloads are bit-exact;
a stored checksum over the payload bytes guards against corruption, and a
corrupt entry is treated as a miss (the caller recomputes and rewrites).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

CONTAINER_VERSION = 1


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checksum_hex(*payloads: bytes) -> str:
    """64-bit content hash (blake2b) of the concatenated payloads, as hex."""
    h = hashlib.blake2b(digest_size=8)
    for p in payloads:
        h.update(p)
    return h.hexdigest()


def file_checksum(path) -> str:
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_DTYPES = {"<f8": "<f8", "<i8": "<i8"}


def _le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr, dtype="<f8")
    if arr.dtype in (np.int64, np.int32):
        return np.ascontiguousarray(arr, dtype="<i8")
    raise ValueError(f"unsupported container dtype {arr.dtype}")


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write header line + little-endian payloads atomically; returns the checksum."""
    path = Path(path)
    items = []
    payloads = []
    for name, arr in arrays.items():
        le = _le(np.asarray(arr))
        items.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape)})
        payloads.append(le.tobytes())
    csum = checksum_hex(*payloads)
    header = dict(meta)
    header.update({
        "version": CONTAINER_VERSION,
        "endianness": "little",
        "arrays": items,
        "payload_checksum": csum,
    })
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(canonical_json(header).encode("utf-8") + b"\n")
            for p in payloads:
                fh.write(p)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return csum


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; raises ValueError on corruption."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("version") != CONTAINER_VERSION:
            raise ValueError("unknown container version")
        arrays = {}
        payloads = []
        for item in header["arrays"]:
            dtype = np.dtype(_DTYPES[item["dtype"]])
            count = int(np.prod(item["shape"])) if item["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError("truncated container payload")
            payloads.append(buf)
            arrays[item["name"]] = np.frombuffer(buf, dtype=dtype).reshape(item["shape"])
    if checksum_hex(*payloads) != header.get("payload_checksum"):
        raise ValueError("container payload checksum mismatch")
    return header, arrays


class MatrixCache:
    """Disk cache of Ulam matrices keyed by (map descriptor, N).

    File name is the hash of the key; the payload is the CSR triplet.  Reads
    bump the file mtime so eviction can be least-recently-used.  Corrupt files
    are removed and reported as a miss.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, descriptor: str, N: int) -> Path:
        key = checksum_hex(descriptor.encode("utf-8"), str(N).encode("ascii"))
        return self.directory / f"{key}.ulam"

    def load(self, descriptor: str, N: int):
        from scipy import sparse

        from .transfer import UlamMatrix

        path = self._path(descriptor, N)
        if not path.exists():
            return None
        try:
            header, arrays = read_container(path)
            if header.get("descriptor") != descriptor or header.get("N") != N:
                raise ValueError("cache key collision or stale entry")
            mat = sparse.csr_matrix(
                (arrays["data"], arrays["indices"], arrays["indptr"]), shape=(N, N)
            )
            out = UlamMatrix(N, mat, descriptor, header["payload_checksum"])
        except (ValueError, KeyError, OSError):
            path.unlink(missing_ok=True)
            return None
        os.utime(path)
        return out

    def store(self, ulam) -> str:
        path = self._path(ulam.map_descriptor, ulam.N)
        return write_container(
            path,
            {"descriptor": ulam.map_descriptor, "N": ulam.N, "format": "csr"},
            {
                "indptr": ulam.matrix.indptr.astype(np.int64),
                "indices": ulam.matrix.indices.astype(np.int64),
                "data": ulam.matrix.data.astype(np.float64),
            },
        )


def _referenced_checksums(manifest_roots) -> set[str]:
    pinned = set()
    for root in manifest_roots:
        root = Path(root)
        if not root.exists():
            continue
        for p in root.rglob("*.json"):
            if "manifest" not in p.name:
                continue
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
            except (ValueError, OSError):
                continue
            for c in doc.get("input_cache_checksums", []):
                pinned.add(str(c))
    return pinned


def cache_gc(cache_dir, max_bytes: int, manifest_roots=None) -> list[str]:
    """Evict least-recently-used cache entries down to ``max_bytes``.

    Entries whose payload checksum is referenced by a run manifest found under
    ``manifest_roots`` (default: the cache tree itself) are never evicted.
    Returns the evicted paths, oldest first.
    """
    cache_dir = Path(cache_dir)
    if not cache_dir.is_dir():
        raise FileNotFoundError(f"cache directory {cache_dir} does not exist")
    roots = list(manifest_roots) if manifest_roots is not None else [cache_dir]
    pinned = _referenced_checksums(roots)
    entries = []
    total = 0
    for p in sorted(cache_dir.glob("*.ulam")):
        st = p.stat()
        csum = None
        try:
            with open(p, "rb") as fh:
                csum = json.loads(fh.readline().decode("utf-8")).get("payload_checksum")
        except (ValueError, OSError):
            pass
        entries.append((st.st_mtime, p, st.st_size, csum))
        total += st.st_size
    entries.sort(key=lambda t: t[0])
    evicted = []
    for _, p, size, csum in entries:
        if total <= max_bytes:
            break
        if csum is not None and csum in pinned:
            continue
        p.unlink()
        total -= size
        evicted.append(str(p))
    return evicted
