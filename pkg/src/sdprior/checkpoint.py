"""Binary containers for weights, tensors and embeddings.

``SDTK`` layout::

    b"SDTK" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | payload

The manifest is a list of ``{"name", "shape", "offset"}`` entries sorted by
name; offsets are byte positions into the payload, which holds little-endian
float64 values back to back.

``SDEM`` layout::

    b"SDEM" | u32 count | u32 dim | count*dim little-endian float64

with a line-delimited JSON sidecar (``<path>.jsonl``) whose i-th line is
the tagset of row i.
"""

import json
import struct

import numpy as np

from .errors import ParseError

SDTK_MAGIC = b"SDTK"
SDTK_VERSION = 1
SDEM_MAGIC = b"SDEM"


def dumps_tensors(arrays):
    names = sorted(arrays)
    manifest, chunks, offset = [], [], 0
    for name in names:
        arr = np.array(arrays[name], dtype="<f8", order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(manifest, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return SDTK_MAGIC + struct.pack("<II", SDTK_VERSION, len(head)) + head + b"".join(chunks)


def loads_tensors(blob):
    if blob[:4] != SDTK_MAGIC:
        raise ParseError("not an SDTK container", 0)
    if len(blob) < 12:
        raise ParseError("truncated SDTK header", len(blob))
    version, mlen = struct.unpack_from("<II", blob, 4)
    if version != SDTK_VERSION:
        raise ParseError(f"unsupported SDTK version {version}", 4)
    start = 12 + mlen
    if len(blob) < start:
        raise ParseError("truncated SDTK manifest", len(blob))
    manifest = json.loads(blob[12:start].decode("utf-8"))
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = start + entry["offset"]
        hi = lo + 8 * count
        if hi > len(blob):
            raise ParseError(f"truncated payload for {entry['name']}", len(blob))
        out[entry["name"]] = np.frombuffer(blob[lo:hi], dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_tensors(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps_tensors(arrays))


def load_tensors(path):
    with open(path, "rb") as fh:
        return loads_tensors(fh.read())


def save_params(path, params):
    save_tensors(path, {k: p.data for k, p in params.items()})


def load_params_into(path, params):
    """Overwrite ``params`` values in place from a checkpoint with matching names/shapes."""
    arrays = load_tensors(path)
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ParseError(f"checkpoint lacks parameters: {', '.join(missing[:5])}", 0)
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise ParseError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}", 0)
        p.data[...] = arrays[k]
    return params


def dumps_embeddings(matrix):
    matrix = np.ascontiguousarray(np.asarray(matrix, dtype="<f8"))
    count, dim = matrix.shape
    return SDEM_MAGIC + struct.pack("<II", count, dim) + matrix.tobytes()


def loads_embeddings(blob):
    if blob[:4] != SDEM_MAGIC:
        raise ParseError("not an SDEM dump", 0)
    count, dim = struct.unpack_from("<II", blob, 4)
    need = 12 + 8 * count * dim
    if len(blob) < need:
        raise ParseError("truncated SDEM payload", len(blob))
    return np.frombuffer(blob[12:need], dtype="<f8").reshape(count, dim).astype(np.float64)


def save_embeddings(path, matrix, tagsets):
    """Write the binary dump and its ``.jsonl`` sidecar (one tagset per row)."""
    if len(tagsets) != len(matrix):
        raise ValueError("one tagset per embedding row required")
    with open(path, "wb") as fh:
        fh.write(dumps_embeddings(matrix))
    with open(str(path) + ".jsonl", "w", encoding="utf-8") as fh:
        for tags in tagsets:
            fh.write(json.dumps([list(kv) for kv in tags], ensure_ascii=False) + "\n")


def load_embeddings(path):
    with open(path, "rb") as fh:
        matrix = loads_embeddings(fh.read())
    with open(str(path) + ".jsonl", encoding="utf-8") as fh:
        tagsets = [tuple(tuple(kv) for kv in json.loads(line)) for line in fh if line.strip()]
    return matrix, tagsets
