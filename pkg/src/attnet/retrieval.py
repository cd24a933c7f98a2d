"""Descriptor map storage and exact cosine k-nearest-neighbour place matching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ParseError

MAP_MAGIC = b"ADLM"
MAP_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
STABILIZER = 1e-8


@dataclass(frozen=True)
class DescriptorMap:
    """Immutable collection of descriptors sorted by ascending frame id.

    Values are stored as float32, the on-disk precision, so save/load is exact.
    """

    frame_ids: np.ndarray
    matrix: np.ndarray
    dim: int
    tag: str = ""

    def __len__(self):
        return len(self.frame_ids)

    def __eq__(self, other):
        if not isinstance(other, DescriptorMap):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.frame_ids, other.frame_ids)
            and np.array_equal(self.matrix, other.matrix)
        )

    __hash__ = None

    def entries(self):
        return list(zip(self.frame_ids.tolist(), self.matrix))

    def norms(self):
        return np.sqrt((self.matrix.astype(np.float64) ** 2).sum(axis=1))


@dataclass
class MatchResult:
    query_id: int
    candidates: list = field(default_factory=list)  # [(frame_id, similarity), ...]

    @property
    def frame_ids(self):
        return [f for f, _ in self.candidates]

    @property
    def best(self):
        return self.candidates[0] if self.candidates else None


def _values(d):
    return np.asarray(getattr(d, "values", d))


def build_map(descriptors, frame_ids=None, dim=None, tag=""):
    """Build a map from Descriptor objects (or raw vectors plus ``frame_ids``)."""
    descriptors = list(descriptors)
    if frame_ids is None:
        frame_ids = [int(d.frame_id) for d in descriptors]
    frame_ids = [int(f) for f in frame_ids]
    if len(frame_ids) != len(descriptors):
        raise DimensionError(f"{len(frame_ids)} frame ids for {len(descriptors)} descriptors")
    if not descriptors:
        return DescriptorMap(np.zeros(0, np.int64), np.zeros((0, dim or 0), np.float32), dim or 0, tag)
    dim = dim or len(_values(descriptors[0]))
    rows = []
    for f, d in zip(frame_ids, descriptors):
        v = _values(d).reshape(-1)
        if len(v) != dim:
            raise DimensionError(f"frame {f}: descriptor length {len(v)} != map dimension {dim}")
        rows.append(v)
    ids = np.asarray(frame_ids, dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        dup = sorted({int(f) for f in ids if (ids == f).sum() > 1})
        raise DimensionError(f"duplicate frame ids in map: {dup[:10]}")
    order = np.argsort(ids, kind="stable")
    matrix = np.asarray(rows, dtype=np.float32)[order]
    matrix.setflags(write=False)
    ids = ids[order]
    ids.setflags(write=False)
    return DescriptorMap(ids, matrix, dim, tag)


def similarities(dmap, q, stabilizer=STABILIZER):
    q = _values(q).astype(np.float64).reshape(-1)
    if len(q) != dmap.dim:
        raise DimensionError(f"query length {len(q)} != map dimension {dmap.dim}")
    m = dmap.matrix.astype(np.float64)
    return (m @ q) / np.maximum(dmap.norms() * np.linalg.norm(q), stabilizer)


def query(dmap, q, n=1, max_frame_id=None, stabilizer=STABILIZER):
    """Exact top-``n`` by cosine similarity; ties go to the lower frame id.

    ``max_frame_id`` restricts candidates to frames with id <= that value.
    """
    if n < 1:
        raise DimensionError(f"N must be >= 1, got {n}")
    query_id = int(getattr(q, "frame_id", -1))
    if len(dmap) == 0:
        return MatchResult(query_id, [])
    sims = similarities(dmap, q, stabilizer)
    ids = dmap.frame_ids
    if max_frame_id is not None:
        keep = ids <= max_frame_id
        sims, ids = sims[keep], ids[keep]
    order = np.lexsort((ids, -sims))[:n]
    return MatchResult(query_id, [(int(ids[i]), float(sims[i])) for i in order])


def save_map(path, dmap):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAP_MAGIC, MAP_VERSION, dmap.dim, len(dmap)))
        for f, row in zip(dmap.frame_ids, dmap.matrix):
            fh.write(struct.pack("<Q", int(f)))
            fh.write(np.ascontiguousarray(row, dtype="<f4").tobytes())


def load_map(path, tag=""):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParseError("truncated map header", offset=len(raw))
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAP_MAGIC:
        raise ParseError(f"bad magic {magic!r}", offset=0)
    if version != MAP_VERSION:
        raise ParseError(f"unsupported map version {version}", offset=4)
    record = 8 + 4 * dim
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        cut = _HEADER.size + (len(raw) - _HEADER.size) // record * record if record else len(raw)
        raise ParseError(f"map should be {expected} bytes, found {len(raw)}", offset=min(cut, len(raw)))
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, record)
    ids = body[:, :8].copy().view("<u8").reshape(-1).astype(np.int64)
    matrix = body[:, 8:].copy().view("<f4").reshape(count, dim).astype(np.float32)
    if count and np.any(np.diff(ids) <= 0):
        raise ParseError("frame ids are not strictly ascending", offset=_HEADER.size)
    ids.setflags(write=False)
    matrix.setflags(write=False)
    return DescriptorMap(ids, matrix, dim, tag)
