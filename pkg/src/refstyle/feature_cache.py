"""Per-timestep, per-site store of cached attention features.

Binary layout (little-endian)::

    "MSFC" | u32 version (=1) | u32 entry count
    per entry:
        u32 timestep | u32 len + UTF-8 site id | u8 role (0 content, 1 style)
        u8 has_q | arrays q?, k, v as: u32 heads, u32 tokens, u32 head_dim,
        then heads*tokens*head_dim f32 values, row-major
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .errors import (
    CacheFormatError,
    CacheMissError,
    CacheValidationError,
    CacheVersionError,
    DuplicateEntryError,
    RefStyleError,
)

MAGIC = b"MSFC"
VERSION = 1
ROLES = ("content", "style")

_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_FLAGS = struct.Struct("<BB")
_DIMS = struct.Struct("<III")


class CacheKey(NamedTuple):
    timestep: int
    site_id: str
    role: str

    def describe(self) -> str:
        return f"step t={self.timestep}, site {self.site_id!r}, role {self.role}"


def _as_f32(a):
    a = np.ascontiguousarray(a, dtype=np.float32)
    if a.ndim != 3:
        raise CacheValidationError(f"features must be (heads, tokens, head_dim), got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CachedFeatures:
    k: np.ndarray
    v: np.ndarray
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _as_f32(val))
        if self.k.shape != self.v.shape:
            raise CacheValidationError(f"key {self.k.shape} and value {self.v.shape} differ")
        if self.q is not None and (
            self.q.shape[0] != self.k.shape[0] or self.q.shape[2] != self.k.shape[2]
        ):
            raise CacheValidationError(f"query {self.q.shape} incompatible with key {self.k.shape}")

    def arrays(self):
        return [a for a in (self.q, self.k, self.v) if a is not None]

    def bitwise_equal(self, other: "CachedFeatures") -> bool:
        mine, theirs = self.arrays(), other.arrays()
        return (self.q is None) == (other.q is None) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


class FrozenStoreError(RefStyleError, RuntimeError):
    category = "frozen"


class FeatureStore:
    """In-memory mapping ``CacheKey -> CachedFeatures``.

    Written once during inversion, then frozen for the sampling phase.
    """

    def __init__(self):
        self._entries: dict[CacheKey, CachedFeatures] = {}
        self.frozen = False

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return CacheKey(*key) in self._entries

    def __iter__(self) -> Iterator[CacheKey]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def count(self, role: str) -> int:
        return sum(1 for key in self._entries if key.role == role)

    def freeze(self) -> "FeatureStore":
        self.frozen = True
        return self

    def record(self, key, feats: CachedFeatures) -> None:
        key = CacheKey(int(key[0]), str(key[1]), str(key[2]))
        if self.frozen:
            raise FrozenStoreError("cannot record into a frozen feature store")
        if key.role not in ROLES:
            raise CacheValidationError(f"unknown role {key.role!r}")
        if key.role == "content" and feats.q is None:
            raise CacheValidationError(f"content entry without query: {key.describe()}")
        if key.role == "style" and feats.q is not None:
            raise CacheValidationError(f"style entry must not carry a query: {key.describe()}")
        if key in self._entries:
            raise DuplicateEntryError(f"entry already recorded: {key.describe()}")
        self._entries[key] = feats

    def lookup(self, key) -> CachedFeatures:
        key = CacheKey(int(key[0]), str(key[1]), str(key[2]))
        try:
            return self._entries[key]
        except KeyError:
            raise CacheMissError(f"no cached features for {key.describe()}", key) from None

    def discard(self, key) -> None:
        if self.frozen:
            raise FrozenStoreError("cannot delete from a frozen feature store")
        del self._entries[CacheKey(*key)]

    def bitwise_equal(self, other: "FeatureStore") -> bool:
        if list(self._entries) != list(other._entries):
            return False
        return all(f.bitwise_equal(other._entries[k]) for k, f in self._entries.items())

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, len(self._entries))]
        for key, feats in self._entries.items():
            site = key.site_id.encode("utf-8")
            parts.append(_U32.pack(key.timestep))
            parts.append(_U32.pack(len(site)))
            parts.append(site)
            parts.append(_FLAGS.pack(ROLES.index(key.role), feats.q is not None))
            for arr in feats.arrays():
                parts.append(write_array_record(arr))
        return b"".join(parts)

    def save(self, path) -> None:
        with open(os.fspath(path), "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureStore":
        reader = _Reader(data)
        magic, version, count = reader.unpack(_HEADER, "header")
        if magic != MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise CacheVersionError(f"unsupported cache version {version} (expected {VERSION})")
        store = cls()
        for _ in range(count):
            (timestep,) = reader.unpack(_U32, "timestep")
            (n,) = reader.unpack(_U32, "site id length")
            start = reader.pos
            raw = reader.take(n, "site id")
            try:
                site = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise CacheFormatError("site id is not valid UTF-8", start) from None
            role_pos = reader.pos
            role, has_q = reader.unpack(_FLAGS, "role flags")
            if role >= len(ROLES) or has_q > 1:
                raise CacheFormatError(f"invalid role/has_q bytes {role}/{has_q}", role_pos)
            arrays = [read_array_record(reader) for _ in range(3 if has_q else 2)]
            q = arrays.pop(0) if has_q else None
            try:
                store.record((timestep, site, ROLES[role]), CachedFeatures(arrays[0], arrays[1], q))
            except (CacheValidationError, DuplicateEntryError) as exc:
                raise CacheFormatError(str(exc), role_pos) from None
        if reader.pos != len(data):
            raise CacheFormatError(f"{len(data) - reader.pos} trailing bytes", reader.pos)
        return store

    @classmethod
    def load(cls, path) -> "FeatureStore":
        with open(os.fspath(path), "rb") as fh:
            return cls.from_bytes(fh.read())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CacheFormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what):
        return st.unpack(self.take(st.size, what))


def write_array_record(arr) -> bytes:
    """Encode a rank-3 array as dims + little-endian f32 payload."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise CacheValidationError(f"array records are rank 3, got {arr.shape}")
    return _DIMS.pack(*arr.shape) + arr.tobytes()


def read_array_record(reader: _Reader) -> np.ndarray:
    dims = reader.unpack(_DIMS, "array dims")
    n = int(np.prod(dims, dtype=np.int64))
    payload = reader.take(4 * n, "array payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    arr.setflags(write=False)
    return arr


def save(store: FeatureStore, path) -> None:
    store.save(path)


def load(path) -> FeatureStore:
    return FeatureStore.load(path)
