"""Named, ordered parameter stores and the binary weight-file format.

Weight file layout (little-endian):
    magic "GMCW" | version u16 | config digest (32 bytes) | tensor count u32
    then per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
    raw f32 data.
"""

import struct

import numpy as np

from .autograd import Tensor
from .errors import (BadMagicError, BadVersionError, ConfigError, CorruptShapeError,
                     DigestMismatchError, TruncatedError)

WEIGHT_MAGIC = b"GMCW"
WEIGHT_VERSION = 1
_MAX_RANK = 4
_MAX_DIM = 1 << 24


class ParamStore:
    """Ordered name -> Tensor map for one network, tied to a config digest."""

    def __init__(self, digest):
        if not isinstance(digest, bytes) or len(digest) != 32:
            raise ConfigError("ParamStore digest must be 32 raw bytes")
        self.digest = digest
        self._names = []
        self._tensors = {}

    def add(self, name, tensor):
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name '{name}'")
        self._names.append(name)
        self._tensors[name] = tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._names)

    def names(self):
        return list(self._names)

    def items(self):
        for n in self._names:
            yield n, self._tensors[n]

    def set_requires_grad(self, flag):
        for _, t in self.items():
            t.requires_grad = flag

    def zero_grad(self):
        for _, t in self.items():
            t.grad = None

    def copy(self):
        out = ParamStore(self.digest)
        for n, t in self.items():
            out.add(n, Tensor(t.data.copy(), requires_grad=t.requires_grad))
        return out

    def first_incompatibility(self, other):
        """Name of the first mismatched tensor, or None if interpolation-compatible."""
        if self._names != other._names:
            ours, theirs = set(self._names), set(other._names)
            for n in self._names:
                if n not in theirs:
                    return n
            for n in other._names:
                if n not in ours:
                    return n
            return self._names[0]  # same names, different order
        for n in self._names:
            if self._tensors[n].data.shape != other._tensors[n].data.shape:
                return n
        return None


def serialize_params(store):
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<H", WEIGHT_VERSION)
    out += store.digest
    out += struct.pack("<I", len(store))
    for name, t in store.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", data.ndim)
        for d in data.shape:
            out += struct.pack("<I", d)
        out += data.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.what}: need {n} bytes at offset {self.pos}, "
                                 f"only {len(self.buf) - self.pos} left")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def deserialize_params(buf, expected_digest=None):
    r = _Reader(buf, "weight file")
    if r.take(4) != WEIGHT_MAGIC:
        raise BadMagicError("weight file: bad magic (expected GMCW)")
    version = r.unpack("<H")
    if version != WEIGHT_VERSION:
        raise BadVersionError(f"weight file: unsupported version {version}")
    digest = bytes(r.take(32))
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatchError(
            f"weight file digest {digest.hex()} does not match model config "
            f"digest {expected_digest.hex()}")
    count = r.unpack("<I")
    store = ParamStore(digest)
    for _ in range(count):
        nlen = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        rank = r.unpack("<B")
        if rank == 0 or rank > _MAX_RANK:
            raise CorruptShapeError(f"weight file: tensor '{name}' has invalid rank {rank}")
        dims = []
        for _ in range(rank):
            d = r.unpack("<I")
            if d == 0 or d > _MAX_DIM:
                raise CorruptShapeError(
                    f"weight file: tensor '{name}' has invalid dimension {d}")
            dims.append(d)
        n_elem = int(np.prod(dims))
        raw = r.take(4 * n_elem)
        data = np.frombuffer(bytes(raw), dtype="<f4").reshape(dims)
        store.add(name, Tensor(data.copy()))
    if r.pos != len(buf):
        raise CorruptShapeError(f"weight file: {len(buf) - r.pos} trailing bytes")
    return store


def save_weights(store, path):
    blob = serialize_params(store)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    import os
    os.replace(tmp, path)


def load_weights(path, expected_digest=None):
    with open(path, "rb") as f:
        buf = f.read()
    return deserialize_params(buf, expected_digest)
