"""
ParamSet: ordered named model parameters, plus the FAES binary checkpoint format.

FAES layout (little-endian):
    magic b"FAES", version u32, entry count u32
    per entry: name length u32, name bytes (utf-8), rank u32, dims u32 * rank, f32 values
"""
import logging
import os
import struct
from collections import OrderedDict

import numpy as np

from config import BYTES_PER_VALUE
from utils.autodiff import Tensor

logger = logging.getLogger(__name__)

FAES_MAGIC = b"FAES"
FAES_VERSION = 1


class ParamFormatError(ValueError):
    """Malformed FAES payload"""


class ParamSet:
    """Ordered, uniquely named collection of parameter tensors"""

    def __init__(self, entries=None):
        self._entries = OrderedDict()
        for name, tensor in (entries or []):
            self.add(name, tensor)

    def add(self, name, tensor):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.name = name
        self._entries[name] = tensor

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries.keys())

    def tensors(self):
        return list(self._entries.values())

    @property
    def total_params(self):
        return sum(t.size for t in self._entries.values())

    @property
    def byte_size(self):
        return BYTES_PER_VALUE * self.total_params

    def structure(self):
        """[(name, shape)] in order; equal structures are aggregatable"""
        return [(name, tuple(t.shape)) for name, t in self._entries.items()]

    def same_structure(self, other):
        return self.structure() == other.structure()

    def subset(self, prefix):
        """Deep copy of the entries whose name starts with `prefix`"""
        return ParamSet(
            (name, Tensor(t.data.copy(), dtype=t.dtype)) for name, t in self._entries.items() if name.startswith(prefix)
        )

    def copy(self, requires_grad=None):
        """Deep copy; gradients are not copied"""
        return ParamSet(
            (name, Tensor(t.data.copy(), requires_grad=t.requires_grad if requires_grad is None else requires_grad,
                          dtype=t.dtype))
            for name, t in self._entries.items()
        )

    def set_requires_grad(self, flag, names=None):
        for name in (names if names is not None else self.names()):
            self._entries[name].requires_grad = flag
        return self

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def is_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self._entries.values())

    def bitwise_equal(self, other, names=None):
        names = names if names is not None else self.names()
        if any(n not in other for n in names):
            return False
        return all(
            self[n].data.dtype == other[n].data.dtype
            and self[n].data.shape == other[n].data.shape
            and self[n].data.tobytes() == other[n].data.tobytes()
            for n in names
        )

    def __repr__(self):
        return f"ParamSet(entries={len(self)}, total_params={self.total_params}, byte_size={self.byte_size})"


def to_bytes(params):
    """Serialize a ParamSet into the FAES format"""
    chunks = [FAES_MAGIC, struct.pack("<II", FAES_VERSION, len(params))]
    for name, tensor in params:
        encoded = name.encode("utf-8")
        shape = tensor.shape
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def from_bytes(payload):
    """Parse a FAES payload back into a float32 ParamSet"""
    view = memoryview(payload)
    if len(view) < 12 or bytes(view[:4]) != FAES_MAGIC:
        raise ParamFormatError("not a FAES payload (bad magic)")
    version, count = struct.unpack_from("<II", view, 4)
    if version != FAES_VERSION:
        raise ParamFormatError(f"unsupported FAES version {version}")
    offset = 12
    entries = []
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, offset)
            offset += 4
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", view, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", view, offset)
            offset += 4 * rank
            n_values = int(np.prod(shape)) if rank else 1
            n_bytes = 4 * n_values
            if offset + n_bytes > len(view):
                raise ParamFormatError(f"truncated values for entry {name!r}")
            values = np.frombuffer(view[offset:offset + n_bytes], dtype="<f4").astype(np.float32)
            offset += n_bytes
            entries.append((name, Tensor(values.reshape(shape), dtype=np.float32)))
    except struct.error as e:
        raise ParamFormatError(f"truncated FAES payload: {e}")
    if offset != len(view):
        raise ParamFormatError(f"{len(view) - offset} trailing bytes after last entry")
    return ParamSet(entries)


def save_params(params, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(to_bytes(params))
    logger.info(f"Saved {len(params)} parameter tensors ({params.byte_size:,} bytes) to {path}")


def load_params(path):
    with open(path, "rb") as f:
        return from_bytes(f.read())
