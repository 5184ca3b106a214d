"""Named parameter collections, the Adam optimizer, and parameter-file IO.

File format (magic ``DKD1``): after the 4-byte magic, each parameter is
stored as path length (u32 LE), UTF-8 path, rank (u32 LE), extents
(u32 LE each) and the row-major float64 payload, until end of file.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import DataFormatError, InvalidArgumentError, PreconditionError
from .tensor import Tensor

MAGIC = b"DKD1"


class ParamSet:
    """Ordered map of path -> trainable Tensor, with Adam state."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise InvalidArgumentError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[path] = t
        self._m[path] = np.zeros_like(t.data)
        self._v[path] = np.zeros_like(t.data)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def paths(self):
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for path, t in self._params.items():
            h.update(path.encode("utf-8"))
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def clone_values(self) -> "ParamSet":
        out = ParamSet()
        for path, t in self._params.items():
            out.add(path, t.data.copy())
        return out

    def save(self, filename) -> None:
        with open(filename, "wb") as f:
            f.write(MAGIC)
            for path, t in self._params.items():
                raw = path.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", t.data.ndim))
                for e in t.data.shape:
                    f.write(struct.pack("<I", e))
                f.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, filename) -> "ParamSet":
        out = cls()
        with open(filename, "rb") as f:
            magic = f.read(4)
            if magic != MAGIC:
                raise DataFormatError(f"{filename}: bad magic {magic!r}, expected {MAGIC!r}")
            while True:
                head = f.read(4)
                if not head:
                    break
                if len(head) != 4:
                    raise DataFormatError(f"{filename}: truncated parameter record")
                (plen,) = struct.unpack("<I", head)
                path = f.read(plen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack("<" + "I" * rank, f.read(4 * rank))
                count = int(np.prod(shape)) if rank else 1
                payload = f.read(8 * count)
                if len(payload) != 8 * count:
                    raise DataFormatError(f"{filename}: truncated payload for {path!r}")
                out.add(path, np.frombuffer(payload, dtype="<f8").reshape(shape).copy())
        return out


def adam_step(
    params: ParamSet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter; clears gradients."""
    for path, t in params.items():
        if t.grad is None:
            raise PreconditionError(f"adam_step: parameter {path!r} has no gradient")
    params.step_count += 1
    k = params.step_count
    bc1 = 1.0 - beta1**k
    bc2 = 1.0 - beta2**k
    for path, t in params.items():
        g = t.grad
        m = params._m[path]
        v = params._v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.zero_grad()


# -- initialization helpers -------------------------------------------------


def conv_init(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    """He-style fan-in scaled normal init for convolution kernels."""
    fan_in = cin * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kh, kw))


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
