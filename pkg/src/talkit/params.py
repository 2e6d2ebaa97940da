"""Named parameter storage, initialisation, SGD and the TALF1 checkpoint format."""

from __future__ import annotations

import math
import struct
from typing import Dict, Iterator, Mapping, Optional

import numpy as np

from .errors import ConfigError, FormatError
from .fileio import atomic_write_bytes
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TALF1"


class ParamStore:
    """Ordered mapping of parameter name -> leaf :class:`Tensor`.

    Weights are drawn uniformly from ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
    using the caller's seeded generator, so two stores built from the same
    seed hold identical values.
    """

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def create(self, name: str, shape, fan_in: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, fill: Optional[float] = None) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if fill is not None:
            data = np.full(shape, float(fill))
        else:
            if rng is None or fan_in is None:
                raise ConfigError(f"parameter {name!r} needs rng and fan_in or a fill value")
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True)
        self._tensors[name] = t
        return t

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing the tensors whose names start with ``prefix``."""
        view = ParamStore()
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                view._tensors[name] = t
        return view

    def merge(self, other: "ParamStore") -> "ParamStore":
        for name, t in other.items():
            self.add(name, t)
        return self

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for t in self._tensors.values():
            t.requires_grad = flag

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self._tensors.items():
            if name not in state:
                if strict:
                    raise FormatError(f"checkpoint is missing parameter {name!r}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise FormatError(f"parameter {name!r}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    def load(self, path, strict: bool = True) -> None:
        self.load_state(load_checkpoint(path), strict=strict)


def grad_norm(store: ParamStore) -> float:
    return math.sqrt(sum(float((t.grad ** 2).sum()) for t in store.tensors() if t.grad is not None))


def sgd_step(store: ParamStore, lr: float, clip_norm: Optional[float] = 5.0) -> float:
    """One plain SGD update with global-norm gradient clipping.

    Returns the pre-clipping gradient norm.
    """
    norm = grad_norm(store)
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / norm
    for t in store.tensors():
        if t.grad is not None and t.requires_grad:
            t.data = t.data - lr * factor * t.grad
    return norm


class Adam:
    """Adam with global-norm clipping, used by the desk-scale experiments."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: Optional[float] = 5.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self) -> float:
        norm = grad_norm(self.store)
        factor = self.clip_norm / norm if self.clip_norm is not None and norm > self.clip_norm else 1.0
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, t in self.store.items():
            if t.grad is None or not t.requires_grad:
                continue
            g = t.grad * factor
            m = self._m[name] = self.b1 * self._m[name] + (1 - self.b1) * g
            v = self._v[name] = self.b2 * self._v[name] + (1 - self.b2) * g * g
            t.data = t.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# TALF1 checkpoints


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a TALF1 checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    out: Dict[str, np.ndarray] = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, state: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(state))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
