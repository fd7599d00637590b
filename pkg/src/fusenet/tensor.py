"""Numeric substrate: parameters, shape-checked matmul, gradient checking and
the binary checkpoint format.

Tensors are plain ``numpy.ndarray`` objects in row-major order; rank-4
activations use (batch, channel, height, width).
"""
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Union

import numpy as np

MAGIC = b"FUSENET1"


class DimensionError(ValueError):
    """Raised when tensor extents do not line up."""


class ConfigurationError(ValueError):
    """Raised for invalid layer / head / phase settings."""


@dataclass(eq=False)
class Parameter:
    """A trainable tensor with its gradient buffer.

    ``decay`` marks whether L2 weight decay applies (conv / FC weights only).
    """

    name: str
    value: np.ndarray
    decay: bool = False
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if any(d < 1 for d in self.value.shape):
            raise DimensionError(f"{self.name}: extents must be >= 1, got {self.value.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def grad_check(f: Callable[[], float], params: Iterable[Parameter], eps: float = 1e-6,
               analytic: Callable[[], None] = None) -> float:
    """Compare analytic gradients against central differences.

    ``f`` evaluates the scalar objective from the current parameter values.
    ``analytic`` (optional) must fill ``param.grad`` for every parameter; if
    omitted the gradients already stored in the parameters are used.

    Returns the max over entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    if analytic is not None:
        for p in params:
            p.zero_grad()
        analytic()
    worst = 0.0
    for p in params:
        ana = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {p.name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            if not np.isfinite(a):
                raise FloatingPointError(f"non-finite analytic gradient at {p.name}[{i}]")
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as ``FUSENET1`` + (id length, id, rank, extents, values)*.

    Integers are unsigned 64-bit little-endian, values float64 little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            key = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<Q", len(key)))
            fh.write(key)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a FUSENET1 checkpoint")
    pos = 8
    while pos < len(blob):
        (klen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        key = blob[pos:pos + klen].decode("utf-8")
        pos += klen
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out[key] = arr.astype(np.float64)
    return out


def checksum(arrays: Union[Mapping[str, np.ndarray], Iterable[np.ndarray]]) -> str:
    """Hex digest over the raw bytes of the given arrays, used for freeze tests.

    A mapping is hashed in sorted key order, names included.
    """
    import hashlib

    h = hashlib.sha256()
    if isinstance(arrays, Mapping):
        for k in sorted(arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
    else:
        for a in arrays:
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def param_list(*modules) -> List[Parameter]:
    out: List[Parameter] = []
    for m in modules:
        out.extend(m.params())
    return out
