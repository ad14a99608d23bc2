"""Dense float64 tensors and the primitive kernels built on them.

Every value flowing through the library is a :class:`Tensor`: an immutable,
row-major array of 64-bit floats. Immutability makes tensors safe to share
across threads and lets the autodiff tape retain primal values without
defensive copies. The module also provides :class:`Rng`, the splittable
seeded random source used for reproducible initialization and shuffling.

Kernels here operate on plain tensors only. The dispatching versions that
also accept traced or dual operands live in :mod:`fixnet.autodiff`.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence

from .errors import ShapeMismatch

Scalar = int | float


class Tensor:
    """Immutable dense array of float64 values in row-major order."""

    __slots__ = ("_a",)

    def __init__(self, values):
        a = np.array(values, dtype=np.float64, order="C")
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor values must be finite")
        a.setflags(write=False)
        self._a = a

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "Tensor":
        # Trusted internal path: `a` is a fresh float64 C-order result.
        if not np.all(np.isfinite(a)):
            raise ValueError("operation produced non-finite values")
        t = object.__new__(cls)
        a.setflags(write=False)
        t._a = a
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int] | int = ()) -> "Tensor":
        return cls._wrap(np.zeros(shape, dtype=np.float64))

    @classmethod
    def ones(cls, shape: Sequence[int] | int = ()) -> "Tensor":
        return cls._wrap(np.ones(shape, dtype=np.float64))

    @classmethod
    def full(cls, shape: Sequence[int] | int, value: float) -> "Tensor":
        return cls._wrap(np.full(shape, float(value), dtype=np.float64))

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the flat row-major storage."""
        return self._a

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def ndim(self) -> int:
        return self._a.ndim

    @property
    def size(self) -> int:
        return self._a.size

    def item(self) -> float:
        if self._a.size != 1:
            raise ValueError("item() requires exactly one element")
        return float(self._a.reshape(-1)[0])

    def tolist(self):
        return self._a.tolist()

    def __repr__(self) -> str:
        return f"Tensor({self._a!r})"

    # Plain-tensor arithmetic sugar used by tests and oracles.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_array(v: Tensor | Scalar) -> np.ndarray:
    if isinstance(v, Tensor):
        return v.data
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return np.float64(v)
    raise TypeError(f"expected Tensor or scalar, got {type(v).__name__}")


def _binary(name: str, a, b, fn) -> Tensor:
    """Apply `fn` elementwise; shapes must match or one side is scalar."""
    av, bv = _as_array(a), _as_array(b)
    if av.ndim and bv.ndim and av.shape != bv.shape:
        raise ShapeMismatch(f"{name}: {av.shape} vs {bv.shape}")
    return Tensor._wrap(fn(av, bv))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D [m, k] tensor with a 2-D [k, n] tensor."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects tensors")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return Tensor._wrap(a.data @ b.data)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply)


def scale(a: Tensor, factor: float) -> Tensor:
    if not isinstance(factor, (int, float)) or isinstance(factor, bool):
        raise TypeError("scale factor must be a plain number")
    return Tensor._wrap(_as_array(a) * float(factor))


def tanh(a: Tensor) -> Tensor:
    return Tensor._wrap(np.tanh(_as_array(a)))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function 1 / (1 + exp(-t)), evaluated overflow-free."""
    t = _as_array(a)
    out = np.empty_like(t, dtype=np.float64)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return Tensor._wrap(out)


def square(a: Tensor) -> Tensor:
    v = _as_array(a)
    return Tensor._wrap(v * v)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    return Tensor._wrap(np.asarray(np.sum(_as_array(a)), dtype=np.float64))


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements as a 0-d tensor."""
    return Tensor._wrap(np.asarray(np.mean(_as_array(a)), dtype=np.float64))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape} changes element count")
    return Tensor._wrap(np.ascontiguousarray(a.data.reshape(shape)))


def transpose(a: Tensor) -> Tensor:
    """Copying 2-D transpose. Data-layout utility, not a differentiable op."""
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose needs a 2-D tensor, got {a.shape}")
    return Tensor._wrap(np.ascontiguousarray(a.data.T))


def norm_inf_diff(a: Tensor, b: Tensor) -> float:
    """Max absolute elementwise difference (the stopping-norm of the solver)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"norm_inf_diff: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.data - b.data)))


_ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of the named elementwise kernels."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def allclose(a: Tensor, b: Tensor, rtol: float = 1e-9, atol: float = 0.0) -> bool:
    return a.shape == b.shape and bool(np.allclose(a.data, b.data, rtol=rtol, atol=atol))


class Rng:
    """Splittable deterministic random source.

    Built on a seeded PCG64 stream, so a given seed produces bit-identical
    samples on every platform. ``split`` derives an independent child
    stream; repeated splits are themselves deterministic.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._ss = SeedSequence(self.seed)
        self._gen = Generator(PCG64(self._ss))

    @classmethod
    def _from_seed_sequence(cls, ss: SeedSequence) -> "Rng":
        rng = object.__new__(cls)
        rng.seed = int(ss.entropy) if isinstance(ss.entropy, int) else -1
        rng._ss = ss
        rng._gen = Generator(PCG64(ss))
        return rng

    def split(self) -> "Rng":
        (child,) = self._ss.spawn(1)
        return Rng._from_seed_sequence(child)

    def uniform(self, shape: Sequence[int] | int = (), low: float = 0.0, high: float = 1.0) -> Tensor:
        return Tensor._wrap(self._gen.uniform(low, high, size=shape).astype(np.float64))

    def normal(self, shape: Sequence[int] | int = (), std: float = 1.0) -> Tensor:
        return Tensor._wrap(self._gen.normal(0.0, std, size=shape).astype(np.float64))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, count: int) -> np.ndarray:
        return self._gen.integers(low, high, size=count)


def stack_columns(columns: Iterable[Tensor]) -> Tensor:
    """Assemble 1-D tensors of equal length into a [len, count] matrix."""
    cols = [c.data for c in columns]
    return Tensor._wrap(np.ascontiguousarray(np.stack(cols, axis=1)))
