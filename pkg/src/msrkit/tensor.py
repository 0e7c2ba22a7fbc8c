"""Dense float64 tensors plus a deterministic, portable PRNG.

Tensors are plain row-major ``numpy.ndarray`` values in float64; every
operation here is a pure function and never mutates its inputs.  The
elementwise ops deliberately refuse general broadcasting: operands must
have identical shapes, or one side must be a scalar.  Anything fancier
than that is a bug in the caller.

Randomness comes from :class:`Prng`, a counter-mode splitmix64 generator.
Counter mode means output ``i`` is a pure function of ``(seed, i)``, so
arbitrarily large sample blocks vectorize in numpy, and the full generator
state is just two integers -- which makes checkpointing and bitwise-exact
resume trivial.  The raw 64-bit stream is identical to the reference
sequential splitmix64 (state starts at ``seed`` and advances by the golden
gamma each call); test vectors are frozen in ``tests/test_tensor.py``.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

Tensor = np.ndarray

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 tensor from nested lists / arrays, optionally reshaped."""
    out = np.asarray(data, dtype=np.float64)
    if shape is not None:
        out = out.reshape(tuple(shape))
    return np.ascontiguousarray(out)


def _as_operand(b):
    """Return (array_or_scalar, is_scalar) for the second operand."""
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        return float(b), True
    return np.asarray(b, dtype=np.float64), False


def _check_shapes(name: str, a: Tensor, b) -> None:
    if a.shape != b.shape:
        raise ValueError(
            f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def add(a: Tensor, b) -> Tensor:
    b, scalar = _as_operand(b)
    if not scalar:
        _check_shapes("add", a, b)
    return a + b


def sub(a: Tensor, b) -> Tensor:
    b, scalar = _as_operand(b)
    if not scalar:
        _check_shapes("sub", a, b)
    return a - b


def mul(a: Tensor, b) -> Tensor:
    b, scalar = _as_operand(b)
    if not scalar:
        _check_shapes("mul", a, b)
    return a * b


def div(a: Tensor, b) -> Tensor:
    b, scalar = _as_operand(b)
    if not scalar:
        _check_shapes("div", a, b)
    return a / b


def scale(a: Tensor, s: float) -> Tensor:
    return a * float(s)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch a named pointwise op; shapes must match or ``b`` be scalar."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"elementwise: unknown op {op!r}, expected one of "
                         f"{sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


def reduce_mean(a: Tensor, dims: Iterable[int]) -> Tensor:
    """Arithmetic mean over ``dims``, keeping the reduced axes as size 1.

    Keeping the axes means the result broadcast-subtracts cleanly against
    the input, which is how every zero-mean projection in this package is
    written.  An empty axis set is the identity.
    """
    dims = tuple(dims)
    if not dims:
        return a.copy()
    for d in dims:
        if not -a.ndim <= d < a.ndim:
            raise ValueError(f"reduce_mean: axis {d} invalid for rank {a.ndim}")
    return np.mean(a, axis=dims, keepdims=True)


def l2_norm(a: Tensor) -> float:
    """Euclidean magnitude sqrt(sum a_i^2) over all elements."""
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def uniform_tensor(rng: "Prng", shape: Sequence[int], lo: float, hi: float) -> Tensor:
    """Tensor of iid uniform samples in [lo, hi), deterministic given rng state."""
    return rng.uniform(lo, hi, shape=tuple(shape))


class Prng:
    """Counter-mode splitmix64 generator.

    State is ``(seed, counter)``; raw output ``i`` (1-based) is
    ``mix64(seed + i * 0x9E3779B97F4A7C15)`` with the standard splitmix64
    finalizer.  Identical seed plus identical call sequence reproduces the
    byte stream exactly on any platform, and uniform floats are built as
    ``(raw >> 11) * 2**-53`` so they live in [0, 1).
    """

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64_MASK
        self.counter = int(counter)

    def __repr__(self):
        return f"Prng(seed={self.seed}, counter={self.counter})"

    # -- state management ------------------------------------------------

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Prng":
        seed, counter = state
        return cls(seed, counter)

    @classmethod
    def derive(cls, seed: int, stream: int) -> "Prng":
        """Independent child generator: seeded by raw output #stream+1 of seed."""
        return cls(int(cls(seed)._raw(stream + 1)[-1]))

    # -- core stream -----------------------------------------------------

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw uint64 outputs, advancing the counter."""
        with np.errstate(over="ignore"):
            idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
            z = np.uint64(self.seed) + idx * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z ^= z >> np.uint64(31)
        self.counter += n
        return z

    def raw_bytes(self, n_words: int) -> bytes:
        """Little-endian bytes of the next n raw words (for stream tests)."""
        return self._raw(n_words).astype("<u8").tobytes()

    # -- distributions ---------------------------------------------------

    def uniform(self, lo: float = 0.0, hi: float = 1.0,
                shape: Sequence[int] | None = None):
        """Uniform samples in [lo, hi); scalar float when shape is None."""
        lo = float(lo)
        hi = float(hi)
        if lo >= hi:
            raise ValueError(f"uniform: need lo < hi, got lo={lo} hi={hi}")
        n = 1 if shape is None else int(np.prod(shape)) if len(shape) else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        out = lo + u * (hi - lo)
        # float rounding can push lo + u*(hi-lo) onto hi itself; keep [lo, hi)
        out[out >= hi] = np.nextafter(hi, lo)
        if shape is None:
            return float(out[0])
        return out.reshape(tuple(shape))

    def normal(self, shape: Sequence[int], mean: float = 0.0,
               std: float = 1.0) -> Tensor:
        """Gaussian samples via Box-Muller on uniform pairs."""
        n = int(np.prod(shape)) if len(shape) else 1
        m = (n + 1) // 2
        u = (self._raw(2 * m) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        u1 = 1.0 - u[:m]          # (0, 1]: keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                            r * np.sin(2.0 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(tuple(shape))

    def integers(self, bound: int, shape: Sequence[int] | None = None):
        """Integers uniform on [0, bound); floor of uniform floats.

        Bias is O(bound / 2^53), irrelevant for the small bounds used here
        (crop offsets, flip coins, class picks).
        """
        if bound <= 0:
            raise ValueError(f"integers: bound must be positive, got {bound}")
        u = self.uniform(0.0, 1.0, shape=shape if shape is not None else (1,))
        out = np.floor(np.asarray(u) * bound).astype(np.int64)
        if shape is None:
            return int(out[0])
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic uniform shuffle of range(n) by sorting raw keys."""
        return np.argsort(self._raw(n), kind="stable")
