"""Flat parameter vectors, linear operators and seeded random streams.

Parameter vectors are plain 1-D float64 numpy arrays; the mapping back to
layer tensors lives in ``ParamLayout``. All reductions use numpy's fixed
sequential order so repeated runs are bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Type aliases used throughout the package.
ParamVector = np.ndarray  # shape (P,), float64
Matrix = np.ndarray  # shape (rows, cols), float64


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


def as_vector(x) -> ParamVector:
    """Coerce to a 1-D float64 array (copying only when needed)."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def check_same_length(u: ParamVector, v: ParamVector) -> None:
    if u.shape != v.shape:
        raise DimensionError(f"length mismatch: {u.shape} vs {v.shape}")


def dot(u: ParamVector, v: ParamVector) -> float:
    """Inner product with a fixed reduction order (deterministic reruns)."""
    check_same_length(u, v)
    return float(np.dot(u, v))


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return a*x + y."""
    check_same_length(x, y)
    return a * x + y


def norm2(v: ParamVector) -> float:
    """Euclidean norm; exactly 0 iff v == 0."""
    return float(np.sqrt(np.dot(v, v)))


class LinearOperator:
    """A symmetric linear map on flat parameter vectors.

    Subclasses provide ``dim`` and ``apply``; ``apply`` must be pure so
    repeated calls on the same input are bitwise identical.
    """

    dim: int

    def apply(self, v: ParamVector) -> ParamVector:
        raise NotImplementedError

    def __call__(self, v: ParamVector) -> ParamVector:
        return self.apply(v)


class MatrixOperator(LinearOperator):
    """Dense matrix wrapped as an operator (test oracles, tiny systems)."""

    def __init__(self, a: Matrix):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"expected a square matrix, got {a.shape}")
        self.a = a
        self.dim = a.shape[0]

    def apply(self, v: ParamVector) -> ParamVector:
        if v.shape != (self.dim,):
            raise DimensionError(f"operator dim {self.dim}, vector shape {v.shape}")
        return self.a @ v


@dataclass(frozen=True)
class ParamLayout:
    """Segment map from a flat vector to a list of tensor shapes."""

    shapes: tuple[tuple[int, ...], ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        sizes = [int(np.prod(s)) for s in self.shapes]
        return tuple(np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int))

    @property
    def size(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes))

    def split(self, vec: ParamVector) -> list[np.ndarray]:
        """Cut a flat vector into tensors per the segment map (copies)."""
        if vec.shape != (self.size,):
            raise DimensionError(f"layout size {self.size}, vector shape {vec.shape}")
        out = []
        k = 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            out.append(np.array(vec[k : k + n]).reshape(shape))
            k += n
        return out

    def join(self, tensors) -> ParamVector:
        """Flatten tensors (row-major) back into one vector."""
        parts = []
        for t, shape in zip(tensors, self.shapes, strict=True):
            t = np.asarray(t, dtype=np.float64)
            if t.shape != shape:
                raise DimensionError(f"segment shape {t.shape} != layout {shape}")
            parts.append(t.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by (seed, *stream); same key, same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr
