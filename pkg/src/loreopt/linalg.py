"""Dense linear-algebra substrate: SVD, orthonormalization, seeded randomness
and matrix serialization.

Matrices are plain 2-D ``float64`` numpy arrays. Every public function here is
pure: it never mutates its inputs and, given the same arguments (including the
same :class:`RandomSource`), returns bit-identical output.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateInput, InvalidInput, ShapeError

_MASK64 = (1 << 64) - 1
_SIGN_TOL = 1e-10
_RANK_TOL = 1e-12


def as_matrix(a, name="matrix"):
    """Validate and return ``a`` as a finite 2-D float64 array (copy-free when possible)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def frob_sq(a) -> float:
    """Squared Frobenius norm."""
    a = np.asarray(a)
    return float(np.vdot(a, a).real)


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RandomSource:
    """An immutable (seed, stream) pair naming one reproducible random stream.

    The draws are produced by a counter-based Philox generator keyed on
    ``(seed, stream)``, so two sources with equal fields always yield the same
    sequence and nothing is shared between callers. Use :meth:`split` to derive
    child streams (per step, per layer, per purpose) without any mutable state.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream <= _MASK64):
            raise InvalidInput("seed and stream must be 64-bit unsigned integers")

    def split(self, *keys: int) -> "RandomSource":
        stream = self.stream
        for key in keys:
            stream = _splitmix64(stream ^ _splitmix64((int(key) & _MASK64) ^ 0xD1B54A32D192ED03))
        return RandomSource(self.seed, stream)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def gaussian_matrix(m: int, n: int, rng: RandomSource) -> np.ndarray:
    """m x n matrix of i.i.d. standard normal entries."""
    if m < 1 or n < 1:
        raise InvalidInput(f"dimensions must be positive, got ({m}, {n})")
    return rng.generator().standard_normal((m, n))


# ---------------------------------------------------------------------------
# SVD and orthonormalization
# ---------------------------------------------------------------------------

class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def _first_significant_signs(cols: np.ndarray) -> np.ndarray:
    # sign of the first entry (top to bottom) whose magnitude exceeds _SIGN_TOL
    significant = np.abs(cols) > _SIGN_TOL
    first = np.argmax(significant, axis=0)
    picked = cols[first, np.arange(cols.shape[1])]
    signs = np.where(picked < 0, -1.0, 1.0)
    signs[~significant.any(axis=0)] = 1.0
    return signs


def svd_full(G) -> SvdResult:
    """Full SVD ``G = U diag(S) V^T`` with U (m x m) and V (n x n) orthogonal.

    Singular values are sorted in non-increasing order. Signs are fixed so that
    the first significant entry of every column of U is non-negative, V's
    matching columns being flipped alongside; this makes refitting the same
    matrix reproduce the same factors.
    """
    G = as_matrix(G, "G")
    U, S, Vt = np.linalg.svd(G, full_matrices=True)
    V = Vt.T.copy()
    k = S.shape[0]
    signs = _first_significant_signs(U)
    U = U * signs
    V[:, :k] *= signs[:k]
    if V.shape[1] > k:
        V[:, k:] *= _first_significant_signs(V[:, k:])
    return SvdResult(U, S, V)


def orthonormalize(Z) -> np.ndarray:
    """Return the orthonormal polar factor ``Z (Z^T Z)^{-1/2}``.

    Computed from the thin SVD ``Z = W diag(s) Y^T`` as ``W Y^T``. The result
    has the same column span as ``Z``.
    """
    Z = as_matrix(Z, "Z")
    m, r = Z.shape
    if m < r:
        raise ShapeError(f"orthonormalize needs rows >= cols, got {Z.shape}")
    W, s, Yt = np.linalg.svd(Z, full_matrices=False)
    if s[-1] < _RANK_TOL * s[0] or s[0] == 0.0:
        raise DegenerateInput("matrix is (numerically) rank deficient")
    return W @ Yt


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def matrix_to_bytes(a) -> bytes:
    """Little-endian ``rows:u64, cols:u64`` header followed by row-major f64 entries."""
    a = as_matrix(a)
    body = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return _HEADER.pack(*a.shape) + body


def matrix_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix starting at ``offset``; returns (matrix, next offset)."""
    if len(data) - offset < _HEADER.size:
        raise InvalidInput("truncated matrix header")
    rows, cols = _HEADER.unpack_from(data, offset)
    offset += _HEADER.size
    nbytes = rows * cols * 8
    if len(data) - offset < nbytes:
        raise InvalidInput("truncated matrix body")
    arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
    return arr.reshape(rows, cols).astype(np.float64), offset + nbytes


def write_matrix(path, a) -> None:
    Path(path).write_bytes(matrix_to_bytes(a))


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    a, end = matrix_from_bytes(data)
    if end != len(data):
        raise InvalidInput(f"{path}: trailing bytes after matrix")
    return a


def matrix_to_csv(a) -> str:
    buf = io.StringIO()
    for row in as_matrix(a):
        buf.write(",".join(repr(float(v)) for v in row))
        buf.write("\n")
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()]
    if len({len(r) for r in rows}) != 1:
        raise ShapeError("ragged CSV matrix")
    return as_matrix(rows)
