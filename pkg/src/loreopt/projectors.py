"""Subspace selection: low-rank projectors and sparse masks.

Five strategies are provided:

* ``SVD`` -- top-r singular vectors of a gradient (GaLore),
* ``STIEFEL`` -- uniform draw from the Stiefel manifold (GoLore),
* ``GAUSSIAN`` -- i.i.d. N(0, 1/r) entries, not orthonormal (Flora-style),
* ``TOPK`` -- mask of the k largest-magnitude entries (GaSare),
* ``RANDK`` -- uniformly random k-subset mask (GoSare).

A low-rank projector on the ``LEFT`` side maps ``G -> P^T G`` (r x n) and lifts
``R -> P R``; on the ``RIGHT`` side it maps ``G -> G Q`` (m x r) and lifts
``R -> R Q^T``. A sparse mask maps and lifts by the Hadamard product.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DegenerateInput, InvalidInput, InvalidRank, ShapeError
from .linalg import (
    RandomSource,
    as_matrix,
    gaussian_matrix,
    matrix_from_bytes,
    matrix_to_bytes,
    orthonormalize,
    svd_full,
)


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class ProjectorKind(str, enum.Enum):
    SVD = "svd"
    STIEFEL = "stiefel"
    GAUSSIAN = "gaussian"
    TOPK = "topk"
    RANDK = "randk"

    @property
    def sparse(self) -> bool:
        return self in (ProjectorKind.TOPK, ProjectorKind.RANDK)


def default_side(m: int, n: int) -> Side:
    return Side.LEFT if m <= n else Side.RIGHT


@dataclass(frozen=True, eq=False)
class LowRankProjector:
    factor: np.ndarray
    side: Side
    kind: ProjectorKind

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def dim(self) -> int:
        """Length of the side the factor acts on (m for LEFT, n for RIGHT)."""
        return self.factor.shape[0]

    def subspace_shape(self, m: int, n: int) -> tuple[int, int]:
        return (self.rank, n) if self.side is Side.LEFT else (m, self.rank)


@dataclass(frozen=True, eq=False)
class SparseMask:
    mask: np.ndarray
    kind: ProjectorKind

    @property
    def cardinality(self) -> int:
        return int(self.mask.sum())

    def subspace_shape(self, m: int, n: int) -> tuple[int, int]:
        return self.mask.shape


Projector = Union[LowRankProjector, SparseMask]


def _check_rank(r: int, limit: int, what: str = "rank") -> None:
    if not (1 <= r <= limit):
        raise InvalidRank(f"{what} must lie in [1, {limit}], got {r}")


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------

def fit_svd_projector(G, r: int, side: Side | None = None) -> LowRankProjector:
    """Top-``r`` left (or right) singular vectors of ``G``.

    ``r = min(m, n)`` is accepted so that the full-rank reduction can be
    exercised; genuine subspace training uses ``r < min(m, n)``.
    """
    G = as_matrix(G, "G")
    m, n = G.shape
    side = Side(side) if side is not None else default_side(m, n)
    _check_rank(r, min(m, n))
    U, _, V = svd_full(G)
    factor = U[:, :r] if side is Side.LEFT else V[:, :r]
    return LowRankProjector(np.ascontiguousarray(factor), side, ProjectorKind.SVD)


def sample_uniform_stiefel(dim: int, r: int, rng: RandomSource,
                           side: Side = Side.LEFT) -> LowRankProjector:
    """Uniform draw on St(dim, r) as the polar factor of a Gaussian matrix."""
    _check_rank(r, dim)
    for attempt in range(2):
        Z = gaussian_matrix(dim, r, rng.split(attempt) if attempt else rng)
        try:
            return LowRankProjector(orthonormalize(Z), Side(side), ProjectorKind.STIEFEL)
        except DegenerateInput:
            continue
    raise DegenerateInput("Gaussian draw rank deficient twice")


def sample_gaussian_projector(dim: int, r: int, rng: RandomSource,
                              side: Side = Side.LEFT) -> LowRankProjector:
    _check_rank(r, dim)
    factor = gaussian_matrix(dim, r, rng) / np.sqrt(r)
    return LowRankProjector(factor, Side(side), ProjectorKind.GAUSSIAN)


def topk_mask(G, k: int) -> SparseMask:
    """Mask of the ``k`` entries of largest magnitude; ties go to the earliest
    row-major index."""
    G = as_matrix(G, "G")
    size = G.size
    if not (1 <= k < size):
        raise InvalidRank(f"k must lie in [1, {size - 1}], got {k}")
    order = np.argsort(-np.abs(G).ravel(), kind="stable")
    flat = np.zeros(size)
    flat[order[:k]] = 1.0
    return SparseMask(flat.reshape(G.shape), ProjectorKind.TOPK)


def sample_rand_mask(m: int, n: int, k: int, rng: RandomSource) -> SparseMask:
    """Uniformly random k-subset of the m*n positions (partial Fisher-Yates)."""
    size = m * n
    if m < 1 or n < 1:
        raise InvalidInput(f"dimensions must be positive, got ({m}, {n})")
    if not (1 <= k < size):
        raise InvalidRank(f"k must lie in [1, {size - 1}], got {k}")
    gen = rng.generator()
    idx = np.arange(size)
    swaps = gen.integers(np.arange(k), size)
    for i, j in enumerate(swaps):
        idx[i], idx[j] = idx[j], idx[i]
    flat = np.zeros(size)
    flat[idx[:k]] = 1.0
    return SparseMask(flat.reshape(m, n), ProjectorKind.RANDK)


# ---------------------------------------------------------------------------
# Apply
# ---------------------------------------------------------------------------

def project(G, p: Projector) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if isinstance(p, SparseMask):
        if G.shape != p.mask.shape:
            raise ShapeError(f"mask shape {p.mask.shape} does not match {G.shape}")
        return p.mask * G
    if G.ndim != 2:
        raise ShapeError("G must be 2-D")
    if p.side is Side.LEFT:
        if G.shape[0] != p.dim:
            raise ShapeError(f"left projector of dim {p.dim} cannot act on {G.shape}")
        return p.factor.T @ G
    if G.shape[1] != p.dim:
        raise ShapeError(f"right projector of dim {p.dim} cannot act on {G.shape}")
    return G @ p.factor


def lift(R, p: Projector) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if isinstance(p, SparseMask):
        if R.shape != p.mask.shape:
            raise ShapeError(f"mask shape {p.mask.shape} does not match {R.shape}")
        return p.mask * R
    if R.ndim != 2:
        raise ShapeError("R must be 2-D")
    if p.side is Side.LEFT:
        if R.shape[0] != p.rank:
            raise ShapeError(f"expected {p.rank} rows in subspace matrix, got {R.shape}")
        return p.factor @ R
    if R.shape[1] != p.rank:
        raise ShapeError(f"expected {p.rank} columns in subspace matrix, got {R.shape}")
    return R @ p.factor.T


def transport(M, new: Projector, old: Projector) -> np.ndarray:
    """Re-express subspace state ``M`` from ``old``'s coordinates in ``new``'s.

    Low-rank LEFT: ``P_new^T P_old M``; RIGHT: ``M Q_old^T Q_new``;
    sparse: ``S_new * M``.
    """
    M = np.asarray(M, dtype=np.float64)
    if isinstance(new, SparseMask):
        return project(M, new)
    if isinstance(old, SparseMask) or new.side is not old.side or new.dim != old.dim:
        raise ShapeError("cannot transport momentum between incompatible projectors")
    if new.side is Side.LEFT:
        return new.factor.T @ (old.factor @ M)
    return (M @ old.factor.T) @ new.factor


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_KIND_CODES = {kind: i for i, kind in enumerate(ProjectorKind)}
_SIDE_CODES = {Side.LEFT: 0, Side.RIGHT: 1}
_PROJ_HEADER = struct.Struct("<4sBBQ")
_MAGIC = b"LOPJ"


def projector_to_bytes(p: Projector) -> bytes:
    """Kind tag, side, rank or cardinality, then the factor/mask matrix."""
    if isinstance(p, SparseMask):
        header = _PROJ_HEADER.pack(_MAGIC, _KIND_CODES[p.kind], 255, p.cardinality)
        return header + matrix_to_bytes(p.mask)
    header = _PROJ_HEADER.pack(_MAGIC, _KIND_CODES[p.kind], _SIDE_CODES[p.side], p.rank)
    return header + matrix_to_bytes(p.factor)


def projector_from_bytes(data: bytes) -> Projector:
    if len(data) < _PROJ_HEADER.size:
        raise InvalidInput("truncated projector header")
    magic, kind_code, side_code, count = _PROJ_HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise InvalidInput("not a projector blob")
    kind = list(ProjectorKind)[kind_code]
    body, _ = matrix_from_bytes(data, _PROJ_HEADER.size)
    if kind.sparse:
        mask = SparseMask(body, kind)
        if mask.cardinality != count:
            raise InvalidInput("mask cardinality does not match header")
        return mask
    side = Side.LEFT if side_code == 0 else Side.RIGHT
    if body.shape[1] != count:
        raise InvalidInput("factor rank does not match header")
    return LowRankProjector(body, side, kind)
