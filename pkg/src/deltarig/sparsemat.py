"""Canonical sparse matrix storage.

Triplets are kept sorted row-major by (row, col) with duplicates summed and
explicit zeros dropped, so equal matrices have equal storage and the binary
serialization is byte-stable. Heavy products run through scipy.sparse; results
are re-canonicalized on the way back in.
"""

from __future__ import annotations

import struct

import numpy as np
import scipy.sparse as _sp

from .errors import ArtifactError, DimensionMismatchError

_MAGIC = b"DRSPMTX1"
_VERSION = 1
_HEADER = struct.Struct("<8sII")  # magic, version, flags


class SparseMatrix:
    """Immutable sparse matrix in canonical triplet form.

    Do not mutate `rows`/`cols`/`vals` after construction; operations rely on
    the canonical ordering.
    """

    __slots__ = ("shape", "rows", "cols", "vals", "_csr")

    def __init__(self, shape: tuple[int, int], rows: np.ndarray,
                 cols: np.ndarray, vals: np.ndarray, _canonical: bool = False):
        nr, nc = int(shape[0]), int(shape[1])
        if nr < 0 or nc < 0:
            raise DimensionMismatchError(f"negative shape {shape}")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise DimensionMismatchError("triplet arrays must be equal-length 1-D")
        if rows.size and (rows.min() < 0 or rows.max() >= nr
                          or cols.min() < 0 or cols.max() >= nc):
            raise DimensionMismatchError("triplet index out of range")
        if not _canonical:
            rows, cols, vals = _canonicalize(nr, nc, rows, cols, vals)
        self.shape = (nr, nc)
        self.rows = rows
        self.cols = cols
        self.vals = vals
        self._csr = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_triplets(cls, shape, rows, cols, vals) -> "SparseMatrix":
        """Build from unsorted triplets. Duplicates are summed, zeros dropped."""
        return cls(shape, rows, cols, vals)

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        coo = m.tocoo()
        return cls(coo.shape, coo.row, coo.col, coo.data)

    @classmethod
    def from_dense(cls, a: np.ndarray) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls(a.shape, r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls((n, n), idx, idx, np.ones(n), _canonical=True)

    # -- views -------------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def to_csr(self) -> _sp.csr_matrix:
        if self._csr is None:
            self._csr = _sp.csr_matrix(
                (self.vals, (self.rows, self.cols)), shape=self.shape)
        return self._csr

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    # -- algebra -----------------------------------------------------------

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Product with a vector (n,) or a stack of columns (n, k)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.shape[1]:
            raise DimensionMismatchError(
                f"matvec: operand has {x.shape[0]} rows, matrix has "
                f"{self.shape[1]} columns")
        return self.to_csr() @ x

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            if self.shape[1] != other.shape[0]:
                raise DimensionMismatchError(
                    f"matmul: {self.shape} @ {other.shape}")
            return SparseMatrix.from_scipy(self.to_csr() @ other.to_csr())
        return self.matvec(other)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix((self.shape[1], self.shape[0]),
                            self.cols, self.rows, self.vals)

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def scaled(self, s: float) -> "SparseMatrix":
        return SparseMatrix(self.shape, self.rows, self.cols, self.vals * s)

    def add(self, other: "SparseMatrix") -> "SparseMatrix":
        if self.shape != other.shape:
            raise DimensionMismatchError(f"add: {self.shape} + {other.shape}")
        return SparseMatrix(
            self.shape,
            np.concatenate([self.rows, other.rows]),
            np.concatenate([self.cols, other.cols]),
            np.concatenate([self.vals, other.vals]))

    def equals(self, other: "SparseMatrix") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.vals, other.vals))

    # -- serialization -----------------------------------------------------

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(_MAGIC, _VERSION, 0)
        counts = struct.pack("<QQQ", self.shape[0], self.shape[1], self.nnz)
        return b"".join([
            head, counts,
            self.rows.astype("<i8").tobytes(),
            self.cols.astype("<i8").tobytes(),
            self.vals.astype("<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SparseMatrix":
        if len(blob) < _HEADER.size + 24:
            raise ArtifactError("sparse matrix blob truncated")
        magic, version, _flags = _HEADER.unpack_from(blob, 0)
        if magic != _MAGIC:
            raise ArtifactError(f"bad sparse matrix magic {magic!r}")
        if version != _VERSION:
            raise ArtifactError(f"unsupported sparse matrix version {version}")
        nr, nc, nnz = struct.unpack_from("<QQQ", blob, _HEADER.size)
        off = _HEADER.size + 24
        need = off + nnz * (8 + 8 + 8)
        if len(blob) < need:
            raise ArtifactError("sparse matrix blob truncated")
        rows = np.frombuffer(blob, dtype="<i8", count=nnz, offset=off)
        cols = np.frombuffer(blob, dtype="<i8", count=nnz, offset=off + 8 * nnz)
        vals = np.frombuffer(blob, dtype="<f8", count=nnz, offset=off + 16 * nnz)
        # round trip of canonical storage is already canonical
        return cls((nr, nc), rows.copy(), cols.copy(), vals.copy(),
                   _canonical=True)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SparseMatrix":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def _canonicalize(nr, nc, rows, cols, vals):
    """Sort row-major, sum duplicates, drop exact zeros."""
    if rows.size == 0:
        return rows, cols, vals
    key = rows * nc + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    vals = vals[order]
    uniq, start = np.unique(key, return_index=True)
    summed = np.add.reduceat(vals, start)
    keep = summed != 0.0
    uniq = uniq[keep]
    summed = summed[keep]
    return (uniq // nc).astype(np.int64), (uniq % nc).astype(np.int64), summed
