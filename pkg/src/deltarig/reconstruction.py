"""Anchor-constrained least-squares surface reconstruction.

The augmented system stacks the integer-weight symmetric Laplacian over one
selector row per anchor. Its normal matrix is factored once per (mesh, anchor
set); each pose is then recovered with exactly two triangular solves per
coordinate channel against the degree-weighted differential right-hand side.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as _sp
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee
from scipy.sparse.linalg import spsolve_triangular

from .errors import (AnchorCoverageError, AnchorError, ArtifactError,
                     ConfigError, DimensionMismatchError, RankDeficiencyError)
from .mesh import Mesh, VertexField, symmetric_laplacian
from .sparsemat import SparseMatrix


class AnchorSet:
    """Anchor vertex indices with per-anchor positive weights.

    Indices are kept sorted ascending (weights permuted alongside), so two
    sets with the same content serialize identically.
    """

    def __init__(self, indices, weights=None):
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if weights is None:
            w = np.ones(idx.size)
        else:
            w = np.asarray(weights, dtype=np.float64).ravel()
        if w.shape != idx.shape:
            raise AnchorError(
                f"{idx.size} indices but {w.size} weights")
        if idx.size and idx.min() < 0:
            raise AnchorError(f"negative anchor index {idx.min()}")
        if np.unique(idx).size != idx.size:
            raise AnchorError("duplicate anchor indices")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise AnchorError("anchor weights must be positive and finite")
        order = np.argsort(idx)
        self.indices = idx[order]
        self.weights = w[order]
        self.indices.flags.writeable = False
        self.weights.flags.writeable = False

    def __len__(self):
        return int(self.indices.size)

    def to_json(self) -> str:
        return json.dumps({"indices": self.indices.tolist(),
                           "weights": self.weights.tolist()},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnchorSet":
        try:
            obj = json.loads(text)
            return cls(obj["indices"], obj.get("weights"))
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactError(f"bad anchor set JSON: {e}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "AnchorSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def augment(L_s: SparseMatrix, anchors: AnchorSet, omega: float = 1.0) -> SparseMatrix:
    """Stack weighted anchor selector rows under the symmetric Laplacian.

    Validates that every connected component of the graph encoded by L_s
    contains at least one anchor; a component with none leaves the normal
    matrix singular, which is caught here rather than at factor time.
    """
    n = L_s.shape[0]
    if L_s.shape[0] != L_s.shape[1]:
        raise DimensionMismatchError(f"L_s must be square, got {L_s.shape}")
    if len(anchors) == 0:
        raise AnchorError("anchor set is empty; reconstruction needs at "
                          "least one anchor per connected component")
    if anchors.indices.max() >= n:
        raise AnchorError(
            f"anchor index {anchors.indices.max()} out of range for n={n}")
    if not (omega > 0 and np.isfinite(omega)):
        raise ConfigError(f"omega must be positive and finite, got {omega}")

    off = L_s.rows != L_s.cols
    graph = _sp.csr_matrix(
        (np.ones(int(off.sum())), (L_s.rows[off], L_s.cols[off])), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    covered = np.zeros(n_comp, dtype=bool)
    covered[labels[anchors.indices]] = True
    if not covered.all():
        missing = np.nonzero(~covered)[0]
        raise AnchorCoverageError(
            f"{missing.size} connected component(s) have no anchor "
            f"(component ids {missing[:8].tolist()})")

    p = len(anchors)
    rows = np.concatenate([L_s.rows, n + np.arange(p, dtype=np.int64)])
    cols = np.concatenate([L_s.cols, anchors.indices])
    vals = np.concatenate([L_s.vals, omega * anchors.weights])
    return SparseMatrix((n + p, n), rows, cols, vals)


@dataclass
class FactorizedSystem:
    """One-time Cholesky factorization of the anchored normal matrix.

    factor is upper triangular in the permuted ordering:
    R^T R = P (A^T A) P^T where A is the augmented matrix and P the recorded
    fill-reducing permutation. Immutable once built.
    """

    augmented: SparseMatrix
    factor: SparseMatrix
    perm: np.ndarray
    degrees: np.ndarray
    anchors: AnchorSet
    omega: float
    mesh_hash: str

    def __post_init__(self):
        self.n = self.augmented.shape[1]
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        self._inv_perm = inv
        self._upper = self.factor.to_csr()
        self._lower = self._upper.T.tocsr()

    def solve_normal(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (A^T A) x = rhs with two triangular substitutions per
        right-hand-side column. No refactorization happens here."""
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.n:
            raise DimensionMismatchError(
                f"rhs has {rhs.shape[0]} rows, system has {self.n}")
        bp = rhs[self.perm]
        y = spsolve_triangular(self._lower, bp, lower=True)
        xp = spsolve_triangular(self._upper, y, lower=False)
        out = np.empty_like(xp)
        out[self.perm] = xp
        return out

    def apply_normal(self, x: np.ndarray) -> np.ndarray:
        a = self.augmented.to_csr()
        return a.T @ (a @ x)

    def probe_residual(self, probes: int = 5, seed: int = 0) -> float:
        """Max relative error of R^T R against the normal matrix on random
        probe vectors, permutation accounted for."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            v = rng.standard_normal(self.n)
            want = self.apply_normal(v)
            got = np.empty_like(v)
            got[self.perm] = self._lower @ (self._upper @ v[self.perm])
            denom = max(float(np.linalg.norm(want)), 1e-300)
            worst = max(worst, float(np.linalg.norm(got - want)) / denom)
        return worst

    # -- serialization ------------------------------------------------------

    _MAGIC = b"DRFACSYS"
    _VERSION = 1

    def to_bytes(self) -> bytes:
        aug = self.augmented.to_bytes()
        fac = self.factor.to_bytes()
        hash_b = self.mesh_hash.encode("ascii")
        parts = [
            struct.pack("<8sII", self._MAGIC, self._VERSION, 0),
            struct.pack("<QQQd", self.n, len(self.anchors), len(hash_b),
                        self.omega),
            hash_b,
            self.perm.astype("<i8").tobytes(),
            self.degrees.astype("<i8").tobytes(),
            self.anchors.indices.astype("<i8").tobytes(),
            self.anchors.weights.astype("<f8").tobytes(),
            struct.pack("<QQ", len(aug), len(fac)),
            aug, fac,
        ]
        return b"".join(parts)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FactorizedSystem":
        try:
            magic, version, _ = struct.unpack_from("<8sII", blob, 0)
            if magic != cls._MAGIC:
                raise ArtifactError(f"bad factor cache magic {magic!r}")
            if version != cls._VERSION:
                raise ArtifactError(f"unsupported factor cache version {version}")
            off = 16
            n, p, hlen, omega = struct.unpack_from("<QQQd", blob, off)
            off += 32
            mesh_hash = blob[off:off + hlen].decode("ascii"); off += hlen
            perm = np.frombuffer(blob, "<i8", n, off).copy(); off += 8 * n
            degrees = np.frombuffer(blob, "<i8", n, off).copy(); off += 8 * n
            aidx = np.frombuffer(blob, "<i8", p, off).copy(); off += 8 * p
            aw = np.frombuffer(blob, "<f8", p, off).copy(); off += 8 * p
            la, lf = struct.unpack_from("<QQ", blob, off); off += 16
            aug = SparseMatrix.from_bytes(blob[off:off + la]); off += la
            fac = SparseMatrix.from_bytes(blob[off:off + lf])
        except (struct.error, IndexError, UnicodeDecodeError) as e:
            raise ArtifactError(f"bad factor cache: {e}")
        return cls(aug, fac, perm, degrees, AnchorSet(aidx, aw), omega,
                   mesh_hash)

    @classmethod
    def load(cls, path) -> "FactorizedSystem":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


_MINOR_RE = re.compile(r"(\d+)-th leading minor")


def factorize(augmented: SparseMatrix, anchors: AnchorSet,
              omega: float = 1.0, mesh_hash: str = "") -> FactorizedSystem:
    """Factor the normal matrix of the augmented system once.

    A deterministic reverse-Cuthill-McKee ordering keeps the triangular
    factor banded; fill outside the band is exact zero, so the sparse factor
    is recovered exactly from the dense LAPACK result. A non-positive pivot
    is reported as rank deficiency with the failing column in original
    vertex numbering.
    """
    n = augmented.shape[1]
    if augmented.shape[0] < n:
        raise DimensionMismatchError(
            f"augmented matrix {augmented.shape} has fewer rows than columns")
    a = augmented.to_csr()
    normal = (a.T @ a).tocsr()
    perm = np.asarray(reverse_cuthill_mckee(normal, symmetric_mode=True),
                      dtype=np.int64)
    dense = normal[perm][:, perm].toarray()
    try:
        upper = scipy.linalg.cholesky(dense, lower=False,
                                      check_finite=False)
    except scipy.linalg.LinAlgError as e:
        m = _MINOR_RE.search(str(e))
        col = None
        if m:
            col = int(perm[int(m.group(1)) - 1])
        raise RankDeficiencyError(
            "normal matrix is not positive definite"
            + (f"; first failing column {col}" if col is not None else "")
            + " (is every connected component anchored?)", column=col)
    factor = SparseMatrix.from_dense(upper)
    # diagonal of the top block of the augmented matrix is the degree matrix
    diag_mask = (augmented.rows == augmented.cols) & (augmented.rows < n)
    degrees = np.zeros(n, dtype=np.int64)
    degrees[augmented.rows[diag_mask]] = np.rint(
        augmented.vals[diag_mask]).astype(np.int64)
    return FactorizedSystem(augmented, factor, perm, degrees, anchors,
                            omega, mesh_hash)


def build_system(mesh: Mesh, anchors: AnchorSet,
                 omega: float = 1.0) -> FactorizedSystem:
    """Convenience: symmetric Laplacian -> augment -> factorize."""
    ls = symmetric_laplacian(mesh)
    aug = augment(ls, anchors, omega)
    return factorize(aug, anchors, omega, mesh_hash=mesh.content_hash())


def reconstruct(system: FactorizedSystem, delta: VertexField,
                anchor_positions: np.ndarray) -> VertexField:
    """Recover Cartesian per-vertex values from differential coordinates and
    anchor values.

    delta may be in 'differential' space (degree weighting applied here) or
    'differential_weighted' space (consumed as-is, the form networks emit).
    """
    if not isinstance(delta, VertexField):
        raise DimensionMismatchError("delta must be a VertexField")
    n = system.n
    if len(delta) != n:
        raise DimensionMismatchError(
            f"delta has {len(delta)} vertices, system has {n}")
    anchor_positions = np.asarray(anchor_positions, dtype=np.float64)
    p = len(system.anchors)
    if anchor_positions.shape != (p, 3):
        raise DimensionMismatchError(
            f"anchor positions {anchor_positions.shape}, expected ({p}, 3)")
    if delta.space == "differential":
        top = delta.values * system.degrees[:, None]
    elif delta.space == "differential_weighted":
        top = delta.values
    else:
        raise DimensionMismatchError(
            f"delta field in {delta.space!r} space; need differential")
    w = system.omega * system.anchors.weights
    stacked = np.vstack([top, w[:, None] * anchor_positions])
    rhs = system.augmented.to_csr().T @ stacked
    return VertexField(system.solve_normal(rhs), space="cartesian")


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues ascending; eigenvectors[:, k] pairs with eigenvalues[k]."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


_DENSE_LIMIT = 2000


def eigen_analysis(matrix: SparseMatrix) -> EigenDecomposition:
    """Dense symmetric eigendecomposition. Analysis path for small systems;
    refuses n > 2000 rather than silently grinding."""
    n = matrix.shape[0]
    if matrix.shape[0] != matrix.shape[1]:
        raise DimensionMismatchError(f"matrix must be square, got {matrix.shape}")
    if n > _DENSE_LIMIT:
        raise ConfigError(
            f"eigen_analysis is a dense path limited to n <= {_DENSE_LIMIT}; "
            f"got n = {n}")
    dense = matrix.to_dense()
    asym = float(np.max(np.abs(dense - dense.T))) if n else 0.0
    scale = float(np.max(np.abs(dense))) if n else 0.0
    if asym > 1e-10 * max(scale, 1.0):
        raise DimensionMismatchError(
            f"matrix is not symmetric (max asymmetry {asym:g})")
    w, v = np.linalg.eigh(dense)
    return EigenDecomposition(w, v)


def anchored_normal_matrix(mesh: Mesh, anchors: AnchorSet,
                           omega: float = 1.0) -> SparseMatrix:
    aug = augment(symmetric_laplacian(mesh), anchors, omega)
    csr = aug.to_csr()
    return SparseMatrix.from_scipy(csr.T @ csr)


def spectral_amplification(mesh: Mesh, anchors: AnchorSet,
                           k: int | None = None,
                           omega: float = 1.0) -> float | np.ndarray:
    """Amplification of unit eigen-mode noise injected into the anchored
    solve's right-hand side.

    Mode k of the anchored normal operator comes back scaled by exactly
    1/lambda_k, which is what makes high-frequency prediction error shrink
    through reconstruction while anchors hold the low end. Returns the ratio
    for mode k, or all modes when k is None.
    """
    normal = anchored_normal_matrix(mesh, anchors, omega)
    eig = eigen_analysis(normal)
    system = build_system(mesh, anchors, omega)
    modes = list(range(mesh.n_vertices)) if k is None else [int(k)]
    out = np.empty(len(modes))
    for j, mode in enumerate(modes):
        if mode < 0 or mode >= mesh.n_vertices:
            raise ConfigError(f"mode index {mode} out of range")
        e = eig.eigenvectors[:, mode]
        x = system.solve_normal(e)
        out[j] = np.linalg.norm(x) / np.linalg.norm(e)
    return out if k is None else float(out[0])


def condition_report(mesh: Mesh, anchors: AnchorSet | None = None,
                     omega: float = 1.0) -> tuple[float, float]:
    """(sigma_min, sigma_max) of the anchored rectangular system, dense SVD.

    With no anchors this is the bare symmetric Laplacian, whose smallest
    singular value is zero on any mesh (constant null space). Adding anchors
    can only raise sigma_min.
    """
    n = mesh.n_vertices
    if n > _DENSE_LIMIT:
        raise ConfigError(
            f"condition_report is a dense path limited to n <= {_DENSE_LIMIT}")
    ls = symmetric_laplacian(mesh)
    if anchors is None or len(anchors) == 0:
        dense = ls.to_dense()
    else:
        dense = augment(ls, anchors, omega).to_dense()
    sv = np.linalg.svd(dense, compute_uv=False)
    return float(sv[-1]), float(sv[0])
