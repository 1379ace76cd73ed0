"""Mesh container, OBJ round trip, and uniform-Laplacian operators.

Connectivity is the undirected edge set induced by face boundaries. Quads
contribute their four boundary edges only; the diagonal is never an edge.
Vertex order follows the source OBJ and is authoritative everywhere else in
the package (anchors, fields, factorizations).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as _sp
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatchError, MeshFormatError, MeshStructureError
from .sparsemat import SparseMatrix

FIELD_SPACES = ("cartesian", "differential", "differential_weighted")


@dataclass(frozen=True)
class VertexField:
    """Per-vertex 3-vectors tagged with the space they live in."""

    values: np.ndarray
    space: str = "cartesian"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DimensionMismatchError(
                f"vertex field must be (n, 3), got {v.shape}")
        if self.space not in FIELD_SPACES:
            raise DimensionMismatchError(f"unknown field space {self.space!r}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


class Mesh:
    """Immutable vertex/face container with precomputed adjacency.

    vertices: (n, 3) float64 rest positions.
    faces: tuple of index tuples, each of length 3 or 4.
    """

    def __init__(self, vertices: np.ndarray, faces):
        v = np.array(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DimensionMismatchError(
                f"vertices must be (n, 3), got {v.shape}")
        n = v.shape[0]
        clean = []
        for fi, face in enumerate(faces):
            face = tuple(int(i) for i in face)
            if len(face) not in (3, 4):
                raise MeshStructureError(
                    f"face {fi} has {len(face)} vertices; only triangles and "
                    "quads are supported")
            if len(set(face)) != len(face):
                raise MeshStructureError(f"face {fi} repeats a vertex: {face}")
            for i in face:
                if i < 0 or i >= n:
                    raise MeshStructureError(
                        f"face {fi} references vertex {i} out of range 0..{n - 1}")
            clean.append(face)

        self.vertices = v
        self.vertices.flags.writeable = False
        self.faces = tuple(clean)
        self._build_adjacency()

    def _build_adjacency(self):
        n = self.n_vertices
        src, dst = [], []
        for face in self.faces:
            k = len(face)
            for a in range(k):
                i, j = face[a], face[(a + 1) % k]
                src.append(i); dst.append(j)
                src.append(j); dst.append(i)
        if src:
            pairs = np.unique(
                np.stack([np.asarray(src, dtype=np.int64),
                          np.asarray(dst, dtype=np.int64)], axis=1), axis=0)
            src, dst = pairs[:, 0], pairs[:, 1]
        else:
            src = np.zeros(0, dtype=np.int64)
            dst = np.zeros(0, dtype=np.int64)
        adj = _sp.csr_matrix(
            (np.ones(src.size), (src, dst)), shape=(n, n))
        deg = np.asarray(adj.sum(axis=1)).ravel().astype(np.int64)
        isolated = np.nonzero(deg == 0)[0]
        if isolated.size:
            listed = ", ".join(str(i) for i in isolated[:8])
            more = "" if isolated.size <= 8 else f" (+{isolated.size - 8} more)"
            raise MeshStructureError(
                f"isolated vertices with no incident edge: {listed}{more}")
        self._adj = adj
        self.degrees = deg
        self.degrees.flags.writeable = False
        self.neighbor_ptr = adj.indptr.astype(np.int64)
        self.neighbor_idx = adj.indices.astype(np.int64)
        self.neighbor_ptr.flags.writeable = False
        self.neighbor_idx.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_idx[self.neighbor_ptr[i]:self.neighbor_ptr[i + 1]]

    def adjacency(self) -> SparseMatrix:
        return SparseMatrix.from_scipy(self._adj)

    def component_count(self) -> int:
        count, _ = connected_components(self._adj, directed=False)
        return int(count)

    def component_labels(self) -> np.ndarray:
        _, labels = connected_components(self._adj, directed=False)
        return labels

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def content_hash(self) -> str:
        """sha256 over exact vertex bytes and face indices."""
        h = hashlib.sha256()
        h.update(b"deltarig-mesh-v1")
        h.update(np.int64(self.n_vertices).tobytes())
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(np.int64(len(self.faces)).tobytes())
        for face in self.faces:
            h.update(np.asarray((len(face),) + face, dtype="<i8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"Mesh(n_vertices={self.n_vertices}, n_faces={len(self.faces)})"


def face_height(mesh: Mesh) -> float:
    """Vertical (y) extent of the rest bounding box, in model units."""
    lo, hi = mesh.bbox()
    return float(hi[1] - lo[1])


# -- OBJ round trip ---------------------------------------------------------

def load_obj(path) -> Mesh:
    """Parse an ASCII OBJ. Only v and f records are consumed; v lines may
    carry the 6-float vertex-color extension. Indices are 1-based."""
    verts = []
    colors = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                vals = tok[1:]
                if len(vals) not in (3, 6):
                    raise MeshFormatError(
                        f"vertex record needs 3 coords (or 3+3 with color), "
                        f"got {len(vals)}", line=lineno)
                try:
                    nums = [float(t) for t in vals]
                except ValueError as e:
                    raise MeshFormatError(f"bad vertex number: {e}", line=lineno)
                verts.append(nums[:3])
                colors.append(nums[3:] if len(nums) == 6 else None)
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise MeshFormatError(
                        f"face needs at least 3 indices, got {len(tok) - 1}",
                        line=lineno)
                idx = []
                for t in tok[1:]:
                    head = t.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise MeshFormatError(
                            f"bad face index {t!r}", line=lineno)
                    if i <= 0:
                        raise MeshFormatError(
                            f"nonpositive face index {i}", line=lineno)
                    if i > len(verts):
                        raise MeshFormatError(
                            f"face index {i} exceeds vertex count {len(verts)}",
                            line=lineno)
                    idx.append(i - 1)
                if len(idx) not in (3, 4):
                    raise MeshFormatError(
                        f"face has {len(idx)} vertices; only triangles and "
                        "quads are supported", line=lineno)
                faces.append(tuple(idx))
            # every other record type is ignored
    if not verts:
        raise MeshFormatError(f"no vertex records in {path}")
    try:
        mesh = Mesh(np.asarray(verts, dtype=np.float64), faces)
    except MeshStructureError as e:
        raise MeshStructureError(f"{path}: {e}")
    if any(c is not None for c in colors):
        if any(c is None for c in colors):
            raise MeshFormatError(
                f"{path}: some vertex records carry colors and others do not")
        mesh.vertex_colors = np.asarray(colors, dtype=np.float64)
    return mesh


def _fmt(x: float) -> str:
    # repr gives the shortest digits that round-trip exactly
    return repr(float(x))


def save_obj(path, mesh: Mesh, positions: np.ndarray | None = None,
             vertex_colors: np.ndarray | None = None) -> None:
    """Write mesh connectivity with optional replacement positions and the
    vertex-color extension. Output bytes are a pure function of the inputs."""
    pos = mesh.vertices if positions is None else np.asarray(positions, float)
    if pos.shape != (mesh.n_vertices, 3):
        raise DimensionMismatchError(
            f"positions {pos.shape} do not match mesh ({mesh.n_vertices}, 3)")
    if vertex_colors is not None:
        vertex_colors = np.asarray(vertex_colors, dtype=np.float64)
        if vertex_colors.shape != (mesh.n_vertices, 3):
            raise DimensionMismatchError(
                f"colors {vertex_colors.shape} do not match mesh")
    lines = []
    for i in range(mesh.n_vertices):
        x, y, z = pos[i]
        if vertex_colors is None:
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}")
        else:
            r, g, b = vertex_colors[i]
            lines.append(f"v {_fmt(x)} {_fmt(y)} {_fmt(z)} "
                         f"{_fmt(r)} {_fmt(g)} {_fmt(b)}")
    for face in mesh.faces:
        lines.append("f " + " ".join(str(i + 1) for i in face))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- Laplacian operators ----------------------------------------------------

def degree_matrix(mesh: Mesh) -> SparseMatrix:
    idx = np.arange(mesh.n_vertices, dtype=np.int64)
    return SparseMatrix((mesh.n_vertices,) * 2, idx, idx,
                        mesh.degrees.astype(np.float64))


def symmetric_laplacian(mesh: Mesh) -> SparseMatrix:
    """D - A with integer-valued entries, so constant fields cancel exactly."""
    n = mesh.n_vertices
    adj = mesh._adj
    coo = adj.tocoo()
    rows = np.concatenate([np.arange(n, dtype=np.int64), coo.row])
    cols = np.concatenate([np.arange(n, dtype=np.int64), coo.col])
    vals = np.concatenate([mesh.degrees.astype(np.float64), -coo.data])
    return SparseMatrix((n, n), rows, cols, vals)


def uniform_laplacian(mesh: Mesh) -> SparseMatrix:
    """I - D^-1 A. Diagonal exactly 1, off-diagonals -1/d_i per row."""
    n = mesh.n_vertices
    coo = mesh._adj.tocoo()
    rows = np.concatenate([np.arange(n, dtype=np.int64), coo.row])
    cols = np.concatenate([np.arange(n, dtype=np.int64), coo.col])
    offdiag = -1.0 / mesh.degrees[coo.row]
    vals = np.concatenate([np.ones(n), offdiag])
    return SparseMatrix((n, n), rows, cols, vals)


def to_differential(mesh: Mesh, field) -> VertexField:
    """Differential coordinates: delta_i = v_i - mean of v over neighbors.

    Direct gather form, independent of the sparse-product path through
    uniform_laplacian. For the all-ones field the neighbor sums are exact
    integers, so the result is exactly zero.
    """
    values = field.values if isinstance(field, VertexField) else np.asarray(field, float)
    if values.shape != (mesh.n_vertices, 3):
        raise DimensionMismatchError(
            f"field {values.shape} does not match mesh ({mesh.n_vertices}, 3)")
    sums = np.add.reduceat(values[mesh.neighbor_idx],
                           mesh.neighbor_ptr[:-1], axis=0)
    delta = values - sums / mesh.degrees[:, None]
    return VertexField(delta, space="differential")


def weighted_differential(mesh: Mesh, field) -> VertexField:
    """Degree-weighted differentials D*delta, the right-hand-side block the
    anchored solve consumes and the quantity the differential net learns.
    Computed as degrees times to_differential so the two stay bit-consistent.
    """
    delta = field if (isinstance(field, VertexField)
                      and field.space == "differential") \
        else to_differential(mesh, field)
    out = delta.values * mesh.degrees[:, None]
    return VertexField(out, space="differential_weighted")
