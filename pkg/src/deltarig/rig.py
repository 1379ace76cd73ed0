"""Rig abstraction: poses, feature vectors, and black-box probing.

A rig is any object exposing `spec`, `mesh`, and
`evaluate(pose, injected_offsets=None, replace_point=None) -> (n, 3)`.
Everything here treats evaluation as a black box: per-vertex affine
transforms are recovered by probing, and the nonlinear residual is whatever
the affine part cannot explain.

Joint transforms in a Pose are rest-relative (identity at rest), so blending
them with skin weights directly yields each vertex's linear transform and the
rest pose vectorizes to identity rotation blocks with zero translations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import dijkstra
from scipy.stats import truncnorm
import scipy.sparse as _sp

from .errors import (AnchorError, ConfigError, DimensionMismatchError,
                     SingularTransformError)
from .mesh import Mesh, face_height, to_differential
from .reconstruction import AnchorSet

log = logging.getLogger(__name__)

CHANNELS_PER_JOINT = 6  # rx ry rz tx ty tz
FEATURES_PER_JOINT = 12  # 3x3 linear block + 3 translations


@dataclass(frozen=True)
class RigSpec:
    """Static description of a rig's control space.

    Ranges are (min, max) in native units: radians for joint rotations,
    model units for translations, arbitrary for numeric controls.
    """

    joint_pivots: np.ndarray        # (j, 3)
    joint_rot_ranges: np.ndarray    # (j, 3, 2)
    joint_trans_ranges: np.ndarray  # (j, 3, 2)
    numeric_ranges: np.ndarray      # (c, 2)
    mesh_hash: str = ""

    def __post_init__(self):
        pv = np.asarray(self.joint_pivots, dtype=np.float64)
        rr = np.asarray(self.joint_rot_ranges, dtype=np.float64)
        tr = np.asarray(self.joint_trans_ranges, dtype=np.float64)
        nr = np.asarray(self.numeric_ranges, dtype=np.float64).reshape(-1, 2)
        j = pv.shape[0]
        if pv.shape != (j, 3) or rr.shape != (j, 3, 2) or tr.shape != (j, 3, 2):
            raise ConfigError("inconsistent joint array shapes in rig spec")
        for name, r in (("rotation", rr), ("translation", tr), ("numeric", nr)):
            if r.size and np.any(r[..., 1] < r[..., 0]):
                raise ConfigError(f"{name} range with max < min")
        for a in (pv, rr, tr, nr):
            a.flags.writeable = False
        object.__setattr__(self, "joint_pivots", pv)
        object.__setattr__(self, "joint_rot_ranges", rr)
        object.__setattr__(self, "joint_trans_ranges", tr)
        object.__setattr__(self, "numeric_ranges", nr)

    @property
    def joint_count(self) -> int:
        return self.joint_pivots.shape[0]

    @property
    def numeric_count(self) -> int:
        return self.numeric_ranges.shape[0]

    @property
    def feature_dim(self) -> int:
        return FEATURES_PER_JOINT * self.joint_count + self.numeric_count

    @property
    def control_count(self) -> int:
        return CHANNELS_PER_JOINT * self.joint_count + self.numeric_count

    def control_ranges(self) -> np.ndarray:
        """(control_count, 2) ranges in canonical control order: per joint
        rx ry rz tx ty tz, then numeric controls."""
        j = self.joint_count
        out = np.empty((self.control_count, 2))
        blocks = np.concatenate(
            [self.joint_rot_ranges, self.joint_trans_ranges], axis=1)  # (j,6,2)
        out[:CHANNELS_PER_JOINT * j] = blocks.reshape(-1, 2)
        out[CHANNELS_PER_JOINT * j:] = self.numeric_ranges
        return out

    def to_dict(self) -> dict:
        return {
            "joint_pivots": self.joint_pivots.tolist(),
            "joint_rot_ranges": self.joint_rot_ranges.tolist(),
            "joint_trans_ranges": self.joint_trans_ranges.tolist(),
            "numeric_ranges": self.numeric_ranges.tolist(),
            "mesh_hash": self.mesh_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        return cls(np.asarray(d["joint_pivots"], float),
                   np.asarray(d["joint_rot_ranges"], float),
                   np.asarray(d["joint_trans_ranges"], float),
                   np.asarray(d["numeric_ranges"], float).reshape(-1, 2),
                   d.get("mesh_hash", ""))


@dataclass
class Pose:
    """One configuration of the rig.

    joint_transforms: (j, 3, 4) rest-relative affines.
    numeric_values: (c,).
    channels: (6j,) native joint channel values when the pose came from the
    sampler; hand-built poses may leave it None (influence probing needs it).
    """

    joint_transforms: np.ndarray
    numeric_values: np.ndarray
    channels: np.ndarray | None = None
    pose_id: str = ""

    def __post_init__(self):
        self.joint_transforms = np.asarray(self.joint_transforms, float)
        self.numeric_values = np.asarray(self.numeric_values, float).ravel()
        if self.joint_transforms.ndim != 3 or \
                self.joint_transforms.shape[1:] != (3, 4):
            raise DimensionMismatchError(
                f"joint_transforms must be (j, 3, 4), got "
                f"{self.joint_transforms.shape}")
        if self.channels is not None:
            self.channels = np.asarray(self.channels, float).ravel()


def rest_pose(spec: RigSpec) -> Pose:
    j = spec.joint_count
    q = np.zeros((j, 3, 4))
    q[:, :, :3] = np.eye(3)
    return Pose(q, np.zeros(spec.numeric_count),
                channels=np.zeros(CHANNELS_PER_JOINT * j), pose_id="rest")


def _rot_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Composed intrinsic X-Y-Z rotation, R = Rx @ Ry @ Rz."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx_m @ ry_m @ rz_m


def compose_pose(spec: RigSpec, joint_channels: np.ndarray,
                 numeric_values: np.ndarray, pose_id: str = "") -> Pose:
    """Build rest-relative joint affines from native channels.

    Each joint rotates about its pivot then translates:
    v -> R (v - p) + p + dt, i.e. Q = [R | (I - R) p + dt].
    """
    ch = np.asarray(joint_channels, dtype=np.float64).reshape(
        spec.joint_count, CHANNELS_PER_JOINT)
    nv = np.asarray(numeric_values, dtype=np.float64).ravel()
    if nv.size != spec.numeric_count:
        raise DimensionMismatchError(
            f"{nv.size} numeric values for spec with {spec.numeric_count}")
    q = np.empty((spec.joint_count, 3, 4))
    for k in range(spec.joint_count):
        r = _rot_xyz(*ch[k, :3])
        p = spec.joint_pivots[k]
        q[k, :, :3] = r
        q[k, :, 3] = p - r @ p + ch[k, 3:]
    # channels holds the full native control vector in control_ranges order
    return Pose(q, nv, channels=np.concatenate([ch.ravel(), nv]),
                pose_id=pose_id)


def sample_pose(spec: RigSpec, seed, pose_id: str = "") -> Pose:
    """Draw one pose: every channel is an independent truncated Gaussian
    centered on its range midpoint with sigma = range/4, truncated to the
    range (so all values land in [min, max] by construction). Joint rotations
    are per-axis Euler angles composed X then Y then Z."""
    rng = np.random.default_rng(seed)
    ranges = spec.control_ranges()
    lo, hi = ranges[:, 0], ranges[:, 1]
    mid = 0.5 * (lo + hi)
    sigma = (hi - lo) / 4.0
    live = sigma > 0
    vals = mid.copy()
    if live.any():
        vals[live] = truncnorm.rvs(-2.0, 2.0, loc=mid[live],
                                   scale=sigma[live],
                                   size=int(live.sum()), random_state=rng)
    njc = CHANNELS_PER_JOINT * spec.joint_count
    return compose_pose(spec, vals[:njc], vals[njc:], pose_id=pose_id)


# -- feature vectorization ---------------------------------------------------

@dataclass
class Normalization:
    """Feature scaling fitted on the training split only.

    Joint translations divide by one global scale (max |t| over the training
    set); numeric controls map min-max to [-1, 1] per control.
    """

    translation_scale: float
    numeric_offset: np.ndarray
    numeric_scale: np.ndarray

    def __post_init__(self):
        self.numeric_offset = np.asarray(self.numeric_offset, float).ravel()
        self.numeric_scale = np.asarray(self.numeric_scale, float).ravel()
        if self.translation_scale <= 0:
            raise ConfigError("translation_scale must be positive")
        if np.any(self.numeric_scale <= 0):
            raise ConfigError("numeric scales must be positive")

    @classmethod
    def fit(cls, poses) -> "Normalization":
        tmax = 0.0
        cmin = None
        cmax = None
        for pose in poses:
            t = np.abs(pose.joint_transforms[:, :, 3])
            if t.size:
                tmax = max(tmax, float(t.max()))
            v = pose.numeric_values
            cmin = v.copy() if cmin is None else np.minimum(cmin, v)
            cmax = v.copy() if cmax is None else np.maximum(cmax, v)
        if cmin is None:
            raise ConfigError("cannot fit normalization on zero poses")
        offset = 0.5 * (cmin + cmax)
        scale = 0.5 * (cmax - cmin)
        scale[scale <= 0] = 1.0  # frozen controls pass through centered
        return cls(tmax if tmax > 0 else 1.0, offset, scale)

    def to_dict(self) -> dict:
        return {"translation_scale": self.translation_scale,
                "numeric_offset": self.numeric_offset.tolist(),
                "numeric_scale": self.numeric_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(d["translation_scale"], np.asarray(d["numeric_offset"]),
                   np.asarray(d["numeric_scale"]))


def vectorize(pose: Pose, norm: Normalization) -> np.ndarray:
    """Flatten a pose to the network input layout: per joint the 9 linear
    entries then 3 scaled translations, then normalized numeric controls."""
    j = pose.joint_transforms.shape[0]
    c = pose.numeric_values.size
    if norm.numeric_offset.size != c:
        raise DimensionMismatchError(
            f"normalization fitted for {norm.numeric_offset.size} controls, "
            f"pose has {c}")
    out = np.empty(FEATURES_PER_JOINT * j + c)
    blocks = out[:FEATURES_PER_JOINT * j].reshape(j, FEATURES_PER_JOINT)
    blocks[:, :9] = pose.joint_transforms[:, :, :3].reshape(j, 9)
    blocks[:, 9:] = pose.joint_transforms[:, :, 3] / norm.translation_scale
    out[FEATURES_PER_JOINT * j:] = \
        (pose.numeric_values - norm.numeric_offset) / norm.numeric_scale
    return out


def feature_indices_for_controls(spec: RigSpec, controls) -> np.ndarray:
    """Map native control indices to feature-vector indices: any channel of a
    joint pulls in that joint's full 12-feature block; a numeric control maps
    to its single feature slot."""
    nj = CHANNELS_PER_JOINT * spec.joint_count
    feats = set()
    for ch in controls:
        ch = int(ch)
        if ch < 0 or ch >= spec.control_count:
            raise ConfigError(f"control index {ch} out of range")
        if ch < nj:
            joint = ch // CHANNELS_PER_JOINT
            base = FEATURES_PER_JOINT * joint
            feats.update(range(base, base + FEATURES_PER_JOINT))
        else:
            feats.add(FEATURES_PER_JOINT * spec.joint_count + (ch - nj))
    return np.asarray(sorted(feats), dtype=np.int64)


# -- affine helpers ----------------------------------------------------------

def apply_affine(transforms: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply (n, 3, 4) affines to (n, 3) points."""
    return np.einsum("nab,nb->na", transforms[:, :, :3], points) \
        + transforms[:, :, 3]


# -- black-box probing -------------------------------------------------------

PROBE_OFFSET = 1.0  # model units; recovery is scale-invariant for affine rigs


def recover_T(rig, pose: Pose, vertex: int | None = None) -> np.ndarray:
    """Recover per-vertex affine transforms with five rig evaluations.

    Columns 1-3 come from unit-offset probes minus the base evaluation (the
    unknown nonlinear term cancels in the subtraction); column 4 is the
    origin probe through the replace_point injection. When the rig declares
    supports_batched_probes the five evaluations perturb every vertex at
    once; otherwise each vertex is probed separately.

    Returns (n, 3, 4), or (3, 4) when `vertex` is given.
    """
    n = rig.mesh.n_vertices
    if vertex is not None:
        t = _recover_single(rig, pose, int(vertex))
        return t
    if getattr(rig, "supports_batched_probes", False):
        base = rig.evaluate(pose)
        t = np.empty((n, 3, 4))
        for axis in range(3):
            off = np.zeros((n, 3))
            off[:, axis] = PROBE_OFFSET
            t[:, :, axis] = (rig.evaluate(pose, injected_offsets=off)
                             - base) / PROBE_OFFSET
        origin = np.zeros((n, 4))
        origin[:, 3] = 1.0
        t[:, :, 3] = rig.evaluate(pose, replace_point=origin)
        return t
    out = np.empty((n, 3, 4))
    for i in range(n):
        out[i] = _recover_single(rig, pose, i)
    return out


def _recover_single(rig, pose: Pose, i: int) -> np.ndarray:
    base = rig.evaluate(pose)[i]
    t = np.empty((3, 4))
    for axis in range(3):
        off = np.zeros(3)
        off[axis] = PROBE_OFFSET
        probed = rig.evaluate(pose, injected_offsets={i: off})[i]
        t[:, axis] = (probed - base) / PROBE_OFFSET
    t[:, 3] = rig.evaluate(pose, replace_point={i: (0.0, 0.0, 0.0, 1.0)})[i]
    return t


@dataclass
class DeformationSample:
    """One pose worth of training data."""

    pose: Pose
    nonlinear_local: np.ndarray           # (n, 3) cartesian v_nl per vertex
    nonlinear_delta: np.ndarray           # (n, 3) differential of the above
    features: np.ndarray | None = None    # filled once normalization is fitted
    anchor_targets: np.ndarray | None = None  # (|P|, 3) v_nl at anchor verts


_DET_FLOOR = 1e-9


def extract_nonlinear(rig, pose: Pose,
                      anchors: AnchorSet | None = None) -> DeformationSample:
    """Split the rig's output into linear transform and local nonlinear
    displacement: v_nl = T^-1(output) - rest.

    Raises SingularTransformError naming the vertex and pose when a recovered
    linear block is not invertible.
    """
    t = recover_T(rig, pose)
    x = t[:, :, :3]
    dets = np.linalg.det(x)
    bad = np.nonzero(np.abs(dets) < _DET_FLOOR)[0]
    if bad.size:
        raise SingularTransformError(
            f"vertex {int(bad[0])} has non-invertible linear transform "
            f"(|det| = {abs(dets[bad[0]]):.2e}) in pose "
            f"{pose.pose_id or '<unnamed>'}",
            vertex=int(bad[0]), pose_id=pose.pose_id)
    out = rig.evaluate(pose)
    local = np.linalg.solve(x, (out - t[:, :, 3])[:, :, None])[:, :, 0]
    v_nl = local - rig.mesh.vertices
    sample = DeformationSample(
        pose=pose,
        nonlinear_local=v_nl,
        nonlinear_delta=to_differential(rig.mesh, v_nl).values)
    if anchors is not None:
        sample.anchor_targets = v_nl[anchors.indices]
    return sample


# -- influence probing -------------------------------------------------------

def perturb_pose(spec: RigSpec, pose: Pose, control: int,
                 step_fraction: float = 0.8) -> Pose:
    """Copy the pose with one native control moved by step_fraction of its
    half-range, flipping direction when the step would leave the range."""
    if pose.channels is None:
        raise ConfigError("pose has no channel record; influence probing "
                          "needs sampler-produced poses")
    ranges = spec.control_ranges()
    lo, hi = ranges[control]
    step = step_fraction * 0.5 * (hi - lo)
    njc = CHANNELS_PER_JOINT * spec.joint_count
    full = pose.channels.copy()
    if full.size != spec.control_count:
        raise DimensionMismatchError(
            f"pose carries {full.size} channels, spec has "
            f"{spec.control_count} controls")
    cur = full[control]
    full[control] = cur + step if cur + step <= hi else cur - step
    return compose_pose(spec, full[:njc], full[njc:],
                        pose_id=pose.pose_id + f"+c{control}")


def influence_map(rig, anchors: AnchorSet, probes: int = 100, seed: int = 0,
                  step_fraction: float = 0.8,
                  tau: float | None = None) -> list[np.ndarray]:
    """Which rig controls move which anchors.

    Every control is perturbed individually on each of `probes` sampled
    poses; a control is listed for an anchor if the anchor vertex displaces
    more than tau in any probe. tau defaults to 1e-4 of face height. Raising
    tau can only shrink the lists.
    """
    spec = rig.spec
    if tau is None:
        tau = 1e-4 * face_height(rig.mesh)
    idx = anchors.indices
    hit = np.zeros((len(anchors), spec.control_count), dtype=bool)
    root = np.random.SeedSequence(seed)
    for p in range(probes):
        pose = sample_pose(spec, np.random.SeedSequence(
            entropy=root.entropy, spawn_key=(p,)), pose_id=f"influence/{p}")
        base = rig.evaluate(pose)[idx]
        for control in range(spec.control_count):
            probed = perturb_pose(spec, pose, control, step_fraction)
            disp = np.linalg.norm(rig.evaluate(probed)[idx] - base, axis=1)
            hit[:, control] |= disp > tau
    return [np.nonzero(row)[0].astype(np.int64) for row in hit]


# -- anchor selection --------------------------------------------------------

def select_anchors(rig, mesh: Mesh, count: int, seed: int = 0,
                   probes: int = 32) -> AnchorSet:
    """Pick anchor vertices where the nonlinear residual actually lives.

    Vertices are scored by v_nl variance over a probe set of sampled poses;
    farthest-point sampling then spreads anchors over the above-median
    vertices of the mesh graph, with distances weighted by normalized score
    so dense control regions get proportionally more anchors. The selection
    sequence is deterministic for a fixed seed, and prefixes are nested:
    the k-anchor set contains the (k-1)-anchor set.
    """
    n = mesh.n_vertices
    if count < 1 or count > n:
        raise AnchorError(f"anchor count {count} out of range 1..{n}")
    root = np.random.SeedSequence(seed)
    acc = np.zeros((n, 3))
    acc2 = np.zeros(n)
    fields = []
    for p in range(probes):
        pose = sample_pose(rig.spec, np.random.SeedSequence(
            entropy=root.entropy, spawn_key=(1000 + p,)),
            pose_id=f"anchor-probe/{p}")
        v = extract_nonlinear(rig, pose).nonlinear_local
        fields.append(v)
    stack = np.stack(fields)                      # (probes, n, 3)
    mean = stack.mean(axis=0)
    score = np.mean(np.sum((stack - mean) ** 2, axis=2), axis=0)

    median = np.median(score)
    candidates = np.nonzero(score > median)[0]
    if candidates.size < count:
        candidates = np.arange(n)
    smax = score.max()
    weight = np.sqrt(score / smax) if smax > 0 else np.ones(n)

    # graph with Euclidean edge lengths for geodesic spreading
    succ = mesh.neighbor_idx
    ptr = mesh.neighbor_ptr
    src = np.repeat(np.arange(n), np.diff(ptr))
    lengths = np.linalg.norm(mesh.vertices[src] - mesh.vertices[succ], axis=1)
    graph = _sp.csr_matrix((lengths, (src, succ)), shape=(n, n))

    first = int(np.argmax(score))
    chosen = [first]
    mind = dijkstra(graph, directed=False, indices=first)
    finite_cap = np.nanmax(mind[np.isfinite(mind)]) if np.isfinite(mind).any() else 1.0
    mind[~np.isfinite(mind)] = 10.0 * max(finite_cap, 1.0)
    while len(chosen) < count:
        gain = mind[candidates] * weight[candidates]
        gain[np.isin(candidates, chosen)] = -1.0
        nxt = int(candidates[int(np.argmax(gain))])
        chosen.append(nxt)
        d = dijkstra(graph, directed=False, indices=nxt)
        d[~np.isfinite(d)] = 10.0 * max(finite_cap, 1.0)
        mind = np.minimum(mind, d)
    return AnchorSet(np.asarray(chosen, dtype=np.int64))
