"""Procedural test rigs with analytic ground truth.

The face rig is a deformed-sphere head driven by a handful of skinned joints
plus numeric controls. Skinning supplies the linear (blended affine) part;
a stack of smooth, compactly-supported deformers supplies the nonlinear
residual in rest space, so the quantity the pipeline is supposed to recover
exists in closed form and extraction can be checked against it exactly.

Every deformer vanishes at the rest pose and depends only on rest positions
and the pose, never on injected probe offsets, which is what makes batched
probing exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .errors import ArtifactError, ConfigError, HashMismatchError
from .mesh import Mesh, face_height
from .rig import Pose, RigSpec, apply_affine

# -- mesh primitives ---------------------------------------------------------


def uv_sphere(rows: int, cols: int, radii=(1.0, 1.0, 1.0),
              center=(0.0, 0.0, 0.0)) -> Mesh:
    """Latitude/longitude sphere: two triangle fans at the poles, quad bands
    between. rows interior rings of cols vertices each; n = rows*cols + 2."""
    if rows < 2 or cols < 3:
        raise ConfigError(f"uv_sphere needs rows >= 2, cols >= 3; "
                          f"got {rows}, {cols}")
    radii = np.asarray(radii, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    verts = [center + radii * np.array([0.0, 1.0, 0.0])]
    for r in range(rows):
        theta = np.pi * (r + 1) / (rows + 1)
        y = np.cos(theta)
        ring = np.sin(theta)
        for c in range(cols):
            phi = 2.0 * np.pi * c / cols
            verts.append(center + radii * np.array(
                [ring * np.cos(phi), y, ring * np.sin(phi)]))
    verts.append(center + radii * np.array([0.0, -1.0, 0.0]))
    top, bottom = 0, rows * cols + 1

    def vid(r, c):
        return 1 + r * cols + (c % cols)

    faces = []
    for c in range(cols):
        faces.append((top, vid(0, c + 1), vid(0, c)))
    for r in range(rows - 1):
        for c in range(cols):
            faces.append((vid(r, c), vid(r, c + 1),
                          vid(r + 1, c + 1), vid(r + 1, c)))
    for c in range(cols):
        faces.append((bottom, vid(rows - 1, c), vid(rows - 1, c + 1)))
    return Mesh(np.asarray(verts), faces)


def grid_mesh(rows: int, cols: int, spacing: float = 1.0) -> Mesh:
    """Planar quad grid in the xy plane, rows*cols vertices."""
    if rows < 2 or cols < 2:
        raise ConfigError("grid_mesh needs rows, cols >= 2")
    xs, ys = np.meshgrid(np.arange(cols), np.arange(rows))
    verts = np.stack([xs.ravel() * spacing, ys.ravel() * spacing,
                      np.zeros(rows * cols)], axis=1)
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            faces.append((a, a + 1, a + cols + 1, a + cols))
    return Mesh(verts, faces)


def delaunay_disk(n_points: int, seed: int = 0, radius: float = 1.0) -> Mesh:
    """Random triangulated disk with a smooth height field; used as a supply
    of irregular connectivity in tests."""
    if n_points < 4:
        raise ConfigError("delaunay_disk needs at least 4 points")
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(0.02, 1.0, n_points))
    a = rng.uniform(0.0, 2.0 * np.pi, n_points)
    x, y = r * np.cos(a), r * np.sin(a)
    z = 0.2 * radius * np.sin(2.0 * x / radius) * np.cos(2.0 * y / radius)
    tri = Delaunay(np.stack([x, y], axis=1))
    return Mesh(np.stack([x, y, z], axis=1), [tuple(s) for s in tri.simplices])


def head_mesh(vertex_count: int = 4000, height: float = 20.0) -> Mesh:
    """Head-like closed surface: an ellipsoid sphere grid with a few fixed
    smooth radial features (brow, nose, chin). Front faces +z, up is +y.
    Vertex count is rows*cols + 2 for the nearest grid to the request."""
    if vertex_count < 50:
        raise ConfigError(f"head mesh needs >= 50 vertices, got {vertex_count}")
    cols = max(3, int(round(np.sqrt(vertex_count))))
    rows = max(2, int(round((vertex_count - 2) / cols)))
    ry = height / 2.0
    base = uv_sphere(rows, cols, radii=(0.8 * ry, ry, 0.9 * ry))
    v = base.vertices.copy()
    unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    # fixed feature bumps: direction, angular width, amplitude (of height)
    features = [
        ((0.0, -0.15, 1.0), 0.35, 0.045),   # nose
        ((0.0, -0.75, 0.65), 0.5, 0.035),   # chin
        ((0.0, 0.45, 0.9), 0.7, 0.02),      # brow
        ((0.0, -1.0, -0.2), 0.8, -0.03),    # trimmed under-side
    ]
    scale = np.ones(len(v))
    for d, width, amp in features:
        d = np.asarray(d) / np.linalg.norm(d)
        ang = np.arccos(np.clip(unit @ d, -1.0, 1.0))
        scale += amp * np.exp(-(ang / width) ** 2)
    return Mesh(v * scale[:, None], base.faces)


# -- deformers ----------------------------------------------------------------


def smooth_falloff(dist: np.ndarray, radius: float) -> np.ndarray:
    """Cubic smoothstep from 1 at the center to exactly 0 at radius, C1 at
    both ends. Compact support keeps authored influence regions crisp."""
    s = np.clip(np.asarray(dist, float) / radius, 0.0, 1.0)
    return 1.0 - 3.0 * s * s + 2.0 * s * s * s


def _rotation_angle(r: np.ndarray) -> float:
    """Unsigned rotation angle of a 3x3 rotation/scale block via its trace."""
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def _signed_sines(r: np.ndarray) -> np.ndarray:
    """sin(angle) * axis of a rotation block: the antisymmetric part. Signed,
    smooth in the matrix entries, zero at rest."""
    return 0.5 * np.array([r[2, 1] - r[1, 2],
                           r[0, 2] - r[2, 0],
                           r[1, 0] - r[0, 1]])


@dataclass
class Deformer:
    """Shared geometry of one localized rest-space displacement field."""

    center: np.ndarray
    radius: float
    direction: np.ndarray
    gain: float
    # bound to a mesh at rig build time
    support: np.ndarray | None = None
    phi: np.ndarray | None = None

    def bind(self, mesh: Mesh) -> None:
        d = np.linalg.norm(mesh.vertices - self.center, axis=1)
        inside = np.nonzero(d < self.radius)[0]
        self.support = inside
        self.phi = smooth_falloff(d[inside], self.radius)

    def params(self) -> dict:
        return {"center": np.asarray(self.center, float).tolist(),
                "radius": float(self.radius),
                "direction": np.asarray(self.direction, float).tolist(),
                "gain": float(self.gain)}


@dataclass
class NumericWarp(Deformer):
    """Displacement along a fixed direction driven by one numeric control.

    response: linear     m = c                  (exact proportionality oracle)
              quadratic  m = c^2
              bump       m = exp(-4 c^2) - 1    (even, saturating)
              pair       m = c * c_partner      (co-activation)
    """

    control: int = 0
    response: str = "linear"
    partner: int = 0

    def magnitude(self, pose: Pose) -> float:
        c = float(pose.numeric_values[self.control])
        if self.response == "linear":
            m = c
        elif self.response == "quadratic":
            m = c * c
        elif self.response == "bump":
            m = float(np.exp(-4.0 * c * c)) - 1.0
        elif self.response == "pair":
            m = c * float(pose.numeric_values[self.partner])
        else:
            raise ConfigError(f"unknown warp response {self.response!r}")
        return self.gain * m

    def add_to(self, out: np.ndarray, pose: Pose) -> None:
        out[self.support] += self.magnitude(pose) * np.outer(
            self.phi, self.direction)

    def to_dict(self) -> dict:
        return {"type": "numeric_warp", **self.params(),
                "control": int(self.control), "response": self.response,
                "partner": int(self.partner)}


@dataclass
class JointBulge(Deformer):
    """Displacement along a fixed direction driven by a joint's rotation.

    mode: cos_lin     m = 1 - cos(theta)
          gate        m = max(0, side * s_axis)^2      (one-sided corrective)
          cos_pair    m = (1 - cos(theta)) * c_partner (partner numeric)
          joint_pair  m = s_axis * s'_axis             (partner joint)

    s_axis is the signed sine of the rotation about the chosen axis; gates
    fire only on one side of rest the way sculpted correctives do.
    """

    joint: int = 0
    mode: str = "cos_lin"
    partner: int = 0
    axis: int = 0
    side: float = 1.0

    def magnitude(self, pose: Pose) -> float:
        rot = pose.joint_transforms[self.joint, :, :3]
        if self.mode == "cos_lin":
            m = 1.0 - np.cos(_rotation_angle(rot))
        elif self.mode == "gate":
            s = self.side * _signed_sines(rot)[self.axis]
            m = max(0.0, s) ** 2
        elif self.mode == "cos_pair":
            m = (1.0 - np.cos(_rotation_angle(rot))) * \
                float(pose.numeric_values[self.partner])
        elif self.mode == "joint_pair":
            other = pose.joint_transforms[self.partner, :, :3]
            m = _signed_sines(rot)[self.axis] * _signed_sines(other)[self.axis]
        else:
            raise ConfigError(f"unknown bulge mode {self.mode!r}")
        return self.gain * float(m)

    def add_to(self, out: np.ndarray, pose: Pose) -> None:
        out[self.support] += self.magnitude(pose) * np.outer(
            self.phi, self.direction)

    def to_dict(self) -> dict:
        return {"type": "joint_bulge", **self.params(),
                "joint": int(self.joint), "mode": self.mode,
                "partner": int(self.partner), "axis": int(self.axis),
                "side": float(self.side)}


@dataclass
class JointTwist(Deformer):
    """Rotation of rest offsets about an axis, per-vertex angle proportional
    to falloff times the signed sin(2 theta) of the driving joint about the
    twist axis. direction doubles as the twist axis; center as the pivot."""

    joint: int = 0

    def add_to(self, out: np.ndarray, pose: Pose) -> None:
        rot = pose.joint_transforms[self.joint, :, :3]
        s = float(_signed_sines(rot) @ self.direction)
        ct = float(np.cos(_rotation_angle(rot)))
        alpha = self.gain * self.phi * (2.0 * s * ct)
        if not np.any(alpha):
            return
        axis = self.direction
        rest = self._rest_offsets
        ca = np.cos(alpha)[:, None]
        sa = np.sin(alpha)[:, None]
        cross = np.cross(np.broadcast_to(axis, rest.shape), rest)
        dot = (rest @ axis)[:, None]
        rotated = rest * ca + cross * sa + axis[None, :] * dot * (1.0 - ca)
        out[self.support] += rotated - rest

    def bind(self, mesh: Mesh) -> None:
        super().bind(mesh)
        self._rest_offsets = mesh.vertices[self.support] - self.center

    def to_dict(self) -> dict:
        return {"type": "joint_twist", **self.params(),
                "joint": int(self.joint)}


def _deformer_from_dict(d: dict) -> Deformer:
    kind = d.get("type")
    base = dict(center=np.asarray(d["center"], float),
                radius=float(d["radius"]),
                direction=np.asarray(d["direction"], float),
                gain=float(d["gain"]))
    if kind == "numeric_warp":
        return NumericWarp(**base, control=int(d["control"]),
                           response=d["response"], partner=int(d["partner"]))
    if kind == "joint_bulge":
        return JointBulge(**base, joint=int(d["joint"]), mode=d["mode"],
                          partner=int(d.get("partner", 0)),
                          axis=int(d.get("axis", 0)),
                          side=float(d.get("side", 1.0)))
    if kind == "joint_twist":
        return JointTwist(**base, joint=int(d["joint"]))
    raise ArtifactError(f"unknown deformer type {kind!r}")


# -- the rig -------------------------------------------------------------------


@dataclass
class SyntheticRigConfig:
    kind: str = "face"
    vertex_count: int = 4000
    joint_count: int = 8
    numeric_count: int = 24
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("face", "body"):
            raise ConfigError(f"unknown rig kind {self.kind!r}")
        if self.vertex_count < 50:
            raise ConfigError("vertex_count must be >= 50")
        if self.joint_count < 1:
            raise ConfigError("joint_count must be >= 1")
        if self.numeric_count < 0:
            raise ConfigError("numeric_count must be >= 0")
        if self.kind == "body" and self.numeric_count != 0:
            raise ConfigError("body rigs have no numeric controls")


class SyntheticRig:
    """Skinned mesh plus analytic deformer stack.

    evaluate() is the black-box surface: out_i = T_i(v_i + b_i(pose) + inj_i)
    with T_i the skin-weight blend of the pose's joint affines and b_i the
    deformer sum in rest space. With the stack disabled the rig is exact
    linear blend skinning.
    """

    supports_batched_probes = True

    def __init__(self, mesh: Mesh, spec: RigSpec, skin_weights: np.ndarray,
                 deformers: list, kind: str = "face",
                 config: SyntheticRigConfig | None = None):
        w = np.asarray(skin_weights, dtype=np.float64)
        if w.shape != (mesh.n_vertices, spec.joint_count):
            raise ConfigError(
                f"skin weights {w.shape} do not match mesh/joints "
                f"({mesh.n_vertices}, {spec.joint_count})")
        if np.any(w < 0):
            raise ConfigError("negative skin weight")
        rowsum = w.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-9:
            raise ConfigError("skin weights must sum to 1 per vertex")
        self.mesh = mesh
        self.spec = spec
        self.skin_weights = w
        self.skin_weights.flags.writeable = False
        self.deformers = list(deformers)
        for d in self.deformers:
            d.bind(mesh)
        self.kind = kind
        self.config = config
        self.deformers_enabled = True

    # -- evaluation ---------------------------------------------------------

    def linear_transforms(self, pose: Pose) -> np.ndarray:
        """(n, 3, 4) blended affine per vertex. This is the rig's own linear
        path; black-box consumers recover the same thing by probing."""
        return np.einsum("nj,jab->nab", self.skin_weights,
                         pose.joint_transforms)

    def nonlinear_displacement(self, pose: Pose) -> np.ndarray:
        """Analytic rest-space deformer sum; the ground truth extraction is
        expected to reproduce."""
        out = np.zeros((self.mesh.n_vertices, 3))
        if self.deformers_enabled:
            for d in self.deformers:
                d.add_to(out, pose)
        return out

    def evaluate(self, pose: Pose, injected_offsets=None,
                 replace_point=None) -> np.ndarray:
        if pose.joint_transforms.shape[0] != self.spec.joint_count:
            raise ConfigError(
                f"pose has {pose.joint_transforms.shape[0]} joints, rig has "
                f"{self.spec.joint_count}")
        t = self.linear_transforms(pose)
        local = self.mesh.vertices + self.nonlinear_displacement(pose)
        if injected_offsets is not None:
            if isinstance(injected_offsets, dict):
                local = local.copy()
                for i, off in injected_offsets.items():
                    local[int(i)] = local[int(i)] + np.asarray(off, float)
            else:
                local = local + np.asarray(injected_offsets, float)
        out = apply_affine(t, local)
        if replace_point is not None:
            items = replace_point.items() if isinstance(replace_point, dict) \
                else enumerate(np.asarray(replace_point, float))
            for i, p in items:
                p = np.asarray(p, float)
                i = int(i)
                out[i] = t[i, :, :3] @ p[:3] + p[3] * t[i, :, 3]
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        # embedded mesh keeps the file self-contained; JSON floats round-trip
        # exactly, so the content hash survives save/load
        return {
            "format": "deltarig-rig",
            "version": 1,
            "kind": self.kind,
            "config": (self.config.__dict__ if self.config else None),
            "spec": self.spec.to_dict(),
            "skin_weights": self.skin_weights.tolist(),
            "deformers": [d.to_dict() for d in self.deformers],
            "mesh": {"vertices": self.mesh.vertices.tolist(),
                     "faces": [list(f) for f in self.mesh.faces]},
            "mesh_hash": self.mesh.content_hash(),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict, mesh: Mesh | None = None) -> "SyntheticRig":
        if d.get("format") != "deltarig-rig":
            raise ArtifactError("not a rig JSON file")
        if mesh is None:
            if "mesh" not in d:
                raise ArtifactError("rig JSON has no embedded mesh; "
                                    "pass the mesh explicitly")
            mesh = Mesh(np.asarray(d["mesh"]["vertices"], float),
                        [tuple(f) for f in d["mesh"]["faces"]])
        if d["mesh_hash"] != mesh.content_hash():
            raise HashMismatchError(
                "rig was built on a different mesh (content hash mismatch)")
        spec = RigSpec.from_dict(d["spec"])
        cfgd = d.get("config")
        cfg = SyntheticRigConfig(**cfgd) if cfgd else None
        return cls(mesh, spec, np.asarray(d["skin_weights"], float),
                   [_deformer_from_dict(x) for x in d["deformers"]],
                   kind=d.get("kind", "face"), config=cfg)

    @classmethod
    def load(cls, path, mesh: Mesh | None = None) -> "SyntheticRig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), mesh)


# -- construction -------------------------------------------------------------


def _surface_direction(mesh: Mesh, point: np.ndarray) -> np.ndarray:
    d = point - mesh.vertices.mean(axis=0)
    norm = np.linalg.norm(d)
    return d / norm if norm > 1e-12 else np.array([0.0, 1.0, 0.0])


def make_synthetic_face_rig(config: SyntheticRigConfig | None = None
                            ) -> SyntheticRig:
    """Deterministic head rig: root plus localized feature joints, numeric
    warp controls scattered over the front hemisphere."""
    cfg = config or SyntheticRigConfig()
    cfg.validate()
    if cfg.kind != "face":
        raise ConfigError("config.kind must be 'face'")
    mesh = head_mesh(cfg.vertex_count)
    h = face_height(mesh)
    rng = np.random.default_rng(np.random.SeedSequence(
        entropy=cfg.seed, spawn_key=(7,)))
    j, c = cfg.joint_count, cfg.numeric_count

    # named placements as fractions of face height, front = +z
    named = [
        ("root", (0.0, 0.0, 0.0), 0.12, 0.02 * h, None),
        ("jaw", (0.0, -0.3, 0.15), 0.30, 0.0, 0.5),
        ("eyelid_l", (0.18, 0.12, 0.28), 0.50, 0.0, 0.22),
        ("eyelid_r", (-0.18, 0.12, 0.28), 0.50, 0.0, 0.22),
        ("brow_l", (0.15, 0.3, 0.3), 0.25, 0.015 * h, 0.2),
        ("brow_r", (-0.15, 0.3, 0.3), 0.25, 0.015 * h, 0.2),
        ("cheek_l", (0.28, -0.08, 0.22), 0.20, 0.02 * h, 0.25),
        ("cheek_r", (-0.28, -0.08, 0.22), 0.20, 0.02 * h, 0.25),
    ]
    pivots = np.zeros((j, 3))
    rot_ranges = np.zeros((j, 3, 2))
    trans_ranges = np.zeros((j, 3, 2))
    weight_radius = np.zeros(j)
    for k in range(j):
        if k < len(named):
            _, frac, rot, trans, wrad = named[k]
            pivots[k] = np.asarray(frac) * h
        else:
            # extra joints: seeded placements on the surface
            vi = int(rng.integers(0, mesh.n_vertices))
            pivots[k] = mesh.vertices[vi]
            rot, trans, wrad = 0.35, 0.01 * h, 0.2
        rot_ranges[k, :, 0] = -rot
        rot_ranges[k, :, 1] = rot
        trans_ranges[k, :, 0] = -trans
        trans_ranges[k, :, 1] = trans
        weight_radius[k] = (wrad if wrad is not None else 0.0) * h
    # the jaw mostly hinges: it opens far on one axis, barely on the others
    if j >= 2:
        rot_ranges[1, 0] = (-0.8, 0.15)
        rot_ranges[1, 1] = (-0.15, 0.15)
        rot_ranges[1, 2] = (-0.15, 0.15)

    numeric_ranges = np.tile(np.array([-1.0, 1.0]), (c, 1))
    spec = RigSpec(pivots, rot_ranges, trans_ranges, numeric_ranges,
                   mesh_hash=mesh.content_hash())

    # skin weights: constant root influence, localized joints layered on top
    raw = np.zeros((mesh.n_vertices, j))
    raw[:, 0] = 1.0
    for k in range(1, j):
        dist = np.linalg.norm(mesh.vertices - pivots[k], axis=1)
        strength = 0.9 if k == 1 else 0.7
        raw[:, k] = strength * smooth_falloff(dist, max(weight_radius[k], 1e-6))
    weights = raw / raw.sum(axis=1, keepdims=True)

    deformers: list[Deformer] = []
    front = np.nonzero(mesh.vertices[:, 2] > 0.05 * h)[0]
    # gain multipliers keep most of the deformation outside what a linear
    # map of the features can reach: even responses and products of
    # independent controls have no linear component under the midpoint-
    # centered pose sampling, while plain linear warps stay small
    responses = ["quadratic", "pair", "bump", "linear"]
    response_gain = {"quadratic": 4.5, "pair": 5.5, "bump": 3.0,
                     "linear": 0.6}
    for q in range(c):
        vi = int(front[rng.integers(0, front.size)]) if front.size \
            else int(rng.integers(0, mesh.n_vertices))
        center = mesh.vertices[vi]
        direction = _surface_direction(mesh, center)
        if rng.uniform() < 0.3:
            direction = -direction
        response = responses[q % len(responses)]
        deformers.append(NumericWarp(
            center=center,
            radius=float(rng.uniform(0.18, 0.4)) * h,
            direction=direction,
            gain=float(rng.uniform(0.02, 0.06)) * h * response_gain[response],
            control=q,
            response=response,
            partner=(q + 1) % c if c > 1 else q))
    # cos_lin is exactly linear in the rotation-entry features (it is the
    # matrix trace), so it stays small; gates and products are not
    bulge_modes = ["gate", "cos_pair", "joint_pair", "cos_lin"]
    mode_gain = {"gate": 6.0, "cos_pair": 9.0, "joint_pair": 9.0,
                 "cos_lin": 0.8}
    for k in range(1, j):
        center = pivots[k] * 1.15
        mode = bulge_modes[(k - 1) % len(bulge_modes)]
        # drive along the widest rotation axis; gates open toward the side
        # the sampling actually visits
        axis = int(np.argmax(rot_ranges[k, :, 1] - rot_ranges[k, :, 0]))
        mid = float(rot_ranges[k, axis].mean())
        if abs(mid) > 1e-9:
            side = -1.0 if mid < 0 else 1.0
        else:
            side = -1.0 if rng.uniform() < 0.5 else 1.0
        if mode == "joint_pair" and j > 2:
            partner = 1 + (k % (j - 1))
            if partner == k:
                partner = 1 + ((k + 1) % (j - 1))
        else:
            partner = int(rng.integers(0, c)) if c else 0
        deformers.append(JointBulge(
            center=center,
            radius=max(1.4 * weight_radius[k], 0.2 * h),
            direction=_surface_direction(mesh, center),
            gain=(0.05 if k == 1 else 0.025) * h * mode_gain[mode],
            joint=k,
            mode=mode,
            partner=partner,
            axis=axis,
            side=side))
    if j >= 2:
        deformers.append(JointTwist(
            center=pivots[1], radius=0.5 * h,
            direction=np.array([1.0, 0.0, 0.0]), gain=0.12, joint=1))
    if j >= 4:
        deformers.append(JointTwist(
            center=pivots[3], radius=0.35 * h,
            direction=np.array([0.0, 0.0, 1.0]), gain=0.1, joint=3))

    return SyntheticRig(mesh, spec, weights, deformers, kind="face",
                        config=cfg)


def make_synthetic_body_rig(config: SyntheticRigConfig | None = None
                            ) -> SyntheticRig:
    """Jointed limb: an elongated capsule skinned to a chain of joints along
    its axis, muscle-style bulges at the interior joints, no numeric
    controls."""
    cfg = config or SyntheticRigConfig(kind="body", vertex_count=2000,
                                       joint_count=4, numeric_count=0)
    cfg.validate()
    if cfg.kind != "body":
        raise ConfigError("config.kind must be 'body'")
    length = 40.0
    radius = 4.5
    cols = max(8, int(round(np.sqrt(cfg.vertex_count / 3.0))))
    rows = max(4, int(round((cfg.vertex_count - 2) / cols)))
    mesh = uv_sphere(rows, cols, radii=(radius, length / 2.0, radius))
    j = cfg.joint_count

    ys = np.linspace(length / 2.0, -length / 2.0, j + 1)[:-1]
    pivots = np.stack([np.zeros(j), ys, np.zeros(j)], axis=1)
    rot_ranges = np.zeros((j, 3, 2))
    rot_ranges[:, 0] = (-0.5, 0.5)   # bend
    rot_ranges[:, 2] = (-0.3, 0.3)   # sway
    rot_ranges[0] *= 0.3             # root moves least
    trans_ranges = np.zeros((j, 3, 2))
    trans_ranges[0, :, 0] = -1.0
    trans_ranges[0, :, 1] = 1.0
    spec = RigSpec(pivots, rot_ranges, trans_ranges,
                   np.zeros((0, 2)), mesh_hash=mesh.content_hash())

    seg = length / j
    raw = np.zeros((mesh.n_vertices, j))
    raw[:, 0] = 0.25
    for k in range(j):
        d = np.abs(mesh.vertices[:, 1] - ys[k])
        raw[:, k] += smooth_falloff(d, 1.2 * seg)
    weights = raw / raw.sum(axis=1, keepdims=True)

    deformers: list[Deformer] = []
    modes = ["cos_lin", "angle_sq"]
    for k in range(1, j):
        center = pivots[k] + np.array([0.0, 0.45 * seg, radius * 0.8])
        deformers.append(JointBulge(
            center=center, radius=1.1 * seg,
            direction=np.array([0.0, 0.0, 1.0]),
            gain=0.12 * radius * (1.0 + 0.3 * (k % 2)),
            joint=k, mode=modes[k % 2]))
        deformers.append(JointTwist(
            center=pivots[k], radius=0.9 * seg,
            direction=np.array([0.0, 1.0, 0.0]), gain=0.3, joint=k))
    return SyntheticRig(mesh, spec, weights, deformers, kind="body",
                        config=cfg)


def make_synthetic_rig(config: SyntheticRigConfig) -> SyntheticRig:
    config.validate()
    if config.kind == "face":
        return make_synthetic_face_rig(config)
    return make_synthetic_body_rig(config)
