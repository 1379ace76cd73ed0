"""Dataset generation, on-disk dataset container, and end-to-end training.

A dataset is a list of sampled poses with their extracted nonlinear
deformations, split 98/2 into train/test under a seeded permutation. Poses
are reproducible from recorded seeds, so the container stores numeric
records plus a small JSON sidecar rather than pose objects.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArtifactError, ConfigError, DimensionMismatchError,
                     HashMismatchError, SingularTransformError)
from .mesh import VertexField
from .network import (ModelBundle, TrainConfig, build_differential_net,
                      build_single_subspace_net, build_subspace_nets,
                      pca_fit, pca_fit_energy, pca_pick_k, train)
from .reconstruction import AnchorSet, FactorizedSystem, reconstruct
from .rig import (DeformationSample, Normalization, apply_affine,
                  extract_nonlinear, feature_indices_for_controls,
                  influence_map, recover_T, sample_pose, vectorize)

log = logging.getLogger(__name__)

_MAGIC = b"DRDATSET"
_VERSION = 1
_MAX_RESAMPLE = 32
_TEST_FRACTION = 0.02
_SPLIT_KEY = 999331


def _pose_seed(base_seed: int, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=base_seed,
                                  spawn_key=(index, attempt))


@dataclass
class Dataset:
    """Samples plus the bookkeeping needed to train and evaluate.

    rig is a runtime handle and is never serialized; load_dataset requires
    the caller to supply the same rig again and verifies the mesh hash.
    """

    samples: list
    train_indices: np.ndarray
    test_indices: np.ndarray
    normalization: Normalization
    seed: int
    mesh_hash: str
    anchors: AnchorSet | None = None
    rig: object = None
    pose_seeds: list = field(default_factory=list)  # (index, attempt) pairs

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def n_vertices(self) -> int:
        return self.samples[0].nonlinear_local.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.samples[0].features.shape[0]

    def _pick(self, split):
        if split is None or split == "all":
            return np.arange(self.count)
        if split == "train":
            return self.train_indices
        if split == "test":
            return self.test_indices
        raise ConfigError(f"unknown split {split!r}")

    def feature_matrix(self, split=None) -> np.ndarray:
        idx = self._pick(split)
        return np.stack([self.samples[i].features for i in idx])

    def local_matrix(self, split=None) -> np.ndarray:
        """(m, n, 3) nonlinear displacements in the rest frame."""
        idx = self._pick(split)
        return np.stack([self.samples[i].nonlinear_local for i in idx])

    def weighted_delta_matrix(self, degrees: np.ndarray,
                              split=None) -> np.ndarray:
        """(m, 3n) degree-weighted differentials of the displacements,
        flattened row-major. Multiplying the stored differentials by the
        vertex degrees reproduces the weighted field bit for bit."""
        idx = self._pick(split)
        d = np.asarray(degrees, float)[:, None]
        return np.stack(
            [(self.samples[i].nonlinear_delta * d).ravel() for i in idx])

    def targets_for(self, anchors: AnchorSet, split=None) -> np.ndarray:
        """(m, p, 3) anchor displacements sliced from the stored field, so
        any anchor set can be trained against without regenerating data."""
        idx = self._pick(split)
        sel = anchors.indices
        return np.stack([self.samples[i].nonlinear_local[sel] for i in idx])

    def poses(self, split=None) -> list:
        return [self.samples[i].pose for i in self._pick(split)]


def split_counts(count: int) -> tuple[int, int]:
    test = max(1, int(round(count * _TEST_FRACTION)))
    if test >= count:
        raise ConfigError(f"dataset of {count} poses is too small to split")
    return count - test, test


def generate_dataset(rig, count: int, anchors: AnchorSet | None = None,
                     seed: int = 0) -> Dataset:
    """Sample count poses, probe the rig, and extract nonlinear residuals.

    Poses whose recovered per-vertex transforms are singular are resampled
    (fresh sub-seed, same index) and counted in the log. The train/test
    split and the feature normalization are fixed here: normalization is
    fitted on the training poses only, then applied to everything.
    """
    if count < 2:
        raise ConfigError("need at least 2 poses to build a dataset")
    samples = []
    pose_seeds = []
    resampled = 0
    for index in range(count):
        attempt = 0
        while True:
            pose = sample_pose(rig.spec, _pose_seed(seed, index, attempt),
                               pose_id=f"pose{index:05d}")
            try:
                sample = extract_nonlinear(rig, pose, anchors=anchors)
                break
            except SingularTransformError as exc:
                resampled += 1
                attempt += 1
                if attempt >= _MAX_RESAMPLE:
                    raise SingularTransformError(
                        f"pose index {index} stayed singular after "
                        f"{_MAX_RESAMPLE} resamples: {exc}",
                        vertex=exc.vertex, pose_id=exc.pose_id) from exc
        samples.append(sample)
        pose_seeds.append((index, attempt))
    if resampled:
        log.info("resampled %d singular pose(s)", resampled)

    n_train, n_test = split_counts(count)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(_SPLIT_KEY,)))
    perm = rng.permutation(count)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])

    norm = Normalization.fit([samples[i].pose for i in train_idx])
    for s in samples:
        s.features = vectorize(s.pose, norm)
    return Dataset(samples, train_idx, test_idx, norm, seed,
                   rig.mesh.content_hash(), anchors=anchors, rig=rig,
                   pose_seeds=pose_seeds)


# -- container ----------------------------------------------------------------

def _sidecar_path(path: str) -> str:
    return str(path) + ".json"


def save_dataset(dataset: Dataset, path) -> None:
    """Binary records at path, JSON sidecar at path + '.json'."""
    path = str(path)
    count = dataset.count
    n = dataset.n_vertices
    feats = dataset.feature_matrix()
    local = dataset.local_matrix()
    delta = np.stack([s.nonlinear_delta for s in dataset.samples])
    p = len(dataset.anchors.indices) if dataset.anchors is not None else 0
    header = np.array([count, n, feats.shape[1], p], dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([_VERSION], dtype="<u4").tobytes())
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(local, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(delta, dtype="<f8").tobytes())
        if p:
            targets = dataset.targets_for(dataset.anchors)
            fh.write(np.ascontiguousarray(targets, dtype="<f8").tobytes())
    sidecar = {
        "format": "deltarig-dataset",
        "version": _VERSION,
        "seed": dataset.seed,
        "count": count,
        "n_vertices": n,
        "feature_dim": int(feats.shape[1]),
        "mesh_hash": dataset.mesh_hash,
        "rig_spec": dataset.rig.spec.to_dict() if dataset.rig is not None
        else None,
        "pose_seeds": [[int(i), int(a)] for i, a in dataset.pose_seeds],
        "pose_ids": [s.pose.pose_id for s in dataset.samples],
        "train_indices": dataset.train_indices.tolist(),
        "test_indices": dataset.test_indices.tolist(),
        "normalization": dataset.normalization.to_dict(),
        "anchors": None if dataset.anchors is None else {
            "indices": dataset.anchors.indices.tolist(),
            "weights": dataset.anchors.weights.tolist()},
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(path, rig) -> Dataset:
    """Rebuild a dataset against the rig it was generated from.

    The mesh hash and rig parameters must match what the sidecar recorded;
    poses are re-derived from their stored seeds.
    """
    path = str(path)
    with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
        side = json.load(fh)
    if side.get("format") != "deltarig-dataset":
        raise ArtifactError(f"{path} has no dataset sidecar")
    if rig.mesh.content_hash() != side["mesh_hash"]:
        raise HashMismatchError(
            "dataset was generated on a different mesh "
            f"({side['mesh_hash'][:12]}... vs "
            f"{rig.mesh.content_hash()[:12]}...)")
    if side["rig_spec"] is not None and rig.spec.to_dict() != side["rig_spec"]:
        raise HashMismatchError("rig parameters differ from the dataset's")

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ArtifactError(f"{path} is not a dataset container")
    version = int(np.frombuffer(blob, dtype="<u4", count=1, offset=8)[0])
    if version != _VERSION:
        raise ArtifactError(f"unsupported dataset version {version}")
    count, n, fdim, p = (int(v) for v in
                         np.frombuffer(blob, dtype="<u8", count=4, offset=12))
    offset = 12 + 32

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=size,
                            offset=offset).reshape(shape).copy()
        offset += size * 8
        return arr

    expected = offset + 8 * (count * fdim + 2 * count * n * 3
                             + count * p * 3)
    if len(blob) != expected:
        raise ArtifactError(
            f"dataset container is {len(blob)} bytes, expected {expected}")
    feats = take((count, fdim))
    local = take((count, n, 3))
    delta = take((count, n, 3))
    targets = take((count, p, 3)) if p else None

    anchors = None
    if side["anchors"] is not None:
        anchors = AnchorSet(side["anchors"]["indices"],
                            side["anchors"]["weights"])
    samples = []
    for i, (idx, attempt) in enumerate(side["pose_seeds"]):
        pose = sample_pose(rig.spec, _pose_seed(side["seed"], idx, attempt),
                           pose_id=side["pose_ids"][i])
        samples.append(DeformationSample(
            pose=pose, nonlinear_local=local[i], nonlinear_delta=delta[i],
            features=feats[i],
            anchor_targets=targets[i] if targets is not None else None))
    return Dataset(samples, np.asarray(side["train_indices"]),
                   np.asarray(side["test_indices"]),
                   Normalization.from_dict(side["normalization"]),
                   side["seed"], side["mesh_hash"], anchors=anchors, rig=rig,
                   pose_seeds=[tuple(x) for x in side["pose_seeds"]])


# -- training -----------------------------------------------------------------

@dataclass
class TrainSettings:
    """Knobs for the full training pass. pc_k wins over pc_energy wins over
    pc_percent when more than one is given."""

    pc_percent: float = 5.0
    pc_k: int | None = None
    pc_energy: float | None = None
    diff_layers: int = 5
    diff_width: int = 2048
    sub_layers: int = 3
    sub_width: int = 64
    single_subspace: bool = False
    influence_probes: int = 100
    diff_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(loss="l1", epochs=500))
    sub_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(loss="l2", epochs=500))
    seed: int = 0


def train_all(dataset: Dataset, anchors: AnchorSet | None = None,
              settings: TrainSettings | None = None) -> ModelBundle:
    """Fit the PCA, the differential net, and the per-anchor nets on the
    training split. Returns a bundle ready for prediction."""
    settings = settings or TrainSettings()
    rig = dataset.rig
    if rig is None:
        raise ConfigError("dataset has no rig handle; load it with the rig")
    anchors = anchors or dataset.anchors
    if anchors is None:
        raise ConfigError("no anchor set on the dataset or in the call")
    mesh = rig.mesh
    n = mesh.vertices.shape[0]
    if dataset.n_vertices != n:
        raise DimensionMismatchError(
            f"dataset built for {dataset.n_vertices} vertices, rig mesh "
            f"has {n}")

    x_train = dataset.feature_matrix("train")
    y_train = dataset.weighted_delta_matrix(mesh.degrees, "train")

    if settings.pc_k is not None:
        pca = pca_fit(y_train, settings.pc_k)
    elif settings.pc_energy is not None:
        pca = pca_fit_energy(y_train, settings.pc_energy)
    else:
        k = min(pca_pick_k(n, settings.pc_percent), *y_train.shape)
        pca = pca_fit(y_train, k)
    log.info("pca: %d components, %.4f energy", pca.k, pca.energy_fraction())

    diff = build_differential_net(dataset.feature_dim, pca,
                                  hidden_layers=settings.diff_layers,
                                  width=settings.diff_width,
                                  seed=settings.seed)
    diff_trace = train(diff.net, x_train, pca.project(y_train),
                       settings.diff_train)

    targets = dataset.targets_for(anchors, "train")
    m = targets.shape[0]
    if settings.single_subspace:
        sub = build_single_subspace_net(dataset.feature_dim,
                                        len(anchors.indices),
                                        hidden_layers=settings.sub_layers,
                                        width=settings.sub_width,
                                        seed=settings.seed + 1)
        sub_traces = [train(sub.nets[0], x_train,
                            targets.reshape(m, -1), settings.sub_train)]
    else:
        per_anchor = influence_map(rig, anchors,
                                   probes=settings.influence_probes,
                                   seed=settings.seed)
        slices = [feature_indices_for_controls(rig.spec, controls)
                  for controls in per_anchor]
        sub = build_subspace_nets(dataset.feature_dim, slices,
                                  hidden_layers=settings.sub_layers,
                                  width=settings.sub_width,
                                  seed=settings.seed + 1)
        sub_traces = []
        for a, net in enumerate(sub.nets):
            sub_traces.append(train(net, x_train[:, sub.slices[a]],
                                    targets[:, a, :], settings.sub_train))

    meta = {
        "pc_k": pca.k,
        "pc_energy": pca.energy_fraction(),
        "diff_final_loss": diff_trace[-1],
        "sub_final_loss": float(np.mean([t[-1] for t in sub_traces])),
        "train_count": int(len(dataset.train_indices)),
        "seed": settings.seed,
    }
    return ModelBundle(diff, sub, dataset.normalization, anchors,
                       dataset.mesh_hash, n, dataset.feature_dim, meta)


# -- prediction ---------------------------------------------------------------

def linear_transforms_for(rig, pose) -> np.ndarray:
    """Per-vertex linear transforms: the rig's own blend when it exposes
    one, otherwise recovered by probing (5 evaluations)."""
    if hasattr(rig, "linear_transforms"):
        return rig.linear_transforms(pose)
    return recover_T(rig, pose)


def predict_from_outputs(system: FactorizedSystem, rig, pose,
                         weighted_delta: VertexField,
                         anchor_targets: np.ndarray) -> np.ndarray:
    """Final vertex positions from network outputs (or stand-ins for them).

    Solves the anchored least squares for the nonlinear displacement field,
    adds it to the rest shape, then applies the per-vertex linear transforms.
    Passing ground-truth differentials and anchor values through this closes
    the loop back to the rig's own output up to solver precision.
    """
    field = reconstruct(system, weighted_delta, np.asarray(anchor_targets,
                                                           float))
    t = linear_transforms_for(rig, pose)
    return apply_affine(t, rig.mesh.vertices + field.values)


def predict_full(system: FactorizedSystem, bundle: ModelBundle, rig,
                 pose) -> np.ndarray:
    """Network prediction for one pose, with artifact identity checks."""
    mesh_hash = rig.mesh.content_hash()
    if bundle.mesh_hash and bundle.mesh_hash != mesh_hash:
        raise HashMismatchError("model bundle was trained on another mesh")
    if system.mesh_hash and system.mesh_hash != mesh_hash:
        raise HashMismatchError("factorized system built on another mesh")
    if not np.array_equal(system.anchors.indices, bundle.anchors.indices):
        raise HashMismatchError(
            "solver anchors differ from the bundle's anchors")
    delta, targets = bundle.predict(pose)
    return predict_from_outputs(system, rig, pose, delta, targets)
