"""Error measurement, reference baselines, parameter sweeps, and simple
visual exports.

All error numbers are Euclidean vertex distances in model units (the
synthetic heads are built at centimeter scale). Reports carry streaming
statistics plus, by default, the raw distances so medians and histograms
stay exact.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionMismatchError
from .mesh import face_height, save_obj
from .network import pca_fit, pca_pick_k
from .pipeline import (Dataset, TrainSettings, linear_transforms_for,
                       predict_from_outputs, train_all)
from .reconstruction import FactorizedSystem, build_system
from .rig import apply_affine

log = logging.getLogger(__name__)


@dataclass
class ErrorReport:
    """Streaming per-vertex distance statistics over a set of poses."""

    name: str
    keep_raw: bool = True
    count: int = 0
    pose_count: int = 0
    sum_dist: float = 0.0
    sum_sq: float = 0.0
    max_error: float = 0.0
    pose_means: list = field(default_factory=list)
    vertex_sums: np.ndarray | None = None
    _raw: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add_pose(self, predicted: np.ndarray, truth: np.ndarray) -> None:
        predicted = np.asarray(predicted, float)
        truth = np.asarray(truth, float)
        if predicted.shape != truth.shape or predicted.ndim != 2:
            raise DimensionMismatchError(
                f"prediction {predicted.shape} vs truth {truth.shape}")
        dist = np.linalg.norm(predicted - truth, axis=1)
        self.count += dist.size
        self.pose_count += 1
        self.sum_dist += float(dist.sum())
        self.sum_sq += float(np.dot(dist, dist))
        self.max_error = max(self.max_error, float(dist.max()))
        self.pose_means.append(float(dist.mean()))
        if self.vertex_sums is None:
            self.vertex_sums = np.zeros(dist.size)
        self.vertex_sums += dist
        if self.keep_raw:
            self._raw.append(dist)

    @property
    def mean_error(self) -> float:
        return self.sum_dist / self.count if self.count else 0.0

    @property
    def rms_error(self) -> float:
        return float(np.sqrt(self.sum_sq / self.count)) if self.count else 0.0

    @property
    def median_error(self) -> float:
        if not self._raw:
            raise ConfigError("median needs keep_raw=True")
        return float(np.median(np.concatenate(self._raw)))

    def raw_distances(self) -> np.ndarray:
        if not self._raw:
            raise ConfigError("raw distances were not kept")
        return np.concatenate(self._raw)

    def per_vertex_mean(self) -> np.ndarray:
        if self.vertex_sums is None:
            raise ConfigError("report is empty")
        return self.vertex_sums / max(self.pose_count, 1)

    def summary(self, height: float | None = None) -> dict:
        out = {
            "name": self.name,
            "poses": self.pose_count,
            "mean": self.mean_error,
            "rms": self.rms_error,
            "max": self.max_error,
        }
        if self._raw:
            out["median"] = self.median_error
        if height:
            out["mean_pct_of_height"] = 100.0 * self.mean_error / height
            out["max_pct_of_height"] = 100.0 * self.max_error / height
        out.update(self.meta)
        return out


def format_report(report: ErrorReport, height: float | None = None) -> str:
    s = report.summary(height)
    line = (f"{s['name']}: mean {s['mean']:.4f} cm, "
            f"max {s['max']:.4f} cm over {s['poses']} poses")
    if height:
        line += (f" (mean {s['mean_pct_of_height']:.3f}% of face height "
                 f"{height:.1f})")
    return line


def _truth(rig, pose) -> np.ndarray:
    return rig.evaluate(pose)


def _pose_tag(dataset: Dataset, split: str) -> str:
    return "|".join(p.pose_id for p in dataset.poses(split))


# -- the approximation and its baselines --------------------------------------

def evaluate_ours(system: FactorizedSystem, bundle, rig, dataset: Dataset,
                  split: str = "test", keep_raw: bool = True) -> ErrorReport:
    """Full pipeline error: nets -> anchored least squares -> linear blend."""
    report = ErrorReport("ours", keep_raw=keep_raw)
    for pose in dataset.poses(split):
        delta, targets = bundle.predict(pose)
        pred = predict_from_outputs(system, rig, pose, delta, targets)
        report.add_pose(pred, _truth(rig, pose))
    report.meta["poses_tag"] = _pose_tag(dataset, split)
    return report


def baseline_lbs(rig, dataset: Dataset, split: str = "test",
                 keep_raw: bool = True) -> ErrorReport:
    """Linear blend only: what the rig looks like with the nonlinear part
    dropped entirely."""
    report = ErrorReport("lbs", keep_raw=keep_raw)
    rest = rig.mesh.vertices
    for pose in dataset.poses(split):
        t = linear_transforms_for(rig, pose)
        report.add_pose(apply_affine(t, rest), _truth(rig, pose))
    report.meta["poses_tag"] = _pose_tag(dataset, split)
    return report


def baseline_pca_regression(rig, dataset: Dataset, pc_percent: float = 5.0,
                            split: str = "test",
                            keep_raw: bool = True) -> ErrorReport:
    """Linear least squares from features to PCA coefficients of the raw
    (Cartesian) displacement field. The classic fast approximation: anything
    the nets beat it by is the value of nonlinearity."""
    n = dataset.n_vertices
    y = dataset.local_matrix("train").reshape(len(dataset.train_indices), -1)
    k = min(pca_pick_k(n, pc_percent), *y.shape)
    pca = pca_fit(y, k)
    coeffs = pca.project(y)
    x = dataset.feature_matrix("train")
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    w, _, rank, _ = np.linalg.lstsq(xb, coeffs, rcond=None)
    ridge = 0.0
    if rank < xb.shape[1]:
        ridge = 1e-8 * float(np.trace(xb.T @ xb)) / xb.shape[1]
        w = np.linalg.solve(xb.T @ xb + ridge * np.eye(xb.shape[1]),
                            xb.T @ coeffs)
        log.info("regression features are rank deficient (%d < %d); "
                 "ridge %.3e applied", rank, xb.shape[1], ridge)
    report = ErrorReport("pca_regression", keep_raw=keep_raw)
    report.meta["pc_k"] = k
    report.meta["ridge"] = ridge
    rest = rig.mesh.vertices
    for pose, feats in zip(dataset.poses(split),
                           dataset.feature_matrix(split)):
        fb = np.concatenate([feats, [1.0]])
        v_nl = pca.reconstruct(fb @ w)
        t = linear_transforms_for(rig, pose)
        report.add_pose(apply_affine(t, rest + v_nl.reshape(n, 3)),
                        _truth(rig, pose))
    report.meta["poses_tag"] = _pose_tag(dataset, split)
    return report


def baseline_local(rig, dataset: Dataset,
                   settings: TrainSettings | None = None,
                   split: str = "test",
                   keep_raw: bool = True) -> ErrorReport:
    """Same network architecture and budget, but trained to emit the raw
    displacement field directly (no differential coordinates, no anchored
    solve). Isolates what the reconstruction step buys."""
    from .network import build_differential_net, train

    settings = settings or TrainSettings()
    n = dataset.n_vertices
    y = dataset.local_matrix("train").reshape(len(dataset.train_indices), -1)
    if settings.pc_k is not None:
        k = settings.pc_k
    else:
        k = min(pca_pick_k(n, settings.pc_percent), *y.shape)
    pca = pca_fit(y, k)
    model = build_differential_net(dataset.feature_dim, pca,
                                   hidden_layers=settings.diff_layers,
                                   width=settings.diff_width,
                                   seed=settings.seed)
    train(model.net, dataset.feature_matrix("train"), pca.project(y),
          settings.diff_train)
    report = ErrorReport("local", keep_raw=keep_raw)
    report.meta["pc_k"] = k
    rest = rig.mesh.vertices
    for pose, feats in zip(dataset.poses(split),
                           dataset.feature_matrix(split)):
        v_nl = model.predict(feats[None, :])[0].reshape(n, 3)
        t = linear_transforms_for(rig, pose)
        report.add_pose(apply_affine(t, rest + v_nl), _truth(rig, pose))
    report.meta["poses_tag"] = _pose_tag(dataset, split)
    return report


def run_benchmark(rig, dataset: Dataset, anchors, settings: TrainSettings,
                  omega: float = 1.0, split: str = "test") -> dict:
    """Train the full model and all baselines on one dataset and score them
    on the same test poses. Returns name -> ErrorReport."""
    system = build_system(rig.mesh, anchors, omega=omega)
    bundle = train_all(dataset, anchors=anchors, settings=settings)
    reports = {
        "ours": evaluate_ours(system, bundle, rig, dataset, split),
        "lbs": baseline_lbs(rig, dataset, split),
        "pca_regression": baseline_pca_regression(
            rig, dataset, settings.pc_percent, split),
        "local": baseline_local(rig, dataset, settings, split),
    }
    tags = {r.meta["poses_tag"] for r in reports.values()}
    if len(tags) != 1:
        raise ConfigError("baselines scored different pose sets")
    return reports


# -- sweeps -------------------------------------------------------------------

def _scored_row(report: ErrorReport, **extra) -> dict:
    row = dict(extra)
    row["mean_error"] = report.mean_error
    row["max_error"] = report.max_error
    row["rms_error"] = report.rms_error
    return row


def sweep_pc_percent(rig, dataset: Dataset, anchors, percents,
                     settings: TrainSettings,
                     system: FactorizedSystem | None = None) -> list[dict]:
    system = system or build_system(rig.mesh, anchors)
    rows = []
    for pct in percents:
        s = dataclasses.replace(settings, pc_percent=float(pct), pc_k=None,
                                pc_energy=None)
        bundle = train_all(dataset, anchors=anchors, settings=s)
        rep = evaluate_ours(system, bundle, rig, dataset, keep_raw=False)
        rows.append(_scored_row(rep, pc_percent=float(pct),
                                pc_k=bundle.meta["pc_k"]))
        log.info("pc sweep %s%%: mean %.5f", pct, rep.mean_error)
    return rows


def sweep_depth(rig, dataset: Dataset, anchors, layer_counts,
                settings: TrainSettings,
                system: FactorizedSystem | None = None) -> list[dict]:
    system = system or build_system(rig.mesh, anchors)
    rows = []
    for depth in layer_counts:
        s = dataclasses.replace(settings, diff_layers=int(depth))
        bundle = train_all(dataset, anchors=anchors, settings=s)
        rep = evaluate_ours(system, bundle, rig, dataset, keep_raw=False)
        rows.append(_scored_row(rep, hidden_layers=int(depth)))
        log.info("depth sweep %d: mean %.5f", depth, rep.mean_error)
    return rows


def sweep_anchor_count(rig, dataset: Dataset, counts,
                       settings: TrainSettings, seed: int = 0,
                       omega: float = 1.0) -> list[dict]:
    """Anchor sets are prefixes of one deterministic selection sequence, so
    rows with larger counts strictly contain the smaller sets."""
    from .rig import select_anchors

    rows = []
    for count in counts:
        anchors = select_anchors(rig, rig.mesh, int(count), seed=seed)
        system = build_system(rig.mesh, anchors, omega=omega)
        bundle = train_all(dataset, anchors=anchors, settings=settings)
        rep = evaluate_ours(system, bundle, rig, dataset, keep_raw=False)
        rows.append(_scored_row(rep, anchor_count=int(count)))
        log.info("anchor sweep %d: mean %.5f", count, rep.mean_error)
    return rows


def sweep_train_size(rig, dataset: Dataset, anchors, fractions,
                     settings: TrainSettings,
                     system: FactorizedSystem | None = None,
                     seed: int = 0) -> list[dict]:
    """Train on nested subsets of the training split (test poses fixed)."""
    system = system or build_system(rig.mesh, anchors)
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(dataset.train_indices)
    rows = []
    for frac in fractions:
        take = max(2, int(round(len(shuffled) * float(frac))))
        sub = dataclasses.replace(
            dataset, train_indices=np.sort(shuffled[:take]))
        bundle = train_all(sub, anchors=anchors, settings=settings)
        rep = evaluate_ours(system, bundle, rig, sub, keep_raw=False)
        rows.append(_scored_row(rep, train_fraction=float(frac),
                                train_count=take))
        log.info("size sweep %.2f (%d poses): mean %.5f", frac, take,
                 rep.mean_error)
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ConfigError("no sweep rows to write")
    columns = list(rows[0].keys())
    with open(str(path), "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})


# -- exports ------------------------------------------------------------------

def _ramp(t: np.ndarray) -> np.ndarray:
    """Blue through white to red, t in [0, 1]."""
    t = np.clip(np.asarray(t, float), 0.0, 1.0)
    lo = np.array([0.05, 0.15, 0.90])
    mid = np.array([0.95, 0.95, 0.95])
    hi = np.array([0.85, 0.10, 0.05])
    out = np.empty((t.size, 3))
    low = t < 0.5
    u = (t[low] * 2.0)[:, None]
    out[low] = lo * (1 - u) + mid * u
    u = ((t[~low] - 0.5) * 2.0)[:, None]
    out[~low] = mid * (1 - u) + hi * u
    return out


def export_heatmap(path, mesh, per_vertex_error: np.ndarray,
                   ceiling: float | None = None) -> float:
    """Write the mesh with error-colored vertices. Returns the ceiling used
    (the 99th percentile by default, so one bad vertex cannot wash out the
    map)."""
    err = np.asarray(per_vertex_error, float)
    if err.shape != (mesh.vertices.shape[0],):
        raise DimensionMismatchError(
            f"error field {err.shape} for mesh with "
            f"{mesh.vertices.shape[0]} vertices")
    if ceiling is None:
        ceiling = float(np.percentile(err, 99.0))
    if ceiling <= 0.0:
        ceiling = 1.0
    save_obj(path, mesh, vertex_colors=_ramp(err / ceiling))
    return ceiling


def export_histogram(path, errors: np.ndarray, bins: int = 20) -> None:
    """CSV of (bin_lo, bin_hi, fraction) rows over the raw distances."""
    errors = np.asarray(errors, float).ravel()
    if errors.size == 0:
        raise ConfigError("no errors to histogram")
    counts, edges = np.histogram(errors, bins=bins)
    frac = counts / errors.size
    with open(str(path), "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "fraction"])
        for i in range(len(counts)):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             repr(float(frac[i]))])


def heights_meta(mesh) -> dict:
    return {"face_height": face_height(mesh)}
