"""Command line driver.

Subcommands cover the whole workflow: build a synthetic rig, generate pose
data, train, evaluate against the baselines, predict single poses, run
parameter sweeps, and inspect the solver spectrum. Every output directory
gets a manifest.json describing inputs, outputs, and the settings used,
written without timestamps or absolute paths so reruns are byte-identical.

Setting precedence: command line flags > --config JSON > --preset.
Exit codes: 0 ok, 2 bad configuration or arguments, 3 missing or malformed
artifact, 4 artifact identity mismatch, 5 numerical failure, 1 anything
else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import (ArtifactError, ConfigError, DeltaRigError,
                     HashMismatchError, RankDeficiencyError,
                     SingularTransformError, TrainingDivergedError)
from .evaluate import (ErrorReport, baseline_lbs, baseline_local,
                       baseline_pca_regression, evaluate_ours, export_heatmap,
                       export_histogram, format_report, sweep_anchor_count,
                       sweep_depth, sweep_pc_percent, sweep_train_size,
                       write_sweep_csv)
from .mesh import face_height, load_obj, save_obj
from .network import ModelBundle, TrainConfig
from .pipeline import (TrainSettings, generate_dataset, load_dataset,
                       predict_full, save_dataset, train_all)
from .reconstruction import (AnchorSet, FactorizedSystem, build_system,
                             condition_report, eigen_analysis,
                             anchored_normal_matrix, spectral_amplification)
from .rig import Pose, compose_pose, sample_pose, select_anchors
from .synthetic import SyntheticRig, SyntheticRigConfig, make_synthetic_rig

log = logging.getLogger(__name__)

PRESETS = {
    "desk": {
        "kind": "face",
        "vertex_count": 4000,
        "joint_count": 8,
        "numeric_count": 24,
        "poses": 2000,
        "pc_percent": 5.0,
        "anchor_percent": 2.0,
        "diff_width": 256,
        "diff_layers": 5,
        "diff_epochs": 500,
        "sub_width": 64,
        "sub_layers": 3,
        "sub_epochs": 200,
        "batch_size": 128,
        "learning_rate": 0.1,
        "decay": 1e-6,
        "omega": 1.0,
        "influence_probes": 100,
        "single_subspace": False,
    },
    "paper": {
        "kind": "face",
        "vertex_count": 4000,
        "joint_count": 8,
        "numeric_count": 24,
        "poses": 10000,
        "pc_percent": 5.0,
        "anchor_percent": 2.0,
        "diff_width": 2048,
        "diff_layers": 5,
        "diff_epochs": 10000,
        "sub_width": 64,
        "sub_layers": 3,
        "sub_epochs": 10000,
        "batch_size": 128,
        "learning_rate": 0.1,
        "decay": 1e-6,
        "omega": 1.0,
        "influence_probes": 100,
        "single_subspace": False,
    },
}

_SETTING_KEYS = tuple(PRESETS["desk"].keys()) + ("anchor_count",)


def _resolve_settings(args) -> dict:
    cfg = dict(PRESETS[getattr(args, "preset", None) or "desk"])
    cfg["anchor_count"] = None
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise ArtifactError(f"config file {path} not found")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        unknown = set(loaded) - set(_SETTING_KEYS)
        if unknown:
            raise ConfigError(
                f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key in _SETTING_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _train_settings(cfg: dict, seed: int) -> TrainSettings:
    return TrainSettings(
        pc_percent=float(cfg["pc_percent"]),
        diff_layers=int(cfg["diff_layers"]),
        diff_width=int(cfg["diff_width"]),
        sub_layers=int(cfg["sub_layers"]),
        sub_width=int(cfg["sub_width"]),
        single_subspace=bool(cfg["single_subspace"]),
        influence_probes=int(cfg["influence_probes"]),
        diff_train=TrainConfig(epochs=int(cfg["diff_epochs"]),
                               batch_size=int(cfg["batch_size"]),
                               learning_rate=float(cfg["learning_rate"]),
                               decay=float(cfg["decay"]), loss="l1",
                               seed=seed),
        sub_train=TrainConfig(epochs=int(cfg["sub_epochs"]),
                              batch_size=int(cfg["batch_size"]),
                              learning_rate=float(cfg["learning_rate"]),
                              decay=float(cfg["decay"]), loss="l2",
                              seed=seed + 1),
        seed=seed,
    )


def _anchor_count(cfg: dict, n_vertices: int) -> int:
    if cfg.get("anchor_count"):
        return int(cfg["anchor_count"])
    return max(1, int(round(n_vertices * float(cfg["anchor_percent"])
                            / 100.0)))


def _ensure_outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(outdir: str, command: str, inputs: dict, outputs: list,
                    settings: dict) -> None:
    manifest = {
        "command": command,
        "inputs": {k: os.path.basename(str(v)) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "settings": settings,
    }
    with open(os.path.join(outdir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _load_rig(path: str) -> SyntheticRig:
    try:
        return SyntheticRig.load(path)
    except FileNotFoundError:
        raise ArtifactError(f"rig file {path} not found")


def _settings_summary(cfg: dict) -> dict:
    return {k: cfg[k] for k in sorted(cfg) if cfg[k] is not None}


# -- subcommands --------------------------------------------------------------

def cmd_make_rig(args) -> int:
    cfg = _resolve_settings(args)
    outdir = _ensure_outdir(args.out)
    rig_cfg = SyntheticRigConfig(kind=cfg["kind"],
                                 vertex_count=int(cfg["vertex_count"]),
                                 joint_count=int(cfg["joint_count"]),
                                 numeric_count=int(cfg["numeric_count"]),
                                 seed=args.seed)
    rig = make_synthetic_rig(rig_cfg)
    rig_path = os.path.join(outdir, "rig.json")
    rig.save(rig_path)
    mesh_path = os.path.join(outdir, "mesh.obj")
    save_obj(mesh_path, rig.mesh)
    _write_manifest(outdir, "make-rig", {}, ["rig.json", "mesh.obj"],
                    _settings_summary({**cfg, "seed": args.seed}))
    print(f"rig: {rig.mesh.vertices.shape[0]} vertices, "
          f"{rig.spec.joint_count} joints, "
          f"{rig.spec.numeric_count} numeric controls -> {rig_path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve_settings(args)
    rig = _load_rig(args.rig)
    outdir = _ensure_outdir(args.out)
    anchors = None
    if not args.no_anchors:
        count = _anchor_count(cfg, rig.mesh.vertices.shape[0])
        anchors = select_anchors(rig, rig.mesh, count, seed=args.seed)
        anchors.save(os.path.join(outdir, "anchors.json"))
    dataset = generate_dataset(rig, int(cfg["poses"]), anchors=anchors,
                               seed=args.seed)
    data_path = os.path.join(outdir, "data.bin")
    save_dataset(dataset, data_path)
    outputs = ["data.bin", "data.bin.json"]
    if anchors is not None:
        outputs.append("anchors.json")
    _write_manifest(outdir, "gen-data", {"rig": args.rig}, outputs,
                    _settings_summary({**cfg, "seed": args.seed}))
    print(f"dataset: {dataset.count} poses "
          f"({len(dataset.train_indices)} train / "
          f"{len(dataset.test_indices)} test) -> {data_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_settings(args)
    rig = _load_rig(args.rig)
    dataset = load_dataset(args.data, rig)
    outdir = _ensure_outdir(args.out)
    if dataset.anchors is not None and not args.reselect_anchors:
        anchors = dataset.anchors
    else:
        anchors = select_anchors(rig, rig.mesh,
                                 _anchor_count(cfg,
                                               rig.mesh.vertices.shape[0]),
                                 seed=args.seed)
    anchors.save(os.path.join(outdir, "anchors.json"))
    system = build_system(rig.mesh, anchors, omega=float(cfg["omega"]))
    system.save(os.path.join(outdir, "system.bin"))
    settings = _train_settings(cfg, args.seed)
    bundle = train_all(dataset, anchors=anchors, settings=settings)
    bundle.save(os.path.join(outdir, "model.json"))
    _write_manifest(outdir, "train",
                    {"rig": args.rig, "data": args.data},
                    ["anchors.json", "system.bin", "model.json",
                     "model.weights"],
                    _settings_summary({**cfg, "seed": args.seed}))
    print(f"trained: {bundle.meta['pc_k']} components, "
          f"{len(anchors.indices)} anchors, final diff loss "
          f"{bundle.meta['diff_final_loss']:.6f} -> {outdir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_settings(args)
    rig = _load_rig(args.rig)
    dataset = load_dataset(args.data, rig)
    bundle = ModelBundle.load(os.path.join(args.model, "model.json"))
    system = FactorizedSystem.load(os.path.join(args.model, "system.bin"))
    outdir = _ensure_outdir(args.out)
    height = face_height(rig.mesh)
    reports = {"ours": evaluate_ours(system, bundle, rig, dataset,
                                     split=args.split)}
    if args.baselines:
        settings = _train_settings(cfg, args.seed)
        reports["lbs"] = baseline_lbs(rig, dataset, split=args.split)
        reports["pca_regression"] = baseline_pca_regression(
            rig, dataset, float(cfg["pc_percent"]), split=args.split)
        reports["local"] = baseline_local(rig, dataset, settings,
                                          split=args.split)
    summary = {}
    for name, rep in reports.items():
        print(format_report(rep, height))
        summary[name] = rep.summary(height)
        summary[name].pop("poses_tag", None)
    with open(os.path.join(outdir, "reports.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    outputs = ["reports.json"]
    ours = reports["ours"]
    export_heatmap(os.path.join(outdir, "heatmap.obj"), rig.mesh,
                   ours.per_vertex_mean())
    export_histogram(os.path.join(outdir, "histogram.csv"),
                     ours.raw_distances())
    outputs += ["heatmap.obj", "histogram.csv"]
    _write_manifest(outdir, "eval",
                    {"rig": args.rig, "data": args.data,
                     "model": args.model},
                    outputs, _settings_summary({**cfg, "seed": args.seed,
                                                "split": args.split}))
    return 0


def _pose_from_json(rig, path: str) -> Pose:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
    except FileNotFoundError:
        raise ArtifactError(f"pose file {path} not found")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"pose file {path} is not valid JSON: {exc}")
    pose_id = blob.get("pose_id", os.path.basename(path))
    if "sample_seed" in blob:
        return sample_pose(rig.spec, int(blob["sample_seed"]),
                           pose_id=pose_id)
    numeric = np.asarray(blob.get("numeric_values", []), float)
    if "joint_transforms" in blob:
        jt = np.asarray(blob["joint_transforms"], float)
        if jt.shape != (rig.spec.joint_count, 3, 4):
            raise ConfigError(
                f"joint_transforms must be ({rig.spec.joint_count}, 3, 4)")
        return Pose(jt, numeric, pose_id=pose_id)
    if "joint_channels" in blob:
        return compose_pose(rig.spec,
                            np.asarray(blob["joint_channels"], float),
                            numeric, pose_id=pose_id)
    raise ConfigError(
        "pose JSON needs sample_seed, joint_transforms, or joint_channels")


def cmd_predict(args) -> int:
    rig = _load_rig(args.rig)
    bundle = ModelBundle.load(os.path.join(args.model, "model.json"))
    system = FactorizedSystem.load(os.path.join(args.model, "system.bin"))
    pose = _pose_from_json(rig, args.pose)
    predicted = predict_full(system, bundle, rig, pose)
    save_obj(args.out, rig.mesh, positions=predicted)
    print(f"predicted pose {pose.pose_id} -> {args.out}")
    if args.compare:
        truth = rig.evaluate(pose)
        err = np.linalg.norm(predicted - truth, axis=1)
        truth_path = os.path.splitext(args.out)[0] + "_truth.obj"
        save_obj(truth_path, rig.mesh, positions=truth)
        print(f"truth -> {truth_path}")
        print(f"error: mean {err.mean():.5f} cm, max {err.max():.5f} cm")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_settings(args)
    rig = _load_rig(args.rig)
    dataset = load_dataset(args.data, rig)
    outdir = _ensure_outdir(args.out)
    settings = _train_settings(cfg, args.seed)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    anchors = dataset.anchors
    if anchors is None and args.sweep != "anchors":
        anchors = select_anchors(
            rig, rig.mesh, _anchor_count(cfg, rig.mesh.vertices.shape[0]),
            seed=args.seed)
    if args.sweep == "pc":
        rows = sweep_pc_percent(rig, dataset, anchors,
                                values or [1.0, 2.0, 5.0, 10.0], settings)
    elif args.sweep == "depth":
        rows = sweep_depth(rig, dataset, anchors,
                           [int(v) for v in (values or [1, 2, 3, 4, 5])],
                           settings)
    elif args.sweep == "anchors":
        n = rig.mesh.vertices.shape[0]
        counts = ([int(v) for v in values] if values else
                  [max(1, int(round(n * p / 100))) for p in (1, 2, 4)])
        rows = sweep_anchor_count(rig, dataset, counts, settings,
                                  seed=args.seed, omega=float(cfg["omega"]))
    elif args.sweep == "train-size":
        rows = sweep_train_size(rig, dataset, anchors,
                                values or [0.25, 0.5, 0.75, 1.0], settings,
                                seed=args.seed)
    else:
        raise ConfigError(f"unknown sweep kind {args.sweep!r}")
    csv_path = os.path.join(outdir, f"sweep_{args.sweep}.csv")
    write_sweep_csv(csv_path, rows)
    _write_manifest(outdir, "sweep",
                    {"rig": args.rig, "data": args.data},
                    [os.path.basename(csv_path)],
                    _settings_summary({**cfg, "seed": args.seed,
                                       "sweep": args.sweep,
                                       "values": args.values or "default"}))
    print(f"{len(rows)} sweep rows -> {csv_path}")
    return 0


def cmd_analyze_spectrum(args) -> int:
    cfg = _resolve_settings(args)
    rig = _load_rig(args.rig)
    mesh = rig.mesh
    outdir = _ensure_outdir(args.out)
    count = _anchor_count(cfg, mesh.vertices.shape[0])
    anchors = select_anchors(rig, mesh, count, seed=args.seed)
    omega = float(cfg["omega"])
    decomp = eigen_analysis(anchored_normal_matrix(mesh, anchors, omega))
    ratios = spectral_amplification(mesh, anchors, omega=omega)
    rows = [{"mode": i,
             "eigenvalue": float(decomp.eigenvalues[i]),
             "amplification": float(ratios[i])}
            for i in range(len(ratios))]
    csv_path = os.path.join(outdir, "spectrum.csv")
    write_sweep_csv(csv_path, rows)
    bare = condition_report(mesh, None)
    anchored = condition_report(mesh, anchors, omega=omega)
    cond = {
        "bare": {"sigma_min": bare[0], "sigma_max": bare[1]},
        "anchored": {"sigma_min": anchored[0], "sigma_max": anchored[1],
                     "anchor_count": len(anchors.indices), "omega": omega},
    }
    with open(os.path.join(outdir, "condition.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cond, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _write_manifest(outdir, "analyze-spectrum", {"rig": args.rig},
                    ["spectrum.csv", "condition.json"],
                    _settings_summary({**cfg, "seed": args.seed}))
    print(f"sigma_min rises from {bare[0]:.3e} (no anchors) to "
          f"{anchored[0]:.3e} with {len(anchors.indices)} anchors")
    return 0


# -- wiring -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="base settings (default: desk)")
    p.add_argument("--config", default=None,
                   help="JSON file overriding preset settings")
    p.add_argument("--seed", type=int, default=0)
    for key, default in PRESETS["desk"].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=key, action="store_const", const=True,
                           default=None)
        elif isinstance(default, int):
            p.add_argument(flag, dest=key, type=int, default=None)
        elif isinstance(default, float):
            p.add_argument(flag, dest=key, type=float, default=None)
        else:
            p.add_argument(flag, dest=key, default=None)
    p.add_argument("--anchor-count", dest="anchor_count", type=int,
                   default=None, help="absolute anchor count "
                   "(overrides --anchor-percent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltarig",
        description="Rig approximation via differential-coordinate "
                    "reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-rig", help="build a synthetic test rig")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_rig)

    p = sub.add_parser("gen-data", help="sample poses and extract residuals")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-anchors", action="store_true",
                   help="skip anchor selection (pick them at training time)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the nets and factorize the solver")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reselect-anchors", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the model (and baselines)")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True,
                   help="training output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["test", "train", "all"],
                   default="test")
    p.add_argument("--baselines", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one pose to an OBJ")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--compare", action="store_true",
                   help="also write ground truth and print the error")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="parameter sweeps to CSV")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", required=True,
                   choices=["pc", "depth", "anchors", "train-size"])
    p.add_argument("--values", default=None,
                   help="comma separated sweep values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-spectrum",
                       help="solver eigenvalues and conditioning")
    _add_common(p)
    p.add_argument("--rig", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_spectrum)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except HashMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (RankDeficiencyError, SingularTransformError,
            TrainingDivergedError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except DeltaRigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
