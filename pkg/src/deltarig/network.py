"""Hand-rolled fully connected networks, PCA projection, and the trained
model bundle.

Everything is float64 numpy with explicit seeding: a fixed seed gives
bit-identical training runs. Hidden layers are ReLU, outputs linear. The
optimizer is plain SGD with the reciprocal decay schedule
lr_t = lr0 / (1 + decay * t) counted in global steps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (ArtifactError, ConfigError, DimensionMismatchError,
                     TrainingDivergedError)
from .mesh import VertexField
from .reconstruction import AnchorSet
from .rig import Normalization, Pose, vectorize

log = logging.getLogger(__name__)


# -- losses -------------------------------------------------------------------

def loss_and_grad(name: str, pred: np.ndarray, target: np.ndarray):
    """Mean-reduced loss value and gradient w.r.t. pred."""
    diff = pred - target
    n = diff.size
    if name == "l2":
        return float(np.mean(diff * diff)), (2.0 / n) * diff
    if name == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    raise ConfigError(f"unknown loss {name!r}; expected 'l1' or 'l2'")


# -- the network --------------------------------------------------------------

class MLP:
    """Fully connected net: sizes[0] inputs, ReLU hidden layers, linear
    output of sizes[-1]. Weights initialize uniform in
    +-sqrt(6 / (fan_in + fan_out))."""

    def __init__(self, sizes, seed: int = 0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.sizes[0]:
            raise DimensionMismatchError(
                f"input dim {a.shape[1]}, network expects {self.sizes[0]}")
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if l < last:
                np.maximum(a, 0.0, out=a)
        return a[0] if squeeze else a

    def _forward_cache(self, x: np.ndarray):
        acts = [x]
        pre = []
        a = x
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            a = np.maximum(z, 0.0) if l < last else z
            acts.append(a)
        return acts, pre

    def loss_grads(self, x: np.ndarray, y: np.ndarray, loss: str):
        """Loss value plus gradient lists (dW per layer, db per layer)."""
        acts, pre = self._forward_cache(np.asarray(x, float))
        value, g = loss_and_grad(loss, acts[-1], np.asarray(y, float))
        dw = [None] * self.n_layers
        db = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            dw[l] = acts[l].T @ g
            db[l] = g.sum(axis=0)
            if l > 0:
                g = (g @ self.weights[l].T) * (pre[l - 1] > 0.0)
        return value, dw, db

    def copy(self) -> "MLP":
        dup = MLP.__new__(MLP)
        dup.sizes = list(self.sizes)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


@dataclass
class TrainConfig:
    epochs: int = 10000
    batch_size: int = 128
    learning_rate: float = 0.1
    decay: float = 1e-6
    loss: str = "l1"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.decay < 0:
            raise ConfigError("learning_rate must be > 0 and decay >= 0")
        loss_and_grad(self.loss, np.zeros(1), np.zeros(1))


def train(mlp: MLP, x: np.ndarray, y: np.ndarray,
          cfg: TrainConfig) -> list[float]:
    """SGD with per-epoch reshuffling. Returns the per-epoch mean batch loss
    trace. Raises TrainingDivergedError naming the epoch if the loss stops
    being finite."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionMismatchError(
            f"training data shapes {x.shape} vs {y.shape}")
    if x.shape[0] == 0:
        raise ConfigError("cannot train on an empty dataset")
    m = x.shape[0]
    rng = np.random.default_rng(cfg.seed)
    step = 0
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        total = 0.0
        batches = 0
        for start in range(0, m, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            value, dw, db = mlp.loss_grads(x[sel], y[sel], cfg.loss)
            lr = cfg.learning_rate / (1.0 + cfg.decay * step)
            for l in range(mlp.n_layers):
                mlp.weights[l] -= lr * dw[l]
                mlp.biases[l] -= lr * db[l]
            total += value
            batches += 1
            step += 1
        epoch_loss = total / batches
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch} (loss {epoch_loss})",
                epoch=epoch)
        trace.append(epoch_loss)
    return trace


def grad_check(mlp: MLP, x: np.ndarray, y: np.ndarray, loss: str,
               n_params: int = 200, h: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences
    over a random subset of at least n_params parameters."""
    x = np.atleast_2d(np.asarray(x, float))
    y = np.atleast_2d(np.asarray(y, float))
    _, dw, db = mlp.loss_grads(x, y, loss)
    flat = []
    for l in range(mlp.n_layers):
        flat.append(("w", l, mlp.weights[l], dw[l]))
        flat.append(("b", l, mlp.biases[l], db[l]))
    total = mlp.param_count()
    n_params = min(n_params, total)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=n_params, replace=False)
    bounds = np.cumsum([arr.size for _, _, arr, _ in flat])
    worst = 0.0
    for pick in chosen:
        slot = int(np.searchsorted(bounds, pick, side="right"))
        offset = int(pick - (bounds[slot - 1] if slot else 0))
        _, _, arr, grad = flat[slot]
        idx = np.unravel_index(offset, arr.shape)
        keep = arr[idx]
        arr[idx] = keep + h
        up, _ = loss_and_grad(loss, mlp.forward(x), y)
        arr[idx] = keep - h
        down, _ = loss_and_grad(loss, mlp.forward(x), y)
        arr[idx] = keep
        numeric = (up - down) / (2.0 * h)
        analytic = grad[idx]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# -- PCA ----------------------------------------------------------------------

@dataclass
class PCABasis:
    """Orthonormal row basis with the training mean.

    components[i] pairs with singular_values[i], largest variance first.
    total_variance is the full-rank sum of squared singular values, kept so
    energy fractions do not depend on k.
    """

    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    total_variance: float

    def __post_init__(self):
        # C-contiguous layout so matmuls round identically before and after
        # a save/load cycle
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.components = np.ascontiguousarray(self.components,
                                               dtype=np.float64)
        self.singular_values = np.ascontiguousarray(self.singular_values,
                                                    dtype=np.float64)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def project(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, float)
        return (data - self.mean) @ self.components.T

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, float)
        return coeffs @ self.components + self.mean

    def energy_fraction(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(np.sum(self.singular_values ** 2) / self.total_variance)


def pca_fit(data: np.ndarray, k: int) -> PCABasis:
    """Principal directions of the rows of data.

    Uses the Gram-matrix (dual) route when dim > samples so fitting stays
    O(m^2 dim). Components are re-orthonormalized and sign-fixed (largest
    entry positive) so the basis is deterministic.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionMismatchError(f"pca data must be 2-D, got {data.shape}")
    m, d = data.shape
    if not (1 <= k <= min(m, d)):
        raise ConfigError(
            f"pca k={k} out of range 1..min(samples={m}, dim={d})")
    mean = data.mean(axis=0)
    xc = data - mean
    total = float(np.sum(xc * xc))
    if d <= m:
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        comp = vt[:k]
        sv = s[:k]
    else:
        gram = xc @ xc.T
        w, u = np.linalg.eigh(gram)
        order = np.argsort(w)[::-1][:k]
        w = np.clip(w[order], 0.0, None)
        sv = np.sqrt(w)
        safe = np.where(sv > 1e-12 * max(np.sqrt(total), 1.0), sv, 1.0)
        comp = (xc.T @ u[:, order] / safe).T
    # roundoff cleanup + deterministic orientation
    q, r = np.linalg.qr(comp.T)
    comp = (q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))).T
    lead = np.argmax(np.abs(comp), axis=1)
    signs = np.sign(comp[np.arange(k), lead])
    signs[signs == 0] = 1.0
    comp = comp * signs[:, None]
    return PCABasis(mean, comp, sv, total)


def pca_pick_k(n_vertices: int, percent: float) -> int:
    """Component count as a percentage of vertex count (default policy)."""
    k = int(round(n_vertices * percent / 100.0))
    return max(1, k)


def pca_fit_energy(data: np.ndarray, threshold: float) -> PCABasis:
    """Alternative selection: smallest k whose retained spectrum energy
    reaches threshold (0 < threshold <= 1)."""
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"energy threshold {threshold} not in (0, 1]")
    data = np.asarray(data, dtype=np.float64)
    m, d = data.shape
    full = pca_fit(data, min(m, d))
    energies = np.cumsum(full.singular_values ** 2)
    tot = full.total_variance if full.total_variance > 0 else 1.0
    k = int(np.searchsorted(energies / tot, threshold) + 1)
    k = min(k, full.k)
    return PCABasis(full.mean, full.components[:k],
                    full.singular_values[:k], full.total_variance)


# -- model wrappers -----------------------------------------------------------

@dataclass
class DifferentialModel:
    """Feature vector -> degree-weighted differential field, factored through
    a PCA of the training labels. The net predicts PC coefficients and is
    trained against projected labels (loss lives in PC space)."""

    net: MLP
    pca: PCABasis

    def predict_coeffs(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward(np.atleast_2d(np.asarray(features, float)))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """(m, 3n) flattened weighted differentials."""
        return self.pca.reconstruct(self.predict_coeffs(features))


def build_differential_net(feature_dim: int, pca: PCABasis,
                           hidden_layers: int = 5, width: int = 2048,
                           seed: int = 0) -> DifferentialModel:
    if hidden_layers < 1 or width < 1:
        raise ConfigError("hidden_layers and width must be >= 1")
    sizes = [feature_dim] + [width] * hidden_layers + [pca.k]
    return DifferentialModel(MLP(sizes, seed=seed), pca)


@dataclass
class SubspaceModel:
    """Anchor-value predictor. Either one small net per anchor, each reading
    only its influence slice of the feature vector, or a single combined net
    reading everything (the comparison variant). Output layout is identical:
    (m, anchors, 3)."""

    kind: str                    # "mini" or "single"
    nets: list
    slices: list[np.ndarray]
    anchor_count: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, float))
        m = f.shape[0]
        if self.kind == "single":
            out = self.nets[0].forward(f)
            return out.reshape(m, self.anchor_count, 3)
        out = np.empty((m, self.anchor_count, 3))
        for a, (net, sl) in enumerate(zip(self.nets, self.slices)):
            out[:, a, :] = net.forward(f[:, sl])
        return out


_FALLBACK_SLICE = 16


def build_subspace_nets(feature_dim: int, slices, hidden_layers: int = 3,
                        width: int = 64, seed: int = 0) -> SubspaceModel:
    """One mini-net per anchor; slices come from the influence map translated
    to feature indices. An empty slice falls back to a fixed global slice and
    logs a warning (an anchor no control moves is suspicious but survivable).
    """
    nets = []
    fixed = []
    root = np.random.SeedSequence(seed)
    for a, sl in enumerate(slices):
        sl = np.asarray(sl, dtype=np.int64)
        if sl.size == 0:
            log.warning("anchor %d has an empty influence slice; "
                        "falling back to the first %d features", a,
                        min(_FALLBACK_SLICE, feature_dim))
            sl = np.arange(min(_FALLBACK_SLICE, feature_dim), dtype=np.int64)
        if sl.min() < 0 or sl.max() >= feature_dim:
            raise ConfigError(f"influence slice for anchor {a} out of range")
        sizes = [sl.size] + [width] * hidden_layers + [3]
        child = np.random.SeedSequence(entropy=root.entropy, spawn_key=(a,))
        nets.append(MLP(sizes, seed=child))
        fixed.append(sl)
    return SubspaceModel("mini", nets, fixed, len(fixed))


def build_single_subspace_net(feature_dim: int, anchor_count: int,
                              hidden_layers: int = 3, width: int = 64,
                              seed: int = 0) -> SubspaceModel:
    sizes = [feature_dim] + [width] * hidden_layers + [3 * anchor_count]
    full = np.arange(feature_dim, dtype=np.int64)
    return SubspaceModel("single", [MLP(sizes, seed=seed)],
                         [full] * anchor_count, anchor_count)


# -- bundle -------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Everything needed to predict: nets, PCA, normalization, anchors, and
    the identity of the mesh it was all fitted on."""

    differential: DifferentialModel
    subspace: SubspaceModel
    normalization: Normalization
    anchors: AnchorSet
    mesh_hash: str
    n_vertices: int
    feature_dim: int
    meta: dict = field(default_factory=dict)

    def predict(self, pose: Pose) -> tuple[VertexField, np.ndarray]:
        """Network outputs for one pose: the degree-weighted differential
        field and the anchor displacement targets."""
        f = vectorize(pose, self.normalization)
        dd = self.differential.predict(f)[0]
        if dd.size != 3 * self.n_vertices:
            raise DimensionMismatchError(
                f"differential net emits {dd.size} values, mesh needs "
                f"{3 * self.n_vertices}")
        targets = self.subspace.predict(f)[0]
        return (VertexField(dd.reshape(self.n_vertices, 3),
                            space="differential_weighted"), targets)

    # -- serialization ------------------------------------------------------

    def _arrays(self):
        """Blob layout, in order. Names are informative only; order is the
        contract."""
        items = [
            ("pca.mean", self.differential.pca.mean),
            ("pca.components", self.differential.pca.components),
            ("pca.singular_values", self.differential.pca.singular_values),
        ]
        for l in range(self.differential.net.n_layers):
            items.append((f"diff.w{l}", self.differential.net.weights[l]))
            items.append((f"diff.b{l}", self.differential.net.biases[l]))
        for a, net in enumerate(self.subspace.nets):
            for l in range(net.n_layers):
                items.append((f"sub{a}.w{l}", net.weights[l]))
                items.append((f"sub{a}.b{l}", net.biases[l]))
        return items

    def save(self, json_path) -> None:
        json_path = str(json_path)
        blob_path = os.path.splitext(json_path)[0] + ".weights"
        blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for _, a in self._arrays())
        manifest = {
            "format": "deltarig-bundle",
            "version": 1,
            "mesh_hash": self.mesh_hash,
            "n_vertices": self.n_vertices,
            "feature_dim": self.feature_dim,
            "pca": {"k": self.differential.pca.k,
                    "dim": self.differential.pca.dim,
                    "total_variance": self.differential.pca.total_variance},
            "differential_sizes": self.differential.net.sizes,
            "subspace": {
                "kind": self.subspace.kind,
                "anchor_count": self.subspace.anchor_count,
                "sizes": [net.sizes for net in self.subspace.nets],
                "slices": [s.tolist() for s in self.subspace.slices],
            },
            "normalization": self.normalization.to_dict(),
            "anchors": {"indices": self.anchors.indices.tolist(),
                        "weights": self.anchors.weights.tolist()},
            "meta": self.meta,
            "weights_file": os.path.basename(blob_path),
            "weights_sha256": hashlib.sha256(blob).hexdigest(),
            "layout": [[name, list(a.shape)] for name, a in self._arrays()],
        }
        with open(blob_path, "wb") as fh:
            fh.write(blob)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, json_path) -> "ModelBundle":
        json_path = str(json_path)
        with open(json_path, "r", encoding="utf-8") as fh:
            man = json.load(fh)
        if man.get("format") != "deltarig-bundle":
            raise ArtifactError(f"{json_path} is not a model bundle manifest")
        blob_path = os.path.join(os.path.dirname(json_path) or ".",
                                 man["weights_file"])
        with open(blob_path, "rb") as fh:
            blob = fh.read()
        if hashlib.sha256(blob).hexdigest() != man["weights_sha256"]:
            raise ArtifactError("weight blob does not match manifest hash")
        offset = 0

        def take(shape):
            nonlocal offset
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size,
                                offset=offset).reshape(shape).copy()
            offset += size * 8
            return arr

        layout = man["layout"]
        arrays = {}
        for name, shape in layout:
            arrays[name] = take(shape)
        pca = PCABasis(arrays["pca.mean"], arrays["pca.components"],
                       arrays["pca.singular_values"],
                       man["pca"]["total_variance"])
        dnet = MLP.__new__(MLP)
        dnet.sizes = list(man["differential_sizes"])
        dnet.weights = [arrays[f"diff.w{l}"] for l in range(len(dnet.sizes) - 1)]
        dnet.biases = [arrays[f"diff.b{l}"] for l in range(len(dnet.sizes) - 1)]
        sub = man["subspace"]
        nets = []
        for a, sizes in enumerate(sub["sizes"]):
            net = MLP.__new__(MLP)
            net.sizes = list(sizes)
            net.weights = [arrays[f"sub{a}.w{l}"] for l in range(len(sizes) - 1)]
            net.biases = [arrays[f"sub{a}.b{l}"] for l in range(len(sizes) - 1)]
            nets.append(net)
        subspace = SubspaceModel(sub["kind"], nets,
                                 [np.asarray(s, dtype=np.int64)
                                  for s in sub["slices"]],
                                 sub["anchor_count"])
        return cls(DifferentialModel(dnet, pca), subspace,
                   Normalization.from_dict(man["normalization"]),
                   AnchorSet(man["anchors"]["indices"],
                             man["anchors"]["weights"]),
                   man["mesh_hash"], man["n_vertices"], man["feature_dim"],
                   man.get("meta", {}))
