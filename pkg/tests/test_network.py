"""Networks, losses, PCA, and the trained-model bundle."""

import json

import numpy as np
import pytest

from deltarig import (ArtifactError, ConfigError, DimensionMismatchError,
                      MLP, ModelBundle, Normalization, PCABasis, TrainConfig,
                      TrainingDivergedError, grad_check, loss_and_grad,
                      pca_fit, pca_fit_energy, pca_pick_k, train)
from deltarig.network import (DifferentialModel, SubspaceModel,
                              build_differential_net, build_single_subspace_net,
                              build_subspace_nets)
from deltarig.reconstruction import AnchorSet
from deltarig.rig import RigSpec, compose_pose


# -- losses -------------------------------------------------------------------

def test_l2_loss_hand_values():
    pred = np.array([[1.0, 2.0]])
    target = np.zeros((1, 2))
    value, grad = loss_and_grad("l2", pred, target)
    assert value == 2.5                       # (1 + 4) / 2
    assert np.array_equal(grad, [[1.0, 2.0]])  # 2 * diff / n


def test_l1_loss_hand_values():
    pred = np.array([[1.0, -2.0]])
    target = np.zeros((1, 2))
    value, grad = loss_and_grad("l1", pred, target)
    assert value == 1.5
    assert np.array_equal(grad, [[0.5, -0.5]])


def test_unknown_loss_rejected():
    with pytest.raises(ConfigError):
        loss_and_grad("huber", np.zeros(1), np.zeros(1))


# -- MLP ----------------------------------------------------------------------

def test_mlp_init_bounds_and_zero_bias():
    net = MLP([10, 20, 4], seed=5)
    for w, (fi, fo) in zip(net.weights, [(10, 20), (20, 4)]):
        bound = np.sqrt(6.0 / (fi + fo))
        assert w.shape == (fi, fo)
        assert np.all(np.abs(w) <= bound)
        assert np.std(w) > 0.1 * bound
    for b in net.biases:
        assert np.all(b == 0.0)


def test_mlp_bad_sizes():
    with pytest.raises(ConfigError):
        MLP([4])
    with pytest.raises(ConfigError):
        MLP([4, 0, 2])


def test_forward_hand_computed():
    net = MLP([2, 2, 1], seed=0)
    net.weights[0] = np.array([[1.0, 0.0], [0.0, 1.0]])
    net.biases[0] = np.array([0.0, -1.0])
    net.weights[1] = np.array([[1.0], [1.0]])
    net.biases[1] = np.array([0.5])
    # z0 = [2, -0.5] -> relu [2, 0] -> 2 + 0 + 0.5
    out = net.forward(np.array([2.0, 0.5]))
    assert out.shape == (1,)
    assert out[0] == 2.5
    batch = net.forward(np.array([[2.0, 0.5], [0.0, 0.0]]))
    assert batch.shape == (2, 1)
    assert batch[1, 0] == 0.5  # all pre-activations clip to 0, bias remains


def test_forward_dim_mismatch():
    net = MLP([3, 2], seed=0)
    with pytest.raises(DimensionMismatchError):
        net.forward(np.zeros(4))


def test_grad_check_both_losses():
    rng = np.random.default_rng(7)
    net = MLP([7, 16, 16, 5], seed=7)
    x = rng.standard_normal((12, 7))
    y = rng.standard_normal((12, 5))
    assert grad_check(net, x, y, "l2", n_params=150, seed=1) < 1e-4
    assert grad_check(net, x, y, "l1", n_params=150, seed=1) < 1e-4


def test_grad_check_catches_broken_gradient():
    # sanity that the checker is not vacuous: corrupt one weight gradient by
    # monkeypatching the loss to a mismatched pair
    net = MLP([3, 4, 2], seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))
    good = grad_check(net, x, y, "l2", n_params=40, seed=0)
    net.weights[0] *= 1.0  # no-op, gradient still consistent
    assert good < 1e-4
    broken = net.copy()
    original = broken.loss_grads

    def tampered(xx, yy, loss):
        value, dw, db = original(xx, yy, loss)
        dw[0] = dw[0] + 0.05
        return value, dw, db

    broken.loss_grads = tampered
    assert grad_check(broken, x, y, "l2", n_params=40, seed=0) > 1e-2


# -- training -----------------------------------------------------------------

def _linear_problem(m=64, din=5, dout=3, seed=2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, din))
    w = rng.standard_normal((din, dout))
    return x, x @ w


def test_train_loss_decreases():
    x, y = _linear_problem()
    net = MLP([5, 16, 3], seed=4)
    trace = train(net, x, y, TrainConfig(epochs=60, batch_size=16,
                                         learning_rate=0.05, loss="l2",
                                         seed=4))
    assert len(trace) == 60
    assert trace[-1] < 0.2 * trace[0]


def test_train_bit_reproducible():
    x, y = _linear_problem()
    nets = []
    for _ in range(2):
        net = MLP([5, 8, 3], seed=9)
        train(net, x, y, TrainConfig(epochs=5, batch_size=16, loss="l1",
                                     seed=9))
        nets.append(net)
    for wa, wb in zip(nets[0].weights, nets[1].weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(nets[0].biases, nets[1].biases):
        assert np.array_equal(ba, bb)


def test_train_matches_manual_sgd():
    # one epoch with a ragged final batch, replayed by hand: pins the
    # shuffling, the global-step lr schedule, and the update order
    x, y = _linear_problem(m=5)
    cfg = TrainConfig(epochs=1, batch_size=2, learning_rate=0.05,
                      decay=0.5, loss="l2", seed=31)
    net = MLP([5, 4, 3], seed=8)
    twin = net.copy()
    train(net, x, y, cfg)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(5)
    step = 0
    for start in (0, 2, 4):
        sel = order[start:start + 2]
        _, dw, db = twin.loss_grads(x[sel], y[sel], "l2")
        lr = cfg.learning_rate / (1.0 + cfg.decay * step)
        for l in range(twin.n_layers):
            twin.weights[l] -= lr * dw[l]
            twin.biases[l] -= lr * db[l]
        step += 1
    for wa, wb in zip(net.weights, twin.weights):
        assert np.array_equal(wa, wb)


def test_train_divergence_raises_with_epoch():
    x, y = _linear_problem(m=32)
    net = MLP([5, 8, 3], seed=1)
    with pytest.raises(TrainingDivergedError) as exc, \
            np.errstate(over="ignore", invalid="ignore"):
        train(net, x, y * 1e6, TrainConfig(epochs=200, batch_size=8,
                                           learning_rate=1e4, loss="l2",
                                           seed=1))
    assert isinstance(exc.value.epoch, int)
    assert exc.value.epoch >= 0


def test_train_shape_validation():
    net = MLP([3, 2], seed=0)
    with pytest.raises(DimensionMismatchError):
        train(net, np.zeros((4, 3)), np.zeros((5, 2)), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train(net, np.zeros((0, 3)), np.zeros((0, 2)), TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0).validate()


# -- PCA ----------------------------------------------------------------------

def test_pca_matches_svd_oracle():
    rng = np.random.default_rng(12)
    data = rng.standard_normal((20, 7))
    basis = pca_fit(data, 7)
    xc = data - data.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    assert np.allclose(basis.singular_values, s, atol=1e-10)
    # compare projectors: sign and rotation free
    ours = basis.components.T @ basis.components
    ref = vt.T @ vt
    assert np.allclose(ours, ref, atol=1e-10)


def test_pca_orthonormal_and_sign_fixed():
    rng = np.random.default_rng(3)
    basis = pca_fit(rng.standard_normal((15, 9)), 6)
    assert np.allclose(basis.components @ basis.components.T, np.eye(6),
                       atol=1e-12)
    lead = np.argmax(np.abs(basis.components), axis=1)
    assert np.all(basis.components[np.arange(6), lead] > 0)


def test_pca_dual_path_matches_svd():
    # dim > samples takes the Gram route; same oracle must hold
    rng = np.random.default_rng(5)
    data = rng.standard_normal((10, 50))
    basis = pca_fit(data, 5)
    xc = data - data.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    assert np.allclose(basis.singular_values, s[:5], atol=1e-8)
    assert np.allclose(basis.components @ basis.components.T, np.eye(5),
                       atol=1e-10)
    ours = basis.components.T @ basis.components
    ref = vt[:5].T @ vt[:5]
    assert np.allclose(ours, ref, atol=1e-8)


def test_pca_reprojection_monotone_in_k():
    rng = np.random.default_rng(8)
    data = rng.standard_normal((30, 12))
    errs = []
    for k in range(1, 13):
        basis = pca_fit(data, k)
        back = basis.reconstruct(basis.project(data))
        errs.append(float(np.sqrt(np.mean((back - data) ** 2))))
    for a, b in zip(errs, errs[1:]):
        assert b <= a + 1e-12
    assert errs[-1] < 1e-10  # full rank reproduces the data


def test_pca_exact_on_low_rank_data():
    rng = np.random.default_rng(21)
    data = rng.standard_normal((40, 3)) @ rng.standard_normal((3, 25))
    basis = pca_fit(data, 3)
    back = basis.reconstruct(basis.project(data))
    assert np.max(np.abs(back - data)) < 1e-9


def test_pca_validation():
    with pytest.raises(ConfigError):
        pca_fit(np.zeros((4, 4)), 0)
    with pytest.raises(ConfigError):
        pca_fit(np.zeros((4, 4)), 5)
    with pytest.raises(DimensionMismatchError):
        pca_fit(np.zeros(4), 1)


def test_pca_pick_k():
    assert pca_pick_k(4000, 5.0) == 200
    assert pca_pick_k(300, 5.0) == 15
    assert pca_pick_k(10, 0.1) == 1  # floor at one component


def test_pca_fit_energy_threshold():
    rng = np.random.default_rng(17)
    data = rng.standard_normal((25, 10))
    full = pca_fit(data, 10)
    fractions = np.cumsum(full.singular_values ** 2) / full.total_variance
    for threshold in (0.3, 0.8, 0.99):
        basis = pca_fit_energy(data, threshold)
        k = basis.k
        assert fractions[k - 1] >= threshold
        if k > 1:
            assert fractions[k - 2] < threshold
    assert pca_fit_energy(data, 1.0).k == 10
    with pytest.raises(ConfigError):
        pca_fit_energy(data, 0.0)
    with pytest.raises(ConfigError):
        pca_fit_energy(data, 1.5)


def test_pca_basis_made_contiguous():
    comp = np.asfortranarray(np.eye(3)[:2])
    basis = PCABasis(np.zeros(3), comp, np.ones(2), 2.0)
    assert basis.components.flags["C_CONTIGUOUS"]


def test_energy_fraction_degenerate():
    basis = PCABasis(np.zeros(2), np.eye(2), np.zeros(2), 0.0)
    assert basis.energy_fraction() == 1.0


# -- model wrappers -----------------------------------------------------------

def test_differential_model_composition():
    rng = np.random.default_rng(2)
    basis = pca_fit(rng.standard_normal((12, 9)), 4)
    model = build_differential_net(6, basis, hidden_layers=2, width=8, seed=3)
    assert model.net.sizes == [6, 8, 8, 4]
    x = rng.standard_normal((5, 6))
    expect = basis.reconstruct(model.net.forward(x))
    assert np.array_equal(model.predict(x), expect)
    with pytest.raises(ConfigError):
        build_differential_net(6, basis, hidden_layers=0)


def test_subspace_mini_nets_slice_inputs():
    slices = [np.array([0, 2]), np.array([1, 3, 4])]
    model = build_subspace_nets(5, slices, hidden_layers=1, width=4, seed=6)
    rng = np.random.default_rng(6)
    f = rng.standard_normal((3, 5))
    out = model.predict(f)
    assert out.shape == (3, 2, 3)
    for a in range(2):
        assert np.array_equal(out[:, a, :],
                              model.nets[a].forward(f[:, slices[a]]))


def test_subspace_per_anchor_seeds_differ_and_rebuild():
    slices = [np.arange(4), np.arange(4)]
    one = build_subspace_nets(4, slices, seed=9)
    two = build_subspace_nets(4, slices, seed=9)
    assert np.array_equal(one.nets[0].weights[0], two.nets[0].weights[0])
    assert not np.array_equal(one.nets[0].weights[0], one.nets[1].weights[0])


def test_subspace_empty_slice_fallback(caplog):
    import logging
    with caplog.at_level(logging.WARNING, logger="deltarig.network"):
        model = build_subspace_nets(40, [np.array([], dtype=int)])
    assert np.array_equal(model.slices[0], np.arange(16))
    assert any("empty influence slice" in r.message for r in caplog.records)
    with pytest.raises(ConfigError):
        build_subspace_nets(4, [np.array([7])])


def test_single_subspace_shape():
    model = build_single_subspace_net(5, anchor_count=3, hidden_layers=1,
                                      width=4, seed=2)
    out = model.predict(np.zeros((2, 5)))
    assert out.shape == (2, 3, 3)


# -- bundle -------------------------------------------------------------------

def _tiny_bundle(n_vertices=4, joints=1, numerics=2):
    feature_dim = 12 * joints + numerics
    rng = np.random.default_rng(14)
    labels = rng.standard_normal((10, 3 * n_vertices))
    basis = pca_fit(labels, 3)
    diff = build_differential_net(feature_dim, basis, hidden_layers=1,
                                  width=6, seed=1)
    sub = build_subspace_nets(feature_dim, [np.arange(3), np.array([0, 13])],
                              hidden_layers=1, width=4, seed=2)
    norm = Normalization(1.0, np.zeros(numerics), np.ones(numerics))
    anchors = AnchorSet([0, 2], [1.0, 2.0])
    return ModelBundle(diff, sub, norm, anchors, "meshhash", n_vertices,
                       feature_dim, {"note": "tiny"})


def _tiny_pose(joints=1, numerics=2, seed=3):
    pivots = np.zeros((joints, 3))
    rot = np.tile(np.array([-0.3, 0.3]), (joints, 3, 1))
    trans = np.tile(np.array([-0.1, 0.1]), (joints, 3, 1))
    numeric = np.tile(np.array([-1.0, 1.0]), (numerics, 1))
    spec = RigSpec(pivots, rot, trans, numeric)
    rng = np.random.default_rng(seed)
    ch = rng.uniform(-0.1, 0.1, (joints, 6))
    nv = rng.uniform(-0.5, 0.5, numerics)
    return compose_pose(spec, ch, nv)


def test_bundle_predict_shapes():
    bundle = _tiny_bundle()
    delta, targets = bundle.predict(_tiny_pose())
    assert delta.values.shape == (4, 3)
    assert delta.space == "differential_weighted"
    assert targets.shape == (2, 3)


def test_bundle_roundtrip_bit_identical(tmp_path):
    bundle = _tiny_bundle()
    path = tmp_path / "model.json"
    bundle.save(path)
    again = ModelBundle.load(path)
    pose = _tiny_pose(seed=5)
    d0, t0 = bundle.predict(pose)
    d1, t1 = again.predict(pose)
    assert np.array_equal(d0.values, d1.values)
    assert np.array_equal(t0, t1)
    assert again.meta == {"note": "tiny"}
    assert again.mesh_hash == "meshhash"
    assert np.array_equal(again.anchors.indices, bundle.anchors.indices)
    for a, b in zip(bundle.subspace.slices, again.subspace.slices):
        assert np.array_equal(a, b)


def test_bundle_corrupt_blob_rejected(tmp_path):
    bundle = _tiny_bundle()
    path = tmp_path / "model.json"
    bundle.save(path)
    blob = tmp_path / "model.weights"
    raw = bytearray(blob.read_bytes())
    raw[13] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ArtifactError):
        ModelBundle.load(path)


def test_bundle_wrong_format_rejected(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ArtifactError):
        ModelBundle.load(path)


def test_bundle_size_mismatch_caught():
    bundle = _tiny_bundle()
    bundle.n_vertices = 5  # mesh grew, net did not
    with pytest.raises(DimensionMismatchError):
        bundle.predict(_tiny_pose())
