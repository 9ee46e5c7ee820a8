import numpy as np
import pytest

from voxseg import errors, net
from voxseg.net import layers, model
from voxseg.volio import Volume

from conftest import GRADCHECK_TOL, make_shell_phantom, overfit_dice


# --- configuration and parameter bookkeeping ---

def test_default_config_architecture_constants():
    cfg = net.NetConfig()
    assert [cfg.filters(j) for j in (1, 2, 3, 4)] == [16, 32, 64, 128]
    assert cfg.strides == ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2))
    assert cfg.total_stride == (8, 8, 8)
    assert cfg.n_classes == 4
    assert cfg.leakiness == 0.1


def test_config_validation():
    with pytest.raises(errors.ShapeMismatch):
        net.NetConfig(n_scales=1)
    with pytest.raises(errors.ShapeMismatch):
        net.NetConfig(strides=((1, 1, 1),))  # one triple for four scales
    with pytest.raises(errors.ShapeMismatch):
        net.NetConfig(n_scales=2, strides=((1, 1, 1), (3, 3, 3)))


def test_param_shapes_and_init():
    cfg = net.NetConfig(n_scales=2, base_filters=4)
    shapes = net.param_shapes(cfg)
    assert shapes["init_conv.w"] == (3, 3, 3, 1, 4)
    assert shapes["s2.down.w"] == (3, 3, 3, 4, 8)
    assert shapes["score1.w"] == (1, 1, 1, 4, 4)
    assert shapes["score2.w"] == (1, 1, 1, 8, 4)
    params = net.init_params(cfg, seed=0)
    assert set(params) == set(shapes)
    for name, arr in params.items():
        assert arr.shape == shapes[name]
        if name.endswith((".gamma", ".var")):
            assert np.all(arr == 1.0)
        elif name.endswith((".b", ".beta", ".mean")):
            assert np.all(arr == 0.0)
    assert all(not model.is_state_param(n) or n.endswith((".mean", ".var"))
               for n in shapes)


def test_init_from_checkpoint_validation():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    good = net.init_params(cfg, seed=1)
    rebuilt = net.init_params(cfg, checkpoint=good)
    for name in good:
        np.testing.assert_array_equal(rebuilt[name], good[name])

    missing = dict(good)
    missing.pop("init_conv.w")
    with pytest.raises(errors.BadCheckpoint):
        net.init_params(cfg, checkpoint=missing)

    wrong = dict(good)
    wrong["init_conv.w"] = np.zeros((3, 3, 3, 1, 7))
    with pytest.raises(errors.ShapeMismatch):
        net.init_params(cfg, checkpoint=wrong)


# --- layer-level oracles ---

def _naive_conv3d(x, w, b, stride):
    batch, d0, d1, d2, cin = x.shape
    cout = w.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    out_dims = [(d - 1) // s + 1 for d, s in zip((d0, d1, d2), stride)]
    y = np.zeros((batch, *out_dims, cout))
    for n in range(batch):
        for i in range(out_dims[0]):
            for j in range(out_dims[1]):
                for k in range(out_dims[2]):
                    block = xp[n,
                               i * stride[0]:i * stride[0] + 3,
                               j * stride[1]:j * stride[1] + 3,
                               k * stride[2]:k * stride[2] + 3]
                    y[n, i, j, k] = np.tensordot(block, w, axes=4) + b
    return y


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2), (1, 2, 2)])
def test_conv3d_matches_naive_loop_oracle(stride):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (2, 5, 6, 4, 3))
    w = rng.normal(0, 1, (3, 3, 3, 3, 2))
    b = rng.normal(0, 1, 2)
    y, _ = layers.conv3x3_forward(x, w, b, stride)
    np.testing.assert_allclose(y, _naive_conv3d(x, w, b, stride), atol=1e-10)


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2)])
def test_conv3d_backward_is_adjoint(stride):
    # <conv(x), dy> == <x, conv_backward(dy)> for the linear (bias-free) part
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (1, 6, 6, 6, 2))
    w = rng.normal(0, 1, (3, 3, 3, 2, 3))
    b = np.zeros(3)
    y, cache = layers.conv3x3_forward(x, w, b, stride)
    dy = rng.normal(0, 1, y.shape)
    dx, dw, db = layers.conv3x3_backward(cache, dy)
    # y is linear in x at fixed w and linear in w at fixed x, so the same
    # inner product must come out of both adjoints
    assert np.vdot(y, dy) == pytest.approx(np.vdot(x, dx))
    assert np.vdot(y, dy) == pytest.approx(np.vdot(w, dw))
    np.testing.assert_allclose(db, dy.sum(axis=(0, 1, 2, 3)))


def test_upsample_backward_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 1, (1, 4, 5, 3, 2))
    y, cache = layers.upsample_forward(x, (2, 2, 2))
    assert y.shape == (1, 8, 10, 6, 2)
    dy = rng.normal(0, 1, y.shape)
    dx = layers.upsample_backward(cache, dy)
    assert np.vdot(y, dy) == pytest.approx(np.vdot(x, dx))


def test_upsample_constant_preserved():
    x = np.full((1, 3, 3, 3, 1), 7.0)
    y, _ = layers.upsample_forward(x, (2, 2, 2))
    np.testing.assert_allclose(y, 7.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 10, (2, 4, 4, 4, 5))
    p = layers.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert p.min() >= 0


def test_batchnorm_train_output_is_normalized():
    rng = np.random.default_rng(4)
    x = rng.normal(3, 5, (2, 6, 6, 6, 3))
    gamma = np.ones(3)
    beta = np.zeros(3)
    rm = np.zeros(3)
    rv = np.ones(3)
    y, _ = layers.batchnorm_forward(x, gamma, beta, rm, rv, 0.9, 1e-5, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.std(axis=(0, 1, 2, 3)), 1.0, atol=1e-3)
    # running stats moved toward the batch stats
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2, 3)), atol=1e-12)


def test_one_hot():
    y = np.array([[[[0, 3]]]])
    oh = layers.one_hot(y, 4)
    assert oh.shape == (1, 1, 1, 2, 4)
    np.testing.assert_array_equal(oh[0, 0, 0, 0], [1, 0, 0, 0])
    np.testing.assert_array_equal(oh[0, 0, 0, 1], [0, 0, 0, 1])


# --- whole-graph gradient check ---

def test_gradients_match_finite_differences(gradcheck_result):
    worst, _ = gradcheck_result
    names = set(worst)
    # every layer type is covered
    assert any(n.startswith("init_conv") for n in names)
    assert any(".down." in n for n in names)
    assert any(".bn1.gamma" in n for n in names)
    assert any(".bn2.beta" in n for n in names)
    assert any(".conv2." in n for n in names)
    assert any(n.startswith("score") for n in names)
    bad = {n: e for n, e in worst.items() if e >= GRADCHECK_TOL}
    assert not bad, f"finite-difference mismatches: {bad}"


# --- forward-pass contracts ---

def test_forward_shape_and_probs():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    x = np.random.default_rng(0).normal(0, 1, (1, 8, 8, 8, 1))
    logits, probs, cache = model.forward(params, cfg, x, train=False)
    assert logits.shape == (1, 8, 8, 8, 4)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)


def test_forward_rejects_bad_inputs():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    with pytest.raises(errors.ChannelMismatch):
        model.forward(params, cfg, np.zeros((1, 8, 8, 8, 2)))
    with pytest.raises(errors.IndivisibleShape):
        model.forward(params, cfg, np.zeros((1, 7, 8, 8, 1)))


def test_backward_requires_train_cache():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    x = np.zeros((1, 8, 8, 8, 1))
    _, _, cache = model.forward(params, cfg, x, train=False)
    with pytest.raises(errors.StaleCache):
        model.backward(cache, np.zeros((1, 8, 8, 8), dtype=np.int64))


def test_residual_unit_projection():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (1, 4, 4, 4, 2)).astype(np.float32)
    # identity skip works when channels match
    y, _ = model.residual_unit_forward(params, cfg, "s1.u1", x, train=True)
    assert y.shape == x.shape
    # changing channels without a projection is an error
    wide = rng.normal(0, 1, (1, 4, 4, 4, 3)).astype(np.float32)
    with pytest.raises(errors.ChannelMismatch):
        model.residual_unit_forward(params, cfg, "s1.u1", wide, train=True)


def test_loss_matches_manual_cross_entropy():
    rng = np.random.default_rng(6)
    probs = layers.softmax(rng.normal(0, 1, (1, 2, 2, 2, 4)))
    y = rng.integers(0, 4, (1, 2, 2, 2))
    value, per_voxel = model.loss(probs, y)
    manual = -np.log([probs[(0, *idx, y[(0, *idx)])] for idx in np.ndindex(2, 2, 2)])
    assert value == pytest.approx(manual.mean())
    assert per_voxel.shape == (1, 2, 2, 2)


def test_translation_covariance_in_infer_mode():
    """Shifting the input by one total-stride step shifts the prediction:
    deep interior voxels agree to within float tolerance."""
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, (1, 48, 48, 48, 1)).astype(np.float32)
    shift = cfg.total_stride[0]  # 2
    x_shift = np.roll(x, shift, axis=1)
    _, p0, _ = model.forward(params, cfg, x, train=False)
    _, p1, _ = model.forward(params, cfg, x_shift, train=False)
    m = 20  # interior margin: outside the halo of boundary effects
    np.testing.assert_allclose(
        p1[:, m + shift:-m + shift or None, m:-m, m:-m],
        p0[:, m:-m, m:-m, m:-m],
        atol=1e-5,
    )


# --- optimizer ---

def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(8)
    p = rng.normal(0, 1, (5,))
    params = {"w": p.copy()}
    state = net.AdamState.zeros(params)
    hyper = net.Hyper(lr=0.01)
    # independent reference
    ref = p.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 11):
        g = 2 * ref  # gradient of sum(w^2) at the reference point
        net.optimizer_step(params, {"w": 2 * params["w"]}, state, hyper)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        ref -= 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(params["w"], ref, atol=1e-12)


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    state = net.AdamState.zeros(params)
    with pytest.raises(errors.ShapeMismatch):
        net.optimizer_step(params, {"w": np.zeros(4)}, state, net.Hyper())


# --- checkpoints ---

def test_checkpoint_round_trip(tmp_path):
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=3)
    path = tmp_path / "ckpt.nnl"
    net.save_checkpoint(params, path)
    loaded = net.load_checkpoint(path)
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.nnl"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(errors.BadMagic):
        net.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=3)
    path = tmp_path / "ckpt.nnl"
    net.save_checkpoint(params, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(errors.CorruptRecord):
        net.load_checkpoint(path)


# --- training ---

def test_overfit_phantom_reaches_high_dice(overfit_runs):
    run, _ = overfit_runs
    trace = run[4]
    assert trace[-1] < trace[0]
    scores = overfit_dice(run)
    for class_id, score in scores.items():
        assert score >= 0.95, f"class {class_id}: Dice {score:.4f}"


def test_training_is_deterministic(overfit_runs):
    first, second = overfit_runs
    assert first[4] == second[4]  # loss traces identical
    for name in first[0]:
        np.testing.assert_array_equal(first[0][name], second[0][name])


def test_train_loop_writes_checkpoints(tmp_path):
    vol, truth = make_shell_phantom(16, seed=1)
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)

    def stream():
        while True:
            yield vol.data, truth.data.astype(np.int64)

    trace = net.train(params, cfg, stream, steps=4, checkpoint_every=2,
                      checkpoint_dir=tmp_path)
    assert len(trace) == 4
    assert (tmp_path / "ckpt_step000002.nnl").exists()
    assert (tmp_path / "ckpt_step000004.nnl").exists()
    assert (tmp_path / "ckpt_final.nnl").exists()


def test_predict_volume_pads_odd_dims():
    cfg = net.NetConfig(n_scales=2, base_filters=2)
    params = net.init_params(cfg, seed=0)
    data = np.random.default_rng(9).normal(0, 1, (9, 10, 11)).astype(np.float32)
    v = Volume(data, (1, 1, 1), np.eye(4))
    pred, probs = net.predict_volume(params, cfg, v)
    assert pred.dims == (9, 10, 11)
    assert probs.shape == (9, 10, 11, cfg.n_classes)
    assert set(np.unique(pred.data)) <= set(range(cfg.n_classes))
