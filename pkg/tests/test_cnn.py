import numpy as np
import pytest

from aspc_mds import cnn
from aspc_mds.cnn import CheckpointError, ConvSpec, TrainConfig

SMALL_LAYERS = (ConvSpec((3, 3), 4), ConvSpec((3, 3), 6), ConvSpec((3, 3), 8))


def small_model(seed=0, dtype=np.float64, shape=(8, 8, 3)):
    model = cnn.build_model(shape, SMALL_LAYERS, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for k in model.params:
        if k.endswith("_b"):
            model.params[k] = (0.1 * rng.standard_normal(model.params[k].shape)).astype(dtype)
    return model


def direct_conv(x, w, b, pad):
    """Textbook nested-loop cross-correlation, NHWC in, NHWC out."""
    x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    o, _, kh, kw = w.shape
    hout, wout = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = np.zeros((x.shape[0], hout, wout, o))
    for i in range(hout):
        for j in range(wout):
            patch = x[:, i:i + kh, j:j + kw, :]
            out[:, i, j, :] = np.einsum("bhwc,ochw->bo", patch, w) + b
    return out


def test_light_cnn_parameter_counts():
    model = cnn.init_model()
    counts = model.param_counts()
    assert counts == {"conv1": 21184, "conv2": 131104, "conv3": 32832, "fc": 32005}
    assert model.param_count() == 217125
    assert counts["conv1"] + counts["conv2"] + counts["conv3"] == 185120


def test_light_cnn_shape_chain():
    sides = cnn.feature_sides(cnn.LIGHT_CNN_INPUT, cnn.LIGHT_CNN_LAYERS)
    assert sides == [(110, 55), (42, 21), (20, 10)]
    assert cnn.flatten_length(cnn.LIGHT_CNN_INPUT, cnn.LIGHT_CNN_LAYERS) == 6400


def test_init_is_seeded_and_he_scaled():
    a, b = cnn.init_model(3), cnn.init_model(3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    w = a.params["conv2_w"]
    assert w.std() == pytest.approx(np.sqrt(2.0 / (16 * 16 * 16)), rel=0.02)
    assert not np.any(a.params["conv1_b"])


@pytest.mark.parametrize("stride", [1, 2])
def test_fft_convolution_matches_direct(rng, stride):
    x = rng.standard_normal((2, 9, 10, 3))
    w = rng.standard_normal((4, 3, 3, 4))
    b = rng.standard_normal(4)
    z, _, _ = cnn._conv_forward(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))), w, b, stride)
    np.testing.assert_allclose(z, direct_conv(x, w, b, 1)[:, ::stride, ::stride], atol=1e-12)


def test_pool_routes_each_gradient_to_one_cell(rng):
    x = rng.standard_normal((2, 6, 7, 3))
    x[0, 0, 0, 0] = x[0, 0, 1, 0] = 10.0  # tie: first occurrence wins
    out, arg = cnn._pool_forward(x, 2, 2)
    assert out.shape == (2, 3, 3, 3)
    dout = rng.standard_normal(out.shape)
    dx = cnn._pool_backward(dout, arg, x.shape, 2)
    assert dx[0, 0, 0, 0] == dout[0, 0, 0, 0] and dx[0, 0, 1, 0] == 0
    # one nonzero per window, equal to the incoming gradient, at the window max
    win = dx[:, :6, :6].reshape(2, 3, 2, 3, 2, 3)
    assert np.all(np.count_nonzero(win, axis=(2, 4)) == 1)
    np.testing.assert_allclose(win.sum(axis=(2, 4)), dout)
    assert not np.any(dx[:, :, 6])


def test_softmax_cross_entropy_gradient_at_logits(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 3, 1, 4])
    probs = cnn.softmax(logits)
    onehot = np.eye(5)[labels]

    def loss(z):
        p = cnn.softmax(z)
        return -np.mean(np.log(p[np.arange(4), labels]))

    h = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        d = np.zeros_like(logits)
        d[idx] = h
        num[idx] = (loss(logits + d) - loss(logits - d)) / (2 * h)
    np.testing.assert_allclose((probs - onehot) / 4, num, atol=1e-9)
    # the model's own backward pass starts from exactly this quantity
    model = small_model()
    _, grads, p = cnn.loss_and_gradients(model, rng.random((4, 8, 8, 3)), labels)
    np.testing.assert_allclose(grads["fc_b"], ((p - onehot) / 4).sum(axis=0), atol=1e-12)


def relative_errors(analytic, numeric, floor=1e-6):
    # the floor keeps exact-zero gradients (dead units) from dividing
    # finite-difference roundoff by ~0
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def test_gradients_match_finite_differences(rng):
    model = small_model(seed=1)
    x = rng.random((4, 8, 8, 3))
    y = np.array([0, 1, 4, 2])
    _, grads, _ = cnn.loss_and_gradients(model, x, y)
    h = 1e-5
    worst = 0.0
    for name, param in model.params.items():
        num = np.zeros_like(param)
        for idx in np.ndindex(*param.shape):
            old = param[idx]
            param[idx] = old + h
            up = cnn.loss_and_gradients(model, x, y)[0]
            param[idx] = old - h
            down = cnn.loss_and_gradients(model, x, y)[0]
            param[idx] = old
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, relative_errors(grads[name], num).max())
    assert worst < 1e-4


def test_micro_batching_does_not_change_gradients(rng):
    model = small_model(seed=2)
    x, y = rng.random((7, 8, 8, 3)), rng.integers(0, 5, 7)
    l1, g1, _ = cnn.loss_and_gradients(model, x, y, micro_batch=7)
    l2, g2, _ = cnn.loss_and_gradients(model, x, y, micro_batch=3)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_loss_rejects_bad_labels():
    model = small_model()
    x = np.zeros((2, 8, 8, 3))
    with pytest.raises(ValueError):
        cnn.loss_and_gradients(model, x, [0, 5])
    with pytest.raises(ValueError):
        cnn.loss_and_gradients(model, x, [0])


def test_forward_single_and_batch(rng):
    model = small_model(dtype=np.float32)
    imgs = rng.integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    batch = cnn.forward(model, imgs)
    assert batch.shape == (3, 5)
    np.testing.assert_allclose(batch.sum(axis=1), 1.0)
    np.testing.assert_allclose(cnn.forward(model, imgs[1]), batch[1], rtol=1e-6)
    # uint8 is scaled to [0, 1]
    np.testing.assert_allclose(cnn.forward(model, imgs.astype(np.float32) / 255), batch, rtol=1e-6)
    with pytest.raises(ValueError):
        cnn.forward(model, np.zeros((1, 9, 8, 3)))


def test_adam_step_matches_reference():
    model = small_model()
    cfg = TrainConfig(learning_rate=1e-2)
    before = {k: v.copy() for k, v in model.params.items()}
    grads = {k: np.full_like(v, 0.5) for k, v in model.params.items()}
    cnn.adam_step(model, grads, cfg)
    cnn.adam_step(model, grads, cfg)
    # constant gradient: every bias-corrected step has size lr * g / (|g| + eps)
    step = 1e-2 * 0.5 / (0.5 + 1e-8)
    for k in model.params:
        np.testing.assert_allclose(model.params[k], before[k] - 2 * step, rtol=1e-12)
    assert model.step == 2


def test_training_learns_a_separable_toy_problem():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(5), 8)
    x = rng.random((40, 8, 8, 3)) * 0.1
    for k in range(5):
        x[y == k, :, :, k % 3] += 0.5 + 0.2 * k
    model = cnn.build_model((8, 8, 3), SMALL_LAYERS, seed=0)
    model, hist = cnn.train(model, x, y, TrainConfig(learning_rate=1e-2, batch_size=10, epochs=40), x, y)
    assert len(hist) == 40 and hist[-1]["epoch"] == 40
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    _, acc = cnn.evaluate(model, x, y)
    assert acc >= 0.9


def test_resumed_training_retraces_uninterrupted_run(tmp_path, rng):
    x, y = rng.random((12, 8, 8, 3)), rng.integers(0, 5, 12)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=5, epochs=4, seed=9)
    full, _ = cnn.train(cnn.build_model((8, 8, 3), SMALL_LAYERS, seed=0), x, y, cfg)
    half, _ = cnn.train(cnn.build_model((8, 8, 3), SMALL_LAYERS, seed=0), x, y,
                        TrainConfig(learning_rate=1e-3, batch_size=5, epochs=2, seed=9))
    resumed = cnn.load_model(cnn.save_model(half, tmp_path / "m.ckpt"))
    resumed, hist = cnn.train(resumed, x, y, cfg)
    assert [h["epoch"] for h in hist] == [3, 4]
    for k in full.params:
        np.testing.assert_array_equal(full.params[k], resumed.params[k])


def test_confusion_and_evaluate():
    cm = cnn.confusion_matrix([0, 1, 1, 4], [0, 1, 2, 4])
    assert cm[1, 2] == 1 and np.trace(cm) == 3 and cm.sum() == 4
    with pytest.raises(ValueError):
        cnn.evaluate(small_model(), np.zeros((0, 8, 8, 3)), [])


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    model = cnn.build_model((8, 8, 3), SMALL_LAYERS, seed=4)
    x, y = rng.random((6, 8, 8, 3)), rng.integers(0, 5, 6)
    model, _ = cnn.train(model, x, y, TrainConfig(batch_size=3, epochs=1))
    path = cnn.save_model(model, tmp_path / "m.ckpt")
    assert path.read_bytes()[:8] == cnn.CHECKPOINT_MAGIC
    back = cnn.load_model(path)
    assert (back.step, back.epoch, back.layers, back.input_shape) == (model.step, model.epoch, model.layers,
                                                                        model.input_shape)
    for group in ("params", "adam_m", "adam_v"):
        for k, v in getattr(model, group).items():
            assert getattr(back, group)[k].tobytes() == v.tobytes()
    assert cnn.save_model(back, tmp_path / "n.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = cnn.save_model(small_model(dtype=np.float32), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for bad in (b"BADMAGIC" + raw[8:], raw[:-3], raw[:8] + b"\xff\xff\x00\x00" + raw[12:]):
        (tmp_path / "x.ckpt").write_bytes(bad)
        with pytest.raises(CheckpointError):
            cnn.load_model(tmp_path / "x.ckpt")


def test_history_jsonl(tmp_path):
    import json
    path = cnn.write_history([{"epoch": 1, "train_loss": 0.5}, {"epoch": 2, "train_loss": 0.25}], tmp_path / "h.jsonl")
    lines = path.read_text().splitlines()
    assert [json.loads(s)["epoch"] for s in lines] == [1, 2]


def test_zero_weights_give_uniform_probabilities():
    model = small_model()
    for k in model.params:
        model.params[k][...] = 0
    probs = cnn.forward(model, np.random.default_rng(0).random((3, 8, 8, 3)))
    np.testing.assert_allclose(probs, 0.2, atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    p = cnn.softmax(50 * rng.standard_normal((20, 5)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_cross_entropy_examples(rng):
    model = small_model()
    x, y = rng.random((4, 8, 8, 3)), np.array([0, 1, 2, 3])
    model.params["fc_w"][...] = 0
    model.params["fc_b"][...] = 0
    loss, _, _ = cnn.loss_and_gradients(model, x, y)
    assert loss == pytest.approx(np.log(5), abs=1e-12)
    model.params["fc_b"][2] = 60.0  # confident and right for every sample of class 2
    loss, _, _ = cnn.loss_and_gradients(model, x, np.full(4, 2))
    assert loss < 1e-20


def test_adam_zero_gradient_leaves_params_unchanged():
    model = small_model()
    before = {k: v.copy() for k, v in model.params.items()}
    cnn.adam_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, TrainConfig())
    for k in model.params:
        np.testing.assert_array_equal(model.params[k], before[k])


def test_adam_first_step_is_lr_times_sign(rng):
    model = small_model()
    before = {k: v.copy() for k, v in model.params.items()}
    grads = {k: rng.standard_normal(v.shape) for k, v in model.params.items()}
    cnn.adam_step(model, grads, TrainConfig(learning_rate=1e-3))
    for k in model.params:
        np.testing.assert_allclose(before[k] - model.params[k], 1e-3 * np.sign(grads[k]), atol=1e-6)


def test_adam_ten_steps_match_scalar_oracle():
    model = small_model()
    cfg = TrainConfig(learning_rate=3e-3)
    start = float(model.params["fc_b"][0])
    gs = [0.7, -0.2, 1.5, 0.0, -3.0, 0.4, 0.4, -0.9, 2.2, -0.05]
    theta, m, v = start, 0.0, 0.0
    for t, g in enumerate(gs, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 3e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        cnn.adam_step(model, {k: np.full_like(p, g) for k, p in model.params.items()}, cfg)
    assert float(model.params["fc_b"][0]) == pytest.approx(theta, rel=1e-12, abs=1e-15)


def test_overfits_ten_images_and_is_reproducible(rng):
    x, y = rng.random((10, 8, 8, 3)), np.arange(10) % 5
    cfg = TrainConfig(learning_rate=1e-2, batch_size=10, epochs=200, seed=3)
    runs = [cnn.train(cnn.build_model((8, 8, 3), SMALL_LAYERS, seed=1), x, y, cfg) for _ in range(2)]
    (model, hist), (_, hist2) = runs
    assert len(hist) == 200
    assert hist[-1]["train_loss"] == hist2[-1]["train_loss"]
    assert cnn.evaluate(model, x, y)[1] == 1.0


def test_constant_predictor_scores_chance_on_balanced_set(rng):
    model = small_model()
    model.params["fc_w"][...] = 0
    model.params["fc_b"][...] = 0
    model.params["fc_b"][3] = 1.0
    cm, acc = cnn.evaluate(model, rng.random((10, 8, 8, 3)), np.repeat(np.arange(5), 2))
    assert acc == 0.2
    assert np.all(cm[:, 3] == 2)
