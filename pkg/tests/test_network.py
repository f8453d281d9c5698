import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnntriage.classifier import (
    ArraySource,
    LayerSpec,
    NetworkConfig,
    Prediction,
    ShapeError,
    TrainConfig,
    accuracy,
    backward,
    build_config,
    forward,
    init_model,
    loss_and_gradients,
    make_config,
    predict_proba,
    sgd_step,
    train,
    zero_model,
)
from cnntriage.classifier.network import _run
from cnntriage.dataset import BinaryLabel, ClassWeights, DatasetError
from cnntriage.synthetic import make_synthetic


def gradcheck_config(frozen_blocks=0):
    # every layer kind: two convs + pool, conv + pool, hidden dense, output dense, softmax
    return make_config("gc", (8, 8), [[2, 3], [3]], [5], frozen_blocks=frozen_blocks)


def central_differences(model, x, y, w, eps=1e-5):
    out = {}
    for layer, pname, arr in model.tensors():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            hi, _ = loss_and_gradients(model, x, y, w)
            arr[idx] = old - eps
            lo, _ = loss_and_gradients(model, x, y, w)
            arr[idx] = old
            fd[idx] = (hi - lo) / (2 * eps)
        out.setdefault(layer, {})[pname] = fd
    return out


def max_relative_error(a, b):
    den = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(den > 0, np.abs(a - b) / np.where(den > 0, den, 1), 0.0)
    return float(rel.max())


class TestBuildConfig:
    def test_vgg16_topology(self):
        cfg = build_config("vgg16")
        convs = [s for b in cfg.blocks for s in b if s.kind == "conv"]
        pools = [s for b in cfg.blocks for s in b if s.kind == "maxpool"]
        dense = [s for s in cfg.head if s.kind == "dense"]
        assert (len(convs), len(pools), len(cfg.blocks)) == (13, 5, 5)
        assert [d.out_size for d in dense] == [4096, 4096, 2]
        assert dense[0].in_size == 7 * 7 * 512
        assert cfg.input_resolution == (224, 224)

    def test_vgg16_freeze_scheme(self):
        assert build_config("vgg16").freeze_mask == (True, True, True, False, False, False)

    def test_tiny(self):
        cfg = build_config("tiny")
        assert cfg.input_resolution == (32, 32)
        assert [s.out_size for b in cfg.blocks for s in b if s.kind == "conv"] == [4, 8]
        assert [s.out_size for s in cfg.head if s.kind == "dense"] == [16, 2]
        assert cfg.freeze_mask == (True, False, False)
        cfg.validate()

    def test_unknown(self):
        with pytest.raises(ValueError):
            build_config("resnet")

    def test_round_trip_dict(self):
        cfg = build_config("tiny")
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_incompatible_layers(self):
        cfg = build_config("tiny")
        bad_head = (cfg.head[0], LayerSpec("dense", "fc1", 999, 16)) + cfg.head[2:]
        with pytest.raises(ShapeError):
            NetworkConfig("bad", cfg.input_resolution, cfg.blocks, bad_head, cfg.freeze_mask)

    def test_rejects_wrong_output_width(self):
        with pytest.raises(ShapeError):
            cfg = build_config("tiny")
            head = cfg.head[:-2] + (LayerSpec("dense", "predictions", 16, 3),
                                    LayerSpec("softmax", "softmax"))
            NetworkConfig("bad", cfg.input_resolution, cfg.blocks, head, cfg.freeze_mask)

    def test_rejects_freeze_mask_length(self):
        cfg = build_config("tiny")
        with pytest.raises(ShapeError):
            NetworkConfig("bad", cfg.input_resolution, cfg.blocks, cfg.head, (True, False))


class TestForward:
    def test_zero_network_is_half(self):
        model = zero_model(build_config("tiny"))
        pred = forward(model, np.random.default_rng(0).uniform(size=(32, 32, 3)))
        assert pred == Prediction(0.5, 0.5)

    def test_hand_composed(self):
        # 4x4x1 -> conv3x3 -> relu -> pool -> flatten -> dense(4, 2) -> softmax
        cfg = make_config("hand", (4, 4), [[1]], [], frozen_blocks=0, in_channels=1)
        model = zero_model(cfg, dtype=np.float64)
        k = np.array([[0.5, -1.0, 0.0], [1.0, 2.0, -0.5], [0.0, 0.25, 1.0]])
        model.params["block1_conv1"]["weight"][:, :, 0, 0] = k
        model.params["block1_conv1"]["bias"][:] = -1.0
        dw = np.array([[1.0, -1.0], [0.5, 0.0], [-0.25, 0.5], [0.0, 2.0]])
        model.params["predictions"]["weight"][:] = dw
        model.params["predictions"]["bias"][:] = [0.1, -0.1]
        img = np.arange(16, dtype=float).reshape(4, 4, 1) / 16

        # scalar arithmetic, layer by layer
        conv = [[0.0] * 4 for _ in range(4)]
        for y in range(4):
            for x in range(4):
                acc = -1.0
                for i in range(3):
                    for j in range(3):
                        yy, xx = y + i - 1, x + j - 1
                        if 0 <= yy < 4 and 0 <= xx < 4:
                            acc += img[yy, xx, 0] * k[i][j]
                conv[y][x] = max(0.0, acc)
        pooled = [max(conv[2 * a + i][2 * b + j] for i in (0, 1) for j in (0, 1))
                  for a in (0, 1) for b in (0, 1)]
        logits = [sum(pooled[r] * dw[r][c] for r in range(4)) + [0.1, -0.1][c] for c in (0, 1)]
        z = max(logits)
        e = [math.exp(v - z) for v in logits]
        expected = e[0] / sum(e)

        assert forward(model, img).p_critical == pytest.approx(expected, abs=1e-12)

    def test_resolution_mismatch(self):
        with pytest.raises(ShapeError):
            forward(zero_model(build_config("tiny")), np.zeros((16, 16, 3)))

    def test_deterministic(self):
        model = init_model(build_config("tiny"), seed=3)
        img = np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32)
        assert forward(model, img) == forward(model, img)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 20))
    def test_probabilities_sum_to_one(self, seed, scale):
        model = init_model(build_config("tiny"), seed=seed % 1000)
        img = np.random.default_rng(seed).uniform(0, 1, (2, 32, 32, 3)) * scale
        p = predict_proba(model, np.clip(img, 0, 1))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        assert np.all((p >= 0) & (p <= 1))


class TestBackward:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.x = self.rng.uniform(0, 1, (3, 8, 8, 3))
        self.y = [0, 1, 0]
        self.w = ClassWeights(1.7, 0.6)

    def test_matches_finite_differences(self):
        model = init_model(gradcheck_config(), seed=3, dtype=np.float64)
        _, cache = _run(model, self.x, True)
        pre = [c[2] for c in cache if c[2] is not None]
        assert min(np.abs(p).min() for p in pre) > 1e-6  # no ReLU kinks in this draw
        _, grads = loss_and_gradients(model, self.x, self.y, self.w)
        fd = central_differences(model, self.x, self.y, self.w)
        for layer in grads:
            for pname in grads[layer]:
                assert max_relative_error(grads[layer][pname], fd[layer][pname]) < 1e-4, layer

    def test_frozen_blocks_zero(self):
        model = init_model(gradcheck_config(frozen_blocks=1), seed=3, dtype=np.float64)
        _, grads = loss_and_gradients(model, self.x, self.y, self.w)
        for name in ("block1_conv1", "block1_conv2"):
            for g in grads[name].values():
                assert not g.any()
        assert grads["block2_conv1"]["weight"].any()

    def test_trainable_grads_unchanged_by_freezing_below(self):
        free = init_model(gradcheck_config(0), seed=3, dtype=np.float64)
        part = init_model(gradcheck_config(1), seed=3, dtype=np.float64)
        _, g_free = loss_and_gradients(free, self.x, self.y, self.w)
        _, g_part = loss_and_gradients(part, self.x, self.y, self.w)
        for name in ("block2_conv1", "fc1", "predictions"):
            np.testing.assert_array_equal(g_free[name]["weight"], g_part[name]["weight"])

    def test_weight_scaling(self):
        model = init_model(gradcheck_config(), seed=4, dtype=np.float64)
        g1 = backward(model, self.x[0], BinaryLabel.CRITICAL, ClassWeights(0.8, 1.1))
        g2 = backward(model, self.x[0], BinaryLabel.CRITICAL, ClassWeights(1.6, 2.2))
        for name in g1:
            for p in g1[name]:
                np.testing.assert_array_equal(g2[name][p], 2 * g1[name][p])

    def test_batch_gradient_is_mean(self):
        model = init_model(gradcheck_config(), seed=5, dtype=np.float64)
        _, gb = loss_and_gradients(model, self.x, self.y, self.w)
        singles = [backward(model, self.x[i], self.y[i], self.w) for i in range(3)]
        for name in gb:
            mean = sum(s[name]["weight"] for s in singles) / 3
            np.testing.assert_allclose(gb[name]["weight"], mean, rtol=1e-10, atol=1e-14)


class TestSgdStep:
    def test_zero_lr(self):
        model = init_model(build_config("tiny"), seed=1)
        before = model.copy()
        grads = {k: {p: np.ones_like(a) for p, a in v.items()} for k, v in model.params.items()}
        sgd_step(model, grads, 0.0)
        for (_, _, a), (_, _, b) in zip(model.tensors(), before.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_one_step(self):
        cfg = make_config("s", (2, 2), [[1]], [], frozen_blocks=0, in_channels=1, kernel=1)
        model = zero_model(cfg, dtype=np.float64)
        for arr in (a for _, _, a in model.tensors()):
            arr[...] = 1.0
        grads = {k: {p: np.full_like(a, 2.0) for p, a in v.items()}
                 for k, v in model.params.items()}
        sgd_step(model, grads, 0.1)
        for _, _, arr in model.tensors():
            np.testing.assert_allclose(arr, 0.8)

    def test_frozen_untouched_after_many_steps(self):
        model = init_model(build_config("tiny"), seed=2)
        before = model.params["block1_conv1"]["weight"].copy()
        rng = np.random.default_rng(0)
        for _ in range(100):
            grads = {k: {p: rng.normal(size=a.shape).astype(a.dtype) for p, a in v.items()}
                     for k, v in model.params.items()}
            sgd_step(model, grads, 0.1)
        assert model.params["block1_conv1"]["weight"].tobytes() == before.tobytes()

    def test_shape_mismatch(self):
        model = init_model(build_config("tiny"), seed=1)
        grads = {k: {p: np.zeros(3) for p in v} for k, v in model.params.items()}
        with pytest.raises(ShapeError):
            sgd_step(model, grads, 0.1)


@pytest.fixture(scope="module")
def separable():
    data = make_synthetic(300, seed=21)
    return ArraySource(data.images, data.labels)


class TestTrain:
    def test_zero_epochs(self, separable):
        model = init_model(build_config("tiny"), seed=0)
        before = model.copy()
        result = train(model, separable, TrainConfig(epochs=0, batches_per_epoch=5))
        assert result.trace == []
        for (_, _, a), (_, _, b) in zip(model.tensors(), before.tensors()):
            assert a.tobytes() == b.tobytes()

    def test_learns_separable_set(self, separable):
        model = init_model(build_config("tiny"), seed=0)
        tc = TrainConfig(learning_rate=1e-2, epochs=20, batch_size=20, batches_per_epoch=15,
                         class_weights=ClassWeights(1.5, 0.75), seed=0)
        result = train(model, separable, tc)
        assert len(result.trace) == 20 * 15
        assert [t[:2] for t in result.trace[:2]] == [(0, 0), (0, 1)]
        assert accuracy(model, separable) >= 0.9
        losses = result.epoch_losses()
        assert losses[-1] < losses[0]

    def test_bitwise_deterministic(self, separable):
        tc = TrainConfig(learning_rate=1e-2, epochs=2, batches_per_epoch=5, seed=9)
        a = train(init_model(build_config("tiny"), seed=9), separable, tc)
        b = train(init_model(build_config("tiny"), seed=9), separable, tc)
        assert a.trace == b.trace
        for (_, _, x), (_, _, y) in zip(a.model.tensors(), b.model.tensors()):
            assert x.tobytes() == y.tobytes()

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_too_few_images(self, separable):
        tc = TrainConfig(epochs=1, batch_size=20, batches_per_epoch=70)
        with pytest.raises(DatasetError):
            train(init_model(build_config("tiny"), seed=0), separable, tc)
