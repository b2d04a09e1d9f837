import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from selfdenoise import tensor as T
from selfdenoise.heads import HeadOutput, average_predictions
from selfdenoise.model import (CheckpointError, SdnnModel, TrainConfig, checkpoint_bytes, default_blocks, fit,
                               forward_eval, forward_train, parse_checkpoint, train_loss)
from selfdenoise.noise import NO_NOISE, NoiseSpec, Rng

G = NoiseSpec("gaussian", False, 0.06)


def small_model(noise=NO_NOISE, heads=(True, True, True), seed=0, classes=3, **kw):
    blocks = default_blocks((4, 4, 6, 8), 1, [noise] * 3, list(heads))
    return SdnnModel(3, classes, blocks, stem_channels=4, embed_dim=5, seed=seed, **kw)


def images(n=4, seed=0, size=16):
    return np.random.default_rng(seed).standard_normal((n, size, size, 3)).astype(np.float32)


class TestStructure:
    def test_last_block_needs_head(self):
        with pytest.raises(ValueError):
            small_model(heads=(True, True, False))

    def test_head_count(self):
        assert len(small_model(heads=(False, False, True)).active_heads) == 1
        assert len(small_model().active_heads) == 3

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            small_model().block_outputs(T.Tensor(np.ones((1, 16, 16, 2))))

    def test_parameter_names_ordered(self):
        names = list(small_model().parameters())
        assert names[:2] == ["stem.kernel", "stem.bias"]
        assert "head2.gamma" in names

    def test_default_blocks_strides(self):
        blocks = default_blocks()
        assert [b.convs[0][2] for b in blocks] == [2, 2, 2]
        assert [b.out_channels for b in blocks] == [16, 32, 64]


class TestForward:
    def test_noise_off_train_equals_eval(self):
        m = small_model()
        x = images()
        train = average_predictions([o.probs for o in forward_train(m, T.Tensor(x), Rng(0))])
        assert_array_equal(train, forward_eval(m, x))

    def test_zero_sigma_equals_none(self):
        x = images()
        a = forward_train(small_model(NoiseSpec("gaussian", False, 0.0)), T.Tensor(x), Rng(1))
        b = forward_train(small_model(), T.Tensor(x), Rng(1))
        for u, v in zip(a, b):
            assert_array_equal(u.logits.data, v.logits.data)

    def test_same_stream_bit_identical(self):
        m = small_model(G)
        x = images()
        a = forward_train(m, T.Tensor(x), Rng(3, (1, 2)))
        b = forward_train(m, T.Tensor(x), Rng(3, (1, 2)))
        for u, v in zip(a, b):
            assert_array_equal(u.logits.data, v.logits.data)
        c = forward_train(m, T.Tensor(x), Rng(3, (1, 3)))
        assert not np.array_equal(a[-1].logits.data, c[-1].logits.data)

    def test_eval_is_pure(self):
        m = small_model(G)
        x = images()
        assert_array_equal(forward_eval(m, x), forward_eval(m, x))

    def test_single_head_equals_its_probs(self):
        m = small_model(heads=(False, False, True))
        x = images()
        assert_array_equal(forward_eval(m, x), m.head_outputs(T.Tensor(x))[0].probs)

    def test_equal_class_weights_give_uniform(self):
        m = small_model()
        for h in m.active_heads:
            h.class_weights.data[:] = 1.0
        assert_allclose(forward_eval(m, images()), 1.0 / 3, atol=1e-6)

    def test_three_heads_hand_mean(self):
        m = small_model()
        x = images()
        outs = m.head_outputs(T.Tensor(x))
        assert_allclose(forward_eval(m, x), (outs[0].probs + outs[1].probs + outs[2].probs) / 3, atol=1e-7)

    def test_chunking_does_not_change_result(self):
        m = small_model()
        x = images(10)
        assert_allclose(forward_eval(m, x, chunk=3), forward_eval(m, x), atol=1e-6)

    def test_training_needs_rng(self):
        with pytest.raises(ValueError):
            small_model(G).block_outputs(T.Tensor(images()), None, training=True)

    def test_baseline_reduction(self):
        # no noise, only the final head: the plain cosine classifier on the backbone
        m = small_model(heads=(False, False, True))
        x = images()
        f = m.block_outputs(T.Tensor(x))[-1]
        head = m.active_heads[0]
        assert_array_equal(forward_eval(m, x), head(f).probs)

    def test_loss_finite_for_extreme_inputs(self):
        m = small_model(G)
        x = images() * 1e4
        loss = train_loss(forward_train(m, T.Tensor(x), Rng(0)), [0, 1, 2, 0])
        assert np.isfinite(loss.item())


def fake_output(logits):
    z = T.Tensor(np.asarray(logits, dtype=np.float32), requires_grad=True)
    return HeadOutput(z, z, T.softmax(z.data))


class TestTrainLoss:
    def test_one_head(self):
        out = fake_output([[1.0, 2.0, 0.0]])
        assert train_loss([out], [1]).item() == pytest.approx(T.softmax_cross_entropy(out.logits, [1]).item())

    def test_duplicate_half_weights(self):
        out = fake_output([[1.0, 2.0, 0.0], [0.5, 0.0, 0.1]])
        single = T.softmax_cross_entropy(out.logits, [1, 0]).item()
        assert train_loss([out, out], [1, 0], [0.5, 0.5]).item() == pytest.approx(single, rel=1e-6)

    def test_uniform_three_heads(self):
        outs = [fake_output(np.zeros((2, 4))) for _ in range(3)]
        assert train_loss(outs, [0, 3]).item() == pytest.approx(3 * np.log(4), rel=1e-6)

    def test_weight_length(self):
        with pytest.raises(ValueError):
            train_loss([fake_output([[0.0, 1.0]])], [0], [1.0, 1.0])


def blobs(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 8, 8, 3)).astype(np.float32) * 0.3
    # separable by colour: global pooling discards position, not channel
    x[y == 1, ..., 0] += 1.5
    x[y == 0, ..., 1] += 1.5
    return x, y


class TestFit:
    def test_schedule(self):
        cfg = TrainConfig()
        trace = [cfg.lr_at(e) for e in range(1, 27)]
        assert_allclose(trace[:20], 0.1)
        assert_allclose(trace[20:23], 0.01)
        assert_allclose(trace[23:], 0.001)

    def test_separable_blobs(self):
        x, y = blobs()
        blocks = default_blocks((4, 8), 1, [NO_NOISE], [True])
        m = SdnnModel(3, 2, blocks, stem_channels=4, embed_dim=4, pool_target=(1, 1), seed=0)
        log = fit(m, x, y, TrainConfig(epochs=10, milestones=(7, 9), batch_size=16))
        assert log[-1]["head_acc"][0] >= 0.99
        assert np.mean(np.argmax(forward_eval(m, x), 1) == y) >= 0.99

    def test_deterministic(self):
        x, y = blobs(32)
        logs = []
        for _ in range(2):
            m = small_model(G, classes=2)
            logs.append(fit(m, np.repeat(np.repeat(x, 2, 1), 2, 2), y, TrainConfig(epochs=3, batch_size=8)))
        assert [r["loss"] for r in logs[0]] == [r["loss"] for r in logs[1]]

    def test_gamma_stays_positive(self):
        x, y = blobs(32)
        m = small_model(classes=2)
        for h in m.active_heads:
            h.gamma.data[:] = 2e-3
        fit(m, np.repeat(np.repeat(x, 2, 1), 2, 2), y, TrainConfig(epochs=2, lr=5.0, batch_size=8))
        assert all(h.gamma.data.item() >= 1e-3 for h in m.active_heads)

    def test_log_fields(self):
        x, y = blobs(16)
        log = fit(small_model(classes=2), np.repeat(np.repeat(x, 2, 1), 2, 2), y, TrainConfig(epochs=1))
        assert set(log[0]) == {"epoch", "lr", "loss", "head_acc"}
        assert len(log[0]["head_acc"]) == 3

    def test_errors(self):
        m = small_model()
        with pytest.raises(ValueError):
            fit(m, np.zeros((0, 16, 16, 3)), np.zeros(0, int), TrainConfig())
        with pytest.raises(ValueError):
            fit(m, images(2), [0, 5], TrainConfig())
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestCheckpoint:
    def test_round_trip_bytes(self):
        m = small_model(G, seed=4)
        data = checkpoint_bytes(m, {"run": {"a": 1}})
        m2, blob = parse_checkpoint(data)
        assert blob["run"] == {"a": 1}
        assert checkpoint_bytes(m2, {"run": {"a": 1}}) == data
        x = images()
        assert_array_equal(forward_eval(m, x), forward_eval(m2, x))

    def test_header_layout(self):
        data = checkpoint_bytes(small_model())
        assert data[:4] == b"SDNN"
        assert int.from_bytes(data[4:8], "little") == 1

    def test_errors(self):
        data = checkpoint_bytes(small_model())
        with pytest.raises(CheckpointError):
            parse_checkpoint(b"XXXX" + data[4:])
        with pytest.raises(CheckpointError):
            parse_checkpoint(data[:-3])
        with pytest.raises(CheckpointError):
            parse_checkpoint(data[:4] + (2).to_bytes(4, "little") + data[8:])
