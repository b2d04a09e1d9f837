import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from selfdenoise import tensor as T
from selfdenoise.heads import (GAMMA_FLOOR, CosineHead, average_predictions, cosine_logits, head_forward,
                               imprint_weights, predict_labels)
from selfdenoise.noise import Rng


def make_head(c=3, classes=5, dim=6, pool=(2, 2), mode="max"):
    return CosineHead(c, classes, dim, Rng(0), pool, mode)


def logits_for(e, w, gamma=10.0):
    return cosine_logits(T.Tensor(e), T.Tensor(w), T.Tensor([gamma])).data


class TestCosineHead:
    def test_shapes(self):
        head = make_head()
        out = head_forward(head, T.Tensor(np.random.default_rng(0).standard_normal((4, 4, 4, 3))))
        assert out.embedding.shape == (4, 6)
        assert out.logits.shape == (4, 5)
        assert head.fc_weight.shape == (2 * 2 * 3, 6)

    def test_logit_bounds_and_probs(self):
        head = make_head()
        f = T.Tensor(np.random.default_rng(1).standard_normal((16, 4, 4, 3)))
        out = head(f)
        gamma = head.gamma.data.item()
        assert np.all(np.abs(out.logits.data / gamma) <= 1 + 1e-5)
        assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-5)

    def test_orthogonal_oracle(self):
        w = np.eye(5, dtype=np.float32)
        z = logits_for(w[:1] * 3.0, w)
        assert_allclose(z, [[10, 0, 0, 0, 0]], atol=1e-5)
        p = T.softmax(z)[0, 0]
        assert_allclose(p, np.exp(10) / (np.exp(10) + 4), rtol=1e-6)
        assert abs(p - 0.999818) < 1e-6

    def test_embedding_equal_to_weight_row(self):
        w = np.random.default_rng(2).standard_normal((4, 6)).astype(np.float32)
        assert_allclose(logits_for(w[2:3], w, 7.0)[0, 2], 7.0, rtol=1e-6)

    @pytest.mark.parametrize("alpha", [1e-3, 0.5, 2.0, 1e3])
    def test_rescaling_invariance(self, alpha):
        rng = np.random.default_rng(3)
        e = rng.standard_normal((3, 6)).astype(np.float32)
        w = rng.standard_normal((5, 6)).astype(np.float32)
        base = logits_for(e, w)
        assert_allclose(logits_for(np.float32(alpha) * e, w), base, rtol=0, atol=2e-5)
        w2 = w.copy()
        w2[1] *= np.float32(alpha)
        assert_allclose(logits_for(e, w2), base, rtol=0, atol=2e-5)
        assert_array_equal(np.argmax(logits_for(np.float32(alpha) * e, w2), 1), np.argmax(base, 1))

    def test_gamma_gradient(self):
        rng = np.random.default_rng(4)
        e = T.Tensor(rng.standard_normal((3, 6)))
        w = T.Tensor(rng.standard_normal((5, 6)))
        err = T.grad_check(lambda g: T.softmax_cross_entropy(cosine_logits(e, w, g), [0, 2, 4]),
                           T.Tensor([10.0]))
        assert err < 1e-3

    def test_class_weight_gradient(self):
        rng = np.random.default_rng(5)
        e = T.Tensor(rng.standard_normal((3, 6)))
        err = T.grad_check(lambda w: T.softmax_cross_entropy(cosine_logits(e, w, T.Tensor([10.0])), [0, 1, 2]),
                           T.Tensor(rng.standard_normal((4, 6))))
        assert err < 1e-3

    def test_clamp_gamma(self):
        head = make_head()
        head.gamma.data[:] = -5
        head.clamp_gamma()
        assert head.gamma.data.item() == pytest.approx(GAMMA_FLOOR)

    def test_pool_divisibility(self):
        with pytest.raises(T.ShapeError):
            make_head()(T.Tensor(np.ones((1, 3, 3, 3))))

    def test_override_weights_do_not_touch_head(self):
        head = make_head()
        before = head.class_weights.data.copy()
        head(T.Tensor(np.ones((1, 2, 2, 3))), np.ones((2, 6), dtype=np.float32))
        assert_array_equal(head.class_weights.data, before)

    def test_bad_embed_dim(self):
        with pytest.raises(ValueError):
            CosineHead(3, 5, 0, Rng(0))


class TestImprint:
    def test_identical_supports(self):
        v = np.array([1.0, 2.0, -1.0], dtype=np.float32)
        assert_allclose(imprint_weights([np.stack([v] * 5)]), imprint_weights([v[None]]), rtol=1e-6)

    def test_midpoint(self):
        w = imprint_weights([np.array([[1.0, 0.0], [0.0, 1.0]])])
        assert_allclose(w, [[0.5, 0.5]])
        assert_allclose(T.l2_normalize(T.Tensor(w)).data, [[2 ** -0.5, 2 ** -0.5]], rtol=1e-6)

    def test_raw_mean_option(self):
        w = imprint_weights([np.array([[2.0, 0.0], [0.0, 4.0]])], normalize_first=False)
        assert_allclose(w, [[1.0, 2.0]])

    def test_empty_class(self):
        with pytest.raises(ValueError):
            imprint_weights([np.ones((1, 3)), np.zeros((0, 3))])

    def test_orthogonal_clusters_5way_5shot(self):
        rng = np.random.default_rng(6)
        centres = np.eye(5, 16, dtype=np.float32) * 4
        support = [c + 0.1 * rng.standard_normal((5, 16)) for c in centres]
        queries = np.concatenate([c + 0.1 * rng.standard_normal((15, 16)) for c in centres]).astype(np.float32)
        w = imprint_weights(support)
        pred = predict_labels(T.softmax(logits_for(queries, w)))
        # brute-force nearest-cosine oracle
        qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        cn = centres / np.linalg.norm(centres, axis=1, keepdims=True)
        oracle = np.argmax(qn @ cn.T, axis=1)
        assert_array_equal(pred, oracle)
        assert np.mean(pred == np.repeat(np.arange(5), 15)) == 1.0

    def test_one_shot_self_classification(self):
        rng = np.random.default_rng(7)
        supports = rng.standard_normal((6, 8)).astype(np.float32)
        w = imprint_weights([s[None] for s in supports])
        assert_array_equal(predict_labels(T.softmax(logits_for(supports, w))), np.arange(6))


class TestAverage:
    def test_single(self):
        p = np.array([[0.3, 0.7]], dtype=np.float32)
        assert_array_equal(average_predictions([p]), p)

    def test_idempotent(self):
        p = np.array([[0.3, 0.7]], dtype=np.float32)
        assert_allclose(average_predictions([p, p]), p)

    def test_hand_mean(self):
        out = average_predictions([np.array([[0.6, 0.4]]), np.array([[0.2, 0.8]])])
        assert_allclose(out, [[0.4, 0.6]], rtol=1e-6)
        assert predict_labels(out)[0] == 1

    def test_sum_and_mean_agree_on_argmax(self):
        rng = np.random.default_rng(8)
        probs = [T.softmax(rng.standard_normal((50, 5)).astype(np.float32)) for _ in range(3)]
        assert_array_equal(predict_labels(average_predictions(probs)), np.argmax(sum(probs), axis=1))
        assert_allclose(average_predictions(probs).sum(axis=1), 1.0, atol=1e-5)

    def test_errors(self):
        with pytest.raises(ValueError):
            average_predictions([])
        with pytest.raises(T.ShapeError):
            average_predictions([np.ones((2, 3)), np.ones((2, 4))])

    def test_ties_lowest_index(self):
        assert_array_equal(predict_labels(np.array([[0.5, 0.5], [0.2, 0.2]])), [0, 0])
