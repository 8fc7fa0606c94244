"""Layer behavior: dense, dropout, batch norm, inverted residuals, the text
branch, and cross-modal attention."""

import numpy as np
import pytest

from kcalnet import layers as L
from kcalnet import tensor as T
from kcalnet.errors import DimensionError
from kcalnet.tensor import Tensor, backward, gradcheck

from oracles import attention_oracle, bn_train_oracle, naive_conv2d, naive_depthwise


def rng64(seed=0):
    return np.random.default_rng(seed)


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestDense:
    def test_identity_weights(self):
        layer = L.Dense(3, 3, rng64(), np.float64)
        layer.weights.data = np.eye(3)
        layer.bias.data = np.zeros(3)
        x = rng64(1).normal(size=(4, 3))
        np.testing.assert_array_equal(layer.forward(t64(x)).data, x)

    def test_zero_weights_constant_bias(self):
        layer = L.Dense(3, 2, rng64(), np.float64)
        layer.weights.data = np.zeros((3, 2))
        layer.bias.data = np.array([5.0, -1.0])
        out = layer.forward(t64(rng64(2).normal(size=(4, 3))))
        np.testing.assert_array_equal(out.data, np.tile([5.0, -1.0], (4, 1)))

    def test_matches_matmul_add_composition(self):
        layer = L.Dense(5, 4, rng64(3), np.float64)
        x = t64(rng64(4).normal(size=(6, 5)))
        oracle = T.add(T.matmul(x, layer.weights), layer.bias)
        assert np.max(np.abs(layer.forward(x).data - oracle.data)) <= 1e-12

    def test_dim_mismatch(self):
        layer = L.Dense(5, 4, rng64(), np.float64)
        with pytest.raises(DimensionError):
            layer.forward(t64(np.zeros((2, 3))))

    def test_gradcheck(self):
        layer = L.Dense(4, 3, rng64(5), np.float64)
        x = t64(rng64(6).normal(size=(2, 4)), grad=True)
        fn = lambda a, w, b: T.reduce_mean(T.mul(layer.forward(a), layer.forward(a)))
        assert gradcheck(fn, [x, layer.weights, layer.bias], eps=1e-5) <= 1e-6


class TestDropout:
    def test_eval_is_bitwise_identity(self):
        layer = L.Dropout(0.7, seed=1)
        x = Tensor(rng64(7).normal(size=(50,)).astype(np.float32))
        out = layer.forward(x, "eval")
        assert out is x

    def test_rate_zero_train(self):
        layer = L.Dropout(0.0, seed=1)
        x = Tensor(rng64(8).normal(size=(50,)).astype(np.float32))
        assert layer.forward(x, "train") is x

    def test_half_rate_statistics_and_exact_scaling(self):
        layer = L.Dropout(0.5, seed=42)
        x = Tensor(np.full(100_000, 3.0, dtype=np.float32))
        out = layer.forward(x, "train").data
        zeroed = float((out == 0).mean())
        assert abs(zeroed - 0.5) <= 0.01
        survivors = out[out != 0]
        np.testing.assert_array_equal(survivors, np.float32(6.0))

    def test_deterministic_under_seed(self):
        x = Tensor(rng64(9).normal(size=(100,)).astype(np.float32))
        a = L.Dropout(0.3, seed=5).forward(x, "train").data
        b = L.Dropout(0.3, seed=5).forward(x, "train").data
        np.testing.assert_array_equal(a, b)

    def test_train_expectation_matches_input(self):
        # inverted scaling keeps the expectation: mean over seeds ~ x
        total = 0.0
        trials = 10_000
        x = Tensor(np.array([4.0], dtype=np.float32))
        for seed in range(trials):
            layer = L.Dropout(0.5, seed=seed)
            total += float(layer.forward(x, "train").data[0])
        assert abs(total / trials - 4.0) <= 0.08  # 2% of 4.0

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            L.Dropout(1.0)

    def test_invalid_mode(self):
        with pytest.raises(ValueError, match="mode"):
            L.Dropout(0.1).forward(Tensor(np.zeros(2, dtype=np.float32)), "test")


class TestBatchNorm:
    def test_normalized_input_is_fixed_point(self):
        rng = rng64(10)
        x = rng.normal(size=(64, 3))
        x = (x - x.mean(axis=0)) / x.std(axis=0)
        layer = L.BatchNorm(3, epsilon=1e-12, dtype=np.float64)
        out = layer.forward(t64(x), "train")
        assert np.max(np.abs(out.data - x)) <= 1e-6

    def test_zero_gamma_gives_beta(self):
        layer = L.BatchNorm(2, dtype=np.float64)
        layer.gamma.data = np.zeros(2)
        layer.beta.data = np.array([4.0, -2.0])
        out = layer.forward(t64(rng64(11).normal(size=(8, 2))), "train")
        np.testing.assert_array_equal(out.data, np.tile([4.0, -2.0], (8, 1)))

    def test_train_output_statistics(self):
        layer = L.BatchNorm(4, epsilon=1e-8, dtype=np.float64)
        out = layer.forward(t64(rng64(12).normal(2.0, 3.0, size=(256, 4))), "train").data
        assert np.max(np.abs(out.mean(axis=0))) <= 1e-6
        assert np.max(np.abs(out.var(axis=0) - 1.0)) <= 1e-4

    def test_matches_numpy_oracle(self):
        layer = L.BatchNorm(3, epsilon=1e-3, dtype=np.float64)
        layer.gamma.data = np.array([1.5, 0.5, 2.0])
        layer.beta.data = np.array([0.1, -0.2, 0.0])
        x = rng64(13).normal(size=(5, 4, 4, 3))
        out = layer.forward(t64(x), "train")
        oracle = bn_train_oracle(x, layer.gamma.data, layer.beta.data, 1e-3)
        assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_batch_of_one_zero_variance_train(self):
        layer = L.BatchNorm(2, dtype=np.float64)
        out = layer.forward(t64([[3.0, -1.0]]), "train")
        assert np.all(np.isfinite(out.data))

    def test_eval_uses_running_stats(self):
        layer = L.BatchNorm(2, momentum=0.5, dtype=np.float64)
        x = rng64(14).normal(1.0, 2.0, size=(32, 2))
        layer.forward(t64(x), "train")
        single = layer.forward(t64(x[:1]), "eval").data
        batched = layer.forward(t64(x), "eval").data
        np.testing.assert_allclose(single, batched[:1], atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            L.BatchNorm(3).forward(Tensor(np.zeros((2, 4), dtype=np.float32)), "train")


class TestInvertedResidual:
    def test_zero_projection_skip_is_identity(self):
        block = L.InvertedResidual(4, 4, 1, 2.0, rng64(15), np.float64)
        block.project.kernel.data = np.zeros_like(block.project.kernel.data)
        x = rng64(16).normal(size=(2, 6, 6, 4))
        out = block.forward(t64(x), "train")
        np.testing.assert_array_equal(out.data, x)

    def test_stride_two_halves_spatial_ceil(self):
        block = L.InvertedResidual(3, 8, 2, 2.0, rng64(17), np.float64)
        out = block.forward(t64(rng64(18).normal(size=(1, 7, 7, 3))), "eval")
        assert out.shape == (1, 4, 4, 8)

    def test_no_skip_when_channels_differ(self):
        block = L.InvertedResidual(3, 5, 1, 2.0, rng64(19), np.float64)
        assert not block.use_skip

    def test_matches_hand_composed_primitive_chain(self):
        block = L.InvertedResidual(3, 3, 1, 2.0, rng64(20), np.float64)
        x = rng64(21).normal(size=(2, 5, 5, 3))

        h = naive_conv2d(x, block.expand.kernel.data, 1, "same")
        h = bn_train_oracle(h, block.expand_bn.gamma.data, block.expand_bn.beta.data,
                            block.expand_bn.epsilon)
        h = np.clip(h, 0, 6)
        h = naive_depthwise(h, block.depthwise.kernel.data, 1, "same")
        h = bn_train_oracle(h, block.depthwise_bn.gamma.data,
                            block.depthwise_bn.beta.data, block.depthwise_bn.epsilon)
        h = np.clip(h, 0, 6)
        h = naive_conv2d(h, block.project.kernel.data, 1, "same")
        h = bn_train_oracle(h, block.project_bn.gamma.data, block.project_bn.beta.data,
                            block.project_bn.epsilon)
        oracle = x + h

        out = block.forward(t64(x), "train")
        assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_invalid_stride(self):
        with pytest.raises(ValueError, match="stride"):
            L.InvertedResidual(3, 3, 3, 2.0, rng64(22))


class TestVectorizer:
    def test_frequency_then_lexicographic_ids(self):
        v = L.fit_vocab(["Beef Stew", "beef soup"], max_vocab=10, max_tokens=4)
        assert v.vocab == {"beef": 2, "soup": 3, "stew": 4}

    def test_single_token_corpus(self):
        v = L.fit_vocab(["a"], max_vocab=10, max_tokens=4)
        assert v.vocab == {"a": 2}

    def test_capacity_keeps_most_frequent(self):
        corpus = ["apple banana cherry date elderberry", "apple apple banana"]
        v = L.fit_vocab(corpus, max_vocab=3, max_tokens=4)
        assert v.vocab == {"apple": 2}
        assert v.vocab_size == 3

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            L.fit_vocab([], max_vocab=10, max_tokens=4)

    def test_punctuation_and_case(self):
        v = L.fit_vocab(["Mac & Cheese, deluxe!"], max_vocab=10, max_tokens=4)
        assert set(v.vocab) == {"mac", "cheese", "deluxe"}

    def test_vectorize_empty_string(self):
        v = L.fit_vocab(["beef"], max_vocab=10, max_tokens=5)
        np.testing.assert_array_equal(v.vectorize(""), np.zeros(5, dtype=np.int64))

    def test_vectorize_known_tokens_padded(self):
        v = L.Vectorizer({"beef": 2}, max_tokens=4)
        np.testing.assert_array_equal(v.vectorize("beef beef"), [2, 2, 0, 0])

    def test_vectorize_oov(self):
        v = L.Vectorizer({"beef": 2}, max_tokens=4)
        np.testing.assert_array_equal(v.vectorize("dragonfruit"), [1, 0, 0, 0])

    def test_vectorize_truncates(self):
        v = L.Vectorizer({"a": 2}, max_tokens=2)
        np.testing.assert_array_equal(v.vectorize("a a a a"), [2, 2])

    def test_corpus_tokens_never_oov(self):
        corpus = ["grilled salmon bowl", "salmon salad", "grilled chicken"]
        v = L.fit_vocab(corpus, max_vocab=20, max_tokens=6)
        for text in corpus:
            ids = v.vectorize(text)
            assert L.OOV_ID not in ids
            assert len(ids) == 6


class TestEmbedding:
    def test_constant_ids_pool_to_table_row(self):
        table = L.EmbeddingTable(6, 4, rng64(23), np.float64)
        ids = np.full((2, 5), 3)
        _, pooled = table.embed_and_pool(ids)
        np.testing.assert_allclose(pooled.data, np.tile(table.table.data[3], (2, 1)),
                                   atol=1e-12)

    def test_zero_table(self):
        table = L.EmbeddingTable(6, 4, rng64(24), np.float64)
        table.table.data = np.zeros((6, 4))
        _, pooled = table.embed_and_pool(np.array([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(pooled.data, np.zeros((2, 4)))

    def test_pool_matches_row_average_oracle(self):
        table = L.EmbeddingTable(8, 3, rng64(25), np.float64)
        ids = rng64(26).integers(0, 8, size=(4, 6))
        seq, pooled = table.embed_and_pool(ids)
        oracle = np.stack([table.table.data[row].mean(axis=0) for row in ids])
        assert seq.shape == (4, 6, 3)
        assert np.max(np.abs(pooled.data - oracle)) <= 1e-12

    def test_out_of_range_id(self):
        table = L.EmbeddingTable(4, 3, rng64(27), np.float64)
        with pytest.raises(ValueError, match="range"):
            table.embed_and_pool(np.array([[0, 9]]))

    def test_pad_row_receives_gradient(self):
        table = L.EmbeddingTable(4, 3, rng64(28), np.float64)
        _, pooled = table.embed_and_pool(np.array([[0, 2]]))
        grads = backward(T.reduce_mean(pooled), [table.table])
        assert np.any(grads[table.table][0] != 0)


class TestCrossAttention:
    def make(self, d=8, heads=2, key_dim=3, seed=29):
        return L.MultiHeadAttention(d, heads, key_dim, rng64(seed), np.float64)

    def test_single_key_ignores_query_content(self):
        mha = self.make()
        kv = t64(rng64(30).normal(size=(1, 1, 8)))
        out1 = mha.forward(t64(rng64(31).normal(size=(1, 3, 8))), kv)
        out2 = mha.forward(t64(rng64(32).normal(size=(1, 3, 8))), kv)
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)
        expected = (kv.data[0, 0] @ mha.wv.data) @ mha.wo.data
        for i in range(3):
            np.testing.assert_allclose(out1.data[0, i], expected, atol=1e-12)

    def test_identical_values_collapse(self):
        mha = self.make()
        row = rng64(33).normal(size=8)
        kv = t64(np.tile(row, (1, 5, 1)))
        out = mha.forward(t64(rng64(34).normal(size=(1, 4, 8))), kv)
        for i in range(1, 4):
            np.testing.assert_allclose(out.data[0, i], out.data[0, 0], atol=1e-12)

    def test_matches_per_head_loop_oracle(self):
        mha = self.make()
        q = rng64(35).normal(size=(1, 3, 8))
        kv = rng64(36).normal(size=(1, 4, 8))
        out = mha.forward(t64(q), t64(kv))
        oracle = attention_oracle(q, kv, mha.wq.data, mha.wk.data, mha.wv.data,
                                  mha.wo.data, heads=2, key_dim=3)
        assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_randomized_oracle_cases(self):
        rng = rng64(37)
        for _ in range(110):
            heads = int(rng.integers(1, 4))
            key_dim = int(rng.integers(1, 5))
            d = int(rng.integers(2, 9))
            nq, nk = rng.integers(1, 6, size=2)
            mha = L.MultiHeadAttention(d, heads, key_dim,
                                       np.random.default_rng(rng.integers(2**31)),
                                       np.float64)
            q = rng.normal(size=(2, nq, d))
            kv = rng.normal(size=(2, nk, d))
            out = mha.forward(t64(q), t64(kv))
            oracle = attention_oracle(q, kv, mha.wq.data, mha.wk.data, mha.wv.data,
                                      mha.wo.data, heads, key_dim)
            assert np.max(np.abs(out.data - oracle)) <= 1e-10

    def test_permutation_invariance_of_key_positions(self):
        mha = self.make()
        q = t64(rng64(38).normal(size=(1, 3, 8)))
        kv = rng64(39).normal(size=(1, 5, 8))
        out = mha.forward(q, t64(kv))
        perm = rng64(40).permutation(5)
        out_perm = mha.forward(q, t64(kv[:, perm]))
        assert np.max(np.abs(out.data - out_perm.data)) <= 1e-12

    def test_weights_nonnegative_rows_sum_to_one(self):
        mha = self.make()
        _, weights = mha.forward(t64(rng64(41).normal(size=(2, 3, 8))),
                                 t64(rng64(42).normal(size=(2, 4, 8))),
                                 return_weights=True)
        assert np.all(weights.data >= 0)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_keys_rejected(self):
        mha = self.make()
        with pytest.raises(ValueError, match="non-empty"):
            mha.forward(t64(np.zeros((1, 2, 8))), t64(np.zeros((1, 0, 8))))

    def test_gradcheck_all_inputs_and_params(self):
        mha = self.make(seed=43)
        q = t64(rng64(44).normal(size=(1, 2, 8)), grad=True)
        kv = t64(rng64(45).normal(size=(1, 3, 8)), grad=True)
        fn = lambda qq, kk, *ws: T.reduce_mean(T.mul(mha.forward(qq, kk),
                                                     mha.forward(qq, kk)))
        err = gradcheck(fn, [q, kv, mha.wq, mha.wk, mha.wv, mha.wo], eps=1e-5)
        assert err <= 1e-6


class TestFlattenConcat:
    def test_flatten_row_major(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        out = L.flatten(t64(x))
        assert out.shape == (2, 12)
        np.testing.assert_array_equal(out.data, x.reshape(2, 12))

    def test_flatten_already_flat(self):
        x = rng64(46).normal(size=(5, 7))
        np.testing.assert_array_equal(L.flatten(t64(x)).data, x)

    def test_flatten_roundtrip(self):
        x = rng64(47).normal(size=(2, 3, 4))
        flat = L.flatten(t64(x))
        back = T.reshape(flat, (2, 3, 4))
        np.testing.assert_array_equal(back.data, x)

    def test_flatten_rank_one_rejected(self):
        with pytest.raises(DimensionError):
            L.flatten(t64(np.zeros(3)))

    def test_concat_single_unchanged(self):
        x = rng64(48).normal(size=(2, 3))
        np.testing.assert_array_equal(T.concat([t64(x)]).data, x)

    def test_concat_column_pattern(self):
        out = T.concat([t64(np.zeros((4, 2))), t64(np.ones((4, 3)))])
        np.testing.assert_array_equal(out.data, np.tile([0, 0, 1, 1, 1.0], (4, 1)))

    def test_concat_batch_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([t64(np.zeros((2, 3))), t64(np.zeros((3, 3)))])

    def test_concat_gradient_of_sum_is_ones(self):
        a = t64(rng64(49).normal(size=(2, 3)), grad=True)
        b = t64(rng64(50).normal(size=(2, 4)), grad=True)
        grads = backward(T.reduce_sum(T.concat([a, b])), [a, b])
        np.testing.assert_array_equal(grads[a], np.ones((2, 3)))
        np.testing.assert_array_equal(grads[b], np.ones((2, 4)))
