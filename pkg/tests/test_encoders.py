import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcases
from signret.encoders import (
    UNK,
    FeatureSequence,
    GatedUnitParams,
    JointEmbeddingModel,
    NetVladParams,
    TextSequence,
    WordEmbeddingTable,
    encode_text,
    encode_video,
    gated_embedding_unit,
    netvlad_aggregate,
    temporal_pool,
    tokenize,
)
from signret.numerics import DimensionError


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def netvlad_by_hand(x, centers, w, b):
    """Loop-based evaluation of soft-assigned residual aggregation."""
    k, d = centers.shape
    blocks = []
    for j in range(k):
        acc = np.zeros(d)
        for xi in x:
            logits = np.array([xi @ w[:, c] + b[0, c] for c in range(k)])
            a = np.exp(logits - logits.max())
            a /= a.sum()
            acc += a[j] * (xi - centers[j])
        n = np.linalg.norm(acc)
        blocks.append(acc / n if n > 0 else acc)
    return unit(np.concatenate(blocks))


@pytest.fixture
def table(rng):
    words = [UNK, "run", "cook", "eat", "house", "the"]
    return WordEmbeddingTable(words, rng.normal(size=(len(words), 4)))


@pytest.fixture
def model(rng, table):
    return JointEmbeddingModel.create(6, 4, embed_dim=5, clusters=3, rng=rng, word_sample=None)


class TestTable:
    def test_unknown_tokens_map_to_unk(self, table):
        np.testing.assert_array_equal(table.lookup(["zebra"]), table.vectors[[table.unk_index]])

    def test_empty_lookup_rejected(self, table):
        with pytest.raises(ValueError):
            table.lookup([])

    def test_requires_unk_row(self):
        with pytest.raises(ValueError, match="<unk>"):
            WordEmbeddingTable(["a"], np.zeros((1, 2)))

    def test_file_round_trip(self, table, tmp_path):
        table.save(tmp_path / "w.txt")
        back = WordEmbeddingTable.load(tmp_path / "w.txt")
        assert back.words == table.words
        np.testing.assert_array_equal(back.vectors, table.vectors)
        assert (tmp_path / "w.txt").read_text().startswith("vocab 6 dim 4\n")

    def test_bad_header_rejected(self, tmp_path):
        (tmp_path / "w.txt").write_text("words 1 dim 2\n<unk> 0 0\n")
        with pytest.raises(ValueError, match="header"):
            WordEmbeddingTable.load(tmp_path / "w.txt")

    def test_tokenizer(self):
        assert tokenize("He's RUNNING, fast!") == ["he", "s", "running", "fast"]


class TestTemporalPool:
    def test_average(self):
        out, _ = temporal_pool(np.array([[1.0, 2.0], [3.0, 4.0]]), "average")
        np.testing.assert_array_equal(out, [[2.0, 3.0]])

    def test_max(self):
        out, _ = temporal_pool(np.array([[1.0, 5.0], [3.0, 2.0]]), "max")
        np.testing.assert_array_equal(out, [[3.0, 5.0]])

    @pytest.mark.parametrize("mode", ["average", "max"])
    def test_single_row_unchanged(self, mode):
        out, _ = temporal_pool(np.array([[1.5, -2.0]]), mode)
        np.testing.assert_array_equal(out, [[1.5, -2.0]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            temporal_pool(np.zeros((0, 3)))

    def test_max_gradient_goes_to_lowest_tied_index(self):
        from signret.encoders import temporal_pool_backward
        _, cache = temporal_pool(np.array([[2.0], [2.0]]), "max")
        np.testing.assert_array_equal(temporal_pool_backward(np.array([[1.0]]), cache), [[1.0], [0.0]])

    @given(st.integers(0, 2**31 - 1), st.integers(1, 8))
    def test_permutation_and_doubling(self, seed, t):
        r = np.random.default_rng(seed)
        x = r.normal(size=(t, 3))
        perm = r.permutation(t)
        avg, _ = temporal_pool(x, "average")
        np.testing.assert_allclose(temporal_pool(x[perm], "average")[0], avg, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(temporal_pool(x[perm], "max")[0], temporal_pool(x, "max")[0])
        np.testing.assert_allclose(temporal_pool(np.repeat(x, 2, axis=0), "average")[0], avg,
                                   rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("name", ["temporal_pool_average", "temporal_pool_max"])
    def test_gradients(self, name):
        assert gradcases.worst_error(gradcases.CASES[name]) < gradcases.TOLERANCE


class TestNetVlad:
    def test_hand_set_two_cluster_case(self):
        centers = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([[0.5, -0.2], [0.1, 0.3]])
        b = np.array([[0.0, 0.1]])
        x = np.array([[0.2, 0.4], [1.5, -0.5]])
        out, _ = netvlad_aggregate(x, NetVladParams(centers, w, b))
        np.testing.assert_allclose(out[0], netvlad_by_hand(x, centers, w, b), rtol=1e-12, atol=1e-14)

    def test_zero_residual_cluster(self):
        centers = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
        p = NetVladParams.from_centers(centers, alpha=5.0)
        out, _ = netvlad_aggregate(centers[[0]], p)
        block = out[0].reshape(3, 2)
        assert np.linalg.norm(block[0]) < 1e-12
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9

    def test_initialisation_from_centers(self):
        c = np.array([[1.0, 2.0], [0.0, -1.0]])
        p = NetVladParams.from_centers(c, alpha=10.0)
        np.testing.assert_array_equal(p.assign_weights, 20.0 * c.T)
        np.testing.assert_array_equal(p.assign_bias, [[-50.0, -10.0]])

    def test_output_dimension(self, rng):
        p = NetVladParams.from_centers(rng.normal(size=(4, 3)))
        out, _ = netvlad_aggregate(rng.normal(size=(5, 3)), p)
        assert out.shape == (1, 12)

    def test_permutation_invariance_is_exact(self, rng):
        p = NetVladParams.from_centers(rng.normal(size=(4, 3)))
        x = rng.normal(size=(6, 3))
        a, _ = netvlad_aggregate(x, p)
        b, _ = netvlad_aggregate(x[::-1], p)
        np.testing.assert_array_equal(a, b)

    def test_gradients(self):
        assert gradcases.worst_error(gradcases.CASES["netvlad"]) < gradcases.TOLERANCE


class TestGatedUnit:
    def test_open_gate_limit(self, rng):
        x, w1, b1 = rng.normal(size=(1, 3)), rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        out, _, _ = gated_embedding_unit(x, GatedUnitParams(w1, b1, np.zeros((4, 4)), np.full((1, 4), 50.0)))
        np.testing.assert_allclose(out[0], unit(x @ w1 + b1)[0], atol=1e-12)

    def test_uniform_gate_absorbed_by_normalisation(self, rng):
        x, w1, b1 = rng.normal(size=(1, 3)), rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        out, _, _ = gated_embedding_unit(x, GatedUnitParams(w1, b1, np.zeros((4, 4)), np.zeros((1, 4))))
        np.testing.assert_allclose(out[0], unit(x @ w1 + b1)[0], rtol=1e-12)

    def test_matches_formula(self, rng):
        x = rng.normal(size=(1, 3))
        p = GatedUnitParams(rng.normal(size=(3, 2)), rng.normal(size=(1, 2)),
                            rng.normal(size=(2, 2)), rng.normal(size=(1, 2)))
        z1 = x @ p.w1 + p.b1
        expected = unit((z1 * sigmoid(z1 @ p.w2 + p.b2))[0])
        np.testing.assert_allclose(gated_embedding_unit(x, p)[0][0], expected, rtol=1e-12)

    def test_zero_output_flagged(self):
        p = GatedUnitParams(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((1, 2)))
        out, deg, _ = gated_embedding_unit(np.ones((1, 2)), p)
        np.testing.assert_array_equal(out, 0.0)
        assert deg[0]

    def test_gradients(self):
        assert gradcases.worst_error(gradcases.CASES["gated_unit"]) < gradcases.TOLERANCE


class TestJointModel:
    def test_identity_projection_returns_pooled_unit_vector(self, model):
        model.params["video_proj.w"].value = np.eye(6, 5)
        model.params["video_proj.b"].value = np.zeros((1, 5))
        pooled = unit([0.6, 0.0, 0.8, 0.0, 0.0])
        seq = FeatureSequence("v", np.tile(np.concatenate([pooled, [0.0]]), (3, 1)))
        np.testing.assert_allclose(encode_video(seq, model), pooled, atol=1e-15)

    def test_video_matches_composed_pipeline(self, model, rng):
        x = rng.normal(size=(3, 6))
        w, b = model.params["video_proj.w"].value, model.params["video_proj.b"].value
        expected = unit(x.mean(axis=0) @ w + b[0])
        np.testing.assert_allclose(encode_video(FeatureSequence("v", x), model), expected, rtol=1e-12)

    def test_text_matches_composed_pipeline(self, model, table):
        t = TextSequence("t", ["run", "zebra", "cook"])
        nv = model.netvlad()
        e = table.lookup(t.tokens)
        v = netvlad_by_hand(e, nv.centers, nv.assign_weights, nv.assign_bias)
        g = model.gated()
        z1 = v @ g.w1 + g.b1[0]
        z2 = unit(z1 * sigmoid(z1 @ g.w2 + g.b2[0]))
        expected = unit(z2 @ model.params["text_proj.w"].value + model.params["text_proj.b"].value[0])
        np.testing.assert_allclose(encode_text(t, table, model), expected, rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self, model):
        with pytest.raises(DimensionError):
            encode_video(FeatureSequence("v", np.zeros((2, 7))), model)

    def test_empty_text_rejected(self, model, table):
        with pytest.raises(ValueError):
            encode_text(TextSequence("t", []), table, model)

    @given(st.integers(0, 2**31 - 1))
    def test_unit_norm_outputs(self, seed):
        r = np.random.default_rng(seed)
        table = WordEmbeddingTable([UNK, "a", "b"], r.normal(size=(3, 4)))
        m = JointEmbeddingModel.create(6, 4, embed_dim=5, clusters=3, rng=r)
        v = encode_video(r.normal(size=(int(r.integers(1, 6)), 6)), m)
        t = encode_text(TextSequence("t", list(r.choice(["a", "b", "c"], size=3))), table, m)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9
        assert abs(np.linalg.norm(t) - 1.0) < 1e-9

    @given(st.permutations(["run", "cook", "eat", "the", "run", "house"]))
    def test_text_permutation_invariance(self, tokens):
        r = np.random.default_rng(3)
        table = WordEmbeddingTable([UNK, "run", "cook", "eat", "house", "the"], r.normal(size=(6, 4)))
        m = JointEmbeddingModel.create(6, 4, embed_dim=5, clusters=3, rng=r)
        ref = encode_text(TextSequence("t", ["run", "cook", "eat", "the", "run", "house"]), table, m)
        np.testing.assert_array_equal(encode_text(TextSequence("t", list(tokens)), table, m), ref)

    def test_kmeans_initialisation_uses_word_sample(self, rng, table):
        m = JointEmbeddingModel.create(6, 4, clusters=2, rng=rng, word_sample=np.vstack([table.vectors] * 2))
        assert m.params["text_netvlad.centers"].value.shape == (2, 4)

    @pytest.mark.parametrize("name", ["joint_model_average", "joint_model_max"])
    def test_encoder_gradients(self, name):
        assert gradcases.worst_error(gradcases.CASES[name]) < gradcases.TOLERANCE
