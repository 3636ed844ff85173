import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcases
from signret.encoders import FeatureSequence, TextSequence
from signret.recognizer import (
    ClassifierTrainConfig,
    ClipSample,
    WindowClassifier,
    classifier_accuracy,
    extract_word_set,
    iou_similarity,
    latent_embed,
    lemmatize,
    parse_irregulars,
    sliding_window_predict,
    sr_similarity_matrix,
    train_classifier,
    window_means,
    write_predictions,
)


class TestLemmatize:
    @pytest.mark.parametrize("word,lemma", [
        ("running", "run"), ("run", "run"), ("ran", "run"), ("cities", "city"), ("Dogs", "dog"),
        ("making", "make"), ("boxes", "box"), ("went", "go"), ("morning", "morning"), ("bus", "bus"),
    ])
    def test_examples(self, word, lemma):
        assert lemmatize(word) == lemma

    @given(st.text("abcdeginorsty", min_size=0, max_size=12))
    def test_idempotent(self, w):
        assert lemmatize(lemmatize(w)) == lemmatize(w)

    def test_custom_table(self):
        assert lemmatize("mice", {"mice": "mouse"}) == "mouse"

    def test_cyclic_table_rejected(self):
        with pytest.raises(ValueError, match="cycle"):
            parse_irregulars("a b\nb a\n")

    def test_malformed_table_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_irregulars("ran run\nbroken\n")


word_sets = st.sets(st.sampled_from("abcdefgh"), max_size=6)


class TestIoU:
    def test_examples(self):
        assert iou_similarity({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)
        assert iou_similarity({"a"}, {"a"}) == 1.0
        assert iou_similarity({"a"}, {"b"}) == 0.0
        assert iou_similarity(set(), set()) == 0.0
        assert iou_similarity(set(), {"a"}) == 0.0

    @given(word_sets, word_sets)
    def test_properties(self, a, b):
        s = iou_similarity(a, b)
        assert 0.0 <= s <= 1.0 and s == iou_similarity(b, a)
        assert (s == 1.0) == (bool(a) and a == b)


def toy_classifier(window_len=2):
    clf = WindowClassifier.create(3, ["dogs", "cat", "running"], hidden_dim=4, window_len=window_len)
    clf.w1, clf.b1 = np.eye(3, 4), np.zeros((1, 4))
    clf.w2, clf.b2 = np.eye(4, 3) * 10, np.zeros((1, 3))
    return clf


class TestWordSets:
    def test_extraction_lemmatizes_and_thresholds(self):
        clf = toy_classifier()
        preds = [(0, 0.9), (0, 0.8), (1, 0.4), (2, 0.6)]
        assert extract_word_set(preds, 0.5, clf) == {"dog", "run"}
        assert extract_word_set(preds, 0.0, clf) == {"dog", "cat", "run"}
        assert extract_word_set(preds, 1.0, clf) == set()

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            extract_word_set([], 1.5, toy_classifier())

    @given(st.lists(st.tuples(st.integers(0, 2), st.floats(0, 1)), max_size=10),
           st.floats(0, 1), st.floats(0, 1))
    def test_higher_threshold_gives_subset(self, preds, t1, t2):
        lo, hi = sorted([t1, t2])
        clf = toy_classifier()
        assert extract_word_set(preds, hi, clf) <= extract_word_set(preds, lo, clf)


class TestSlidingWindow:
    def test_window_means_oracle(self, rng):
        x = rng.normal(size=(7, 3))
        want = np.array([x[s:s + 3].mean(axis=0) for s in range(5)])
        np.testing.assert_allclose(window_means(x, 3), want, atol=1e-12)

    def test_short_sequence(self):
        with pytest.raises(ValueError, match="shorter"):
            window_means(np.zeros((2, 3)), 3)

    def test_latent_embedding_per_window(self, rng):
        clf = WindowClassifier.create(3, ["a", "b"], hidden_dim=5, window_len=4, rng=rng)
        x = rng.normal(size=(9, 3))
        got = latent_embed(FeatureSequence("v", x), clf)
        assert got.shape == (6, 5)
        for s in range(6):
            want = np.maximum(x[s:s + 4].mean(axis=0) @ clf.w1 + clf.b1[0], 0.0)
            np.testing.assert_allclose(got[s], want, atol=1e-12)

    def test_prediction_by_hand(self, tmp_path):
        clf = toy_classifier()
        x = np.array([[1.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]])
        preds = sliding_window_predict(x, clf)
        assert [c for c, _ in preds] == [0, 0, 1]
        # middle window mean is (0.5, 0.5, 0): logits tie, lowest index wins
        assert preds[1][1] == pytest.approx(np.exp(5) / (2 * np.exp(5) + 1))
        write_predictions(tmp_path / "p.txt", preds, clf)
        assert (tmp_path / "p.txt").read_text().splitlines()[0].split()[:2] == ["0", "dogs"]

    def test_sr_similarity_matrix(self):
        clf = toy_classifier()
        videos = [FeatureSequence("v0", np.tile([1.0, 0, 0], (4, 1))),
                  FeatureSequence("v1", np.tile([0, 0, 1.0], (4, 1)))]
        queries = [TextSequence("q0", ["dog"]), TextSequence("q1", ["runs", "cat"])]
        sim = sr_similarity_matrix(queries, videos, clf)
        np.testing.assert_allclose(sim.scores, [[1.0, 0.0], [0.0, 0.5]])
        assert sim.col_ids == ["v0", "v1"] and sim.row_ids == ["q0", "q1"]


def separable_clips(rng, n_per=20, classes=("a", "b", "c"), centers=None):
    if centers is None:
        centers = rng.normal(0, 3, size=(len(classes), 6))
    clips = [ClipSample(centers[k] + rng.normal(0, 0.5, size=(20, 6)), w)
             for k, w in enumerate(classes) for _ in range(n_per)]
    return clips, list(classes)


class TestClassifier:
    def test_separable_accuracy(self, rng):
        centers = rng.normal(0, 3, size=(3, 6))
        train, words = separable_clips(rng, centers=centers)
        held, _ = separable_clips(np.random.default_rng(99), centers=centers)
        clf = train_classifier(train, words, ClassifierTrainConfig(epochs=20, window_len=8))
        assert classifier_accuracy(clf, held) > 0.95

    def test_zero_learning_rate_keeps_init(self, rng):
        clips, words = separable_clips(rng, n_per=4)
        cfg = ClassifierTrainConfig(epochs=2, learning_rate=0.0, window_len=8)
        init = WindowClassifier.create(6, words, cfg.hidden_dim, 8, np.random.default_rng(3))
        clf = train_classifier(clips, words, cfg, init=init)
        for k, v in init.params().items():
            np.testing.assert_array_equal(clf.params()[k], v)

    def test_deterministic(self, rng):
        clips, words = separable_clips(rng, n_per=4)
        cfg = ClassifierTrainConfig(epochs=3, window_len=8)
        a, b = train_classifier(clips, words, cfg), train_classifier(clips, words, cfg)
        for k in a.params():
            np.testing.assert_array_equal(a.params()[k], b.params()[k])

    def test_single_class_rejected(self, rng):
        clips, words = separable_clips(rng, n_per=3, classes=("a",))
        with pytest.raises(ValueError, match="two classes"):
            train_classifier(clips, ["a", "b"])

    def test_unknown_label_rejected(self, rng):
        clips, _ = separable_clips(rng, n_per=2)
        with pytest.raises(ValueError, match="vocabulary"):
            train_classifier(clips, ["a", "b"])

    def test_short_clip_rejected(self):
        clips = [ClipSample(np.zeros((3, 2)), "a"), ClipSample(np.zeros((3, 2)), "b")]
        with pytest.raises(ValueError, match="shorter"):
            train_classifier(clips, ["a", "b"], ClassifierTrainConfig(window_len=8))

    def test_save_load(self, tmp_path, rng):
        clf = WindowClassifier.create(3, ["a", "b"], hidden_dim=4, window_len=5, rng=rng)
        clf.save(tmp_path / "c.sgc")
        back = WindowClassifier.load(tmp_path / "c.sgc")
        assert back.class_words == ["a", "b"] and back.window_len == 5
        for k, v in clf.params().items():
            np.testing.assert_array_equal(back.params()[k], v.astype(np.float32))

    def test_gradient(self):
        assert gradcases.worst_error(gradcases.CASES["classifier"]) < gradcases.TOLERANCE
