import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from signret.container import ContainerError, read_container, write_container
from signret.corpus import (
    SubtitleRecord,
    SyntheticConfig,
    generate_synthetic,
    inflections,
    load_bundle,
    perturb_alignment,
    read_subtitles,
    save_bundle,
)
from signret.recognizer import CONTINUOUS, ClassifierTrainConfig, ClipSample, lemmatize, train_classifier
from signret.spotalign import SpotConfig, plant_recovery, spot_videos

SMALL = dict(n_train=40, n_val=10, n_test=10)


@pytest.fixture(scope="module")
def bundle():
    return generate_synthetic(SyntheticConfig(seed=3, **SMALL))


class TestGenerator:
    def test_splits_are_disjoint_and_sized(self, bundle):
        s = bundle.splits
        assert [len(s[k]) for k in ("train", "val", "test")] == [40, 10, 10]
        assert len(set(s["train"]) | set(s["val"]) | set(s["test"])) == 60

    def test_subtitles_name_their_planted_signs(self, bundle):
        for p in bundle.plants:
            if p.in_subtitle:
                sub = bundle.subtitles[p.video_id]
                assert p.word in {lemmatize(t) for t in sub.tokens}
                assert sub.t_begin <= p.start and p.end <= sub.t_end
            else:
                sub = bundle.subtitles[p.video_id]
                assert p.end <= sub.t_begin or p.start >= sub.t_end

    def test_inflections_lemmatize_back(self):
        for g in ("walk", "run", "city", "make"):
            assert all(lemmatize(f) == g for f in inflections(g))

    def test_same_seed_same_files(self, tmp_path):
        for name in ("a", "b"):
            save_bundle(generate_synthetic(SyntheticConfig(seed=7, **SMALL)), tmp_path / name)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_different_seed_differs(self):
        a = generate_synthetic(SyntheticConfig(seed=1, **SMALL))
        b = generate_synthetic(SyntheticConfig(seed=2, **SMALL))
        assert not np.array_equal(a.videos["v00000"].features[:5], b.videos["v00000"].features[:5])

    def test_no_mouthing_when_recall_is_zero(self):
        assert generate_synthetic(SyntheticConfig(seed=0, mouthing_recall=0.0, **SMALL)).mouthing == []

    def test_mouthing_only_in_train_and_restricted_vocab(self, bundle):
        train, vocab = set(bundle.splits["train"]), set(bundle.mouthing_vocab)
        assert bundle.mouthing
        assert all(m.video_id in train and m.word in vocab for m in bundle.mouthing)
        assert len(vocab) == round(0.6 * 30)

    @pytest.mark.parametrize("kw", [{"vocab_size": 0}, {"noise_sigma": -1}, {"mouthing_recall": 2},
                                    {"frames_per_sign": (5, 3)}, {"domain_gap_mode": "x"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticConfig(**kw)

    def test_unknown_config_key(self):
        with pytest.raises(ValueError, match="unknown"):
            SyntheticConfig.from_dict({"vocab": 3})

    def test_oracle_recovers_planted_signs(self):
        # clean, gap-free corpus with a classifier trained on ground-truth spans
        b = generate_synthetic(SyntheticConfig(seed=0, noise_sigma=0.0, domain_gap_offset=0.0,
                                               n_train=100, n_val=0, n_test=0))
        clips = [ClipSample(b.videos[p.video_id].features[p.start:p.end], p.word, CONTINUOUS) for p in b.plants]
        clf = train_classifier(clips, b.class_words, ClassifierTrainConfig())
        found = spot_videos(b, b.splits["train"], clf, SpotConfig(), "D1")
        assert plant_recovery(found, b) >= 0.95


class TestPerturbAlignment:
    subs = {"a": SubtitleRecord("a", 10, 30, "x"), "b": SubtitleRecord("b", 0, 5, "y")}
    lengths = {"a": 50, "b": 40}

    def test_zero_shift_is_identity(self):
        assert perturb_alignment(self.subs, 0, 0, 1, self.lengths) == self.subs

    def test_deterministic_shift(self):
        got = perturb_alignment(self.subs, 7, 0, 1, self.lengths)
        assert (got["a"].t_begin, got["a"].t_end) == (17, 37)
        assert (got["b"].t_begin, got["b"].t_end) == (7, 12)

    def test_clamps_and_keeps_duration(self):
        got = perturb_alignment(self.subs, 45, 0, 1, self.lengths)
        assert (got["a"].t_begin, got["a"].t_end) == (30, 50)
        got = perturb_alignment(self.subs, -20, 0, 1, self.lengths)
        assert (got["a"].t_begin, got["a"].t_end) == (0, 20)

    @given(st.floats(-100, 100), st.floats(0, 20), st.integers(0, 100))
    def test_windows_stay_valid(self, mean, sigma, seed):
        for vid, s in perturb_alignment(self.subs, mean, sigma, seed, self.lengths).items():
            assert 0 <= s.t_begin < s.t_end <= self.lengths[vid]
            assert s.text == self.subs[vid].text


class TestFiles:
    def test_bundle_round_trip(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path)
        back = load_bundle(tmp_path)
        assert back.splits == bundle.splits and back.plants == bundle.plants
        assert back.subtitles == bundle.subtitles and back.mouthing == bundle.mouthing
        assert back.class_words == bundle.class_words
        assert SyntheticConfig.from_dict(back.config) == SyntheticConfig.from_dict(bundle.config)
        for vid, seq in bundle.videos.items():
            np.testing.assert_array_equal(back.videos[vid].features, seq.features)
        w = bundle.class_words[0]
        np.testing.assert_array_equal(back.exemplars[w][-1], bundle.exemplars[w][-1])

    def test_container_round_trip(self, tmp_path, rng):
        arrays = [("a", rng.normal(size=(3, 2))), ("b", rng.normal(size=(4,)))]
        write_container(tmp_path / "c", b"TESTMAG1", {"k": 1}, arrays)
        meta, back = read_container(tmp_path / "c", b"TESTMAG1")
        assert meta["k"] == 1
        for name, a in arrays:
            np.testing.assert_array_equal(back[name], a.astype(np.float32))

    @pytest.mark.parametrize("cut,match", [(10, "offset 10"), (20, "offset 16"), (-3, "blob at offset")])
    def test_truncation_names_offset(self, tmp_path, cut, match):
        write_container(tmp_path / "c", b"TESTMAG1", {}, [("a", np.ones((4, 4)))])
        data = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(data[:cut])
        with pytest.raises(ContainerError, match=match):
            read_container(tmp_path / "c", b"TESTMAG1")

    def test_wrong_magic(self, tmp_path):
        write_container(tmp_path / "c", b"TESTMAG1", {}, [("a", np.ones(2))])
        with pytest.raises(ContainerError, match="magic at offset 0"):
            read_container(tmp_path / "c", b"OTHERMAG")

    def test_bad_manifest(self, tmp_path):
        body = b"{not json"
        (tmp_path / "c").write_bytes(b"TESTMAG1" + struct.pack("<Q", len(body)) + body)
        with pytest.raises(ContainerError, match="manifest at offset 16"):
            read_container(tmp_path / "c", b"TESTMAG1")

    def test_bad_subtitle_window(self, tmp_path):
        (tmp_path / "s.txt").write_text("v0 5 3 hello\n")
        with pytest.raises(ValueError, match=":1:"):
            read_subtitles(tmp_path / "s.txt")
