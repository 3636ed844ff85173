"""Corpus formats, the synthetic corpus generator and subtitle perturbation.

Each synthetic video is a continuous stream::

    filler | context sign(s) | filler | sentence signs + fillers | filler | context sign(s) | filler

The subtitle covers only the sentence part and lists its glosses (some
inflected) plus filler words. Context signs model neighbouring sentences,
so shifting a subtitle window pulls in signs that do not match its text.
Sign frames are ``class_center + noise``; continuous frames additionally
carry the domain-gap offset, lexicon exemplars do not.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .container import ContainerError, read_container, write_container
from .encoders import UNK, FeatureSequence, TextSequence, WordEmbeddingTable, tokenize
from .recognizer import lemmatize
from .trainer import PairedCorpus

log = logging.getLogger(__name__)

FEAT_MAGIC = b"SGFEAT01"
SPLITS = ("train", "val", "test")

BASE_GLOSSES = (
    "run cook eat walk jump read write drive swim dance play paint draw climb "
    "throw kick push pull open wash clean build bake ride fish teach learn help "
    "watch listen talk call carry smile cut sit stand drink sleep wait visit "
    "travel garden ball book dog cat car tree apple water music family city "
    "friend school money phone color table window chair shoe bird coffee bread "
    "paper flower train boat"
).split()
FILLER_WORDS = (
    "the a to and of in it you we that then so just very really now here there "
    "with for on at my your our"
).split()


@dataclass
class SyntheticConfig:
    vocab_size: int = 30
    n_train: int = 300
    n_val: int = 60
    n_test: int = 60
    signs_per_video: Tuple[int, int] = (2, 4)
    frames_per_sign: Tuple[int, int] = (16, 24)
    filler_frames: Tuple[int, int] = (2, 6)
    context_signs: int = 1
    feature_dim: int = 64
    word_dim: int = 16
    class_center_spread: float = 1.0
    noise_sigma: float = 1.0
    domain_gap_offset: float = 12.0
    domain_gap_mode: str = "additive"
    exemplars_per_class: int = 3
    mouthing_recall: float = 0.3
    mouthing_precision: float = 0.8
    mouthing_vocab_fraction: float = 0.6
    text_filler_rate: float = 0.5
    inflection_rate: float = 0.3
    gloss_dropout: float = 0.0
    synonym_rate: float = 0.0
    variant_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("signs_per_video", "frames_per_sign", "filler_frames"):
            v = tuple(int(x) for x in getattr(self, name))
            setattr(self, name, v)
            if len(v) != 2 or v[0] > v[1]:
                raise ValueError(f"{name} must be a (low, high) range, got {v}")
        counts = [self.vocab_size, self.n_train, self.exemplars_per_class, self.feature_dim,
                  self.word_dim, self.signs_per_video[0], self.frames_per_sign[0]]
        if min(counts) < 1 or self.filler_frames[0] < 0 or self.context_signs < 0:
            raise ValueError("all counts must be >= 1")
        if min(self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if self.noise_sigma < 0 or self.domain_gap_offset < 0 or self.class_center_spread < 0:
            raise ValueError("sigma, spread and gap must be >= 0")
        for name in ("mouthing_recall", "mouthing_precision", "mouthing_vocab_fraction",
                     "text_filler_rate", "inflection_rate", "gloss_dropout",
                     "synonym_rate", "variant_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.mouthing_precision == 0.0 and self.mouthing_recall > 0:
            raise ValueError("mouthing_precision must be > 0 when recall > 0")
        if self.domain_gap_mode not in ("additive", "per_class"):
            raise ValueError(f"unknown domain_gap_mode {self.domain_gap_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def mean_sign_frames(self) -> float:
        return 0.5 * (self.frames_per_sign[0] + self.frames_per_sign[1])


@dataclass
class SubtitleRecord:
    video_id: str
    t_begin: int
    t_end: int
    text: str

    @property
    def tokens(self) -> List[str]:
        return tokenize(self.text)


@dataclass
class Plant:
    """Ground-truth sign occurrence (oracle tests only)."""

    video_id: str
    word: str
    start: int
    end: int
    in_subtitle: bool


@dataclass
class MouthingCandidate:
    video_id: str
    word: str
    frame_index: int
    confidence: float


@dataclass
class CorpusBundle:
    videos: Dict[str, FeatureSequence]
    subtitles: Dict[str, SubtitleRecord]
    table: WordEmbeddingTable
    exemplars: Dict[str, List[np.ndarray]]
    mouthing: List[MouthingCandidate]
    plants: List[Plant]
    splits: Dict[str, List[str]]
    class_words: List[str]
    mouthing_vocab: List[str]
    config: dict = field(default_factory=dict)
    dropped_glosses: List[Tuple[str, str]] = field(default_factory=list)

    def segment(self, video_id: str, subtitles: Optional[Dict[str, SubtitleRecord]] = None) -> FeatureSequence:
        sub = (subtitles or self.subtitles)[video_id]
        return FeatureSequence(video_id, self.videos[video_id].features[sub.t_begin:sub.t_end])

    def paired(self, split: str, subtitles: Optional[Dict[str, SubtitleRecord]] = None) -> PairedCorpus:
        """Subtitle-aligned (segment, text) pairs for one split."""
        subs = subtitles or self.subtitles
        ids = self.splits[split]
        return PairedCorpus(
            [self.segment(v, subs) for v in ids],
            [TextSequence(v, subs[v].tokens) for v in ids],
            split,
        )

    def plants_by_video(self) -> Dict[str, List[Plant]]:
        out: Dict[str, List[Plant]] = {}
        for p in self.plants:
            out.setdefault(p.video_id, []).append(p)
        return out


# --------------------------------------------------------------------------
# vocabulary helpers


def inflections(lemma: str) -> List[str]:
    """Regular -ing / -s / -ed forms whose lemma round-trips through :func:`lemmatize`."""
    vowels = "aeiou"
    forms = []
    cvc = (len(lemma) == 3 and lemma[-1] not in vowels + "wxy"
           and lemma[-2] in vowels and lemma[-3] not in vowels)
    if lemma.endswith("e") and not lemma.endswith("ee"):
        forms.append(lemma[:-1] + "ing")
        forms.append(lemma + "d")
    elif cvc:
        forms.append(lemma + lemma[-1] + "ing")
        forms.append(lemma + lemma[-1] + "ed")
    else:
        forms.append(lemma + "ing")
        forms.append(lemma[:-1] + "ied" if lemma.endswith("y") and lemma[-2] not in vowels else lemma + "ed")
    if lemma.endswith(("s", "x", "ch", "sh", "z")):
        forms.append(lemma + "es")
    elif lemma.endswith("y") and lemma[-2] not in vowels:
        forms.append(lemma[:-1] + "ies")
    else:
        forms.append(lemma + "s")
    return [f for f in forms if lemmatize(f) == lemma and f != lemma]


def synonym(gloss: str) -> str:
    """Stand-in near-synonym: a distinct word whose vector lies near the gloss."""
    return "alt" + gloss


def gloss_vocabulary(n: int) -> List[str]:
    words = [w for w in BASE_GLOSSES if lemmatize(w) == w]
    if n <= len(words):
        return words[:n]
    return words + [f"sign{i:03d}" for i in range(n - len(words))]


# --------------------------------------------------------------------------
# generation


def _f32(x: np.ndarray) -> np.ndarray:
    # round to storage precision so in-memory and reloaded bundles agree exactly
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate_synthetic(cfg: SyntheticConfig) -> CorpusBundle:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    glosses = gloss_vocabulary(cfg.vocab_size)
    n_mouth = max(1, int(round(cfg.mouthing_vocab_fraction * len(glosses))))
    mouthing_vocab = sorted(rng.choice(glosses, size=n_mouth, replace=False).tolist())
    mouthing_set = set(mouthing_vocab)

    centers = rng.normal(0.0, cfg.class_center_spread, size=(len(glosses), d))
    # alternative articulation of each sign, never shown in the lexicon
    variants = rng.normal(0.0, cfg.class_center_spread, size=(len(glosses), d))
    gap_dir = rng.normal(size=d)
    gap_dir /= np.linalg.norm(gap_dir)
    if cfg.domain_gap_mode == "additive":
        gaps = np.tile(cfg.domain_gap_offset * gap_dir, (len(glosses), 1))
    else:
        g = rng.normal(size=(len(glosses), d))
        gaps = cfg.domain_gap_offset * g / np.linalg.norm(g, axis=1, keepdims=True)
    filler_gap = cfg.domain_gap_offset * gap_dir

    # word vectors: inflected forms sit close to their lemma
    dt = cfg.word_dim
    words, vecs = [UNK], [np.zeros(dt)]
    surface: Dict[str, List[str]] = {}
    for g in glosses:
        base = rng.normal(0.0, 1.0, size=dt) / np.sqrt(dt)
        words.append(g)
        vecs.append(base)
        surface[g] = inflections(g)
        for f in surface[g]:
            words.append(f)
            vecs.append(base + rng.normal(0.0, 0.1, size=dt) / np.sqrt(dt))
        words.append(synonym(g))
        vecs.append(base + rng.normal(0.0, 0.3, size=dt) / np.sqrt(dt))
    for w in FILLER_WORDS:
        words.append(w)
        vecs.append(rng.normal(0.0, 1.0, size=dt) / np.sqrt(dt))
    table = WordEmbeddingTable(words, _f32(np.array(vecs)))

    def sign_frames(k: int, continuous: bool) -> np.ndarray:
        n = int(rng.integers(cfg.frames_per_sign[0], cfg.frames_per_sign[1] + 1))
        c = centers[k]
        if continuous and cfg.variant_rate and rng.random() < cfg.variant_rate:
            c = variants[k]
        x = c + rng.normal(0.0, cfg.noise_sigma, size=(n, d))
        return x + gaps[k] if continuous else x

    def filler(continuous: bool, lo: Optional[int] = None) -> np.ndarray:
        lo = cfg.filler_frames[0] if lo is None else lo
        n = int(rng.integers(lo, max(lo, cfg.filler_frames[1]) + 1))
        x = rng.normal(0.0, cfg.noise_sigma, size=(n, d))
        return x + filler_gap if continuous else x

    exemplars: Dict[str, List[np.ndarray]] = {}
    for k, g in enumerate(glosses):
        exemplars[g] = [
            _f32(np.vstack([filler(False, 1), sign_frames(k, False), filler(False, 1)]))
            for _ in range(cfg.exemplars_per_class)
        ]

    videos: Dict[str, FeatureSequence] = {}
    subtitles: Dict[str, SubtitleRecord] = {}
    plants: List[Plant] = []
    mouthing: List[MouthingCandidate] = []
    false_pool: List[Tuple[str, int]] = []
    splits: Dict[str, List[str]] = {s: [] for s in SPLITS}
    dropped: List[Tuple[str, str]] = []
    counter = 0
    for split, n_split in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        for _ in range(n_split):
            vid = f"v{counter:05d}"
            counter += 1
            n_signs = int(rng.integers(cfg.signs_per_video[0], cfg.signs_per_video[1] + 1))
            n_signs = min(n_signs, len(glosses))
            sent = rng.choice(len(glosses), size=n_signs, replace=False)
            others = [k for k in range(len(glosses)) if k not in set(sent.tolist())] or list(range(len(glosses)))
            pre = rng.choice(others, size=cfg.context_signs, replace=True)
            post = rng.choice(others, size=cfg.context_signs, replace=True)

            parts: List[np.ndarray] = []
            cursor = 0

            def put(block: np.ndarray) -> Tuple[int, int]:
                nonlocal cursor
                parts.append(block)
                span = (cursor, cursor + block.shape[0])
                cursor += block.shape[0]
                return span

            put(filler(True))
            for k in pre:
                s, e = put(sign_frames(int(k), True))
                plants.append(Plant(vid, glosses[k], s, e, False))
                put(filler(True))
            t_begin = cursor
            sent_plants = []
            for j, k in enumerate(sent):
                s, e = put(sign_frames(int(k), True))
                sent_plants.append(Plant(vid, glosses[k], s, e, True))
                if j < n_signs - 1:
                    put(filler(True))
            t_end = cursor
            for k in post:
                put(filler(True))
                s, e = put(sign_frames(int(k), True))
                plants.append(Plant(vid, glosses[k], s, e, False))
            put(filler(True, lo=1))
            feats = _f32(np.vstack(parts))
            videos[vid] = FeatureSequence(vid, feats)
            plants.extend(sent_plants)
            splits[split].append(vid)

            tokens: List[str] = []
            for p in sent_plants:
                if rng.random() < cfg.text_filler_rate:
                    tokens.append(str(rng.choice(FILLER_WORDS)))
                if rng.random() < cfg.gloss_dropout:
                    dropped.append((vid, p.word))
                    continue
                if cfg.synonym_rate and rng.random() < cfg.synonym_rate:
                    tokens.append(synonym(p.word))
                elif surface[p.word] and rng.random() < cfg.inflection_rate:
                    tokens.append(str(rng.choice(surface[p.word])))
                else:
                    tokens.append(p.word)
            if not tokens:
                tokens.append(str(rng.choice(FILLER_WORDS)))
            subtitles[vid] = SubtitleRecord(vid, t_begin, t_end, " ".join(tokens))

            if split == "train":
                for p in sent_plants:
                    if p.word in mouthing_set and rng.random() < cfg.mouthing_recall:
                        t = int(np.clip(p.end - 4 + rng.integers(-2, 3), 0, feats.shape[0] - 1))
                        conf = float(np.clip(rng.normal(0.8, 0.12), 0.0, 1.0))
                        mouthing.append(MouthingCandidate(vid, p.word, t, round(conf, 6)))
                false_pool.append((vid, feats.shape[0]))

    n_true = len(mouthing)
    if n_true and cfg.mouthing_precision < 1.0:
        n_false = int(round(n_true * (1.0 - cfg.mouthing_precision) / cfg.mouthing_precision))
        for _ in range(n_false):
            vid, length = false_pool[int(rng.integers(0, len(false_pool)))]
            word = str(rng.choice(mouthing_vocab))
            conf = float(np.clip(rng.normal(0.45, 0.15), 0.0, 1.0))
            mouthing.append(MouthingCandidate(vid, word, int(rng.integers(0, length)), round(conf, 6)))
    mouthing.sort(key=lambda m: (m.video_id, m.frame_index, m.word))
    if dropped:
        log.info("gloss dropout removed %d subtitle words", len(dropped))

    return CorpusBundle(
        videos=videos, subtitles=subtitles, table=table, exemplars=exemplars, mouthing=mouthing,
        plants=plants, splits=splits, class_words=list(glosses), mouthing_vocab=mouthing_vocab,
        config=asdict(cfg), dropped_glosses=dropped,
    )


# --------------------------------------------------------------------------
# alignment perturbation


def perturb_alignment(subtitles: Dict[str, SubtitleRecord], shift_mean: float, shift_sigma: float,
                      seed: int, video_lengths: Dict[str, int]) -> Dict[str, SubtitleRecord]:
    """Shift every subtitle window by a rounded Gaussian draw, clamped to the video."""
    rng = np.random.default_rng(seed)
    out: Dict[str, SubtitleRecord] = {}
    for vid in sorted(subtitles):
        s = subtitles[vid]
        delta = int(round(shift_mean + shift_sigma * rng.standard_normal())) if (shift_mean or shift_sigma) else 0
        length = video_lengths[vid]
        dur = s.t_end - s.t_begin
        begin = int(np.clip(s.t_begin + delta, 0, length - 1))
        end = int(np.clip(s.t_end + delta, begin + 1, length))
        # keep the window duration when clamping at either boundary
        if end - begin < dur:
            if begin == 0:
                end = min(length, dur)
            elif end == length:
                begin = max(0, length - dur)
        out[vid] = SubtitleRecord(vid, begin, end, s.text)
    return out


# --------------------------------------------------------------------------
# file formats


def save_features(path, seqs: Sequence[Tuple[str, np.ndarray]], meta: Optional[dict] = None) -> None:
    m = {"format": "features", "ids": [i for i, _ in seqs]}
    if meta:
        m.update(meta)
    write_container(path, FEAT_MAGIC, m, list(seqs))


def load_features(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    meta, arrays = read_container(path, FEAT_MAGIC)
    ids = meta.get("ids", [])
    if sorted(ids) != sorted(arrays):
        raise ContainerError(f"{path}: manifest id list does not match stored arrays")
    return meta, {i: arrays[i] for i in ids}


def write_subtitles(path, subtitles: Dict[str, SubtitleRecord]) -> None:
    lines = [f"{s.video_id} {s.t_begin} {s.t_end} {s.text}" for _, s in sorted(subtitles.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_subtitles(path) -> Dict[str, SubtitleRecord]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ", 3)
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected 'video_id t_begin t_end text'")
        vid, b, e = parts[0], int(parts[1]), int(parts[2])
        if not 0 <= b < e:
            raise ValueError(f"{path}:{lineno}: invalid window [{b}, {e})")
        out[vid] = SubtitleRecord(vid, b, e, parts[3] if len(parts) > 3 else "")
    return out


def write_mouthing(path, cands: Sequence[MouthingCandidate]) -> None:
    lines = [f"{c.video_id} {c.word} {c.frame_index} {c.confidence:.6f}" for c in cands]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_mouthing(path) -> List[MouthingCandidate]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'video_id word frame_index confidence'")
        out.append(MouthingCandidate(parts[0], parts[1], int(parts[2]), float(parts[3])))
    return out


def save_bundle(bundle: CorpusBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(bundle.videos)
    save_features(out / "features.sgf", [(i, bundle.videos[i].features) for i in ids])
    ex = [(f"{w}/{j}", a) for w in bundle.class_words for j, a in enumerate(bundle.exemplars.get(w, []))]
    save_features(out / "exemplars.sgf", ex, {"domain": "lexicon"})
    write_subtitles(out / "subtitles.txt", bundle.subtitles)
    write_mouthing(out / "mouthing.txt", bundle.mouthing)
    bundle.table.save(out / "words.txt")
    (out / "splits.json").write_text(json.dumps(bundle.splits, indent=1, sort_keys=True) + "\n")
    plants = [f"{p.video_id} {p.word} {p.start} {p.end} {int(p.in_subtitle)}" for p in bundle.plants]
    (out / "plants.txt").write_text("\n".join(plants) + "\n")
    info = {"class_words": bundle.class_words, "mouthing_vocab": bundle.mouthing_vocab,
            "config": bundle.config, "dropped_glosses": [list(x) for x in bundle.dropped_glosses]}
    (out / "corpus.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def load_bundle(in_dir) -> CorpusBundle:
    src = Path(in_dir)
    _, feats = load_features(src / "features.sgf")
    _, ex = load_features(src / "exemplars.sgf")
    info = json.loads((src / "corpus.json").read_text())
    exemplars: Dict[str, List[np.ndarray]] = {}
    for key, arr in ex.items():
        word, _ = key.rsplit("/", 1)
        exemplars.setdefault(word, []).append(arr)
    plants = []
    plant_file = src / "plants.txt"
    if plant_file.exists():
        for line in plant_file.read_text().splitlines():
            p = line.split()
            if p:
                plants.append(Plant(p[0], p[1], int(p[2]), int(p[3]), bool(int(p[4]))))
    subtitles = read_subtitles(src / "subtitles.txt")
    missing = sorted(set(subtitles) - set(feats))
    if missing:
        raise ValueError(f"subtitles reference unknown videos: {missing[:5]}")
    return CorpusBundle(
        videos={i: FeatureSequence(i, a) for i, a in feats.items()},
        subtitles=subtitles,
        table=WordEmbeddingTable.load(src / "words.txt"),
        exemplars=exemplars,
        mouthing=read_mouthing(src / "mouthing.txt"),
        plants=plants,
        splits=json.loads((src / "splits.json").read_text()),
        class_words=info["class_words"],
        mouthing_vocab=info["mouthing_vocab"],
        config=info.get("config", {}),
        dropped_glosses=[tuple(x) for x in info.get("dropped_glosses", [])],
    )
