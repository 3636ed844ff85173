"""Sign spotting and the iterative retrain-and-requery annotation loop.

Annotations come from two sources: mouthing candidates filtered by
confidence (source ``M``) and exemplar-based dictionary spotting with the
latent space of a window classifier (source ``D<i>`` for round ``i``).
Each round retrains the classifier jointly on lexicon exemplars and the
current continuous-domain annotations, then re-queries every video with
the same exemplars and subtitle words.
"""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .corpus import CorpusBundle, MouthingCandidate
from .encoders import TextSequence
from .numerics import l2_normalize
from .recognizer import (
    CONTINUOUS,
    LEXICON,
    ClassifierTrainConfig,
    ClipSample,
    WindowClassifier,
    latent_embed,
    lemmatize,
    train_classifier,
)

log = logging.getLogger(__name__)

MOUTHING_THRESHOLD = 0.5
DICTIONARY_THRESHOLD = 0.75
# inclusive frame offsets around an annotation time
MOUTHING_WINDOW = (-15, 4)
DICTIONARY_WINDOW = (-3, 22)


@dataclass(frozen=True)
class SpotAnnotation:
    video_id: str
    sign_class: str
    frame_index: int
    confidence: float
    source: str  # "M" or "D<i>"

    @property
    def is_mouthing(self) -> bool:
        return self.source == "M"


@dataclass
class SpotConfig:
    mouthing_threshold: float = MOUTHING_THRESHOLD
    dictionary_threshold: float = DICTIONARY_THRESHOLD
    rounds: int = 3
    embedding_mode: str = "pooled"  # or "window"
    pool_span: Optional[int] = None  # latent rows per pooled span; None -> window_len
    joint_training: bool = True
    allow_exemplar_only: bool = False
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    workers: int = 1
    seed: int = 0


@dataclass
class SpotAlignState:
    iteration: int
    mouthing: List[SpotAnnotation]
    rounds: Dict[int, List[SpotAnnotation]] = field(default_factory=dict)
    classifier: Optional[WindowClassifier] = None
    yields: List[dict] = field(default_factory=list)

    @property
    def dictionary(self) -> List[SpotAnnotation]:
        return self.rounds.get(self.iteration, [])

    def current(self) -> List[SpotAnnotation]:
        return list(self.mouthing) + list(self.dictionary)


# --------------------------------------------------------------------------
# candidate selection


def filter_mouthing(candidates: Sequence[MouthingCandidate], threshold: float = MOUTHING_THRESHOLD,
                    vocab_filter: Optional[Set[str]] = None) -> List[SpotAnnotation]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    out = []
    for c in candidates:
        if c.confidence > threshold and (vocab_filter is None or c.word in vocab_filter):
            out.append(SpotAnnotation(c.video_id, c.word, int(c.frame_index), float(c.confidence), "M"))
    return out


def candidate_words(subtitle: TextSequence, lexicon_vocab: Set[str]) -> Set[str]:
    """Subtitle tokens and their lemmas that the lexicon covers."""
    words = set(subtitle.tokens) | {lemmatize(t) for t in subtitle.tokens}
    return words & set(lexicon_vocab)


# --------------------------------------------------------------------------
# dictionary spotting


def _unit(x: np.ndarray) -> np.ndarray:
    return l2_normalize(x)[0]


def pooled_rows(latent: np.ndarray, span: int) -> np.ndarray:
    """Mean of every ``span`` consecutive latent rows (one row if too short)."""
    if latent.shape[0] <= span:
        return latent.mean(axis=0, keepdims=True)
    c = np.cumsum(np.vstack([np.zeros((1, latent.shape[1])), latent]), axis=0)
    return (c[span:] - c[:-span]) / span


def exemplar_embeddings(exemplars: Dict[str, List[np.ndarray]], clf: WindowClassifier) -> Dict[str, np.ndarray]:
    """Unit-norm pooled latent per exemplar clip, stacked per class."""
    return {
        w: _unit(np.vstack([latent_embed(e, clf).mean(axis=0, keepdims=True) for e in clips]))
        for w, clips in exemplars.items() if clips
    }


def window_embeddings(features: np.ndarray, clf: WindowClassifier, mode: str = "pooled",
                      span: Optional[int] = None) -> np.ndarray:
    lat = latent_embed(features, clf)
    if mode == "pooled":
        return _unit(pooled_rows(lat, span or clf.window_len))
    if mode == "window":
        return _unit(lat)
    raise ValueError(f"unknown embedding mode {mode!r}")


def dictionary_spot(video, queries: Iterable[str], exemplars: Dict[str, List[np.ndarray]],
                    clf: WindowClassifier, threshold: float = DICTIONARY_THRESHOLD,
                    source: str = "D1", mode: str = "pooled", span: Optional[int] = None,
                    exemplar_embs: Optional[Dict[str, np.ndarray]] = None) -> List[SpotAnnotation]:
    """At most one annotation per queried class, at the best-matching position.

    The per-position score is the maximum cosine over that class's
    exemplars; an annotation is recorded when the best position's score
    exceeds ``threshold``.
    """
    vid = getattr(video, "video_id", "")
    feats = getattr(video, "features", video)
    if exemplar_embs is None:
        exemplar_embs = exemplar_embeddings(exemplars, clf)
    wins = window_embeddings(feats, clf, mode, span)
    out = []
    for word in sorted(set(queries)):
        ex = exemplar_embs.get(word)
        if ex is None:
            log.warning("no exemplars for queried class %r; skipping", word)
            continue
        sims = (ex @ wins.T).max(axis=0)
        t = int(np.argmax(sims))
        conf = float(sims[t])
        if conf > threshold:
            out.append(SpotAnnotation(vid, word, t, conf, source))
    return out


def clip_window(a: SpotAnnotation, video_len: int) -> Tuple[int, int]:
    """Inclusive frame range used to cut training clips for an annotation."""
    lo, hi = MOUTHING_WINDOW if a.is_mouthing else DICTIONARY_WINDOW
    start, end = a.frame_index + lo, a.frame_index + hi
    if end < 0 or start > video_len - 1:
        raise ValueError(f"annotation window [{start}, {end}] lies outside a {video_len}-frame video")
    return max(0, start), min(video_len - 1, end)


def annotation_clip(a: SpotAnnotation, features: np.ndarray, window_len: int) -> ClipSample:
    """Continuous-domain clip for ``a``; windows shorter than ``window_len`` are widened."""
    n = features.shape[0]
    start, end = clip_window(a, n)
    if end - start + 1 < window_len:
        start = max(0, min(start, n - window_len))
        end = min(n - 1, start + window_len - 1)
    return ClipSample(features[start:end + 1], a.sign_class, CONTINUOUS)


# --------------------------------------------------------------------------
# the loop


def initial_state(bundle: CorpusBundle, cfg: SpotConfig) -> SpotAlignState:
    m = filter_mouthing(bundle.mouthing, cfg.mouthing_threshold, set(bundle.class_words))
    return SpotAlignState(iteration=0, mouthing=m, yields=[yield_stats(m, bundle.mouthing_vocab)])


def training_clips(annotations: Sequence[SpotAnnotation], bundle: CorpusBundle, window_len: int,
                   include_exemplars: bool = True) -> List[ClipSample]:
    clips = []
    for a in annotations:
        feats = bundle.videos[a.video_id].features
        if feats.shape[0] >= window_len:
            clips.append(annotation_clip(a, feats, window_len))
    if include_exemplars:
        for w in bundle.class_words:
            for e in bundle.exemplars.get(w, []):
                clips.append(ClipSample(e, w, LEXICON))
    return clips


def spot_videos(bundle: CorpusBundle, video_ids: Sequence[str], clf: WindowClassifier,
                cfg: SpotConfig, source: str) -> List[SpotAnnotation]:
    lexicon = set(bundle.class_words)
    ex_embs = exemplar_embeddings(bundle.exemplars, clf)

    def one(vid: str) -> List[SpotAnnotation]:
        sub = bundle.subtitles[vid]
        q = candidate_words(TextSequence(vid, sub.tokens), lexicon)
        return dictionary_spot(bundle.videos[vid], q, bundle.exemplars, clf, cfg.dictionary_threshold,
                               source, cfg.embedding_mode, cfg.pool_span, ex_embs)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(one, video_ids))
    else:
        results = [one(v) for v in video_ids]
    return [a for r in results for a in r]


def spot_align_round(state: SpotAlignState, bundle: CorpusBundle, cfg: SpotConfig,
                     video_ids: Optional[Sequence[str]] = None) -> SpotAlignState:
    """Retrain on ``M`` plus the latest dictionary round, then re-query."""
    nxt = state.iteration + 1
    video_ids = list(video_ids) if video_ids is not None else bundle.splits["train"]
    wl = cfg.classifier.window_len
    annotations = state.current() if cfg.joint_training else []
    if not annotations and not cfg.allow_exemplar_only:
        raise ValueError(
            "no continuous-domain annotations to train on; set allow_exemplar_only to "
            "spot with an exemplar-only classifier"
        )
    clips = training_clips(annotations, bundle, wl)
    ccfg = replace(cfg.classifier, seed=cfg.seed * 1000 + nxt)
    clf = train_classifier(clips, bundle.class_words, ccfg)
    found = spot_videos(bundle, video_ids, clf, cfg, f"D{nxt}")
    rounds = dict(state.rounds)
    rounds[nxt] = found
    ys = list(state.yields) + [yield_stats(list(state.mouthing) + found, bundle.mouthing_vocab)]
    log.info("round %d: %d dictionary annotations", nxt, len(found))
    return SpotAlignState(nxt, list(state.mouthing), rounds, clf, ys)


def run_spot_align(bundle: CorpusBundle, cfg: SpotConfig) -> SpotAlignState:
    state = initial_state(bundle, cfg)
    for _ in range(cfg.rounds):
        state = spot_align_round(state, bundle, cfg)
    return state


# --------------------------------------------------------------------------
# statistics and diagnostics


def yield_stats(annotations: Sequence[SpotAnnotation], restricted_vocab: Optional[Iterable[str]] = None) -> dict:
    """Totals per source and per class, plus restricted / full vocabulary views."""
    restricted = set(restricted_vocab or [])
    per_source = Counter(a.source for a in annotations)
    per_class = Counter(a.sign_class for a in annotations)
    n_restricted = sum(1 for a in annotations if a.sign_class in restricted)
    return {
        "total": len(annotations),
        "per_source": dict(sorted(per_source.items())),
        "per_class": dict(sorted(per_class.items())),
        "restricted_total": n_restricted,
        "full_total": len(annotations),
        "restricted_classes": len({a.sign_class for a in annotations if a.sign_class in restricted}),
        "full_classes": len(per_class),
    }


def format_yield_report(state: SpotAlignState) -> str:
    lines = [f"{'iter':>4} {'M':>6} {'D':>6} {'total':>6} {'restr':>6} {'full':>6} {'classes':>7}"]
    for i, y in enumerate(state.yields):
        m = y["per_source"].get("M", 0)
        d = y["total"] - m
        lines.append(f"{i:>4} {m:>6} {d:>6} {y['total']:>6} {y['restricted_total']:>6} "
                     f"{y['full_total']:>6} {y['full_classes']:>7}")
    return "\n".join(lines) + "\n"


def write_annotations(path, annotations: Sequence[SpotAnnotation]) -> None:
    lines = [f"{a.video_id} {a.sign_class} {a.frame_index} {a.confidence:.6f} {a.source}"
             for a in annotations]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_annotations(path) -> List[SpotAnnotation]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        p = line.split()
        if not p:
            continue
        if len(p) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'video_id sign_class frame_index confidence source'")
        out.append(SpotAnnotation(p[0], p[1], int(p[2]), float(p[3]), p[4]))
    return out


def cross_domain_distance(clf: WindowClassifier, bundle: CorpusBundle,
                          video_ids: Optional[Sequence[str]] = None) -> float:
    """Mean cosine distance between same-class lexicon and continuous pooled latents.

    Continuous latents come from ground-truth plant spans, so this is an
    oracle diagnostic for synthetic corpora.
    """
    ids = set(video_ids if video_ids is not None else bundle.splits["train"])
    cont: Dict[str, List[np.ndarray]] = {}
    for p in bundle.plants:
        if p.video_id in ids and p.end - p.start >= clf.window_len:
            seg = bundle.videos[p.video_id].features[p.start:p.end]
            cont.setdefault(p.word, []).append(latent_embed(seg, clf).mean(axis=0))
    dists = []
    for w, rows in cont.items():
        ex = bundle.exemplars.get(w)
        if not ex:
            continue
        lex = _unit(np.vstack([latent_embed(e, clf).mean(axis=0) for e in ex]))
        dists.append(1.0 - float((lex @ _unit(np.vstack(rows)).T).mean()))
    return float(np.mean(dists)) if dists else float("nan")


def plant_recovery(annotations: Sequence[SpotAnnotation], bundle: CorpusBundle,
                   video_ids: Optional[Sequence[str]] = None, tolerance: int = 8) -> float:
    """Fraction of queried subtitle plants with a same-class annotation near their onset."""
    ids = set(video_ids if video_ids is not None else bundle.splits["train"])
    by_key: Dict[Tuple[str, str], List[int]] = {}
    for a in annotations:
        by_key.setdefault((a.video_id, a.sign_class), []).append(a.frame_index)
    hits, total = 0, 0
    for p in bundle.plants:
        if p.video_id not in ids or not p.in_subtitle:
            continue
        total += 1
        frames = by_key.get((p.video_id, p.word), [])
        if any(p.start - tolerance <= f <= p.end for f in frames):
            hits += 1
    return hits / total if total else 0.0
