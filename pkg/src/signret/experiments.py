"""Experiment recipes shared by the command-line front end and the acceptance suite.

A run configuration is a plain nested dict with one section per component
(``synthetic``, ``train``, ``model``, ``classifier``, ``spot``, ``sr``,
``ablation``). Presets provide complete configurations; overrides replace
individual keys.
"""
from __future__ import annotations

import copy
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import CorpusBundle, SubtitleRecord, SyntheticConfig, perturb_alignment
from .encoders import JointEmbeddingModel, TextSequence
from .recognizer import (
    ClassifierTrainConfig,
    WindowClassifier,
    extract_word_set,
    iou_similarity,
    query_word_set,
    sliding_window_predict,
    train_classifier,
)
from .retrieval import Metrics, SimilarityMatrix, evaluate
from .spotalign import (
    SpotAlignState,
    SpotAnnotation,
    SpotConfig,
    cross_domain_distance,
    training_clips,
)
from .trainer import EpochRecord, TrainConfig, embed_corpus, fit

SWEEP_THRESHOLDS = (0.0, 0.1, 0.25, 0.5, 0.75)

PRESETS: Dict[str, dict] = {
    "desk": {
        "seed": 0,
        "synthetic": asdict(SyntheticConfig()),
        "train": asdict(TrainConfig()),
        "model": {"embed_dim": 64, "clusters": 4, "pooling_mode": "average"},
        "classifier": asdict(ClassifierTrainConfig()),
        "spot": {"mouthing_threshold": 0.5, "dictionary_threshold": 0.75, "rounds": 3,
                 "embedding_mode": "pooled", "pool_span": None, "joint_training": True,
                 "allow_exemplar_only": False},
        "sr": {"threshold": 0.5, "with_exemplars": False},
        "ablation": {"shift_mean": None, "shift_sigma": 4.0},
    },
}
for _section in ("synthetic", "train", "classifier"):
    # the top-level seed drives every component
    PRESETS["desk"][_section].pop("seed")
PRESETS["paper"] = copy.deepcopy(PRESETS["desk"])
PRESETS["paper"]["synthetic"].update(
    vocab_size=1887, n_train=31075, n_val=1739, n_test=2348, feature_dim=1024, word_dim=300,
    mouthing_vocab_fraction=round(1079 / 1887, 4),
)
PRESETS["paper"]["train"].update(batch_size=128)
PRESETS["paper"]["model"].update(embed_dim=512, clusters=20)
PRESETS["paper"]["classifier"].update(hidden_dim=1024)

# corpus variant where SR and CM make different mistakes: some continuous signs use
# an articulation absent from the lexicon (hurts SR) and some subtitle words are
# near-synonyms unseen by the recognizer (hurts SR, not CM)
FUSION_CORPUS = {"n_test": 200, "noise_sigma": 2.0, "synonym_rate": 0.3, "variant_rate": 0.5}


def resolve_config(preset: str = "desk", overrides: Optional[dict] = None) -> dict:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            if key not in cfg or not isinstance(cfg[key], dict):
                raise ValueError(f"unknown config section {key!r}")
            unknown = set(value) - set(cfg[key])
            if unknown:
                raise ValueError(f"unknown keys in section {key!r}: {sorted(unknown)}")
            cfg[key].update(value)
        elif key in cfg and not isinstance(cfg[key], dict):
            cfg[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return cfg


def write_config(out_dir, cfg: dict, name: str = "config.json") -> Path:
    path = Path(out_dir) / name
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def _subset(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


def synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig.from_dict({**cfg["synthetic"], "seed": cfg["seed"]})


def train_config(cfg: dict) -> TrainConfig:
    return _subset(TrainConfig, {**cfg["train"], "seed": cfg["seed"]})


def classifier_config(cfg: dict) -> ClassifierTrainConfig:
    return _subset(ClassifierTrainConfig, {**cfg["classifier"], "seed": cfg["seed"]})


def spot_config(cfg: dict, workers: int = 1) -> SpotConfig:
    return SpotConfig(classifier=classifier_config(cfg), workers=workers, seed=cfg["seed"], **cfg["spot"])


# --------------------------------------------------------------------------
# recognition branch


def exemplar_only_classifier(bundle: CorpusBundle, ccfg: ClassifierTrainConfig) -> WindowClassifier:
    return train_classifier(training_clips([], bundle, ccfg.window_len), bundle.class_words, ccfg)


def train_sr(bundle: CorpusBundle, annotations: Sequence[SpotAnnotation], ccfg: ClassifierTrainConfig,
             with_exemplars: bool = False) -> WindowClassifier:
    """Final recognizer trained on mouthing plus last-round dictionary annotations."""
    clips = training_clips(annotations, bundle, ccfg.window_len, include_exemplars=with_exemplars)
    return train_classifier(clips, bundle.class_words, ccfg)


def predicted_sets(clf: WindowClassifier, videos, thresholds: Sequence[float],
                   workers: int = 1) -> Dict[float, list]:
    """Word sets per threshold, sharing one sliding-window pass per video."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(lambda v: sliding_window_predict(v, clf), videos))
    else:
        preds = [sliding_window_predict(v, clf) for v in videos]
    return {t: [extract_word_set(p, t, clf) for p in preds] for t in thresholds}


def _iou_matrix(queries: Sequence[TextSequence], vsets: list, video_ids, gt) -> SimilarityMatrix:
    qsets = [query_word_set(q) for q in queries]
    scores = np.array([[iou_similarity(q, v) for v in vsets] for q in qsets]).reshape(len(qsets), len(vsets))
    return SimilarityMatrix(scores, [q.text_id for q in queries], list(video_ids), np.asarray(gt))


def sr_similarity(clf: WindowClassifier, bundle: CorpusBundle, split: str = "test", threshold: float = 0.5,
                  subtitles: Optional[Dict[str, SubtitleRecord]] = None, workers: int = 1) -> SimilarityMatrix:
    pc = bundle.paired(split, subtitles)
    sets = predicted_sets(clf, pc.videos, [threshold], workers)[threshold]
    return _iou_matrix(pc.texts, sets, [v.video_id for v in pc.videos], np.arange(len(pc)))


def threshold_sweep(clf: WindowClassifier, bundle: CorpusBundle, split: str = "test",
                    thresholds: Sequence[float] = SWEEP_THRESHOLDS, workers: int = 1) -> Dict[float, Metrics]:
    pc = bundle.paired(split)
    ids = [v.video_id for v in pc.videos]
    sets = predicted_sets(clf, pc.videos, thresholds, workers)
    return {t: evaluate(_iou_matrix(pc.texts, sets[t], ids, np.arange(len(pc)))) for t in thresholds}


def format_sweep_table(results: Dict[float, Metrics]) -> str:
    lines = [f"{'Threshold':<10} {'R@1':>6} {'R@5':>6} {'R@10':>6} {'MedR':>6}"]
    for t, m in results.items():
        lines.append(f"{t:<10.2f} {m.r_at[1]:6.1f} {m.r_at[5]:6.1f} {m.r_at[10]:6.1f} {m.med_r:6.1f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# cross-modal branch


def train_cm(bundle: CorpusBundle, cfg: dict, subtitles: Optional[Dict[str, SubtitleRecord]] = None,
             log_path=None) -> Tuple[JointEmbeddingModel, List[EpochRecord]]:
    m = cfg["model"]
    return fit(bundle.paired("train", subtitles), bundle.paired("val", subtitles), bundle.table,
               train_config(cfg), embed_dim=m["embed_dim"], clusters=m["clusters"],
               pooling_mode=m["pooling_mode"], log_path=log_path)


def cm_similarity(model: JointEmbeddingModel, bundle: CorpusBundle, split: str = "test",
                  subtitles: Optional[Dict[str, SubtitleRecord]] = None) -> SimilarityMatrix:
    return embed_corpus(model, bundle.paired(split, subtitles), bundle.table)


# --------------------------------------------------------------------------
# ablations


def speech_aligned(bundle: CorpusBundle, shift_mean: Optional[float], shift_sigma: float,
                   seed: int) -> Dict[str, SubtitleRecord]:
    """Subtitles shifted as if timed to speech; default shift is one mean sign duration."""
    if shift_mean is None:
        shift_mean = SyntheticConfig.from_dict(bundle.config).mean_sign_frames() if bundle.config \
            else SyntheticConfig().mean_sign_frames()
    lengths = {v: s.frames for v, s in bundle.videos.items()}
    return perturb_alignment(bundle.subtitles, shift_mean, shift_sigma, seed, lengths)


def alignment_ablation(bundle: CorpusBundle, cfg: dict, clf: Optional[WindowClassifier] = None,
                       ) -> Dict[str, Dict[str, Metrics]]:
    """CM (and optionally SR) t2v metrics with signing-aligned vs speech-aligned subtitles.

    Both training and evaluation use the respective alignment.
    """
    ab = cfg["ablation"]
    speech = speech_aligned(bundle, ab["shift_mean"], ab["shift_sigma"], cfg["seed"])
    out: Dict[str, Dict[str, Metrics]] = {}
    for name, subs in (("Speech", speech), ("Signing", None)):
        row = {}
        if clf is not None:
            row["SR"] = evaluate(sr_similarity(clf, bundle, "test", cfg["sr"]["threshold"], subs))
        model, _ = train_cm(bundle, cfg, subs)
        row["CM"] = evaluate(cm_similarity(model, bundle, "test", subs))
        out[name] = row
    return out


def format_ablation_table(results: Dict[str, Dict[str, Metrics]]) -> str:
    models = sorted({m for row in results.values() for m in row}, key=lambda m: (m != "SR", m))
    head = f"{'Alignment':<10}" + "".join(f" | {m}: {'R@1':>6} {'R@5':>6} {'R@10':>6} {'MedR':>6}" for m in models)
    lines = [head]
    for name, row in results.items():
        line = f"{name:<10}"
        for m in models:
            x = row.get(m)
            if x is None:
                line += f" | {m}: " + " ".join(f"{'-':>6}" for _ in range(4))
            else:
                line += (f" | {m}: {x.r_at[1]:6.1f} {x.r_at[5]:6.1f} {x.r_at[10]:6.1f} {x.med_r:6.1f}")
        lines.append(line)
    return "\n".join(lines) + "\n"


def domain_alignment(bundle: CorpusBundle, state: SpotAlignState, ccfg: ClassifierTrainConfig) -> dict:
    """Cross-domain same-class distance for the joint classifier vs an exemplar-only one."""
    return {
        "joint": cross_domain_distance(state.classifier, bundle),
        "exemplar_only": cross_domain_distance(exemplar_only_classifier(bundle, ccfg), bundle),
    }

