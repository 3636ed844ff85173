"""Sliding-window sign classifier and recognition-based text retrieval.

A :class:`WindowClassifier` averages a fixed-length window of frame
features, maps it through one ReLU hidden layer and a linear read-out. The
hidden activations are the latent embedding used for spotting and as a
video representation; the class probabilities drive word-set extraction
for IoU retrieval.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .container import ContainerError, read_container, write_container
from .encoders import FeatureSequence, TextSequence
from .numerics import (
    OptimizerState,
    Param,
    affine_backward,
    affine_forward,
    log_softmax,
    optimizer_step,
    softmax,
)
from .retrieval import SimilarityMatrix

log = logging.getLogger(__name__)

CLF_MAGIC = b"SGCLF001"
LEXICON = "lexicon"
CONTINUOUS = "continuous"


# --------------------------------------------------------------------------
# lemmatisation

# stems that regain a silent e once -ing / -ed is removed
E_RESTORE = frozenset(
    "mak tak bak cak shak wak writ bit smil driv danc chang charg clos choos "
    "com creat decid describ escap explor figur hop imagin includ invit liv lov "
    "mov not plac produc prepar provid rac rais receiv reduc releas serv shar "
    "shap skat slid sav scor stor tim trad typ vot wav wip glid hik jok bik "
    "pric promis purchas rid rul continu argu valu rescu queu".split()
)
# words that look inflected but are not
PROTECTED = frozenset(
    "during morning evening ceiling nothing something anything everything "
    "thing things king ring sing bring string spring swing wing sting sling "
    "bed red wed shed fed led sled bred need feed seed speed bleed breed greed "
    "weed hundred naked wicked sacred kindred "
    "news always perhaps series species lens bus gas yes this his its us plus "
    "was has is as".split()
)
KEEP_DOUBLE = frozenset("add odd egg err inn purr buzz fizz".split())
_VOWELS = set("aeiouy")


@lru_cache(maxsize=None)
def _irregulars_default() -> Dict[str, str]:
    text = resources.files("signret").joinpath("data/irregulars.txt").read_text()
    return parse_irregulars(text)


def parse_irregulars(text: str) -> Dict[str, str]:
    table: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"irregulars line {lineno}: expected 'surface lemma', got {line!r}")
        table[parts[0]] = parts[1]
    # chains must terminate
    for start in table:
        seen, w = {start}, table[start]
        while w in table and table[w] != w:
            if w in seen:
                raise ValueError(f"irregulars table has a cycle through {start!r}")
            seen.add(w)
            w = table[w]
    return table


def load_irregulars(path) -> Dict[str, str]:
    return parse_irregulars(Path(path).read_text())


def _undo_stem(stem: str) -> str:
    if stem in E_RESTORE:
        return stem + "e"
    if (len(stem) >= 3 and stem[-1] == stem[-2] and stem[-1] not in _VOWELS
            and stem[-1] not in "lsz" and stem not in KEEP_DOUBLE):
        return stem[:-1]
    if stem.endswith(("v", "u")):
        return stem + "e"
    return stem


def _lemma_step(w: str, irregulars: Dict[str, str]) -> str:
    if w in irregulars:
        return irregulars[w]
    if w in PROTECTED:
        return w
    if len(w) > 4 and w.endswith(("ies", "ied")):
        return w[:-3] + "y"
    if len(w) > 4 and w.endswith("es") and w[:-2].endswith(("ss", "x", "ch", "sh", "zz")):
        return w[:-2]
    if len(w) > 3 and w.endswith("s") and not w.endswith(("ss", "us", "is")):
        return w[:-1]
    for suffix in ("ing", "ed"):
        if w.endswith(suffix):
            stem = w[: -len(suffix)]
            if len(stem) >= 2 and _VOWELS & set(stem) and len(w) > 4:
                return _undo_stem(stem)
    return w


def lemmatize(word: str, irregulars: Optional[Dict[str, str]] = None) -> str:
    """Rule-based lemma of a lowercase token.

    The rule cascade is applied until it reaches a fixed point, so the
    function is idempotent by construction.
    """
    table = _irregulars_default() if irregulars is None else irregulars
    w = word.lower()
    for _ in range(len(w) + len(table) + 1):
        nxt = _lemma_step(w, table)
        if nxt == w:
            return w
        w = nxt
    return w


# --------------------------------------------------------------------------
# classifier


def window_means(x: np.ndarray, window_len: int) -> np.ndarray:
    """Mean of every length-``window_len`` window (stride 1)."""
    x = np.atleast_2d(x)
    t = x.shape[0]
    if t < window_len:
        raise ValueError(f"sequence has {t} frames, shorter than the window ({window_len})")
    c = np.cumsum(np.vstack([np.zeros((1, x.shape[1])), x]), axis=0)
    return (c[window_len:] - c[:-window_len]) / window_len


@dataclass
class WindowClassifier:
    window_len: int
    w1: np.ndarray  # D x H
    b1: np.ndarray  # 1 x H
    w2: np.ndarray  # H x n_classes
    b2: np.ndarray  # 1 x n_classes
    class_words: List[str]

    @classmethod
    def create(cls, input_dim: int, class_words: Sequence[str], hidden_dim: int = 32,
               window_len: int = 16, rng: Optional[np.random.Generator] = None) -> "WindowClassifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(class_words)
        return cls(
            window_len,
            rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, hidden_dim)),
            np.zeros((1, hidden_dim)),
            rng.normal(0.0, np.sqrt(1.0 / hidden_dim), size=(hidden_dim, n)),
            np.zeros((1, n)),
            list(class_words),
        )

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def class_index(self) -> Dict[str, int]:
        return {w: i for i, w in enumerate(self.class_words)}

    def params(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "WindowClassifier":
        return WindowClassifier(self.window_len, self.w1.copy(), self.b1.copy(),
                                self.w2.copy(), self.b2.copy(), list(self.class_words))

    # window-mean features -> (latent, logits)
    def forward(self, xm: np.ndarray):
        z, c1 = affine_forward(xm, self.w1, self.b1)
        h = np.maximum(z, 0.0)
        logits, c2 = affine_forward(h, self.w2, self.b2)
        return h, logits, (c1, z, c2)

    def loss_and_grads(self, xm: np.ndarray, labels: np.ndarray):
        """Mean cross-entropy over rows of ``xm`` and its parameter gradients."""
        _, logits, (c1, z, c2) = self.forward(xm)
        n = xm.shape[0]
        lp = log_softmax(logits)
        loss = -lp[np.arange(n), labels].mean()
        dlogits = np.exp(lp)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        dh, dw2, db2 = affine_backward(dlogits, c2)
        dz = dh * (z > 0)
        _, dw1, db1 = affine_backward(dz, c1)
        return float(loss), {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}

    def save(self, path, meta: Optional[dict] = None) -> None:
        m = {"format": "window_classifier", "window_len": self.window_len,
             "class_words": self.class_words, "param_order": ["w1", "b1", "w2", "b2"]}
        if meta:
            m["meta"] = meta
        write_container(path, CLF_MAGIC, m, list(self.params().items()))

    @classmethod
    def load(cls, path) -> "WindowClassifier":
        meta, arrays = read_container(path, CLF_MAGIC)
        for k in ("w1", "b1", "w2", "b2"):
            if k not in arrays:
                raise ContainerError(f"{path}: classifier lacks parameter {k!r}")
        return cls(int(meta["window_len"]), arrays["w1"].copy(), arrays["b1"].copy(),
                   arrays["w2"].copy(), arrays["b2"].copy(), list(meta["class_words"]))


@dataclass
class ClipSample:
    """Frames of one annotation's legal window; a ``window_len`` crop is drawn per epoch."""

    features: np.ndarray
    label: str
    domain: str = CONTINUOUS


@dataclass
class ClassifierTrainConfig:
    epochs: int = 25
    learning_rate: float = 1e-2
    decay_epoch: int = 20
    decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    hidden_dim: int = 32
    window_len: int = 16
    seed: int = 0


def _sample_crops(clips: Sequence[ClipSample], window_len: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((len(clips), clips[0].features.shape[1]))
    for i, c in enumerate(clips):
        n = c.features.shape[0]
        if n < window_len:
            raise ValueError(f"clip of {n} frames is shorter than window_len={window_len}")
        s = int(rng.integers(0, n - window_len + 1))
        out[i] = c.features[s:s + window_len].mean(axis=0)
    return out


def train_classifier(clips: Sequence[ClipSample], class_words: Sequence[str],
                     cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                     init: Optional[WindowClassifier] = None) -> WindowClassifier:
    """Cross-entropy training with SGD + momentum and one step decay."""
    if not clips:
        raise ValueError("no training clips")
    index = {w: i for i, w in enumerate(class_words)}
    unknown = sorted({c.label for c in clips} - set(index))
    if unknown:
        raise ValueError(f"clip labels outside the class vocabulary: {unknown[:5]}")
    labels = np.array([index[c.label] for c in clips])
    if len(set(labels.tolist())) < 2:
        raise ValueError("classifier training needs at least two classes")
    dims = {c.features.shape[1] for c in clips}
    if len(dims) != 1:
        raise ValueError(f"inconsistent clip feature dims: {sorted(dims)}")
    rng = np.random.default_rng(cfg.seed)
    clf = init.copy() if init is not None else WindowClassifier.create(
        dims.pop(), class_words, cfg.hidden_dim, cfg.window_len, rng)
    opt = OptimizerState(kind="sgd_momentum", learning_rate=cfg.learning_rate,
                         momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    params = {k: Param(v) for k, v in clf.params().items()}
    n = len(clips)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        if epoch == cfg.decay_epoch:
            opt.learning_rate = cfg.learning_rate / cfg.decay_factor
        xm = _sample_crops(clips, clf.window_len, rng)
        order = rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            clf.w1, clf.b1, clf.w2, clf.b2 = (params[k].value for k in ("w1", "b1", "w2", "b2"))
            _, grads = clf.loss_and_grads(xm[idx], labels[idx])
            for k, g in grads.items():
                params[k].grad = g
            optimizer_step(params, opt)
    clf.w1, clf.b1, clf.w2, clf.b2 = (params[k].value for k in ("w1", "b1", "w2", "b2"))
    return clf


def classifier_accuracy(clf: WindowClassifier, clips: Sequence[ClipSample]) -> float:
    index = clf.class_index()
    xm = np.vstack([c.features[: clf.window_len].mean(axis=0) for c in clips])
    _, logits, _ = clf.forward(xm)
    return float(np.mean(logits.argmax(axis=1) == np.array([index[c.label] for c in clips])))


def _features(seq) -> np.ndarray:
    return seq.features if isinstance(seq, FeatureSequence) else np.atleast_2d(seq)


def latent_embed(seq, clf: WindowClassifier) -> np.ndarray:
    """Hidden activations for every window position: ``(T - window_len + 1) x H``."""
    h, _, _ = clf.forward(window_means(_features(seq), clf.window_len))
    return h


def window_probabilities(seq, clf: WindowClassifier) -> np.ndarray:
    _, logits, _ = clf.forward(window_means(_features(seq), clf.window_len))
    return softmax(logits)


def sliding_window_predict(seq, clf: WindowClassifier) -> List[Tuple[int, float]]:
    """Argmax class (lowest index on ties) and its probability at each position."""
    probs = window_probabilities(seq, clf)
    cls = probs.argmax(axis=1)
    return [(int(c), float(probs[i, c])) for i, c in enumerate(cls)]


def write_predictions(path, predictions: Sequence[Tuple[int, float]], clf: WindowClassifier) -> None:
    lines = [f"{t} {clf.class_words[c]} {p:.6f}" for t, (c, p) in enumerate(predictions)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def extract_word_set(predictions: Sequence[Tuple[int, float]], threshold: float,
                     clf: WindowClassifier) -> Set[str]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return {lemmatize(clf.class_words[c]) for c, p in predictions if p > threshold}


def iou_similarity(a: Set[str], b: Set[str]) -> float:
    """|a & b| / |a | b|, with two empty sets scoring 0."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def query_word_set(t: TextSequence) -> Set[str]:
    return {lemmatize(w) for w in t.tokens}


def sr_similarity_matrix(queries: Sequence[TextSequence], videos: Sequence, clf: WindowClassifier,
                         threshold: float = 0.5, video_ids: Optional[Sequence[str]] = None,
                         ground_truth: Optional[Sequence[int]] = None) -> SimilarityMatrix:
    vsets = [extract_word_set(sliding_window_predict(v, clf), threshold, clf) for v in videos]
    qsets = [query_word_set(q) for q in queries]
    scores = np.array([[iou_similarity(q, v) for v in vsets] for q in qsets]).reshape(len(qsets), len(vsets))
    if video_ids is None:
        video_ids = [v.video_id if isinstance(v, FeatureSequence) else str(i) for i, v in enumerate(videos)]
    if ground_truth is None:
        ground_truth = np.arange(len(qsets))
    return SimilarityMatrix(scores, [q.text_id for q in queries], list(video_ids), np.asarray(ground_truth))
