"""Video and text encoders mapping into a shared unit-norm embedding space.

The video branch mean- (or max-) pools a per-frame feature sequence and
projects it; the text branch looks up word vectors, aggregates them with
NetVLAD, passes the result through a gated embedding unit and projects it.
Both branches end in L2 normalisation so dot products are cosines.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .numerics import (
    DimensionError,
    Param,
    affine_backward,
    affine_forward,
    l2_normalize,
    l2_normalize_backward,
    sigmoid,
    softmax,
    softmax_backward,
)

UNK = "<unk>"
NETVLAD_ALPHA = 10.0

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features))
        if self.features.shape[0] < 1:
            raise ValueError(f"feature sequence {self.video_id!r} has no frames")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class TextSequence:
    text_id: str
    tokens: List[str]

    @classmethod
    def from_text(cls, text_id: str, text: str) -> "TextSequence":
        return cls(text_id, tokenize(text))


class WordEmbeddingTable:
    """Word -> vector lookup with a mandatory ``<unk>`` row."""

    def __init__(self, words: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(words) != vectors.shape[0]:
            raise ValueError(f"{len(words)} words but {vectors.shape[0]} vectors")
        self.words = list(words)
        self.vocab: Dict[str, int] = {w: i for i, w in enumerate(self.words)}
        if len(self.vocab) != len(self.words):
            raise ValueError("duplicate words in embedding table")
        if UNK not in self.vocab:
            raise ValueError(f"embedding table must contain the {UNK} token")
        self.unk_index = self.vocab[UNK]
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def indices(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.vocab.get(t, self.unk_index) for t in tokens], dtype=np.int64)

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            raise ValueError("cannot embed an empty token list")
        return self.vectors[self.indices(tokens)]

    def save(self, path) -> None:
        lines = [f"vocab {len(self.words)} dim {self.dim}"]
        for w, v in zip(self.words, self.vectors):
            lines.append(w + " " + " ".join(repr(float(x)) for x in v))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "WordEmbeddingTable":
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 4 or header[0] != "vocab" or header[2] != "dim":
                raise ValueError(f"{path}: bad header {' '.join(header)!r}")
            n, d = int(header[1]), int(header[3])
            words, rows = [], []
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != d + 1:
                    raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(parts)}")
                words.append(parts[0])
                rows.append([float(x) for x in parts[1:]])
        if len(words) != n:
            raise ValueError(f"{path}: header declares {n} words, found {len(words)}")
        return cls(words, np.array(rows).reshape(n, d))


# --------------------------------------------------------------------------
# temporal pooling


def temporal_pool(x: np.ndarray, mode: str = "average"):
    x = np.atleast_2d(x)
    if x.shape[0] < 1:
        raise ValueError("cannot pool an empty sequence")
    if mode == "average":
        return x.mean(axis=0, keepdims=True), (mode, x.shape, None)
    if mode == "max":
        # argmax picks the lowest index on ties
        idx = x.argmax(axis=0)
        return x[idx, np.arange(x.shape[1])][None, :], (mode, x.shape, idx)
    raise ValueError(f"unknown pooling mode {mode!r}")


def temporal_pool_backward(dp: np.ndarray, cache) -> np.ndarray:
    mode, shape, idx = cache
    if mode == "average":
        return np.broadcast_to(dp / shape[0], shape).copy()
    dx = np.zeros(shape)
    dx[idx, np.arange(shape[1])] = dp.reshape(-1)
    return dx


# --------------------------------------------------------------------------
# NetVLAD


@dataclass
class NetVladParams:
    centers: np.ndarray  # K x Dt
    assign_weights: np.ndarray  # Dt x K
    assign_bias: np.ndarray  # 1 x K

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def from_centers(cls, centers: np.ndarray, alpha: float = NETVLAD_ALPHA) -> "NetVladParams":
        centers = np.asarray(centers, dtype=np.float64)
        return cls(
            centers=centers.copy(),
            assign_weights=(2.0 * alpha * centers).T.copy(),
            assign_bias=(-alpha * (centers * centers).sum(axis=1))[None, :].copy(),
        )


def netvlad_aggregate(x: np.ndarray, p: NetVladParams):
    """Soft-assigned residual aggregation of an ``L x Dt`` set of vectors.

    Returns the ``1 x K*Dt`` descriptor (intra-normalised per cluster, then
    globally L2-normalised) and a cache for :func:`netvlad_backward`.
    """
    x = np.atleast_2d(x)
    if x.shape[1] != p.centers.shape[1]:
        raise DimensionError(f"netvlad: input has shape {x.shape}, centers {p.centers.shape}")
    # sum in a canonical row order so permuted inputs give bit-identical output
    order = np.lexsort(x.T[::-1])
    x = x[order]
    logits, _ = affine_forward(x, p.assign_weights, p.assign_bias)
    a = softmax(logits)  # L x K
    mass = a.sum(axis=0)  # K
    v = a.T @ x - mass[:, None] * p.centers  # K x Dt
    vn, _, intra_cache = l2_normalize(v)
    flat = vn.reshape(1, -1)
    out, _, glob_cache = l2_normalize(flat)
    return out, (x, order, a, mass, p, intra_cache, glob_cache)


def netvlad_backward(dout: np.ndarray, cache):
    x, order, a, mass, p, intra_cache, glob_cache = cache
    k, dt = p.centers.shape
    dflat = l2_normalize_backward(dout, glob_cache)
    dv = l2_normalize_backward(dflat.reshape(k, dt), intra_cache)
    dx = a @ dv
    dcenters = -mass[:, None] * dv
    da = x @ dv.T - (dv * p.centers).sum(axis=1)[None, :]
    dlogits = softmax_backward(da, a)
    dx_assign, dw, db = affine_backward(dlogits, (x, p.assign_weights))
    dx_sorted = dx + dx_assign
    dx_out = np.empty_like(dx_sorted)
    dx_out[order] = dx_sorted
    return dx_out, dcenters, dw, db


# --------------------------------------------------------------------------
# gated embedding unit


@dataclass
class GatedUnitParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def gated_embedding_unit(x: np.ndarray, p: GatedUnitParams):
    """``normalize(z1 * sigmoid(z1 W2 + b2))`` with ``z1 = x W1 + b1``.

    Operates row-wise; returns ``(out, degenerate, cache)``.
    """
    z1, c1 = affine_forward(x, p.w1, p.b1)
    pre, c2 = affine_forward(z1, p.w2, p.b2)
    g = sigmoid(pre)
    z2 = z1 * g
    out, degenerate, cn = l2_normalize(z2)
    return out, degenerate, (c1, c2, z1, g, cn)


def gated_embedding_unit_backward(dout: np.ndarray, cache):
    c1, c2, z1, g, cn = cache
    dz2 = l2_normalize_backward(dout, cn)
    dz1 = dz2 * g
    dpre = dz2 * z1 * g * (1.0 - g)
    dz1_gate, dw2, db2 = affine_backward(dpre, c2)
    dx, dw1, db1 = affine_backward(dz1 + dz1_gate, c1)
    return dx, GatedUnitParams(dw1, db1, dw2, db2)


# --------------------------------------------------------------------------
# joint model


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_centers(sample: Optional[np.ndarray], k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeded centers from ``sample``; random unit vectors if it is too small."""
    if sample is not None and sample.shape[0] >= 2 * k:
        seed = int(rng.integers(0, 2**31 - 1))
        centers, _ = kmeans2(np.asarray(sample, dtype=np.float64), k, iter=10, minit="++", seed=seed)
        return centers
    c = rng.normal(size=(k, dim))
    return c / np.linalg.norm(c, axis=1, keepdims=True)


class JointEmbeddingModel:
    """All trainable parameters of both encoders.

    Parameters live in ``self.params`` (an ordered name -> :class:`Param`
    map); the ordering is the serialisation order used by checkpoints.
    """

    PARAM_NAMES = (
        "video_proj.w", "video_proj.b",
        "text_netvlad.centers", "text_netvlad.assign_weights", "text_netvlad.assign_bias",
        "text_gated.w1", "text_gated.b1", "text_gated.w2", "text_gated.b2",
        "text_proj.w", "text_proj.b",
    )

    def __init__(self, params: Dict[str, Param], pooling_mode: str = "average"):
        missing = [n for n in self.PARAM_NAMES if n not in params]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.params = {n: params[n] for n in self.PARAM_NAMES}
        if pooling_mode not in ("average", "max"):
            raise ValueError(f"unknown pooling mode {pooling_mode!r}")
        self.pooling_mode = pooling_mode

    @classmethod
    def create(
        cls,
        video_dim: int,
        text_dim: int,
        embed_dim: int = 64,
        clusters: int = 4,
        pooling_mode: str = "average",
        rng: Optional[np.random.Generator] = None,
        word_sample: Optional[np.ndarray] = None,
    ) -> "JointEmbeddingModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        vlad_dim = clusters * text_dim
        nv = NetVladParams.from_centers(init_centers(word_sample, clusters, text_dim, rng))
        raw = {
            "video_proj.w": _glorot(rng, video_dim, embed_dim),
            "video_proj.b": np.zeros((1, embed_dim)),
            "text_netvlad.centers": nv.centers,
            "text_netvlad.assign_weights": nv.assign_weights,
            "text_netvlad.assign_bias": nv.assign_bias,
            "text_gated.w1": _glorot(rng, vlad_dim, vlad_dim),
            "text_gated.b1": np.zeros((1, vlad_dim)),
            "text_gated.w2": _glorot(rng, vlad_dim, vlad_dim),
            "text_gated.b2": np.zeros((1, vlad_dim)),
            "text_proj.w": _glorot(rng, vlad_dim, embed_dim),
            "text_proj.b": np.zeros((1, embed_dim)),
        }
        return cls({k: Param(v) for k, v in raw.items()}, pooling_mode)

    # shape helpers
    @property
    def video_dim(self) -> int:
        return self.params["video_proj.w"].value.shape[0]

    @property
    def text_dim(self) -> int:
        return self.params["text_netvlad.centers"].value.shape[1]

    @property
    def clusters(self) -> int:
        return self.params["text_netvlad.centers"].value.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["video_proj.w"].value.shape[1]

    def netvlad(self) -> NetVladParams:
        p = self.params
        return NetVladParams(
            p["text_netvlad.centers"].value,
            p["text_netvlad.assign_weights"].value,
            p["text_netvlad.assign_bias"].value,
        )

    def gated(self) -> GatedUnitParams:
        p = self.params
        return GatedUnitParams(
            p["text_gated.w1"].value, p["text_gated.b1"].value,
            p["text_gated.w2"].value, p["text_gated.b2"].value,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "JointEmbeddingModel":
        return JointEmbeddingModel(
            {k: Param(v.value.copy()) for k, v in self.params.items()}, self.pooling_mode
        )

    # ---- video branch
    def encode_videos(self, seqs: Sequence[np.ndarray]):
        pooled, pcaches = [], []
        for s in seqs:
            s = s.features if isinstance(s, FeatureSequence) else np.atleast_2d(s)
            if s.shape[1] != self.video_dim:
                raise DimensionError(
                    f"video features have dim {s.shape[1]}, model expects {self.video_dim}"
                )
            out, c = temporal_pool(s, self.pooling_mode)
            pooled.append(out)
            pcaches.append(c)
        x = np.vstack(pooled)
        y, ac = affine_forward(x, self.params["video_proj.w"].value, self.params["video_proj.b"].value)
        emb, _, nc = l2_normalize(y)
        return emb, (pcaches, ac, nc)

    def backward_videos(self, demb: np.ndarray, cache) -> List[np.ndarray]:
        """Accumulate parameter gradients; return per-sequence input gradients."""
        pcaches, ac, nc = cache
        dy = l2_normalize_backward(demb, nc)
        dx, dw, db = affine_backward(dy, ac)
        self.params["video_proj.w"].grad += dw
        self.params["video_proj.b"].grad += db
        return [temporal_pool_backward(dx[i:i + 1], c) for i, c in enumerate(pcaches)]

    # ---- text branch
    def encode_word_vectors(self, embedded: Sequence[np.ndarray]):
        nv = self.netvlad()
        vlads, vcaches = [], []
        for e in embedded:
            out, c = netvlad_aggregate(e, nv)
            vlads.append(out)
            vcaches.append(c)
        x = np.vstack(vlads)
        g, _, gc = gated_embedding_unit(x, self.gated())
        y, ac = affine_forward(g, self.params["text_proj.w"].value, self.params["text_proj.b"].value)
        emb, _, nc = l2_normalize(y)
        return emb, (vcaches, gc, ac, nc)

    def encode_texts(self, texts: Sequence[TextSequence], table: WordEmbeddingTable):
        return self.encode_word_vectors([table.lookup(t.tokens) for t in texts])

    def backward_texts(self, demb: np.ndarray, cache) -> List[np.ndarray]:
        vcaches, gc, ac, nc = cache
        p = self.params
        dy = l2_normalize_backward(demb, nc)
        dg, dw, db = affine_backward(dy, ac)
        p["text_proj.w"].grad += dw
        p["text_proj.b"].grad += db
        dx, dgp = gated_embedding_unit_backward(dg, gc)
        p["text_gated.w1"].grad += dgp.w1
        p["text_gated.b1"].grad += dgp.b1
        p["text_gated.w2"].grad += dgp.w2
        p["text_gated.b2"].grad += dgp.b2
        dwords = []
        for i, c in enumerate(vcaches):
            de, dc, dwa, dba = netvlad_backward(dx[i:i + 1], c)
            p["text_netvlad.centers"].grad += dc
            p["text_netvlad.assign_weights"].grad += dwa
            p["text_netvlad.assign_bias"].grad += dba
            dwords.append(de)
        return dwords


def encode_video(seq, model: JointEmbeddingModel) -> np.ndarray:
    return model.encode_videos([seq])[0][0]


def encode_text(t: TextSequence, table: WordEmbeddingTable, model: JointEmbeddingModel) -> np.ndarray:
    if not t.tokens:
        raise ValueError(f"text {t.text_id!r} has no tokens")
    return model.encode_texts([t], table)[0][0]
