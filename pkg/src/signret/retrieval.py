"""Similarity matrices, ranking metrics and late fusion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .container import ContainerError, read_container, write_container

SIM_MAGIC = b"SGSIM001"
DEFAULT_KS = (1, 5, 10)


@dataclass
class SimilarityMatrix:
    """Query x item score matrix; ``ground_truth[q]`` is the matching column."""

    scores: np.ndarray
    row_ids: List[str]
    col_ids: List[str]
    ground_truth: np.ndarray
    direction: str = "t2v"

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        q, v = self.scores.shape
        if len(self.row_ids) != q or len(self.col_ids) != v:
            raise ValueError(
                f"id lists ({len(self.row_ids)}, {len(self.col_ids)}) do not match scores {self.scores.shape}"
            )
        if self.ground_truth.shape != (q,):
            raise ValueError(f"ground truth must have one entry per query ({q})")
        if q and (self.ground_truth.min() < 0 or self.ground_truth.max() >= v):
            raise ValueError("ground truth index out of range")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("similarity scores must be finite")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.scores.shape

    def transpose(self) -> "SimilarityMatrix":
        """Swap query and item axes (t2v <-> v2t); needs a one-to-one ground truth."""
        q, v = self.scores.shape
        if q != v or len(set(self.ground_truth.tolist())) != q:
            raise ValueError("transpose needs a one-to-one ground truth")
        inverse = np.empty(q, dtype=np.int64)
        inverse[self.ground_truth] = np.arange(q)
        other = {"t2v": "v2t", "v2t": "t2v"}.get(self.direction, self.direction)
        return SimilarityMatrix(self.scores.T.copy(), list(self.col_ids), list(self.row_ids), inverse, other)

    def save(self, path) -> None:
        meta = {
            "format": "similarity",
            "shape": list(self.scores.shape),
            "row_ids": list(self.row_ids),
            "col_ids": list(self.col_ids),
            "ground_truth": self.ground_truth.tolist(),
            "direction": self.direction,
        }
        write_container(path, SIM_MAGIC, meta, [("scores", self.scores)])

    @classmethod
    def load(cls, path) -> "SimilarityMatrix":
        meta, arrays = read_container(path, SIM_MAGIC)
        if "scores" not in arrays:
            raise ContainerError(f"{path}: no scores array")
        return cls(arrays["scores"], meta["row_ids"], meta["col_ids"], meta["ground_truth"],
                   meta.get("direction", "t2v"))


@dataclass
class Metrics:
    r_at: Dict[int, float]
    med_r: float
    direction: str = "t2v"

    def to_dict(self) -> dict:
        d = {"task": self.direction}
        for k in sorted(self.r_at):
            d[f"R@{k}"] = round(self.r_at[k], 6)
        d["MedR"] = self.med_r
        return d

    def geometric_mean(self, ks=DEFAULT_KS) -> float:
        return geometric_mean([self.r_at[k] for k in ks])


def geometric_mean(values: Sequence[float]) -> float:
    values = [float(v) for v in values]
    if any(v <= 0 for v in values):
        return 0.0
    return float(np.exp(np.mean(np.log(values))))


def similarity_matrix(video_embs: np.ndarray, text_embs: np.ndarray,
                      video_ids: Optional[Sequence[str]] = None,
                      text_ids: Optional[Sequence[str]] = None,
                      ground_truth: Optional[Sequence[int]] = None) -> SimilarityMatrix:
    """Text-to-video cosine scores for unit-norm embeddings (rows are queries)."""
    video_embs = np.atleast_2d(video_embs)
    text_embs = np.atleast_2d(text_embs)
    if video_embs.shape[1] != text_embs.shape[1]:
        raise ValueError(
            f"embedding dims differ: videos {video_embs.shape[1]}, texts {text_embs.shape[1]}"
        )
    scores = text_embs @ video_embs.T
    nq, nv = scores.shape
    video_ids = list(video_ids) if video_ids is not None else [str(i) for i in range(nv)]
    text_ids = list(text_ids) if text_ids is not None else [str(i) for i in range(nq)]
    if ground_truth is None:
        if nq != nv:
            raise ValueError("ground truth must be given for non-square matrices")
        ground_truth = np.arange(nq)
    return SimilarityMatrix(scores, text_ids, video_ids, np.asarray(ground_truth))


def rank_of_ground_truth(sim: SimilarityMatrix) -> np.ndarray:
    """1-based rank of each query's match; ties go in favour of the match."""
    gt_scores = sim.scores[np.arange(sim.scores.shape[0]), sim.ground_truth]
    return 1 + (sim.scores > gt_scores[:, None]).sum(axis=1)


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("recall_at_k needs at least one rank")
    if k < 1:
        raise ValueError("k must be >= 1")
    return 100.0 * float((ranks <= k).sum()) / ranks.size


def median_rank(ranks: Sequence[int]) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("median_rank needs at least one rank")
    return float(np.median(ranks))


def evaluate(sim: SimilarityMatrix, ks: Sequence[int] = DEFAULT_KS) -> Metrics:
    ranks = rank_of_ground_truth(sim)
    return Metrics({k: recall_at_k(ranks, k) for k in ks}, median_rank(ranks), sim.direction)


def evaluate_both(sim: SimilarityMatrix, ks: Sequence[int] = DEFAULT_KS) -> Dict[str, Metrics]:
    """Metrics for ``sim`` and for its transpose, keyed by direction."""
    a = evaluate(sim, ks)
    b = evaluate(sim.transpose(), ks)
    return {a.direction: a, b.direction: b}


def _minmax_rows(s: np.ndarray) -> np.ndarray:
    lo = s.min(axis=1, keepdims=True)
    span = s.max(axis=1, keepdims=True) - lo
    return np.where(span > 0, (s - lo) / np.where(span > 0, span, 1.0), 0.0)


def fuse(a: SimilarityMatrix, b: SimilarityMatrix, weights: Tuple[float, float] = (0.5, 0.5),
         normalize: Optional[str] = None) -> SimilarityMatrix:
    """Weighted mean of two score matrices over identical queries and items.

    Raw scores are averaged by default; ``normalize="minmax"`` rescales each
    query row of both inputs to [0, 1] first.
    """
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse matrices of shape {a.shape} and {b.shape}")
    if a.row_ids != b.row_ids or a.col_ids != b.col_ids:
        raise ValueError("cannot fuse matrices with different id orderings")
    if not np.array_equal(a.ground_truth, b.ground_truth):
        raise ValueError("cannot fuse matrices with different ground truth")
    sa, sb = a.scores, b.scores
    if normalize == "minmax":
        sa, sb = _minmax_rows(sa), _minmax_rows(sb)
    elif normalize is not None:
        raise ValueError(f"unknown normalization {normalize!r}")
    wa, wb = weights
    total = wa + wb
    if total <= 0:
        raise ValueError("fusion weights must have a positive sum")
    fused = (wa * sa + wb * sb) / total
    return SimilarityMatrix(fused, list(a.row_ids), list(a.col_ids), a.ground_truth.copy(), a.direction)


def write_metrics(path, metrics: Dict[str, Metrics], extra: Optional[dict] = None) -> None:
    payload = {k: m.to_dict() for k, m in sorted(metrics.items())}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def format_table(rows: Dict[str, Dict[str, dict]], directions=("t2v", "v2t")) -> str:
    """Render ``{model: {direction: metrics-dict}}`` as a fixed-width table."""
    cols = ["R@1", "R@5", "R@10", "MedR"]
    header = f"{'model':<16}" + "".join(
        f" | {d}:" + "".join(f" {c:>7}" for c in cols) for d in directions
    )
    lines = [header, "-" * len(header)]
    for name, by_dir in rows.items():
        line = f"{name:<16}"
        for d in directions:
            m = by_dir.get(d)
            vals = "".join(f" {m[c]:7.1f}" if m else f" {'-':>7}" for c in cols)
            line += f" | {d}:" + vals
        lines.append(line)
    return "\n".join(lines) + "\n"
