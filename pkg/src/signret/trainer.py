"""Max-margin ranking training of the joint embedding model."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .container import ContainerError, read_container, write_container
from .encoders import FeatureSequence, JointEmbeddingModel, TextSequence, WordEmbeddingTable
from .numerics import OptimizerState, Param, optimizer_step
from .retrieval import DEFAULT_KS, Metrics, SimilarityMatrix, evaluate, geometric_mean, similarity_matrix

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SGCKPT01"


@dataclass
class TrainConfig:
    margin: float = 0.2
    batch_size: int = 16
    epochs: int = 40
    optimizer: str = "radam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    loss_pair_mode: str = "ordered_double"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: the loss needs in-batch negatives")
        if self.loss_pair_mode not in ("ordered_double", "unordered_single"):
            raise ValueError(f"unknown loss_pair_mode {self.loss_pair_mode!r}")

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
        )


@dataclass
class PairedCorpus:
    """Videos and texts with ``texts[i]`` matching ``videos[i]``."""

    videos: List[FeatureSequence]
    texts: List[TextSequence]
    split: str = "train"

    def __post_init__(self):
        if len(self.videos) != len(self.texts):
            raise ValueError(f"{len(self.videos)} videos but {len(self.texts)} texts")

    def __len__(self):
        return len(self.videos)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metrics: Optional[Metrics]
    geometric_mean: float
    model_snapshot: Optional[JointEmbeddingModel] = field(default=None, repr=False)


def margin_ranking_loss(sim: np.ndarray, margin: float = 0.2, pair_mode: str = "ordered_double"):
    """Bidirectional hinge loss over in-batch negatives.

    ``sim[i, j]`` scores video ``i`` against text ``j``. For every ordered
    pair ``i != j`` both ``[sim_ij - sim_ii + m]_+`` and
    ``[sim_ji - sim_ii + m]_+`` are accumulated and the total is divided by
    the batch size. ``pair_mode="unordered_single"`` restricts the sum to
    ``i < j``. Returns ``(loss, dloss/dsim)``; hinges exactly at zero are
    treated as inactive.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"ranking loss needs a square similarity matrix, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise ValueError("ranking loss needs at least two pairs")
    diag = np.diag(sim)
    if pair_mode == "ordered_double":
        mask = ~np.eye(b, dtype=bool)
    elif pair_mode == "unordered_single":
        mask = np.triu(np.ones((b, b), dtype=bool), k=1)
    else:
        raise ValueError(f"unknown pair_mode {pair_mode!r}")
    # row term: anchor i vs text j ; column term: anchor i vs video j (sim_ji)
    row = sim - diag[:, None] + margin
    col = sim.T - diag[:, None] + margin
    row_active = (row > 0) & mask
    col_active = (col > 0) & mask
    loss = (row[row_active].sum() + col[col_active].sum()) / b

    grad = np.zeros_like(sim)
    ra = row_active.astype(np.float64)
    ca = col_active.astype(np.float64)
    grad += ra
    grad += ca.T
    grad[np.diag_indices(b)] -= ra.sum(axis=1) + ca.sum(axis=1)
    return float(loss), grad / b


def batch_loss_and_grads(model: JointEmbeddingModel, videos: Sequence, texts: Sequence[TextSequence],
                         table: WordEmbeddingTable, margin: float, pair_mode: str = "ordered_double") -> float:
    """Forward + backward on one minibatch; gradients accumulate into ``model``."""
    v, vc = model.encode_videos(videos)
    t, tc = model.encode_texts(texts, table)
    sim = v @ t.T
    loss, dsim = margin_ranking_loss(sim, margin, pair_mode)
    model.backward_videos(dsim @ t, vc)
    model.backward_texts(dsim.T @ v, tc)
    return loss


def train_epoch(corpus: PairedCorpus, model: JointEmbeddingModel, table: WordEmbeddingTable,
                cfg: TrainConfig, opt: OptimizerState, rng: np.random.Generator) -> float:
    n = len(corpus)
    if n < cfg.batch_size:
        raise ValueError(
            f"corpus has {n} pairs, fewer than batch_size={cfg.batch_size}; reduce the batch size"
        )
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    losses = []
    for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        model.zero_grad()
        loss = batch_loss_and_grads(
            model, [corpus.videos[i] for i in idx], [corpus.texts[i] for i in idx],
            table, cfg.margin, cfg.loss_pair_mode,
        )
        optimizer_step(model.params, opt)
        losses.append(loss)
    return float(np.mean(losses))


def embed_corpus(model: JointEmbeddingModel, corpus: PairedCorpus, table: WordEmbeddingTable,
                 chunk: int = 256) -> SimilarityMatrix:
    """t2v similarity matrix (texts as rows) for a paired corpus."""
    vids, txts = [], []
    for s in range(0, len(corpus), chunk):
        vids.append(model.encode_videos(corpus.videos[s:s + chunk])[0])
        txts.append(model.encode_texts(corpus.texts[s:s + chunk], table)[0])
    return similarity_matrix(
        np.vstack(vids), np.vstack(txts),
        [v.video_id for v in corpus.videos], [t.text_id for t in corpus.texts],
    )


def select_model(history: Sequence[EpochRecord]) -> EpochRecord:
    """Record with the highest geometric mean; the earliest wins ties."""
    if not history:
        raise ValueError("cannot select from an empty history")
    best = history[0]
    for rec in history[1:]:
        if rec.geometric_mean > best.geometric_mean:
            best = rec
    return best


def format_epoch_line(rec: EpochRecord) -> str:
    m = rec.val_metrics
    if m is None:
        return f"{rec.epoch} {rec.train_loss:.6f} - - - - -"
    return (f"{rec.epoch} {rec.train_loss:.6f} {m.r_at[1]:.4f} {m.r_at[5]:.4f} "
            f"{m.r_at[10]:.4f} {m.med_r:.1f} {rec.geometric_mean:.4f}")


def fit(train: PairedCorpus, val: Optional[PairedCorpus], table: WordEmbeddingTable,
        cfg: TrainConfig, model: Optional[JointEmbeddingModel] = None,
        embed_dim: int = 64, clusters: int = 4, pooling_mode: str = "average",
        log_path=None) -> Tuple[JointEmbeddingModel, List[EpochRecord]]:
    """Train for ``cfg.epochs`` and return the selected model plus history.

    Selection uses the t2v geometric mean of R@1/5/10 on ``val``; without a
    validation split the last epoch is returned.
    """
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = JointEmbeddingModel.create(
            train.videos[0].dim, table.dim, embed_dim=embed_dim, clusters=clusters,
            pooling_mode=pooling_mode, rng=rng, word_sample=table.vectors,
        )
    opt = cfg.make_optimizer()
    history: List[EpochRecord] = []
    lines = ["epoch loss R1 R5 R10 MedR gm"]
    for epoch in range(1, cfg.epochs + 1):
        loss = train_epoch(train, model, table, cfg, opt, rng)
        metrics, gm = None, 0.0
        if val is not None and len(val):
            metrics = evaluate(embed_corpus(model, val, table))
            gm = geometric_mean([metrics.r_at[k] for k in DEFAULT_KS])
        rec = EpochRecord(epoch, loss, metrics, gm, model.copy())
        history.append(rec)
        lines.append(format_epoch_line(rec))
        log.debug("epoch %s", lines[-1])
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n")
    best = select_model(history) if val is not None and len(val) else history[-1]
    return best.model_snapshot, history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: JointEmbeddingModel, hyper: Optional[dict] = None) -> None:
    meta = {
        "format": "joint_embedding_checkpoint",
        "pooling_mode": model.pooling_mode,
        "video_dim": model.video_dim,
        "text_dim": model.text_dim,
        "clusters": model.clusters,
        "embed_dim": model.embed_dim,
        "param_order": list(model.PARAM_NAMES),
        "hyperparameters": hyper or {},
    }
    write_container(path, CKPT_MAGIC, meta, [(n, p.value) for n, p in model.params.items()])


def load_checkpoint(path) -> Tuple[JointEmbeddingModel, dict]:
    meta, arrays = read_container(path, CKPT_MAGIC)
    missing = [n for n in JointEmbeddingModel.PARAM_NAMES if n not in arrays]
    if missing:
        raise ContainerError(f"{path}: checkpoint lacks parameters {missing}")
    model = JointEmbeddingModel({n: Param(a.copy()) for n, a in arrays.items()}, meta["pooling_mode"])
    return model, meta
