"""Pair-based training with a cosine-similarity loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .data import build_ground_truth, sample_pairs
from .exceptions import ConfigError, TrainingError
from .model import describe_images, forward, save_checkpoint
from .optim import Adam
from .projection import project_many
from .tensor import Tensor, get_dtype

logger = logging.getLogger(__name__)


@dataclass
class PreparedSequence:
    """Projected images, trajectory and loop labels for one sequence."""

    name: str
    images: np.ndarray  # [F, 5, h, w] float32
    trajectory: object
    ground_truth: object

    @property
    def frame_ids(self):
        return self.trajectory.frame_ids

    def __len__(self):
        return len(self.images)


def prepare_sequence(sequence, projcfg, r_th=6.0, min_frame_gap=100):
    images = project_many(sequence.clouds, projcfg)
    gt = build_ground_truth(sequence.trajectory, r_th, min_frame_gap)
    return PreparedSequence(sequence.name, images, sequence.trajectory, gt)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    margin: float = 0.85
    epochs: int = 20
    pairs_per_epoch: int = 32
    seed: int = 0
    stabilizer: float = 1e-8
    frozen: tuple = ()  # parameter-name substrings excluded from updates
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if not 0.0 < self.margin < 1.0:
            raise ConfigError(f"margin must lie in (0, 1), got {self.margin}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.pairs_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and pairs_per_epoch >= 1")


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    epoch_pos_sim: list = field(default_factory=list)
    epoch_neg_sim: list = field(default_factory=list)
    gammas: dict = field(default_factory=dict)
    seconds: float = 0.0


def pair_loss(d_q, d_o, label, margin=0.85, stabilizer=1e-8):
    """``1 - s`` for positives, ``max(0, s - margin)`` for negatives."""
    a = np.asarray(getattr(d_q, "values", d_q), dtype=np.float64)
    b = np.asarray(getattr(d_o, "values", d_o), dtype=np.float64)
    s = float(ops.cosine_similarity(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), stabilizer).data)
    if label == "positive":
        return 1.0 - s
    if label == "negative":
        return max(0.0, s - margin)
    raise ValueError(f"label must be 'positive' or 'negative', got {label!r}")


def triplet_loss(descriptors, margin, stabilizer=1e-8):
    """Step loss on a ``[3, m]`` (query, positive, negative) descriptor batch."""
    s_pos = ops.cosine_similarity(descriptors[0], descriptors[1], stabilizer)
    s_neg = ops.cosine_similarity(descriptors[0], descriptors[2], stabilizer)
    loss = (1.0 - s_pos) + (s_neg - margin).clamp_min(0.0)
    return loss, float(s_pos.data), float(s_neg.data)


def _draw(sequences, rng):
    seq = sequences[int(rng.integers(len(sequences)))]
    pos, neg = sample_pairs(seq.ground_truth, seq.trajectory, 1, rng)
    return seq, pos.query_id, pos.other_id, neg.other_id


def train(state, sequences, cfg=None):
    """Train a copy of ``state``; returns ``(trained_state, report)``."""
    cfg = cfg or TrainConfig()
    if not isinstance(sequences, (list, tuple)):
        sequences = [sequences]
    usable = [s for s in sequences if not s.ground_truth.is_empty]
    state = state.copy()
    report = TrainReport()
    if cfg.epochs == 0:
        report.gammas = state.gammas()
        return state, report
    if not usable:
        raise TrainingError("no training sequence has a loop to draw positive pairs from")

    params = [p for n, p in state.parameters.items() if not any(f in n for f in cfg.frozen)]
    opt = Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log = open(cfg.log_path, "a") if cfg.log_path else None
    dtype = get_dtype()
    started = time.perf_counter()
    state.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses, pos_sims, neg_sims = [], [], []
            for step in range(1, cfg.pairs_per_epoch + 1):
                seq, q, p, n = _draw(usable, rng)
                index = {int(f): i for i, f in enumerate(seq.frame_ids)}
                batch = seq.images[[index[q], index[p], index[n]]]
                for t in state.parameters.values():
                    t.grad = None
                desc = forward(Tensor(batch, dtype=dtype), state)
                loss, s_pos, s_neg = triplet_loss(desc, cfg.margin, cfg.stabilizer)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step} "
                        f"(sequence {seq.name}, query {q}, positive {p}, negative {n})"
                    )
                loss.backward()
                for t in params:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                opt.step()
                losses.append(value)
                pos_sims.append(s_pos)
                neg_sims.append(s_neg)
                if log:
                    log.write(f"{epoch},{step},{value!r},{s_pos!r},{s_neg!r}\n")
            report.epoch_loss.append(float(np.mean(losses)))
            report.epoch_pos_sim.append(float(np.mean(pos_sims)))
            report.epoch_neg_sim.append(float(np.mean(neg_sims)))
            logger.info("epoch %d loss %.4f pos %.3f neg %.3f", epoch, *(
                report.epoch_loss[-1], report.epoch_pos_sim[-1], report.epoch_neg_sim[-1]))
            if cfg.checkpoint_every and cfg.checkpoint_dir and epoch % cfg.checkpoint_every == 0:
                Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(cfg.checkpoint_dir) / f"epoch{epoch:03d}.adlw", state)
    finally:
        if log:
            log.close()
        state.eval()
    report.gammas = state.gammas()
    report.seconds = time.perf_counter() - started
    return state, report


def pair_similarities(state, sequence, pairs):
    """Cosine similarity of each PairSample under ``state`` (inference mode)."""
    index = {int(f): i for i, f in enumerate(sequence.frame_ids)}
    ids = sorted({p.query_id for p in pairs} | {p.other_id for p in pairs})
    desc = dict(zip(ids, describe_images(sequence.images[[index[i] for i in ids]], state)))
    out = []
    for p in pairs:
        a, b = desc[p.query_id], desc[p.other_id]
        out.append(float(ops.cosine_similarity(Tensor(a), Tensor(b)).data))
    return np.array(out)


def margin_sweep(margins, sequences, model_config, cfg=None, protocol=None, seed=0):
    """Cross-validated mean F1 per margin: list of ``(margin, mean_f1)`` rows."""
    from dataclasses import replace

    from .evaluation import cross_validate

    if not margins:
        raise ConfigError("margin_sweep needs at least one margin")
    cfg = cfg or TrainConfig()
    rows = []
    for margin in margins:
        result = cross_validate(sequences, model_config, replace(cfg, margin=float(margin)), protocol, seed=seed)
        rows.append((float(margin), result.mean_f1))
    return rows
