"""Precision/recall/F1, recall@N, cross-validation, ablation grid and FPS."""

from __future__ import annotations

import csv
import io
import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import AttnetError, ConfigError
from .model import Descriptor, describe, describe_images, init_model
from .projection import ProjectionConfig
from .retrieval import build_map, query
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_TOP_N = (1, 2, 4, 6, 8, 10, 20, 30, 40, 50, 60)

# F1 per sequence from the reference ablation table, for side-by-side reporting only.
REFERENCE_F1 = {
    "E1A0": {"00": 0.90, "02": 0.82, "05": 0.86, "06": 0.98, "08": 0.11, "mean": 0.73, "fps": 368},
    "E3A0": {"00": 0.92, "02": 0.77, "05": 0.87, "06": 1.00, "08": 0.11, "mean": 0.73, "fps": 103},
    "E3A1": {"00": 0.95, "02": 0.82, "05": 0.88, "06": 1.00, "08": 0.11, "mean": 0.75, "fps": 78},
    "E5A0": {"00": 0.94, "02": 0.55, "05": 0.85, "06": 0.95, "08": 0.13, "mean": 0.68, "fps": 42},
    "E5A3": {"00": 0.94, "02": 0.79, "05": 0.85, "06": 0.98, "08": 0.10, "mean": 0.73, "fps": 53},
}


@dataclass(frozen=True)
class EvalProtocol:
    top_n: tuple = DEFAULT_TOP_N
    threshold: float = 0.5
    r_th: float = 6.0
    min_frame_gap: int = 100

    def __post_init__(self):
        top = tuple(int(n) for n in self.top_n)
        if not top or top[0] < 1 or any(b <= a for a, b in zip(top, top[1:])):
            raise ConfigError(f"top_n must be strictly increasing and >= 1, got {top}")
        object.__setattr__(self, "top_n", top)


@dataclass
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    tag: str = ""


def metrics_from_counts(tp, fp, fn, tag=""):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(int(tp), int(fp), int(fn), precision, recall, f1, tag)


@dataclass
class RecallCurve:
    points: list = field(default_factory=list)  # [(N, recall), ...]
    tag: str = ""

    def recall_at(self, n):
        return dict(self.points)[n]


def _query_descriptors(queries):
    if isinstance(queries, dict):
        return queries
    return {int(d.frame_id): d for d in queries}


def evaluate_top1(dmap, queries, gt, threshold=0.5, tag=""):
    """Top-1 loop declaration: a retrieval is made when the best reference
    scores at least ``threshold``; it is a TP when that reference is a true
    loop of the query, else FP.  Queries without a retrieval count as FN."""
    if gt.is_empty:
        raise AttnetError("ground truth has no queries to evaluate")
    queries = _query_descriptors(queries)
    tp = fp = fn = 0
    for q in gt.queries:
        best = query(dmap, queries[q], 1, max_frame_id=q - gt.min_frame_gap).best
        if best is None or best[1] < threshold:
            fn += 1
        elif best[0] in gt.loops[q]:
            tp += 1
        else:
            fp += 1
    return metrics_from_counts(tp, fp, fn, tag)


def recall_at_n(dmap, queries, gt, top_n=DEFAULT_TOP_N, tag=""):
    """Fraction of queries with a true loop among their top-N references."""
    queries = _query_descriptors(queries)
    top_n = tuple(top_n)
    if not gt.queries:
        return RecallCurve([(n, 0.0) for n in top_n], tag)
    hits = np.zeros(len(top_n))
    largest = max(top_n)
    for q in gt.queries:
        ranked = query(dmap, queries[q], largest, max_frame_id=q - gt.min_frame_gap).frame_ids
        truth = gt.loops[q]
        first = next((k for k, f in enumerate(ranked) if f in truth), None)
        if first is not None:
            hits += np.array([first < n for n in top_n])
    return RecallCurve([(n, float(h / len(gt.queries))) for n, h in zip(top_n, hits)], tag)


def sequence_descriptors(state, prepared):
    values = describe_images(prepared.images, state)
    return [Descriptor(v, int(f)) for v, f in zip(values, prepared.frame_ids)]


def evaluate_model(state, prepared, protocol=None):
    """Describe every frame, map them all, and score the sequence's queries."""
    protocol = protocol or EvalProtocol()
    descs = sequence_descriptors(state, prepared)
    dmap = build_map(descs, tag=prepared.name)
    metrics = evaluate_top1(dmap, descs, prepared.ground_truth, protocol.threshold, tag=prepared.name)
    curve = recall_at_n(dmap, descs, prepared.ground_truth, protocol.top_n, tag=prepared.name)
    return metrics, curve


@dataclass
class FoldResult:
    name: str
    metrics: Metrics
    curve: RecallCurve
    train_report: object = None


@dataclass
class CrossValidationResult:
    folds: list

    @property
    def mean_f1(self):
        return float(np.mean([f.metrics.f1 for f in self.folds])) if self.folds else 0.0

    @property
    def mean_precision(self):
        return float(np.mean([f.metrics.precision for f in self.folds])) if self.folds else 0.0

    @property
    def mean_recall(self):
        return float(np.mean([f.metrics.recall for f in self.folds])) if self.folds else 0.0


def cross_validate(sequences, model_config, train_cfg=None, protocol=None, seed=0, trained=True):
    """Leave-one-sequence-out: train on the rest, evaluate the held-out one.

    ``trained=False`` evaluates the freshly initialized model on each fold,
    the untrained baseline.
    """
    if len(sequences) < 2:
        raise ConfigError("cross-validation needs at least two sequences")
    protocol = protocol or EvalProtocol()
    train_cfg = train_cfg or TrainConfig()
    folds = []
    for i, held in enumerate(sequences):
        if held.ground_truth.is_empty:
            warnings.warn(f"fold {held.name}: no loops, skipped", stacklevel=2)
            continue
        state = init_model(model_config, seed)
        report = None
        if trained:
            others = [s for j, s in enumerate(sequences) if j != i]
            state, report = train(state, others, train_cfg)
        metrics, curve = evaluate_model(state, held, protocol)
        folds.append(FoldResult(held.name, metrics, curve, report))
    return CrossValidationResult(folds)


@dataclass
class FPSResult:
    mean: float
    std: float
    runs: list


def measure_fps(state, clouds, projcfg=None, warmup=2, repetitions=3, timer=time.perf_counter):
    """Descriptor throughput (projection + forward) in frames per second."""
    clouds = list(clouds)
    if len(clouds) <= warmup:
        raise ConfigError(f"need more than {warmup} frames to time after warm-up")
    cfg = state.config
    projcfg = projcfg or ProjectionConfig(width=cfg.input_width, height=cfg.input_height)
    for cloud in clouds[:warmup]:
        describe(cloud, state, projcfg)
    timed = clouds[warmup:]
    runs = []
    for _ in range(repetitions):
        start = timer()
        for cloud in timed:
            describe(cloud, state, projcfg)
        elapsed = timer() - start
        runs.append(len(timed) / elapsed if elapsed > 0 else float("inf"))
    return FPSResult(float(np.mean(runs)), float(np.std(runs)), runs)


@dataclass
class AblationRow:
    config: str
    per_sequence: dict
    mean: float
    fps: float
    failed: str = ""


def ablation_grid(
    encoder_depths,
    attention_depths,
    sequences,
    base_config,
    train_cfg=None,
    protocol=None,
    clouds=None,
    projcfg=None,
    seed=0,
    warmup=2,
):
    """Cross-validate every ExAy config; one :class:`AblationRow` each.

    ``clouds`` (raw sweeps) are used to time throughput; FPS is 0 when absent.
    A failing cell is recorded with its error and the grid continues.
    """
    rows = []
    for x in encoder_depths:
        for y in attention_depths:
            name = f"E{x}A{y}"
            try:
                cfg = replace(base_config, encoder_depth=x, attention_depth=y, widths=(), blocks=())
                result = cross_validate(sequences, cfg, train_cfg, protocol, seed=seed)
                fps = 0.0
                if clouds:
                    fps = measure_fps(init_model(cfg, seed), clouds, projcfg, warmup=warmup).mean
                per = {f.name: f.metrics.f1 for f in result.folds}
                rows.append(AblationRow(name, per, result.mean_f1, fps))
            except AttnetError as exc:
                logger.warning("ablation cell %s failed: %s", name, exc)
                rows.append(AblationRow(name, {}, float("nan"), float("nan"), failed=str(exc)))
    return rows


# ------------------------------------------------------------------- CSV


def _fmt(value):
    return repr(float(value))


def folds_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "precision", "recall", "f1"])
    for f in result.folds:
        w.writerow([f.name, _fmt(f.metrics.precision), _fmt(f.metrics.recall), _fmt(f.metrics.f1)])
    return buf.getvalue()


def recall_curve_csv(curves, config_name):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "sequence", "N", "recall"])
    for curve in curves:
        for n, r in curve.points:
            w.writerow([config_name, curve.tag, n, _fmt(r)])
    return buf.getvalue()


def ablation_csv(rows, sequence_names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", *[f"seq{s}" for s in sequence_names], "mean", "fps"])
    for row in rows:
        cells = [_fmt(row.per_sequence[s]) if s in row.per_sequence else "" for s in sequence_names]
        w.writerow([row.config, *cells, _fmt(row.mean), f"{row.fps:.3f}"])
    return buf.getvalue()


def margin_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["margin", "mean_f1"])
    for margin, f1 in rows:
        w.writerow([_fmt(margin), _fmt(f1)])
    return buf.getvalue()

