import itertools

import numpy as np
import pytest

from attnet.data import LoopGroundTruth
from attnet.evaluation import (
    EvalProtocol,
    ablation_csv,
    ablation_grid,
    cross_validate,
    evaluate_model,
    evaluate_top1,
    folds_csv,
    measure_fps,
    metrics_from_counts,
    recall_at_n,
    recall_curve_csv,
)
from attnet.exceptions import AttnetError, ConfigError
from attnet.model import Descriptor, init_model
from attnet.retrieval import build_map
from attnet.training import TrainConfig

import oracles
from conftest import SMALL_PROJ, toy_config

PROTOCOL = EvalProtocol(top_n=(1, 2, 4, 8), r_th=6.0, min_frame_gap=40)


def descs(matrix):
    return [Descriptor(v, i) for i, v in enumerate(matrix)]


def test_counts_example():
    m = metrics_from_counts(3, 1, 2)
    assert (m.precision, m.recall) == (0.75, 0.6)
    assert m.f1 == pytest.approx(0.6667, abs=1e-4)


def test_f1_identity(rng):
    for tp, fp, fn in rng.integers(0, 20, (200, 3)):
        m = metrics_from_counts(tp, fp, fn)
        if m.precision + m.recall:
            assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)


def test_perfect_retrieval():
    gt = LoopGroundTruth(6.0, 2, (5, 6), {5: frozenset({1}), 6: frozenset({2})}, 7)
    mat = np.eye(7)
    mat[5], mat[6] = mat[1], mat[2]
    dmap = build_map(descs(mat))
    m = evaluate_top1(dmap, descs(mat), gt)
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    assert recall_at_n(dmap, descs(mat), gt, (1, 7)).points == [(1, 1.0), (7, 1.0)]


def test_empty_queries_rejected():
    gt = LoopGroundTruth(6.0, 2, (), {}, 3)
    with pytest.raises(AttnetError):
        evaluate_top1(build_map(descs(np.eye(3))), descs(np.eye(3)), gt)


def test_counting_oracle(rng):
    for _ in range(200):
        gt, mat = oracles.random_instance(rng)
        ids = np.arange(len(mat))
        dmap = build_map(descs(mat))
        tau = float(rng.uniform(-0.5, 1.0))
        m = evaluate_top1(dmap, descs(mat), gt, tau)
        assert (m.tp, m.fp, m.fn) == oracles.count_top1(ids, mat, dict(enumerate(mat)), gt, tau)
        curve = recall_at_n(dmap, descs(mat), gt, (1, 2, 5, 10))
        assert curve.points == oracles.recall_curve(ids, mat, dict(enumerate(mat)), gt, (1, 2, 5, 10))
        values = [r for _, r in curve.points]
        assert values == sorted(values)


def test_exhaustive_n_recalls_everything(rng):
    gt, mat = oracles.random_instance(rng, n_frames=80)
    curve = recall_at_n(build_map(descs(mat)), descs(mat), gt, (1, 80))
    assert curve.recall_at(80) == 1.0


def test_evaluation_is_pure(small_sequences):
    state = init_model(toy_config(), 0)
    before = {n: p.data.copy() for n, p in state.parameters.items()}
    held = small_sequences[0]
    a = evaluate_model(state, held, PROTOCOL)
    b = evaluate_model(state, held, PROTOCOL)
    assert a == b
    for n, p in state.parameters.items():
        np.testing.assert_array_equal(p.data, before[n])


def test_cross_validation_mean(small_sequences):
    result = cross_validate(small_sequences, toy_config(), TrainConfig(epochs=1, pairs_per_epoch=2), PROTOCOL)
    assert [f.name for f in result.folds] == ["s1", "s2"]
    assert result.mean_f1 == pytest.approx(np.mean([f.metrics.f1 for f in result.folds]), abs=1e-9)
    again = cross_validate(small_sequences, toy_config(), TrainConfig(epochs=1, pairs_per_epoch=2), PROTOCOL)
    assert folds_csv(again) == folds_csv(result)
    with pytest.raises(ConfigError):
        cross_validate(small_sequences[:1], toy_config())


def test_fps_timer_oracle(small_sequences):
    from attnet.data import SyntheticConfig, synthetic_sequence

    clouds = synthetic_sequence(SyntheticConfig(landmarks=60, laps=1.1, radius=5)).clouds[:10]
    ticks = itertools.count(0.0, 0.5)
    result = measure_fps(init_model(toy_config(), 0), clouds, SMALL_PROJ, warmup=2, timer=lambda: next(ticks))
    assert result.runs == [8 / 0.5] * 3 and result.std == 0.0
    real = measure_fps(init_model(toy_config(), 0), clouds, SMALL_PROJ, warmup=2)
    assert np.isfinite(real.mean) and real.mean > 0
    with pytest.raises(ConfigError):
        measure_fps(init_model(toy_config(), 0), clouds[:2], SMALL_PROJ, warmup=2)


def test_ablation_grid(small_sequences):
    from attnet.data import SyntheticConfig, synthetic_sequence

    clouds = synthetic_sequence(SyntheticConfig(landmarks=60, laps=1.1, radius=5)).clouds[:5]
    cfg = TrainConfig(epochs=1, pairs_per_epoch=2, frozen=("gamma",))
    rows = ablation_grid((2,), (0, 1), small_sequences, toy_config(), cfg, PROTOCOL, clouds, SMALL_PROJ, warmup=1)
    assert [r.config for r in rows] == ["E2A0", "E2A1"]
    assert rows[0].per_sequence == rows[1].per_sequence
    assert all(0 <= f <= 1 for r in rows for f in r.per_sequence.values()) and all(r.fps > 0 for r in rows)
    text = ablation_csv(rows, ["s1", "s2"])
    assert text.splitlines()[0] == "config,seqs1,seqs2,mean,fps"


def test_ablation_failed_cell_recorded(small_sequences):
    rows = ablation_grid((6,), (0,), small_sequences, toy_config(), TrainConfig(epochs=0), PROTOCOL)
    assert rows[0].failed and np.isnan(rows[0].mean)


def test_recall_csv_layout():
    from attnet.evaluation import RecallCurve

    text = recall_curve_csv([RecallCurve([(1, 0.5), (2, 1.0)], "00")], "E3A1")
    assert text.splitlines() == ["config,sequence,N,recall", "E3A1,00,1,0.5", "E3A1,00,2,1.0"]


def test_protocol_validation():
    with pytest.raises(ConfigError):
        EvalProtocol(top_n=(2, 1))
