"""Metric oracles, best-of-N protocol, and ablation bookkeeping."""

import math

import numpy as np
import pytest

from pvtraj import evaluation as ev
from pvtraj import trajdata as td
from pvtraj.backbones import BackboneConfig, TrajectoryPredictor, default_feature_config


def loop_ade(pred, truth):
    """Independent elementwise implementation."""
    total, count = 0.0, 0
    for i in range(pred.shape[0]):
        for t in range(pred.shape[1]):
            total += math.hypot(pred[i, t, 0] - truth[i, t, 0],
                                pred[i, t, 1] - truth[i, t, 1])
            count += 1
    return total / count


def loop_fde(pred, truth):
    total = 0.0
    for i in range(pred.shape[0]):
        total += math.hypot(pred[i, -1, 0] - truth[i, -1, 0],
                            pred[i, -1, 1] - truth[i, -1, 1])
    return total / pred.shape[0]


def test_metrics_zero_on_identity():
    x = np.random.default_rng(0).standard_normal((3, 12, 2))
    assert ev.ade(x, x) == 0.0
    assert ev.fde(x, x) == 0.0


def test_constant_offset_345():
    truth = np.random.default_rng(1).standard_normal((4, 12, 2))
    pred = truth + np.array([0.3, 0.4])
    assert ev.ade(pred, truth) == pytest.approx(0.5, abs=1e-15)
    assert ev.fde(pred, truth) == pytest.approx(0.5, abs=1e-15)


def test_final_step_only_error():
    truth = np.zeros((1, 12, 2))
    pred = truth.copy()
    pred[0, -1, 0] = 1.0
    assert ev.ade(pred, truth) == pytest.approx(1.0 / 12.0, abs=1e-15)
    assert ev.fde(pred, truth) == pytest.approx(1.0, abs=1e-15)


def test_metrics_match_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        pred = rng.standard_normal((n, 12, 2)) * 5
        truth = rng.standard_normal((n, 12, 2)) * 5
        assert abs(ev.ade(pred, truth) - loop_ade(pred, truth)) < 1e-12
        assert abs(ev.fde(pred, truth) - loop_fde(pred, truth)) < 1e-12


def test_metrics_rigid_translation_invariant():
    rng = np.random.default_rng(3)
    pred = rng.standard_normal((3, 12, 2))
    truth = rng.standard_normal((3, 12, 2))
    shift = np.array([123.0, -45.0])
    assert ev.ade(pred + shift, truth + shift) == pytest.approx(ev.ade(pred, truth), rel=1e-12)
    assert ev.fde(pred + shift, truth + shift) == pytest.approx(ev.fde(pred, truth), rel=1e-12)


def test_metric_shape_mismatch():
    with pytest.raises(Exception):
        ev.ade(np.zeros((2, 12, 2)), np.zeros((3, 12, 2)))


# ---------------------------------------------------------------------------
# best-of-N


def eval_data(n_scenes=6, seed=500):
    samples = []
    for scene in td.synth_corpus(td.SynthConfig(seed=seed, duration=21), n_scenes):
        samples.extend(td.window_sequences(scene))
    return samples


def test_best_of_n_monotone_and_nested():
    data = eval_data()
    model = TrajectoryPredictor(default_feature_config("conv"),
                                BackboneConfig(kind="conv"), seed=1)
    r1 = ev.best_of_n_eval(model, data, n=1, seed=0)
    r20 = ev.best_of_n_eval(model, data, n=20, seed=0)
    assert r20.ade <= r1.ade
    # per-sequence monotonicity with nested sampling
    for sample in data:
        a1 = ev.best_of_n_eval(model, [sample], n=1, seed=0).ade
        a20 = ev.best_of_n_eval(model, [sample], n=20, seed=0).ade
        assert a20 <= a1 + 1e-15


def test_best_of_n_sigma_zero_equals_single():
    data = eval_data(2)
    model = TrajectoryPredictor(default_feature_config("conv"),
                                BackboneConfig(kind="conv"), seed=2)
    for p in model.params.values():  # zero weights -> mu 0; sigma exp(0)=1
        p.value = np.zeros_like(p.value)
    # clamp sigma by monkeypatching the params post-forward is invasive; use
    # the sampler directly instead
    from pvtraj.backbones import GaussianParams, sample_trajectories
    rng = np.random.default_rng(4)
    params = GaussianParams(rng.standard_normal((2, 12, 2)), np.zeros((2, 12, 2)),
                            np.zeros((2, 12)))
    last = rng.standard_normal((2, 2))
    s1 = sample_trajectories(params, last, n_samples=1, seed=5)
    s20 = sample_trajectories(params, last, n_samples=20, seed=5)
    truth = rng.standard_normal((2, 12, 2))
    err1 = np.linalg.norm(s1.samples - truth[None], axis=-1).mean(axis=-1).min(axis=0)
    err20 = np.linalg.norm(s20.samples - truth[None], axis=-1).mean(axis=-1).min(axis=0)
    np.testing.assert_array_equal(err1, err20)


def test_best_of_n_empty_test_set():
    model = TrajectoryPredictor(default_feature_config("conv"),
                                BackboneConfig(kind="conv"), seed=3)
    with pytest.raises(ValueError):
        ev.best_of_n_eval(model, [], n=20, seed=0)


def test_eval_report_text_and_tsv(tmp_path):
    report = ev.EvalReport("SI-PVI-Conv", 0.25, 0.5, 20, 10, 30, 1.5, 0.1, 7,
                           flags={"SI": "T", "PVI": "T"})
    text = report.to_text()
    assert "ade\t0.250000" in text and "mean_ms_per_sequence" in text
    row = report.tsv_row()
    assert "1.5" not in row  # timing excluded for bit-reproducibility
    ev.append_results(report, tmp_path / "results.tsv")
    ev.append_results(report, tmp_path / "results.tsv")
    lines = (tmp_path / "results.tsv").read_text().splitlines()
    assert lines[0] == ev.RESULTS_HEADER and lines[1] == lines[2]


# ---------------------------------------------------------------------------
# ablation grid


def test_ablation_single_cell_and_flags(tmp_path):
    data = eval_data(4, seed=600)
    cells = [ev.AblationCell("conv", use_social=True, use_pvi=False)]
    rows = ev.run_ablation(cells, data[:4], data[4:6], data[6:8], seeds=[0],
                           epochs=2, out_path=tmp_path / "table.tsv")
    assert len(rows) == 1
    row = rows[0]
    assert row["status"] == "ok"
    assert (row["SI"], row["PVI"], row["RP"], row["RV"]) == ("T", "F", "T", "F")
    table = (tmp_path / "table.tsv").read_text().splitlines()
    assert table[0] == ev.ABLATION_HEADER
    assert table[1].startswith("SI-Conv\t")


def test_ablation_failure_recorded_grid_continues():
    data = eval_data(3, seed=700)
    cells = [ev.AblationCell("conv", True, False), ev.AblationCell("conv", True, True)]
    rows = ev.run_ablation(cells, data[:2], [], [], seeds=[0], epochs=1)
    assert [r["status"].startswith("failed") for r in rows] == [True, True]  # empty test set
    assert len(rows) == 2


def test_ablation_cell_names():
    assert ev.AblationCell("lstm", False, False).name == "LSTM"
    assert ev.AblationCell("lstm", True, True).name == "SI-PVI-LSTM"
    assert ev.AblationCell("conv", True, False).name == "SI-Conv"
    assert ev.AblationCell("conv", True, True, True).name == "SI-PVI-Conv (w. velocity)"


def test_bench_latency_runs():
    data = eval_data(2, seed=800)
    model = TrajectoryPredictor(default_feature_config("conv"),
                                BackboneConfig(kind="conv"), seed=5)
    mean_ms, std_ms = ev.bench_latency(model, data, repeats=2, warmup=1)
    assert mean_ms > 0 and std_ms >= 0
