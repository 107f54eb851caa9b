"""CLI pipeline: preprocess counts, smoke run, determinism, exit codes."""

import numpy as np
import pytest

from pvtraj import trajdata as td
from pvtraj.cli import main
from pvtraj.runconfig import RunConfig, RunConfigError


@pytest.fixture()
def tiny_corpus(tmp_path):
    scenes_path = tmp_path / "scenes.txt"
    cfg = td.SynthConfig(seed=42, duration=21, n_ped=(2, 3), n_veh=(1, 2))
    td.save_scene_records(td.synth_corpus(cfg, 10), scenes_path)
    return scenes_path


def write_config(tmp_path, data_dir, **overrides):
    lines = {
        "backbone.kind": "conv",
        "data.train": str(data_dir / "train.npz"),
        "data.val": str(data_dir / "val.npz"),
        "data.test": str(data_dir / "test.npz"),
        "optimizer.epochs": "2",
        "run.dir": str(tmp_path / "run"),
        "seed": "3",
    }
    lines.update(overrides)
    path = tmp_path / "config.txt"
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()), encoding="utf-8")
    return path


def test_preprocess_window_arithmetic(tmp_path):
    scene = td.Scene("fixture", 2.5, [td.AgentTrack(
        "p0", "ped", np.arange(25), np.cumsum(np.full((25, 2), 0.4), axis=0))], (0, 24))
    path = tmp_path / "one.txt"
    td.save_scene_records([scene], path)
    out = tmp_path / "data"
    assert main(["preprocess", str(path), str(out), "--keep-every", "1",
                 "--val-frac", "0"]) == 0
    assert len(td.load_samples(out / "train.npz")) == 6  # 25 - 20 + 1


def test_preprocess_keep_every_identity(tmp_path, tiny_corpus):
    out = tmp_path / "data"
    assert main(["preprocess", str(tiny_corpus), str(out), "--keep-every", "1",
                 "--val-frac", "0.1", "--test-frac", "0.1"]) == 0
    summary = (out / "summary.txt").read_text()
    assert "train" in summary and "val" in summary and "test" in summary


def test_preprocess_counts_match_enumeration(tmp_path, tiny_corpus):
    out = tmp_path / "data"
    main(["preprocess", str(tiny_corpus), str(out), "--keep-every", "1",
          "--val-frac", "0", "--test-frac", "0"])
    got = len(td.load_samples(out / "train.npz"))
    want = sum(len(td.window_sequences(s)) for s in td.load_scene_records(tiny_corpus))
    assert got == want


def test_parse_error_exit_code(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("#scene s0 2.5\nnot-a-frame\tx\tped\t0\t0\n")
    assert main(["preprocess", str(bad), str(tmp_path / "out")]) == 2


def test_usage_error_exit_code():
    assert main(["preprocess"]) == 1
    assert main(["no-such-command"]) == 1


def test_unknown_config_key_rejected(tmp_path):
    with pytest.raises(RunConfigError):
        RunConfig.parse("no.such.key = 1\n")


def test_config_echo_roundtrip():
    cfg = RunConfig.parse("backbone.kind = conv\noptimizer.lr = 0.02\n")
    echoed = RunConfig.parse(cfg.echo())
    assert echoed.values == cfg.values
    assert cfg.values["optimizer.kind"] == "sgd"          # resolved from backbone
    assert cfg.values["features.aggregation"] == "weighted_sum"


def test_end_to_end_smoke(tmp_path, tiny_corpus, capsys):
    data = tmp_path / "data"
    assert main(["preprocess", str(tiny_corpus), str(data), "--keep-every", "1",
                 "--val-frac", "0.2", "--test-frac", "0.2"]) == 0
    config = write_config(tmp_path, data)
    assert main(["train", str(config)]) == 0
    run = tmp_path / "run"
    assert (run / "config.txt").exists()
    assert (run / "metrics.tsv").exists()
    assert (run / "best.bin").exists() and (run / "best.manifest").exists()
    assert (run / "training_curves.png").exists()

    assert main(["eval", "--checkpoint", str(run / "best"), "--data",
                 str(data / "test.npz"), "--samples", "5", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "ade\t" in out and "fde\t" in out
    assert (run / "results.tsv").exists()

    assert main(["bench", "--checkpoint", str(run / "best"), "--data",
                 str(data / "test.npz"), "--repeats", "2"]) == 0
    assert (run / "bench.txt").exists()

    pred_dir = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(run / "best"), "--scene",
                 str(tiny_corpus), "--samples", "3", "--max-figures", "1",
                 "--dump-trajectories", str(pred_dir)]) == 0
    tsv = (pred_dir / "trajectories.tsv").read_text().splitlines()
    assert tsv[0].startswith("scene\twindow\tkind")
    kinds = {line.split("\t")[2] for line in tsv[1:]}
    assert {"obs", "gt", "sample", "veh_obs"} <= kinds
    assert len(list(pred_dir.glob("*.png"))) == 1


def test_train_determinism_results_rows(tmp_path, tiny_corpus, capsys):
    import shutil

    data = tmp_path / "data"
    main(["preprocess", str(tiny_corpus), str(data), "--keep-every", "1",
          "--val-frac", "0.2", "--test-frac", "0.2"])
    run_dir = tmp_path / "run"
    config = write_config(tmp_path, data, **{"run.dir": str(run_dir)})
    rows = []
    for _ in range(2):  # identical (seed, config, data) twice
        if run_dir.exists():
            shutil.rmtree(run_dir)
        assert main(["train", str(config)]) == 0
        assert main(["eval", "--checkpoint", str(run_dir / "best"), "--data",
                     str(data / "test.npz"), "--samples", "5", "--seed", "1"]) == 0
        rows.append((run_dir / "results.tsv").read_text())
    capsys.readouterr()
    assert rows[0] == rows[1]


def test_eval_missing_checkpoint_is_data_error(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data",
                 str(tmp_path / "nope.npz")]) == 2


def test_ablate_tiny_grid(tmp_path, tiny_corpus, capsys):
    data = tmp_path / "data"
    main(["preprocess", str(tiny_corpus), str(data), "--keep-every", "1",
          "--val-frac", "0.2", "--test-frac", "0.2"])
    config = write_config(
        tmp_path, data,
        **{"ablation.backbones": "conv", "ablation.si": "true",
           "ablation.pvi": "false,true", "ablation.seeds": "0",
           "ablation.epochs": "1", "eval.n_samples": "3",
           "run.dir": str(tmp_path / "ablation")})
    assert main(["ablate", str(config)]) == 0
    capsys.readouterr()
    table = (tmp_path / "ablation" / "ablation.tsv").read_text().splitlines()
    assert len(table) == 3  # header + 2 cells
    assert (tmp_path / "ablation" / "ablation.png").exists()
