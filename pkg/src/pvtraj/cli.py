"""Command-line entry point wiring the whole pipeline.

Subcommands: preprocess, synth, train, eval, ablate, predict, bench.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.
PVTRAJ_RUN_DIR sets the default run-directory root (default ./runs).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import report
from . import tensorcore as tc
from . import trajdata as td
from .backbones import TrajectoryPredictor
from .runconfig import RunConfig, RunConfigError
from .training import TrainingDivergence, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage failures exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"usage error: {message}"))


def build_parser() -> _Parser:
    p = _Parser(prog="pvtraj", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=0,
                   help="cap internal worker threads (0 = default; the current "
                        "implementation is single-process)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="scenes file -> windowed sequence datasets")
    sp.add_argument("input", help="scene records file")
    sp.add_argument("out_dir", help="output directory for train/val/test .npz")
    sp.add_argument("--keep-every", type=int, default=4)
    sp.add_argument("--t-obs", type=int, default=8)
    sp.add_argument("--t-pred", type=int, default=12)
    sp.add_argument("--skip", type=int, default=1)
    sp.add_argument("--range", type=float, default=75.0, dest="range_m",
                    help="sensor-range filter radius in meters (needs --poses)")
    sp.add_argument("--poses", default=None, help="ego pose sidecar file; when given, "
                    "scenes are treated as ego-local and mapped to the global frame")
    sp.add_argument("--val-frac", type=float, default=0.1)
    sp.add_argument("--test-frac", type=float, default=0.0)
    sp.add_argument("--split-seed", type=int, default=0)

    sp = sub.add_parser("synth", help="generate a synthetic scene corpus")
    sp.add_argument("output", help="scene records file to write")
    sp.add_argument("--scenes", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gain", type=float, default=6.0)
    sp.add_argument("--radius", type=float, default=6.0)
    sp.add_argument("--noise", type=float, default=0.03)
    sp.add_argument("--duration", type=int, default=24)
    sp.add_argument("--frame-rate", type=float, default=2.5)
    sp.add_argument("--ped", type=int, nargs=2, default=(2, 4), metavar=("MIN", "MAX"))
    sp.add_argument("--veh", type=int, nargs=2, default=(1, 2), metavar=("MIN", "MAX"))
    sp.add_argument("--speed", type=float, nargs=2, default=(3.0, 6.0), metavar=("MIN", "MAX"))

    sp = sub.add_parser("train", help="train a model from a run configuration")
    sp.add_argument("config", help="run configuration file")
    sp.add_argument("--run-dir", default=None, help="override run directory")

    sp = sub.add_parser("eval", help="best-of-N evaluation of a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint prefix (no extension)")
    sp.add_argument("--data", required=True, help="sequence dataset .npz")
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", default=None,
                    help="run config (default: config.txt next to the checkpoint)")
    sp.add_argument("--results", default=None, help="results.tsv to append to")

    sp = sub.add_parser("ablate", help="train/evaluate the interaction-toggle grid")
    sp.add_argument("config", help="run configuration file")
    sp.add_argument("--run-dir", default=None)

    sp = sub.add_parser("predict", help="predict futures for a scene file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", required=True, help="scene records file")
    sp.add_argument("--config", default=None)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dump-trajectories", default=None, metavar="DIR",
                    help="directory for trajectories.tsv and figures")
    sp.add_argument("--max-figures", type=int, default=4)

    sp = sub.add_parser("bench", help="forward-latency benchmark")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--repeats", type=int, default=5)
    return p


def default_run_root() -> Path:
    return Path(os.environ.get("PVTRAJ_RUN_DIR", "runs"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    scenes = td.load_scene_records(args.input)
    poses = td.load_pose_records(args.poses) if args.poses else None
    processed = []
    for scene in scenes:
        if poses is not None:
            scene_poses = poses.get(scene.scene_id, [])
            scene = td.to_global_frame(scene, scene_poses)
            scene = td.range_filter(scene, scene_poses, radius=args.range_m)
        processed.append(td.resample(scene, keep_every=args.keep_every))
    train, val, test = td.split_scenes(processed, val_frac=args.val_frac,
                                       seed=args.split_seed, test_frac=args.test_frac)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for name, group in (("train", train), ("val", val), ("test", test)):
        samples = []
        for scene in group:
            samples.extend(td.window_sequences(scene, t_obs=args.t_obs,
                                               t_pred=args.t_pred, skip=args.skip))
        td.save_samples(samples, out / f"{name}.npz")
        summary.append(f"{name}\t{len(group)} scenes\t{len(samples)} sequences")
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = td.SynthConfig(n_ped=tuple(args.ped), n_veh=tuple(args.veh),
                         veh_speed=tuple(args.speed), repulsion_gain=args.gain,
                         repulsion_radius=args.radius, noise_sigma=args.noise,
                         duration=args.duration, frame_rate=args.frame_rate,
                         seed=args.seed)
    scenes = td.synth_corpus(cfg, args.scenes)
    td.save_scene_records(scenes, args.output)
    print(f"wrote {len(scenes)} scenes to {args.output}")
    return EXIT_OK


def _load_dataset(path, what: str) -> list[td.SequenceSample]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} dataset not found: {path}")
    return td.load_samples(path)


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    run_dir = Path(args.run_dir) if args.run_dir else (
        Path(cfg.values["run.dir"]) if cfg.values["run.dir"]
        else default_run_root() / Path(args.config).stem)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(run_dir / "config.txt")
    train_set = _load_dataset(cfg.values["data.train"], "training")
    val_set = _load_dataset(cfg.values["data.val"], "validation") \
        if cfg.values["data.val"] else []
    model = TrajectoryPredictor(cfg.feature_config(), cfg.backbone_config(),
                                seed=cfg.values["seed"])
    state = fit(model, train_set, val_set, cfg.optimizer_config(),
                seed=cfg.values["seed"], run_dir=run_dir)
    tc.save_checkpoint(model.state_dict(), run_dir / "final", cfg_hash=cfg.hash())
    if state.best_params:
        tc.save_checkpoint(state.best_params, run_dir / "best", cfg_hash=cfg.hash())
    report.plot_training_curves(state.history, run_dir / "training_curves.png")
    print(f"run directory: {run_dir}")
    print(f"epochs: {state.epoch}  best val ADE: {state.best_val_ade:.6f}")
    return EXIT_OK


def _restore_model(checkpoint: str, config: str | None) -> tuple[TrajectoryPredictor, RunConfig]:
    ckpt = Path(checkpoint)
    cfg_path = Path(config) if config else ckpt.parent / "config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"run config not found: {cfg_path}")
    cfg = RunConfig.load(cfg_path)
    model = TrajectoryPredictor(cfg.feature_config(), cfg.backbone_config(),
                                seed=cfg.values["seed"])
    arrays, _ = tc.load_checkpoint(ckpt)
    model.load_state_dict(arrays)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _restore_model(args.checkpoint, args.config)
    data = _load_dataset(args.data, "evaluation")
    fcfg = cfg.feature_config()
    flags = {"SI": "T" if fcfg.use_social else "F",
             "PVI": "T" if fcfg.use_pvi else "F",
             "RP": "T" if (fcfg.use_social or fcfg.use_pvi) else "F",
             "RV": "T" if fcfg.use_velocity else "F"}
    model_id = Path(args.checkpoint).parent.name or "model"
    rep = ev.best_of_n_eval(model, data, n=args.samples, seed=args.seed,
                            selection=cfg.values["eval.selection"],
                            model_id=model_id, flags=flags)
    sys.stdout.write(rep.to_text())
    results = Path(args.results) if args.results \
        else Path(args.checkpoint).parent / "results.tsv"
    ev.append_results(rep, results)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config)
    run_dir = Path(args.run_dir) if args.run_dir else (
        Path(cfg.values["run.dir"]) if cfg.values["run.dir"]
        else default_run_root() / f"{Path(args.config).stem}-ablation")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_echo(run_dir / "config.txt")
    train_set = _load_dataset(cfg.values["data.train"], "training")
    val_set = _load_dataset(cfg.values["data.val"], "validation") \
        if cfg.values["data.val"] else []
    test_set = _load_dataset(cfg.values["data.test"] or cfg.values["data.val"], "test")
    cells = [ev.AblationCell(backbone, si, pvi, rv)
             for backbone in cfg.values["ablation.backbones"]
             for si in cfg.values["ablation.si"]
             for pvi in cfg.values["ablation.pvi"]
             for rv in cfg.values["ablation.rv"]]
    rows = ev.run_ablation(cells, train_set, val_set, test_set,
                           seeds=list(cfg.values["ablation.seeds"]),
                           epochs=cfg.values["ablation.epochs"],
                           n_samples=cfg.values["eval.n_samples"],
                           out_path=run_dir / "ablation.tsv", log=print)
    report.plot_ablation(rows, run_dir / "ablation.png")
    print(f"table: {run_dir / 'ablation.tsv'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, cfg = _restore_model(args.checkpoint, args.config)
    scenes = td.load_scene_records(args.scene)
    out_dir = Path(args.dump_trajectories) if args.dump_trajectories \
        else Path(args.checkpoint).parent / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["scene\twindow\tkind\tagent\tsample\tstep\tx\ty"]
    figures = 0
    windows = 0
    for scene in scenes:
        for w, sample in enumerate(td.window_sequences(scene)):
            pred = model.predict(sample, n_samples=args.samples,
                                 seed=int(np.random.default_rng([args.seed, windows])
                                          .integers(2 ** 31)))
            windows += 1
            tgt = np.flatnonzero(sample.targets)
            for row, i in enumerate(tgt):
                pid = sample.ped_ids[i]
                for s in range(8):
                    x, y = sample.ped_obs[i, s]
                    lines.append(f"{scene.scene_id}\t{w}\tobs\t{pid}\t-\t{s}\t{x!r}\t{y!r}")
                for s in range(12):
                    x, y = sample.ped_future[i, s]
                    lines.append(f"{scene.scene_id}\t{w}\tgt\t{pid}\t-\t{s}\t{x!r}\t{y!r}")
                for k in range(pred.n_samples):
                    for s in range(12):
                        x, y = pred.samples[k, row, s]
                        lines.append(f"{scene.scene_id}\t{w}\tsample\t{pid}\t{k}\t{s}"
                                     f"\t{x!r}\t{y!r}")
            for j in range(sample.n_veh):
                vid = sample.veh_ids[j]
                for s in range(8):
                    if sample.veh_mask[j, s]:
                        x, y = sample.veh_obs[j, s]
                        lines.append(f"{scene.scene_id}\t{w}\tveh_obs\t{vid}\t-\t{s}"
                                     f"\t{x!r}\t{y!r}")
            if figures < args.max_figures:
                report.plot_scene_prediction(
                    sample, pred, out_dir / f"{scene.scene_id}_w{w:03d}.png",
                    title=f"{scene.scene_id} window {w}")
                figures += 1
    (out_dir / "trajectories.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {windows} windows to {out_dir / 'trajectories.tsv'} "
          f"({figures} figures)")
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = _restore_model(args.checkpoint, args.config)
    data = _load_dataset(args.data, "benchmark")
    mean_ms, std_ms = ev.bench_latency(model, data, repeats=args.repeats)
    out = Path(args.checkpoint).parent / "bench.txt"
    text = (f"sequences\t{len(data)}\nrepeats\t{args.repeats}\n"
            f"mean_ms_per_sequence\t{mean_ms:.4f}\nms_std\t{std_ms:.4f}\n")
    out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
    "bench": cmd_bench,
}

DATA_ERRORS = (td.SceneFormatError, td.MissingPoseError, RunConfigError,
               FileNotFoundError, tc.ShapeError, KeyError, ValueError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, tuple):
            code, message = exc.code
            print(message, file=sys.stderr)
            return code
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (TrainingDivergence, tc.NonFiniteError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
