"""Displacement-error metrics, best-of-N evaluation, ablations, and latency.

ADE averages the Euclidean error over every pedestrian and every predicted
step; FDE averages it at the final step only. Best-of-N draws N candidate
futures with nested sampling (sample k is identical for every N > k) and
scores, per pedestrian, the candidate with the lowest ADE; the reported FDE
comes from that ADE-selected candidate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbones import (BackboneConfig, GaussianParams, TrajectoryPredictor,
                        default_feature_config, sample_trajectories)
from .tensorcore import ShapeError
from .trajdata import SequenceSample


def ade(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean distance over all pedestrians and steps, [n_p, steps, 2] inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"ade: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.hypot(pred[..., 0] - truth[..., 0], pred[..., 1] - truth[..., 1])))


def fde(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean distance at the final predicted step only."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"fde: {pred.shape} vs {truth.shape}")
    d = pred[..., -1, :] - truth[..., -1, :]
    return float(np.mean(np.hypot(d[..., 0], d[..., 1])))


@dataclass
class EvalReport:
    model_id: str
    ade: float
    fde: float
    n_samples: int
    sequence_count: int
    pedestrian_count: int
    mean_ms_per_sequence: float
    ms_std: float
    seed: int
    flags: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"model_id\t{self.model_id}", f"ade\t{self.ade:.6f}",
                 f"fde\t{self.fde:.6f}", f"n_samples\t{self.n_samples}",
                 f"sequences\t{self.sequence_count}",
                 f"pedestrians\t{self.pedestrian_count}",
                 f"mean_ms_per_sequence\t{self.mean_ms_per_sequence:.4f}",
                 f"ms_std\t{self.ms_std:.4f}", f"seed\t{self.seed}"]
        for k in sorted(self.flags):
            lines.append(f"{k}\t{self.flags[k]}")
        return "\n".join(lines) + "\n"

    def tsv_row(self) -> str:
        """Machine-readable row; timing fields are deliberately excluded so
        identical (seed, config, data) reproduce the file bit-identically."""
        flags = [f"{k}={self.flags[k]}" for k in sorted(self.flags)]
        return "\t".join([self.model_id, f"{self.ade:.9f}", f"{self.fde:.9f}",
                          str(self.n_samples), str(self.sequence_count),
                          str(self.pedestrian_count), str(self.seed),
                          ",".join(flags) or "-"])


RESULTS_HEADER = "model_id\tade\tfde\tn_samples\tsequences\tpedestrians\tseed\tflags"


def append_results(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(RESULTS_HEADER + "\n")
        fh.write(report.tsv_row() + "\n")


def best_of_n_eval(model: TrajectoryPredictor, test_set: list[SequenceSample],
                   n: int = 20, seed: int = 0, selection: str = "per_pedestrian",
                   model_id: str = "model", flags: dict | None = None) -> EvalReport:
    """Evaluate with the N-candidate protocol.

    Per sequence, N futures are drawn and, for each pedestrian (or the whole
    sequence when ``selection`` is per_sequence), the candidate minimizing
    ADE is kept. Forward latency is wall-clock per sequence and excludes
    sampling and data preparation outside the model.
    """
    if not test_set:
        raise ValueError("empty test set")
    if selection not in ("per_pedestrian", "per_sequence"):
        raise ValueError(f"unknown selection {selection!r}")
    ades, fdes, times = [], [], []
    total_peds = 0
    for idx, sample in enumerate(test_set):
        t0 = time.perf_counter()
        params_node = model.forward(sample)
        times.append((time.perf_counter() - t0) * 1e3)
        params = GaussianParams.from_array(params_node.value)
        tgt = np.flatnonzero(sample.targets)
        last = sample.ped_obs[tgt][:, -1]
        pred = sample_trajectories(params, last, n_samples=n,
                                   seed=int(np.random.default_rng([seed, idx])
                                            .integers(2 ** 31)))
        truth = sample.ped_future[sample.targets]          # [n_t, 12, 2]
        err = np.linalg.norm(pred.samples - truth[None], axis=-1)  # [n, n_t, 12]
        per_ped_ade = err.mean(axis=-1)                    # [n, n_t]
        if selection == "per_pedestrian":
            pick = per_ped_ade.argmin(axis=0)              # [n_t]
        else:
            pick = np.full(err.shape[1], per_ped_ade.mean(axis=1).argmin())
        sel = np.arange(err.shape[1])
        ades.extend(per_ped_ade[pick, sel])
        fdes.extend(err[pick, sel, -1])
        total_peds += err.shape[1]
    return EvalReport(model_id, float(np.mean(ades)), float(np.mean(fdes)), n,
                      len(test_set), total_peds, float(np.mean(times)),
                      float(np.std(times)), seed, flags or {})


def bench_latency(model: TrajectoryPredictor, test_set: list[SequenceSample],
                  repeats: int = 3, warmup: int = 2) -> tuple[float, float]:
    """Single-threaded forward latency: (mean ms/sequence, std over repeats)."""
    if not test_set:
        raise ValueError("empty test set")
    for sample in test_set[:warmup]:
        model.forward(sample)
    means = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for sample in test_set:
            model.forward(sample)
        means.append((time.perf_counter() - t0) * 1e3 / len(test_set))
    return float(np.mean(means)), float(np.std(means))


@dataclass
class AblationCell:
    backbone: str
    use_social: bool
    use_pvi: bool
    use_velocity: bool = False

    @property
    def name(self) -> str:
        parts = []
        if self.use_social:
            parts.append("SI")
        if self.use_pvi:
            parts.append("PVI")
        parts.append(self.backbone.capitalize() if self.backbone == "conv" else "LSTM")
        name = "-".join(parts)
        return name + " (w. velocity)" if self.use_velocity else name

    def flags(self) -> dict:
        return {"SI": "T" if self.use_social else "F",
                "PVI": "T" if self.use_pvi else "F",
                "RP": "T" if (self.use_social or self.use_pvi) else "F",
                "RV": "T" if self.use_velocity else "F"}


ABLATION_HEADER = "model\tade\tfde\tSI\tPVI\tRP\tRV\tseed\tstatus"


def run_ablation(cells: list[AblationCell], train_set, val_set, test_set,
                 seeds: list[int], epochs: int | None = None,
                 optimizer_overrides: dict | None = None,
                 n_samples: int = 20, out_path=None, log=None) -> list[dict]:
    """Train and evaluate every cell for every seed; failures don't stop the grid.

    Returns one row dict per (cell, seed) with keys name/ade/fde/flags/seed/
    status, and writes a plain-text table mirroring the flag columns.
    """
    from .training import fit, regime_for  # local import: training uses our metrics

    rows = []
    for cell in cells:
        for seed in seeds:
            row = {"name": cell.name, "seed": seed, **cell.flags()}
            try:
                fcfg = default_feature_config(cell.backbone, use_social=cell.use_social,
                                              use_pvi=cell.use_pvi,
                                              use_velocity=cell.use_velocity)
                model = TrajectoryPredictor(fcfg, BackboneConfig(kind=cell.backbone),
                                            seed=seed)
                ocfg = regime_for(cell.backbone)
                if epochs is not None:
                    ocfg = replace(ocfg, epochs=epochs)
                for k, v in (optimizer_overrides or {}).items():
                    ocfg = replace(ocfg, **{k: v})
                state = fit(model, train_set, val_set, ocfg, seed=seed)
                if state.best_params:
                    model.load_state_dict(state.best_params)
                report = best_of_n_eval(model, test_set, n=n_samples, seed=seed,
                                        model_id=cell.name, flags=cell.flags())
                row.update(ade=report.ade, fde=report.fde, status="ok")
            except Exception as exc:  # record and continue with the grid
                row.update(ade=float("nan"), fde=float("nan"), status=f"failed: {exc}")
            rows.append(row)
            if log is not None:
                log(f"{row['name']} seed {seed}: ade={row['ade']:.4f} "
                    f"fde={row['fde']:.4f} [{row['status']}]")
    if out_path is not None:
        write_ablation_table(rows, out_path)
    return rows


def write_ablation_table(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(ABLATION_HEADER + "\n")
        for r in rows:
            fh.write("\t".join([r["name"], f"{r['ade']:.9f}", f"{r['fde']:.9f}",
                                r["SI"], r["PVI"], r["RP"], r["RV"],
                                str(r["seed"]), r["status"]]) + "\n")
