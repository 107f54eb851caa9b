"""Loss, optimizers, and the training loop.

Two documented regimes: Adam (lr 1e-4, batch 16, 200 epochs) for the LSTM
backbone and SGD (lr 0.01, batch 64, 250 epochs) for the conv backbone.
Batches are lists of sequences run as independent graphs; their gradients
accumulate with a 1/batch seed, so variable agent counts need no padding.
Everything is driven by one seeded generator captured in TrainState, which
serializes completely: resuming from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .backbones import TrajectoryPredictor
from .evaluation import ade, fde
from .tensorcore import Node
from .trajdata import SequenceSample


class TrainingDivergence(RuntimeError):
    """Non-finite loss; carries the step and sequence that produced it."""

    def __init__(self, epoch: int, step: int, seq_id: str):
        super().__init__(f"non-finite loss at epoch {epoch} step {step} (sequence {seq_id})")
        self.epoch = epoch
        self.step = step
        self.seq_id = seq_id


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    lr_decay_step: int = 0      # 0 disables the step decay
    lr_decay_factor: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def regime_for(kind: str) -> OptimizerConfig:
    """The documented training regime for a backbone kind."""
    if kind == "lstm":
        return OptimizerConfig(kind="adam", lr=1e-4, batch_size=16, epochs=200)
    return OptimizerConfig(kind="sgd", lr=0.01, batch_size=64, epochs=250)


def nll_loss(params: Node, truth: np.ndarray, mask: np.ndarray | None = None) -> Node:
    """Masked mean negative log likelihood of displacements under the head."""
    return tc.bivariate_nll(params, truth, mask)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most ``clip_norm``."""
    if clip_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm:
        return grads
    scale = clip_norm / total
    return {k: g * scale for k, g in grads.items()}


def sgd_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """Plain gradient descent; parameters without a gradient stay put."""
    return {k: v - lr * grads[k] if k in grads else v.copy() for k, v in values.items()}


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: dict, cfg: OptimizerConfig, lr: float) -> dict[str, np.ndarray]:
    """One Adam update; ``state`` holds first/second moments and the step count."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    out = {}
    for k, v in values.items():
        if k not in grads:
            out[k] = v.copy()
            continue
        g = grads[k]
        m = state.setdefault("m", {}).setdefault(k, np.zeros_like(v))
        s = state.setdefault("v", {}).setdefault(k, np.zeros_like(v))
        m[:] = cfg.beta1 * m + (1 - cfg.beta1) * g
        s[:] = cfg.beta2 * s + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = s / (1 - cfg.beta2 ** t)
        out[k] = v - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return out


@dataclass
class TrainState:
    """Complete training progress; serializing and restoring it resumes
    bit-identically (parameters, optimizer moments, and RNG state included)."""

    epoch: int = 0
    step: int = 0
    running_loss: float = 0.0
    best_val_ade: float = float("inf")
    best_params: dict = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (epoch, train_nll, val_ade, val_fde, secs)

    def save(self, path) -> None:
        path = Path(path)
        arrays = {f"best.{k}": v for k, v in self.best_params.items()}
        arrays.update({f"adam.m.{k}": v for k, v in self.opt_state.get("m", {}).items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.opt_state.get("v", {}).items()})
        arrays.update({f"model.{k}": v for k, v in self.opt_state.get("params", {}).items()})
        tc.save_checkpoint(arrays, path)
        meta = {
            "epoch": self.epoch, "step": self.step, "running_loss": self.running_loss,
            "best_val_ade": self.best_val_ade, "adam_t": self.opt_state.get("t", 0),
            "rng_state": self.rng_state, "history": self.history,
        }
        with open(path.with_suffix(".state.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)

    @classmethod
    def load(cls, path) -> "TrainState":
        path = Path(path)
        arrays, _ = tc.load_checkpoint(path)
        with open(path.with_suffix(".state.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        st = cls(epoch=meta["epoch"], step=meta["step"], running_loss=meta["running_loss"],
                 best_val_ade=meta["best_val_ade"], rng_state=meta["rng_state"],
                 history=[tuple(h) for h in meta["history"]])
        st.best_params = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")}
        st.opt_state = {
            "t": meta["adam_t"],
            "m": {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
            "v": {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")},
            "params": {k[6:]: v for k, v in arrays.items() if k.startswith("model.")},
        }
        return st


def mean_trajectory_metrics(model: TrajectoryPredictor,
                            samples: list[SequenceSample]) -> tuple[float, float]:
    """Deterministic ADE/FDE of the mean trajectory over a sample list."""
    if not samples:
        return float("nan"), float("nan")
    ades, fdes = [], []
    for s in samples:
        pred = model.predict(s, n_samples=1, seed=0).mean_trajectory()
        truth = s.ped_future[s.targets]
        ades.append(ade(pred, truth))
        fdes.append(fde(pred, truth))
    return float(np.mean(ades)), float(np.mean(fdes))


def fit(model: TrajectoryPredictor, train_set: list[SequenceSample],
        val_set: list[SequenceSample], cfg: OptimizerConfig, seed: int = 0,
        run_dir=None, resume: TrainState | None = None,
        log=None) -> TrainState:
    """Train ``model`` in place; returns the final TrainState.

    Shuffles per epoch with the state's generator, batches sequences, clips
    the global gradient norm, tracks the best validation ADE (deterministic
    mean-trajectory metric), and appends one metrics line per epoch. With a
    ``resume`` state, continues exactly where that state left off.
    """
    if not train_set:
        raise ValueError("training set is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = resume
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        model.load_state_dict(state.opt_state["params"])
    else:
        state = TrainState()
        rng = np.random.default_rng(seed)

    def emit(line: str) -> None:
        if log is not None:
            log(line)
        if run_dir is not None:
            with open(run_dir / "metrics.tsv", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    n = len(train_set)
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        epoch_loss = 0.0
        lr = cfg.lr
        if cfg.lr_decay_step > 0:
            lr = cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_step)
        for b0 in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[b0:b0 + cfg.batch_size]]
            model.zero_grad()
            for seq in batch:
                try:
                    loss = model.loss(seq)
                except tc.NonFiniteError:
                    state.rng_state = rng.bit_generator.state
                    if run_dir is not None:
                        _dump_state(state, model, run_dir)
                    raise TrainingDivergence(epoch, state.step, seq.scene_id) from None
                epoch_loss += float(loss.value) / len(batch)
                tc.backward(loss, seed=1.0 / len(batch))
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            grads = clip_gradients(grads, cfg.clip_norm)
            values = model.state_dict()
            if cfg.kind == "adam":
                updated = adam_step(values, grads, state.opt_state, cfg, lr)
            else:
                updated = sgd_step(values, grads, lr)
            model.load_state_dict(updated)
            state.step += 1
        n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
        train_nll = epoch_loss / n_batches
        val_ade, val_fde = mean_trajectory_metrics(model, val_set)
        seconds = time.perf_counter() - t0
        state.epoch = epoch + 1
        state.running_loss = train_nll
        state.history.append((epoch, train_nll, val_ade, val_fde, round(seconds, 3)))
        if val_set:
            if val_ade < state.best_val_ade:
                state.best_val_ade = val_ade
                state.best_params = model.state_dict()
        else:
            state.best_params = model.state_dict()
        emit(f"{epoch}\t{train_nll:.6f}\t{val_ade:.6f}\t{val_fde:.6f}\t{seconds:.3f}")
    state.rng_state = rng.bit_generator.state
    state.opt_state["params"] = model.state_dict()
    if run_dir is not None:
        _dump_state(state, model, run_dir)
    return state


def _dump_state(state: TrainState, model: TrajectoryPredictor, run_dir: Path) -> None:
    state.opt_state["params"] = model.state_dict()
    state.save(Path(run_dir) / "train_state")
    if state.best_params:
        tc.save_checkpoint(state.best_params, Path(run_dir) / "best")
