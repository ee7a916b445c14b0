"""Mini-batch Adam training loop with run-directory bookkeeping.

A run directory holds config.json (echoed experiment description),
history.jsonl (one epoch record per line), ckpt_best.bin (best validation
teacher-forced accuracy, ties broken by lower total loss) and
ckpt_final.bin. Everything stochastic draws from labeled substreams of the
run seed, so rerunning a config reproduces parameters bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate
from .loss import LossBreakdown, LossConfig, NumericError, batch_loss_graph
from .mathcore import split_rng
from .model import Parameters, build_graph, pad_batch, save_checkpoint

__all__ = ["TrainConfig", "RunHistory", "AdamState", "adam_step", "train"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("bad training configuration")


@dataclass
class RunHistory:
    records: list = field(default_factory=list)

    def append(self, record: dict):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch records must be appended in order")
        self.records.append(record)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class AdamState:
    def __init__(self, tensors: dict):
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(np.square(g.astype(np.float64))))
                        for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = np.float32(max_norm / total)
        for k in grads:
            grads[k] = grads[k] * scale
    return float(total)


def adam_step(tensors: dict, grads: dict, state: AdamState,
              config: TrainConfig, frozen=()) -> None:
    """In-place Adam update; frozen tensor names are left untouched."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - config.beta1 ** t
    bias2 = 1.0 - config.beta2 ** t
    for name, g in grads.items():
        if name in frozen:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * np.square(g)
        update = (m / bias1) / (np.sqrt(v / bias2) + config.eps)
        tensors[name] -= np.float32(config.lr) * update.astype(np.float32)


def _epoch_batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(params: Parameters, dataset, loss_config: LossConfig,
          train_config: TrainConfig, run_dir=None, frozen=(),
          log=None):
    """Train in place on dataset.train; returns (params, history).

    On a non-finite loss the last good checkpoint is written (when a run
    directory is given) before the NumericError propagates.
    """
    params = params.copy()
    state = AdamState(params.tensors)
    history = RunHistory()
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    best = (-1.0, float("inf"))
    best_params = params.copy()
    last_good = params.copy()
    frozen = tuple(frozen)

    try:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            rng = split_rng(train_config.seed, f"shuffle:{epoch}")
            sums = np.zeros(4)
            n_batches = 0
            for idx in _epoch_batches(len(dataset.train),
                                      train_config.batch_size, rng):
                batch = [dataset.train[i] for i in idx]
                ids, _ = pad_batch([list(ex.tokens) for ex in batch])
                outputs, leaves = build_graph(params, ids)
                total, breakdown = batch_loss_graph(outputs, batch, loss_config)
                total.backward()
                grads = {k: leaf.grad for k, leaf in leaves.items()
                         if leaf.grad is not None}
                clip_global_norm(grads, train_config.grad_clip)
                adam_step(params.tensors, grads, state, train_config, frozen)
                sums += (breakdown.ce, breakdown.energy, breakdown.halt,
                         breakdown.total)
                n_batches += 1
            last_good = params.copy()
            means = sums / max(n_batches, 1)
            val = evaluate.evaluate_split(params, dataset.val)
            record = {
                "epoch": epoch,
                "train_ce": means[0], "train_energy": means[1],
                "train_halt": means[2], "train_total": means[3],
                "val_tf_accuracy": val["tf_accuracy"],
                "val_halt_f1": val["halt_f1"],
                "wall_seconds": time.perf_counter() - t0,
            }
            history.append(record)
            if log:
                log(f"epoch {epoch:3d}  loss {means[3]:.4f}  "
                    f"val acc {val['tf_accuracy']:.4f}  "
                    f"halt F1 {val['halt_f1']:.4f}")
            key = (val["tf_accuracy"], -means[3])
            if key > (best[0], -best[1]):
                best = (val["tf_accuracy"], means[3])
                best_params = params.copy()
            if run_dir is not None:
                (run_dir / "history.jsonl").write_text(history.to_jsonl())
    except NumericError:
        if run_dir is not None:
            save_checkpoint(last_good, run_dir / "ckpt_final.bin")
        raise

    if train_config.epochs == 0:
        best_params = params.copy()
    if run_dir is not None:
        save_checkpoint(best_params, run_dir / "ckpt_best.bin")
        save_checkpoint(params, run_dir / "ckpt_final.bin")
        (run_dir / "history.jsonl").write_text(history.to_jsonl())
    return params, history


def mean_breakdown(records: list) -> LossBreakdown:
    """Average the stored per-epoch loss terms (reporting helper)."""
    if not records:
        raise ValueError("no records")
    return LossBreakdown(
        ce=float(np.mean([r["train_ce"] for r in records])),
        energy=float(np.mean([r["train_energy"] for r in records])),
        halt=float(np.mean([r["train_halt"] for r in records])),
        total=float(np.mean([r["train_total"] for r in records])))
