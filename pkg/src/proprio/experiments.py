"""Orchestration of the experimental program.

Six training groups in a 2x3 factorial (architecture x objective), the
alpha/beta response-surface sweep, cross-task halt transfer with frozen
halt heads, the sorting cross-domain replication, and the confusion-head
veto experiment. Every run writes a self-contained directory (echoed
config, per-epoch history, checkpoints, eval report, coupling stats,
trajectory dumps) so any reported number traces back to persisted
artifacts and can be reproduced bit for bit from config.json.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import coupling, evaluate, regime
from .loss import LossConfig
from .model import (SSM, TRANSFORMER, ModelConfig, init_model,
                    load_checkpoint, save_checkpoint)
from .taskgen import Dataset, build_dataset
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class GroupSpec:
    id: str
    arch: str
    alpha: float
    beta: float


# Architecture x objective factorial: A/B transformer, C/D ssm, E adds
# explicit halt supervision on top of the energy penalty.
GROUPS = {
    "A": GroupSpec("A", TRANSFORMER, 0.0, 0.0),
    "B": GroupSpec("B", TRANSFORMER, 0.05, 0.0),
    "C": GroupSpec("C", SSM, 0.0, 0.0),
    "D": GroupSpec("D", SSM, 0.05, 0.0),
    "E_trans": GroupSpec("E_trans", TRANSFORMER, 0.05, 0.10),
    "E_ssm": GroupSpec("E_ssm", SSM, 0.05, 0.10),
}


@dataclass(frozen=True)
class ScaleProfile:
    name: str
    n_layers: int
    d_model: int
    n_heads: int
    d_state: int
    max_seq_len: int
    sizes: tuple
    epochs: int
    batch_size: int
    lr: float
    n_gen: int
    n_boot: int


PROFILES = {
    "desk": ScaleProfile("desk", n_layers=2, d_model=64, n_heads=4, d_state=8,
                         max_seq_len=128, sizes=(2000, 500, 500), epochs=15,
                         batch_size=32, lr=1e-3, n_gen=500, n_boot=10000),
    "paper": ScaleProfile("paper", n_layers=6, d_model=512, n_heads=8,
                          d_state=16, max_seq_len=128, sizes=(8000, 1000, 1000),
                          epochs=40, batch_size=64, lr=1e-3, n_gen=500,
                          n_boot=10000),
}


class FreezeViolationError(AssertionError):
    """A frozen tensor changed during fine-tuning."""


def get_profile(scale) -> ScaleProfile:
    if isinstance(scale, ScaleProfile):
        return scale
    return PROFILES[scale]


def model_config(spec: GroupSpec, profile: ScaleProfile, seed: int,
                 d_state=None) -> ModelConfig:
    return ModelConfig(arch=spec.arch, n_layers=profile.n_layers,
                       d_model=profile.d_model, n_heads=profile.n_heads,
                       d_state=d_state or profile.d_state,
                       max_seq_len=profile.max_seq_len, seed=seed)


def group_dataset(task: str, profile: ScaleProfile, data_seed: int = 0) -> Dataset:
    # the parity universe (508 inputs at 2-8 bits) is smaller than the
    # split sizes, so parity opts into within-split repeats
    return build_dataset(task, profile.sizes, seed=data_seed,
                         allow_duplicates=(task == "parity"))


def run_config_dict(spec, profile, task, seed, data_seed, epochs=None,
                    lr=None, d_state=None) -> dict:
    return {
        "group": spec.id, "arch": spec.arch,
        "alpha": spec.alpha, "beta": spec.beta,
        "task": task, "scale": profile.name,
        "seed": seed, "data_seed": data_seed,
        "model": asdict(model_config(spec, profile, seed, d_state)),
        "train": {"epochs": epochs or profile.epochs, "lr": lr or profile.lr,
                  "batch_size": profile.batch_size, "seed": seed},
        "sizes": list(profile.sizes),
    }


def run_group(group: str | GroupSpec, task: str = "parity",
              scale="desk", seed: int = 0, out_dir=None, data_seed: int = 0,
              dataset: Dataset = None, epochs: int = None, d_state=None,
              log=None):
    """Train, evaluate and analyze one group; returns (report, stats_by_probe)."""
    spec = GROUPS[group] if isinstance(group, str) else group
    profile = get_profile(scale)
    out_dir = Path(out_dir) if out_dir else None
    if dataset is None:
        dataset = group_dataset(task, profile, data_seed)

    cfg = run_config_dict(spec, profile, task, seed, data_seed, epochs)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))

    params0 = init_model(model_config(spec, profile, seed, d_state))
    loss_cfg = LossConfig(alpha=spec.alpha, beta=spec.beta)
    train_cfg = TrainConfig(epochs=epochs or profile.epochs, lr=profile.lr,
                            batch_size=profile.batch_size, seed=seed)
    params, history = train(params0, dataset, loss_cfg, train_cfg,
                            run_dir=out_dir, log=log)
    if out_dir:
        best = load_checkpoint(out_dir / "ckpt_best.bin")
    else:
        best = params

    report = evaluate.evaluate_group(best, dataset, n_gen=profile.n_gen,
                                     ood=(task == "parity"), seed=seed)
    probes = [coupling.D_STATE, coupling.D_MODEL] if spec.arch == SSM \
        else [coupling.D_MODEL]
    stats_by_probe = {}
    for probe in probes:
        trajs = coupling.collect_trajectories(best, dataset.test, probe)
        stats = coupling.group_stats(trajs, n_boot=profile.n_boot, seed=seed)
        stats_by_probe[probe] = stats
        if out_dir:
            (out_dir / f"stats_{probe}.json").write_text(stats.to_json())
            regimes = None
            if probe == coupling.D_STATE:
                regimes = _trajectory_regimes(best, dataset.test)
            coupling.dump_trajectories(trajs, out_dir / f"trajectories_{probe}.csv",
                                       regimes=regimes)
    if out_dir:
        (out_dir / "eval.json").write_text(report.to_json())
    return report, stats_by_probe


def _trajectory_regimes(params, examples):
    """Regime label per trajectory position (d_state probe windows)."""
    from .model import forward_batch

    thresholds = regime.default_thresholds(params.config.d_state)
    traces = forward_batch(params, [ex.tokens for ex in examples])
    out = []
    for trace, ex in zip(traces, examples):
        start, stop = coupling.trajectory_window(ex)
        states = trace.state
        entropies = np.array([coupling.state_entropy(states[t])
                              for t in range(stop)])
        labels = []
        for t in range(start, stop):
            sig = regime.compute_signals(states[:t + 1], entropies[:t + 1], t,
                                         epsilon=thresholds.epsilon)
            labels.append(regime.classify_regime(sig, thresholds))
        out.append(labels)
    return out


# -- sweep ---------------------------------------------------------------------

def _sweep_cell(args):
    alpha, beta, task, scale_name, seed, data_seed, out_root, accuracy_gate = args
    profile = get_profile(scale_name)
    spec = GroupSpec(f"cell_a{alpha:g}_b{beta:g}", SSM, alpha, beta)
    cell_dir = Path(out_root) / spec.id
    try:
        report, stats = run_group(spec, task=task, scale=profile, seed=seed,
                                  out_dir=cell_dir, data_seed=data_seed)
        st = stats[coupling.D_STATE]
        row = {"alpha": alpha, "beta": beta, "status": "ok",
               "tf_accuracy": report.tf_accuracy, "halt_f1": report.halt_f1,
               "mean_r": st.mean_r, "tau_drv": st.tau_drv,
               "frac_sig": st.frac_sig,
               "gated": report.tf_accuracy >= accuracy_gate}
    except Exception as err:  # cell failure recorded, sweep continues
        row = {"alpha": alpha, "beta": beta, "status": f"error: {err}",
               "gated": False}
    return row


def sweep_alpha_beta(alphas, betas, task: str = "parity", scale="desk",
                     seed: int = 0, data_seed: int = 0, out_dir="sweep",
                     accuracy_gate: float = 0.99, workers: int = None):
    """Grid sweep over (alpha, beta); cells share seed and data.

    Per-cell coupling stats are only marked `gated` (usable) when the cell
    reaches the accuracy gate. Writes manifest.json and surface.csv.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(float(a), float(b), task, get_profile(scale).name, seed,
              data_seed, str(out_dir), accuracy_gate)
             for a in alphas for b in betas]
    if workers is None:
        workers = int(os.environ.get("PROPRIO_WORKERS", "0")) or None
    rows = []
    if workers == 1 or len(cells) == 1:
        rows = [_sweep_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    manifest = {"task": task, "scale": get_profile(scale).name, "seed": seed,
                "data_seed": data_seed, "accuracy_gate": accuracy_gate,
                "cells": rows}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True))
    header = "alpha,beta,status,tf_accuracy,halt_f1,mean_r,tau_drv,frac_sig,gated\n"
    lines = [header]
    for r in rows:
        lines.append(",".join(str(r.get(k, "")) for k in
                              ("alpha", "beta", "status", "tf_accuracy",
                               "halt_f1", "mean_r", "tau_drv", "frac_sig",
                               "gated")) + "\n")
    (out_dir / "surface.csv").write_text("".join(lines))
    return rows


# -- transfer -------------------------------------------------------------------

HALT_TENSORS = ("halt_head.w", "halt_head.b")


def cross_task_transfer(source_run_dir, target_task: str = "arithmetic",
                        scale="desk", seed: int = 0, data_seed: int = 0,
                        epochs: int = 5, lr: float = 3e-4, out_dir=None,
                        dataset: Dataset = None, log=None):
    """Fine-tune a parity-trained model on the target task with the halt
    head frozen; returns zero-shot and post-transfer halt F1."""
    source_run_dir = Path(source_run_dir)
    src_cfg = json.loads((source_run_dir / "config.json").read_text())
    params = load_checkpoint(source_run_dir / "ckpt_best.bin")
    profile = get_profile(scale)
    if dataset is None:
        dataset = group_dataset(target_task, profile, data_seed)

    frozen_before = {k: params.tensors[k].tobytes() for k in HALT_TENSORS}
    zero_shot = evaluate.halt_f1(params, dataset.test)

    loss_cfg = LossConfig(alpha=src_cfg["alpha"], beta=src_cfg["beta"])
    train_cfg = TrainConfig(epochs=epochs, lr=lr,
                            batch_size=profile.batch_size, seed=seed)
    tuned, history = train(params, dataset, loss_cfg, train_cfg,
                           run_dir=out_dir, frozen=HALT_TENSORS, log=log)
    for k in HALT_TENSORS:
        if tuned.tensors[k].tobytes() != frozen_before[k]:
            raise FreezeViolationError(f"halt tensor {k} changed during "
                                       "fine-tuning")
    post = evaluate.halt_f1(tuned, dataset.test)
    result = {
        "source_group": src_cfg["group"], "source_arch": src_cfg["arch"],
        "target_task": target_task,
        "zero_shot_f1": zero_shot[0], "post_f1": post[0],
        "delta": post[0] - zero_shot[0],
    }
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "transfer.json").write_text(
            json.dumps(result, indent=2, sort_keys=True))
    return result


# -- cross-domain ----------------------------------------------------------------

def cross_domain(scale="desk", seed: int = 0, data_seed: int = 0,
                 out_dir="cross_domain", groups=("C", "D", "E_ssm"),
                 parity_e_run=None, few_shot_n: int = 500, log=None):
    """Fresh sorting models for the specificity gradient, plus optional
    few-shot adaptation of a parity-trained model."""
    out_dir = Path(out_dir)
    profile = get_profile(scale)
    dataset = group_dataset("sorting", profile, data_seed)
    rows = {}
    for gid in groups:
        report, stats = run_group(gid, task="sorting", scale=profile,
                                  seed=seed, out_dir=out_dir / f"{gid}_sort",
                                  data_seed=data_seed, dataset=dataset, log=log)
        st = stats[coupling.D_STATE]
        rows[gid] = {"mean_r": st.mean_r, "tau_drv": st.tau_drv,
                     "tf_accuracy": report.tf_accuracy, "valid": st.valid}
    result = {"sorting": rows}

    if parity_e_run is not None:
        params = load_checkpoint(Path(parity_e_run) / "ckpt_best.bin")
        trajs = coupling.collect_trajectories(params, dataset.test,
                                              coupling.D_STATE)
        zs = coupling.group_stats(trajs, n_boot=1000, seed=seed)
        src_cfg = json.loads((Path(parity_e_run) / "config.json").read_text())
        few = Dataset(task="sorting", seed=data_seed,
                      train=dataset.train[:few_shot_n], val=dataset.val,
                      test=dataset.test)
        tuned, _ = train(params, few,
                         LossConfig(alpha=src_cfg["alpha"], beta=src_cfg["beta"]),
                         TrainConfig(epochs=5, lr=3e-4,
                                     batch_size=profile.batch_size, seed=seed),
                         log=log)
        trajs2 = coupling.collect_trajectories(tuned, dataset.test,
                                               coupling.D_STATE)
        fs = coupling.group_stats(trajs2, n_boot=1000, seed=seed)
        result["few_shot"] = {
            "zero_shot_r": zs.mean_r, "zero_shot_valid": zs.valid,
            "adapted_r": fs.mean_r, "adapted_tau": fs.tau_drv,
            "adapted_valid": fs.valid, "n_few_shot": few_shot_n,
        }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "cross_domain.json").write_text(
        json.dumps(result, indent=2, sort_keys=True))
    return result


# -- confusion-head veto -----------------------------------------------------------

def veto_experiment(scale="desk", seed: int = 0, data_seed: int = 0,
                    out_dir=None, subject_epochs: int = 3, n_eval: int = 300,
                    max_new: int = 72, log=None):
    """Measure the halt-veto accuracy gain on a miscalibrated-halt model.

    The subject is a deliberately short-trained thermodynamic SSM whose
    halt head still fires prematurely (the regime where false convergence
    happens); confusion-head events come from free-running generations on
    the validation prompts, accuracy is compared on test prompts under the
    plain confidence stopping rule versus the vetoed rule.
    """
    profile = get_profile(scale)
    dataset = group_dataset("parity", profile, data_seed)
    spec = GROUPS["D"]
    subject_dir = Path(out_dir) / "subject" if out_dir else None
    params0 = init_model(model_config(spec, profile, seed))
    params, _ = train(params0, dataset,
                      LossConfig(alpha=spec.alpha, beta=spec.beta),
                      TrainConfig(epochs=subject_epochs, lr=profile.lr,
                                  batch_size=profile.batch_size, seed=seed),
                      run_dir=subject_dir, log=log)

    thresholds = regime.default_thresholds(params.config.d_state)
    feats, labels = regime.collect_halt_events(
        params, dataset.val[:n_eval], max_new=max_new, thresholds=thresholds)
    head, head_metrics = regime.train_confusion_head(feats, labels, seed=seed)

    test = dataset.test[:n_eval]
    acc_plain, _ = evaluate.free_generation_accuracy(
        params, test, max_len=max_new, halt_policy="conf")
    veto_results = regime.generate_with_veto(
        params, [list(ex.prompt) for ex in test], head, thresholds,
        max_new=max_new)
    hits = 0
    for (res, _), ex in zip(veto_results, test):
        parsed = evaluate.parse_generated_answer(res.tokens, len(ex.prompt))
        hits += int(parsed == ex.answer)
    acc_veto = hits / len(test)
    result = {
        "subject_epochs": subject_epochs,
        "accuracy_plain": acc_plain, "accuracy_veto": acc_veto,
        "delta": acc_veto - acc_plain,
        "head": head_metrics, "n_events": int(len(labels)),
        "event_positive_rate": float(np.mean(labels)) if len(labels) else 0.0,
        "n_eval": len(test),
    }
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "veto.json").write_text(
            json.dumps(result, indent=2, sort_keys=True))
    return result


def assert_factorial_integrity(run_dirs) -> None:
    """Group run configs may differ only in (group, arch, alpha, beta)."""
    configs = []
    for d in run_dirs:
        cfg = json.loads((Path(d) / "config.json").read_text())
        configs.append(cfg)
    varying = {"group", "arch", "alpha", "beta", "model"}
    base = {k: v for k, v in configs[0].items() if k not in varying}
    for cfg in configs[1:]:
        other = {k: v for k, v in cfg.items() if k not in varying}
        if other != base:
            diff = {k for k in base if base[k] != other.get(k)}
            raise AssertionError(f"factorial violation: configs differ in {diff}")
        m0 = {k: v for k, v in configs[0]["model"].items() if k != "arch"}
        m1 = {k: v for k, v in cfg["model"].items() if k != "arch"}
        if m0 != m1:
            raise AssertionError("factorial violation: model configs differ "
                                 "beyond arch")
