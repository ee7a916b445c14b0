"""The thermodynamic training objective.

total = cross-entropy
      + alpha * energy surrogate   (halt-gated cost of computing past or
                                    before the optimal stop)
      + beta  * halt BCE           (explicit halt supervision)

The energy surrogate charges p_halt(t) on every reasoning position before
the optimal stop and 1 - p_halt(t) on every position at or after it, so a
positive alpha pushes the halt confidence toward a calibrated step at t*
even when beta is zero. Prompt positions carry no cross-entropy (they are
given, not predicted) and no energy (no computation progress to price).

The plain-numpy functions here are the reference semantics for a single
example; batch_loss_graph builds the identical quantity on the autodiff
graph for training, normalized as the mean of per-example losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .taskgen import halt_labels

CONF_CLAMP = 1e-7


class NumericError(FloatingPointError):
    """A loss term went non-finite; the message names the term."""


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.0
    beta: float = 0.0
    mask_prompt: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha/beta must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha/beta must be nonnegative")


@dataclass
class LossBreakdown:
    ce: float
    energy: float
    halt: float
    total: float

    def check_finite(self):
        for name in ("ce", "energy", "halt", "total"):
            if not np.isfinite(getattr(self, name)):
                raise NumericError(f"loss term {name!r} is not finite")
        return self


def cross_entropy(logits: np.ndarray, targets, mask) -> float:
    """Mean negative log-likelihood (natural log) over unmasked positions."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[0] != targets.shape[0] or mask.shape[0] != targets.shape[0]:
        raise ValueError("logits, targets and mask lengths differ")
    if not mask.any():
        raise ValueError("cross_entropy over an all-masked sequence")
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    nll = lse - logits[np.arange(len(targets)), targets]
    return float(nll[mask].mean())


def energy_term(halt_conf, optimal_stop: int, alpha: float) -> float:
    """alpha * (sum of p_halt before t* + sum of 1 - p_halt from t* on).

    Expects the reasoning/answer slice of the halt series, with
    optimal_stop an index into that slice.
    """
    conf = np.asarray(halt_conf, dtype=np.float64)
    if not 0 <= optimal_stop < len(conf):
        raise ValueError("optimal_stop outside the halt series")
    early = conf[:optimal_stop].sum()
    late = (1.0 - conf[optimal_stop:]).sum()
    return float(alpha * (early + late))


def halt_bce(halt_conf, labels, beta: float) -> float:
    """beta * mean binary cross-entropy over all positions."""
    conf = np.clip(np.asarray(halt_conf, dtype=np.float64),
                   CONF_CLAMP, 1.0 - CONF_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if conf.shape != y.shape:
        raise ValueError("halt_conf and labels lengths differ")
    bce = -(y * np.log(conf) + (1.0 - y) * np.log(1.0 - conf))
    return float(beta * bce.mean())


def thermodynamic_loss(trace, example, config: LossConfig) -> LossBreakdown:
    """Compose the three terms for one teacher-forced example."""
    tokens = np.asarray(example.tokens, dtype=np.int64)
    n = len(tokens)
    if trace.logits.shape[0] != n:
        raise ValueError("trace is not aligned with the example tokens")
    p = len(example.prompt)
    ce_mask = np.zeros(n - 1, dtype=bool)
    ce_mask[(p - 1 if config.mask_prompt else 0):] = True
    ce = cross_entropy(trace.logits[:-1], tokens[1:], ce_mask)
    energy = energy_term(trace.halt_conf[p:], example.optimal_stop - p,
                         config.alpha)
    halt = halt_bce(trace.halt_conf, halt_labels(example), config.beta)
    return LossBreakdown(ce=ce, energy=energy, halt=halt,
                         total=ce + energy + halt).check_finite()


def batch_loss_graph(outputs, examples, config: LossConfig):
    """Same objective on the autodiff graph, averaged over a padded batch.

    outputs comes from model.build_graph over the padded token matrix of
    `examples`. Returns (total Tensor, LossBreakdown of floats).
    """
    B = len(examples)
    T = outputs["logits"].shape[1]
    dtype = np.float32

    targets = np.zeros((B, T), dtype=np.int64)
    w_ce = np.zeros((B, T), dtype=dtype)
    w_halt = np.zeros((B, T), dtype=dtype)
    w_energy = np.zeros((B, T), dtype=dtype)
    labels = np.zeros((B, T), dtype=dtype)

    for i, ex in enumerate(examples):
        tokens = ex.tokens
        n = len(tokens)
        p = len(ex.prompt)
        targets[i, :n - 1] = tokens[1:]
        start = p - 1 if config.mask_prompt else 0
        w_ce[i, start:n - 1] = 1.0 / (B * (n - 1 - start))
        w_halt[i, :n] = config.beta / (B * n)
        labels[i, ex.optimal_stop:n] = 1.0
        w_energy[i, p:ex.optimal_stop] = config.alpha / B
        w_energy[i, ex.optimal_stop:n] = -config.alpha / B

    ce = ad.cross_entropy_logits(outputs["logits"], targets, w_ce)
    halt_sig = ad.sigmoid(outputs["halt_logits"])
    # sum(w_pre*s) + sum(w_post*(1-s)) written as one weighted sum plus const
    const = float(-np.minimum(w_energy, 0.0).sum())
    energy = ad.weighted_sum(halt_sig, w_energy) + np.asarray(const, dtype=dtype)
    halt = ad.bce_logits(outputs["halt_logits"], labels, w_halt)
    total = ce + energy + halt
    breakdown = LossBreakdown(
        ce=float(ce.data), energy=float(energy.data), halt=float(halt.data),
        total=float(total.data)).check_finite()
    return total, breakdown
