"""Computational regime detection and the halt-veto controller.

Three streaming signals summarize the recurrent trajectory over a bounded
trailing window: a recurrence-rate cycling score (fraction of
non-adjacent state pairs closer than a relative epsilon), the
least-squares entropy slope, and the absolute entropy. A decision table
maps them to four regimes:

    CONVERGING   entropy falling, not cycling
    ORBITING     cycling with flat entropy
    DIFFUSING    high entropy, flat, not cycling
    PROGRESSING  everything else (working, not yet converged)

The confusion head is a logistic readout over the windowed signals plus
the halt confidence, trained to recognize false convergence: the halt
head firing at a point where stopping would yield a wrong answer. Used as
a veto it can only remove halt decisions, never add them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coupling import state_entropy
from .evaluate import parse_generated_answer
from .mathcore import split_rng
from .model import SSM, GenerationResult, Parameters, build_graph, pad_batch
from .model import _conf_from_logits, _trace_from_outputs
from .taskgen import Vocabulary

CONVERGING = "CONVERGING"
ORBITING = "ORBITING"
DIFFUSING = "DIFFUSING"
PROGRESSING = "PROGRESSING"
REGIMES = (CONVERGING, ORBITING, DIFFUSING, PROGRESSING)

SIGNAL_WINDOW = 8


class DegenerateDataError(ValueError):
    """Single-class training set for the confusion head."""


@dataclass(frozen=True)
class Signals:
    s_c: float     # cycling score in [0, 1]
    grad_h: float  # windowed entropy slope, nats per token
    h_abs: float   # absolute entropy


@dataclass(frozen=True)
class RegimeThresholds:
    s_c_hi: float = 0.5
    grad_flat: float = 0.02      # |slope| below this is "flat"
    h_hi: float = 1.25           # 0.6 * ln(8) by default
    halt_threshold: float = 0.5
    veto_threshold: float = 0.5
    epsilon: float = 0.25        # cycling-score relative distance


def default_thresholds(d_state: int) -> RegimeThresholds:
    return RegimeThresholds(h_hi=0.6 * float(np.log(d_state)))


def cycling_score(states, epsilon: float = 0.25) -> float:
    """Recurrence rate of a trailing state window.

    Fraction of pairs (i, j) with j >= i + 2 whose distance is within
    epsilon times the median pair distance. Relative thresholding makes
    the score invariant under global scaling of the states.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or len(states) < 4:
        raise ValueError("cycling_score needs a window of >= 4 state vectors")
    n = len(states)
    dists = []
    for i in range(n):
        for j in range(i + 2, n):
            dists.append(np.linalg.norm(states[i] - states[j]))
    dists = np.array(dists)
    med = np.median(dists)
    return float(np.mean(dists <= epsilon * med))


def entropy_slope(entropies) -> float:
    """Least-squares slope of an entropy window."""
    y = np.asarray(entropies, dtype=np.float64)
    if len(y) < 2:
        return 0.0
    x = np.arange(len(y), dtype=np.float64)
    x -= x.mean()
    return float(np.sum(x * (y - y.mean())) / np.sum(x * x))


def compute_signals(states, entropies, t: int,
                    window: int = SIGNAL_WINDOW,
                    epsilon: float = 0.25) -> Signals:
    """Signals at position t from the trailing window ending there."""
    lo = max(0, t - window + 1)
    win_states = states[lo:t + 1]
    win_entropy = entropies[lo:t + 1]
    s_c = cycling_score(win_states, epsilon) if len(win_states) >= 4 else 0.0
    return Signals(s_c=s_c, grad_h=entropy_slope(win_entropy),
                   h_abs=float(entropies[t]))


def classify_regime(signals: Signals, thresholds: RegimeThresholds) -> str:
    """Total, deterministic decision table over the three signals."""
    falling = signals.grad_h < -thresholds.grad_flat
    flat = abs(signals.grad_h) <= thresholds.grad_flat
    if falling and signals.s_c < thresholds.s_c_hi:
        return CONVERGING
    if signals.s_c >= thresholds.s_c_hi and flat:
        return ORBITING
    if (signals.h_abs >= thresholds.h_hi and flat
            and signals.s_c < thresholds.s_c_hi):
        return DIFFUSING
    return PROGRESSING


def halt_veto(halt_conf: float, confusion_out: float, regime: str,
              thresholds: RegimeThresholds) -> str:
    """HALT only when confidence is high, confusion is low, and the
    trajectory is in a halting-compatible regime."""
    if (halt_conf >= thresholds.halt_threshold
            and confusion_out < thresholds.veto_threshold
            and regime in (CONVERGING, PROGRESSING)):
        return "HALT"
    return "CONTINUE"


# -- confusion head -----------------------------------------------------------

N_FEATURES = 3 * SIGNAL_WINDOW + 1  # windowed signals + halt confidence


@dataclass
class ConfusionHead:
    weights: np.ndarray      # (25,)
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def predict(self, features) -> np.ndarray:
        x = (np.atleast_2d(np.asarray(features, dtype=np.float64))
             - self.feat_mean) / self.feat_std
        z = x @ self.weights + self.bias
        out = 1.0 / (1.0 + np.exp(-z))
        return out if out.size > 1 else float(out[0])


def event_features(states, entropies, t: int, halt_conf: float,
                   window: int = SIGNAL_WINDOW,
                   epsilon: float = 0.25) -> np.ndarray:
    """25-dim feature row: Signals at the last `window` positions ending
    at t (edge-padded at the start), then the halt confidence."""
    rows = []
    for k in range(window):
        tk = max(0, t - (window - 1 - k))
        s = compute_signals(states, entropies, tk, window, epsilon)
        rows.extend((s.s_c, s.grad_h, s.h_abs))
    rows.append(halt_conf)
    return np.array(rows, dtype=np.float64)


def train_confusion_head(features, labels, seed: int = 0,
                         holdout: float = 0.25, steps: int = 400,
                         lr: float = 0.5, l2: float = 1e-3):
    """Logistic regression on halt-event features.

    labels: 1 = false convergence (halt fired, answer would be wrong).
    Returns (head, metrics) with held-out precision/recall/F1.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features/labels mismatch")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("confusion head needs both outcome classes")
    rng = split_rng(seed, "confusion-head")
    order = rng.permutation(len(y))
    n_hold = max(1, int(len(y) * holdout))
    hold, fit = order[:n_hold], order[n_hold:]
    if len(np.unique(y[fit])) < 2:
        raise DegenerateDataError("training fold collapsed to one class")

    mean = x[fit].mean(axis=0)
    std = x[fit].std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std

    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        z = xs[fit] @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - y[fit]
        gw = xs[fit].T @ err / len(fit) + l2 * w
        gb = err.mean()
        w -= lr * gw
        b -= lr * gb
    head = ConfusionHead(weights=w, bias=b, feat_mean=mean, feat_std=std)

    pred = np.atleast_1d(head.predict(x[hold])) >= 0.5
    truth = y[hold] >= 0.5
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    metrics = {"precision": precision, "recall": recall, "f1": f1,
               "n_fit": len(fit), "n_holdout": len(hold),
               "base_rate": float(y.mean())}
    return head, metrics


# -- halt-event extraction and vetoed decoding --------------------------------

def _entropy_series(state_rows, upto: int) -> np.ndarray:
    return np.array([state_entropy(state_rows[t]) for t in range(upto + 1)])


def collect_halt_events(params: Parameters, examples, max_new=None,
                        thresholds: RegimeThresholds = None,
                        window: int = SIGNAL_WINDOW):
    """Candidate halt events from free-running generation.

    Generations run with the halt head ignored; every position whose halt
    confidence crosses the threshold becomes one event, labeled 1 when
    stopping there would have produced a wrong answer (false convergence).
    Returns (features, labels).
    """
    from .model import generate_batch

    if params.config.arch != SSM:
        raise ValueError("halt events need the recurrent state probe")
    thresholds = thresholds or default_thresholds(params.config.d_state)
    results = generate_batch(params, [list(ex.prompt) for ex in examples],
                             max_new=max_new, halt_policy="never")
    feats, labels = [], []
    for res, ex in zip(results, examples):
        states = res.trace.state
        conf = res.trace.halt_conf
        n = len(res.tokens)
        entropies = _entropy_series(states, n - 1)
        for t in range(len(ex.prompt), n):
            if conf[t] < thresholds.halt_threshold:
                continue
            parsed = parse_generated_answer(res.tokens[:t + 1], len(ex.prompt))
            feats.append(event_features(states, entropies, t, conf[t],
                                        window, thresholds.epsilon))
            labels.append(0.0 if parsed == ex.answer else 1.0)
    return np.array(feats), np.array(labels)


def generate_with_veto(params: Parameters, prompts, head: ConfusionHead,
                       thresholds: RegimeThresholds = None, max_new=None,
                       window: int = SIGNAL_WINDOW, chunk: int = 128):
    """Greedy decoding where halt-head stops pass through the veto.

    A position halts only if confidence crosses the threshold AND the
    confusion head is quiet AND the regime permits halting, so the halt
    set is a subset of the plain confidence policy's. Emitted HALT tokens
    still end the sequence (grammar end, not a halt-head decision).
    Returns a list of (GenerationResult, decisions) where decisions logs
    (position, conf, confusion, regime, verdict) per vetoed candidate.
    """
    if params.config.arch != SSM:
        raise ValueError("the veto controller reads the recurrent state")
    thresholds = thresholds or default_thresholds(params.config.d_state)
    config = params.config
    if max_new is None:
        max_new = config.max_seq_len
    out = [None] * len(prompts)
    for start in range(0, len(prompts), chunk):
        part = [list(p) for p in prompts[start:start + chunk]]
        for k, res in enumerate(_veto_chunk(params, part, head, thresholds,
                                            max_new, window)):
            out[start + k] = res
    return out


def _veto_chunk(params, seqs, head, th, max_new, window):
    config = params.config
    n = len(seqs)
    produced = [0] * n
    stopped_by = [""] * n
    decisions = [[] for _ in range(n)]
    active = set(range(n))
    while active:
        rows = sorted(active)
        ids, lengths = pad_batch([seqs[i] for i in rows])
        outputs, _ = build_graph(params, ids)
        logits = outputs["logits"].data
        conf_all = _conf_from_logits(outputs["halt_logits"].data)
        states_all = outputs["state"].data
        for row, i in enumerate(rows):
            t = int(lengths[row]) - 1
            states = states_all[row, :t + 1]
            conf = float(conf_all[row, t])
            if conf >= th.halt_threshold:
                entropies = _entropy_series(states, t)
                sig = compute_signals(states, entropies, t, window, th.epsilon)
                confusion = head.predict(
                    event_features(states, entropies, t, conf, window, th.epsilon))
                regime = classify_regime(sig, th)
                verdict = halt_veto(conf, confusion, regime, th)
                decisions[i].append((t, conf, float(confusion), regime, verdict))
                if verdict == "HALT":
                    stopped_by[i] = "conf"
                    active.discard(i)
                    continue
            if produced[i] >= max_new or len(seqs[i]) >= config.max_seq_len:
                stopped_by[i] = "max_len"
                active.discard(i)
                continue
            nxt = int(np.argmax(logits[row, t]))
            seqs[i].append(nxt)
            produced[i] += 1
            if nxt == Vocabulary.HALT:
                stopped_by[i] = "token"
                active.discard(i)
    results = []
    from .model import forward_batch

    traces = forward_batch(params, seqs)
    for i in range(n):
        res = GenerationResult(tokens=seqs[i], trace=traces[i],
                               stopped_by=stopped_by[i],
                               truncated=stopped_by[i] == "max_len")
        results.append((res, decisions[i]))
    return results
