"""Entropy-halt coupling analysis.

For each test example we take the teacher-forced trajectory over the
reasoning window (first trace position through HALT, prompt excluded) and
pair the per-position state entropy with the halt confidence. Per-example
Pearson r measures coupling strength; the derivative cross-correlation
peak lag measures timing: a negative lag means the halt confidence moves
before the entropy collapses (anticipatory), zero or positive means it
reacts with or after the collapse.

Entropy of a real vector is not canonical; the default estimator treats
the squared magnitudes as a distribution (scale-invariant), with a
softmax-based alternative behind the entropy_mode switch for side-by-side
reporting. All statistics run in float64.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluate import _answer_correct
from .mathcore import split_rng, softmax
from .model import SSM, Parameters, forward_batch

D_STATE = "d_state"
D_MODEL = "d_model"
SIGNIFICANT_R = 0.3


class UndefinedCorrelationError(ValueError):
    """Pearson r over a constant sequence."""


class UndefinedLagError(ValueError):
    """Cross-correlation of an identically zero derivative."""


class ProbeError(ValueError):
    """Probe incompatible with the architecture."""


class InsufficientDataError(ValueError):
    pass


@dataclass
class Trajectory:
    example_id: int
    entropy: np.ndarray  # per-position state entropy over the window
    halt: np.ndarray     # per-position halt confidence
    probe: str
    correct: bool


@dataclass
class CorrelationStats:
    probe: str
    n: int
    n_excluded: int
    accuracy: float
    valid: bool          # accuracy gate passed
    mean_r: float
    median_r: float
    r_sd: float
    frac_sig: float      # fraction with |r| > 0.3
    tau_drv: float       # median peak lag
    ci_low: float
    ci_high: float
    u_stat: float = float("nan")
    p_value: float = float("nan")
    r_values: np.ndarray = field(default=None, repr=False)
    tau_values: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> str:
        payload = {k: v for k, v in self.__dict__.items()
                   if k not in ("r_values", "tau_values")}
        return json.dumps(payload, sort_keys=True, indent=2)


def state_entropy(v, mode: str = "sq") -> float:
    """Concentration entropy of a real vector.

    mode "sq": p_i = v_i^2 / sum v^2 (scale-invariant);
    mode "softmax": p = softmax(v).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("state_entropy expects a nonempty vector")
    if mode == "sq":
        sq = np.square(v)
        total = sq.sum()
        if total == 0.0:
            raise ValueError("state_entropy of the zero vector is undefined")
        p = sq / total
    elif mode == "softmax":
        p = softmax(v)
    else:
        raise ValueError(f"unknown entropy mode {mode!r}")
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("pearson_r needs two equal-length sequences of >= 3")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation of a constant sequence")
    return float(np.sum(xc * yc) / (sx * sy))


def derivative_xcorr_lag(halt, entropy, max_lag: int = 5):
    """Peak lag of the normalized cross-correlation between the halt
    derivative and the (negated) entropy derivative.

    Returns (tau, curve) with curve[k] the Pearson correlation at lag
    k - max_lag; entries are NaN where the overlap is too short or
    degenerate. Negative tau: the halt derivative leads the collapse.
    """
    halt = np.asarray(halt, dtype=np.float64)
    entropy = np.asarray(entropy, dtype=np.float64)
    if halt.shape != entropy.shape or halt.ndim != 1:
        raise ValueError("halt and entropy series must match")
    if len(halt) < max_lag + 3:
        raise ValueError(f"series of length {len(halt)} too short for "
                         f"max_lag {max_lag}")
    a = np.diff(halt)
    b = -np.diff(entropy)
    if not np.any(a) or not np.any(b):
        raise UndefinedLagError("a derivative series is identically zero")
    m = len(a)
    lags = np.arange(-max_lag, max_lag + 1)
    curve = np.full(len(lags), np.nan)
    for i, lag in enumerate(lags):
        if lag >= 0:
            xa, xb = a[lag:], b[:m - lag]
        else:
            xa, xb = a[:m + lag], b[-lag:]
        if len(xa) < 3:
            continue
        try:
            curve[i] = pearson_r(xa, xb)
        except UndefinedCorrelationError:
            continue
    if np.all(np.isnan(curve)):
        raise UndefinedLagError("no lag with a defined correlation")
    tau = int(lags[np.nanargmax(curve)])
    return tau, curve


def trajectory_window(example) -> tuple:
    """(start, stop) positions: first trace token through HALT inclusive."""
    return len(example.prompt), len(example.tokens)


def collect_trajectories(params: Parameters, examples, probe: str,
                         entropy_mode: str = "sq") -> list:
    """One Trajectory per example from teacher-forced passes."""
    if probe not in (D_STATE, D_MODEL):
        raise ProbeError(f"unknown probe {probe!r}")
    if probe == D_STATE and params.config.arch != SSM:
        raise ProbeError("the d_state probe needs a recurrent state; "
                         "the transformer has none")
    traces = forward_batch(params, [ex.tokens for ex in examples])
    out = []
    for i, (trace, ex) in enumerate(zip(traces, examples)):
        start, stop = trajectory_window(ex)
        rows = trace.state if probe == D_STATE else trace.hidden
        entropy = np.array([state_entropy(rows[t], entropy_mode)
                            for t in range(start, stop)])
        out.append(Trajectory(
            example_id=i, entropy=entropy,
            halt=trace.halt_conf[start:stop].astype(np.float64),
            probe=probe, correct=_answer_correct(trace, ex)))
    return out


def bootstrap_ci(values, n_boot: int = 10000, seed: int = 0,
                 level: float = 0.95):
    """Percentile bootstrap CI for the mean."""
    values = np.asarray(values, dtype=np.float64)
    rng = split_rng(seed, "bootstrap")
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    lo = float(np.quantile(means, (1.0 - level) / 2))
    hi = float(np.quantile(means, 1.0 - (1.0 - level) / 2))
    return lo, hi


def group_stats(trajectories, accuracy_gate: float = 0.95,
                n_boot: int = 10000, seed: int = 0, max_lag: int = 5,
                min_n: int = 10) -> CorrelationStats:
    """Aggregate per-example coupling into group-level statistics.

    Stats are marked invalid when group accuracy is below the gate, so a
    strong correlation can never be reported off the back of a model that
    stopped solving the task. Examples with undefined correlations are
    excluded and counted.
    """
    if not trajectories:
        raise InsufficientDataError("no trajectories")
    rs, taus = [], []
    excluded = 0
    for traj in trajectories:
        try:
            rs.append(pearson_r(traj.entropy, traj.halt))
        except UndefinedCorrelationError:
            excluded += 1
            continue
        try:
            tau, _ = derivative_xcorr_lag(traj.halt, traj.entropy, max_lag)
            taus.append(tau)
        except (UndefinedLagError, ValueError):
            pass
    if len(rs) < min_n:
        raise InsufficientDataError(
            f"only {len(rs)} valid trajectories (need {min_n})")
    rs = np.array(rs)
    taus = np.array(taus, dtype=np.float64)
    accuracy = float(np.mean([t.correct for t in trajectories]))
    ci_low, ci_high = bootstrap_ci(rs, n_boot=n_boot, seed=seed)
    return CorrelationStats(
        probe=trajectories[0].probe, n=len(rs), n_excluded=excluded,
        accuracy=accuracy, valid=accuracy >= accuracy_gate,
        mean_r=float(rs.mean()), median_r=float(np.median(rs)),
        r_sd=float(rs.std(ddof=1)) if len(rs) > 1 else 0.0,
        frac_sig=float(np.mean(np.abs(rs) > SIGNIFICANT_R)),
        tau_drv=float(np.median(taus)) if len(taus) else float("nan"),
        ci_low=ci_low, ci_high=ci_high,
        r_values=rs, tau_values=taus)


def compare_groups(stats_a: CorrelationStats,
                   stats_b: CorrelationStats) -> CorrelationStats:
    """Fill stats_a's Mann-Whitney fields against stats_b's r values."""
    u, p = mann_whitney_u(stats_a.r_values, stats_b.r_values)
    stats_a.u_stat = u
    stats_a.p_value = p
    return stats_a


def _u_statistic(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)[:, None]
    b = np.asarray(b, dtype=np.float64)[None, :]
    return float(np.sum(a > b) + 0.5 * np.sum(a == b))


def mann_whitney_u(a, b):
    """Mann-Whitney U (of the first sample) and two-sided p.

    Exact enumeration of all label assignments when the pooled size is at
    most 20, tie-corrected normal approximation with continuity correction
    otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be nonempty")
    n1, n2 = len(a), len(b)
    u = _u_statistic(a, b)
    mu = n1 * n2 / 2.0

    if n1 + n2 <= 20:
        pooled = np.concatenate([a, b])
        total = 0
        extreme = 0
        for pick in itertools.combinations(range(n1 + n2), n1):
            mask = np.zeros(n1 + n2, dtype=bool)
            mask[list(pick)] = True
            u_perm = _u_statistic(pooled[mask], pooled[~mask])
            total += 1
            if abs(u_perm - mu) >= abs(u - mu) - 1e-12:
                extreme += 1
        return u, extreme / total

    pooled = np.concatenate([a, b])
    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = np.sum(counts ** 3 - counts) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    num = u - mu
    cc = 0.5 * np.sign(num)
    z = (num - cc) / math.sqrt(var)
    p = 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0))
    return u, min(1.0, p)


def dump_trajectories(trajectories, path, regimes=None) -> None:
    """Columnar dump: example_id,t,entropy,halt[,regime]."""
    lines = ["example_id,t,entropy,halt" + (",regime" if regimes else "") + "\n"]
    for k, traj in enumerate(trajectories):
        for t in range(len(traj.entropy)):
            row = f"{traj.example_id},{t},{traj.entropy[t]:.10g},{traj.halt[t]:.10g}"
            if regimes:
                row += f",{regimes[k][t]}"
            lines.append(row + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
