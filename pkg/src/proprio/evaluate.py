"""Task-level metrics: teacher-forced accuracy, halt F1, free generation,
out-of-distribution parity.

Teacher-forced accuracy asks whether the argmax prediction reproduces the
answer characters exactly, given the gold trace as input. Halt F1 treats
the first threshold crossing of the halt confidence as the predicted stop
and scores an exact match against the optimal stop (a wrong-position
crossing costs both a false positive and a false negative; no crossing
costs a false negative). The threshold is fixed at 0.5 everywhere.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Parameters, forward_batch, generate_batch
from .taskgen import VOCAB, Vocabulary, ood_parity_examples

HALT_THRESHOLD = 0.5
RESULT_ID = VOCAB.tokenize(":")[0]
SPACE_ID = VOCAB.tokenize(" ")[0]


@dataclass
class EvalReport:
    tf_accuracy: float
    gen_accuracy: float
    halt_f1: float
    halt_precision: float
    halt_recall: float
    ood_accuracy_by_length: dict = field(default_factory=dict)
    n_test: int = 0
    n_gen: int = 0
    n_ood: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def answer_span(example) -> range:
    """Indices of the answer characters inside the full token sequence."""
    n_ans = len(example.answer)
    return range(example.optimal_stop - n_ans + 1, example.optimal_stop + 1)


def _answer_correct(trace, example) -> bool:
    tokens = example.tokens
    for pos in answer_span(example):
        if int(np.argmax(trace.logits[pos - 1])) != tokens[pos]:
            return False
    return True


def per_example_correct(params: Parameters, examples) -> np.ndarray:
    traces = forward_batch(params, [ex.tokens for ex in examples])
    return np.array([_answer_correct(t, ex)
                     for t, ex in zip(traces, examples)], dtype=bool)


def teacher_forced_accuracy(params: Parameters, examples) -> float:
    if not examples:
        raise ValueError("no examples")
    return float(per_example_correct(params, examples).mean())


def first_crossing(halt_conf, threshold: float = HALT_THRESHOLD):
    """Index of the first position with confidence >= threshold, or None."""
    hits = np.nonzero(np.asarray(halt_conf) >= threshold)[0]
    return int(hits[0]) if len(hits) else None


def halt_counts(predicted_stops, optimal_stops):
    tp = fp = fn = 0
    for pred, opt in zip(predicted_stops, optimal_stops):
        if pred is None:
            fn += 1
        elif pred == opt:
            tp += 1
        else:
            fp += 1
            fn += 1
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return f1, precision, recall


def halt_f1(params: Parameters, examples, threshold: float = HALT_THRESHOLD):
    """(f1, precision, recall) of exact-position halt prediction."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    traces = forward_batch(params, [ex.tokens for ex in examples])
    preds = [first_crossing(t.halt_conf, threshold) for t in traces]
    return f1_from_counts(*halt_counts(preds, [ex.optimal_stop for ex in examples]))


def parse_generated_answer(tokens, prompt_len: int):
    """Answer characters emitted after the last ':' sigil, or None."""
    generated = list(tokens[prompt_len:])
    if RESULT_ID not in generated:
        return None
    last = len(generated) - 1 - generated[::-1].index(RESULT_ID)
    answer = []
    for tid in generated[last + 1:]:
        if tid in (Vocabulary.HALT, Vocabulary.PAD, RESULT_ID, SPACE_ID):
            break
        answer.append(tid)
    if not answer:
        return None
    return VOCAB.detokenize(answer)


def free_generation_accuracy(params: Parameters, examples, max_len=None,
                             halt_policy: str = "token"):
    """Fraction of generations whose parsed answer matches the gold one.

    Unparseable generations count as wrong. Returns (accuracy, results).
    """
    prompts = [list(ex.prompt) for ex in examples]
    results = generate_batch(params, prompts, max_new=max_len,
                             halt_policy=halt_policy)
    hits = 0
    for res, ex in zip(results, examples):
        parsed = parse_generated_answer(res.tokens, len(ex.prompt))
        hits += int(parsed == ex.answer)
    return hits / len(examples), results


def ood_eval(params: Parameters, lengths=(9, 10), n: int = 200,
             train_lengths=(2, 8), seed: int = 0) -> dict:
    """Teacher-forced accuracy per held-out parity length."""
    lo, hi = train_lengths
    out = {}
    for length in lengths:
        if lo <= length <= hi:
            raise ValueError(f"length {length} is inside the training range")
        examples = ood_parity_examples(length, n, seed=seed)
        out[length] = teacher_forced_accuracy(params, examples)
    return out


def evaluate_split(params: Parameters, examples,
                   threshold: float = HALT_THRESHOLD) -> dict:
    """tf accuracy and halt stats from one shared teacher-forced pass."""
    traces = forward_batch(params, [ex.tokens for ex in examples])
    correct = [_answer_correct(t, ex) for t, ex in zip(traces, examples)]
    preds = [first_crossing(t.halt_conf, threshold) for t in traces]
    f1, precision, recall = f1_from_counts(
        *halt_counts(preds, [ex.optimal_stop for ex in examples]))
    return {"tf_accuracy": float(np.mean(correct)), "halt_f1": f1,
            "halt_precision": precision, "halt_recall": recall}


def evaluate_group(params: Parameters, dataset, n_gen: int = 500,
                   ood: bool = True, seed: int = 0) -> EvalReport:
    """Full report on the held-out test split."""
    test = dataset.test
    stats = evaluate_split(params, test)
    gen_examples = test[:n_gen]
    gen_acc, _ = free_generation_accuracy(params, gen_examples)
    report = EvalReport(
        tf_accuracy=stats["tf_accuracy"], gen_accuracy=gen_acc,
        halt_f1=stats["halt_f1"], halt_precision=stats["halt_precision"],
        halt_recall=stats["halt_recall"], n_test=len(test),
        n_gen=len(gen_examples))
    if ood and dataset.task == "parity":
        report.ood_accuracy_by_length = ood_eval(params, seed=seed)
        report.n_ood = 200
    return report
