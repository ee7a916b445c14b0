"""Synthetic reasoning tasks: parity, symbolic sorting, modular arithmetic.

Each task emits character-level examples of the form

    prompt:  ?<payload><space>
    trace:   <step> <step> ... :<answer><HALT>

where every step makes one deterministic move of the reference algorithm
(left-fold XOR, bubble-sort comparison, running modular sum). The position
of the final answer character is the optimal stopping index t*: everything
the model needs to answer has been emitted at that point and the only token
left is HALT.

The 24-symbol vocabulary is closed: every character any generator can emit
is in it, and the tokenizer round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mathcore import split_rng

TASKS = ("parity", "sorting", "arithmetic")
TIERS = ("T0", "T1", "T2")

# Input-length tiers per task: tier -> inclusive (lo, hi) payload size.
DEFAULT_TIER_RANGES = {
    "parity": {"T0": (2, 4), "T1": (5, 6), "T2": (7, 8)},
    "sorting": {"T0": (3, 4), "T1": (5, 6), "T2": (7, 8)},
    "arithmetic": {"T0": (2, 3), "T1": (4, 4), "T2": (5, 5)},
}

SORT_ALPHABET = "ABCDEF"


class EncodingError(ValueError):
    """A symbol outside the closed 24-token vocabulary."""


class InfeasibleDatasetError(ValueError):
    """Requested split sizes cannot be met with distinct inputs."""


class Vocabulary:
    """Fixed 24-symbol character vocabulary with two reserved sentinels.

    Layout: PAD, HALT, digits 0-9, letters A-F, then '^' '=' ':' '+' '?' ' '.
    PAD is used only for batch padding, HALT terminates every trace.
    """

    PAD = 0
    HALT = 1

    def __init__(self):
        chars = list("0123456789ABCDEF") + ["^", "=", ":", "+", "?", " "]
        self.symbols = ["<pad>", "<halt>"] + chars
        if len(self.symbols) != 24:
            raise AssertionError("vocabulary must have exactly 24 symbols")
        self._char_to_id = {c: i + 2 for i, c in enumerate(chars)}
        self._id_to_char = {i + 2: c for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return 24

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            if ch not in self._char_to_id:
                raise EncodingError(f"symbol {ch!r} is not in the vocabulary")
            ids.append(self._char_to_id[ch])
        return ids

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == self.PAD:
                out.append("<pad>")
            elif i == self.HALT:
                out.append("<halt>")
            elif i in self._id_to_char:
                out.append(self._id_to_char[i])
            else:
                raise EncodingError(f"id {i} is not in the vocabulary")
        return "".join(out)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Example:
    """One task instance: tokenized prompt + reasoning trace."""

    prompt: tuple  # token ids, "?<payload> "
    trace: tuple   # token ids for the reasoning steps + ":<answer>", ends with HALT
    answer: str
    optimal_stop: int  # index into prompt+trace of the final answer character
    tier: str
    task: str
    payload: str   # raw input string, used for cross-split dedup

    @property
    def tokens(self) -> tuple:
        return self.prompt + self.trace

    @property
    def prompt_text(self) -> str:
        return VOCAB.detokenize(self.prompt)

    @property
    def trace_text(self) -> str:
        """Trace as text, without the terminal HALT sentinel."""
        return VOCAB.detokenize(self.trace[:-1])

    def __post_init__(self):
        if self.trace[-1] != Vocabulary.HALT:
            raise ValueError("trace must end with HALT")
        if not 0 <= self.optimal_stop < len(self.tokens):
            raise ValueError("optimal_stop out of range")


@dataclass
class Dataset:
    task: str
    seed: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _make_example(task: str, payload: str, steps: list[str], answer: str,
                  tier: str) -> Example:
    prompt_text = f"?{payload} "
    trace_text = " ".join(steps) + f" :{answer}" if steps else f":{answer}"
    prompt = tuple(VOCAB.tokenize(prompt_text))
    trace = tuple(VOCAB.tokenize(trace_text)) + (Vocabulary.HALT,)
    # final answer char sits immediately before HALT
    optimal_stop = len(prompt) + len(trace) - 2
    return Example(prompt=prompt, trace=trace, answer=answer,
                   optimal_stop=optimal_stop, tier=tier, task=task,
                   payload=payload)


def _tier_of(task: str, size: int, tier_ranges=None) -> str:
    ranges = tier_ranges or DEFAULT_TIER_RANGES[task]
    for tier, (lo, hi) in ranges.items():
        if lo <= size <= hi:
            return tier
    raise ValueError(f"no tier covers input size {size} for task {task}")


def parity_from_bits(bits: str, tier_ranges=None) -> Example:
    """Deterministic parity example for an explicit bit string."""
    if not 2 <= len(bits) <= 10 or any(b not in "01" for b in bits):
        raise ValueError(f"parity needs 2..10 bits, got {bits!r}")
    acc = int(bits[0])
    steps = []
    for b in bits[1:]:
        nxt = acc ^ int(b)
        steps.append(f"{acc}^{b}={nxt}")
        acc = nxt
    tier = "OOD" if len(bits) > 8 else _tier_of("parity", len(bits), tier_ranges)
    return _make_example("parity", bits, steps, str(acc), tier)


def gen_parity(n_bits: int, rng: np.random.Generator) -> Example:
    if not 2 <= n_bits <= 10:
        raise ValueError(f"n_bits must be in 2..10, got {n_bits}")
    bits = "".join(str(int(b)) for b in rng.integers(0, 2, size=n_bits))
    return parity_from_bits(bits)


def sorting_from_symbols(symbols: str, tier_ranges=None) -> Example:
    """Bubble-sort trace: one '<a><b><d>' chunk per comparison (d is '^'
    for swap, '=' for keep), the full array after each pass, early stop on
    a swap-free pass."""
    if not 3 <= len(symbols) <= 8 or any(s not in SORT_ALPHABET for s in symbols):
        raise ValueError(f"sorting needs 3..8 symbols from A-F, got {symbols!r}")
    arr = list(symbols)
    n = len(arr)
    steps = []
    for i in range(n - 1):
        swapped = False
        for j in range(n - 1 - i):
            a, b = arr[j], arr[j + 1]
            if a > b:
                arr[j], arr[j + 1] = b, a
                steps.append(f"{a}{b}^")
                swapped = True
            else:
                steps.append(f"{a}{b}=")
        steps.append("".join(arr))
        if not swapped:
            break
    answer = "".join(sorted(symbols))
    tier = _tier_of("sorting", len(symbols), tier_ranges)
    return _make_example("sorting", symbols, steps, answer, tier)


def gen_sort(length: int, rng: np.random.Generator) -> Example:
    if not 3 <= length <= 8:
        raise ValueError(f"length must be in 3..8, got {length}")
    symbols = "".join(SORT_ALPHABET[i] for i in rng.integers(0, 6, size=length))
    return sorting_from_symbols(symbols)


def arithmetic_from_digits(digits: str, tier_ranges=None) -> Example:
    """Running sum modulo 10, one step per operand after the first."""
    ops = digits.split("+") if "+" in digits else list(digits)
    if not 2 <= len(ops) <= 5 or any(d not in "0123456789" for d in ops):
        raise ValueError(f"arithmetic needs 2..5 single digits, got {digits!r}")
    payload = "+".join(ops)
    acc = int(ops[0])
    steps = []
    for d in ops[1:]:
        nxt = (acc + int(d)) % 10
        steps.append(f"{acc}+{d}={nxt}")
        acc = nxt
    tier = _tier_of("arithmetic", len(ops), tier_ranges)
    return _make_example("arithmetic", payload, steps, str(acc), tier)


def gen_arithmetic(n_operands: int, rng: np.random.Generator) -> Example:
    if not 2 <= n_operands <= 5:
        raise ValueError(f"n_operands must be in 2..5, got {n_operands}")
    digits = "".join(str(int(d)) for d in rng.integers(0, 10, size=n_operands))
    return arithmetic_from_digits(digits)


_FROM_PAYLOAD = {
    "parity": parity_from_bits,
    "sorting": sorting_from_symbols,
    "arithmetic": arithmetic_from_digits,
}


def _payload_universe(task: str, size: int) -> int:
    if task == "parity":
        return 2 ** size
    if task == "sorting":
        return 6 ** size
    return 10 ** size


def _enumerate_payloads(task: str, size: int) -> list[str]:
    if task == "parity":
        return [format(v, f"0{size}b") for v in range(2 ** size)]
    if task == "sorting":
        out = [""]
        for _ in range(size):
            out = [p + c for p in out for c in SORT_ALPHABET]
        return out
    return ["+".join(c) for c in
            ("".join(str(d) for d in divmod_seq(v, size)) for v in range(10 ** size))]


def divmod_seq(value: int, size: int) -> list[int]:
    digits = []
    for _ in range(size):
        value, d = divmod(value, 10)
        digits.append(d)
    return digits[::-1]


def _distinct_payloads(task: str, sizes: list[int], need: int,
                       rng: np.random.Generator) -> list[str]:
    """Distinct payloads over the given input sizes, round-robin across
    sizes, in seeded random order. Returns up to `need`, or everything if
    the universe is smaller."""
    per_size = {}
    for size in sizes:
        universe = _payload_universe(task, size)
        if universe <= max(4 * need, 4096):
            pool = _enumerate_payloads(task, size)
            rng.shuffle(pool)
        else:
            seen, pool = set(), []
            while len(pool) < need:
                ex = _GEN[task](size, rng)
                if ex.payload not in seen:
                    seen.add(ex.payload)
                    pool.append(ex.payload)
        per_size[size] = pool
    out, idx = [], 0
    while len(out) < need and any(per_size.values()):
        size = sizes[idx % len(sizes)]
        idx += 1
        if per_size[size]:
            out.append(per_size[size].pop())
    return out


_GEN = {"parity": gen_parity, "sorting": gen_sort, "arithmetic": gen_arithmetic}


def build_dataset(task: str, sizes: tuple[int, int, int], tier_ranges=None,
                  seed: int = 0, allow_duplicates: bool = False) -> Dataset:
    """Deterministic stratified dataset with disjoint splits.

    Splits never share an input string. With allow_duplicates=False each
    example is also distinct within its split, and the build fails if the
    request exceeds the number of distinct inputs. allow_duplicates=True
    lets a split repeat inputs from its own (still disjoint) pool once
    every distinct input in the pool has been used; the parity task needs
    this at the standard split sizes because its 2-8 bit universe only has
    508 distinct strings.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    n_train, n_val, n_test = sizes
    if min(sizes) < 0 or sum(sizes) <= 0:
        raise ValueError("split sizes must be nonnegative and not all zero")
    ranges = tier_ranges or DEFAULT_TIER_RANGES[task]
    for tier, (lo, hi) in ranges.items():
        if lo > hi:
            raise ValueError(f"bad tier range {tier}: {(lo, hi)}")

    rng = split_rng(seed, f"dataset:{task}")
    total = sum(sizes)
    tiers = sorted(ranges)
    split_names = ["train", "val", "test"]

    # near-uniform tier quota within each split
    split_quota = {}
    for name, n in zip(split_names, sizes):
        q = {t: n // len(tiers) for t in tiers}
        for i in range(n - sum(q.values())):
            q[tiers[i % len(tiers)]] += 1
        split_quota[name] = q

    ds = Dataset(task=task, seed=seed)
    for tier in tiers:
        lo, hi = ranges[tier]
        tier_total = sum(split_quota[s][tier] for s in split_names)
        pool = _distinct_payloads(task, list(range(lo, hi + 1)), tier_total, rng)
        if not allow_duplicates and len(pool) < tier_total:
            raise InfeasibleDatasetError(
                f"tier {tier} needs {tier_total} examples but only "
                f"{len(pool)} distinct inputs exist")
        # partition the distinct pool across splits (largest remainder),
        # guaranteeing a nonempty pool for every split that needs one
        shares = _partition_pool(len(pool),
                                 [split_quota[s][tier] for s in split_names])
        offset = 0
        for name, share in zip(split_names, shares):
            own = pool[offset:offset + share]
            offset += share
            need = split_quota[name][tier]
            if need == 0:
                continue
            if not own:
                raise InfeasibleDatasetError(
                    f"split {name}, tier {tier}: no distinct inputs left")
            for k in range(need):
                getattr(ds, name).append(
                    _FROM_PAYLOAD[task](own[k % len(own)], tier_ranges))

    # interleave tiers inside each split so any contiguous slice stays
    # near-uniform; order within a tier is already seeded-random
    for name in split_names:
        bucket = getattr(ds, name)
        by_tier = {t: [e for e in bucket if e.tier == t] for t in tiers}
        merged, i = [], 0
        while len(merged) < len(bucket):
            t = tiers[i % len(tiers)]
            i += 1
            if by_tier[t]:
                merged.append(by_tier[t].pop(0))
        bucket[:] = merged
    return ds


def _partition_pool(pool_size: int, quotas: list[int]) -> list[int]:
    """Split pool_size distinct items across splits proportionally to their
    quotas, never exceeding a quota, at least one item per nonzero quota."""
    total = sum(quotas)
    if total == 0:
        return [0] * len(quotas)
    raw = [pool_size * q / total for q in quotas]
    shares = [min(int(r), q) for r, q in zip(raw, quotas)]
    remainders = sorted(range(len(quotas)),
                        key=lambda i: raw[i] - int(raw[i]), reverse=True)
    left = pool_size - sum(shares)
    for i in remainders:
        if left <= 0:
            break
        if shares[i] < quotas[i]:
            shares[i] += 1
            left -= 1
    # every nonempty split must own at least one distinct input
    for i, q in enumerate(quotas):
        if q > 0 and shares[i] == 0:
            donor = max(range(len(shares)), key=lambda j: shares[j])
            if shares[donor] <= 1:
                raise InfeasibleDatasetError(
                    "not enough distinct inputs to keep splits disjoint")
            shares[donor] -= 1
            shares[i] += 1
    return shares


def halt_labels(example: Example) -> np.ndarray:
    """Binary halt supervision: 1 at and after the optimal stop."""
    n = len(example.tokens)
    labels = np.zeros(n, dtype=np.int8)
    labels[example.optimal_stop:] = 1
    return labels


def save_dataset(dataset: Dataset, out_dir) -> None:
    """One TSV per split: task, tier, prompt text, trace text (HALT
    implicit), optimal stop index. Plus a sidecar meta.json with the seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, examples in dataset.splits().items():
        lines = []
        for ex in examples:
            lines.append(f"{ex.task}\t{ex.tier}\t{ex.prompt_text}\t"
                         f"{ex.trace_text}\t{ex.optimal_stop}\n")
        (out_dir / f"{dataset.task}.{name}.tsv").write_text(
            "".join(lines), encoding="utf-8")
    meta = f'{{"task": "{dataset.task}", "seed": {dataset.seed}}}\n'
    (out_dir / f"{dataset.task}.meta.json").write_text(meta, encoding="utf-8")


def load_dataset(out_dir, task: str) -> Dataset:
    import json

    out_dir = Path(out_dir)
    meta = json.loads((out_dir / f"{task}.meta.json").read_text())
    ds = Dataset(task=task, seed=meta["seed"])
    for name in ("train", "val", "test"):
        bucket = getattr(ds, name)
        path = out_dir / f"{task}.{name}.tsv"
        for line in path.read_text(encoding="utf-8").splitlines():
            task_f, tier, prompt_text, trace_text, stop = line.split("\t")
            prompt = tuple(VOCAB.tokenize(prompt_text))
            trace = tuple(VOCAB.tokenize(trace_text)) + (Vocabulary.HALT,)
            answer = trace_text.rsplit(":", 1)[1]
            bucket.append(Example(
                prompt=prompt, trace=trace, answer=answer,
                optimal_stop=int(stop), tier=tier, task=task_f,
                payload=prompt_text[1:-1]))
    return ds


def ood_parity_examples(length: int, n: int, seed: int = 0) -> list[Example]:
    """Held-out-length parity instances (9-10 bits) for OOD evaluation."""
    if length not in (9, 10):
        raise ValueError("OOD parity lengths are 9 and 10 only")
    rng = split_rng(seed, f"ood:parity:{length}")
    seen, out = set(), []
    while len(out) < n:
        ex = gen_parity(length, rng)
        if ex.payload in seen:
            continue
        seen.add(ex.payload)
        out.append(ex)
    return out
