"""Matched-capacity sequence models with token and halt heads.

Two architectures share the embedding, head, and feedforward recipe and
differ only in the mixing block: the SSM runs an input-gated diagonal
recurrence over a fixed d_state vector (the proprioception probe target),
the Transformer runs causal multi-head attention with learned absolute
positions. Feedforward widths are chosen so the two parameter counts agree
to within a few percent at any d_model.

All forward math happens on the autodiff graph so the training and
evaluation paths cannot diverge; evaluation simply discards the graph.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .mathcore import split_rng
from .taskgen import Vocabulary

SSM = "ssm"
TRANSFORMER = "transformer"

# softplus(b) = 1 at init so the recurrence step size starts at 1
_DT_BIAS_INIT = math.log(math.e - 1.0)
# softplus(a) = -ln(0.9): decay exp(-delta*softplus(a)) is 0.9 at delta=1
_A_INIT = math.log(math.exp(-math.log(0.9)) - 1.0)
# halt head starts near conf 0.1
_HALT_BIAS_INIT = math.log(0.1 / 0.9)

CONF_EPS = 1e-7


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_state: int = 8
    vocab_size: int = 24
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.arch not in (SSM, TRANSFORMER):
            raise ValueError(f"arch must be '{SSM}' or '{TRANSFORMER}'")
        if min(self.n_layers, self.d_model, self.n_heads, self.d_state,
               self.max_seq_len) < 1:
            raise ValueError("all dimensions must be positive")
        if self.arch == TRANSFORMER and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size != 24:
            raise ValueError("vocab_size is fixed at 24")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        return ModelConfig(**json.loads(text))


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config,
                          {k: v.astype(dtype) for k, v in self.tensors.items()})

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())


@dataclass
class ForwardTrace:
    logits: np.ndarray     # (T, vocab)
    halt_conf: np.ndarray  # (T,), strictly inside (0, 1)
    hidden: np.ndarray     # (T, d_model), pre-head representation
    state: np.ndarray      # (T, d_state) for the SSM, (T, 0) otherwise


@dataclass
class GenerationResult:
    tokens: list           # full sequence, prompt included
    trace: ForwardTrace
    stopped_by: str        # "token" | "conf" | "max_len"
    truncated: bool


def parameter_shapes(config: ModelConfig) -> dict:
    """Name -> shape table; the checkpoint loader validates against this."""
    d, s = config.d_model, config.d_state
    f = 4 * d
    shapes = {"tok_emb": (config.vocab_size, d)}
    if config.arch == TRANSFORMER:
        shapes["pos_emb"] = (config.max_seq_len, d)
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "norm1"] = (d,)
        shapes[p + "norm2"] = (d,)
        if config.arch == SSM:
            shapes[p + "w_dt"] = (d, 1)
            shapes[p + "b_dt"] = (1,)
            shapes[p + "a"] = (s,)
            shapes[p + "w_b"] = (d, s)
            shapes[p + "w_c"] = (d, s)
            shapes[p + "w_o"] = (s, d)
            shapes[p + "d_skip"] = (d,)
            shapes[p + "w_up"] = (d, f)
            shapes[p + "w_gate"] = (d, f)
            shapes[p + "w_down"] = (f, d)
        else:
            shapes[p + "w_q"] = (d, d)
            shapes[p + "w_k"] = (d, d)
            shapes[p + "w_v"] = (d, d)
            shapes[p + "w_ao"] = (d, d)
            shapes[p + "w_up"] = (d, f)
            shapes[p + "w_down"] = (f, d)
    shapes["norm_f"] = (d,)
    shapes["token_head.w"] = (d, config.vocab_size)
    shapes["token_head.b"] = (config.vocab_size,)
    shapes["halt_head.w"] = (d, 1)
    shapes["halt_head.b"] = (1,)
    return shapes


def init_model(config: ModelConfig) -> Parameters:
    """Seed-deterministic init: uniform(+-1/sqrt(fan_in)) matrices, unit
    norms and skip, decay ~0.9 at unit step, halt bias at conf ~0.1."""
    rng = split_rng(config.seed, f"init:{config.arch}")
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        base = name.rsplit(".", 1)[-1]
        if base.startswith("norm") or base == "d_skip":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif base == "a":
            tensors[name] = np.full(shape, _A_INIT, dtype=np.float32)
        elif base == "b_dt":
            tensors[name] = np.full(shape, _DT_BIAS_INIT, dtype=np.float32)
        elif name == "halt_head.b":
            tensors[name] = np.full(shape, _HALT_BIAS_INIT, dtype=np.float32)
        elif name == "token_head.b":
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Parameters(config, tensors)


def _ssm_block(t, x, prefix):
    rn = ad.rmsnorm(x, t[prefix + "norm1"])
    delta = ad.softplus(rn @ t[prefix + "w_dt"] + t[prefix + "b_dt"])
    decay = ad.exp(-(delta * ad.softplus(t[prefix + "a"])))
    inject = delta * (rn @ t[prefix + "w_b"])
    h = ad.scan(decay, inject)
    y = (rn @ t[prefix + "w_c"]) * h
    mix = y @ t[prefix + "w_o"] + t[prefix + "d_skip"] * rn
    x = x + mix
    rn2 = ad.rmsnorm(x, t[prefix + "norm2"])
    up = ad.silu(rn2 @ t[prefix + "w_up"]) * (rn2 @ t[prefix + "w_gate"])
    return x + up @ t[prefix + "w_down"], h


def _attn_block(t, x, prefix, config):
    B, T, d = x.shape
    H = config.n_heads
    dh = d // H
    rn = ad.rmsnorm(x, t[prefix + "norm1"])
    q = (rn @ t[prefix + "w_q"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    k = (rn @ t[prefix + "w_k"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    v = (rn @ t[prefix + "w_v"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / math.sqrt(dh))
    mask = np.triu(np.full((T, T), -1e30, dtype=x.dtype), k=1)
    att = ad.masked_softmax(scores, mask)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d) @ t[prefix + "w_ao"]
    x = x + o
    rn2 = ad.rmsnorm(x, t[prefix + "norm2"])
    return x + ad.silu(rn2 @ t[prefix + "w_up"]) @ t[prefix + "w_down"], None


def build_graph(params: Parameters, tokens: np.ndarray):
    """Run the model over a (B, T) id batch on the autodiff graph.

    Returns (outputs, leaves): outputs maps logits / halt_logits / hidden /
    state to Tensors, leaves maps parameter names to their leaf Tensors so
    the caller can read gradients after backward().
    """
    config = params.config
    B, T = tokens.shape
    if T > config.max_seq_len:
        raise ValueError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id outside vocabulary")
    leaves = {name: ad.Tensor(arr) for name, arr in params.tensors.items()}
    x = ad.embedding(leaves["tok_emb"], tokens)
    if config.arch == TRANSFORMER:
        pos = ad.embedding(leaves["pos_emb"], np.arange(T))
        x = x + pos
    state = None
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        if config.arch == SSM:
            x, state = _ssm_block(leaves, x, prefix)
        else:
            x, _ = _attn_block(leaves, x, prefix, config)
    hidden = ad.rmsnorm(x, leaves["norm_f"])
    logits = hidden @ leaves["token_head.w"] + leaves["token_head.b"]
    halt_logits = (hidden @ leaves["halt_head.w"] + leaves["halt_head.b"]).reshape(B, T)
    outputs = {"logits": logits, "halt_logits": halt_logits,
               "hidden": hidden, "state": state}
    return outputs, leaves


def _conf_from_logits(halt_logits: np.ndarray) -> np.ndarray:
    conf = 1.0 / (1.0 + np.exp(-halt_logits.astype(np.float64)))
    return np.clip(conf, CONF_EPS, 1.0 - CONF_EPS)


def _trace_from_outputs(outputs, row: int, length: int) -> ForwardTrace:
    logits = outputs["logits"].data[row, :length].copy()
    halt = _conf_from_logits(outputs["halt_logits"].data[row, :length])
    hidden = outputs["hidden"].data[row, :length].copy()
    if outputs["state"] is not None:
        state = outputs["state"].data[row, :length].copy()
    else:
        state = np.zeros((length, 0), dtype=np.float32)
    return ForwardTrace(logits=logits, halt_conf=halt, hidden=hidden, state=state)


def pad_batch(seqs, pad_id: int = Vocabulary.PAD):
    """Right-pad id sequences into a (B, T) array plus lengths."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max())
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def forward(params: Parameters, tokens) -> ForwardTrace:
    """Teacher-forced pass over one id sequence."""
    ids = np.asarray(tokens, dtype=np.int64)[None, :]
    outputs, _ = build_graph(params, ids)
    return _trace_from_outputs(outputs, 0, ids.shape[1])


def forward_batch(params: Parameters, seqs, chunk: int = 64):
    """Teacher-forced passes over many sequences, chunked to bound memory."""
    traces = []
    for start in range(0, len(seqs), chunk):
        part = seqs[start:start + chunk]
        ids, lengths = pad_batch([list(s) for s in part])
        outputs, _ = build_graph(params, ids)
        for row, length in enumerate(lengths):
            traces.append(_trace_from_outputs(outputs, row, int(length)))
    return traces


def generate_batch(params: Parameters, prompts, max_new: int = None,
                   halt_policy: str = "token", threshold: float = 0.5,
                   chunk: int = 128):
    """Greedy autoregressive decoding for many prompts at once.

    halt_policy: "token" stops on an emitted HALT; "conf" additionally
    stops once halt confidence crosses the threshold (before generating
    further); "never" runs to the length limit regardless.
    """
    results = [None] * len(prompts)
    for start in range(0, len(prompts), chunk):
        part = [list(p) for p in prompts[start:start + chunk]]
        for offset, res in enumerate(_generate_chunk(
                params, part, max_new, halt_policy, threshold)):
            results[start + offset] = res
    return results


def _generate_chunk(params, seqs, max_new, halt_policy, threshold):
    config = params.config
    if max_new is None:
        max_new = config.max_seq_len
    if not all(seqs):
        raise ValueError("prompts must be nonempty")
    n = len(seqs)
    stopped_by = [""] * n
    produced = [0] * n
    active = set(range(n))
    while active:
        rows = sorted(active)
        ids, lengths = pad_batch([seqs[i] for i in rows])
        outputs, _ = build_graph(params, ids)
        logits = outputs["logits"].data
        conf = _conf_from_logits(outputs["halt_logits"].data)
        for row, i in enumerate(rows):
            tlast = int(lengths[row]) - 1
            if halt_policy == "conf" and conf[row, tlast] >= threshold:
                stopped_by[i] = "conf"
                active.discard(i)
                continue
            if produced[i] >= max_new or len(seqs[i]) >= config.max_seq_len:
                stopped_by[i] = "max_len"
                active.discard(i)
                continue
            nxt = int(np.argmax(logits[row, tlast]))
            seqs[i].append(nxt)
            produced[i] += 1
            if nxt == Vocabulary.HALT and halt_policy != "never":
                stopped_by[i] = "token"
                active.discard(i)
    results = []
    traces = forward_batch(params, seqs)
    for i in range(n):
        results.append(GenerationResult(
            tokens=seqs[i], trace=traces[i], stopped_by=stopped_by[i],
            truncated=stopped_by[i] == "max_len"))
    return results


def generate(params: Parameters, prompt, max_len: int = None,
             halt_policy: str = "token", threshold: float = 0.5) -> GenerationResult:
    """Greedy decoding from a single prompt; see generate_batch."""
    return generate_batch(params, [prompt], max_new=max_len,
                          halt_policy=halt_policy, threshold=threshold)[0]


# -- checkpoint io -----------------------------------------------------------

_MAGIC = b"PPCK"
_VERSION = 1


def save_checkpoint(params: Parameters, path) -> None:
    """Header (magic, version, config json) then length-prefixed named
    float32 little-endian tensors."""
    buf = io.BytesIO()
    cfg = params.config.to_json().encode("utf-8")
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        data = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<Q", data.size))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint: needed {n} bytes for {what} "
            f"at offset {fh.tell() - len(data)}")
    return data


def load_checkpoint(path) -> Parameters:
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != _MAGIC:
            raise CheckpointError("not a checkpoint file")
        version, cfg_len = struct.unpack("<II", _read(fh, 8, "header"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(_read(fh, cfg_len, "config").decode("utf-8"))
        expected = parameter_shapes(config)
        n_tensors, = struct.unpack("<I", _read(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(n_tensors):
            name_len, = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            ndim, = struct.unpack("<B", _read(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, "shape"))
            size, = struct.unpack("<Q", _read(fh, 8, "size"))
            if name not in expected:
                raise CheckpointError(f"unexpected tensor {name!r} for config")
            if tuple(shape) != expected[name] or size != int(np.prod(shape)):
                raise CheckpointError(
                    f"tensor {name!r} has shape {tuple(shape)}, "
                    f"config expects {expected[name]}")
            raw = _read(fh, 4 * size, f"tensor {name!r} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        missing = set(expected) - set(tensors)
        if missing:
            raise CheckpointError(f"missing tensors: {sorted(missing)}")
    return Parameters(config, tensors)
