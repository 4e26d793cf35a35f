"""Desk-scale autoregressive encoder-decoder with attention.

``forward`` exposes the per-step conditional distributions
log p(y_t | y_<t, x) under teacher forcing: the caller passes the
reference (or any candidate continuation) as ``target_prefix`` and the
decoder input is the bos-shifted copy, so row t depends only on the
source and on target_prefix[0..t).

Layers are pre-normalized (layer norm before each sublayer, plus a final
norm on both stacks), which keeps tiny models stable under warmup.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import BOS_ID, PAD_ID
from .errors import DomainError, ParseError, ValidationError
from .tensor import DropoutStream, Tape, Tensor

CHECKPOINT_FORMAT = "utilseq-checkpoint"
CHECKPOINT_VERSION = 1
ATTENTION_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 1
    dropout_rate: float = 0.3
    share_embeddings: bool = False
    max_positions: int = 64

    def validate(self):
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.max_positions) <= 0:
            raise ValidationError("model dimensions must be positive")
        if self.n_encoder_layers <= 0 or self.n_decoder_layers <= 0 or self.n_heads <= 0:
            raise ValidationError("layer and head counts must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValidationError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must be in [0, 1)")


def _attention_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.wq", f"{prefix}.wk", f"{prefix}.wv", f"{prefix}.wo"]


def _ln_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.gain", f"{prefix}.bias"]


def _ff_param_names(prefix: str) -> list[str]:
    return [f"{prefix}.w1", f"{prefix}.b1", f"{prefix}.w2", f"{prefix}.b2"]


def param_names(config: ModelConfig) -> list[str]:
    """Parameter names in their declared (checkpoint) order."""
    names = ["src_embed"]
    if not config.share_embeddings:
        names.append("tgt_embed")
    names += ["src_pos", "tgt_pos"]
    for i in range(config.n_encoder_layers):
        names += _ln_param_names(f"enc{i}.ln1")
        names += _attention_param_names(f"enc{i}.attn")
        names += _ln_param_names(f"enc{i}.ln2")
        names += _ff_param_names(f"enc{i}.ff")
    names += _ln_param_names("enc.lnf")
    for i in range(config.n_decoder_layers):
        names += _ln_param_names(f"dec{i}.ln1")
        names += _attention_param_names(f"dec{i}.self")
        names += _ln_param_names(f"dec{i}.ln2")
        names += _attention_param_names(f"dec{i}.cross")
        names += _ln_param_names(f"dec{i}.ln3")
        names += _ff_param_names(f"dec{i}.ff")
    names += _ln_param_names("dec.lnf")
    names += ["out.proj", "out.bias"]
    return names


def _param_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    e, h, v, p = config.embed_dim, config.hidden_dim, config.vocab_size, config.max_positions
    if name in ("src_embed", "tgt_embed"):
        return (v, e)
    if name in ("src_pos", "tgt_pos"):
        return (p, e)
    if name.endswith((".gain", ".bias")) and not name.startswith("out"):
        return (e,)
    if name.endswith((".wq", ".wk", ".wv", ".wo")):
        return (e, e)
    if name.endswith(".w1"):
        return (e, h)
    if name.endswith(".b1"):
        return (h,)
    if name.endswith(".w2"):
        return (h, e)
    if name.endswith(".b2"):
        return (e,)
    if name == "out.proj":
        return (e, v)
    if name == "out.bias":
        return (v,)
    raise KeyError(name)


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Parameters in declared order; gains start at one, biases at zero."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name in param_names(config):
        shape = _param_shape(name, config)
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def bind_params(tape: Tape | None, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays as tape leaves (or plain tensors when tape is None)."""
    if tape is None:
        return {name: Tensor(arr) for name, arr in params.items()}
    return {name: tape.leaf(arr) for name, arr in params.items()}


def _as_bound(params) -> dict[str, Tensor]:
    sample = next(iter(params.values()))
    if isinstance(sample, Tensor):
        return params
    return bind_params(None, params)


def _attention(
    q_in: Tensor,
    kv_in: Tensor,
    bound: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None,
) -> Tensor:
    q = T.matmul(q_in, bound[f"{prefix}.wq"])
    k = T.matmul(kv_in, bound[f"{prefix}.wk"])
    v = T.matmul(kv_in, bound[f"{prefix}.wv"])
    embed_dim = q.shape[1]
    head_dim = embed_dim // n_heads
    scale = 1.0 / math.sqrt(head_dim)
    heads = []
    for h in range(n_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        qh = T.slice2d(q, slice(None), cols)
        kh = T.slice2d(k, slice(None), cols)
        vh = T.slice2d(v, slice(None), cols)
        scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
        if mask is not None:
            scores = T.add(scores, Tensor(mask))
        heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return T.matmul(merged, bound[f"{prefix}.wo"])


def _feed_forward(x: Tensor, bound: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = T.relu(T.add(T.matmul(x, bound[f"{prefix}.w1"]), bound[f"{prefix}.b1"]))
    return T.add(T.matmul(hidden, bound[f"{prefix}.w2"]), bound[f"{prefix}.b2"])


def _ln(x: Tensor, bound: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, bound[f"{prefix}.gain"], bound[f"{prefix}.bias"])


def _causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = ATTENTION_MASK_VALUE
    return mask


def forward(
    params,
    config: ModelConfig,
    source: Sequence[int],
    target_prefix: Sequence[int],
    mode: str = "eval",
    dropout_stream: DropoutStream | None = None,
) -> Tensor:
    """Per-step log-probability rows: row t is log p(. | target_prefix[:t], source)."""
    if mode not in ("train", "eval"):
        raise DomainError(f"unknown mode {mode!r}")
    if not source or not target_prefix:
        raise DomainError("source and target_prefix must be nonempty")
    src = list(source)
    tgt = list(target_prefix)
    if max(max(src), max(tgt)) >= config.vocab_size or min(min(src), min(tgt)) < 0:
        raise DomainError("token id out of range for the model vocabulary")
    if len(src) > config.max_positions or len(tgt) > config.max_positions:
        raise DomainError("sequence exceeds max_positions")
    bound = _as_bound(params)
    training = mode == "train"
    rate = config.dropout_rate

    def drop(x: Tensor) -> Tensor:
        return T.dropout(x, rate, dropout_stream, training)

    src_embed = bound["src_embed"]
    tgt_embed = src_embed if config.share_embeddings else bound["tgt_embed"]

    x = T.add(
        T.embedding_lookup(src_embed, src),
        T.embedding_lookup(bound["src_pos"], list(range(len(src)))),
    )
    x = drop(x)
    for i in range(config.n_encoder_layers):
        normed = _ln(x, bound, f"enc{i}.ln1")
        x = T.add(x, drop(_attention(normed, normed, bound, f"enc{i}.attn", config.n_heads, None)))
        ff = _feed_forward(_ln(x, bound, f"enc{i}.ln2"), bound, f"enc{i}.ff")
        x = T.add(x, drop(ff))
    enc_out = _ln(x, bound, "enc.lnf")

    dec_in = [BOS_ID] + tgt[:-1]
    z = T.add(
        T.embedding_lookup(tgt_embed, dec_in),
        T.embedding_lookup(bound["tgt_pos"], list(range(len(dec_in)))),
    )
    z = drop(z)
    causal = _causal_mask(len(dec_in))
    for i in range(config.n_decoder_layers):
        normed = _ln(z, bound, f"dec{i}.ln1")
        z = T.add(z, drop(_attention(normed, normed, bound, f"dec{i}.self", config.n_heads, causal)))
        z = T.add(
            z,
            drop(
                _attention(
                    _ln(z, bound, f"dec{i}.ln2"), enc_out, bound, f"dec{i}.cross", config.n_heads, None
                )
            ),
        )
        z = T.add(z, drop(_feed_forward(_ln(z, bound, f"dec{i}.ln3"), bound, f"dec{i}.ff")))
    z = _ln(z, bound, "dec.lnf")
    logits = T.add(T.matmul(z, bound["out.proj"]), bound["out.bias"])
    return T.log_softmax(logits, axis=-1)


def next_token_logprobs(
    params, config: ModelConfig, source: Sequence[int], prefix: Sequence[int]
) -> np.ndarray:
    """Distribution over the next token after ``prefix`` (eval mode, value only)."""
    rows = forward(params, config, source, list(prefix) + [PAD_ID], mode="eval")
    return rows.data[len(prefix)]


def nll_loss(log_probs: Tensor, reference: Sequence[int], label_smoothing: float = 0.0) -> Tensor:
    """Sequence negative log-likelihood, summed over steps.

    With smoothing s each step contributes
    -[(1 - s) * log p(y_t) + s * mean_v log p(v)].
    """
    if not 0.0 <= label_smoothing < 1.0:
        raise DomainError("label_smoothing must be in [0, 1)")
    ref = list(reference)
    if log_probs.ndim != 2 or len(ref) != log_probs.shape[0]:
        raise DomainError("reference length must match the number of rows")
    picked = T.sum_all(T.gather_cols(log_probs, ref))
    if label_smoothing == 0.0:
        return T.neg(picked)
    smooth = T.sum_all(T.mean_axis(log_probs, axis=1))
    return T.neg(
        T.add(T.mul(picked, 1.0 - label_smoothing), T.mul(smooth, label_smoothing))
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, config: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    """Versioned header plus little-endian float64 blobs in declared order."""
    names = param_names(config)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "params": [[name, list(params[name].shape)] for name in names],
    }
    with Path(path).open("wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            handle.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    with path.open("rb") as handle:
        header_line = handle.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError("unreadable checkpoint header", str(path)) from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ParseError("not a checkpoint file", str(path))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {header.get('version')!r}", str(path))
        config = ModelConfig(**header["config"])
        params: dict[str, np.ndarray] = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            blob = handle.read(count * 8)
            if len(blob) != count * 8:
                raise ParseError(f"truncated parameter blob for {name!r}", str(path))
            params[name] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    expected = param_names(config)
    if list(params) != expected:
        raise ParseError("checkpoint parameters do not match the declared order", str(path))
    return config, params
