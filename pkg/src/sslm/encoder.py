"""Bidirectional transformer encoder with an MLM head and pooler.

Post-layer-norm blocks (attention -> add&norm -> FFN -> add&norm),
learned absolute position embeddings, GELU feed-forward. The MLM
prediction head is tied to the token embedding table by default.
Parameters live as named float64 arrays; checkpoints persist them with
the embedded config and training lineage.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SLMW"
CHECKPOINT_VERSION = 1

NEG_INF_BIAS = -1e9


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class EncoderConfig:
    n_layers: int
    hidden_size: int
    n_heads: int
    ff_size: int
    vocab_size: int
    max_positions: int = 512
    dropout: float = 0.0
    tie_mlm_weights: bool = True

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.max_positions < 3:
            raise ValueError("max_positions must be at least 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_size(self):
        return self.hidden_size // self.n_heads


@dataclass
class Checkpoint:
    config: EncoderConfig
    parameters: dict[str, np.ndarray]
    meta: dict = field(default_factory=lambda: {"step": 0, "epoch": 0, "source": ""})
    extra: dict = field(default_factory=dict)


def parameter_shapes(config):
    """All encoder parameter names with their shapes, in a fixed order."""
    h, f, v = config.hidden_size, config.ff_size, config.vocab_size
    shapes = {
        "embeddings.token": (v, h),
        "embeddings.position": (config.max_positions, h),
        "embeddings.segment": (2, h),
        "embeddings.norm.gain": (h,),
        "embeddings.norm.bias": (h,),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}.weight"] = (h, h)
            shapes[p + f"attn.{proj}.bias"] = (h,)
        shapes[p + "attn.norm.gain"] = (h,)
        shapes[p + "attn.norm.bias"] = (h,)
        shapes[p + "ff.in.weight"] = (h, f)
        shapes[p + "ff.in.bias"] = (f,)
        shapes[p + "ff.out.weight"] = (f, h)
        shapes[p + "ff.out.bias"] = (h,)
        shapes[p + "ff.norm.gain"] = (h,)
        shapes[p + "ff.norm.bias"] = (h,)
    shapes["mlm.transform.weight"] = (h, h)
    shapes["mlm.transform.bias"] = (h,)
    shapes["mlm.norm.gain"] = (h,)
    shapes["mlm.norm.bias"] = (h,)
    if not config.tie_mlm_weights:
        shapes["mlm.output.weight"] = (h, v)
    shapes["mlm.output.bias"] = (v,)
    shapes["pooler.weight"] = (h, h)
    shapes["pooler.bias"] = (h,)
    return shapes


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until within ``bound`` standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out


def init_parameters(config, seed=0):
    """Fresh parameters: truncated-normal weights, unit norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm.gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            params[name] = truncated_normal(rng, shape)
    return params


def parameters_to_tensors(params, requires_grad=True):
    return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in params.items()}


def tensors_to_arrays(tensors):
    return {name: t.data.copy() for name, t in tensors.items()}


def _linear(x, params, prefix):
    return ad.add(ad.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def forward(params, config, ids, attention_mask, segment_ids, dropout_rate=0.0, rng=None):
    """Run the encoder; returns hidden states [batch, positions, hidden].

    ``params`` maps names to Tensors. PAD key positions receive exactly
    zero attention weight, so padded tail content never influences the
    attended positions.
    """
    ids = np.asarray(ids, dtype=np.int64)
    attention_mask = np.asarray(attention_mask, dtype=np.float64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids, attention_mask, segment_ids = ids[None], attention_mask[None], segment_ids[None]
    batch, positions = ids.shape
    if positions > config.max_positions:
        raise ValueError(f"sequence length {positions} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")

    tok = ad.embedding(params["embeddings.token"], ids)
    pos = ad.embedding(params["embeddings.position"], np.arange(positions))
    seg = ad.embedding(params["embeddings.segment"], segment_ids)
    x = ad.add(ad.add(tok, pos), seg)
    x = ad.layer_norm(x, params["embeddings.norm.gain"], params["embeddings.norm.bias"])
    if dropout_rate:
        x = ad.dropout(x, dropout_rate, rng)

    # additive bias: 0 at attendable keys, -1e9 at pad keys
    key_bias = Tensor((1.0 - attention_mask)[:, None, None, :] * NEG_INF_BIAS)
    n_heads, head = config.n_heads, config.head_size
    inv_sqrt = 1.0 / math.sqrt(head)

    for i in range(config.n_layers):
        p = f"layer{i}."

        def split_heads(t):
            t = ad.reshape(t, (batch, positions, n_heads, head))
            return ad.transpose(t, (0, 2, 1, 3))

        q = split_heads(_linear(x, params, p + "attn.q"))
        k = split_heads(_linear(x, params, p + "attn.k"))
        v = split_heads(_linear(x, params, p + "attn.v"))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        scores = ad.add(scores, key_bias)
        weights = ad.softmax(scores, axis=-1)
        if dropout_rate:
            weights = ad.dropout(weights, dropout_rate, rng)
        ctx = ad.matmul(weights, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, positions, config.hidden_size))
        attn_out = _linear(ctx, params, p + "attn.out")
        if dropout_rate:
            attn_out = ad.dropout(attn_out, dropout_rate, rng)
        x = ad.layer_norm(ad.add(x, attn_out), params[p + "attn.norm.gain"], params[p + "attn.norm.bias"])

        ff = _linear(ad.gelu(_linear(x, params, p + "ff.in")), params, p + "ff.out")
        if dropout_rate:
            ff = ad.dropout(ff, dropout_rate, rng)
        x = ad.layer_norm(ad.add(x, ff), params[p + "ff.norm.gain"], params[p + "ff.norm.bias"])
    return x


def mlm_logits(params, config, hidden):
    """Per-position unnormalized vocabulary scores [batch, positions, vocab]."""
    h = ad.gelu(_linear(hidden, params, "mlm.transform"))
    h = ad.layer_norm(h, params["mlm.norm.gain"], params["mlm.norm.bias"])
    if config.tie_mlm_weights:
        proj = ad.transpose(params["embeddings.token"], (1, 0))
    else:
        proj = params["mlm.output.weight"]
    return ad.add(ad.matmul(h, proj), params["mlm.output.bias"])


def pooled_output(params, hidden):
    """Tanh-activated dense layer over the first-position (CLS) vector."""
    first = ad.select_position(hidden, 0)
    return ad.tanh(_linear(first, params, "pooler"))


# -- persistence --------------------------------------------------------


def save_checkpoint(ckpt, path):
    """Binary layout: magic, version, JSON header, then raw float64 tensors."""
    names = sorted(ckpt.parameters)
    header = {
        "config": asdict(ckpt.config),
        "meta": ckpt.meta,
        "extra": ckpt.extra,
        "tensors": [[name, list(ckpt.parameters[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            arr = np.ascontiguousarray(ckpt.parameters[name], dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise CheckpointTruncatedError("file shorter than the fixed header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise CheckpointTruncatedError("header extends past end of file")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    config = EncoderConfig(**header["config"])

    params = {}
    offset = 12 + header_len
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointTruncatedError(f"tensor {name} extends past end of file")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError("trailing bytes after final tensor")

    expected = parameter_shapes(config)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointShapeError(f"missing encoder tensors: {sorted(missing)[:3]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(f"tensor {name} has shape {params[name].shape}, config implies {shape}")
    return Checkpoint(config=config, parameters=params, meta=header["meta"], extra=header["extra"])
