"""Forward pass of the pre-norm decoder and per-layer activation capture.

Block structure (RMS norm without gain inside blocks, no positional
encoding; the causal mask alone breaks permutation symmetry)::

    h = rms(x);  x = x + attn_o(causal_mha(attn_q h, attn_k h, attn_v h))
    h = rms(x);  x = x + mlp_fc2(gelu(mlp_fc1 h))
    logits = lm_head(rms(x) * final_norm_gain)

A mask, when given, is applied as ``W * M`` before the matmul, so running
masked is bit-identical to running a model whose weights were materialized
as ``W * M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import total_ordering

import numpy as np

from .exceptions import ShapeError, ValidationError
from .model_store import LAYER_NAMES, TokenStream

RMS_EPS = 1e-5
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


@total_ordering
@dataclass(frozen=True)
class LayerId:
    block: int
    name: str

    def __post_init__(self):
        if self.name not in LAYER_NAMES:
            raise ValidationError(f"unknown layer name {self.name!r}")

    def _key(self):
        return (self.block, LAYER_NAMES.index(self.name))

    def __lt__(self, other):
        return self._key() < other._key()

    def __str__(self):
        return f"blocks.{self.block}.{self.name}"

    @classmethod
    def parse(cls, text):
        try:
            prefix, block, name = text.split(".")
            if prefix != "blocks":
                raise ValueError(text)
            return cls(int(block), name)
        except ValueError as exc:
            raise ValidationError(f"bad layer id {text!r}") from exc


def layer_ids(n_blocks):
    return [LayerId(b, n) for b in range(n_blocks) for n in LAYER_NAMES]


@dataclass(frozen=True, eq=False)
class ActivationProfile:
    """Per-layer vector of aggregated output activations (one entry per row of W)."""

    layers: dict
    normalized: bool = False
    degenerate: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for lid, vec in self.layers.items():
            if vec.ndim != 1 or not np.all(np.isfinite(vec)) or np.any(vec < 0):
                raise ValidationError(f"profile for {lid} must be a finite non-negative vector")

    def __getitem__(self, lid):
        return self.layers[lid]

    def scaled(self, factors):
        """Copy with each layer multiplied by ``factors[lid]`` (unnormalized result)."""
        return ActivationProfile({lid: v * factors[lid] for lid, v in self.layers.items()})


def normalize_profile(profile):
    """Scale each layer to sum to one; all-zero layers become uniform and are flagged."""
    out = {}
    degenerate = set()
    for lid, vec in profile.layers.items():
        total = vec.sum()
        if total > 0:
            out[lid] = vec / total
        else:
            out[lid] = np.full(vec.shape, 1.0 / vec.size)
            degenerate.add(lid)
    return ActivationProfile(out, normalized=True, degenerate=frozenset(degenerate))


# -- forward pass ------------------------------------------------------------


def _rms(x):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(RMS_EPS))


def _gelu(x):
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(_GELU_C * (x + np.float32(0.044715) * x * x * x)))


def _effective_weights(model, mask):
    if mask is None:
        return model.blocks
    check_mask_shapes(model, mask)
    return tuple(
        {n: block[n] * mask.layers[LayerId(b, n)] for n in LAYER_NAMES}
        for b, block in enumerate(model.blocks)
    )


def check_mask_shapes(model, mask):
    expected = layer_ids(model.dims.n_blocks)
    if sorted(mask.layers) != expected:
        raise ShapeError("mask layer set does not match the model's prunable layers")
    for lid in expected:
        shape = model.dims.layer_shape(lid.name)
        if mask.layers[lid].shape != shape:
            raise ShapeError(f"mask for {lid} has shape {mask.layers[lid].shape}, expected {shape}")


class _Recorder:
    """Accumulates |output| sums and squared input sums per layer (float64)."""

    def __init__(self, outputs=True, inputs=False):
        self.outputs = outputs
        self.inputs = inputs
        self.abs_sum = {}
        self.sq_sum = {}
        self.count = 0

    def record(self, lid, x, y):
        if self.outputs:
            flat = np.abs(y.reshape(-1, y.shape[-1])).astype(np.float64).sum(axis=0)
            self.abs_sum[lid] = self.abs_sum.get(lid, 0.0) + flat
        if self.inputs:
            xf = x.reshape(-1, x.shape[-1]).astype(np.float64)
            self.sq_sum[lid] = self.sq_sum.get(lid, 0.0) + (xf * xf).sum(axis=0)


def _linear(x, w, lid, rec):
    y = x @ w.T
    if rec is not None:
        rec.record(lid, x, y)
    return y


def _attention(q, k, v, n_heads):
    bsz, seq, d = q.shape
    hd = d // n_heads

    def split(t):
        return t.reshape(bsz, seq, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * np.float32(1.0 / np.sqrt(hd))
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(future, np.float32(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    out = p @ vh
    return out.transpose(0, 2, 1, 3).reshape(bsz, seq, d)


def _forward_batch(model, blocks, ids, rec=None):
    """Logits for a batch of equal-length windows, shape ``(batch, seq, vocab)``."""
    x = model.embedding[ids]
    n_heads = model.dims.n_heads
    for b, w in enumerate(blocks):
        h = _rms(x)
        q = _linear(h, w["attn_q"], LayerId(b, "attn_q"), rec)
        k = _linear(h, w["attn_k"], LayerId(b, "attn_k"), rec)
        v = _linear(h, w["attn_v"], LayerId(b, "attn_v"), rec)
        a = _attention(q, k, v, n_heads)
        x = x + _linear(a, w["attn_o"], LayerId(b, "attn_o"), rec)
        h = _rms(x)
        f = _linear(h, w["mlp_fc1"], LayerId(b, "mlp_fc1"), rec)
        x = x + _linear(_gelu(f), w["mlp_fc2"], LayerId(b, "mlp_fc2"), rec)
    x = _rms(x) * model.final_norm_gain
    return x @ model.lm_head.T


def _check_tokens(model, tokens, seq_len, min_len=1):
    if not isinstance(tokens, TokenStream):
        raise ValidationError("tokens must be a TokenStream")
    if isinstance(seq_len, bool) or int(seq_len) != seq_len or seq_len < 1:
        raise ValidationError(f"seq_len must be a positive int, got {seq_len!r}")
    if len(tokens) < min_len:
        raise ValidationError(f"need at least {min_len} tokens, got {len(tokens)}")
    if tokens.vocab > model.dims.vocab:
        raise ValidationError(f"token vocab {tokens.vocab} exceeds model vocab {model.dims.vocab}")


def _run_windows(model, mask, windows, rec=None):
    """Forward each window; full-length windows are batched together."""
    blocks = _effective_weights(model, mask)
    outputs = [None] * len(windows)
    by_len = {}
    for i, win in enumerate(windows):
        by_len.setdefault(len(win), []).append(i)
    for length, idx in sorted(by_len.items()):
        batch = np.stack([windows[i] for i in idx])
        logits = _forward_batch(model, blocks, batch, rec)
        for j, i in enumerate(idx):
            outputs[i] = logits[j]
    if rec is not None:
        rec.count = sum(len(w) for w in windows)
    return outputs


def forward_logits(model, mask, tokens, seq_len):
    """Logits for every position, windows of ``seq_len`` stacked: ``(len(tokens), vocab)``."""
    _check_tokens(model, tokens, seq_len, min_len=2)
    return np.concatenate(_run_windows(model, mask, tokens.windows(seq_len)), axis=0)


def capture_profile(model, mask, calib, seq_len):
    """Mean |raw linear output| per output neuron over all calibration positions."""
    _check_tokens(model, calib, seq_len, min_len=2)
    rec = _Recorder(outputs=True)
    _run_windows(model, mask, calib.windows(seq_len), rec)
    return ActivationProfile({lid: rec.abs_sum[lid] / rec.count for lid in layer_ids(model.dims.n_blocks)})


def capture_input_norms(model, calib, seq_len):
    """L2 norm over calibration positions of each input feature, per prunable layer."""
    _check_tokens(model, calib, seq_len, min_len=1)
    rec = _Recorder(outputs=False, inputs=True)
    _run_windows(model, None, calib.windows(seq_len), rec)
    return {lid: np.sqrt(rec.sq_sum[lid]) for lid in layer_ids(model.dims.n_blocks)}


def calibration_subset(tokens, seq_len, n_windows):
    """The first ``n_windows`` windows of ``tokens`` as a new stream."""
    if n_windows < 1:
        raise ValidationError(f"calibration window count must be >= 1, got {n_windows}")
    return TokenStream(tokens.vocab, tokens.ids[: n_windows * seq_len])
