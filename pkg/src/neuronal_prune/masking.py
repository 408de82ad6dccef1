"""Saliency scores, per-group top-k binarization, and mask files.

Kept count for a comparison group of ``n`` weights at sparsity ``s`` is
``floor((1 - s) * n + 0.5)`` (round half up).  Within a group the highest
scores are kept; equal scores favour the smaller row-major index.

Mask directory layout::

    mask_manifest.json  {"version": 1, "bit_order": "little",
                         "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
    mask.bin            per tensor: row-major bits packed LSB-first
                        (numpy ``packbits(bitorder="little")``), byte-padded
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import LayerId, capture_input_norms, layer_ids
from .exceptions import ManifestError, ShapeError, StorageError, TruncationError, ValidationError

MASK_MANIFEST = "mask_manifest.json"
MASK_BLOB = "mask.bin"
SCORERS = ("magnitude", "wanda")
GROUPS = ("layer", "row")


@dataclass(frozen=True, eq=False)
class SaliencyScores:
    layers: dict
    scorer_tag: str

    def __post_init__(self):
        if self.scorer_tag not in SCORERS:
            raise ValidationError(f"unknown scorer {self.scorer_tag!r}")


@dataclass(frozen=True, eq=False)
class SparsityMask:
    """Boolean keep-mask per prunable layer (True = keep)."""

    layers: dict

    def __post_init__(self):
        for lid, m in self.layers.items():
            if m.dtype != np.bool_:
                raise ValidationError(f"mask for {lid} must be boolean")

    @classmethod
    def ones(cls, model):
        return cls(
            {lid: np.ones(model.dims.layer_shape(lid.name), dtype=bool) for lid in layer_ids(model.dims.n_blocks)}
        )

    def equals(self, other):
        return sorted(self.layers) == sorted(other.layers) and all(
            np.array_equal(self.layers[k], other.layers[k]) for k in self.layers
        )

    def apply(self, model):
        """The sparse model ``D * M`` as a new bundle."""
        return model.replace_layers(
            {(lid.block, lid.name): model.blocks[lid.block][lid.name] * m for lid, m in self.layers.items()}
        )


def score_magnitude(model):
    return SaliencyScores(
        {
            lid: np.abs(model.blocks[lid.block][lid.name]).astype(np.float64)
            for lid in layer_ids(model.dims.n_blocks)
        },
        "magnitude",
    )


def wanda_scores_from_norms(model, norms):
    """|W_ij| * n_j for precomputed input-feature norms ``norms[lid]``."""
    return SaliencyScores(
        {
            lid: np.abs(model.blocks[lid.block][lid.name]).astype(np.float64) * norms[lid][None, :]
            for lid in layer_ids(model.dims.n_blocks)
        },
        "wanda",
    )


def score_wanda(model, calib, seq_len):
    if len(calib) == 0:
        raise ValidationError("wanda scoring needs a non-empty calibration stream")
    return wanda_scores_from_norms(model, capture_input_norms(model, calib, seq_len))


def score_model(model, scorer, calib=None, seq_len=None):
    if scorer == "magnitude":
        return score_magnitude(model)
    if scorer == "wanda":
        if calib is None:
            raise ValidationError("wanda scoring requires calibration tokens")
        return score_wanda(model, calib, seq_len)
    raise ValidationError(f"unknown scorer {scorer!r}")


# -- top-k -------------------------------------------------------------------


def kept_count(sparsity, n):
    """Round-half-up of ``(1 - sparsity) * n``, clipped to ``[0, n]``."""
    keep = np.floor((1.0 - np.asarray(sparsity, dtype=np.float64)) * n + 0.5)
    return np.clip(keep, 0, n).astype(np.int64)


def score_ranks(scores, group):
    """Rank of each entry within its group (0 = kept first)."""
    if not np.all(np.isfinite(scores)):
        raise ValidationError("saliency scores must be finite")
    if group == "layer":
        order = np.argsort(-scores, axis=None, kind="stable")
        ranks = np.empty(scores.size, dtype=np.int64)
        ranks[order] = np.arange(scores.size)
        return ranks.reshape(scores.shape)
    if group == "row":
        order = np.argsort(-scores, axis=1, kind="stable")
        ranks = np.empty(scores.shape, dtype=np.int64)
        np.put_along_axis(ranks, order, np.arange(scores.shape[1])[None, :], axis=1)
        return ranks
    raise ValidationError(f"unknown comparison group {group!r}")


def layer_sparsity_target(plan, lid, group):
    """Scalar (layer group) or per-row vector (row group) sparsity for ``lid``."""
    if group == "row" and plan.per_row is not None and lid in plan.per_row:
        return np.asarray(plan.per_row[lid], dtype=np.float64)
    return float(plan.per_block[lid.block])


def mask_from_ranks(ranks, sparsity, group):
    if group == "layer":
        return ranks < kept_count(sparsity, ranks.size)
    rows, cols = ranks.shape
    keep = kept_count(np.broadcast_to(np.asarray(sparsity, dtype=np.float64), (rows,)), cols)
    return ranks < keep[:, None]


class RankedScores:
    """Scores with group ranks cached, so repeated masking is a comparison."""

    def __init__(self, scores, group="row"):
        if group not in GROUPS:
            raise ValidationError(f"unknown comparison group {group!r}")
        self.scores = scores
        self.group = group
        self.ranks = {lid: score_ranks(s, group) for lid, s in scores.layers.items()}

    def mask(self, plan):
        _check_plan(plan)
        return SparsityMask(
            {
                lid: mask_from_ranks(r, layer_sparsity_target(plan, lid, self.group), self.group)
                for lid, r in self.ranks.items()
            }
        )


def _check_plan(plan):
    values = [np.asarray(plan.per_block, dtype=np.float64)]
    if plan.per_row is not None:
        values.extend(np.asarray(v, dtype=np.float64) for v in plan.per_row.values())
    for v in values:
        if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValidationError("plan sparsities must lie in [0, 1]")


def topk_mask(scores, plan, group):
    """Binarize ``scores`` keeping the top ``round((1-s)*n)`` of every comparison group."""
    return RankedScores(scores, group).mask(plan)


# -- accounting --------------------------------------------------------------


@dataclass(frozen=True)
class SparsityBreakdown:
    global_sparsity: float
    per_block: tuple
    per_layer: dict

    def to_dict(self):
        return {
            "global": self.global_sparsity,
            "per_block": list(self.per_block),
            "per_layer": {str(k): v for k, v in sorted(self.per_layer.items())},
        }


def achieved_sparsity(mask):
    zeros = {lid: int(m.size - np.count_nonzero(m)) for lid, m in mask.layers.items()}
    sizes = {lid: int(m.size) for lid, m in mask.layers.items()}
    per_layer = {lid: zeros[lid] / sizes[lid] for lid in sorted(mask.layers)}
    blocks = sorted({lid.block for lid in mask.layers})
    per_block = tuple(
        sum(zeros[l] for l in zeros if l.block == b) / sum(sizes[l] for l in sizes if l.block == b)
        for b in blocks
    )
    return SparsityBreakdown(sum(zeros.values()) / sum(sizes.values()), per_block, per_layer)


# -- mask I/O ----------------------------------------------------------------


def write_mask(mask, path):
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for lid in sorted(mask.layers):
        m = mask.layers[lid]
        packed = np.packbits(m.ravel(order="C"), bitorder="little")
        entries.append({"name": str(lid), "shape": list(m.shape), "offset": offset, "nbytes": int(packed.size)})
        chunks.append(packed.tobytes())
        offset += packed.size
    manifest = {"version": 1, "bit_order": "little", "tensors": entries}
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / MASK_BLOB).write_bytes(b"".join(chunks))
        with open(path / MASK_MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write mask ({exc.strerror or exc})", path) from exc


def read_mask(path):
    path = Path(path)
    try:
        with open(path / MASK_MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = (path / MASK_BLOB).read_bytes()
    except json.JSONDecodeError as exc:
        raise ManifestError(f"mask manifest is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise StorageError(f"cannot read mask ({exc.strerror or exc})", path) from exc
    if manifest.get("version") != 1 or manifest.get("bit_order") != "little":
        raise ManifestError("unsupported mask manifest")
    layers = {}
    cursor = 0
    try:
        for entry in manifest["tensors"]:
            lid = LayerId.parse(entry["name"])
            shape = tuple(entry["shape"])
            n = math.prod(shape)
            nbytes = (n + 7) // 8
            if entry["offset"] != cursor or entry["nbytes"] != nbytes:
                raise ShapeError(f"mask entry {lid} has inconsistent offset/size")
            if cursor + nbytes > len(blob):
                raise TruncationError(f"mask.bin truncated inside {lid}", tensor=str(lid))
            bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, cursor), count=n, bitorder="little")
            layers[lid] = bits.astype(bool).reshape(shape)
            cursor += nbytes
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"mask manifest missing field: {exc}") from exc
    if cursor != len(blob):
        raise TruncationError(f"mask.bin has {len(blob) - cursor} trailing bytes")
    return SparsityMask(layers)
