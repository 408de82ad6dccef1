"""Per-block sparsity schedules inside the window ``[s - lam, s + lam]``.

Every schedule produces raw values and then passes them through
:func:`mean_correct`, which shifts (and, if clipping bites, redistributes)
so that the parameter-weighted mean equals the global target exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import LAYER_NAMES, LayerId
from .exceptions import ValidationError

SCHEDULE_TAGS = ("uniform", "linear", "exp", "log", "owl", "neuronal")
EXP_ALPHA = 3.0
LOG_BETA = 9.0

_MEAN_TOL = 1e-9
_STALL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SparsityPlan:
    global_s: float
    lam: float
    per_block: np.ndarray
    per_row: dict | None = None
    schedule_tag: str = "uniform"

    def __post_init__(self):
        if self.schedule_tag not in SCHEDULE_TAGS:
            raise ValidationError(f"unknown schedule {self.schedule_tag!r}")
        if not 0.0 <= self.global_s <= 1.0:
            raise ValidationError(f"global sparsity {self.global_s} outside [0, 1]")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        per_block = np.array(self.per_block, dtype=np.float64)
        if per_block.ndim != 1 or np.any(per_block < 0) or np.any(per_block > 1):
            raise ValidationError("per-block sparsities must be a vector in [0, 1]")
        per_block.setflags(write=False)
        object.__setattr__(self, "per_block", per_block)

    def with_rows(self, per_row, lam):
        return SparsityPlan(self.global_s, lam, self.per_block, per_row, "neuronal")

    def to_dict(self):
        out = {
            "global_s": self.global_s,
            "lambda": self.lam,
            "schedule": self.schedule_tag,
            "per_block": self.per_block.tolist(),
        }
        if self.per_row is not None:
            out["per_row"] = {str(k): np.asarray(v).tolist() for k, v in sorted(self.per_row.items())}
        return out


@dataclass(frozen=True)
class OwlConfig:
    outlier_multiplier: float = 5.0
    lam: float = 0.08

    def __post_init__(self):
        if not self.outlier_multiplier > 1:
            raise ValidationError(f"outlier multiplier must exceed 1, got {self.outlier_multiplier}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")


def _check_fraction(s):
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"sparsity {s} outside [0, 1]")


def _weighted_mean(v, w):
    return float(np.dot(v, w) / w.sum())


def mean_correct(raw, weights, target):
    """Shift ``raw`` so its ``weights``-weighted mean is ``target``, staying in [0, 1].

    After the uniform shift, values are clipped; any residue is spread in
    proportion to each entry's remaining headroom (towards 1 or towards 0),
    which keeps the input's weak ordering.
    """
    v = np.asarray(raw, dtype=np.float64).copy()
    w = np.asarray(weights, dtype=np.float64)
    if v.shape != w.shape or np.any(w <= 0):
        raise ValidationError("weights must be positive and match the raw vector")
    _check_fraction(target)
    total = w.sum()
    err = target - _weighted_mean(v, w)
    if abs(err) <= 1e-12 and np.all((v >= 0) & (v <= 1)):
        return v
    v = np.clip(v + err, 0.0, 1.0)
    for _ in range(64):
        err = target - _weighted_mean(v, w)
        if abs(err) < _MEAN_TOL:
            break
        room = 1.0 - v if err > 0 else v
        denom = float(np.dot(w, room))
        if denom <= 0.0:
            break
        t = min(abs(err) * total / denom, 1.0)
        v = v + t * room if err > 0 else v - t * room
        v = np.clip(v, 0.0, 1.0)
    if abs(target - _weighted_mean(v, w)) > _STALL_TOL:
        raise ValidationError(f"cannot reach mean sparsity {target} within [0, 1]")
    return v


def uniform_schedule(s, n_blocks):
    _check_fraction(s)
    return SparsityPlan(s, 0.0, np.full(n_blocks, float(s)), schedule_tag="uniform")


def _window(s, lam, counts, tag, shape):
    _check_fraction(s)
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    counts = np.asarray(counts)
    n = counts.size
    if n < 1:
        raise ValidationError("need at least one block")
    if n == 1:
        raw = np.array([float(s)])
    else:
        t = np.arange(n) / (n - 1)
        raw = s - lam + 2 * lam * shape(t)
    return SparsityPlan(s, lam, mean_correct(raw, counts, s), schedule_tag=tag)


def linear_schedule(s, lam, block_param_counts):
    return _window(s, lam, block_param_counts, "linear", lambda t: t)


def exp_schedule(s, lam, block_param_counts, alpha=EXP_ALPHA):
    return _window(s, lam, block_param_counts, "exp", lambda t: np.expm1(alpha * t) / np.expm1(alpha))


def log_schedule(s, lam, block_param_counts, beta=LOG_BETA):
    return _window(s, lam, block_param_counts, "log", lambda t: np.log1p(beta * t) / np.log1p(beta))


def minmax(values):
    """Min-max scale to [0, 1]; a constant vector maps to all 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def outlier_ratio(values, multiplier):
    values = np.asarray(values, dtype=np.float64)
    return np.count_nonzero(values > multiplier * values.mean()) / values.size


def block_outlier_ratios(dense_profile, multiplier, n_blocks):
    return np.array(
        [
            outlier_ratio(np.concatenate([dense_profile[LayerId(b, n)] for n in LAYER_NAMES]), multiplier)
            for b in range(n_blocks)
        ]
    )


def owl_schedule(dense_profile, cfg, s, block_param_counts):
    """Blocks with more activation outliers get lower sparsity."""
    if dense_profile.normalized:
        raise ValidationError("OWL expects an unnormalized dense profile")
    _check_fraction(s)
    counts = np.asarray(block_param_counts)
    ratios = block_outlier_ratios(dense_profile, cfg.outlier_multiplier, counts.size)
    raw = s + cfg.lam * (1.0 - 2.0 * minmax(ratios))
    return SparsityPlan(s, cfg.lam, mean_correct(raw, counts, s), schedule_tag="owl")


def fixed_schedule(tag, s, lam, block_param_counts, dense_profile=None, owl_multiplier=5.0):
    """Dispatch a fixed-lambda schedule by tag."""
    if tag == "uniform":
        return uniform_schedule(s, len(block_param_counts))
    if tag == "linear":
        return linear_schedule(s, lam, block_param_counts)
    if tag == "exp":
        return exp_schedule(s, lam, block_param_counts)
    if tag == "log":
        return log_schedule(s, lam, block_param_counts)
    if tag == "owl":
        if dense_profile is None:
            raise ValidationError("owl schedule needs a dense activation profile")
        return owl_schedule(dense_profile, OwlConfig(owl_multiplier, lam), s, block_param_counts)
    raise ValidationError(f"unknown fixed schedule {tag!r}")
