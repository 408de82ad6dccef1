"""Neuron-alignment driven sparsity allocation (block step, then row step).

The alignment between a dense and a sparse model is

    sum over layers of  || A_dense - A_sparse ||_2 / r

where each ``A`` is the layer's output-activation profile normalized to sum
to one and ``r`` is the layer's output width.  Lower is better.  Both steps
sweep a candidate set of window half-widths and keep the argmin, breaking
ties towards the smaller window.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import calibration_subset, capture_profile, layer_ids, normalize_profile
from .exceptions import StageError, ValidationError
from .masking import RankedScores, SaliencyScores, achieved_sparsity, score_model
from .report import PruneReport
from .schedules import SparsityPlan, linear_schedule, mean_correct, minmax

DEFAULT_LAMBDAS = (0.01, 0.02, 0.03, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1, 0.12, 0.15, 0.20, 0.25)


def _check_candidates(values, what):
    values = tuple(float(v) for v in values)
    if not values:
        raise ValidationError(f"{what} candidates must be non-empty")
    if any(v < 0 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
        raise ValidationError(f"{what} candidates must be non-negative and strictly increasing")
    return values


@dataclass(frozen=True)
class LambdaSet:
    """Ordered candidate windows; the row set defaults to the block set plus 0.0."""

    block_candidates: tuple = DEFAULT_LAMBDAS
    row_candidates: tuple | None = None

    def __post_init__(self):
        block = _check_candidates(self.block_candidates, "block")
        object.__setattr__(self, "block_candidates", block)
        rows = self.row_candidates
        if rows is None:
            rows = sorted(set(block) | {0.0})
        rows = _check_candidates(rows, "row")
        if 0.0 not in rows:
            raise ValidationError("row candidates must include 0.0")
        object.__setattr__(self, "row_candidates", rows)

    @classmethod
    def from_block(cls, values):
        return cls(tuple(float(v) for v in values))


@dataclass(frozen=True)
class AlignmentValue:
    total: float
    per_layer: dict = field(repr=False)


def neuron_alignment(dense, sparse):
    if not (dense.normalized and sparse.normalized):
        raise ValidationError("alignment needs normalized profiles")
    if sorted(dense.layers) != sorted(sparse.layers):
        raise ValidationError("dense and sparse profiles cover different layers")
    per_layer = {}
    for lid in sorted(dense.layers):
        d, s = dense[lid], sparse[lid]
        if d.shape != s.shape:
            raise ValidationError(f"profile widths differ at {lid}")
        per_layer[lid] = float(np.linalg.norm(d - s)) / d.size
    return AlignmentValue(math.fsum(per_layer.values()), per_layer)


def row_misalignment(dense, sparse_block, layer):
    return np.abs(dense[layer] - sparse_block[layer])


def row_distribution(misalign, layer_sparsity, lam):
    """Per-row sparsities in ``[s - lam, s + lam]``; the most misaligned row is kept densest."""
    misalign = np.asarray(misalign, dtype=np.float64)
    if not np.all(np.isfinite(misalign)):
        raise ValidationError("misalignment must be finite")
    raw = layer_sparsity + lam * (1.0 - 2.0 * minmax(misalign))
    return np.clip(mean_correct(raw, np.ones(raw.size), layer_sparsity), 0.0, 1.0)


def _parallel_map(fn, items, n_jobs):
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _argmin(candidates):
    """Index of the minimum (alignment, lambda) pair."""
    return min(range(len(candidates)), key=lambda i: (candidates[i][1].total, candidates[i][0]))


def _ranked(scores):
    if isinstance(scores, RankedScores):
        if scores.group != "row":
            raise ValidationError("allocation masks use row comparison groups")
        return scores
    if isinstance(scores, SaliencyScores):
        return RankedScores(scores, "row")
    raise ValidationError("scores must be SaliencyScores or RankedScores")


def _normalized(profile):
    return profile if profile.normalized else normalize_profile(profile)


def evaluate_plan(model, ranked, plan, calib, seq_len, dense_profile):
    """Mask ``model`` per ``plan`` and return (mask, normalized sparse profile, alignment)."""
    mask = ranked.mask(plan)
    sparse = normalize_profile(capture_profile(model, mask, calib, seq_len))
    return mask, sparse, neuron_alignment(dense_profile, sparse)


def block_param_counts(model):
    return np.full(model.dims.n_blocks, model.dims.block_param_count())


def eval_block_candidate(model, scores, lam, s, calib, dense_profile, seq_len):
    plan = linear_schedule(s, lam, block_param_counts(model))
    _, _, value = evaluate_plan(model, _ranked(scores), plan, calib, seq_len, _normalized(dense_profile))
    return plan, value


def select_block_plan(model, scores, s, lambda_set, calib, seq_len, dense_profile=None, n_jobs=1):
    """Linear-schedule candidate with the lowest alignment.

    Returns ``(plan, alignment, [(lam, AlignmentValue), ...])``.
    """
    ranked = _ranked(scores)
    if dense_profile is None:
        dense_profile = capture_profile(model, None, calib, seq_len)
    dense = _normalized(dense_profile)
    counts = block_param_counts(model)

    def run(lam):
        plan = linear_schedule(s, lam, counts)
        return plan, evaluate_plan(model, ranked, plan, calib, seq_len, dense)[2]

    results = _parallel_map(run, list(lambda_set.block_candidates), n_jobs)
    candidates = [(lam, value) for lam, (_, value) in zip(lambda_set.block_candidates, results)]
    best = _argmin(candidates)
    return results[best][0], results[best][1], candidates


def row_plan(block_plan, misalign, lam):
    """Attach per-row sparsities derived from per-layer misalignment vectors."""
    per_row = {
        lid: row_distribution(m, float(block_plan.per_block[lid.block]), lam)
        for lid, m in sorted(misalign.items())
    }
    return block_plan.with_rows(per_row, lam)


def select_row_plan(model, scores, block_plan, lambda_set, calib, dense_profile, seq_len, n_jobs=1):
    """Row-wise redistribution around each layer's block sparsity.

    Returns ``(plan, alignment, candidates, block_alignment)``.
    """
    ranked = _ranked(scores)
    dense = _normalized(dense_profile)
    _, sparse_block, block_value = evaluate_plan(model, ranked, block_plan, calib, seq_len, dense)
    misalign = {lid: row_misalignment(dense, sparse_block, lid) for lid in layer_ids(model.dims.n_blocks)}

    def run(lam):
        plan = row_plan(block_plan, misalign, lam)
        return plan, evaluate_plan(model, ranked, plan, calib, seq_len, dense)[2]

    results = _parallel_map(run, list(lambda_set.row_candidates), n_jobs)
    candidates = [(lam, value) for lam, (_, value) in zip(lambda_set.row_candidates, results)]
    best = _argmin(candidates)
    return results[best][0], results[best][1], candidates, block_value


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, (ValueError, ArithmeticError)) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def run_neuronal(
    model,
    scorer_tag,
    s,
    lambda_set=None,
    calib=None,
    seq_len=64,
    calib_windows=8,
    n_jobs=1,
    row_step=True,
    scores=None,
):
    """Score, block step, row step.  Returns ``(mask, PruneReport)``.

    ``calib`` is the full calibration stream (used for wanda scoring); the
    alignment search runs on its first ``calib_windows`` windows.
    """
    lambda_set = lambda_set or LambdaSet()
    if calib is None:
        raise ValidationError("neuronal allocation needs calibration tokens")
    with _Stage("score"):
        if scores is None:
            scores = score_model(model, scorer_tag, calib, seq_len)
        ranked = _ranked(scores)
    with _Stage("dense_profile"):
        calib_lambda = calibration_subset(calib, seq_len, calib_windows)
        dense = normalize_profile(capture_profile(model, None, calib_lambda, seq_len))
    with _Stage("block_step"):
        block, block_value, block_cands = select_block_plan(
            model, ranked, s, lambda_set, calib_lambda, seq_len, dense, n_jobs
        )
    cands = [{"stage": "block", "lambda": lam, "alignment": v.total} for lam, v in block_cands]
    final_plan, final_value, lam_row = block, block_value, None
    if row_step:
        with _Stage("row_step"):
            final_plan, final_value, row_cands, _ = select_row_plan(
                model, ranked, block, lambda_set, calib_lambda, dense, seq_len, n_jobs
            )
        cands += [{"stage": "row", "lambda": lam, "alignment": v.total} for lam, v in row_cands]
        lam_row = final_plan.lam
    with _Stage("finalize"):
        mask = ranked.mask(final_plan)
        achieved = achieved_sparsity(mask)
    report = PruneReport(
        scorer_tag=scores.scorer_tag,
        topup_tag="neuronal" if row_step else "neuronal-block",
        target_sparsity=float(s),
        chosen_lambda_block=block.lam,
        chosen_lambda_row=lam_row,
        candidate_alignments=cands,
        per_block_sparsity=block.per_block.tolist(),
        per_row_sparsity=(
            {str(k): v.tolist() for k, v in sorted(final_plan.per_row.items())} if final_plan.per_row else None
        ),
        achieved_global_sparsity=achieved.global_sparsity,
        achieved=achieved.to_dict(),
        alignment=final_value.total,
        block_alignment=block_value.total,
        seq_len=seq_len,
        calib_windows=calib_windows,
    )
    return mask, report
