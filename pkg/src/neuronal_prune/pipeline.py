"""One entry point for every top-up mode."""

from __future__ import annotations

from .engine import calibration_subset, capture_profile, normalize_profile
from .exceptions import StageError, ValidationError
from .masking import RankedScores, achieved_sparsity, score_model
from .neuronal import LambdaSet, _Stage, block_param_counts, evaluate_plan, run_neuronal
from .report import TOPUP_TAGS, PruneReport
from .schedules import fixed_schedule

DEFAULT_LAMBDA = 0.08
DEFAULT_OWL_M = 5.0


def run_fixed(
    model,
    scorer_tag,
    topup,
    s,
    lam=DEFAULT_LAMBDA,
    calib=None,
    seq_len=64,
    calib_windows=8,
    owl_multiplier=DEFAULT_OWL_M,
    scores=None,
):
    """Uniform/linear/exp/log/owl allocation with row comparison groups.

    The final mask's alignment on the calibration subset is reported when
    calibration tokens are available.
    """
    with _Stage("score"):
        if scores is None:
            scores = score_model(model, scorer_tag, calib, seq_len)
        ranked = RankedScores(scores, "row")
    with _Stage("schedule"):
        owl_profile = None
        if topup == "owl":
            if calib is None:
                raise ValidationError("owl needs calibration tokens")
            owl_profile = capture_profile(model, None, calib, seq_len)
        plan = fixed_schedule(topup, s, lam, block_param_counts(model), owl_profile, owl_multiplier)
    with _Stage("mask"):
        alignment = None
        if calib is not None:
            calib_lambda = calibration_subset(calib, seq_len, calib_windows)
            dense = normalize_profile(capture_profile(model, None, calib_lambda, seq_len))
            mask, _, value = evaluate_plan(model, ranked, plan, calib_lambda, seq_len, dense)
            alignment = value.total
        else:
            mask = ranked.mask(plan)
        achieved = achieved_sparsity(mask)
    cands = [] if alignment is None else [{"stage": "fixed", "lambda": plan.lam, "alignment": alignment}]
    report = PruneReport(
        scorer_tag=scores.scorer_tag,
        topup_tag=topup,
        target_sparsity=float(s),
        chosen_lambda_block=plan.lam,
        chosen_lambda_row=None,
        candidate_alignments=cands,
        per_block_sparsity=plan.per_block.tolist(),
        achieved_global_sparsity=achieved.global_sparsity,
        achieved=achieved.to_dict(),
        alignment=alignment,
        seq_len=seq_len,
        calib_windows=calib_windows,
    )
    return mask, report


def prune(
    model,
    scorer="wanda",
    topup="neuronal",
    sparsity=0.7,
    calib=None,
    seq_len=64,
    calib_windows=8,
    lam=DEFAULT_LAMBDA,
    lambda_set=None,
    owl_multiplier=DEFAULT_OWL_M,
    n_jobs=1,
    scores=None,
):
    """Dispatch by ``topup``; returns ``(SparsityMask, PruneReport)``."""
    if topup not in TOPUP_TAGS:
        raise ValidationError(f"unknown top-up {topup!r}; choose from {', '.join(TOPUP_TAGS)}")
    if not 0.0 <= sparsity <= 1.0:
        raise ValidationError(f"sparsity {sparsity} outside [0, 1]")
    if topup in ("neuronal", "neuronal-block"):
        return run_neuronal(
            model,
            scorer,
            sparsity,
            lambda_set or LambdaSet(),
            calib,
            seq_len,
            calib_windows,
            n_jobs,
            row_step=(topup == "neuronal"),
            scores=scores,
        )
    return run_fixed(model, scorer, topup, sparsity, lam, calib, seq_len, calib_windows, owl_multiplier, scores)


__all__ = ["prune", "run_fixed", "StageError"]
