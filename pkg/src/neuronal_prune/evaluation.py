"""Perplexity and lambda sweeps."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .engine import _check_tokens, _run_windows, calibration_subset, capture_profile, normalize_profile
from .exceptions import ValidationError
from .masking import RankedScores, score_model
from .neuronal import _parallel_map, block_param_counts, evaluate_plan
from .schedules import fixed_schedule

SWEEP_HEADER = ("lambda", "alignment", "perplexity")


def log_softmax(logits):
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity(model, mask, tokens, seq_len):
    """exp(mean next-token NLL); inputs are consecutive non-overlapping windows.

    Window ``w`` reads ``ids[w*L : w*L+L]`` and predicts the ids one step
    later, so every token after the first is predicted exactly once.
    """
    _check_tokens(model, tokens, seq_len, min_len=1)
    if len(tokens) < seq_len + 1:
        raise ValidationError(f"perplexity needs at least seq_len + 1 = {seq_len + 1} tokens, got {len(tokens)}")
    ids = tokens.ids
    inputs = [ids[i : i + seq_len] for i in range(0, len(ids) - 1, seq_len)]
    targets = [ids[i + 1 : i + 1 + seq_len] for i in range(0, len(ids) - 1, seq_len)]
    logits = _run_windows(model, mask, inputs)
    total = 0.0
    count = 0
    for lg, tgt in zip(logits, targets):
        lp = log_softmax(lg)
        total += -float(lp[np.arange(tgt.size), tgt].sum())
        count += tgt.size
    if count == 0:
        raise ValidationError("no positions to predict")
    return math.exp(total / count)


@dataclass(frozen=True)
class SweepRow:
    lam: float
    alignment: float | None
    perplexity: float | None
    error: str | None = None


def sweep(
    model,
    scorer,
    s,
    schedule_tag,
    lambda_grid,
    calib,
    eval_tokens,
    seq_len=64,
    calib_windows=8,
    n_jobs=1,
    owl_multiplier=5.0,
):
    """One row per lambda: alignment on the calibration subset and perplexity on ``eval_tokens``.

    A failing lambda yields a row with ``error`` set instead of aborting.
    """
    grid = sorted(float(g) for g in lambda_grid)
    if not grid:
        raise ValidationError("lambda grid must be non-empty")
    scores = score_model(model, scorer, calib, seq_len) if isinstance(scorer, str) else scorer
    ranked = RankedScores(scores, "row")
    calib_lambda = calibration_subset(calib, seq_len, calib_windows)
    raw_dense = capture_profile(model, None, calib_lambda, seq_len)
    dense = normalize_profile(raw_dense)
    owl_profile = capture_profile(model, None, calib, seq_len) if schedule_tag == "owl" else None
    counts = block_param_counts(model)

    def run(lam):
        try:
            plan = fixed_schedule(schedule_tag, s, lam, counts, owl_profile, owl_multiplier)
            mask, _, value = evaluate_plan(model, ranked, plan, calib_lambda, seq_len, dense)
            return SweepRow(lam, value.total, perplexity(model, mask, eval_tokens, seq_len))
        except (ValueError, ArithmeticError) as exc:
            return SweepRow(lam, None, None, f"{type(exc).__name__}: {exc}")

    return _parallel_map(run, grid, n_jobs)


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for row in rows:
        if row.error is not None:
            writer.writerow([repr(row.lam), "ERROR", "ERROR"])
        else:
            writer.writerow([repr(row.lam), repr(row.alignment), repr(row.perplexity)])
    return buf.getvalue()
