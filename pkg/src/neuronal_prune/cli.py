"""Command line: gen-model, gen-tokens, prune, eval, sweep.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from .evaluation import perplexity, sweep, sweep_csv
from .exceptions import StageError, StorageError, ValidationError
from .masking import read_mask, write_mask
from .model_store import ModelDims, generate_model, generate_tokens, read_metadata, read_model, read_tokens, write_model, write_tokens
from .neuronal import LambdaSet
from .pipeline import DEFAULT_LAMBDA, DEFAULT_OWL_M, prune
from .report import TOPUP_TAGS, validate_report

log = logging.getLogger("neuronal_prune")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _write_text(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {exc.strerror or exc}", path) from exc


def build_parser():
    parser = _Parser(prog="neuronal-prune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-model", help="write a seeded synthetic model directory")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--vocab", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-tokens", help="write a seeded TOKS token file")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="compute a sparsity mask and a JSON report")
    p.add_argument("--model", required=True)
    p.add_argument("--scorer", choices=("magnitude", "wanda"), default="wanda")
    p.add_argument("--topup", choices=TOPUP_TAGS, default="neuronal")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--calib")
    p.add_argument("--calib-windows", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--lambda-set", type=_float_list)
    p.add_argument("--owl-m", type=float, default=DEFAULT_OWL_M)
    p.add_argument("--eval-tokens", help="also report perplexity on this token file")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="mask output directory")
    p.add_argument("--report", required=True, help="report JSON path")

    p = sub.add_parser("eval", help="perplexity of a (masked) model")
    p.add_argument("--model", required=True)
    p.add_argument("--mask")
    p.add_argument("--tokens", required=True)
    p.add_argument("--seq-len", type=int, default=64)

    p = sub.add_parser("sweep", help="alignment and perplexity over a lambda grid (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--scorer", choices=("magnitude", "wanda"), default="wanda")
    p.add_argument("--schedule", choices=("uniform", "linear", "exp", "log", "owl"), default="linear")
    p.add_argument("--sparsity", type=float, required=True)
    p.add_argument("--lambda-grid", type=_float_list, required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--calib-windows", type=int, default=8)
    p.add_argument("--eval-tokens", required=True)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--owl-m", type=float, default=DEFAULT_OWL_M)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    return parser


def cmd_gen_model(args):
    dims = ModelDims(args.d_model, args.n_heads, args.d_ff, args.n_blocks, args.vocab)
    write_model(generate_model(dims, args.seed), args.out, metadata={"seed": args.seed})
    log.info("wrote model %s (%d prunable params)", args.out, dims.n_blocks * dims.block_param_count())


def cmd_gen_tokens(args):
    write_tokens(generate_tokens(args.vocab, args.length, args.seed), args.out)


def cmd_prune(args):
    model = read_model(args.model)
    calib = read_tokens(args.calib) if args.calib else None
    lambda_set = LambdaSet.from_block(args.lambda_set) if args.lambda_set else None
    try:
        mask, report = prune(
            model,
            scorer=args.scorer,
            topup=args.topup,
            sparsity=args.sparsity,
            calib=calib,
            seq_len=args.seq_len,
            calib_windows=args.calib_windows,
            lam=args.lam,
            lambda_set=lambda_set,
            owl_multiplier=args.owl_m,
            n_jobs=args.jobs,
        )
    except StageError as exc:
        _write_text(args.report, json.dumps({"error": str(exc.cause), "stage": exc.stage}, indent=2) + "\n")
        raise
    if args.eval_tokens:
        report.perplexity = perplexity(model, mask, read_tokens(args.eval_tokens), args.seq_len)
    seed = read_metadata(args.model).get("seed")
    report.seeds = {"model": seed if isinstance(seed, int) else None}
    report.paths = {"model": args.model, "calib": args.calib, "eval_tokens": args.eval_tokens, "mask": args.out}
    data = report.to_dict()
    validate_report(data)
    write_mask(mask, args.out)
    _write_text(args.report, json.dumps(data, indent=2) + "\n")
    log.info("achieved sparsity %.6f", report.achieved_global_sparsity)


def cmd_eval(args):
    model = read_model(args.model)
    mask = read_mask(args.mask) if args.mask else None
    ppl = perplexity(model, mask, read_tokens(args.tokens), args.seq_len)
    print(json.dumps({"perplexity": ppl}))


def cmd_sweep(args):
    model = read_model(args.model)
    rows = sweep(
        model,
        args.scorer,
        args.sparsity,
        args.schedule,
        args.lambda_grid,
        read_tokens(args.calib),
        read_tokens(args.eval_tokens),
        seq_len=args.seq_len,
        calib_windows=args.calib_windows,
        n_jobs=args.jobs,
        owl_multiplier=args.owl_m,
    )
    text = sweep_csv(rows)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-tokens": cmd_gen_tokens,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except StorageError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, jsonschema.ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
