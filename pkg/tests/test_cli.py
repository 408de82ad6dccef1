import json
import subprocess
import sys

import pytest

from neuronal_prune.cli import main
from neuronal_prune.masking import read_mask
from neuronal_prune.model_store import ModelDims
from neuronal_prune.report import validate_report
from neuronal_prune.schedules import linear_schedule


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-model", "--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--n-blocks", "3",
                 "--vocab", "13", "--seed", "3", "--out", str(root / "model")]) == 0
    assert main(["gen-tokens", "--vocab", "13", "--length", "256", "--seed", "1", "--out", str(root / "calib.toks")]) == 0
    assert main(["gen-tokens", "--vocab", "13", "--length", "129", "--seed", "2", "--out", str(root / "eval.toks")]) == 0
    return root


def _prune(files, out, *extra):
    return main(["prune", "--model", str(files / "model"), "--calib", str(files / "calib.toks"),
                 "--seq-len", "16", "--calib-windows", "4", "--out", str(out / "mask"),
                 "--report", str(out / "report.json"), *extra])


def _eval(files, capsys, *extra):
    assert main(["eval", "--model", str(files / "model"), "--tokens", str(files / "eval.toks"),
                 "--seq-len", "16", *extra]) == 0
    return json.loads(capsys.readouterr().out)["perplexity"]


def test_zero_sparsity_prune_then_eval_is_dense(files, tmp_path, capsys):
    assert _prune(files, tmp_path, "--topup", "uniform", "--sparsity", "0.0", "--scorer", "magnitude") == 0
    dense = _eval(files, capsys)
    masked = _eval(files, capsys, "--mask", str(tmp_path / "mask"))
    assert dense == masked


def test_neuronal_report_schema(files, tmp_path):
    assert _prune(files, tmp_path, "--topup", "neuronal", "--sparsity", "0.7",
                  "--lambda-set", "0.02,0.05,0.1", "--eval-tokens", str(files / "eval.toks")) == 0
    data = json.loads((tmp_path / "report.json").read_text())
    validate_report(data)
    assert data["seeds"] == {"model": 3}
    assert data["perplexity"] > 1
    blocks = [(c["alignment"], c["lambda"]) for c in data["candidate_alignments"] if c["stage"] == "block"]
    rows = [(c["alignment"], c["lambda"]) for c in data["candidate_alignments"] if c["stage"] == "row"]
    assert min(blocks)[1] == data["chosen_lambda_block"]
    assert min(rows)[1] == data["chosen_lambda_row"]
    mask = read_mask(tmp_path / "mask")
    zeros = sum(int((~m).sum()) for m in mask.layers.values()) / sum(m.size for m in mask.layers.values())
    assert zeros == data["achieved_global_sparsity"]


def test_linear_per_block_matches_schedule(files, tmp_path):
    assert _prune(files, tmp_path, "--topup", "linear", "--lambda", "0.08", "--sparsity", "0.6") == 0
    data = json.loads((tmp_path / "report.json").read_text())
    count = ModelDims(16, 2, 32, 3, 13).block_param_count()
    assert data["per_block_sparsity"] == linear_schedule(0.6, 0.08, [count] * 3).per_block.tolist()
    assert data["chosen_lambda_block"] == 0.08


def test_repeat_runs_identical(files, tmp_path):
    outputs = []
    for i, jobs in enumerate(["1", "1", "4", "4"]):
        out = tmp_path / str(i)
        assert _prune(files, out, "--topup", "neuronal", "--sparsity", "0.6", "--lambda-set", "0.05,0.1",
                      "--jobs", jobs) == 0
        data = json.loads((out / "report.json").read_text())
        data.pop("timestamp")
        data["paths"].pop("mask")
        outputs.append((json.dumps(data), (out / "mask" / "mask.bin").read_bytes()))
    assert len(set(outputs)) == 1


def test_sweep_csv(files, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--model", str(files / "model"), "--scorer", "wanda", "--schedule", "linear",
                 "--sparsity", "0.7", "--lambda-grid", "0.1,0.0,0.05", "--calib", str(files / "calib.toks"),
                 "--calib-windows", "4", "--eval-tokens", str(files / "eval.toks"), "--seq-len", "16",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "lambda,alignment,perplexity"
    assert [float(l.split(",")[0]) for l in lines[1:]] == [0.0, 0.05, 0.1]


def test_unknown_flag_exit_1(capsys):
    assert main(["prune", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_command_exit_1(capsys):
    assert main([]) == 1


def test_validation_error_exit_1(files, tmp_path, capsys):
    assert _prune(files, tmp_path, "--topup", "uniform", "--sparsity", "1.5") == 1
    assert "validation error" in capsys.readouterr().err


def test_io_error_exit_2(tmp_path, capsys):
    code = main(["eval", "--model", str(tmp_path / "missing"), "--tokens", str(tmp_path / "t.toks")])
    assert code == 2
    assert "I/O error" in capsys.readouterr().err


def test_stage_failure_written_to_report(files, tmp_path):
    assert _prune(files, tmp_path, "--topup", "owl", "--owl-m", "0.5", "--sparsity", "0.5") == 1
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["stage"] == "schedule"


def test_module_entry_point(files):
    proc = subprocess.run([sys.executable, "-m", "neuronal_prune", "eval", "--model", str(files / "model"),
                           "--tokens", str(files / "eval.toks"), "--seq-len", "16"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["perplexity"] > 0
