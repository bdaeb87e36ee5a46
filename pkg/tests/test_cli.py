import csv
import json
import subprocess
import sys

import pytest

from treerpo import trainer as tr
from treerpo.cli import EXIT_BOUND, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from treerpo.estimator import BoundReport

TINY = dict(task="copy", L=4, N=2, b=2, payload_len=4, alphabet="ab", B=2, H=1, T=2,
            d_model=8, n_layers=1, n_heads=2, d_hidden=16, out_gain_init=1.0, mu=1)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_tree_cost(capsys):
    code, out, _ = run(["tree-cost", "--B", "3", "--H", "2", "--N", "8", "--L", "16", "--b", "8"], capsys)
    assert code == EXIT_OK
    rec = json.loads(out)
    assert rec["tree_steps"] == 12 and rec["denoise_steps"] == 48


def test_tree_cost_misaligned_is_config_error(capsys):
    code, _, err = run(["tree-cost", "--H", "3"], capsys)
    assert code == EXIT_CONFIG and "H=3" in err


def test_train_writes_outputs_and_honours_overrides(tmp_path, config_file, capsys):
    out_dir = tmp_path / "run"
    code, out, _ = run(["train", "--config", config_file, "--seed", "1", "--mode", "full",
                        "--out-dir", str(out_dir), "--T", "3", "--lambda-max", "0.01"], capsys)
    assert code == EXIT_OK
    cfg = json.loads((out_dir / "config.json").read_text())
    assert cfg["T"] == 3 and cfg["lambda_max"] == 0.01 and cfg["seed"] == 1 and cfg["B"] == 2
    assert len((out_dir / "metrics.jsonl").read_text().splitlines()) == 3
    assert (out_dir / "final.npz").exists()
    assert json.loads(out)["steps"] == 3


@pytest.mark.parametrize("missing", ["--seed", "--mode", "--out-dir"])
def test_train_mandatory_flags(tmp_path, config_file, missing):
    argv = {"--seed": "0", "--mode": "full", "--out-dir": str(tmp_path / "x")}
    del argv[missing]
    flat = ["train", "--config", config_file] + [x for kv in argv.items() for x in kv]
    with pytest.raises(SystemExit) as info:
        main(flat)
    assert info.value.code == EXIT_CONFIG


@pytest.mark.parametrize(
    "content",
    ['{"T": 2, "nested": {"a": 1}}', '{"banana": 3}', "not json", '[1, 2]', '{"H": 5}'],
)
def test_bad_config_files(tmp_path, content, capsys):
    path = tmp_path / "bad.json"
    path.write_text(content)
    code, _, err = run(["train", "--config", str(path), "--seed", "0", "--mode", "full",
                        "--out-dir", str(tmp_path / "o")], capsys)
    assert code == EXIT_CONFIG and "configuration error" in err


def test_bad_override_type_is_config_error(tmp_path, config_file):
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", config_file, "--seed", "0", "--mode", "full",
              "--out-dir", str(tmp_path), "--T", "three"])
    assert info.value.code == EXIT_CONFIG


def test_numeric_abort_exit_code(tmp_path, config_file, capsys, monkeypatch):
    def boom(*a, **k):
        raise tr.TrainingAborted("injected", str(tmp_path / "last_good.npz"))

    monkeypatch.setattr("treerpo.cli.train", boom)
    code, _, err = run(["train", "--config", config_file, "--seed", "0", "--mode", "full",
                        "--out-dir", str(tmp_path)], capsys)
    assert code == EXIT_NUMERIC and "last_good.npz" in err


def test_eval_round_trip(tmp_path, config_file, capsys):
    out_dir = tmp_path / "run"
    assert main(["train", "--config", config_file, "--seed", "0", "--mode", "full", "--out-dir", str(out_dir)]) == 0
    capsys.readouterr()
    code, out, _ = run(["eval", "--checkpoint", str(out_dir / "final.npz"), "--config", config_file,
                        "--seed", "100", "--n", "3", "--out-dir", str(out_dir)], capsys)
    assert code == EXIT_OK
    rec = json.loads(out)
    assert rec["n"] == 3 and 0.0 <= rec["pass_at_1"] <= 1.0
    assert json.loads((out_dir / "eval.json").read_text()) == rec
    code, _, _ = run(["eval", "--checkpoint", str(tmp_path / "nope.npz"), "--seed", "0"], capsys)
    assert code == EXIT_CONFIG
    code, _, _ = run(["eval", "--checkpoint", str(out_dir / "final.npz"), "--config", config_file,
                      "--seed", "0", "--n", "0"], capsys)
    assert code == EXIT_CONFIG


def test_verify_bounds_outputs(tmp_path, capsys):
    code, out, _ = run(["verify-bounds", "--seed", "3", "--out-dir", str(tmp_path), "--n-instances", "5",
                        "--k-max", "3"], capsys)
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["count"] == 15 and summary["violations"] == 0
    lines = (tmp_path / "bound_reports.jsonl").read_text().splitlines()
    assert len(lines) == 15
    rec = json.loads(lines[0])
    for key in ("k", "V", "q_kind", "eps", "log_ratio", "lower_bound", "upper_bound", "holds"):
        assert key in rec


def test_verify_bounds_violation_exit_code(tmp_path, capsys, monkeypatch):
    def fake_check(*a, **k):
        return BoundReport(k=2, p_exact=1.0, p_hat=0.1, log_ratio=2.3, ratio=10.0, eps_parent=0.1, eps_path=0.1,
                           eps=0.1, lower_bound=0.81, upper_bound=1.25, holds=False, failed_side="upper")

    monkeypatch.setattr(tr, "check_bounds", fake_check)
    code, _, _ = run(["verify-bounds", "--seed", "0", "--out-dir", str(tmp_path), "--n-instances", "2"], capsys)
    assert code == EXIT_BOUND


def test_verify_bounds_rejects_bad_ranges(tmp_path, capsys):
    code, _, _ = run(["verify-bounds", "--seed", "0", "--out-dir", str(tmp_path), "--k-min", "4", "--k-max", "2"], capsys)
    assert code == EXIT_CONFIG


def test_ablate_and_plot_data(tmp_path, config_file, capsys):
    out_dir = tmp_path / "abl"
    code, out, _ = run(["ablate", "--config", config_file, "--seed", "0", "--mode", "full,no_distill",
                        "--out-dir", str(out_dir), "--n-seeds", "2"], capsys)
    assert code == EXIT_OK
    table = json.loads((out_dir / "ablation.json").read_text())
    assert table["seeds"] == [0, 1] and set(table["table"]) == {"full", "no_distill"}
    assert "no_distill" in out
    metrics = [str(out_dir / m / "seed0" / "metrics.jsonl") for m in ("full", "no_distill")]
    csv_path = tmp_path / "curves.csv"
    assert main(["plot-data", *metrics, "--out", str(csv_path)]) == EXIT_OK
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 2 * TINY["T"]
    assert rows[0]["run"] == metrics[0] and rows[0]["step"] == "0"
    code, _, _ = run(["ablate", "--config", config_file, "--seed", "0", "--mode", "sideways",
                      "--out-dir", str(out_dir)], capsys)
    assert code == EXIT_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "treerpo", "tree-cost", "--B", "2", "--H", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["tree_steps"] == 2
