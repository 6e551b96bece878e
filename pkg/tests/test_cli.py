import json

import pytest

from mmrl.cli import grid_cells, parse_grid, run, summarize
from mmrl.config import RunConfig
from mmrl.errors import ConfigError
from mmrl.evaluation import EvalRecord

TINY = ["--items-per-class", "30", "--shots", "4", "--pretrain-steps", "20", "--epochs", "2", "-q"]


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    flags = ["--run-dir", str(root), *TINY]
    for cmd in ("gen", "pretrain", "train", "eval"):
        assert run([cmd, *flags]) == 0, cmd
    return root, flags


def test_pipeline_writes_artifacts(run_dir):
    root, _ = run_dir
    for name in ("corpus.mmrl", "backbone.mmrl", "adapter.mmrl", "loss.csv", "eval.json", "eval.csv", "run.log"):
        assert (root / name).is_file(), name
    rec = json.loads((root / "eval.json").read_text())[0]
    assert rec["variant"] == "MMRL" and rec["config_hash"] == RunConfig(
        items_per_class=30, shots=4, pretrain_steps=20, epochs=2).hash()
    assert (root / "loss.csv").read_text().startswith("# config_hash=")


def test_usage_errors_exit_2(capsys, tmp_path):
    assert call(capsys, "train", "--bogus")[0] == 2
    assert call(capsys)[0] == 2
    assert call(capsys, "train", "--alpha", "2", "--run-dir", str(tmp_path))[0] == 2
    cfg = tmp_path / "c.txt"
    cfg.write_text("tau = 1\n")
    code, _, err = call(capsys, "gen", "--config", str(cfg), "--run-dir", str(tmp_path))
    assert code == 2 and "unknown config key" in err
    assert call(capsys, "gen", "--config", str(tmp_path / "absent"))[0] == 2


def test_missing_artifacts_exit_3(capsys, tmp_path):
    code, _, err = call(capsys, "eval", "--run-dir", str(tmp_path), "-q")
    assert code == 3 and "missing" in err
    assert call(capsys, "report", "--run-dir", str(tmp_path), "-q")[0] == 3


def test_leakage_exits_3(capsys, run_dir):
    _, flags = run_dir
    code, _, err = call(capsys, "eval", *flags, "--split-seed", "5")
    assert code == 3


def test_eval_rejects_mismatched_corpus(capsys, run_dir):
    _, flags = run_dir
    assert call(capsys, "eval", *flags, "--noise-scale", "0.3")[0] == 3


def test_corrupt_bundle_exits_3(capsys, run_dir, tmp_path):
    root, flags = run_dir
    copy = tmp_path / "r"
    copy.mkdir()
    for name in ("corpus.mmrl", "backbone.mmrl", "adapter.mmrl"):
        (copy / name).write_bytes((root / name).read_bytes())
    data = bytearray((copy / "adapter.mmrl").read_bytes())
    data[-3] ^= 0xFF
    (copy / "adapter.mmrl").write_bytes(bytes(data))
    assert call(capsys, "eval", *TINY, "--run-dir", str(copy))[0] == 3


def test_full_width_profile_flags_accepted(capsys, tmp_path):
    code, _, err = call(capsys, "gen", "--alpha", "0.7", "--lambda", "0.5", "--K", "5", "--J", "4",
                        "--dr", "512", "--items-per-class", "20", "--run-dir", str(tmp_path))
    assert code == 0 and "dr = 512" in err and "lam = 0.5" in err


def test_resolved_config_on_stderr(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("MMRL_SEED", "11")
    code, _, err = call(capsys, "gen", "--items-per-class", "20", "--run-dir", str(tmp_path))
    assert code == 0 and "seed = 11" in err
    code, _, err = call(capsys, "gen", "--seed", "12", "--items-per-class", "20", "--run-dir", str(tmp_path))
    assert "seed = 12" in err


def test_gradcheck_command(capsys, tmp_path):
    code, out, _ = call(capsys, "gradcheck", "--run-dir", str(tmp_path), "--layers", "2", "--J", "2", "--K", "2",
                        "--dr", "3", "--items-per-class", "20", "--image-size", "16", "-q")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# config_hash=") and lines[-1].startswith("max_rel_err=")
    assert float(lines[-1].split("=")[1]) < 1e-4
    assert (tmp_path / "gradcheck.txt").read_text() == out


def test_gradcheck_failure_exits_3(capsys, tmp_path):
    # very narrow random towers at tau=0.01 have curvature large enough that
    # eps=1e-5 truncation error alone breaks the tolerance
    code, out, err = call(capsys, "gradcheck", "--run-dir", str(tmp_path), "--layers", "2", "--J", "2", "--K", "2",
                          "--dr", "3", "--vision-width", "8", "--text-width", "8", "--embed-dim", "4", "--heads", "2",
                          "--items-per-class", "20", "--image-size", "8", "--patch-size", "4", "-q")
    assert code == 3 and "gradient check failed" in err
    assert (tmp_path / "gradcheck.txt").is_file()


def test_ablate_and_report(capsys, run_dir):
    root, flags = run_dir
    code, out, _ = call(capsys, "ablate", *flags, "--grid", "variant=MMRL,w/o V;alpha=0.5,0.7", "--epochs", "1")
    assert code == 0
    recs = json.loads((root / "ablation.json").read_text())
    assert len(recs) == 4 and {r["variant"] for r in recs} == {
        "MMRL [alpha=0.5]", "MMRL [alpha=0.7]", "w/o V [alpha=0.5]", "w/o V [alpha=0.7]"}
    code, out, _ = call(capsys, "report", *flags, "--format", "csv")
    assert code == 0 and out.startswith("# config_hash=") and out.splitlines()[1] == "variant,base,novel,hm,seeds"
    assert (root / "report.txt").is_file()


def test_grid_parsing():
    assert parse_grid("variant=a,b; lambda=0,2") == {"variant": ["a", "b"], "lam": ["0", "2"]}
    for bad in ("alpha", "alpha=", "tau=1", "seed=1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)
    cells = grid_cells(RunConfig(seeds="0,1"))
    assert len(cells) == 14 and cells[0][1].seed == 0 and cells[1][1].seed == 1


def test_summary_averages_seeds():
    recs = [EvalRecord("A", 80.0, 60.0, 0, 0, ""), EvalRecord("A", 100.0, 80.0, 0, 1, ""),
            EvalRecord("B", 100.0, 100.0, 100.0, 0, "")]
    rows = summarize(recs)
    assert rows[0][0] == "B"
    name, b, n, hm, k = rows[1]
    assert (name, b, n, k) == ("A", 90.0, 70.0, 2) and abs(hm - 78.75) < 1e-12
