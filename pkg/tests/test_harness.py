import json
from pathlib import Path

import pytest

from propmotion.harness.cli import main
from propmotion.harness.config import load_config
from propmotion.harness.pipeline import RESULT_HEADER, load_results, summary_table

# shrinks every training stage so the whole pipeline runs in well under a minute
TINY = ["lower.epochs=2", "upper.epochs=2", "upper.refine_rounds=1", "upper.refine_runs=1",
        "upper.refine_epochs=1", "baseline.epochs=2", "learning.epochs=1", "ltof.epochs=2",
        "upper.phases=2", "learning.phases=1", "ce.samples_per_primitive=2", "ce.top_m=10"]


def cli(stage, out, *extra, sets=TINY):
    args = [stage, "--out", str(out)]
    for s in sets:
        args += ["--set", s]
    return main(args + list(extra))


def test_defaults_load_and_validate():
    cfg = load_config()
    assert cfg.seed == 0 and cfg.trials == 10
    assert cfg.controllers == ["baseline", "learning", "sampling", "playback"]
    assert len(cfg.tasks_by_role("primitive")) == 5
    assert cfg.horizon == 20 and cfg.ce.top_m == 50 and cfg.ce.samples_per_primitive == 10
    assert cfg.segment.seed == cfg.seed
    assert load_config(overrides={"experiment.seed": "4"}).segment.seed == 4


def test_config_file_layering_and_hash(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[ce]\nrho = 0.2\n")
    cfg = load_config(p)
    assert cfg.ce.rho == 0.2 and cfg.ce.top_m == 50
    assert cfg.config_hash != load_config().config_hash
    assert load_config().config_hash == load_config().config_hash
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.ini")
    with pytest.raises(ValueError):
        load_config(overrides={"experiment.architecture": "huge"})


def test_cli_missing_prerequisite_is_one_json_line(tmp_path, capsys):
    for stage, producer in [("segment", "collect"), ("train-lower", "segment"),
                            ("train-ltof", "collect"), ("run", "train-lower"),
                            ("eval-report", "run")]:
        assert cli(stage, tmp_path) != 0
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1
        rec = json.loads(err[0])
        assert rec["error"] == "missing_prerequisite" and rec["stage"] == stage
        assert producer in rec["message"]


def test_cli_bad_override_and_config(tmp_path, capsys):
    assert main(["collect", "--out", str(tmp_path), "--set", "nodot"]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ValueError"
    assert main(["collect", "--out", str(tmp_path), "--config", str(tmp_path / "x.ini")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"
    with pytest.raises(SystemExit):
        main(["nonsense"])


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.startswith("timing")}


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    outs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"tiny{i}")
        assert cli("all", out, sets=TINY + ["experiment.trials=1", "experiment.eval_tasks=validation"]) == 0
        outs.append(out)
    return outs


def test_pipeline_writes_every_artifact(tiny_runs):
    out = tiny_runs[0]
    for rel in ["demos/manifest.csv", "primitives/manifest.csv", "models/bank.json", "models/ltof.json",
                "models/manifest.csv", "runs/results.csv", "runs/summary.csv", "runs/summary.txt",
                "runs/timing.csv", "report/report.csv", "report/report.txt",
                "report/timing_report.txt"]:
        assert (out / rel).is_file(), rel
    for ctl in ("baseline", "learning", "sampling", "playback"):
        assert (out / "models" / "upper" / f"{ctl}__validation.json").is_file()
        assert (out / "runs" / ctl / "validation" / "trial_00.csv").is_file()
    assert len(list((out / "primitives").glob("prim_*.csv"))) == 50
    first = (out / "runs" / "results.csv").read_text().splitlines()
    assert first[0].startswith("# config_hash=") and "seed=0" in first[0]
    assert first[1].split(",") == list(RESULT_HEADER)
    assert len(first) == 2 + 4


def test_pipeline_is_byte_deterministic(tiny_runs):
    a, b = (_tree(o) for o in tiny_runs)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_summary_table_layout(tiny_runs):
    table = summary_table(load_results(tiny_runs[0]))
    assert set(table) == {(c, "validation") for c in ("baseline", "learning", "sampling", "playback")}
    assert all(n == 1 and s in (0, 1) for s, n in table.values())
    txt = (tiny_runs[0] / "runs" / "summary.txt").read_text()
    assert "Sampling-based" in txt and "Playback-based" in txt


def test_run_subset_and_seed_override(tmp_path, tiny_runs, capsys):
    # reuse trained models from one tiny run but re-run a single controller with another seed
    import shutil
    out = tmp_path / "copy"
    shutil.copytree(tiny_runs[0], out)
    assert cli("run", out, "--controllers", "playback", "--tasks", "validation", "--trials", "1") == 0
    assert "Playback-based" in capsys.readouterr().out
    assert cli("run", out, "--controllers", "nosuch") == 1
    assert json.loads(capsys.readouterr().err)["stage"] == "run"
