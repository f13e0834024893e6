import json

import pytest

from saal.cli import main

TINY = ["dataset.spec.num_samples=200", "trainer.epochs=2", "trainer.batch_size=50", "architecture.hidden_width=6"]


def _args(*extra, out):
    args = []
    for item in TINY:
        args += ["--set", item]
    return list(extra) + args + ["--out", str(out)]


def test_run_writes_outputs(tmp_path, capsys):
    assert main(["run"] + _args("--seed", "0", "--seed", "1", out=tmp_path)) == 0
    for seed in (0, 1):
        d = tmp_path / f"seed{seed}"
        assert (d / "history.jsonl").exists() and (d / "checkpoint.json").exists()
        report = json.loads((d / "report.json").read_text())
        assert report["seed"] == seed and report["config"]["trainer"]["epochs"] == 2
    mean = json.loads((tmp_path / "report_mean.json").read_text())
    assert mean["seeds"] == [0, 1] and set(mean["per_seed"]) == {"0", "1"}
    assert (tmp_path / "report_mean.txt").read_text().startswith("method")
    assert "D_MTL" in capsys.readouterr().out


def test_run_saal_e_stores_enumeration(tmp_path):
    assert main(["run", "--set", "strategy=saal_e"] + _args(out=tmp_path)) == 0
    assert (tmp_path / "seed0" / "relationships_enum.json").exists()


def test_invalid_shared_depth_exits_2(tmp_path, capsys):
    assert main(["run", "--set", "architecture.shared_depth=5"] + _args(out=tmp_path)) == 2
    assert "shared_depth" in capsys.readouterr().err
    assert not (tmp_path / "seed0").exists()


def test_unknown_key_and_missing_config_exit_2(tmp_path):
    assert main(["run", "--set", "trainer.bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["run", "--set", "strategy=magic"]) == 2


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({"dataset": {"generator": "separable", "spec": {"num_samples": 120}},
                               "trainer": {"epochs": 1, "batch_size": 40}, "strategy": "pcgrad"}))
    assert main(["run", "--config", str(cfg), "--set", "architecture.hidden_width=4", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "seed0" / "report.json").read_text())
    assert report["strategy"] == "pcgrad" and report["config"]["architecture"]["hidden_width"] == 4


def test_divergence_exits_3(tmp_path):
    assert main(["run", "--set", "trainer.eta0=1e30", "--set", "architecture.activation=relu"] + _args(out=tmp_path)) == 3


def test_relationships_and_correlation(tmp_path, capsys):
    extra = ["--set", "dataset.spec.extra_tasks=1"]
    assert main(["relationships", "--method", "enum"] + extra + _args(out=tmp_path)) == 0
    assert main(["relationships", "--method", "gradangle", "--set", "relationships.every=5"] + extra
                + _args(out=tmp_path)) == 0
    out = capsys.readouterr().out
    assert "spearman gradangle_vs_enum" in out
    for name in ("relationships_enum.json", "relationships_enum_seed0.json", "relationships_enum.txt",
                 "relationships_gradangle.json", "correlation_gradangle_vs_enum.json"):
        assert (tmp_path / name).exists()
    matrix = json.loads((tmp_path / "relationships_enum.json").read_text())["matrix"]
    assert matrix["method"] == "enum" and len(matrix["scores"]) == 3
    assert main(["report", str(tmp_path / "correlation_gradangle_vs_enum.json")]) == 0
    assert "mean" in capsys.readouterr().out


def test_bench(tmp_path):
    assert main(["bench", "--set", "bench.samples=3", "--set", "bench.warmup=1"] + _args(out=tmp_path)) == 0
    bench = json.loads((tmp_path / "bench.json").read_text())
    assert set(bench["rows"]) == {"equal", "saal_e", "saal_ew", "saal_w"}
    assert bench["rows"]["equal"]["ratio"] == 1.0 and bench["samples"] == 3


def test_sweep_shared_depth(tmp_path, capsys):
    assert main(["sweep-shared-depth", "--set", "architecture.total_encoder_depth=1"] + _args(out=tmp_path)) == 0
    sweep = json.loads((tmp_path / "sweep.json").read_text())
    assert [(r["strategy"], r["shared_depth"]) for r in sweep["rows"]] == [
        ("equal", 0), ("equal", 1), ("saal_e", 0), ("saal_e", 1)]
    assert main(["report", str(tmp_path / "sweep.json")]) == 0
    assert "saal_e@1" in capsys.readouterr().out


def test_report_rejects_unknown(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert main(["report", str(p)]) == 2


def test_jobs_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SAAL_JOBS", "two")
    assert main(["run"] + _args(out=tmp_path)) == 2
