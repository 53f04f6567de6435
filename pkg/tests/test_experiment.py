import json

import pytest

from tailspace import cli
from tailspace import experiment as E

SMALL = {
    "model": {"d_in": 8, "width": 8, "d_out": 8, "depth": 2},
    "task": {"n_train": 64, "teacher_rank": 2},
    "strategies": ["vanilla"],
    "ranks": [2],
    "seeds": [0],
    "calibration": {"n_samples": 16},
    "train": {"learning_rate": 1e-3, "batch_size": 16, "max_steps": 5},
}


def config(**over):
    raw = json.loads(json.dumps(SMALL))
    raw.update(over)
    return E.parse_config(raw)


def test_singleton_grid(tmp_path):
    manifest = E.run_experiment(config(), tmp_path)
    assert len(manifest["runs"]) == 1 and manifest["failed"] == 0
    rec = manifest["runs"][0]
    run_dir = tmp_path / rec["dir"]
    for key in ("metrics", "summary", "plot_data", "report_pre", "report_post"):
        assert (run_dir / rec[key]).exists()
    for path in rec["adapters"]:
        assert (run_dir / path).exists()
    assert (tmp_path / "manifest.json").exists()
    assert not (tmp_path / "manifest.json.tmp").exists()


def test_grid_cardinality(tmp_path):
    cfg = config(strategies=["astra_tail", "quantile:top"], ranks=[2, 4], seeds=[0, 1])
    manifest = E.run_experiment(cfg, tmp_path)
    assert len(manifest["runs"]) == 8
    assert {(r["strategy"], r["rank"], r["seed"]) for r in manifest["runs"]} == \
        {(s, r, seed) for s in cfg.strategies for r in cfg.ranks for seed in cfg.seeds}


def test_rerun_is_bit_identical(tmp_path):
    cfg = config(strategies=["astra_tail", "vanilla"], seeds=[3])
    one = E.run_experiment(cfg, tmp_path / "a")
    two = E.run_experiment(cfg, tmp_path / "b")
    assert one == two
    for rec in one["runs"]:
        for key in ("metrics", "report_pre", "report_post"):
            a = (tmp_path / "a" / rec["dir"] / rec[key]).read_bytes()
            assert a == (tmp_path / "b" / rec["dir"] / rec[key]).read_bytes()


def test_parallel_matches_sequential(tmp_path):
    cfg = config(strategies=["astra_tail", "pissa"])
    seq = E.run_experiment(cfg, tmp_path / "seq")
    cfg.workers = 2
    par = E.run_experiment(cfg, tmp_path / "par")
    assert seq == par
    for rec in seq["runs"]:
        assert (tmp_path / "seq" / rec["dir"] / "metrics.csv").read_bytes() == \
            (tmp_path / "par" / rec["dir"] / "metrics.csv").read_bytes()


def test_hash_ignores_output_dir_only():
    assert config(out="x").hash() == config(out="y").hash()
    assert config().hash() != config(seeds=[1]).hash()
    assert config().hash() != E.parse_config({**SMALL, "train": {**SMALL["train"], "adam_eps": 1e-7}}).hash()
    # an omitted default hashes like an explicit one
    assert config().hash() == E.parse_config({**SMALL, "alpha": "equal_to_rank"}).hash()


def test_validation_lists_every_problem():
    raw = {**SMALL, "strategies": ["dora", "quantile:q9"], "ranks": [0, 99], "seeds": [],
           "alpha": -1, "calibration": {"source": "web"}, "bogus": 1}
    with pytest.raises(E.ConfigError) as err:
        E.parse_config(raw)
    text = "\n".join(err.value.problems)
    for needle in ("dora", "q9", "ranks: 0", "99 exceeds", "seeds", "alpha", "web", "bogus"):
        assert needle in text
    assert len(err.value.problems) >= 8


def test_failed_cell_is_recorded_and_grid_continues(tmp_path, monkeypatch):
    real = E.run_training

    def flaky(model, data, cfg, state=None):
        if cfg.seed == 1:
            raise FloatingPointError("non-finite loss at step 3")
        return real(model, data, cfg, state)

    monkeypatch.setattr(E, "run_training", flaky)
    manifest = E.run_experiment(config(seeds=[0, 1]), tmp_path)
    status = {r["seed"]: r["status"] for r in manifest["runs"]}
    assert status == {0: "ok", 1: "failed"} and manifest["failed"] == 1
    assert "step 3" in manifest["runs"][1]["error"]
    rows = E.compare(manifest, tmp_path)
    assert rows[0]["n_runs"] == 1 and rows[0]["missing"] == 1


def test_compare_means_and_order(tmp_path):
    manifest = E.run_experiment(config(strategies=["vanilla", "astra_tail"], seeds=[0, 1]), tmp_path)
    rows = E.compare(manifest, tmp_path, tmp_path / "comparison.csv")
    results, missing = E.read_results(manifest, tmp_path)
    assert not missing
    for row in rows:
        finals = [r.final_loss for r in results if r.strategy == row["strategy"]]
        assert abs(row["mean_final_loss"] - sum(finals) / len(finals)) < 1e-12
    assert rows[0]["mean_final_loss"] <= rows[1]["mean_final_loss"]
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == ",".join(E.COMPARISON_HEADER) and len(lines) == 3


def test_compare_single_run_echoes_final(tmp_path):
    manifest = E.run_experiment(config(), tmp_path)
    rec = manifest["runs"][0]
    summary = json.loads((tmp_path / rec["dir"] / "summary.json").read_text())
    assert E.compare(manifest, tmp_path)[0]["mean_final_loss"] == summary["final_loss"]


def test_compare_marks_gaps(tmp_path):
    manifest = E.run_experiment(config(strategies=["vanilla", "pissa"]), tmp_path)
    (tmp_path / manifest["runs"][1]["dir"] / "summary.json").unlink()
    rows = E.compare(manifest, tmp_path, tmp_path / "c.csv")
    assert rows[-1]["mean_final_loss"] is None and rows[-1]["missing"] == 1
    assert "NA" in (tmp_path / "c.csv").read_text().splitlines()[-1]


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "out"
    assert cli.main(["experiment", "--config", str(cfg), "--out", str(out), "--log-level", "WARNING"]) == 0
    assert cli.main(["compare", "--out", str(out), "--config", str(cfg)]) == 0
    assert (out / "comparison.csv").exists()
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**SMALL, "ranks": []}))
    assert cli.main(["experiment", "--config", str(bad)]) == 1
    assert cli.main(["compare", "--out", str(tmp_path / "nowhere")]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert "ranks must be a non-empty list" in capsys.readouterr().err


def test_cli_partial_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise ArithmeticError("boom")

    monkeypatch.setattr(E, "run_training", broken)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "o"), "--log-level", "ERROR"]) == 2


def test_cli_single_stage_verbs(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    base = ["--config", str(cfg), "--out", str(tmp_path), "--log-level", "WARNING"]
    assert cli.main(["calibrate", *base, "--seed", "2"]) == 0
    assert (tmp_path / "covariances" / "fc_0.cov.tspm").exists()
    assert cli.main(["init", *base, "--strategy", "astra_tail", "--rank", "3"]) == 0
    assert (tmp_path / "adapters" / "astra_tail_r3_s0" / "fc_1.adapter").exists()
    assert cli.main(["train", *base, "--strategy", "quantile:q1"]) == 0
    assert (tmp_path / "quantile-q1_r2_s0" / "metrics.csv").exists()
    assert cli.main(["analyze", *base]) == 0
    assert cli.main(["analyze", *base, "--model", str(tmp_path / "model.ckpt")]) == 0
    assert cli.main(["init", *base, "--strategy", "nope"]) == 1
