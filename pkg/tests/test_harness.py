import json
import math

import pytest

from twirls.harness import (ConfigError, ExperimentError, apply_axis, build_dataset, compare_oversmoothing,
                            load_config, log_grid, mean_by, parse_config, parse_values, robustness_study,
                            run_experiment, sweep)

SMALL = {
    "name": "small",
    "dataset": {"generator": "sbm", "params": {"n": 60, "classes": 3, "target_h": 0.8, "avg_degree": 5.0}},
    "propagation": {"steps": 4, "lam": 1.0,
                    "attention": {"kind": "truncated_lp", "p": 0.1, "tau": 0.2, "T": 2.0}},
    "model": {"K": 1, "hidden": 8},
    "train": {"epochs": 8, "learning_rate": 0.05},
    "seeds": [0, 1],
}


def small(**over):
    doc = json.loads(json.dumps(SMALL))
    doc.update(over)
    return parse_config(doc)


def test_schema_rejects_unknown_and_bad_keys():
    for bad in [{**SMALL, "extra": 1},
                {**SMALL, "model": {"K": -1}},
                {**SMALL, "propagation": {"steps": 2, "sped": 3}},
                {**SMALL, "dataset": {"generator": "grid"}},
                {"seeds": [0]}]:
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError, match="alpha"):
        parse_config({**SMALL, "propagation": {"steps": 2, "alpha": 0.0}})


def test_infinite_T_and_round_trip():
    doc = {**SMALL, "propagation": {"steps": 2, "attention": {"kind": "truncated_lp", "p": 1, "tau": 0.1,
                                                               "T": "inf"}}}
    cfg = parse_config(doc)
    assert math.isinf(cfg.propagation.attention.T)
    back = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()


def test_load_config_errors_and_relative_path(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "c.json").write_text(json.dumps({"dataset": {"path": "data/x"}}))
    assert load_config(tmp_path / "c.json").dataset["path"] == str((tmp_path / "data/x").resolve())


def test_generator_seed_defaults_to_run_seed():
    spec = SMALL["dataset"]
    assert build_dataset(spec, 0).graph.edges.tolist() != build_dataset(spec, 1).graph.edges.tolist()
    fixed = {**spec, "params": {**spec["params"], "seed": 5}}
    assert build_dataset(fixed, 0).graph.edges.tolist() == build_dataset(fixed, 1).graph.edges.tolist()
    with pytest.raises(ConfigError):
        build_dataset({"generator": "sbm", "params": {"bogus": 1}}, 0)


def test_run_experiment_outputs_are_reproducible(tmp_path):
    texts = []
    for k in range(2):
        cfg = small(outputs=str(tmp_path / f"run{k}"))
        report = run_experiment(cfg)
        texts.append((tmp_path / f"run{k}" / "results.csv").read_bytes())
        doc = json.loads((tmp_path / f"run{k}" / "report.json").read_text())
        assert set(doc) == {"config", "dataset_hash", "runs", "summary", "wall_time_s"}
        assert len(doc["runs"][0]["curve"]) == 8
    assert texts[0] == texts[1]
    s = report["summary"]
    accs = [r["test_accuracy"] for r in report["runs"]]
    assert s["accuracy_mean"] == pytest.approx(sum(accs) / 2)
    assert s["accuracy_std"] == pytest.approx(abs(accs[0] - accs[1]) / 2)


def test_run_experiment_wraps_module_errors(tmp_path):
    cfg = small(dataset={"path": str(tmp_path / "nowhere")})
    with pytest.raises(ExperimentError, match="seed 0"):
        run_experiment(cfg)


def test_single_value_sweep_equals_run_experiment():
    cfg = small()
    text = sweep(cfg, "prop_steps", [4], write=False)
    rows = [ln.split(",") for ln in text.strip().split("\n")[1:]]
    report = run_experiment(cfg, write=False)
    expect = [(str(r["seed"]), m, repr(r[m])) for r in report["runs"] for m in ("test_accuracy", "test_macro_f1")]
    assert [(r[1], r[2], r[3]) for r in rows] == expect


def test_grid_sweep_layout():
    text = sweep(small(seeds=[0]), ["prop_steps", "alpha"], [[0, 2], [0.5, 1.0]], write=False)
    lines = text.strip().split("\n")
    assert lines[0] == "prop_steps,alpha,seed,metric,value"
    assert len(lines) == 1 + 4 * 2
    assert [ln.split(",")[:2] for ln in lines[1::2]] == [["0", "0.5"], ["0", "1.0"], ["2", "0.5"], ["2", "1.0"]]


def test_apply_axis():
    cfg = small()
    assert apply_axis(cfg, "T", 5.0).propagation.attention.T == 5.0
    assert apply_axis(cfg, "mlp_layers", 3).model.K == 3
    assert apply_axis(small(model={"K": 0, "L": 1}), "mlp_layers", 2).model.L == 2
    for axis, v in [("prop_steps", 1.5), ("alpha", -1.0), ("bogus", 1)]:
        with pytest.raises(ConfigError):
            apply_axis(cfg, axis, v)
    with pytest.raises(ConfigError):
        apply_axis(small(propagation={"steps": 2}), "T", 1.0)


def test_log_grid_and_values():
    assert log_grid(1) == [1]
    assert log_grid(64) == [1, 2, 4, 8, 16, 32, 64]
    assert log_grid(10) == [1, 2, 4, 8, 10]
    assert parse_values("1, 2.5,inf") == [1, 2.5, math.inf]
    with pytest.raises(ConfigError):
        parse_values("1,x")


def test_oversmoothing_grid_of_one_gives_one_row_per_seed():
    cfg = small(model={"K": 0, "L": 1}, propagation={"steps": 1, "lam": 1.0})
    rows = compare_oversmoothing(cfg, grid=[2], write=False)
    assert len(rows) == 2 and {r["steps"] for r in rows} == {2}
    assert all(0 <= r["sgc_accuracy"] <= 1 and r["unfolded_dispersion"] >= 0 for r in rows)
    assert list(mean_by(rows, "steps", "sgc_accuracy")) == [2]


def test_robustness_rate_zero_matches_clean_runs():
    cfg = small(seeds=[0])
    rows = robustness_study(cfg, [0.0], write=False)
    clean = run_experiment(cfg, write=False)["runs"][0]["test_accuracy"]
    att = [r for r in rows if r["model"] == "attention"][0]
    assert att["test_accuracy"] == clean and {r["model"] for r in rows} == {"attention", "base"}
    with pytest.raises(ConfigError):
        robustness_study(small(propagation={"steps": 2}), [0.1])
