import csv
import json
from pathlib import Path

import pytest
import yaml

import harness
from config import read_config_echo
from conftest import TINY_OVERRIDES
from errors import ConfigError, IncomparableRunsError, RunFailedError
from gan_models import load_checkpoint, read_fgs
from harness import (ASSERTION_RE, FAILED_MARKER, compare, compare_runs, evaluate_assertion, load_assertions, load_run,
                     run_scenario, summarize_rounds, sweep_configs, sweep_trigger_sizes)
from main import EXIT_ASSERTION, EXIT_CONFIG, EXIT_OK, main
from schema_validator import ROUND_RECORD_SCHEMA, JSONSchemaValidator


@pytest.fixture
def finished_run(tiny_config):
    """Run a tiny scenario and return its directory."""

    def make(name, *overrides, preset="attack"):
        return run_scenario(tiny_config(f"name={name}", *overrides, preset=preset))

    return make


def _lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


# --- run ----------------------------------------------------------------------
def test_run_writes_every_artefact(finished_run):
    run_dir = finished_run("smoke")
    for rel in ("config.yaml", "rounds.jsonl", "metrics.json", "run.log", "checkpoints/g_server.fgs",
                "samples/round_0001.fgs", "samples/round_0002.fgs", "samples/final.fgs"):
        assert (run_dir / rel).is_file(), rel
    assert not (run_dir / FAILED_MARKER).exists()

    records = _lines(run_dir / "rounds.jsonl")
    assert [r["t"] for r in records] == [0, 1, 2]
    assert "metrics" in records[1] and "metrics" not in records[0]

    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["name"] == "smoke" and metrics["scenario"] == "attack"
    assert metrics["malicious_ids"] == [2]
    assert [e["t"] for e in metrics["evaluations"]] == [1, 2]
    assert metrics["best"]["t"] in (1, 2)
    assert metrics["final"]["n_fake"] == 64
    assert metrics["final"]["modes_covered"] is not None
    assert isinstance(metrics["final"]["trigger_residue"], float)
    assert len(metrics["summary"]["clients"]) == 3

    params, header = load_checkpoint(run_dir / "checkpoints" / "g_server.fgs")
    assert header["step"] == 3
    assert params.spec.layer_sizes == (4, 8, 3)
    _, samples = read_fgs(run_dir / "samples" / "final.fgs")
    assert samples.shape == (64, 3)


def test_round_records_match_schema(finished_run):
    run_dir = finished_run("schema_check", "detection.warmup=1", preset="global_defense")
    validator = JSONSchemaValidator()
    for record in _lines(run_dir / "rounds.jsonl"):
        assert validator.problems(record, ROUND_RECORD_SCHEMA) == []


def test_rerun_from_config_echo_is_byte_identical(finished_run, tmp_path):
    first = finished_run("replay")
    cfg = read_config_echo(first / "config.yaml")
    second = run_scenario(cfg, tmp_path / "again")
    for rel in ("rounds.jsonl", "metrics.json", "checkpoints/g_server.fgs", "samples/final.fgs"):
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


def test_failed_run_leaves_marker(tiny_config, monkeypatch):
    def explode(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(harness, "run_training", explode)
    cfg = tiny_config("name=broken")
    with pytest.raises(RunFailedError):
        run_scenario(cfg)
    run_dir = harness.resolve_run_dir(cfg)
    assert "boom" in (run_dir / FAILED_MARKER).read_text(encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run(run_dir)


# --- summaries ----------------------------------------------------------------
def test_summarize_rounds():
    records = [
        {"t": t, "losses": [1.0 + t, None if t == 1 else 2.0], "d_losses": [0.5, 0.05 if t >= 2 else 0.5],
         "detected": [1] if t >= 3 else [], "counters": [0, max(0, t - 2)], "weights_norm": [0.6, 0.4]}
        for t in range(5)
    ]
    summary = summarize_rounds(records)
    assert summary["rounds"] == 5
    honest, attacker = summary["clients"]
    assert honest["g_loss_first_decile"] == 1.0 and honest["g_loss_last_decile"] == 5.0
    assert honest["first_detected_round"] is None and honest["d_saturated_round"] is None
    assert attacker["d_saturated_round"] == 2
    assert attacker["first_detected_round"] == 3 and attacker["times_detected"] == 2
    assert attacker["final_counter"] == 2 and attacker["final_weight"] == 0.4
    assert summarize_rounds([]) == {"rounds": 0, "clients": []}


# --- compare ------------------------------------------------------------------
def test_compare_evaluates_assertions_and_writes_reports(finished_run, tmp_path):
    runs = [finished_run("clean", preset="vanilla"), finished_run("poisoned")]
    report = compare(runs, ["clean.frechet <= clean.frechet", "2 * poisoned.frechet >= poisoned.frechet"],
                     tmp_path / "cmp")
    assert report.passed
    assert set(report.runs) == {"clean", "poisoned"}

    doc = json.loads((tmp_path / "cmp" / "report.json").read_text(encoding="utf-8"))
    assert doc["passed"] is True and len(doc["assertions"]) == 2
    with open(tmp_path / "cmp" / "report.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["label"] for r in rows] == [r["label"] for r in doc["rows"]]
    for csv_row, json_row in zip(rows, doc["rows"]):
        assert float(csv_row["final_frechet"]) == json_row["final_frechet"]
        assert float(csv_row["final_kid"]) == json_row["final_kid"]


def test_compare_reports_failed_assertion(finished_run):
    runs = [finished_run("a"), finished_run("b")]
    report = compare(runs, ["a.frechet < a.frechet"])
    assert not report.passed
    assert report.assertions[0].lhs == report.assertions[0].rhs


def test_compare_needs_two_distinct_runs(finished_run):
    run = finished_run("solo")
    with pytest.raises(ConfigError):
        compare([run], [])
    with pytest.raises(ConfigError):
        compare([run, run], [])


def test_compare_refuses_different_dataset_seeds(finished_run):
    runs = [finished_run("seed0"), finished_run("seed1", "data.seed=1")]
    with pytest.raises(IncomparableRunsError):
        compare(runs, [])


def test_assertion_errors(finished_run):
    runs = {"x": load_run(finished_run("x"))}
    with pytest.raises(ConfigError):
        evaluate_assertion("x.frechet is small", runs)
    with pytest.raises(ConfigError):
        evaluate_assertion("x.speed <= x.frechet", runs)
    with pytest.raises(ConfigError):
        evaluate_assertion("y.frechet <= x.frechet", runs)
    assert evaluate_assertion("x.hq ≤ 1.5 * x.hq", runs).passed


def test_compare_runs_reads_assertion_file(finished_run, tmp_path):
    runs = [finished_run("left"), finished_run("right")]
    path = tmp_path / "assertions.yaml"
    path.write_text(yaml.safe_dump({"assertions": ["left.modes >= left.modes"]}), encoding="utf-8")
    assert compare_runs(runs, path).passed
    path.write_text(yaml.safe_dump({"assertions": []}), encoding="utf-8")
    with pytest.raises(ConfigError):
        compare_runs(runs, path)


# --- sweep --------------------------------------------------------------------
def test_sweep_preconditions(tiny_config):
    with pytest.raises(ConfigError):
        sweep_configs(tiny_config("data.kind=tiny_images", "data.image_size=8"), [])
    with pytest.raises(ConfigError):
        sweep_configs(tiny_config(), [1])


def test_sweep_configs_pair_arms_per_size(tiny_config):
    base = tiny_config("data.kind=tiny_images", "data.image_size=8", "detection.warmup=1", preset="attack")
    configs = sweep_configs(base, [1, 2])
    assert [c.name for c in configs] == ["local_defense_s1", "full_defense_s1", "local_defense_s2", "full_defense_s2"]
    assert [c.trigger.size for c in configs] == [1, 1, 2, 2]
    assert all(c.training.malicious_ids == (2,) for c in configs)
    assert [c.detection.enabled for c in configs] == [False, True, False, True]


def test_sweep_trigger_sizes_writes_deltas(tiny_config, tmp_path):
    base = tiny_config("data.kind=tiny_images", "data.image_size=8", "detection.warmup=1", preset="attack")
    report = sweep_trigger_sizes(base, [1], out_dir=tmp_path / "sweep")
    (delta,) = report.extras["trigger_sweep"]
    assert delta["size"] == 1
    local, full = report.runs["local_defense_s1"], report.runs["full_defense_s1"]
    assert delta["kid_delta"] == pytest.approx(full.value("kid") - local.value("kid"))
    assert delta["residue_full"] == pytest.approx(full.value("residue"))
    doc = json.loads((tmp_path / "sweep" / "report.json").read_text(encoding="utf-8"))
    assert doc["trigger_sweep"][0]["size"] == 1


# --- command line -------------------------------------------------------------
def _tiny_cli_sets(tmp_path):
    args = []
    for item in [*TINY_OVERRIDES, f"output_root={tmp_path / 'cli'}"]:
        args.extend(["--set", item])
    return args


def test_cli_run_and_compare(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    env = ["--env-file", str(tmp_path / "none.env")]
    sets = _tiny_cli_sets(tmp_path)
    assert main([*env, "run", "--preset", "vanilla", *sets]) == EXIT_OK
    assert main([*env, "run", "--preset", "attack", *sets]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert printed[-1].endswith("attack")

    runs = [str(tmp_path / "cli" / "vanilla"), str(tmp_path / "cli" / "attack")]
    good, bad = tmp_path / "good.yaml", tmp_path / "bad.yaml"
    good.write_text(yaml.safe_dump({"assertions": ["vanilla.frechet <= vanilla.frechet"]}), encoding="utf-8")
    bad.write_text(yaml.safe_dump({"assertions": ["attack.frechet > attack.frechet"]}), encoding="utf-8")
    assert main([*env, "compare", *runs, "--assert", str(good)]) == EXIT_OK
    assert (tmp_path / "cli" / "comparison" / "report.json").is_file()
    assert main([*env, "compare", *runs, "--assert", str(bad)]) == EXIT_ASSERTION
    assert main([*env, "compare", runs[0], "--assert", str(good)]) == EXIT_CONFIG


def test_cli_config_errors(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    env = ["--env-file", str(tmp_path / "none.env")]
    assert main([*env, "run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    assert main([*env, "run", "--set", "training.malicious_ids=[0, 1]"]) == EXIT_CONFIG
    assert main([*env, "sweep-trigger", "--sizes", "1,x"]) == EXIT_CONFIG


def test_cli_gen_data(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDGAN_OUTPUT_ROOT", raising=False)
    out = tmp_path / "data" / "poisoned"
    code = main(["--env-file", str(tmp_path / "none.env"), "gen-data", "--kind", "images", "--image-size", "8",
                 "--n", "10", "--trigger-size", "2", "--out", str(out)])
    assert code == EXIT_OK
    header, samples = read_fgs(out.with_suffix(".fgs"))
    assert samples.shape == (10, 64)
    sidecar = json.loads(out.with_suffix(".json").read_text(encoding="utf-8"))
    assert sidecar["poisoned_fraction"] == 1.0
    assert main(["--env-file", str(tmp_path / "none.env"), "gen-data", "--kind", "ring", "--marker-dims", "1",
                 "--trigger-size", "2", "--out", str(out)]) == EXIT_CONFIG


def test_bundled_assertions_are_well_formed():
    for text in load_assertions(Path(__file__).resolve().parent.parent / "configs" / "assertions.yaml"):
        assert ASSERTION_RE.match(text), text
