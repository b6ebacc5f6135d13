#!/usr/bin/env python3
# -----------------------------------------------------------
"""
Experiment harness: run one scenario, compare finished runs, sweep trigger sizes.

A run directory is self-describing:

    <output_root>/<name>/
        config.yaml          fully-resolved config echo (fidelity: desk)
        rounds.jsonl         one RoundRecord per line, flushed every round
        metrics.json         final + best metrics, evaluations, loss/detection summary
        checkpoints/         g_server.fgs (FGS1 parameter file)
        samples/             round_XXXX.fgs and final.fgs generated sample dumps
        run.log              plain-text copy of the log
        FAILED               only present when the run aborted

Usage:
    run_dir = run_scenario(parse_config("configs/desk.yaml", preset="attack"))
    report = compare_runs([vanilla_dir, attack_dir], "configs/assertions.yaml")
"""

import concurrent.futures
import csv
import json
import operator
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import RunConfig, ScenarioPreset, load_yaml, read_config_echo, with_changes, write_config_echo
from errors import ConfigError, IncomparableRunsError, RunFailedError
from federation import RoundRecord, TrainingResult, make_trigger, reference_dataset, run_training, sample_generator
from gan_models import ParamVector, save_checkpoint, write_fgs
from logger_setup import LoggerSetup
from metrics import MetricsReport, score_samples
from poisoning import DatasetKind
from schema_validator import ASSERTIONS_SCHEMA, JSONSchemaValidator

# ---------------------------------------------------------------------------
# 1) Logger Setup
# ---------------------------------------------------------------------------
logger = LoggerSetup.setup_logger("Harness")

SAMPLE_CAP = 4096
D_SATURATION = 0.1
FAILED_MARKER = "FAILED"


# ---------------------------------------------------------------------------
# 2) Run one scenario
# ---------------------------------------------------------------------------
class RoundWriter:
    """Appends RoundRecords to rounds.jsonl, flushing every line so a crash leaves valid JSONL."""

    def __init__(self, path: Path):
        self.path = path
        self._file = open(path, "w", encoding="utf-8")

    def write(self, record: RoundRecord) -> None:
        self._file.write(json.dumps(record.to_json(), allow_nan=False) + "\n")
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def _trigger_block(cfg: RunConfig, shape: Tuple[int, ...]) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    try:
        trigger = make_trigger(cfg)
    except ValueError:
        return None
    return (trigger.block_index(shape), trigger.pattern) if trigger.fits(shape) else None


class ScenarioEvaluator:
    """
    Scores G_server against a clean reference set on evaluation rounds and
    dumps the generated samples next to the run.
    """

    def __init__(self, cfg: RunConfig, run_dir: Path):
        self.cfg = cfg
        self.samples_dir = run_dir / "samples"
        self.logger = LoggerSetup.setup_logger(self.__class__.__name__)
        self.reference = reference_dataset(cfg)
        ring = cfg.data.kind is DatasetKind.GAUSSIAN_RING
        self.modes = self.reference.centers if ring else None
        self.sigma = cfg.data.sigma if ring else None
        # residue is measured even on clean runs, as a baseline
        self.trigger = _trigger_block(cfg, self.reference.sample_shape)
        self.n_samples = min(cfg.training.eval_samples, SAMPLE_CAP)
        self.evaluations: List[Dict[str, Any]] = []

    def generate(self, g: ParamVector, tag: int) -> np.ndarray:
        return sample_generator(g, self.n_samples, [self.cfg.training.seed, 2**20 + tag])

    def score(self, samples: np.ndarray) -> MetricsReport:
        return score_samples(self.reference.samples, samples, self.cfg.data.kind.value,
                             self.cfg.data.seed, self.modes, self.sigma, self.trigger)

    def __call__(self, t: int, g: ParamVector) -> Dict[str, Any]:
        samples = self.generate(g, t)
        write_fgs(self.samples_dir / f"round_{t:04d}.fgs", {"kind": "samples", "round": t}, samples)
        report = self.score(samples)
        self.logger.info(
            "Round %d metrics: frechet=%.4f kid(x1e3)=%.4f modes=%s hq=%s residue=%s",
            t, report.frechet, report.mmd_poly3, report.modes_covered,
            "-" if report.hq_fraction is None else "%.3f" % report.hq_fraction,
            "-" if report.trigger_residue is None else "%.3f" % report.trigger_residue,
        )
        self.evaluations.append({"t": t, **report.to_dict()})
        return report.to_dict()

    def best(self) -> Optional[Dict[str, Any]]:
        if not self.evaluations:
            return None
        return min(self.evaluations, key=lambda e: (e["mmd_poly3"], e["t"]))


def _decile_mean(values: Sequence[Optional[float]], last: bool) -> Optional[float]:
    finite = [v for v in values if v is not None]
    if not finite:
        return None
    width = max(1, len(finite) // 10)
    chunk = finite[-width:] if last else finite[:width]
    return float(np.mean(chunk))


def summarize_rounds(records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Per-client loss curve and detection timeline summary from rounds.jsonl objects."""
    if not records:
        return {"rounds": 0, "clients": []}
    n_clients = len(records[0]["losses"])
    clients = []
    for i in range(n_clients):
        g_curve = [r["losses"][i] for r in records]
        d_curve = [r["d_losses"][i] for r in records]
        saturated = next((r["t"] for r in records if r["d_losses"][i] is not None and r["d_losses"][i] < D_SATURATION), None)
        first_detected = next((r["t"] for r in records if i in r["detected"]), None)
        clients.append({
            "id": i,
            "g_loss_first_decile": _decile_mean(g_curve, last=False),
            "g_loss_last_decile": _decile_mean(g_curve, last=True),
            "d_loss_first_decile": _decile_mean(d_curve, last=False),
            "d_loss_last_decile": _decile_mean(d_curve, last=True),
            "d_saturated_round": saturated,
            "first_detected_round": first_detected,
            "times_detected": sum(1 for r in records if i in r["detected"]),
            "final_counter": records[-1]["counters"][i],
            "final_weight": records[-1]["weights_norm"][i],
        })
    return {"rounds": len(records), "clients": clients}


def resolve_run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_root) / cfg.name


def run_scenario(cfg: RunConfig, run_dir: Optional[Union[str, Path]] = None) -> Path:
    """
    Train one configuration end to end and persist every artefact.

    A failure mid-run keeps the rounds written so far, drops a FAILED marker
    and raises RunFailedError.
    """
    run_dir = Path(run_dir) if run_dir is not None else resolve_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / FAILED_MARKER).unlink(missing_ok=True)
    log_handler = LoggerSetup.attach_file(run_dir / "run.log")
    writer = RoundWriter(run_dir / "rounds.jsonl")
    try:
        logger.info("Starting run '%s' (%s) in %s", cfg.name, cfg.scenario, run_dir)
        write_config_echo(cfg, run_dir / "config.yaml")
        evaluator = ScenarioEvaluator(cfg, run_dir)
        result = run_training(cfg, sink=writer.write, evaluator=evaluator)
        _finalize(cfg, run_dir, result, evaluator)
    except Exception as e:
        (run_dir / FAILED_MARKER).write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
        logger.critical("Run '%s' failed: %s", cfg.name, e)
        raise RunFailedError(f"run '{cfg.name}' failed: {e}") from e
    finally:
        writer.close()
        LoggerSetup.detach_file(log_handler)
    logger.info("Run '%s' complete: %s", cfg.name, run_dir)
    return run_dir


def _finalize(cfg: RunConfig, run_dir: Path, result: TrainingResult, evaluator: ScenarioEvaluator) -> None:
    g_server = result.server.g_server
    ckpt = save_checkpoint(run_dir / "checkpoints" / "g_server.fgs", g_server, step=cfg.training.rounds)
    logger.info("Checkpoint saved to %s", ckpt)

    final_samples = evaluator.generate(g_server, cfg.training.rounds)
    write_fgs(run_dir / "samples" / "final.fgs", {"kind": "samples", "round": cfg.training.rounds}, final_samples)
    final = evaluator.score(final_samples).to_dict()

    records = [r.to_json() for r in result.records]
    summary = {
        "name": cfg.name,
        "scenario": cfg.scenario,
        "dataset_seed": cfg.data.seed,
        "malicious_ids": list(cfg.training.malicious_ids),
        "rounds": cfg.training.rounds,
        "final": final,
        "best": evaluator.best(),
        "evaluations": evaluator.evaluations,
        "summary": summarize_rounds(records),
    }
    with open(run_dir / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)


# ---------------------------------------------------------------------------
# 3) Compare runs
# ---------------------------------------------------------------------------
METRIC_KEYS = {
    "frechet": ("final", "frechet"),
    "kid": ("final", "mmd_poly3"),
    "mmd": ("final", "mmd_poly3"),
    "modes": ("final", "modes_covered"),
    "hq": ("final", "hq_fraction"),
    "residue": ("final", "trigger_residue"),
    "best_frechet": ("best", "frechet"),
    "best_kid": ("best", "mmd_poly3"),
}

OPERATORS: Dict[str, Callable[[float, float], bool]] = {
    "<=": operator.le, "≤": operator.le,
    ">=": operator.ge, "≥": operator.ge,
    "<": operator.lt, ">": operator.gt,
}

_SIDE = r"\s*(?:(?P<{k}k>[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*\*\s*)?(?P<{k}label>[A-Za-z0-9_@-]+)\.(?P<{k}metric>[A-Za-z_]+)\s*"
ASSERTION_RE = re.compile(
    "^" + _SIDE.format(k="l") + r"(?P<op><=|>=|≤|≥|<|>)" + _SIDE.format(k="r") + "$"
)

CSV_FIELDS = [
    "label", "scenario", "dataset_seed", "rounds",
    "final_frechet", "final_kid", "final_modes_covered", "final_hq_fraction", "final_trigger_residue",
    "best_frechet", "best_kid", "best_t", "detections_total",
]


@dataclass
class RunSummary:
    label: str
    run_dir: str
    scenario: str
    dataset_seed: int
    metrics: Dict[str, Any]

    def value(self, metric: str) -> float:
        if metric not in METRIC_KEYS:
            raise ConfigError([(f"{self.label}.{metric}", f"unknown metric (expected one of {sorted(METRIC_KEYS)})")])
        section, key = METRIC_KEYS[metric]
        block = self.metrics.get(section) or {}
        value = block.get(key)
        if value is None:
            raise ConfigError([(f"{self.label}.{metric}", "metric not available for this run")])
        return float(value)

    def row(self) -> Dict[str, Any]:
        final = self.metrics["final"]
        best = self.metrics.get("best") or {}
        clients = self.metrics.get("summary", {}).get("clients", [])
        return {
            "label": self.label,
            "scenario": self.scenario,
            "dataset_seed": self.dataset_seed,
            "rounds": self.metrics.get("rounds"),
            "final_frechet": final["frechet"],
            "final_kid": final["mmd_poly3"],
            "final_modes_covered": final["modes_covered"],
            "final_hq_fraction": final["hq_fraction"],
            "final_trigger_residue": final.get("trigger_residue"),
            "best_frechet": best.get("frechet"),
            "best_kid": best.get("mmd_poly3"),
            "best_t": best.get("t"),
            "detections_total": sum(c["times_detected"] for c in clients),
        }


@dataclass
class AssertionOutcome:
    text: str
    lhs: float
    rhs: float
    passed: bool


@dataclass
class ComparisonReport:
    runs: Dict[str, RunSummary]
    assertions: List[AssertionOutcome]
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertions)

    def rows(self) -> List[Dict[str, Any]]:
        return [summary.row() for summary in self.runs.values()]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "rows": self.rows(),
            "runs": {
                label: {
                    "run_dir": s.run_dir,
                    "scenario": s.scenario,
                    "dataset_seed": s.dataset_seed,
                    "final": s.metrics["final"],
                    "best": s.metrics.get("best"),
                    "loss_curves": s.metrics.get("summary"),
                }
                for label, s in self.runs.items()
            },
            "assertions": [asdict(a) for a in self.assertions],
            **self.extras,
        }


def load_run(run_dir: Union[str, Path]) -> RunSummary:
    """Read a finished run from its own directory only."""
    run_dir = Path(run_dir)
    if (run_dir / FAILED_MARKER).exists():
        raise ConfigError([(str(run_dir), "run did not complete (FAILED marker present)")])
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.is_file():
        raise ConfigError([(str(run_dir), "not a completed run directory (metrics.json missing)")])
    cfg = read_config_echo(run_dir / "config.yaml")
    with open(metrics_path, "r", encoding="utf-8") as f:
        metrics = json.load(f)
    with open(run_dir / "rounds.jsonl", "r", encoding="utf-8") as f:
        records = [json.loads(line) for line in f if line.strip()]
    metrics["summary"] = summarize_rounds(records)
    return RunSummary(cfg.name, str(run_dir), cfg.scenario, cfg.data.seed, metrics)


def evaluate_assertion(text: str, runs: Dict[str, RunSummary]) -> AssertionOutcome:
    match = ASSERTION_RE.match(text)
    if match is None:
        raise ConfigError([(text, "assertion must look like '[k *] label.metric <op> [k *] label.metric'")])

    def side(prefix: str) -> float:
        label = match.group(f"{prefix}label")
        if label not in runs:
            raise ConfigError([(text, f"no run labelled '{label}' (have {sorted(runs)})")])
        factor = float(match.group(f"{prefix}k") or 1.0)
        return factor * runs[label].value(match.group(f"{prefix}metric"))

    lhs, rhs = side("l"), side("r")
    passed = OPERATORS[match.group("op")](lhs, rhs)
    logger.info("%s %s (%.6g vs %.6g)", "PASS" if passed else "FAIL", text, lhs, rhs)
    return AssertionOutcome(text, lhs, rhs, passed)


def load_assertions(path: Union[str, Path]) -> List[str]:
    doc = load_yaml(path)
    JSONSchemaValidator().validate(doc, ASSERTIONS_SCHEMA)
    return list(doc["assertions"])


def compare(run_dirs: Sequence[Union[str, Path]], assertions: Sequence[str],
            out_dir: Optional[Union[str, Path]] = None) -> ComparisonReport:
    if len(run_dirs) < 2:
        raise ConfigError([("runs", f"compare needs at least 2 completed runs, got {len(run_dirs)}")])
    runs: Dict[str, RunSummary] = {}
    for run_dir in run_dirs:
        summary = load_run(run_dir)
        if summary.label in runs:
            raise ConfigError([(str(run_dir), f"duplicate run label '{summary.label}'")])
        runs[summary.label] = summary
    seeds = {s.dataset_seed for s in runs.values()}
    if len(seeds) > 1:
        raise IncomparableRunsError(
            "runs use different dataset seeds: "
            + ", ".join(f"{label}={s.dataset_seed}" for label, s in runs.items())
        )
    report = ComparisonReport(runs, [evaluate_assertion(a, runs) for a in assertions])
    if out_dir is not None:
        write_report(report, Path(out_dir))
    return report


def compare_runs(run_dirs: Sequence[Union[str, Path]], assertions_path: Union[str, Path],
                 out_dir: Optional[Union[str, Path]] = None) -> ComparisonReport:
    """Load finished runs, evaluate the ordering assertions file, write report.json and report.csv."""
    return compare(run_dirs, load_assertions(assertions_path), out_dir)


def write_report(report: ComparisonReport, out_dir: Path) -> Tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out_dir / "report.json", out_dir / "report.csv"
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: "" if row[k] is None else row[k] for k in CSV_FIELDS})
    logger.info("Comparison report written to %s and %s", json_path, csv_path)
    return json_path, csv_path


# ---------------------------------------------------------------------------
# 4) Trigger size sweep
# ---------------------------------------------------------------------------
SWEEP_ARMS = (ScenarioPreset.LOCAL_DEFENSE, ScenarioPreset.FULL_DEFENSE)


def _run_in_worker(cfg: RunConfig) -> str:
    return str(run_scenario(cfg))


def sweep_configs(base_cfg: RunConfig, sizes: Sequence[int]) -> List[RunConfig]:
    if not sizes:
        raise ConfigError([("sizes", "sweep needs at least one trigger size")])
    if base_cfg.data.kind is not DatasetKind.TINY_IMAGES:
        raise ConfigError([("data.kind", "trigger size sweeps need tiny_images data")])
    configs = []
    for size in sizes:
        for arm in SWEEP_ARMS:
            overrides = [f"trigger.size={size}", f"name={arm.value}_s{size}"]
            configs.append(with_changes(base_cfg, overrides, preset=arm.value))
    return configs


def sweep_trigger_sizes(base_cfg: RunConfig, sizes: Sequence[int], workers: int = 1,
                        out_dir: Optional[Union[str, Path]] = None) -> ComparisonReport:
    """
    One local_defense and one full_defense run per trigger size, merged into a
    report with the full-minus-local delta per size.
    """
    configs = sweep_configs(base_cfg, sizes)
    logger.info("Sweeping trigger sizes %s: %d runs", list(sizes), len(configs))
    run_dirs: Dict[str, str] = {}
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            future_map = {executor.submit(_run_in_worker, c): c.name for c in configs}
            for fut in concurrent.futures.as_completed(future_map):
                run_dirs[future_map[fut]] = fut.result()
    else:
        for c in configs:
            run_dirs[c.name] = str(run_scenario(c))

    ordered = [run_dirs[c.name] for c in configs]
    assertions = [f"full_defense_s{s}.kid <= local_defense_s{s}.kid" for s in sizes]
    report = compare(ordered, assertions)
    deltas = []
    for s in sizes:
        local, full = report.runs[f"local_defense_s{s}"], report.runs[f"full_defense_s{s}"]
        deltas.append({
            "size": s,
            "frechet_delta": full.value("frechet") - local.value("frechet"),
            "kid_delta": full.value("kid") - local.value("kid"),
            "residue_local": local.metrics["final"].get("trigger_residue"),
            "residue_full": full.metrics["final"].get("trigger_residue"),
        })
    report.extras["trigger_sweep"] = deltas
    target = Path(out_dir) if out_dir is not None else Path(base_cfg.output_root) / "sweep_trigger"
    write_report(report, target)
    return report
