"""
End-to-end statistical checks on the bundled ring config (N=4, one poisoned client, T=300, 5 seeds).

These take minutes, not seconds; run them with ``pytest -m slow``.
"""

import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from autodiff import Tensor, finite_diff
from config import build_config, compose_document, load_yaml
from gan_models import Activation, GanLossConfig, LossKind, MlpSpec, ParamVector, d_loss, g_loss
from harness import run_scenario

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"
SEEDS = range(5)
N_CLIENTS = 4
ROUNDS = 300
MALICIOUS = N_CLIENTS - 1


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    """metrics.json of (preset, seed), trained once per module."""
    root = tmp_path_factory.mktemp("acceptance")
    desk = load_yaml(DESK_CONFIG)
    cache = {}

    def get(preset, seed):
        if (preset, seed) not in cache:
            overrides = [
                f"name={preset}_{seed}",
                f"output_root={root}",
                f"training.n_clients={N_CLIENTS}",
                f"training.rounds={ROUNDS}",
                "training.eval_every=100",
                f"data.seed={seed}",
                f"training.seed={seed}",
                f"model.init_seed={seed}",
                f"detection.seed={seed}",
            ]
            run_dir = run_scenario(build_config(compose_document(desk, preset, overrides)))
            cache[(preset, seed)] = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
        return cache[(preset, seed)]

    return get


def _median(scenario, preset, key):
    return statistics.median(scenario(preset, s)["final"][key] for s in SEEDS)


def _passes(count):
    return count >= 4


def test_vanilla_fits_the_ring(scenario):
    assert _median(scenario, "vanilla", "modes_covered") == 8
    assert _median(scenario, "vanilla", "hq_fraction") >= 0.4


def test_attack_degrades_quality(scenario):
    assert _median(scenario, "attack", "mmd_poly3") >= 2.0 * _median(scenario, "vanilla", "mmd_poly3")
    # the poisoned generator smears mass off the modes rather than dropping whole modes
    assert _median(scenario, "attack", "hq_fraction") <= 0.5 * _median(scenario, "vanilla", "hq_fraction")


def test_trigger_survives_only_without_detection(scenario):
    attack = _median(scenario, "attack", "trigger_residue")
    assert attack > _median(scenario, "vanilla", "trigger_residue")
    assert attack > _median(scenario, "full_defense", "trigger_residue")


def test_malicious_discriminator_saturates_early(scenario):
    early = 0.2 * ROUNDS
    hits = 0
    for seed in SEEDS:
        clients = scenario("attack", seed)["summary"]["clients"]
        attacker = clients[MALICIOUS]["d_saturated_round"]
        benign_early = [c["d_saturated_round"] for c in clients[:MALICIOUS]
                        if c["d_saturated_round"] is not None and c["d_saturated_round"] < early]
        hits += attacker is not None and attacker < early and not benign_early
    assert _passes(hits)


@pytest.mark.parametrize("preset", ["global_defense", "full_defense"])
def test_detection_isolates_the_attacker(scenario, preset):
    hits = 0
    for seed in SEEDS:
        clients = scenario(preset, seed)["summary"]["clients"]
        counters = [c["final_counter"] for c in clients]
        top = counters[MALICIOUS]
        strictly_largest = all(top > c for i, c in enumerate(counters) if i != MALICIOUS)
        hits += strictly_largest and clients[MALICIOUS]["final_weight"] < 1.0 / (2 * N_CLIENTS)
    assert _passes(hits)


@pytest.mark.parametrize("key", ["frechet", "mmd_poly3"])
def test_defenses_restore_quality(scenario, key):
    full = _median(scenario, "full_defense", key)
    local = _median(scenario, "local_defense", key)
    attack = _median(scenario, "attack", key)
    vanilla = _median(scenario, "vanilla", key)
    assert full <= local < attack
    assert full <= 1.25 * vanilla


# --- gradients on many random instances ---------------------------------------
def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


@pytest.mark.parametrize("kind", list(LossKind))
def test_loss_gradients_on_fifty_instances(kind):
    cfg = GanLossConfig(kind, gp_lambda=10.0)
    head = Activation.IDENTITY if cfg.is_wgan else Activation.SIGMOID
    for seed in range(50):
        r = np.random.default_rng(seed)
        g_spec = MlpSpec((3, 5, 2), Activation.TANH, Activation.IDENTITY)
        d_spec = MlpSpec((2, 4, 1), Activation.TANH, head)
        g = ParamVector(g_spec, r.normal(0.0, 0.5, g_spec.n_params))
        d = ParamVector(d_spec, r.normal(0.0, 0.5, d_spec.n_params))
        real, z = r.normal(size=(4, 2)), r.normal(size=(4, 3))

        exact = d_loss(cfg, d, g, real, z, rng=np.random.default_rng(seed)).grad.data
        estimate = finite_diff(
            lambda t: d_loss(cfg, d.replace(t.data), g, real, z, rng=np.random.default_rng(seed)).loss,
            Tensor(d.data),
        ).data
        assert _rel_err(exact, estimate) < 1e-4, f"d_loss seed {seed}"

        exact = g_loss(cfg, d, g, z).grad.data
        estimate = finite_diff(lambda t: g_loss(cfg, d, g.replace(t.data), z).loss, Tensor(g.data)).data
        assert _rel_err(exact, estimate) < 1e-4, f"g_loss seed {seed}"
