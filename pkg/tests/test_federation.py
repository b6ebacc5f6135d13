import math

import numpy as np
import pytest

import federation
from errors import ShapeError
from federation import (ClientUpload, FederatedTrainer, aggregate, build_clients, client_update, derive_rng,
                        local_steps, reference_dataset, run_training)
from gan_models import MlpSpec, ParamVector


def _clients(cfg):
    g_init = ParamVector.init(cfg.generator_spec())
    return g_init, build_clients(cfg, g_init)


def _vec(values, sizes=(1, 2)):
    spec = MlpSpec(sizes)
    return ParamVector(spec, np.asarray(values, dtype=np.float64))


# --- local update -------------------------------------------------------------
def test_client_update_rejects_zero_local_steps(tiny_config):
    g_init, clients = _clients(tiny_config())
    with pytest.raises(ValueError):
        client_update(clients[0], g_init, 0)


def test_client_update_rejects_foreign_layout(tiny_config):
    _, clients = _clients(tiny_config())
    with pytest.raises(ShapeError):
        client_update(clients[0], ParamVector.zeros(MlpSpec((4, 3, 3))), 1)


def test_zero_learning_rate_returns_broadcast_generator(tiny_config):
    cfg = tiny_config("training.d_lr=0.0", "training.g_lr=0.0")
    g_init, clients = _clients(cfg)
    upload = client_update(clients[0], g_init, 3)
    np.testing.assert_array_equal(upload.g_params.data, g_init.data)
    assert math.isfinite(upload.loss) and not upload.diverged


def test_client_update_overwrites_local_generator(tiny_config):
    cfg = tiny_config("training.d_lr=0.0", "training.g_lr=0.0")
    g_init, clients = _clients(cfg)
    client_update(clients[0], g_init, 2)
    broadcast = g_init.replace(g_init.data + 0.01)
    upload = client_update(clients[0], broadcast, 1)
    np.testing.assert_array_equal(upload.g_params.data, broadcast.data)


def test_client_state_keeps_no_loss_history(tiny_config):
    g_init, clients = _clients(tiny_config())
    for _ in range(3):
        client_update(clients[0], g_init, 2)
    assert not any("history" in name for name in vars(clients[0]))


@pytest.mark.parametrize("mode", ["mean", "last"])
def test_reported_loss(tiny_config, mode):
    cfg = tiny_config(f"training.report_loss={mode}")
    g_init, clients = _clients(cfg)
    _, (twin, *_) = _clients(cfg)
    upload = client_update(clients[0], g_init, 4)
    twin.g_params = g_init
    g_round, d_round = local_steps(twin, 4)
    assert len(g_round) == len(d_round) == 4
    expected = g_round[-1] if mode == "last" else math.fsum(g_round) / len(g_round)
    assert upload.loss == expected


def test_critic_steps_per_generator_step(tiny_config):
    cfg = tiny_config("training.d_steps=3", preset="local_defense")
    g_init, clients = _clients(cfg)
    client_update(clients[0], g_init, 2)
    assert clients[0].d_optim.step == 6
    assert clients[0].g_optim.step == 2


def _offset_critic_pair(tiny_config, *overrides, offset=5.0):
    cfg = tiny_config(*overrides, preset="local_defense")
    g_init, (plain, *_) = _clients(cfg)
    _, (shifted, *_) = _clients(cfg)
    data = shifted.d_params.data.copy()
    data[shifted.d_params.layout[-1].b_offset] += offset
    shifted.d_params = shifted.d_params.replace(data)
    return client_update(plain, g_init, 3), client_update(shifted, g_init, 3)


def test_anchored_wgan_loss_ignores_critic_offset(tiny_config):
    plain, shifted = _offset_critic_pair(tiny_config)
    assert shifted.loss == pytest.approx(plain.loss, abs=1e-9)
    np.testing.assert_allclose(shifted.g_params.data, plain.g_params.data, rtol=0, atol=1e-12)


def test_raw_wgan_loss_moves_with_critic_offset(tiny_config):
    plain, shifted = _offset_critic_pair(tiny_config, "training.anchor_wgan_loss=false")
    assert shifted.loss == pytest.approx(plain.loss - 5.0, abs=1e-2)


def test_malicious_client_carries_the_marker(tiny_config):
    cfg = tiny_config(preset="attack")
    _, clients = _clients(cfg)
    assert [c.is_malicious for c in clients] == [False, False, True]
    np.testing.assert_array_equal(clients[2].dataset.samples[:, 2], np.ones(64))
    assert not np.any(clients[0].dataset.samples[:, 2] == 1.0)


def test_client_streams_are_independent():
    a = derive_rng(0, 1, "z").standard_normal(4)
    b = derive_rng(0, 2, "z").standard_normal(4)
    c = derive_rng(0, 1, "batches").standard_normal(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    np.testing.assert_array_equal(a, derive_rng(0, 1, "z").standard_normal(4))


def test_reference_set_differs_from_client_data(tiny_config):
    cfg = tiny_config()
    ref = reference_dataset(cfg)
    _, clients = _clients(cfg)
    assert ref.n == 64
    assert not np.array_equal(ref.samples, clients[0].dataset.samples)


# --- aggregation --------------------------------------------------------------
def test_aggregate_uniform_is_mean():
    a, b = _vec([1.0, 2.0, 3.0, 4.0]), _vec([3.0, 2.0, 1.0, 0.0])
    np.testing.assert_allclose(aggregate([a, b], [1.0, 1.0]).data, [2.0, 2.0, 2.0, 2.0])


def test_aggregate_zero_weight_drops_client():
    a, b = _vec([1.0, 2.0, 3.0, 4.0]), _vec([3.0, 2.0, 1.0, 0.0])
    np.testing.assert_array_equal(aggregate([a, b], [0.0, 1.0]).data, b.data)


def test_aggregate_is_scale_invariant_bitwise(rng):
    params = [_vec(rng.normal(size=4)) for _ in range(3)]
    left = aggregate(params, [2.0, 2.0, 2.0]).data
    right = aggregate(params, [0.5, 0.5, 0.5]).data
    assert left.tobytes() == right.tobytes()


def test_aggregate_preconditions():
    a = _vec([1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ValueError):
        aggregate([a, a], [0.0, 0.0])
    with pytest.raises(ValueError):
        aggregate([a, a], [1.0, -1.0])
    with pytest.raises(ValueError):
        aggregate([a], [1.0, 1.0])
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(ShapeError):
        aggregate([a, _vec(np.zeros(6), (2, 2))], [1.0, 1.0])


# --- training loop ------------------------------------------------------------
def test_zero_rounds_keep_initial_generator(tiny_config):
    cfg = tiny_config("training.rounds=0")
    result = run_training(cfg)
    assert result.records == []
    np.testing.assert_array_equal(result.server.g_server.data, ParamVector.init(cfg.generator_spec()).data)


def test_single_client_matches_centralized_training(tiny_config):
    cfg = tiny_config("training.n_clients=1")
    result = run_training(cfg)

    g_init, (oracle,) = _clients(cfg)
    for _ in range(cfg.training.rounds):
        local_steps(oracle, cfg.training.local_steps)
    assert result.server.g_server.data.tobytes() == oracle.g_params.data.tobytes()


def test_training_is_deterministic(tiny_config):
    cfg = tiny_config(preset="attack")
    first, second = run_training(cfg), run_training(cfg)
    assert [r.to_json() for r in first.records] == [r.to_json() for r in second.records]
    np.testing.assert_array_equal(first.server.g_server.data, second.server.g_server.data)


def test_parallel_clients_match_sequential(tiny_config):
    sequential = run_training(tiny_config("training.n_clients=3"))
    parallel = run_training(tiny_config("training.n_clients=3", "training.workers=2"))
    assert [r.to_json() for r in sequential.records] == [r.to_json() for r in parallel.records]
    assert sequential.server.g_server.data.tobytes() == parallel.server.g_server.data.tobytes()


def test_normalized_weights_sum_to_one(tiny_config):
    result = run_training(tiny_config("training.n_clients=3"))
    for record in result.records:
        assert math.fsum(record.weights_norm) == pytest.approx(1.0, abs=1e-12)
        assert record.detected == [] and record.diverged == []


def test_no_detection_before_warmup(tiny_config):
    cfg = tiny_config("training.n_clients=4", "training.rounds=4", "detection.warmup=2", preset="global_defense")
    records = run_training(cfg).records
    for record in records[:3]:
        assert record.detected == []
        assert record.counters == [0, 0, 0, 0]
        assert record.weights_raw == [0.25] * 4


def test_sink_and_evaluator_are_called(tiny_config):
    cfg = tiny_config("training.rounds=5", "training.eval_every=2")
    seen, evaluated = [], []

    def evaluator(t, g):
        evaluated.append(t)
        return {"round": t}

    records = run_training(cfg, sink=seen.append, evaluator=evaluator).records
    assert [r.t for r in seen] == [0, 1, 2, 3, 4]
    assert evaluated == [1, 3, 4]
    assert records[1].to_json()["metrics"] == {"round": 1}
    assert "metrics" not in records[0].to_json()
    assert "wall_time" not in records[0].to_json()


def _diverging(ids):
    real = federation.client_update

    def fake(client, g_server, k):
        if client.id in ids:
            return ClientUpload(client.id, g_server, math.nan, math.nan, diverged=True)
        return real(client, g_server, k)

    return fake


def test_diverged_client_gets_zero_weight(tiny_config, monkeypatch):
    monkeypatch.setattr(federation, "client_update", _diverging({0}))
    trainer = FederatedTrainer(tiny_config())
    record = trainer.step(0)
    assert record.diverged == [0]
    assert record.losses[0] is None and None not in record.losses[1:]
    assert record.weights_norm == [0.0, 0.5, 0.5]


def test_all_diverged_keeps_server_generator(tiny_config, monkeypatch):
    monkeypatch.setattr(federation, "client_update", _diverging({0, 1, 2}))
    trainer = FederatedTrainer(tiny_config())
    before = trainer.server.g_server
    record = trainer.step(0)
    assert trainer.server.g_server is before
    assert record.diverged == [0, 1, 2]
    assert record.weights_norm == pytest.approx([1 / 3] * 3, abs=1e-12)
