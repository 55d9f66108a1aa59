import json

import numpy as np
import pytest

from fishmask.data import gen_blobs, shard_iid, train_eval_split
from fishmask.distsim import (CommLedger, DistConfig, accuracy_vs_budget, apply_deltas,
                              closed_form_units, comm_cost_round, run_distributed)
from fishmask.errors import ConfigError, DataError
from fishmask.mask import SparseDelta, SparseMask
from fishmask.model import ModelSpec, init_params, loss_and_grad
from fishmask.seeding import derive_seed
from fishmask.trainer import TrainConfig

SPEC = ModelSpec((4, 4, 2))  # 30 parameters, so 10% is exactly 3


@pytest.fixture(scope="module")
def data():
    return train_eval_split(gen_blobs(2, 40, 4, 2.0, 1.0, seed=3), 0)


def test_sum_aggregation_identity():
    ds = gen_blobs(2, 10, 4, 2.0, 1.0, seed=0)
    p0 = init_params(SPEC, 1)
    tcfg = TrainConfig(learning_rate=0.2, batch_size=10, seed=5)
    run = run_distributed(SPEC, p0, ds, None, DistConfig(2, 1, 1, "dense"), tcfg)
    b1, b2 = shard_iid(ds, 2, derive_seed(5, "shard"))
    g = loss_and_grad(SPEC, p0, b1.X, b1.y)[1] + loss_and_grad(SPEC, p0, b2.X, b2.y)[1]
    assert np.max(np.abs(run.params - (p0 - 0.2 * g))) <= 1e-12


def test_dense_round_costs():
    n = SPEC.n_params
    for mode in ("full_vector", "auto_min"):
        w2s, s2w = comm_cost_round(DistConfig(2, 1, 1, "dense", server_broadcast=mode), [None, None], n)
        assert (w2s, s2w) == (2 * n, 2 * n)
        assert w2s + s2w == 2 * 2 * n


def test_sparse_round_costs():
    n = 1000
    m = SparseMask(np.arange(100), n)
    cfg = DistConfig(2, 1, 1, "shared_fish", k=100, server_broadcast="peer_deltas")
    assert comm_cost_round(cfg, [m, m], n) == (400, 400)
    cfg = DistConfig(2, 1, 1, "shared_fish", k=100, server_broadcast="auto_min")
    assert comm_cost_round(cfg, [m, m], n) == (400, 400)
    big = SparseMask(np.arange(600), n)
    assert comm_cost_round(cfg, [big, big], n) == (2400, 2000)
    with pytest.raises(ValueError):
        comm_cost_round(cfg, [m], n)


def test_five_sparse_rounds_are_one_model_per_worker(data):
    tr, ev = data
    cfg = DistConfig(2, 2, 5, "shared_random", k=3, server_broadcast="peer_deltas")
    run = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, TrainConfig(seed=0))
    assert run.ledger.worker_model_equivalents == 1.0
    assert run.ledger.worker_to_server_units == 5 * 2 * 2 * 3
    curve = accuracy_vs_budget(run.ledger)
    assert [b for b, _ in curve] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0], abs=1e-15)


def test_dense_budget_and_ledger_law(data):
    tr, ev = data
    n = SPEC.n_params
    cfg = DistConfig(2, 3, 4, "dense", server_broadcast="full_vector")
    run = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, TrainConfig(seed=0))
    assert run.ledger.total_units == 2 * 2 * n * 4 == closed_form_units(cfg, n)
    assert run.ledger.full_model_equivalents == 16.0
    budgets = [b for b, _ in accuracy_vs_budget(run.ledger)]
    assert budgets == [1.0, 2.0, 3.0, 4.0]
    assert [b for b, _ in accuracy_vs_budget(run.ledger, "total")] == [4.0, 8.0, 12.0, 16.0]
    assert all(np.diff([r.w2s_units for r in run.ledger.rounds]) == 0)


@pytest.mark.parametrize("strategy,k", [("shared_fish", 3), ("segmented_fish", 2), ("shared_random", 5)])
def test_sparse_ledger_law(data, strategy, k):
    tr, ev = data
    cfg = DistConfig(2, 2, 3, strategy, k=k)
    run = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, TrainConfig(seed=1))
    n, M = SPEC.n_params, 2
    assert run.ledger.total_units == (M * 2 * k + min(M * n, M * (M - 1) * 2 * k)) * 3
    assert run.ledger.total_units == closed_form_units(cfg, n)


def test_segmented_supports_disjoint_and_peer_reconstruction(data):
    tr, ev = data
    seen = []
    replica = {}

    def hook(rnd, before, deltas, after):
        supports = [set(d.indices.tolist()) for d in deltas]
        assert not supports[0] & supports[1]
        for i, (d, m) in enumerate(zip(deltas, run_masks)):
            assert supports[i] <= set(m.indices.tolist())
        # each worker replays its own delta and its peers' deltas onto its server copy
        for w in range(2):
            copy = replica.get(w, before).copy()
            for d in deltas:
                copy[d.indices] += d.values
            assert copy.tobytes() == after.tobytes()
            replica[w] = copy
        seen.append(rnd)

    cfg = DistConfig(2, 3, 4, "segmented_fish", k=4)
    from fishmask.distsim import build_worker_masks
    run_masks = build_worker_masks(cfg, SPEC, init_params(SPEC, 0), tr, 2)
    run = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, TrainConfig(seed=2), hook)
    assert seen == [1, 2, 3, 4]
    assert [m.indices.tolist() for m in run.masks] == [m.indices.tolist() for m in run_masks]


def test_frozen_outside_shared_mask(data):
    tr, ev = data
    p0 = init_params(SPEC, 0)
    run = run_distributed(SPEC, p0, tr, ev, DistConfig(2, 4, 3, "shared_fish", k=5), TrainConfig(seed=0))
    outside = ~run.masks[0].to_bool()
    assert run.params[outside].tobytes() == p0[outside].tobytes()


def test_determinism_and_report(data):
    tr, ev = data
    cfg = DistConfig(2, 2, 3, "shared_fish", k=4, warmup_epochs=1)
    tcfg = TrainConfig(seed=4)
    a = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, tcfg)
    b = run_distributed(SPEC, init_params(SPEC, 0), tr, ev, cfg, tcfg)
    assert a.params.tobytes() == b.params.tobytes()
    report = json.loads(json.dumps(a.to_report(cfg, tcfg)))
    assert set(report) >= {"config", "per_round", "final_accuracy", "ledger_convention"}
    assert [r["round"] for r in report["per_round"]] == [1, 2, 3]
    params, ledger, metrics = a
    assert len(metrics) == 3


def test_mean_aggregation_option():
    server = np.zeros(3)
    deltas = [SparseDelta([0, 1], [1.0, 2.0], 3), SparseDelta([1, 2], [4.0, 6.0], 3)]
    assert apply_deltas(server, deltas).tolist() == [1.0, 6.0, 6.0]
    assert apply_deltas(server, deltas, "mean").tolist() == [0.5, 3.0, 3.0]


@pytest.mark.parametrize("kw", [{"n_workers": 1}, {"rounds": 0}, {"local_updates": 0},
                                {"strategy": "shared_fish"}, {"strategy": "bogus"},
                                {"server_broadcast": "radio"}, {"aggregation": "median"},
                                {"warmup_epochs": -1}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DistConfig(**kw)


def test_shard_smaller_than_batch():
    ds = gen_blobs(2, 5, 4, 2.0, 1.0, seed=0)
    with pytest.raises(DataError):
        run_distributed(SPEC, init_params(SPEC, 0), ds, None, DistConfig(2, 1, 1),
                        TrainConfig(batch_size=16))


def test_ledger_monotone():
    led = CommLedger(10, 2)
    for w2s, s2w in [(4, 4), (0, 0), (6, 2)]:
        before = led.total_units
        led.add_round(w2s, s2w)
        assert led.total_units >= before
    assert led.to_dict()["full_model_equivalents"] == 1.6
