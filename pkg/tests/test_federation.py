import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import fedrec.federation as federation
from _oracles import weighted_mean_reference
from fedrec.checkpoint import load_checkpoint
from fedrec.data import FederatedSplit
from fedrec.errors import ConfigError, IntegrityError, TrainingDivergedError
from fedrec.federation import (
    RoundConfig,
    client_seed,
    fedavg,
    init_global_model,
    load_global_model,
    run_federated_training,
    save_global_model,
)
from fedrec.id_retriever import IdTrainConfig, id_train_local
from fedrec.text_retriever import TextTrainConfig, text_train_local


def small_round_cfg(**kw):
    base = RoundConfig(
        global_epochs=1,
        id_cfg=IdTrainConfig(learning_rate=0.05, local_epochs=2, batch_size=8, optimizer="adam"),
        text_cfg=TextTrainConfig(learning_rate=0.05, local_epochs=1, batch_size=8, n_negatives=4, optimizer="adam"),
        id_dim=4,
        text_vocab_size=256,
        text_dim=8,
        seed=3,
    )
    return replace(base, **kw)


# ---------------------------------------------------------------- fedavg


def test_fedavg_worked_example():
    np.testing.assert_allclose(fedavg([np.array([1.0, 3.0]), np.array([6.0, 8.0])], [2, 3]), [4.0, 6.0], rtol=0, atol=1e-12)


def test_fedavg_single_client_identity():
    v = np.random.default_rng(0).normal(size=17)
    assert fedavg([v], [3.7]).tobytes() == v.tobytes()


def test_fedavg_identical_clients():
    v = np.random.default_rng(1).normal(size=33)
    assert fedavg([v, v, v], [0.3, 1.7, 2.9]).tobytes() == v.tobytes()


def test_fedavg_errors():
    with pytest.raises(ValueError, match="shape"):
        fedavg([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(ValueError, match="positive"):
        fedavg([np.zeros(2), np.zeros(2)], [1, 0])
    with pytest.raises(ValueError):
        fedavg([np.zeros(2)], [1, 2])


vectors = st.integers(1, 3).flatmap(
    lambda k: st.tuples(
        st.lists(hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)), min_size=k, max_size=k),
        st.lists(st.integers(1, 1000), min_size=k, max_size=k),
    )
)


@settings(max_examples=80, deadline=None)
@given(vectors)
def test_fedavg_matches_oracle_and_convex_bound(case):
    vs, ws = case
    out = fedavg(vs, ws)
    ref = weighted_mean_reference(vs, ws)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(ref).max()))
    stacked = np.stack(vs)
    assert np.all(out >= stacked.min(axis=0)) and np.all(out <= stacked.max(axis=0))


@settings(max_examples=50, deadline=None)
@given(vectors, st.sampled_from([2.0, 4.0, 0.5, 1024.0]))
def test_fedavg_scale_invariance(case, c):
    vs, ws = case
    assert fedavg(vs, [c * w for w in ws]).tobytes() == fedavg(vs, ws).tobytes()


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(4)))
def test_fedavg_permutation(order):
    rng = np.random.default_rng(5)
    vs = [rng.normal(size=6) for _ in range(4)]
    ws = [1.0, 2.0, 3.0, 4.0]
    a = fedavg(vs, ws)
    b = fedavg([vs[i] for i in order], [ws[i] for i in order])
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


# ---------------------------------------------------------------- rounds


def test_single_client_single_round_equals_local_training(small_fixture):
    catalog, split = small_fixture
    one = FederatedSplit([split.clients[0]], split.test_users)
    cfg = small_round_cfg()
    model = run_federated_training(one, catalog, cfg)
    start = init_global_model(len(catalog), cfg)
    seed = client_seed(cfg.seed, 0, 0)
    local_id = id_train_local(start.id_params, split.clients[0], catalog, replace(cfg.id_cfg, seed=seed))
    local_text = text_train_local(start.text_params, split.clients[0], catalog, replace(cfg.text_cfg, seed=seed))
    assert model.id_params.flatten().tobytes() == local_id.flatten().tobytes()
    assert model.text_params.flatten().tobytes() == local_text.flatten().tobytes()


def test_zero_learning_rates_keep_initial_model(small_fixture):
    catalog, split = small_fixture
    cfg = small_round_cfg(global_epochs=3, id_cfg=IdTrainConfig(learning_rate=0.0, local_epochs=1),
                          text_cfg=TextTrainConfig(learning_rate=0.0, local_epochs=1, n_negatives=4))
    model = run_federated_training(split, catalog, cfg)
    assert model.round == 3
    assert model.checksum() == init_global_model(len(catalog), cfg).checksum()


def test_two_equal_clients_average(small_fixture):
    catalog, split = small_fixture
    two = FederatedSplit(split.clients[:2], split.test_users)
    assert len(two.clients[0]) == len(two.clients[1])
    cfg = small_round_cfg()
    model = run_federated_training(two, catalog, cfg)
    start = init_global_model(len(catalog), cfg)
    locals_ = []
    for k in range(2):
        seed = client_seed(cfg.seed, k, 0)
        locals_.append(id_train_local(start.id_params, two.clients[k], catalog, replace(cfg.id_cfg, seed=seed)).flatten())
    np.testing.assert_allclose(model.id_params.flatten(), (locals_[0] + locals_[1]) / 2, rtol=0, atol=1e-15)


def test_reproducible_and_parallel_matches_serial(small_fixture):
    catalog, split = small_fixture
    cfg = small_round_cfg(global_epochs=2)
    a = run_federated_training(split, catalog, cfg)
    b = run_federated_training(split, catalog, cfg)
    c = run_federated_training(split, catalog, replace(cfg, client_parallelism=3))
    assert a.checksum() == b.checksum() == c.checksum()


def test_training_never_sees_test_users(small_fixture, monkeypatch):
    catalog, split = small_fixture
    seen = set()
    real_id, real_text = federation.id_train_local, federation.text_train_local

    def spy_id(params, data, *args, **kw):
        seen.update(s.user_id for s in data)
        return real_id(params, data, *args, **kw)

    def spy_text(params, data, *args, **kw):
        seen.update(s.user_id for s in data)
        return real_text(params, data, *args, **kw)

    monkeypatch.setattr(federation, "id_train_local", spy_id)
    monkeypatch.setattr(federation, "text_train_local", spy_text)
    run_federated_training(split, catalog, small_round_cfg())
    assert seen == {s.user_id for c in split.clients for s in c}
    assert not seen & {s.user_id for s in split.test_users}


def test_round_log_and_checkpoints(small_fixture, tmp_path):
    catalog, split = small_fixture
    model = run_federated_training(split, catalog, small_round_cfg(global_epochs=2),
                                   metrics_log=tmp_path / "rounds.jsonl", checkpoint_dir=tmp_path / "ck")
    rows = [json.loads(line) for line in (tmp_path / "rounds.jsonl").read_text().splitlines()]
    assert [(r["round"], r["client"]) for r in rows] == [(r, k) for r in range(2) for k in range(3)]
    assert set(rows[0]) == {"round", "client", "loss_id", "loss_text", "wall_ms"}
    restored = load_global_model(tmp_path / "ck" / "round_002")
    assert restored.checksum() == model.checksum() and restored.round == 2


def test_resume_from_checkpoint(small_fixture, tmp_path):
    catalog, split = small_fixture
    full = run_federated_training(split, catalog, small_round_cfg(global_epochs=2))
    half = run_federated_training(split, catalog, small_round_cfg(global_epochs=1))
    save_global_model(half, tmp_path / "m")
    resumed = run_federated_training(split, catalog, small_round_cfg(global_epochs=1), initial=load_global_model(tmp_path / "m"))
    assert resumed.checksum() == full.checksum()


def test_corrupted_checkpoint_detected(small_fixture, tmp_path):
    catalog, _ = small_fixture
    save_global_model(init_global_model(len(catalog), small_round_cfg()), tmp_path / "m")
    blob = bytearray((tmp_path / "m" / "id_retriever.bin").read_bytes())
    blob[0] ^= 0xFF
    (tmp_path / "m" / "id_retriever.bin").write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "m" / "id_retriever")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_client_and_round(small_fixture):
    catalog, split = small_fixture
    cfg = small_round_cfg(id_cfg=IdTrainConfig(learning_rate=1e300, local_epochs=3, optimizer="sgd"))
    with pytest.raises(TrainingDivergedError) as err:
        run_federated_training(split, catalog, cfg)
    assert err.value.client == 0 and err.value.round == 0


def test_empty_client_rejected(small_fixture):
    catalog, split = small_fixture
    with pytest.raises((ConfigError, IntegrityError)):
        run_federated_training(FederatedSplit([split.clients[0], []], ()), catalog, small_round_cfg())


def test_custom_aggregator_hook(small_fixture):
    catalog, split = small_fixture
    calls = []

    def first_client_only(vectors, weights):
        calls.append(list(weights))
        return vectors[0]

    run_federated_training(split, catalog, small_round_cfg(), aggregator=first_client_only)
    assert calls == [[20.0, 20.0, 20.0]] * 2
