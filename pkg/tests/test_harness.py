import json
from dataclasses import replace

import numpy as np
import pytest

from fedrec.data import SyntheticConfig
from fedrec.errors import ConfigError, StageError
from fedrec.federation import RoundConfig, run_federated_training
from fedrec.harness import (
    ABLATION_ROWS,
    METRIC_COLUMNS,
    ExperimentConfig,
    ScoreTable,
    ablation,
    build_rerank,
    compute_scores,
    evaluate_pipeline,
    evaluate_scores,
    load_config,
    prepare_data,
    run_experiment,
    sensitivity_sweep,
    with_seed,
)
from fedrec.hybrid import HybridConfig
from fedrec.id_retriever import IdTrainConfig
from fedrec.rerank import IdentityClient, OracleClient, RerankConfig
from fedrec.text_retriever import TextTrainConfig


def tiny_config(**kw):
    cfg = ExperimentConfig(
        synthetic=SyntheticConfig(n_clients=3, items_per_client=12, users_per_client=20, n_attributes=4,
                                  n_test_users=12, seed=2),
        rounds=RoundConfig(
            global_epochs=1,
            id_cfg=IdTrainConfig(learning_rate=0.05, local_epochs=2, batch_size=16, optimizer="adam"),
            text_cfg=TextTrainConfig(learning_rate=0.05, local_epochs=2, batch_size=16, n_negatives=8, optimizer="adam"),
            id_dim=4, text_vocab_size=512, text_dim=8,
        ),
        hybrid=HybridConfig(lam=0.5, n_candidates=10),
        lambda_grid=(0.0, 0.5, 1.0),
    )
    return replace(cfg, **kw)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config()
    catalog, split = prepare_data(cfg)
    model = run_federated_training(split, catalog, cfg.rounds)
    scores = compute_scores(model, split.test_users, catalog, cfg.template)
    return cfg, catalog, split, model, scores


def test_config_rejects_no_retriever():
    with pytest.raises(ConfigError):
        ExperimentConfig(use_id=False, use_text=False)


def test_config_roundtrip_and_hash(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_config(path)
    assert again == cfg and again.config_hash() == cfg.config_hash()
    assert with_seed(cfg, 9).config_hash() != cfg.config_hash()


def test_bad_config_key(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"hybrid": {"lambda": 0.3}}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_shipped_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).parents[1] / "configs" / "synthetic.json")
    assert cfg.synthetic.n_clients == 5 and cfg.synthetic.users_per_client == 200 and cfg.synthetic.n_test_users == 50


def test_effective_lambda():
    assert tiny_config(use_id=False).effective_lambda == 0.0
    assert tiny_config(use_text=False).effective_lambda == 1.0
    assert tiny_config().effective_lambda == 0.5


def test_identity_rerank_leaves_metrics(trained):
    cfg, catalog, split, model, scores = trained
    rep = evaluate_scores(scores, catalog, 0.5, cfg.hybrid, IdentityClient(), RerankConfig())
    assert rep.stage2.row() == rep.stage1.row()


def test_oracle_gate(trained):
    cfg, catalog, split, model, scores = trained
    truth = {u.user_id: u.target for u in split.test_users}
    rep = evaluate_scores(scores, catalog, 0.5, cfg.hybrid, OracleClient(catalog, truth), RerankConfig())
    for o, s1, s2 in zip(rep.outcomes, rep.stage1_per_user, rep.stage2_per_user):
        if o.source == "reranked":
            assert s2["ndcg_at_5"] == 1.0
        else:
            assert o.source == "skipped" and s2 == s1
    assert rep.sources["stage1-fallback"] == 0


def test_test_users_only(trained):
    cfg, catalog, split, model, scores = trained
    rep = evaluate_pipeline(model, split, catalog, cfg.hybrid)
    assert [c.user_id for c in rep.candidates] == sorted(u.user_id for u in split.test_users)


def test_empty_test_set(trained):
    cfg, catalog, split, model, _ = trained
    empty = compute_scores(model, [], catalog, cfg.template)
    rep = evaluate_scores(empty, catalog, 0.5, cfg.hybrid)
    assert rep.stage1.n_users == 0 and rep.stage1.recall_at_10 is None


def test_sweep_endpoints_and_duplicates(trained):
    cfg, catalog, _, _, scores = trained
    rows = sensitivity_sweep(scores, catalog, cfg.hybrid, [0.0, 0.5, 0.5, 1.0])
    assert rows[1][1] == rows[2][1]
    id_only = ScoreTable(scores.users, scores.id_logits, scores.id_logits)
    assert rows[3][1] == evaluate_scores(id_only, catalog, 0.5, cfg.hybrid).stage1
    text_only = ScoreTable(scores.users, scores.text_logits, scores.text_logits)
    assert rows[0][1] == evaluate_scores(text_only, catalog, 0.5, cfg.hybrid).stage1
    with pytest.raises(ConfigError):
        sensitivity_sweep(scores, catalog, cfg.hybrid, [])


def test_ablation_structure(trained):
    cfg, catalog, split, _, scores = trained
    client, rerank_cfg = build_rerank(replace(cfg, rerank=replace(cfg.rerank, client="oracle")), catalog, split)
    table = ablation(scores, catalog, cfg.hybrid, client, rerank_cfg)
    values = table.table_values()
    assert list(values) == list(ABLATION_ROWS)
    assert all(len(v) == len(METRIC_COLUMNS) for v in values.values())
    assert values["w/o rerank"] == table.rows["full"].stage1.row()
    identity = ablation(scores, catalog, cfg.hybrid, IdentityClient(), RerankConfig())
    for rep in identity.rows.values():
        assert rep.stage2.row() == rep.stage1.row()


def test_run_experiment_files_and_determinism(tmp_path):
    cfg = tiny_config()
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for name in ("report.json", "split.json", "catalog.jsonl", "candidates.jsonl", "rerank.jsonl", "ablation.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash() and "numpy" in manifest["versions"]
    assert (tmp_path / "a" / "checkpoints" / "global" / "id_retriever.json").exists()
    assert a.model.checksum() == b.model.checksum()


def test_stage_tagging(tmp_path, monkeypatch):
    import fedrec.harness as harness

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(harness, "compute_scores", boom)
    with pytest.raises(StageError, match=r"\[evaluate\] RuntimeError: disk on fire"):
        run_experiment(tiny_config(run_sweep=False, run_ablation=False), tmp_path)


def test_data_config_required():
    with pytest.raises(ConfigError):
        prepare_data(ExperimentConfig())


def test_scores_are_finite(trained):
    _, catalog, split, _, scores = trained
    assert scores.id_logits.shape == (len(split.test_users), len(catalog))
    assert np.all(np.isfinite(scores.id_logits)) and np.all(np.isfinite(scores.text_logits))
