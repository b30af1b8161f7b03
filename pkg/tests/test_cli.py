import json

import pytest

from fedrec.cli import main
from fedrec.data import UserSequence, write_sequences
from fedrec.hybrid import CandidateSet, write_candidates
from test_harness import tiny_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def test_run_and_reuse_model(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert main(["--config", str(config_file), "--out", str(out), "run"]) == 0
    assert "Variant" in capsys.readouterr().out
    assert main(["sweep", "--config", str(config_file), "--out", str(out / "s"),
                 "--model", str(out / "checkpoints" / "global"), "--grid", "0,1"]) == 0
    rows = json.loads((out / "s" / "sweep.json").read_text())
    assert [r["lambda"] for r in rows] == [0.0, 1.0]


def test_ablate_prints_grid(tmp_path, config_file, capsys):
    assert main(["ablate", "--config", str(config_file), "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["Variant", "R@5", "N@5", "R@10", "N@10"]
    assert [line.split("  ")[0].strip() for line in lines[2:]] == ["full", "w/o ID", "w/o text", "w/o rerank"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(tmp_path, config_file, capsys):
    assert main(["--config", str(tmp_path / "missing.json"), "split"]) == 2
    assert main(["evaluate", "--config", str(config_file), "--out", str(tmp_path),
                 "--model", str(tmp_path / "nope")]) == 2
    raw = tiny_config().to_dict()
    raw["rounds"]["id_cfg"].update(learning_rate=1e300, optimizer="sgd")
    diverging = tmp_path / "diverge.json"
    diverging.write_text(json.dumps(raw))
    assert main(["train", "--config", str(diverging), "--out", str(tmp_path / "t")]) == 3
    err = capsys.readouterr().err
    assert "TrainingDivergedError" in err and "client 0, round 0" in err


def test_ingest(tmp_path, capsys):
    rows = ["user_id\titem_id\ttimestamp"]
    for u in range(6):
        for i in range(5):
            rows.append(f"u{u}\ti{i}\t{u * 10 + i}")
    (tmp_path / "x.tsv").write_text("\n".join(rows) + "\n")
    with open(tmp_path / "items.jsonl", "w") as fh:
        for i in range(6):
            fh.write(json.dumps({"item_id": f"i{i}", "title": f"T{i}", "attributes": []}) + "\n")
    assert main(["ingest", "--interactions", str(tmp_path / "x.tsv"), "--items", str(tmp_path / "items.jsonl"),
                 "--out", str(tmp_path / "o")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats == {"raw_interactions": 30, "interactions": 30, "users": 6, "items": 5}
    bad = tmp_path / "bad.tsv"
    bad.write_text("user_id\titem_id\ttimestamp\nu1\ti1\n")
    assert main(["ingest", "--interactions", str(bad), "--items", str(tmp_path / "items.jsonl"),
                 "--out", str(tmp_path / "o")]) == 2


def test_render_golden(tmp_path, movie_catalog, capsys):
    movie_catalog.to_jsonl(tmp_path / "cat.jsonl")
    assert main(["render", "--catalog", str(tmp_path / "cat.jsonl"), "--passage", "m4",
                 "--query", "m1", "m2", "--noun-phrase", "a movie"]) == 0
    assert capsys.readouterr().out == (
        "passage: Whiplash, a movie about Drama\n"
        "query: The Shawshank Redemption, a movie about Thriller; Ex Machina, a movie about Sci-Fi, Thriller\n"
    )
    assert main(["render", "--catalog", str(tmp_path / "cat.jsonl")]) == 2


def test_rerank_command(tmp_path, movie_catalog, capsys):
    movie_catalog.to_jsonl(tmp_path / "cat.jsonl")
    write_sequences(tmp_path / "seq.jsonl", [UserSequence("a", ("m1",), "m6"), UserSequence("b", ("m2",), "m8")])
    write_candidates(tmp_path / "c.jsonl", [CandidateSet("a", ("m4", "m5", "m6")), CandidateSet("b", ("m4", "m5"))])
    argv = ["rerank", "--candidates", str(tmp_path / "c.jsonl"), "--catalog", str(tmp_path / "cat.jsonl"),
            "--sequences", str(tmp_path / "seq.jsonl"), "--client", "oracle", "--threshold", "0.8",
            "--budget", "5", "--out", str(tmp_path / "o")]
    assert main(argv) == 0
    assert json.loads(capsys.readouterr().out) == {"reranked": 1, "stage1-fallback": 0, "skipped": 1}
    rows = [json.loads(line) for line in (tmp_path / "o" / "rerank.jsonl").read_text().splitlines()]
    assert rows[0]["items"] == ["m6", "m4", "m5"]
    assert main(argv[:-4] + ["--budget", "0", "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["stage1-fallback"] == 1
