"""End-to-end command-line interface: generate, train, match, eval."""

import json
from pathlib import Path

import pytest

from planmatch.cli import main
from planmatch.datagen import GenParams, generate_floorplan, load_corpus, subgraph
from planmatch.graphs import NodeType, save_graph
from planmatch.matching import MatchResult

SMALL_ARCH_JSON = {
    "mlp_hidden_dim": 8, "embed_dim": 6, "n_heads": 2,
    "gat_hidden_dim": 6, "output_dim": 3,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated corpus and one trained weights file, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = root / "corpus"
    config_path = root / "config.json"
    # uniform plan sizes put all samples in one stratification bin, so the
    # 6-sample corpus splits exactly 4/1/1
    config_path.write_text(json.dumps({
        "gen": {"rooms_min": 3, "rooms_max": 3},
        "train": {"max_epochs": 2, "patience": 5, "batch_size": 2, "seed": 1},
        "arch": SMALL_ARCH_JSON,
    }))
    rc = main(["generate", "--count", "6", "--out", str(corpus_dir),
               "--seed", "3", "--config", str(config_path), "--quiet"])
    assert rc == 0
    weights = root / "weights.json"
    rc = main(["train", "--corpus", str(corpus_dir), "--out", str(weights),
               "--config", str(config_path), "--quiet"])
    assert rc == 0
    return {"root": root, "corpus": corpus_dir, "weights": weights,
            "config": config_path}


def corpus_files(corpus_dir):
    return sorted(
        p.relative_to(corpus_dir) for p in Path(corpus_dir).rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    )


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_corpus_and_manifest(workspace, tmp_path):
    out = tmp_path / "corpus"
    rc = main(["generate", "--count", "5", "--out", str(out), "--seed", "9", "--quiet"])
    assert rc == 0
    corpus = load_corpus(out)
    assert len(corpus.samples) == 5
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "generate"
    assert manifest["seed"] == 9
    assert manifest["config"]["count"] == 5


def test_generate_is_deterministic_across_runs(workspace, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--count", "4", "--out", str(out),
                     "--seed", "11", "--quiet"]) == 0
    files_a = corpus_files(a)
    assert files_a == corpus_files(b)
    assert files_a, "corpus directory is empty"
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_generate_config_controls_plan_size(workspace, tmp_path):
    corpus = load_corpus(workspace["corpus"])
    for sample in corpus.samples:
        rooms = sum(1 for n in sample.a_graph.nodes if n.node_type is NodeType.ROOM)
        assert rooms == 3


def test_generate_rejects_negative_count(tmp_path, capsys):
    rc = main(["generate", "--count", "-1", "--out", str(tmp_path / "c"), "--quiet"])
    assert rc == 2
    assert "count" in capsys.readouterr().err


def test_generate_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gen": {"n_rooms": 3}}))
    rc = main(["generate", "--count", "2", "--out", str(tmp_path / "c"),
               "--config", str(cfg), "--quiet"])
    assert rc == 2
    assert "unknown gen config keys" in capsys.readouterr().err


def test_generate_rejects_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    rc = main(["generate", "--count", "2", "--out", str(tmp_path / "c"),
               "--config", str(cfg), "--quiet"])
    assert rc == 2
    assert "not valid JSON" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_writes_weights_history_and_manifest(workspace):
    weights = workspace["weights"]
    assert weights.is_file()
    history = json.loads((weights.parent / "history.json").read_text())
    assert history["n_epochs"] == 2
    manifest = json.loads((weights.parent / "weights.json.manifest.json").read_text())
    assert manifest["subcommand"] == "train"
    assert manifest["config"]["train"]["max_epochs"] == 2
    assert manifest["config"]["arch"]["n_heads"] == 2
    assert len(manifest["epoch_times_s"]) == 2


def test_train_same_seed_reproduces_weights_bytes(workspace, tmp_path):
    outs = []
    for name in ("w1.json", "w2.json"):
        out = tmp_path / name
        rc = main(["train", "--corpus", str(workspace["corpus"]), "--out", str(out),
                   "--config", str(workspace["config"]), "--quiet"])
        assert rc == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert (outs[0].parent / "history.json").read_bytes() == \
        (outs[1].parent / "history.json").read_bytes()


def test_train_resume_accepts_matching_architecture(workspace, tmp_path):
    out = tmp_path / "resumed.json"
    rc = main(["train", "--corpus", str(workspace["corpus"]), "--out", str(out),
               "--config", str(workspace["config"]),
               "--resume-from", str(workspace["weights"]), "--quiet"])
    assert rc == 0
    assert out.is_file()


def test_train_resume_rejects_architecture_mismatch(workspace, tmp_path, capsys):
    cfg = tmp_path / "other_arch.json"
    cfg.write_text(json.dumps({
        "train": {"max_epochs": 1, "patience": 2},
        "arch": {**SMALL_ARCH_JSON, "n_heads": 1},
    }))
    rc = main(["train", "--corpus", str(workspace["corpus"]),
               "--out", str(tmp_path / "w.json"), "--config", str(cfg),
               "--resume-from", str(workspace["weights"]), "--quiet"])
    assert rc == 2
    assert "does not match" in capsys.readouterr().err


def test_train_rejects_invalid_learning_rate(workspace, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.0}}))
    rc = main(["train", "--corpus", str(workspace["corpus"]),
               "--out", str(tmp_path / "w.json"), "--config", str(cfg), "--quiet"])
    assert rc == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_rejects_missing_corpus(tmp_path, capsys):
    rc = main(["train", "--corpus", str(tmp_path / "nope"),
               "--out", str(tmp_path / "w.json"), "--quiet"])
    assert rc == 2


# ---------------------------------------------------------------------------
# match


@pytest.fixture(scope="module")
def graph_pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("graphs")
    g = generate_floorplan(GenParams(rooms_min=3, rooms_max=3, seed=60))
    s, _ = subgraph(g, list(range(g.n_nodes - 2)))
    a_path = root / "a.json"
    s_path = root / "s.json"
    save_graph(g, a_path)
    save_graph(s, s_path)
    return a_path, s_path


def test_match_writes_result_and_manifest(workspace, graph_pair, tmp_path):
    a_path, s_path = graph_pair
    out = tmp_path / "result.json"
    rc = main(["match", "--a-graph", str(a_path), "--s-graph", str(s_path),
               "--weights", str(workspace["weights"]), "--out", str(out), "--quiet"])
    assert rc == 0
    result = MatchResult.from_json_dict(json.loads(out.read_text()))
    s_nodes = json.loads(s_path.read_text())["nodes"]
    assert len(result.pairs) == len(s_nodes)
    manifest = json.loads((tmp_path / "result.json.manifest.json").read_text())
    assert manifest["subcommand"] == "match"


def test_match_prints_json_to_stdout(workspace, graph_pair, capsys):
    a_path, s_path = graph_pair
    rc = main(["match", "--a-graph", str(a_path), "--s-graph", str(s_path),
               "--weights", str(workspace["weights"]), "--json", "--quiet"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["version"] == 1
    assert payload["pairs"]


def test_match_rejects_observation_larger_than_plan(workspace, graph_pair, capsys):
    a_path, s_path = graph_pair
    rc = main(["match", "--a-graph", str(s_path), "--s-graph", str(a_path),
               "--weights", str(workspace["weights"]), "--quiet"])
    assert rc == 2
    assert "more nodes" in capsys.readouterr().err


def test_match_rejects_missing_weights(graph_pair, tmp_path, capsys):
    a_path, s_path = graph_pair
    rc = main(["match", "--a-graph", str(a_path), "--s-graph", str(s_path),
               "--weights", str(tmp_path / "nope.json"), "--quiet"])
    assert rc == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_report_timing_and_manifest(workspace, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["eval", "--corpus", str(workspace["corpus"]),
               "--weights", str(workspace["weights"]), "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["split"] == "test"
    assert report["n_samples"] >= 1
    assert report["aggregate"]["fp"] == report["aggregate"]["fn"]
    timing = json.loads((out / "timing.json").read_text())
    assert len(timing["per_sample"]) == report["n_samples"]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "eval"
    table = capsys.readouterr().out
    assert "F1 %" in table and "ours" in table


def test_eval_json_output(workspace, capsys):
    rc = main(["eval", "--corpus", str(workspace["corpus"]),
               "--weights", str(workspace["weights"]), "--split", "val", "--json"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["split"] == "val"
    assert payload["completed_fraction"] == 1.0


def test_eval_all_samples_over_timeout_exits_3(workspace, capsys):
    rc = main(["eval", "--corpus", str(workspace["corpus"]),
               "--weights", str(workspace["weights"]),
               "--timeout-s", "1e-9", "--quiet"])
    assert rc == 3
    assert "nothing to score" in capsys.readouterr().err


def test_eval_rejects_unknown_split(workspace):
    with pytest.raises(SystemExit):
        main(["eval", "--corpus", str(workspace["corpus"]),
              "--weights", str(workspace["weights"]), "--split", "holdout"])


def test_eval_notes_ignored_jobs_flag(workspace, capsys):
    rc = main(["eval", "--corpus", str(workspace["corpus"]),
               "--weights", str(workspace["weights"]), "--jobs", "4", "--json"])
    assert rc == 0
    assert "sequential" in capsys.readouterr().out.splitlines()[0]


def test_version_flag():
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
