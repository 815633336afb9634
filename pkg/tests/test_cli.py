import json
import os
import subprocess
import sys

import pytest

from tabret.cli import main
from tabret.lambdamart import Forest
from tabret.synthetic import Bundle, generate, write_bundle
from tabret.tables import Corpus

FAST = ["--nn-epochs", "2", "--cdssm-epochs", "1", "--hidden", "4", "--num-trees", "10", "--max-leaves", "4"]


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    """Forty tables and the queries that point into them."""
    full = generate(2017)
    keep = set(full.corpus.ids()[::5])
    queries = [q for q in full.queries if set(q.relevant_table_ids) <= keep][:20]
    keep |= {t for q in queries for t in q.relevant_table_ids}
    corpus = Corpus.from_tables(full.corpus[t] for t in sorted(keep))
    bundle = Bundle(corpus, queries, full.phrase_table, full.embeddings, full.paraphrases[:40])
    return write_bundle(bundle, tmp_path_factory.mktemp("mini"))


def _run(*args):
    return main([str(a) for a in args])


def _bundle_args(paths):
    return ["--corpus", paths["corpus"], "--queries", paths["queries"], "--phrase-table", paths["phrase_table"],
            "--embeddings", paths["embeddings"], "--paraphrases", paths["paraphrases"]]


def test_make_corpus(tmp_path, capsys):
    assert _run("make-corpus", "--out-dir", tmp_path) == 0
    assert sum(1 for _ in open(tmp_path / "corpus.jsonl")) == 200
    assert sum(1 for _ in open(tmp_path / "queries.jsonl")) == 60


def test_stages_run_independently(mini, tmp_path, capsys):
    d = tmp_path
    assert _run("ingest", "--corpus", mini["corpus"], "--queries", mini["queries"], "--out-dir", d) == 0
    assert _run("build-index", "--corpus", d / "corpus.jsonl", "--out-dir", d, "--aspects", "caption,headers") == 0
    assert _run("retrieve", "--index", d / "index.json.gz", "--queries", d / "queries.jsonl", "--topk", 10,
                "--out", d / "candidates.jsonl") == 0
    assert _run("train-cdssm", "--paraphrases", mini["paraphrases"], "--epochs", 1, "--out", d / "cdssm.npz") == 0
    assert _run("train-nn", "--corpus", d / "corpus.jsonl", "--queries", d / "queries.jsonl",
                "--candidates", d / "candidates.jsonl", "--embeddings", mini["embeddings"], "--hidden", 4,
                "--epochs", 1, "--out-dir", d / "models") == 0
    assert sorted(p.name for p in (d / "models").iterdir())[0] == "nn_caption.npz"
    assert _run("featurize", "--corpus", d / "corpus.jsonl", "--queries", d / "queries.jsonl",
                "--candidates", d / "candidates.jsonl", "--stats", d / "stats.tsv", "--phrase-table",
                mini["phrase_table"], "--embeddings", mini["embeddings"], "--encoder", d / "cdssm.npz",
                "--model-dir", d / "models", "--out", d / "features.jsonl") == 0
    names = json.loads(open(d / "features.jsonl").readline())["feature_names"]
    assert len(names) == 1 + 15 + 5
    assert _run("train-ranker", "--feature-file", d / "features.jsonl", "--num-trees", 5, "--aspects", "headers",
                "--out", d / "forest.txt") == 0
    assert all(n == "bm25" or n.startswith("headers.") or n == "nn.header"
               for n in Forest.load(d / "forest.txt").feature_names)
    assert _run("evaluate", "--queries", d / "queries.jsonl", "--forest", d / "forest.txt", "--feature-file",
                d / "features.jsonl", "--out-dir", d / "ev") == 0
    assert (d / "ev" / "report" / "report.json").exists()
    assert _run("pr-curve", "--queries", d / "queries.jsonl", "--candidates", d / "candidates.jsonl",
                "--out", d / "pr.csv") == 0
    lines = (d / "pr.csv").read_text().splitlines()
    assert lines[0] == "setting,threshold,precision,recall" and len(lines) == 22


def test_pipeline_outputs(mini, tmp_path, capsys):
    assert _run("pipeline", *_bundle_args(mini), "--out-dir", tmp_path, *FAST, "--ablation") == 0
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert sorted(report["settings"]) == ["BM25", "Feature", "Feature+NeuralNet", "NeuralNet"]
    assert [r["aspects"] for r in report["ablation"]] == ["H", "Cel", "Cap", "H+Cel", "H+Cel+Cap"]
    for name in ("report.txt", "pr_curve.csv", "length_buckets.csv", "ablation.csv"):
        assert (tmp_path / "report" / name).exists()
    for name in ("candidates.jsonl", "features.jsonl", "index.json.gz", "split.json", "cdssm.npz", "nn_row.npz"):
        assert (tmp_path / name).exists()
    e = report["settings"]["Feature"]
    split = json.loads((tmp_path / "split.json").read_text())
    assert e["num_queries_evaluated"] + e["num_queries_filtered"] == len(split["test"])


def test_feature_toggle_labels(mini, tmp_path, capsys):
    assert _run("pipeline", *_bundle_args(mini), "--out-dir", tmp_path, *FAST, "--features", "designed") == 0
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert sorted(report["settings"]) == ["BM25", "Feature"]
    assert not (tmp_path / "nn_cell.npz").exists()


def test_reproducible_across_processes(mini, tmp_path):
    """Same seed, different interpreter hash seeds: identical report bytes."""
    outs = []
    for hash_seed in ("1", "2"):
        out = tmp_path / f"run{hash_seed}"
        env = {**os.environ, "PYTHONHASHSEED": hash_seed}
        cmd = [sys.executable, "-m", "tabret.cli", "pipeline", *map(str, _bundle_args(mini)), "--out-dir", str(out),
               *FAST, "--features", "designed", "--seed", "3"]
        subprocess.run(cmd, check=True, env=env, capture_output=True)
        outs.append(out)
    for name in ("report.json", "report.txt", "pr_curve.csv", "length_buckets.csv"):
        assert (outs[0] / "report" / name).read_bytes() == (outs[1] / "report" / name).read_bytes(), name
    for name in ("features.jsonl", "forest_feature.txt", "index.json.gz", "cdssm.npz"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_missing_input_stage_tagged(tmp_path, capsys):
    assert _run("pipeline", "--corpus", tmp_path / "nope.jsonl", "--out-dir", tmp_path) == 1
    assert "[config]" in capsys.readouterr().err


def test_stage_failure_tagged(mini, tmp_path, capsys):
    bad = tmp_path / "queries.jsonl"
    bad.write_text('{"id": "q1", "text": "rivers"}\n')
    assert _run("pipeline", *_bundle_args(mini)[:2], "--queries", bad, "--out-dir", tmp_path / "o") == 1
    assert "no labeled queries" in capsys.readouterr().err


def test_bad_feature_flag():
    with pytest.raises(SystemExit):
        main(["pipeline", "--out-dir", "x", "--features", "magic"])
