"""Command-line entry point: ``tabret <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline as pl
from .bm25 import DEFAULT_B, DEFAULT_K1, DEFAULT_TOPK, Bm25Index
from .cdssm import EncoderTrainConfig, SubwordEncoderParams
from .evaluation import (
    RankedResult,
    default_thresholds,
    evaluate,
    length_bucket_report,
    pr_curve,
    write_pr_csv,
)
from .features import EmbeddingTable, FeatureResources, PhraseTable
from .lambdamart import Forest, LambdaMartConfig
from .neural import NEURAL_ASPECTS, NeuralConfig
from .synthetic import bundled_paths, generate, write_bundle
from .tables import ASPECTS, load_corpus, load_queries, parse_aspects
from .text import CorpusStats

log = logging.getLogger("tabret")


def _families(value: str) -> tuple[str, ...]:
    fams = tuple(f.strip() for f in value.split(",") if f.strip())
    bad = set(fams) - set(pl.FAMILIES)
    if bad or not fams:
        raise argparse.ArgumentTypeError(f"choose from {','.join(pl.FAMILIES)}")
    return fams


def _aspects(value: str) -> tuple[str, ...]:
    try:
        return parse_aspects(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _read_split(path, key):
    if path is None:
        return None
    return json.loads(Path(path).read_text())[key]


def _ranker_args(p):
    d = LambdaMartConfig()
    p.add_argument("--num-trees", type=int, default=d.num_trees)
    p.add_argument("--max-leaves", type=int, default=d.max_leaves)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--min-leaf", type=int, default=d.min_instances_per_leaf)


def _ranker_config(a) -> LambdaMartConfig:
    return LambdaMartConfig(num_trees=a.num_trees, max_leaves=a.max_leaves, learning_rate=a.learning_rate,
                            min_instances_per_leaf=a.min_leaf, seed=pl.stage_seed(a.seed, "ranker"))


def cmd_make_corpus(a):
    paths = write_bundle(generate(a.seed), a.out_dir)
    for k, v in paths.items():
        print(f"{k}\t{v}")


def cmd_ingest(a):
    corpus, queries = pl.stage_ingest(a.corpus, a.queries, a.out_dir)
    print(f"{len(corpus)} tables, {len(queries)} queries, "
          f"{len(corpus.provenance.get('rejected', []))} irregular tables rejected")


def cmd_build_index(a):
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index, stats = pl.stage_index(load_corpus(a.corpus), out, a.aspects, a.k1, a.b)
    print(f"indexed {stats.num_docs} tables over {','.join(index.aspects)} -> {out / 'index.json.gz'}")


def cmd_retrieve(a):
    index = Bm25Index.load(a.index)
    queries = load_queries(a.queries)
    cands = pl.stage_retrieve(index, queries, a.topk, a.out)
    print(f"retrieved candidates for {len(cands)} queries -> {a.out}")


def cmd_train_cdssm(a):
    cfg = EncoderTrainConfig(epochs=a.epochs, learning_rate=a.learning_rate, negatives=a.negatives,
                             seed=pl.stage_seed(a.seed, "cdssm"))
    params = pl.stage_train_cdssm(a.paraphrases, cfg, a.out)
    print("loss by epoch: " + " ".join(f"{x:.4f}" for x in params.loss_trace))


def cmd_train_nn(a):
    corpus = load_corpus(a.corpus)
    queries = [q for q in load_queries(a.queries) if q.relevant_table_ids]
    train_ids = _read_split(a.split, "train")
    if train_ids is not None:
        keep = set(train_ids)
        queries = [q for q in queries if q.id in keep]
    cands = pl.load_candidates(a.candidates)
    emb = EmbeddingTable.load(a.embeddings) if a.embeddings else None
    cfg = NeuralConfig(embed_dim=emb.dim if emb else a.embed_dim, hidden=a.hidden, learning_rate=a.learning_rate,
                       epochs=a.epochs, negatives=a.negatives, seed=a.seed)
    data = pl.training_pairs(queries, corpus, cands, cfg.negatives, pl.stage_seed(a.seed, "negatives"))
    aspects = NEURAL_ASPECTS if a.aspect == "all" else (a.aspect,)
    Path(a.out_dir).mkdir(parents=True, exist_ok=True)
    models = pl.stage_train_nn(data, aspects, cfg, a.out_dir, pl.model_vocabulary(corpus, queries), emb)
    for name, m in models.items():
        print(f"{name}: loss {m.loss_trace[0]:.4f} -> {m.loss_trace[-1]:.4f}")


def cmd_featurize(a):
    corpus = load_corpus(a.corpus)
    queries = [q for q in load_queries(a.queries) if q.relevant_table_ids]
    cands = pl.load_candidates(a.candidates)
    res = models = None
    if "designed" in a.features:
        res = FeatureResources(
            CorpusStats.load(a.stats) if a.stats else None,
            PhraseTable.load(a.phrase_table) if a.phrase_table else None,
            EmbeddingTable.load(a.embeddings) if a.embeddings else None,
            SubwordEncoderParams.load(a.encoder) if a.encoder else None,
        )
        res.require()
    if "neural" in a.features:
        models = pl.load_models(a.model_dir)
    rows = pl.stage_featurize(queries, corpus, cands, a.features, res, models, a.out)
    print(f"{len(rows)} feature rows -> {a.out}")


def cmd_train_ranker(a):
    names, rows = pl.load_features(a.feature_file)
    qids = sorted({r["query_id"] for r in rows})
    train_ids = _read_split(a.split, "train") or qids
    valid_ids = _read_split(a.split, "validation") or []
    cols = pl.select_columns(names, a.families, a.aspects)
    forest = pl.stage_train_ranker(names, rows, train_ids, valid_ids, cols, _ranker_config(a), a.out)
    print(f"{len(forest.trees)} trees, training MAP {forest.train_map[0]:.4f} -> {forest.train_map[-1]:.4f}")


def _results_from(a):
    queries = {q.id: q for q in load_queries(a.queries)}
    test_ids = _read_split(a.split, "test")
    if a.forest:
        forest = Forest.load(a.forest)
        names, rows = pl.load_features(a.feature_file)
        cols = [names.index(n) for n in forest.feature_names]
        ids = test_ids or sorted({r["query_id"] for r in rows})
        rankings = pl.rank_with_forest(forest, names, rows, ids, cols)
    else:
        rankings = pl.load_candidates(a.candidates)
        ids = test_ids or sorted(rankings)
    qs = [queries[i] for i in ids if i in queries and queries[i].relevant_table_ids]
    return qs, pl.ranked_results(qs, rankings)


def _eval_args(p):
    p.add_argument("--queries", required=True)
    p.add_argument("--split", help="split.json from a pipeline run; only its test queries are scored")
    p.add_argument("--forest", help="ranker dump; omit to score the BM25 candidate order")
    p.add_argument("--feature-file", help="features.jsonl (needed with --forest)")
    p.add_argument("--candidates", help="candidates.jsonl (BM25 order, used without --forest)")


def cmd_evaluate(a):
    qs, results = _results_from(a)
    rep = evaluate(results, filter_rule=not a.no_filter)
    rep.per_bucket_p_at_1 = length_bucket_report(results, {q.id: len(q.tokens) for q in qs})
    kept = [r for r in results if r.candidates]
    rep.pr_points = pr_curve(kept, default_thresholds(kept))
    report = {"settings": {a.setting: rep.to_dict()}, "candidate_recall": {"test": None, "all": None},
              "config": {"topk": None}, "ablation": []}
    pl.write_report(report, Path(a.out_dir) / "report")
    print(pl.format_report(report), end="")


def cmd_pr_curve(a):
    _, results = _results_from(a)
    kept = [r for r in results if r.candidates]
    ths = [float(x) for x in a.thresholds.split(",")] if a.thresholds else default_thresholds(kept, a.points)
    pts = pr_curve(kept, ths)
    write_pr_csv(a.out, [(a.setting, t, p, r) for t, p, r in pts])
    for t, p, r in pts:
        print(f"{t:.4f}\t{'undefined' if p is None else f'{p:.4f}'}\t{r:.4f}")


def cmd_pipeline(a):
    bundled = bundled_paths()
    cfg = pl.PipelineConfig(
        corpus=Path(a.corpus or bundled["corpus"]),
        queries=Path(a.queries or bundled["queries"]),
        phrase_table=Path(a.phrase_table or bundled["phrase_table"]),
        embeddings=Path(a.embeddings or bundled["embeddings"]),
        paraphrases=Path(a.paraphrases or bundled["paraphrases"]),
        out_dir=Path(a.out_dir),
        topk=a.topk,
        index_aspects=a.index_aspects,
        feature_aspects=a.aspects,
        features=a.features,
        k1=a.k1,
        b=a.b,
        ranker=_ranker_config(a),
        neural=NeuralConfig(hidden=a.hidden, epochs=a.nn_epochs, learning_rate=a.nn_learning_rate,
                            negatives=a.negatives, embed_dim=32),
        encoder=EncoderTrainConfig(epochs=a.cdssm_epochs),
        ablation=a.ablation,
        seed=a.seed,
    )
    report = pl.run_pipeline(cfg)
    print(pl.format_report(report), end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabret", description=__doc__)
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-corpus", help="write the synthetic mini-corpus and side resources")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=2017)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("ingest", help="load and validate corpus and queries")
    s.add_argument("--corpus", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-index", help="BM25 index plus corpus statistics")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--aspects", type=_aspects, default=("headers", "caption"))
    s.add_argument("--k1", type=float, default=DEFAULT_K1)
    s.add_argument("--b", type=float, default=DEFAULT_B)
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("retrieve", help="top-k BM25 candidates per query")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("train-cdssm", help="train the sub-word sentence encoder on paraphrase pairs")
    s.add_argument("--paraphrases", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--learning-rate", type=float, default=0.1)
    s.add_argument("--negatives", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_cdssm)

    s = sub.add_parser("train-nn", help="train neural aspect matchers")
    s.add_argument("--corpus", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--split")
    s.add_argument("--aspect", choices=NEURAL_ASPECTS + ("all",), default="all")
    s.add_argument("--embeddings")
    s.add_argument("--embed-dim", type=int, default=64)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--learning-rate", type=float, default=0.05)
    s.add_argument("--negatives", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train_nn)

    s = sub.add_parser("featurize", help="feature vectors for every (query, candidate) pair")
    s.add_argument("--corpus", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--features", type=_families, default=pl.FAMILIES)
    s.add_argument("--stats")
    s.add_argument("--phrase-table")
    s.add_argument("--embeddings")
    s.add_argument("--encoder")
    s.add_argument("--model-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train-ranker", help="fit LambdaMART on a feature file")
    s.add_argument("--feature-file", required=True)
    s.add_argument("--split")
    s.add_argument("--families", type=_families, default=pl.FAMILIES)
    s.add_argument("--aspects", type=_aspects, default=ASPECTS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    _ranker_args(s)
    s.set_defaults(func=cmd_train_ranker)

    s = sub.add_parser("evaluate", help="MAP / P@1 report for a ranker or the BM25 order")
    _eval_args(s)
    s.add_argument("--setting", default="run")
    s.add_argument("--no-filter", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pr-curve", help="precision/recall of top-1 answers over score thresholds")
    _eval_args(s)
    s.add_argument("--setting", default="run")
    s.add_argument("--thresholds", help="comma-separated ascending thresholds")
    s.add_argument("--points", type=int, default=21)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pr_curve)

    s = sub.add_parser("pipeline", help="run every stage end to end (bundled corpus by default)")
    s.add_argument("--corpus")
    s.add_argument("--queries")
    s.add_argument("--phrase-table")
    s.add_argument("--embeddings")
    s.add_argument("--paraphrases")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    s.add_argument("--index-aspects", type=_aspects, default=("headers", "caption"))
    s.add_argument("--aspects", type=_aspects, default=ASPECTS, help="table aspects the ranker features use")
    s.add_argument("--features", type=_families, default=pl.FAMILIES)
    s.add_argument("--k1", type=float, default=DEFAULT_K1)
    s.add_argument("--b", type=float, default=DEFAULT_B)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--nn-epochs", type=int, default=20)
    s.add_argument("--nn-learning-rate", type=float, default=0.05)
    s.add_argument("--cdssm-epochs", type=int, default=5)
    s.add_argument("--negatives", type=int, default=4)
    s.add_argument("--ablation", action="store_true", help="also train one ranker per aspect configuration")
    s.add_argument("--seed", type=int, default=0)
    _ranker_args(s)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
