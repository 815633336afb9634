"""End-to-end experiment: ingest, index, train matchers, featurize, rank, evaluate.

Every stage reads and writes plain files under the output directory, so each
one can also be run on its own from the command line.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bm25 import DEFAULT_B, DEFAULT_K1, DEFAULT_TOPK, WQT_ASPECTS, Bm25Index, build_index
from .cdssm import EncoderTrainConfig, SubwordEncoderParams, train_subword_encoder
from .evaluation import (
    RankedResult,
    candidate_recall,
    default_thresholds,
    evaluate,
    length_bucket_report,
    pr_curve,
    split_dataset,
    write_bucket_csv,
    write_pr_csv,
)
from .features import (
    ConfigurationError,
    EmbeddingTable,
    FeatureResources,
    PhraseTable,
    designed_feature_names,
    designed_feature_vector,
)
from .lambdamart import Forest, LambdaMartConfig, fit_lambdamart
from .neural import NEURAL_ASPECTS, AspectModel, NeuralConfig, neural_feature_names, neural_feature_vector, train_aspect_model
from .synthetic import load_paraphrases
from .tables import ASPECTS, Corpus, Query, load_corpus, load_queries, parse_aspects, save_corpus, save_queries
from .text import CorpusStats, build_stats

logger = logging.getLogger(__name__)

FAMILIES = ("designed", "neural")
ASPECT_NEURAL = {"headers": ("header",), "cells": ("cell", "row", "column"), "caption": ("caption",)}
ABLATIONS = {
    "H": ("headers",),
    "Cel": ("cells",),
    "Cap": ("caption",),
    "H+Cel": ("headers", "cells"),
    "H+Cel+Cap": ("headers", "cells", "caption"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        super().__init__(f"[{stage}] {cause}")


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the single user seed."""
    return (seed * 1_000_003 + zlib.crc32(stage.encode())) % (2**31)


@dataclass
class PipelineConfig:
    corpus: Path
    queries: Path
    phrase_table: Path | None = None
    embeddings: Path | None = None
    paraphrases: Path | None = None
    out_dir: Path = Path("run")
    topk: int = DEFAULT_TOPK
    index_aspects: tuple[str, ...] = WQT_ASPECTS
    feature_aspects: tuple[str, ...] = ASPECTS
    features: tuple[str, ...] = FAMILIES
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    ranker: LambdaMartConfig = field(default_factory=LambdaMartConfig)
    neural: NeuralConfig = field(default_factory=lambda: NeuralConfig(embed_dim=32, hidden=32))
    encoder: EncoderTrainConfig = field(default_factory=lambda: EncoderTrainConfig(epochs=5))
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    ablation: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("corpus", "queries"):
            if not Path(getattr(self, name)).exists():
                raise ConfigurationError(f"{name} file {getattr(self, name)} does not exist")
        unknown = set(self.features) - set(FAMILIES)
        if unknown or not self.features:
            raise ConfigurationError(f"--features must name at least one of {','.join(FAMILIES)}")
        if "designed" in self.features:
            for name in ("phrase_table", "embeddings", "paraphrases"):
                p = getattr(self, name)
                if p is None or not Path(p).exists():
                    raise ConfigurationError(f"designed features need --{name.replace('_', '-')} (got {p})")
        if self.neural.embed_dim and self.embeddings is None and "neural" in self.features:
            logger.info("no pretrained embeddings; neural models start from random vectors")


# ---------------------------------------------------------------------------
# stage functions (file in, file out)

def stage_ingest(corpus_path, queries_path, out_dir) -> tuple[Corpus, list[Query]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(corpus_path)
    queries = load_queries(queries_path)
    save_corpus(corpus, out / "corpus.jsonl")
    save_queries(queries, out / "queries.jsonl")
    _write_json(out / "ingest.json", {"tables": len(corpus), "queries": len(queries),
                                      "rejected_tables": corpus.provenance.get("rejected", [])})
    return corpus, queries


def stage_index(corpus: Corpus, out_dir, aspects=WQT_ASPECTS, k1=DEFAULT_K1, b=DEFAULT_B) -> tuple[Bm25Index, CorpusStats]:
    out = Path(out_dir)
    index = build_index(corpus, aspects, k1, b)
    index.save(out / "index.json.gz")
    stats = build_stats(corpus, ASPECTS)
    stats.save(out / "stats.tsv")
    return index, stats


def stage_retrieve(index: Bm25Index, queries: Sequence[Query], k: int, out_path) -> dict[str, list[tuple[str, float]]]:
    cands = {q.id: index.retrieve(q.tokens, k) for q in queries}
    with open(out_path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"query_id": q.id, "candidates": cands[q.id]}) + "\n")
    return cands


def load_candidates(path) -> dict[str, list[tuple[str, float]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["query_id"]] = [(t, float(s)) for t, s in rec["candidates"]]
    return out


def stage_train_cdssm(paraphrase_path, config: EncoderTrainConfig, out_path) -> SubwordEncoderParams:
    params = train_subword_encoder(load_paraphrases(paraphrase_path), config)
    params.save(out_path)
    return params


def training_pairs(queries: Sequence[Query], corpus: Corpus, candidates: dict[str, list[tuple[str, float]]],
                   negatives: int, seed: int, pool: int = 50) -> list[tuple[Query, object, int]]:
    """Positives plus ``negatives`` sampled per positive from the query's BM25 top-``pool``.

    Falls back to uniform corpus sampling when the candidate list is too short.
    """
    rng = np.random.default_rng(seed)
    all_ids = corpus.ids()
    data = []
    for q in queries:
        relevant = set(q.relevant_table_ids) & set(corpus.tables)
        if not relevant:
            continue
        hard = [t for t, _ in candidates.get(q.id, [])[:pool] if t not in relevant]
        for pos in sorted(relevant):
            data.append((q, corpus[pos], 1))
            picked = list(rng.choice(hard, size=min(negatives, len(hard)), replace=False)) if hard else []
            while len(picked) < negatives:
                t = all_ids[int(rng.integers(len(all_ids)))]
                if t not in relevant and t not in picked:
                    picked.append(t)
            data.extend((q, corpus[t], 0) for t in picked)
    return data


def stage_train_nn(data, aspects: Sequence[str], config: NeuralConfig, out_dir, vocab, pretrained=None
                   ) -> dict[str, AspectModel]:
    out = Path(out_dir)
    models = {}
    for i, aspect in enumerate(aspects):
        cfg = NeuralConfig(**{**asdict(config), "seed": stage_seed(config.seed, f"nn-{aspect}")})
        model = train_aspect_model(data, aspect, cfg, vocab=vocab, pretrained=pretrained)
        model.save(out / f"nn_{aspect}.npz")
        models[aspect] = model
    return models


def load_models(model_dir) -> dict[str, AspectModel]:
    return {a: AspectModel.load(Path(model_dir) / f"nn_{a}.npz") for a in NEURAL_ASPECTS
            if (Path(model_dir) / f"nn_{a}.npz").exists()}


def feature_names(families: Sequence[str]) -> list[str]:
    names = ["bm25"]
    if "designed" in families:
        names += designed_feature_names()
    if "neural" in families:
        names += neural_feature_names()
    return names


def stage_featurize(queries: Sequence[Query], corpus: Corpus, candidates, families: Sequence[str],
                    resources: FeatureResources | None, models: dict[str, AspectModel] | None, out_path) -> list[dict]:
    rows = []
    for q in queries:
        rel = set(q.relevant_table_ids)
        for tid, bm in candidates.get(q.id, []):
            table = corpus[tid]
            vec = [bm]
            if "designed" in families:
                vec += designed_feature_vector(q, table, resources)
            if "neural" in families:
                vec += neural_feature_vector(q, table, models)
            rows.append({"query_id": q.id, "table_id": tid, "label": int(tid in rel), "features": vec})
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"feature_names": feature_names(families)}) + "\n")
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return rows


def load_features(path) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8") as fh:
        names = json.loads(fh.readline())["feature_names"]
        rows = [json.loads(line) for line in fh if line.strip()]
    return names, rows


def select_columns(names: Sequence[str], families: Sequence[str], aspects: Sequence[str] = ASPECTS) -> list[int]:
    """Column indices for the given feature families restricted to the given table aspects."""
    keep = {"bm25"}
    if "designed" in families:
        keep |= set(designed_feature_names(aspects))
    if "neural" in families:
        keep |= {f"nn.{n}" for a in aspects for n in ASPECT_NEURAL[a]}
    missing = keep - set(names)
    if missing:
        raise ConfigurationError(f"feature file lacks columns {sorted(missing)}")
    return [i for i, n in enumerate(names) if n in keep]


def _groups(rows, qids: set[str], cols: Sequence[int]):
    by_q: dict[str, list[dict]] = {}
    for r in rows:
        if r["query_id"] in qids:
            by_q.setdefault(r["query_id"], []).append(r)
    out = []
    for qid in sorted(by_q):
        rs = by_q[qid]
        X = np.array([[r["features"][c] for c in cols] for r in rs], dtype=np.float64)
        y = np.array([r["label"] for r in rs])
        out.append((qid, [r["table_id"] for r in rs], X, y))
    return out


def stage_train_ranker(names, rows, train_ids, valid_ids, cols, config: LambdaMartConfig, out_path=None) -> Forest:
    train = [(X, y) for _, _, X, y in _groups(rows, set(train_ids), cols)]
    valid = [(X, y) for _, _, X, y in _groups(rows, set(valid_ids), cols)]
    forest = fit_lambdamart(train, config, [names[c] for c in cols], valid=valid or None)
    if out_path is not None:
        forest.save(out_path)
    return forest


def rank_with_forest(forest: Forest, names, rows, qids, cols) -> dict[str, list[tuple[str, float]]]:
    out = {}
    for qid, tids, X, _ in _groups(rows, set(qids), cols):
        s = forest.predict(X)
        out[qid] = sorted(zip(tids, (float(v) for v in s)), key=lambda x: (-x[1], x[0]))
    return out


def ranked_results(queries: Sequence[Query], rankings: dict[str, list[tuple[str, float]]]) -> list[RankedResult]:
    return [RankedResult(q.id, list(rankings.get(q.id, [])), frozenset(q.relevant_table_ids)) for q in queries]


# ---------------------------------------------------------------------------

SETTING_FAMILIES = {"Feature": ("designed",), "NeuralNet": ("neural",), "Feature+NeuralNet": ("designed", "neural")}


def _settings(families: Sequence[str]) -> list[str]:
    out = ["BM25"]
    for name, fams in SETTING_FAMILIES.items():
        if all(f in families for f in fams):
            out.append(name)
    return out


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage and return the structured report (also written to ``<out_dir>/report/``)."""
    cfg = config
    stage = "config"
    try:
        cfg.validate()
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stage = "ingest"
        corpus, queries = stage_ingest(cfg.corpus, cfg.queries, out)
        labeled = [q for q in queries if q.relevant_table_ids]
        if not labeled:
            raise ConfigurationError("no labeled queries to train and evaluate on")
        stage = "index"
        index, stats = stage_index(corpus, out, cfg.index_aspects, cfg.k1, cfg.b)
        stage = "split"
        train_q, valid_q, test_q = split_dataset(labeled, cfg.split, stage_seed(cfg.seed, "split"))
        _write_json(out / "split.json", {"train": [q.id for q in train_q], "validation": [q.id for q in valid_q],
                                         "test": [q.id for q in test_q]})
        stage = "retrieve"
        candidates = stage_retrieve(index, labeled, cfg.topk, out / "candidates.jsonl")

        resources = models = None
        embeddings = EmbeddingTable.load(cfg.embeddings) if cfg.embeddings else None
        if "designed" in cfg.features:
            stage = "train-cdssm"
            enc_cfg = EncoderTrainConfig(**{**asdict(cfg.encoder), "seed": stage_seed(cfg.seed, "cdssm")})
            encoder = stage_train_cdssm(cfg.paraphrases, enc_cfg, out / "cdssm.npz")
            resources = FeatureResources(stats, PhraseTable.load(cfg.phrase_table), embeddings, encoder)
        if "neural" in cfg.features:
            stage = "train-nn"
            nn_cfg = NeuralConfig(**{**asdict(cfg.neural), "seed": cfg.seed})
            if embeddings is not None:
                nn_cfg.embed_dim = embeddings.dim
            data = training_pairs(train_q, corpus, candidates, nn_cfg.negatives, stage_seed(cfg.seed, "negatives"))
            vocab = model_vocabulary(corpus, train_q)
            models = stage_train_nn(data, NEURAL_ASPECTS, nn_cfg, out, vocab, embeddings)

        stage = "featurize"
        stage_featurize(labeled, corpus, candidates, cfg.features, resources, models, out / "features.jsonl")
        names, rows = load_features(out / "features.jsonl")

        stage = "train-ranker"
        settings = _settings(cfg.features)
        rankings: dict[str, dict] = {"BM25": {q.id: candidates[q.id] for q in labeled}}
        forests: dict[str, Forest] = {}
        rk_cfg = LambdaMartConfig(**{**asdict(cfg.ranker), "seed": stage_seed(cfg.seed, "ranker")})
        for s in settings[1:]:
            cols = select_columns(names, SETTING_FAMILIES[s], cfg.feature_aspects)
            forests[s] = stage_train_ranker(names, rows, [q.id for q in train_q], [q.id for q in valid_q], cols,
                                            rk_cfg, out / f"forest_{_slug(s)}.txt")
            rankings[s] = rank_with_forest(forests[s], names, rows, [q.id for q in test_q], cols)

        ablation_rows = []
        if cfg.ablation:
            stage = "ablation"
            for label, aspects in ABLATIONS.items():
                row = {"aspects": label, "settings": {}}
                for setting in settings[1:]:
                    cols = select_columns(names, SETTING_FAMILIES[setting], aspects)
                    forest = stage_train_ranker(names, rows, [q.id for q in train_q], [q.id for q in valid_q],
                                                cols, rk_cfg)
                    ranked = rank_with_forest(forest, names, rows, [q.id for q in test_q], cols)
                    rep = evaluate(ranked_results(test_q, ranked))
                    row["settings"][setting] = {"map": rep.map, "p_at_1": rep.p_at_1}
                ablation_rows.append(row)

        stage = "evaluate"
        report = build_report(cfg, settings, rankings, forests, test_q, labeled, index, ablation_rows)
        write_report(report, out / "report")
        return report
    except StageError:
        raise
    except Exception as exc:  # any failure is tagged with the stage it happened in
        raise StageError(stage, exc) from exc


def model_vocabulary(corpus: Corpus, queries: Sequence[Query]) -> list[str]:
    from .tables import aspect_text

    words = set()
    for t in corpus:
        for a in ASPECTS:
            words.update(aspect_text(t, a))
    for q in queries:
        words.update(q.tokens)
    return sorted(words)


def build_report(cfg: PipelineConfig, settings, rankings, forests, test_q, labeled, index, ablation_rows) -> dict:
    report = {
        "config": {
            "topk": cfg.topk,
            "index_aspects": list(cfg.index_aspects),
            "feature_aspects": list(cfg.feature_aspects),
            "features": list(cfg.features),
            "k1": cfg.k1,
            "b": cfg.b,
            "seed": cfg.seed,
            "ranker": asdict(cfg.ranker),
        },
        "candidate_recall": {
            "test": candidate_recall(index, test_q, cfg.topk),
            "all": candidate_recall(index, labeled, cfg.topk),
        },
        "settings": {},
        "ablation": ablation_rows,
    }
    for s in settings:
        results = ranked_results(test_q, rankings[s])
        rep = evaluate(results, filter_rule=True)
        kept = [r for r in results if r.candidates]
        rep.pr_points = pr_curve(kept, default_thresholds(kept))
        rep.per_bucket_p_at_1 = length_bucket_report(results, {q.id: len(q.tokens) for q in test_q})
        entry = rep.to_dict()
        if s in forests:
            entry["train_map"] = forests[s].train_map[-1]
            entry["valid_map_by_tree"] = forests[s].valid_map
        report["settings"][s] = entry
    return report


def _slug(name: str) -> str:
    return name.lower().replace("+", "_")


def _fmt(v, digits=4):
    return "n/a" if v is None else f"{v:.{digits}f}"


def format_report(report: dict) -> str:
    lines = ["setting              MAP      P@1     evaluated  filtered"]
    for s, e in report["settings"].items():
        lines.append(f"{s:<20} {_fmt(e['map'])}   {_fmt(e['p_at_1'])}  {e['num_queries_evaluated']:>9}  "
                     f"{e['num_queries_filtered']:>8}")
    rec = report["candidate_recall"]
    lines.append("")
    lines.append(f"candidate recall (top-{report['config']['topk']}): test {_fmt(rec['test'])}, all {_fmt(rec['all'])}")
    if report["ablation"]:
        shown = list(report["ablation"][0]["settings"])
        lines.append("")
        lines.append("aspects     " + "".join(f"{s + ' MAP':>24}{'P@1':>8}" for s in shown))
        for r in report["ablation"]:
            cells = "".join(f"{_fmt(r['settings'][s]['map']):>24}{_fmt(r['settings'][s]['p_at_1']):>8}" for s in shown)
            lines.append(f"{r['aspects']:<12}{cells}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, report_dir) -> None:
    d = Path(report_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_json(d / "report.json", report)
    (d / "report.txt").write_text(format_report(report), encoding="utf-8")
    pr_rows = [(s, p["threshold"], p["precision"], p["recall"]) for s, e in report["settings"].items()
               for p in e["pr_points"]]
    write_pr_csv(d / "pr_curve.csv", pr_rows)
    write_bucket_csv(d / "length_buckets.csv", [(s, b, v) for s, e in report["settings"].items()
                                                 for b, v in e["per_bucket_p_at_1"].items()])
    if report["ablation"]:
        with open(d / "ablation.csv", "w", encoding="utf-8") as fh:
            fh.write("aspects,setting,map,p_at_1\n")
            for r in report["ablation"]:
                for s, m in r["settings"].items():
                    fh.write(f"{r['aspects']},{s},{_fmt(m['map'], 6)},{_fmt(m['p_at_1'], 6)}\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")
