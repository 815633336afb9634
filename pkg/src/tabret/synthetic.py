"""Seeded generator for the bundled mini-corpus and its side resources.

Each table is "list of <topic> in <country>" with topic-specific headers and
invented entity names in the cells.  Queries name the topic and then mix a
caption cue (the country, often only as its adjective), a header cue and a
cell cue, so every aspect carries evidence but plain BM25 over caption and
headers cannot resolve paraphrased countries or cell entities.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import EmbeddingTable, PhraseTable
from .tables import Corpus, Query, Table, save_corpus, save_queries

COUNTRIES = [
    ("poland", "polish"), ("germany", "german"), ("france", "french"), ("spain", "spanish"),
    ("italy", "italian"), ("japan", "japanese"), ("china", "chinese"), ("brazil", "brazilian"),
    ("canada", "canadian"), ("mexico", "mexican"), ("norway", "norwegian"), ("sweden", "swedish"),
    ("greece", "greek"), ("egypt", "egyptian"), ("india", "indian"), ("kenya", "kenyan"),
    ("peru", "peruvian"), ("chile", "chilean"), ("turkey", "turkish"), ("russia", "russian"),
]

TOPICS = {
    "rivers": ["length", "discharge", "source", "mouth", "basin", "tributaries"],
    "mountains": ["elevation", "prominence", "range", "first ascent", "isolation", "coordinates"],
    "cities": ["population", "area", "density", "mayor", "founded", "province"],
    "airlines": ["fleet size", "hub", "founded", "alliance", "destinations", "callsign"],
    "universities": ["students", "founded", "campus", "rector", "endowment", "faculty"],
    "museums": ["visitors", "collection", "director", "opened", "architect", "district"],
    "lakes": ["surface area", "depth", "volume", "shore length", "inflow", "outflow"],
    "festivals": ["dates", "attendance", "genre", "venue", "first held", "organizer"],
    "railways": ["gauge", "route length", "operator", "opened", "electrified", "stations"],
    "islands": ["area", "population", "highest point", "archipelago", "capital", "coastline"],
}

_SYLLABLES = ["ka", "lo", "mi", "ra", "ve", "tor", "sun", "pel", "dri", "an", "os", "qu",
              "bel", "mar", "zin", "fo", "ut", "gra", "vis", "tu", "ne", "ho", "sa", "ry"]
_FILLER = ["north", "south", "east", "west", "central", "upper", "lower", "old", "new", "grand"]


@dataclass
class Bundle:
    corpus: Corpus
    queries: list[Query]
    phrase_table: PhraseTable
    embeddings: EmbeddingTable
    paraphrases: list[tuple[str, str]]


def _entity_names(rng: np.random.Generator, n: int) -> list[str]:
    seen: set[str] = set()
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), size=k))
        if w not in seen and len(w) >= 5:
            seen.add(w)
            out.append(w)
    return out


def _cell_value(rng: np.random.Generator, attr: str) -> str:
    if rng.random() < 0.6:
        return str(int(rng.integers(1, 5000)))
    return str(_FILLER[int(rng.integers(len(_FILLER)))])


def make_tables(rng: np.random.Generator) -> tuple[list[Table], dict[str, dict]]:
    tables = []
    meta = {}
    n_rows = rng.integers(4, 8, size=len(TOPICS) * len(COUNTRIES))
    names = iter(_entity_names(rng, int(n_rows.sum())))
    i = 0
    for topic, attrs in TOPICS.items():
        for country, adj in COUNTRIES:
            chosen = sorted(rng.choice(len(attrs), size=3, replace=False).tolist())
            headers = ["name"] + [attrs[c] for c in chosen]
            rows = []
            entities = []
            for _ in range(int(n_rows[i])):
                ent = next(names)
                entities.append(ent)
                rows.append([ent] + [_cell_value(rng, attrs[c]) for c in chosen])
            tid = f"t{i:03d}"
            caption = f"list of {topic} in {country}"
            tables.append(Table(tid, tuple(headers), tuple(tuple(r) for r in rows), caption))
            meta[tid] = {"topic": topic, "country": country, "adj": adj,
                         "attrs": [attrs[c] for c in chosen], "entities": entities}
            i += 1
    return tables, meta


def make_queries(rng: np.random.Generator, meta: dict[str, dict], n: int = 60) -> list[Query]:
    ids = sorted(meta)
    targets = sorted(rng.choice(len(ids), size=n, replace=False).tolist())
    queries = []
    for qi, ti in enumerate(targets):
        m = meta[ids[ti]]
        place = m["adj"] if rng.random() < 0.6 else m["country"]
        attr = m["attrs"][int(rng.integers(3))]
        ent = m["entities"][int(rng.integers(len(m["entities"])))]
        topic = m["topic"]
        form = int(rng.integers(4))
        if form == 0:
            text = f"{place} {topic} {ent}"
        elif form == 1:
            text = f"{topic} {attr} {place}" if place == m["adj"] else f"{topic} in {place} {attr}"
        elif form == 2:
            text = f"{ent} {attr} {topic}"
        else:
            text = f"list of {place} {topic} with {attr} of {ent}"
        queries.append(Query.from_text(f"q{qi:03d}", text, [ids[ti]]))
    return queries


def make_phrase_table(rng: np.random.Generator) -> PhraseTable:
    """Countries and their adjectives share a pivot 'foreign' phrase, which makes them paraphrases."""
    pt = PhraseTable()
    for country, adj in COUNTRIES:
        pivot = f"x_{country[:4]}"
        p_c, p_a = float(rng.uniform(0.6, 0.95)), float(rng.uniform(0.6, 0.95))
        pt.add(country, pivot, p_c, 0.5)
        pt.add(adj, pivot, p_a, 0.5)
        pt.add(f"in {country}", f"{pivot} loc", float(rng.uniform(0.5, 0.9)), 0.4)
        pt.add(f"{adj}", f"{pivot} loc", float(rng.uniform(0.05, 0.3)), 0.3)
    for topic in TOPICS:
        pivot = f"x_{topic[:5]}"
        pt.add(topic, pivot, float(rng.uniform(0.7, 0.95)), 0.9)
        pt.add(f"list of {topic}", f"x_lista {pivot}", float(rng.uniform(0.5, 0.9)), 0.8)
        pt.add(f"{topic}", f"x_lista {pivot}", float(rng.uniform(0.05, 0.2)), 0.2)
    pt.add("list of", "x_lista", 0.8, 0.7)
    pt.add("list", "x_lista", 0.4, 0.3)
    return pt


def make_embeddings(rng: np.random.Generator, dim: int = 32) -> EmbeddingTable:
    words: dict[str, int] = {}
    vecs = []

    def add(w, v):
        if w not in words:
            words[w] = len(vecs)
            vecs.append(v)

    for country, adj in COUNTRIES:
        base = rng.normal(size=dim)
        add(country, base + 0.3 * rng.normal(size=dim))
        add(adj, base + 0.3 * rng.normal(size=dim))
    for topic, attrs in TOPICS.items():
        add(topic, rng.normal(size=dim))
        for a in attrs:
            for w in a.split():
                add(w, rng.normal(size=dim))
    for w in ["list", "of", "in", "with", "name", *_FILLER]:
        add(w, rng.normal(size=dim))
    return EmbeddingTable(words, np.asarray(vecs))


def make_paraphrases(rng: np.random.Generator, n: int = 120) -> list[tuple[str, str]]:
    """Pairs that describe the same list two ways; each pair shares a rare invented token."""
    topics = list(TOPICS)
    rare = _entity_names(rng, n)
    out = []
    for i in range(n):
        country, adj = COUNTRIES[int(rng.integers(len(COUNTRIES)))]
        topic = topics[int(rng.integers(len(topics)))]
        a = f"list of {topic} in {country} {rare[i]}"
        b = f"{rare[i]} {adj} {topic}"
        out.append((a, b) if rng.random() < 0.5 else (b, a))
    return out


def generate(seed: int = 2017) -> Bundle:
    rng = np.random.default_rng(seed)
    tables, meta = make_tables(rng)
    queries = make_queries(rng, meta)
    return Bundle(
        corpus=Corpus.from_tables(tables, source="synthetic", seed=seed),
        queries=queries,
        phrase_table=make_phrase_table(rng),
        embeddings=make_embeddings(rng),
        paraphrases=make_paraphrases(rng),
    )


BUNDLE_FILES = {
    "corpus": "corpus.jsonl",
    "queries": "queries.jsonl",
    "phrase_table": "phrases.txt",
    "embeddings": "embeddings.txt",
    "paraphrases": "paraphrases.tsv",
}


def write_bundle(bundle: Bundle, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in BUNDLE_FILES.items()}
    save_corpus(bundle.corpus, paths["corpus"])
    save_queries(bundle.queries, paths["queries"])
    bundle.phrase_table.save(paths["phrase_table"])
    bundle.embeddings.save(paths["embeddings"])
    with open(paths["paraphrases"], "w", encoding="utf-8") as fh:
        for a, b in bundle.paraphrases:
            fh.write(f"{a}\t{b}\n")
    return paths


def load_paraphrases(path: str | Path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                a, b = line.rstrip("\n").split("\t")
                out.append((a, b))
    return out


def bundled_paths() -> dict[str, Path]:
    """Locations of the mini-corpus files shipped inside the package."""
    root = Path(str(importlib.resources.files("tabret") / "data"))
    return {k: root / v for k, v in BUNDLE_FILES.items()}
