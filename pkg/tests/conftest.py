import math
import random

import numpy as np
import pytest

from tabret.tables import Corpus, Table

WORDS = ["alpha", "beta", "gamma", "delta", "river", "city", "lake", "north", "south", "list", "of", "in",
         "poland", "german", "museum", "2016", "population", "area", "name", "length"]


def random_table(rng: random.Random, tid: str, max_rows: int = 5, max_cols: int = 4, words=WORDS) -> Table:
    n_cols = rng.randint(1, max_cols)
    n_rows = rng.randint(1, max_rows)
    phrase = lambda k: " ".join(rng.choice(words) for _ in range(rng.randint(0, k)))
    headers = tuple(phrase(2) or "col" for _ in range(n_cols))
    cells = tuple(tuple(phrase(3) for _ in range(n_cols)) for _ in range(n_rows))
    caption = phrase(5) if rng.random() < 0.8 else None
    return Table(tid, headers, cells, caption or None)


def random_corpus(n: int, seed: int = 0, **kw) -> Corpus:
    rng = random.Random(seed)
    return Corpus.from_tables([random_table(rng, f"t{i:04d}", **kw) for i in range(n)])


def brute_idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PROBE_TABLE = Table("g", ("name", "river length"),
                    (("vistula", "1047 km"), ("oder river", "854"), ("warta", "")), "rivers of poland")
PROBE_VOCAB = sorted({"name", "river", "length", "vistula", "1047", "km", "oder", "854", "warta", "rivers", "of",
                      "poland", "polish"})


def probe_model(aspect: str, seed: int = 0):
    """A small, well-conditioned model plus two labeled examples for gradient checking."""
    from tabret.neural import AspectModel

    model = AspectModel(aspect, PROBE_VOCAB, embed_dim=8, hidden=6, seed=seed, init_scale=1.0)
    examples = [(model.prepare(["polish", "rivers", "length"], PROBE_TABLE), 1),
                (model.prepare(["oder", "x"], PROBE_TABLE), 0)]
    return model, examples
