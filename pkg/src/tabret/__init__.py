"""Two-stage content-based table retrieval: BM25 candidates, designed and neural matchers, LambdaMART fusion."""

__version__ = "0.1.0"
