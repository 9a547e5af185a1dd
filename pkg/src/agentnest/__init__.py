"""agentnest: hierarchical encoding, adversarial generation and refinement of
nested documents (tokens -> sentences -> paragraphs -> documents)."""

import os

# single-threaded BLAS keeps runs byte-deterministic; harmless at desk scale
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

from .config import LevelConfig, RunConfig  # noqa: E402
from .corpus import (  # noqa: E402
    DocumentTree, ParseError, Vocabulary, build_vocab, encode_ids,
    make_batches, parse_nested, serialize_nested,
)
from .estimator import HierarchicalDocumentModel, NotFittedError  # noqa: E402
from .trainer import Model, Trainer, check_gradients, total_loss  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "DocumentTree",
    "HierarchicalDocumentModel",
    "LevelConfig",
    "Model",
    "NotFittedError",
    "ParseError",
    "RunConfig",
    "Trainer",
    "Vocabulary",
    "build_vocab",
    "check_gradients",
    "encode_ids",
    "make_batches",
    "parse_nested",
    "serialize_nested",
    "total_loss",
    "__version__",
]
