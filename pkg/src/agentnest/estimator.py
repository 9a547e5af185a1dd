"""Estimator-style facade so the model composes with scikit-learn pipelines:
``fit`` trains on nested documents, ``transform`` embeds them into document
vectors, ``sample`` generates new documents.

The class duck-types the sklearn estimator contract (``get_params`` /
``set_params`` over constructor arguments, trailing-underscore fitted state),
which is all ``sklearn.base.clone`` and ``Pipeline`` require; there is no hard
scikit-learn dependency.
"""

from __future__ import annotations

import inspect
import json

import numpy as np

from . import corpus, generation as G
from .config import LevelConfig, RunConfig
from .numerics import tensor as T
from .trainer import Trainer, step_rng


class NotFittedError(ValueError):
    pass


def check_is_fitted(estimator, attribute="model_"):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first")


def validate_documents(X):
    """Accept DocumentTrees, dicts in corpus format, or JSON strings."""
    if isinstance(X, (dict, str, bytes, corpus.DocumentTree)):
        raise ValueError("X must be a sequence of documents, not a single document")
    trees = []
    for i, doc in enumerate(X):
        if isinstance(doc, corpus.DocumentTree):
            trees.append(doc)
            continue
        try:
            trees.append(corpus.parse_nested(
                doc if isinstance(doc, (str, bytes, dict)) else json.dumps(doc)))
        except corpus.ParseError as e:
            raise corpus.ParseError(str(e), path=f"X[{i}]") from e
    if not trees:
        raise ValueError("X must contain at least one document")
    return trees


class HierarchicalDocumentModel:
    """Trainable hierarchical document autoencoder / generator.

    Parameters mirror the run configuration: ``dims``/``caps`` set the level
    geometry (token, sentence, paragraph, document), ``steps`` the number of
    optimization steps over the fitted corpus.
    """

    def __init__(self, *, seed=0, dims=(32, 48, 64, 96), caps=(16, 8, 8),
                 steps=200, batch_size=4, mlm_rate=0.15, lr=1e-3,
                 encoder_layers=2, heads=2, head_layers=2, pndb_mode="off",
                 gan_mode="off", gan_steps=0, min_freq=1, max_vocab=4096,
                 edit_eps=0.1, edit_steps=3):
        self.seed = seed
        self.dims = dims
        self.caps = caps
        self.steps = steps
        self.batch_size = batch_size
        self.mlm_rate = mlm_rate
        self.lr = lr
        self.encoder_layers = encoder_layers
        self.heads = heads
        self.head_layers = head_layers
        self.pndb_mode = pndb_mode
        self.gan_mode = gan_mode
        self.gan_steps = gan_steps
        self.min_freq = min_freq
        self.max_vocab = max_vocab
        self.edit_eps = edit_eps
        self.edit_steps = edit_steps

    # -- sklearn plumbing ----------------------------------------------------------

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for "
                                 f"{type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    # -- configuration --------------------------------------------------------------

    def _build_config(self):
        names = ("token", "sentence", "paragraph", "chapter", "document")
        if len(self.dims) != len(self.caps) + 1:
            raise ValueError("need one more dimension than caps (top level has no cap)")
        levels = []
        for i, dim in enumerate(self.dims):
            name = names[i] if i < len(self.dims) - 1 else "document"
            cap = self.caps[i] if i < len(self.caps) else 0
            levels.append(LevelConfig(name, dim, cap, n_layers=self.encoder_layers,
                                      n_heads=self.heads))
        return RunConfig(
            seed=self.seed, levels=levels, steps=self.steps,
            batch_size=self.batch_size, mlm_rate=self.mlm_rate, lr=self.lr,
            head_layers=self.head_layers, pndb_mode=self.pndb_mode,
            gan_mode=self.gan_mode, gan_steps=self.gan_steps,
            min_freq=self.min_freq, max_vocab=self.max_vocab,
            edit_eps=self.edit_eps, edit_steps=self.edit_steps)

    # -- estimator API ----------------------------------------------------------------

    def fit(self, X, y=None):
        """Train every component on a sequence of nested documents."""
        trees = validate_documents(X)
        cfg = self._build_config()
        vocab = corpus.build_vocab(trees, min_freq=self.min_freq,
                                   max_size=self.max_vocab)
        ids = [corpus.encode_ids(t, vocab) for t in trees]
        batches = corpus.make_batches(ids, cfg.caps, cfg.batch_size)
        trainer = Trainer(cfg, vocab, batches)
        trainer.train()
        self.config_ = cfg
        self.vocab_ = vocab
        self.trainer_ = trainer
        self.model_ = trainer.model
        self.n_documents_ = len(trees)
        return self

    def transform(self, X):
        """Embed documents into top-level vectors [n_documents, dim]."""
        check_is_fitted(self)
        trees = validate_documents(X)
        ids = [corpus.encode_ids(t, self.vocab_) for t in trees]
        top = self.config_.level_names[-1]
        out = []
        for batch in corpus.make_batches(ids, self.config_.caps,
                                         self.config_.batch_size):
            with T.no_grad():
                dvt = self.model_.encoder.build_dvt(batch)
            out.append(dvt.vectors[top].data.copy())
        return np.concatenate(out, axis=0)

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)

    def sample(self, n_documents=1, seed=None, edit_eps=None, edit_steps=None):
        """Generate documents (corpus-format dicts) from the trained model."""
        check_is_fitted(self)
        model = self.model_
        cfg = self.config_
        top = cfg.level_names[-1]
        rng = step_rng(self.seed if seed is None else seed, 0, purpose=9)
        docs = []
        for _ in range(n_documents):
            noise = model.noise.sample(top, rng)
            with T.no_grad():
                vec = model.generators.generate(top, noise[None, :]).data[0]
                answers = None
                if model.pndb is not None:
                    pn = model.noise.sample("token", rng, n=model.pndb.n_questions)
                    answers = model.pndb.generate_answers(vec, pn).data
            tree = G.hierarchical_decode(model.stack, model.encoder, vec,
                                         pndb=model.pndb, answers=answers)
            tree = G.copyedit_pass(
                model.stack, model.encoder, model.heads, tree,
                self.edit_eps if edit_eps is None else edit_eps,
                self.edit_steps if edit_steps is None else edit_steps,
                pndb=model.pndb, answers=answers)
            doc, flags = G.emit_text(tree, self.vocab_)
            docs.append(doc)
        return docs
