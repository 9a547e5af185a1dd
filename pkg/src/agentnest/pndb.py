"""Attention memory for document-global facts.

Write path: for every sentence, the token-level contextual matrix is projected
to keys and passed through the Ignore Gate to values; a trainable question
matrix attends over them and the per-sentence answers are average-pooled per
document.  Read path: token matrices attend back over the questions to mix
pooled answer rows, and the Update Gate blends the result into each token.
Leave-one-out pooling excludes sentence j's answers from sentence j's reads,
which removes the label-leak channel entirely.
"""

from __future__ import annotations

import logging

import numpy as np

from .numerics import Tensor, concat, layers as L, tensor as T

log = logging.getLogger(__name__)


class GateParams:
    """Unigram conv filters grouped by 8 for softmax, then one logistic unit."""

    def __init__(self, store, prefix, dim, n_filters, rng):
        if n_filters % 8 != 0:
            raise ValueError(f"gate filters must be divisible by 8, got {n_filters}")
        self.filters = store.param(f"{prefix}/filters",
                                   L.xavier_uniform((dim, n_filters), rng))
        self.logit_w = store.param(f"{prefix}/logit_w",
                                   L.xavier_uniform((n_filters, 1), rng))
        self.logit_b = store.param(f"{prefix}/logit_b", np.zeros(1))
        self.n_filters = n_filters


def gate_activation(gate, x):
    """Per-token scalar in (0,1): conv -> per-group 8-way softmax -> logistic."""
    feats = L.conv1d_unigram(x, gate.filters)          # [..., S, F]
    shape = feats.shape
    grouped = feats.reshape(shape[:-1] + (gate.n_filters // 8, 8))
    grouped = L.softmax(grouped, axis=-1)
    feats = grouped.reshape(shape)
    return T.sigmoid(L.dense(feats, gate.logit_w, gate.logit_b))  # [..., S, 1]


class PNDB:
    def __init__(self, store, cfg, rng):
        self.cfg = cfg
        h = cfg.levels[0].dim
        doc_dim = cfg.levels[-1].dim
        q = cfg.pndb_questions
        self.h = h
        self.n_questions = q
        self.questions = store.param("pndb/questions", L.normal_init((q, h), rng))
        self.write_key = store.param("pndb/write_key", L.xavier_uniform((h, h), rng))
        self.read_key = store.param("pndb/read_key", L.xavier_uniform((h, h), rng))
        self.ignore = GateParams(store, "pndb/ignore_gate", h, cfg.pndb_filters, rng)
        self.update = GateParams(store, "pndb/update_gate", h, cfg.pndb_filters, rng)
        # G_PNDB: question+document -> dense(h) -> concat noise -> L dense layers
        self.gen_in_w = store.param("pndb/gen/in_w",
                                    L.xavier_uniform((h + doc_dim, h), rng))
        self.gen_in_b = store.param("pndb/gen/in_b", np.zeros(h))
        self.gen_layers = []
        for j in range(cfg.head_layers):
            d_in = 2 * h if j == 0 else h
            self.gen_layers.append((store.param(f"pndb/gen/w{j}",
                                                L.xavier_uniform((d_in, h), rng)),
                                    store.param(f"pndb/gen/b{j}", np.zeros(h))))

    @staticmethod
    def param_names(store):
        return [n for n in store.names() if n.startswith("pndb/")]

    def generator_param_names(self, store):
        return [n for n in store.names() if n.startswith("pndb/gen/")]

    # -- gates ------------------------------------------------------------------

    def ignore_gate(self, e):
        """V_i = E_i scaled per token by its logistic activation."""
        return e * gate_activation(self.ignore, e)

    def update_gate(self, e2, a2):
        """Per-token convex blend w*A2 + (1-w)*E2 with w from the gate."""
        if e2.shape != a2.shape:
            raise ValueError(f"update gate: shapes {e2.shape} != {a2.shape}")
        w = gate_activation(self.update, e2)
        return a2 * w + e2 * (1.0 - w)

    # -- write ------------------------------------------------------------------

    def write(self, e, real_mask, doc_of_sentence, n_docs):
        """Per-sentence answers and document-pooled answer matrices.

        e: [n_sent, s_tok, h] contextual token matrices; pad keys masked.
        Returns (pooled [n_docs, q, h], per_sentence [n_sent, q, h]).
        """
        k = T.matmul(e, self.write_key)
        v = self.ignore_gate(e)
        logits = T.matmul(self.questions, T.swapaxes(k, -1, -2)) * Tensor(1.0 / np.sqrt(self.h))
        blocked = ~np.asarray(real_mask, dtype=bool)[:, None, :]
        logits = T.where_mask(logits, np.broadcast_to(blocked, logits.shape), -1e30)
        a_i = T.matmul(L.softmax(logits, axis=-1), v)  # [n_sent, q, h]

        doc_of_sentence = np.asarray(doc_of_sentence)
        counts = np.bincount(doc_of_sentence, minlength=n_docs).astype(np.float64)
        pool = np.zeros((n_docs, len(doc_of_sentence)))
        pool[doc_of_sentence, np.arange(len(doc_of_sentence))] = 1.0
        pool /= np.maximum(counts, 1.0)[:, None]
        flat = a_i.reshape(a_i.shape[0], self.n_questions * self.h)
        pooled = T.matmul(Tensor(pool), flat).reshape(n_docs, self.n_questions, self.h)
        return pooled, a_i

    def pooled_answers_leave_one_out(self, a_i, doc_of_sentence, n_docs):
        """A^(-j): ascending-order sum over the document's other sentences.

        The explicit re-summation (rather than subtracting A_j from the total)
        keeps A^(-j) bit-identical when sentence j changes.  Single-sentence
        documents fall back to their global A with a warning.
        """
        doc_of_sentence = np.asarray(doc_of_sentence)
        out = []
        for j in range(a_i.shape[0]):
            members = np.nonzero(doc_of_sentence == doc_of_sentence[j])[0]
            others = [int(i) for i in members if i != j]
            if not others:
                log.warning("leave-one-out: single-sentence document, "
                            "falling back to global A for sentence %d", j)
                others = [j]
            acc = a_i[others[0]]
            for i in others[1:]:
                acc = acc + a_i[i]
            out.append(acc * Tensor(1.0 / len(others)))
        return T.stack(out, axis=0)

    # -- read -------------------------------------------------------------------

    def read(self, e2, answers):
        """Each token mixes the answer rows: softmax(K2 Qᵀ/√h) @ A.

        e2: [n, s, h]; answers: [n, q, h] (pooled or leave-one-out, already
        aligned per sentence).
        """
        if e2.shape[-1] != self.h:
            raise ValueError(f"read: token dim {e2.shape[-1]} != question dim {self.h}")
        k2 = T.matmul(e2, self.read_key)
        logits = T.matmul(k2, T.swapaxes(self.questions, -1, -2)) * Tensor(1.0 / np.sqrt(self.h))
        return T.matmul(L.softmax(logits, axis=-1), answers)

    def read_update(self, e2, answers):
        return self.update_gate(e2, self.read(e2, answers))

    # -- generation -------------------------------------------------------------

    def generate_answers(self, doc_vector, noise):
        """G_PNDB: per question row, dense(concat(Q_i, g)) joined with noise,
        then the L-layer dense stack (tanh between layers, none after last)."""
        q = self.n_questions
        if not isinstance(doc_vector, Tensor):
            doc_vector = Tensor(doc_vector)
        if doc_vector.ndim == 1:
            doc_vector = doc_vector.reshape(1, -1)
        g = doc_vector * Tensor(np.ones((q, 1)))
        x = L.dense(concat([self.questions, g], axis=-1), self.gen_in_w, self.gen_in_b)
        x = concat([x, noise if isinstance(noise, Tensor) else Tensor(noise)], axis=-1)
        for j, (w, b) in enumerate(self.gen_layers):
            x = L.dense(x, w, b)
            if j < len(self.gen_layers) - 1:
                x = T.tanh(x)
        return x
