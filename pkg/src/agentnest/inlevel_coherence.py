"""Generalized masked modeling per level and the coherence task.

Corruption plans are sampled up front (outside the autodiff graph) so a loss
evaluation is a deterministic function of the plan: that is what lets the
finite-difference oracle replay it.  Slot selection follows the 80/10/10
mask/random/keep split; pad and EoS slots are never selected and never join
segment B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import MASK_ID, RESERVED
from .numerics import Tensor, layers as L, tensor as T

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


@dataclass
class CorruptionPlan:
    """Sampled corruption for one level: MLM fields always present, the
    coherence fields populated only by :func:`plan_coherence`."""

    selected: np.ndarray            # bool, slots chosen for masking
    action: np.ndarray              # int, per-slot action where selected
    random_pick: np.ndarray         # int, pool index / token id where action==RANDOM
    # coherence only:
    p_value: np.ndarray | None = None       # per parent
    segments: np.ndarray | None = None      # 0=A, 1=B per slot
    replaced: np.ndarray | None = None      # bool per slot
    true_ratio: np.ndarray | None = None    # per parent, in [0, 1]

    @property
    def n_selected(self):
        return int(self.selected.sum())


def _split_actions(u):
    """Map uniforms to actions with probabilities 0.8 / 0.1 / 0.1."""
    action = np.full(u.shape, ACTION_KEEP, dtype=np.int64)
    action[u < 0.9] = ACTION_RANDOM
    action[u < 0.8] = ACTION_MASK
    return action


def plan_token_mlm(token_ids, content_mask, rate, vocab_size, rng):
    """Choose token slots and actions; random picks are non-reserved ids."""
    if not 0.0 < rate < 1.0:
        raise ValueError("mlm rate must be in (0, 1)")
    selected = content_mask & (rng.random(token_ids.shape) < rate)
    action = _split_actions(rng.random(token_ids.shape))
    action[~selected] = ACTION_KEEP
    n_real_tokens = vocab_size - len(RESERVED)
    if n_real_tokens <= 0 and (selected & (action == ACTION_RANDOM)).any():
        raise ValueError("mlm corruption: vocabulary has no non-reserved tokens to draw")
    random_pick = rng.integers(len(RESERVED), max(vocab_size, len(RESERVED) + 1),
                               size=token_ids.shape)
    return CorruptionPlan(selected=selected, action=action, random_pick=random_pick)


def corrupt_token_ids(token_ids, plan):
    ids = token_ids.copy()
    ids[plan.selected & (plan.action == ACTION_MASK)] = MASK_ID
    rnd = plan.selected & (plan.action == ACTION_RANDOM)
    ids[rnd] = plan.random_pick[rnd]
    return ids


def plan_vector_mlm(n_children, rate, pool_size, rng):
    """Select flat child nodes for masking at a level above tokens."""
    if not 0.0 < rate < 1.0:
        raise ValueError("mlm rate must be in (0, 1)")
    selected = rng.random(n_children) < rate
    action = _split_actions(rng.random(n_children))
    action[~selected] = ACTION_KEEP
    if pool_size < 1 and (selected & (action == ACTION_RANDOM)).any():
        raise ValueError("mlm corruption: empty batch pool for random replacement")
    random_pick = rng.integers(0, max(pool_size, 1), size=n_children)
    return CorruptionPlan(selected=selected, action=action, random_pick=random_pick)


def apply_mlm_corruption(child_vectors, plan, mask_vector, pool):
    """Blend the original vectors with the level mask vector and random
    batch-pool picks according to the plan; "keep" slots stay bit-identical
    because they reuse the very same tensor rows."""
    sel, act = plan.selected, plan.action
    use_mask = (sel & (act == ACTION_MASK)).astype(np.float64)[:, None]
    use_rand = (sel & (act == ACTION_RANDOM)).astype(np.float64)[:, None]
    keep = 1.0 - use_mask - use_rand
    picked = pool[plan.random_pick]
    return (child_vectors * Tensor(keep)
            + mask_vector * Tensor(use_mask)
            + picked * Tensor(use_rand))


# -- MLM heads ----------------------------------------------------------------------


class MlmHeads:
    """Per-level dense+GELU head (not part of the encoder) whose output is
    scored against the embedding matrix (token level, with bias) or the
    batch's own vectors (higher levels, no bias)."""

    def __init__(self, store, cfg, encoder, rng):
        self.encoder = encoder
        self.w = {}
        self.b = {}
        for child in cfg.child_levels():
            d = child.dim
            self.w[child.name] = store.param(f"mlm/{child.name}/w",
                                             L.xavier_uniform((d, d), rng))
            self.b[child.name] = store.param(f"mlm/{child.name}/b", np.zeros(d))
        self.token_bias = store.param("mlm/token/out_bias",
                                      np.zeros(encoder.vocab_size))

    def head(self, level_name, x):
        return L.gelu(L.dense(x, self.w[level_name], self.b[level_name]))

    def token_logits(self, x):
        h = self.head("token", x)
        return T.matmul(h, T.swapaxes(self.encoder.embedding, -1, -2)) + self.token_bias

    def level_logits(self, level_name, x, candidates):
        if candidates.shape[0] == 0:
            raise ValueError("mlm: empty candidate set")
        h = self.head(level_name, x)
        return T.matmul(h, T.swapaxes(candidates, -1, -2))


def mlm_loss(logits, targets):
    """Mean cross-entropy over the masked slots; an empty plan yields
    (0, False) so the caller can drop the term."""
    if logits is None or logits.shape[0] == 0:
        return Tensor(0.0), False
    lp = L.log_softmax(logits, axis=-1)
    picked = lp[np.arange(len(targets)), np.asarray(targets)]
    return -picked.mean(), True


# -- coherence ----------------------------------------------------------------------


def plan_coherence(child_count, cap, pool_size, rng, p_override=None):
    """Sample the coherence corruption for one parent level.

    ``child_count`` gives real children per parent.  P is 0 with probability
    one half, otherwise uniform; each real child joins segment B with
    probability P and each B child is replaced with probability one half.
    ``p_override`` pins P for every parent (used by distribution oracles).
    Returns a plan whose arrays are [n_parents, cap] slot grids.
    """
    child_count = np.asarray(child_count)
    n_parents = len(child_count)
    slot = np.arange(cap)[None, :]
    child_mask = slot < child_count[:, None]

    if p_override is not None:
        p = np.full(n_parents, float(p_override))
    else:
        p = np.where(rng.random(n_parents) < 0.5, 0.0, rng.uniform(0.0, 1.0, n_parents))
    segments = (rng.random((n_parents, cap)) < p[:, None]) & child_mask
    replaced = segments & (rng.random((n_parents, cap)) < 0.5)
    if replaced.any() and pool_size < 1:
        raise ValueError("coherence corruption: empty batch pool for replacement")
    random_pick = rng.integers(0, max(pool_size, 1), size=(n_parents, cap))
    with np.errstate(invalid="ignore"):
        true_ratio = replaced.sum(axis=1) / np.maximum(child_count, 1)
    return CorruptionPlan(
        selected=replaced, action=np.full((n_parents, cap), ACTION_RANDOM),
        random_pick=random_pick, p_value=p,
        segments=segments.astype(np.int64), replaced=replaced,
        true_ratio=true_ratio,
    )


def apply_coherence_replacement(slot_matrix, plan, pool):
    """Swap replaced slots of an assembled [n_parents, cap, dim] matrix for
    uniformly drawn pool vectors."""
    rep = plan.replaced.astype(np.float64)[..., None]
    picked = pool[plan.random_pick]
    return slot_matrix * Tensor(1.0 - rep) + picked * Tensor(rep)


class CoherenceCheckers:
    """Per parent level: head_layers tanh dense layers, then one sigmoid unit
    predicting the fraction of replaced children."""

    def __init__(self, store, cfg, rng):
        self.layers = {}
        self.out = {}
        for _, parent in cfg.pairs():
            d = parent.dim
            stack = []
            for j in range(cfg.head_layers):
                stack.append((store.param(f"cc/{parent.name}/w{j}",
                                          L.xavier_uniform((d, d), rng)),
                              store.param(f"cc/{parent.name}/b{j}", np.zeros(d))))
            self.layers[parent.name] = stack
            self.out[parent.name] = (store.param(f"cc/{parent.name}/out_w",
                                                 L.xavier_uniform((d, 1), rng)),
                                     store.param(f"cc/{parent.name}/out_b", np.zeros(1)))

    def param_names(self, store):
        return [n for n in store.names() if n.startswith("cc/")]

    def predict(self, parent_level, vectors):
        x = vectors
        for w, b in self.layers[parent_level]:
            x = T.tanh(L.dense(x, w, b))
        w, b = self.out[parent_level]
        return T.sigmoid(L.dense(x, w, b)).reshape(vectors.shape[0])


def coherence_loss(predicted, true_ratio):
    """Mean squared error between predicted and actual replacement ratios."""
    diff = predicted - Tensor(np.asarray(true_ratio, dtype=np.float64))
    return (diff * diff).mean()
