"""Downward path: per level-pair Decompressor + causal Decoder, the token and
vector-sequence reconstruction losses, and the auto-encoder regularizer tying
each compressor/decompressor pair together.

The decompressor sees only the compressed vector: a linear map of it seeds the
LSTM state and the vector itself is fed as the input at every step.  Token
logits are tied to the embedding matrix (plus a trainable output bias); higher
levels score predictions against the batch's own vectors by dot product with
no bias, treating those candidates as constant labels.
"""

from __future__ import annotations

import logging

import numpy as np

from .corpus import PAD_ID
from .numerics import Tensor, concat, layers as L, tensor as T

log = logging.getLogger(__name__)


class DecoderStack:
    """Decompressor + decoder blocks for every (child, parent) level pair."""

    def __init__(self, store, cfg, encoder, rng):
        self.cfg = cfg
        self.encoder = encoder
        self.init_map = {}
        self.decomp = {}
        self.blocks = {}
        self.pos = {}
        for child, parent in cfg.pairs():
            name = child.name
            if child.dim % 2 != 0:
                raise ValueError(f"{name}: dim must be even for the decompressor")
            half = child.dim // 2
            self.init_map[name] = store.param(
                f"dec/{name}/init", L.xavier_uniform((parent.dim, 4 * half), rng))
            self.decomp[name] = L.BiLSTMParams.create(
                store, f"dec/{name}/decomp", parent.dim, half, rng)
            self.pos[name] = store.param(
                f"dec/{name}/pos", L.normal_init((child.cap, child.dim), rng))
            self.blocks[name] = [
                L.DecoderBlockParams.create(store, f"dec/{name}/block{j}", child.dim,
                                            child.n_heads, child.ff_mult, rng)
                for j in range(child.n_layers)
            ]
        self.token_out_bias = store.param(
            "dec/token/out_bias", np.zeros(encoder.vocab_size))

    def decompress(self, child_level, v):
        """[n, parent_dim] -> decoder memory [n, cap_child, child_dim].

        The initial LSTM states come from a linear map of ``v``; ``v`` is also
        repeated as the input at every step.
        """
        steps = self.cfg.level(child_level).cap
        if steps == 0:
            raise ValueError("decompress needs at least one step")
        half = self.cfg.level(child_level).dim // 2
        init = T.matmul(v, self.init_map[child_level])  # [n, 4*half]
        hf, cf = init[..., 0 * half:1 * half], init[..., 1 * half:2 * half]
        hb, cb = init[..., 2 * half:3 * half], init[..., 3 * half:4 * half]
        repeated = v.reshape(v.shape[0], 1, v.shape[1]) * Tensor(np.ones((1, steps, 1)))
        states, _ = L.bilstm(repeated, self.decomp[child_level],
                             init=(hf, cf, hb, cb))
        return states

    def start_vector(self, child_level):
        """Teacher-forcing start-of-sequence vector (the level's pad vector)."""
        return self.encoder.level_vector(child_level, "pad")

    def decode(self, child_level, memory, teacher):
        """Causal decoder over teacher inputs with cross-attention to memory."""
        if teacher.shape[-1] != self.cfg.level(child_level).dim:
            raise ValueError(f"{child_level}: teacher dim {teacher.shape[-1]} != "
                             f"{self.cfg.level(child_level).dim}")
        x = teacher + self.pos[child_level][:teacher.shape[-2]]
        for blk in self.blocks[child_level]:
            x = L.decoder_block(x, blk, memory)
        return x

    def token_logits(self, decoded):
        """Project decoder output to vocabulary logits via the tied embedding."""
        emb_t = T.swapaxes(self.encoder.embedding, -1, -2)
        return T.matmul(decoded, emb_t) + self.token_out_bias

    def shift_right(self, child_level, target_matrix):
        """Teacher inputs: start vector followed by targets[:-1]."""
        n = target_matrix.shape[0]
        start = self.start_vector(child_level).reshape(1, 1, -1) * Tensor(np.ones((n, 1, 1)))
        return concat([start, target_matrix[:, :-1, :]], axis=1)


# -- losses -------------------------------------------------------------------------


def token_reconstruction_loss(logits, targets, real_mask):
    """Mean cross-entropy over non-pad slots; EoS is a regular target."""
    real_mask = np.asarray(real_mask, dtype=bool)
    if not real_mask.any():
        raise ValueError("token reconstruction: all slots are padded")
    lp = L.log_softmax(logits, axis=-1)
    n, s = targets.shape
    rows, cols = np.nonzero(real_mask)
    picked = lp[rows, cols, np.asarray(targets)[rows, cols]]
    return -picked.mean()


def level_reconstruction_loss(predicted, target_idx, candidates, real_mask):
    """Dot-product softmax cross-entropy against in-batch candidate vectors.

    Candidates carry no gradient (labels, detached by the caller); the bias
    is fixed at zero.  Mean over non-pad slots.
    """
    if candidates.shape[0] == 0:
        raise ValueError("level reconstruction: empty candidate set")
    real_mask = np.asarray(real_mask, dtype=bool)
    if not real_mask.any():
        raise ValueError("level reconstruction: all slots are padded")
    logits = T.matmul(predicted, T.swapaxes(candidates, -1, -2))
    lp = L.log_softmax(logits, axis=-1)
    rows, cols = np.nonzero(real_mask)
    picked = lp[rows, cols, np.asarray(target_idx)[rows, cols]]
    return -picked.mean()


def level_targets(batch, parent_level, n_children):
    """Per parent slot: index of the correct child among the flat child
    vectors, with index ``n_children`` standing for the level EoS vector."""
    names = batch.level_names
    child_level = names[names.index(parent_level) - 1]
    cap = batch.caps[child_level]
    starts = batch.child_start[parent_level]
    counts = batch.child_count[parent_level]
    slot = np.arange(cap)[None, :]
    idx = starts[:, None] + slot
    idx = np.where(slot == counts[:, None], n_children, idx)
    idx = np.minimum(idx, n_children)  # pad slots clamped; masked out of the loss
    real = slot <= counts[:, None]
    return idx, real


def ae_regularizer(c_in, d_out, real_mask, eps, level=""):
    """eps * || C/||C|| - D/||D|| || per node, averaged over nodes.

    ``c_in`` is the compressor input (post-encoder contextual matrix) and
    ``d_out`` the decompressor states; both restricted to real slots so pad
    garbage never enters the distance.  Zero-norm nodes are skipped with a
    warning (legal early in training when weights are zero).
    """
    if eps == 0.0:
        return None, 0
    mask = Tensor(np.asarray(real_mask, dtype=np.float64)[..., None])
    u = c_in * mask
    v = d_out * mask
    uu = (u * u).sum(axis=(-1, -2))
    vv = (v * v).sum(axis=(-1, -2))
    valid = (uu.data > 0) & (vv.data > 0)
    n_skipped = int((~valid).sum())
    if n_skipped:
        log.warning("ae_regularizer(%s): skipping %d zero-norm node(s)", level, n_skipped)
    if not valid.any():
        return None, n_skipped
    guard = Tensor((~valid).astype(np.float64))
    nu = T.sqrt(uu + guard).reshape(uu.shape + (1, 1))
    nv = T.sqrt(vv + guard).reshape(vv.shape + (1, 1))
    diff = u / nu - v / nv
    dist_sq = (diff * diff).sum(axis=(-1, -2))
    dist = T.sqrt(dist_sq + Tensor((~valid).astype(np.float64) + 1e-300))
    picked = dist[np.nonzero(valid)[0]]
    return picked.mean() * Tensor(float(eps)), n_skipped
