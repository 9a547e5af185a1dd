"""Hierarchical Encoder: embed tokens, contextualize each level with
self-attention blocks, compress child sequences into the next level's vector
and assemble the Document Vector Tree (DVT).

Per child level the machinery is: child matrix (+ trainable EoS/pad slots)
-> + position embedding + segment vector -> encoder blocks with pad-key
masking -> bidirectional-LSTM compressor whose concatenated final states form
the parent vector.  The same encode/compress paths are reused (with
substituted inputs) by the masked-modeling and coherence tasks, which is what
keeps their weights shared with the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import EOS_ID, MASK_ID, PAD_ID
from .numerics import Tensor, layers as L, tensor as T


@dataclass
class DVT:
    """All intermediate tensors from embedding one batch of documents.

    ``vectors[level]``   flat per-node vectors ([n_nodes, dim]).
    ``context[level]``   post-encoder matrices grouped by parent
                         ([n_parents, cap, dim]); this is the compressor input.
    ``real_mask[level]`` True at content + EoS slots of those matrices.
    ``child_index[parent]`` gather matrix used to build the parent's child
                         slots from the flat child vector array.
    """

    batch: object
    token_embedded: Tensor
    vectors: dict
    context: dict
    real_mask: dict
    child_index: dict
    doc_of: dict  # level name -> document index per node


class HierEncoder:
    def __init__(self, store, cfg, vocab_size, rng):
        self.cfg = cfg
        self.store = store
        self.vocab_size = vocab_size
        d_tok = cfg.levels[0].dim
        self.embedding = store.param("embed/tokens",
                                     L.normal_init((vocab_size, d_tok), rng))
        self.pos = {}
        self.seg_a = {}
        self.seg_b = {}
        self.blocks = {}
        self.special = {}  # level name -> dict(pad=, eos=, mask=) for non-token levels
        self.compressor = {}
        for child, parent in cfg.pairs():
            name = child.name
            self.pos[name] = store.param(f"enc/{name}/pos",
                                         L.normal_init((child.cap, child.dim), rng))
            self.seg_a[name] = store.param(f"enc/{name}/seg_a",
                                           L.normal_init((child.dim,), rng))
            self.seg_b[name] = store.param(f"enc/{name}/seg_b",
                                           L.normal_init((child.dim,), rng))
            self.blocks[name] = [
                L.EncoderBlockParams.create(store, f"enc/{name}/block{j}", child.dim,
                                            child.n_heads, child.ff_mult, rng)
                for j in range(child.n_layers)
            ]
            if name != "token":
                self.special[name] = {
                    kind: store.param(f"levelvec/{name}/{kind}",
                                      L.normal_init((child.dim,), rng))
                    for kind in ("pad", "eos", "mask")
                }
            if parent.dim % 2 != 0:
                raise ValueError(f"{parent.name}: dim must be even for the compressor")
            self.compressor[name] = L.BiLSTMParams.create(
                store, f"compress/{name}", child.dim, parent.dim // 2, rng)

    # -- special vectors -----------------------------------------------------------

    def level_vector(self, level_name, kind):
        """Trainable pad/eos/mask vector of a level (token level: embedding rows)."""
        if level_name == "token":
            row = {"pad": PAD_ID, "eos": EOS_ID, "mask": MASK_ID}[kind]
            return self.embedding[row]
        return self.special[level_name][kind]

    # -- stages ----------------------------------------------------------------------

    def embed_tokens(self, ids):
        ids = np.asarray(ids)
        if ids.max(initial=0) >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} outside vocabulary "
                             f"of size {self.vocab_size}")
        return self.embedding[ids]

    def encode_children(self, level_name, child_mat, real_mask, segments=None):
        """Position + segment embedding, then the level's encoder blocks.

        ``segments`` is an int array (0=A, 1=B) per slot; the plain embedding
        path uses a stack of identical A vectors.
        """
        cap = self.cfg.level(level_name).cap
        if child_mat.shape[-2] != cap or child_mat.shape[-1] != self.cfg.level(level_name).dim:
            raise ValueError(f"{level_name}: child matrix {child_mat.shape} does not match "
                             f"cap {cap} x dim {self.cfg.level(level_name).dim}")
        x = child_mat + self.pos[level_name]
        if segments is None:
            segments = np.zeros(child_mat.shape[:-1], dtype=np.int64)
        # gather (not blend) so an all-A row is bit-identical to the plain path
        seg_table = T.stack([self.seg_a[level_name], self.seg_b[level_name]], axis=0)
        x = x + seg_table[np.asarray(segments, dtype=np.int64)]
        for blk in self.blocks[level_name]:
            x = L.encoder_block(x, blk, key_mask=real_mask)
        return x

    def compress(self, level_name, contextual, real_mask):
        """BiLSTM over the real slots; concatenated final states are the
        parent vector (dimension = next level's dim)."""
        _, final = L.bilstm(contextual, self.compressor[level_name],
                            mask=real_mask.astype(np.float64))
        return final

    def assemble_child_matrix(self, parent_level, child_vectors, batch):
        """Scatter flat child vectors into [n_parents, cap, dim] slots, append
        the level EoS vector and fill the rest with the pad vector.

        Returns (matrix, real_mask, gather_index).
        """
        names = batch.level_names
        child_level = names[names.index(parent_level) - 1]
        cap = batch.caps[child_level]
        starts = batch.child_start[parent_level]
        counts = batch.child_count[parent_level]
        n_par = len(counts)

        slot = np.arange(cap)[None, :]
        idx = np.minimum(starts[:, None] + slot, max(0, child_vectors.shape[0] - 1))
        child_m = (slot < counts[:, None]).astype(np.float64)
        eos_m = (slot == counts[:, None]).astype(np.float64)
        pad_m = (slot > counts[:, None]).astype(np.float64)

        gathered = child_vectors[idx]  # [n_par, cap, dim]
        eos = self.level_vector(child_level, "eos")
        pad = self.level_vector(child_level, "pad")
        matrix = (gathered * Tensor(child_m[..., None])
                  + eos * Tensor(eos_m[..., None])
                  + pad * Tensor(pad_m[..., None]))
        real = (child_m + eos_m) > 0
        return matrix, real, idx

    # -- full pass -------------------------------------------------------------------

    def build_dvt(self, batch):
        """Bottom-up embedding of a whole batch; stores contextual matrices
        for loss reuse."""
        names = batch.level_names
        token_emb = self.embed_tokens(batch.token_ids)
        tok_mask = batch.token_real_mask()
        ctx = self.encode_children("token", token_emb, tok_mask)
        vec = self.compress("token", ctx, tok_mask)

        context = {"token": ctx}
        real_mask = {"token": tok_mask}
        vectors = {names[1]: vec}
        child_index = {}

        for parent_level in names[2:]:
            child_level = names[names.index(parent_level) - 1]
            matrix, real, idx = self.assemble_child_matrix(parent_level, vec, batch)
            ctx = self.encode_children(child_level, matrix, real)
            vec = self.compress(child_level, ctx, real)
            context[child_level] = ctx
            real_mask[child_level] = real
            child_index[parent_level] = idx
            vectors[parent_level] = vec

        doc_of = _document_index(batch)
        return DVT(batch=batch, token_embedded=token_emb, vectors=vectors,
                   context=context, real_mask=real_mask, child_index=child_index,
                   doc_of=doc_of)


def _document_index(batch):
    """Per level, the owning document index of every node."""
    names = batch.level_names
    top = names[-1]
    doc_of = {top: np.arange(batch.counts[top], dtype=np.int64)}
    for level in reversed(names[1:-1]):
        parent_level = names[names.index(level) + 1]
        doc_of[level] = doc_of[parent_level][batch.parent[level]]
    return doc_of


# -- inspection / interfaces ----------------------------------------------------------


def dvt_to_records(dvt):
    """Flatten a DVT into JSON-ready records: level, tree path, vector."""
    batch = dvt.batch
    names = batch.level_names
    records = []

    # path of each node, built top-down: document -> ... -> sentence
    paths = {names[-1]: [[d] for d in range(batch.n_docs)]}
    for level in reversed(names[1:-1]):
        parent_level = names[names.index(level) + 1]
        within = np.zeros(batch.counts[level], dtype=np.int64)
        seen = {}
        par = batch.parent[level]
        for i, p in enumerate(par):
            within[i] = seen.get(p, 0)
            seen[p] = within[i] + 1
        paths[level] = [paths[parent_level][p] + [int(w)] for p, w in zip(par, within)]

    for level in names[1:]:
        vecs = dvt.vectors[level].data
        for node, path in enumerate(paths[level]):
            records.append({"level": level, "path": path,
                            "vector": [float(v) for v in vecs[node]]})
    return records


def attention_ops_for_batch(encoder, batch):
    """Attention-score operation count for embedding ``batch``."""
    L.reset_attention_op_count()
    with T.no_grad():
        encoder.build_dvt(batch)
    return L.attention_op_count()


def flat_attention_ops(n_tokens, dim=32, n_layers=2, n_heads=2, seed=0):
    """Control: full self-attention over one flat sequence of ``n_tokens``."""
    from .numerics import ParameterStore

    store = ParameterStore()
    rng = np.random.default_rng(seed)
    blocks = [L.EncoderBlockParams.create(store, f"flat/block{j}", dim, n_heads, 4, rng)
              for j in range(n_layers)]
    x = Tensor(rng.normal(size=(1, n_tokens, dim)))
    L.reset_attention_op_count()
    with T.no_grad():
        for blk in blocks:
            x = L.encoder_block(x, blk)
    return L.attention_op_count()
