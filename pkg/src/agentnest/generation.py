"""Per-level adversarial generation, hierarchical decoding and copyediting.

Generators map Gaussian noise (running statistics of encoder outputs) into a
level's vector space; discriminators never see the raw vector but its
free-running decode into a child-vector matrix, scored by a small CNN.  At
generation time the top vector is expanded top-down, each emitted child ending
its sequence when its nearest special vector is the level EoS; copyediting
then blends every node with its masked-modeling reconstruction and regrows the
levels below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS_ID, PAD_ID
from .numerics import Tensor, concat, layers as L, tensor as T


class NoiseStats:
    """Per-level exponential moving average (decay from config) of the mean
    and per-dimension std of encoder-produced vectors."""

    def __init__(self, store, cfg):
        self.cfg = cfg
        self.store = store
        for lv in cfg.levels:
            store.state_array(f"noise/{lv.name}/mu", (lv.dim,))
            store.state_array(f"noise/{lv.name}/sigma", (lv.dim,))
            store.state_array(f"noise/{lv.name}/warm", ())

    def update(self, level_name, vectors):
        vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, vectors.shape[-1])
        mu_b = vectors.mean(axis=0)
        sigma_b = vectors.std(axis=0)
        mu = self.store.state[f"noise/{level_name}/mu"]
        sigma = self.store.state[f"noise/{level_name}/sigma"]
        warm = self.store.state[f"noise/{level_name}/warm"]
        if warm == 0:
            mu[...] = mu_b
            sigma[...] = sigma_b
            warm[...] = 1.0
        else:
            decay = self.cfg.noise_ema
            mu *= decay
            mu += (1.0 - decay) * mu_b
            sigma *= decay
            sigma += (1.0 - decay) * sigma_b

    def is_warm(self, level_name):
        return bool(self.store.state[f"noise/{level_name}/warm"])

    def sample(self, level_name, rng, n=None):
        """Elementwise Gaussian with the level's running statistics."""
        if not self.is_warm(level_name):
            raise ValueError(f"noise statistics for {level_name!r} never updated")
        mu = self.store.state[f"noise/{level_name}/mu"]
        sigma = np.maximum(self.store.state[f"noise/{level_name}/sigma"],
                           self.cfg.sigma_floor)
        size = (len(mu),) if n is None else (n, len(mu))
        return rng.normal(mu, sigma, size=size)


class Generators:
    """One dense stack per level above tokens: head_layers layers, tanh after
    all but the last."""

    def __init__(self, store, cfg, rng):
        self.layers = {}
        for lv in cfg.levels[1:]:
            stack = []
            for j in range(cfg.head_layers):
                stack.append((store.param(f"gan/gen/{lv.name}/w{j}",
                                          L.xavier_uniform((lv.dim, lv.dim), rng)),
                              store.param(f"gan/gen/{lv.name}/b{j}", np.zeros(lv.dim))))
            self.layers[lv.name] = stack

    @staticmethod
    def param_names(store):
        return [n for n in store.names() if n.startswith("gan/gen/")]

    def generate(self, level_name, noise):
        x = noise if isinstance(noise, Tensor) else Tensor(noise)
        stack = self.layers[level_name]
        for j, (w, b) in enumerate(stack):
            x = L.dense(x, w, b)
            if j < len(stack) - 1:
                x = T.tanh(x)
        return x


class Discriminators:
    """Kim-style CNN over the decoded child-vector sequence: convolutions of
    widths 2/3/4, tanh, max-over-time pooling, dense -> sigmoid."""

    WIDTHS = (2, 3, 4)
    CHANNELS = 8

    def __init__(self, store, cfg, rng):
        self.convs = {}
        self.out = {}
        for lo, hi in cfg.pairs():
            # discriminator for level `hi` consumes decoded `lo` matrices
            name = hi.name
            self.convs[name] = []
            for w in self.WIDTHS:
                self.convs[name].append(
                    (store.param(f"gan/disc/{name}/conv{w}_w",
                                 L.xavier_uniform((w, lo.dim, self.CHANNELS), rng)),
                     store.param(f"gan/disc/{name}/conv{w}_b", np.zeros(self.CHANNELS))))
            n_feat = self.CHANNELS * len(self.WIDTHS)
            self.out[name] = (store.param(f"gan/disc/{name}/out_w",
                                          L.xavier_uniform((n_feat, 1), rng)),
                              store.param(f"gan/disc/{name}/out_b", np.zeros(1)))

    @staticmethod
    def param_names(store):
        return [n for n in store.names() if n.startswith("gan/disc/")]

    def score(self, level_name, child_matrix):
        """Probability that the decoded child matrix came from real data."""
        feats = []
        for w, b in self.convs[level_name]:
            feats.append(T.tanh(L.conv1d(child_matrix, w, b)).max(axis=-2))
        h = concat(feats, axis=-1)
        w, b = self.out[level_name]
        return T.sigmoid(L.dense(h, w, b)).reshape(child_matrix.shape[0])


# -- free-running decode ---------------------------------------------------------------


def free_run_decode(stack, child_level, parent_vectors, memory=None):
    """Autoregressive decode feeding back the decoder's own output vectors.

    Differentiable (no argmax), used for discriminator inputs and for
    expanding generated vectors; runs the full child cap.
    """
    steps = stack.cfg.level(child_level).cap
    if memory is None:
        memory = stack.decompress(child_level, parent_vectors)
    n = memory.shape[0]
    start = stack.start_vector(child_level).reshape(1, 1, -1) * Tensor(np.ones((n, 1, 1)))
    rows = [start]
    outputs = []
    for t in range(steps):
        x = concat(rows, axis=1) if len(rows) > 1 else rows[0]
        out = stack.decode(child_level, memory, x)
        last = out[:, t, :]
        outputs.append(last)
        rows.append(last.reshape(n, 1, -1))
    return T.stack(outputs, axis=1)


def greedy_token_decode(stack, encoder, memory):
    """Greedy text decode of one sentence memory [1, cap, d_tok]: argmax token
    fed back as the next teacher input; stops at EoS.  Returns (ids, logits)."""
    steps = stack.cfg.level("token").cap
    teacher = [PAD_ID]
    ids = []
    logit_rows = []
    for t in range(steps):
        emb = encoder.embed_tokens(np.array([teacher]))
        out = stack.decode("token", memory, emb)
        logits = stack.token_logits(out[:, t, :].reshape(1, 1, -1)).data[0, 0]
        logit_rows.append(logits)
        nid = int(np.argmax(logits))
        if nid == EOS_ID:
            break
        ids.append(nid)
        teacher.append(nid)
    return ids, np.array(logit_rows)


# -- adversarial losses ------------------------------------------------------------------


def bce_real(scores):
    return -T.log(scores).mean()


def bce_fake(scores):
    return -T.log(1.0 - scores).mean()


def non_saturating_generator_loss(scores):
    return -T.log(scores).mean()


def cc_discriminator_score(checkers, level_name, vectors):
    """A trained Coherence Checker viewed as a fixed realness scorer:
    score = 1 - predicted corruption ratio."""
    return 1.0 - checkers.predict(level_name, vectors)


@dataclass
class AdversarialBundle:
    """Everything an adversarial step needs from the trained model."""

    cfg: object
    stack: object            # DecoderStack (frozen wrt GAN updates)
    encoder: object
    generators: Generators
    discriminators: Discriminators
    noise_stats: NoiseStats
    pndb: object = None      # PNDB or None
    real_answers: np.ndarray = None  # pooled A per real document, detached


def _pndb_token_chain(bundle, doc_vectors, answers):
    """Document vector -> first paragraph -> first sentence -> token matrix,
    with the PNDB read applied to the token decoder memory."""
    stack = bundle.stack
    names = bundle.cfg.level_names
    par_matrix = free_run_decode(stack, names[-2], doc_vectors)
    sent_matrix = free_run_decode(stack, names[1], par_matrix[:, 0, :])
    e2 = stack.decompress("token", sent_matrix[:, 0, :])
    e3 = bundle.pndb.read_update(e2, answers)
    return free_run_decode(stack, "token", None, memory=e3), par_matrix


def _frozen(cache, key, builder):
    """Detached samples pinned at the base point when a cache is supplied,
    so the finite-difference oracle sees the constants the analytic gradient
    assumes."""
    if cache is None:
        return builder()
    if key not in cache:
        cache[key] = builder()
    return cache[key]


def adversarial_losses(bundle, level_name, real_vectors, rng, label_cache=None):
    """(d_loss, g_loss) for one level.

    Discriminator: cross-entropy on real=1 / fake=0 over decoded child
    matrices (fake vectors detached).  Generator: non-saturating -ln D(G(z)).
    At the document level with the PNDB enabled, the fake/real transformation
    is extended down to a token matrix read against G_PNDB answers and scored
    by the sentence-level discriminator, which is the path that trains G_PNDB.
    """
    cfg = bundle.cfg
    names = cfg.level_names
    child_level = names[names.index(level_name) - 1]
    n = real_vectors.shape[0]
    if n == 0:
        raise ValueError("adversarial step: empty real batch")

    noise = bundle.noise_stats.sample(level_name, rng, n=n)
    fake = bundle.generators.generate(level_name, Tensor(noise))

    real_t = Tensor(np.asarray(real_vectors))
    with_pndb = (bundle.pndb is not None and level_name == names[-1])

    # discriminator loss (generator path cut)
    fake_det = _frozen(label_cache, "fake", fake.detach)
    d_real = bundle.discriminators.score(
        level_name, free_run_decode(bundle.stack, child_level, real_t))
    d_fake = bundle.discriminators.score(
        level_name, free_run_decode(bundle.stack, child_level, fake_det))
    d_loss = 0.5 * (bce_real(d_real) + bce_fake(d_fake))

    # generator loss
    g_scores = bundle.discriminators.score(
        level_name, free_run_decode(bundle.stack, child_level, fake))
    g_loss = non_saturating_generator_loss(g_scores)

    if with_pndb:
        pndb_noise = Tensor(bundle.noise_stats.sample(
            "token", rng, n=bundle.pndb.n_questions))
        a_rows = [bundle.pndb.generate_answers(fake[i], pndb_noise) for i in range(n)]
        a_gen = T.stack(a_rows, axis=0)
        a_gen_det = _frozen(label_cache, "a_gen", a_gen.detach)
        tok_fake, _ = _pndb_token_chain(bundle, fake, a_gen)
        tok_fake_det, _ = _pndb_token_chain(bundle, fake_det, a_gen_det)
        real_answers = Tensor(np.asarray(bundle.real_answers))
        tok_real, _ = _pndb_token_chain(bundle, real_t, real_answers)
        sent_level = names[1]
        d_loss = d_loss + 0.5 * (bce_real(bundle.discriminators.score(sent_level, tok_real))
                                 + bce_fake(bundle.discriminators.score(sent_level, tok_fake_det)))
        g_loss = g_loss + non_saturating_generator_loss(
            bundle.discriminators.score(sent_level, tok_fake))

    return d_loss, g_loss


def generator_only_loss(bundle, checkers, level_name, rng, n):
    """Generator trained against the level's Coherence Checker as a frozen
    discriminator."""
    noise = bundle.noise_stats.sample(level_name, rng, n=n)
    fake = bundle.generators.generate(level_name, Tensor(noise))
    scores = cc_discriminator_score(checkers, level_name, fake)
    return non_saturating_generator_loss(scores)


# -- hierarchical decoding ------------------------------------------------------------------


@dataclass
class GenNode:
    level: str
    vector: np.ndarray
    children: list = field(default_factory=list)
    token_ids: list = None
    token_logits: np.ndarray = None
    flags: list = field(default_factory=list)


def _nearest_special_is_eos(encoder, level_name, vector):
    """Cosine-nearest among the level's special vectors; True if it is EoS."""
    kinds = ("eos", "pad", "mask")
    sims = []
    v = vector / max(np.linalg.norm(vector), 1e-12)
    for kind in kinds:
        s = encoder.level_vector(level_name, kind).data
        s = s / max(np.linalg.norm(s), 1e-12)
        sims.append(float(v @ s))
    return int(np.argmax(sims)) == 0


def decode_one_level(stack, encoder, level_name, parent_vector):
    """Free-run a parent vector into its child vectors, stopping at the first
    EoS-like child or the cap."""
    with T.no_grad():
        matrix = free_run_decode(stack, level_name,
                                 Tensor(np.asarray(parent_vector)[None, :])).data[0]
    children = []
    for row in matrix:
        if _nearest_special_is_eos(encoder, level_name, row):
            break
        children.append(row.copy())
    return children


def decode_sentence_node(stack, encoder, sentence_vector, pndb=None, answers=None):
    node = GenNode(level="sentence", vector=np.asarray(sentence_vector))
    with T.no_grad():
        memory = stack.decompress("token", Tensor(node.vector[None, :]))
        if pndb is not None and answers is not None:
            memory = pndb.read_update(memory, Tensor(np.asarray(answers)[None]))
        ids, logits = greedy_token_decode(stack, encoder, memory)
    node.token_ids = ids
    node.token_logits = logits
    if not ids:
        node.flags.append("empty-sentence")
    return node


def hierarchical_decode(stack, encoder, top_vector, pndb=None, answers=None):
    """Expand a top-level vector into a full generated tree; leaves carry
    token logits.  Deterministic for a fixed vector (greedy everywhere)."""
    names = stack.cfg.level_names
    top = GenNode(level=names[-1], vector=np.asarray(top_vector))

    def expand(node):
        level_idx = names.index(node.level)
        child_level = names[level_idx - 1]
        if child_level == "sentence":
            for vec in decode_one_level(stack, encoder, child_level, node.vector):
                node.children.append(
                    decode_sentence_node(stack, encoder, vec, pndb, answers))
            return
        for vec in decode_one_level(stack, encoder, child_level, node.vector):
            child = GenNode(level=child_level, vector=vec)
            node.children.append(child)
            expand(child)

    expand(top)
    return top


def tree_nodes_at(tree, level_name):
    out = []

    def walk(node):
        if node.level == level_name:
            out.append(node)
        for c in node.children:
            walk(c)

    walk(tree)
    return out


def copyedit_pass(stack, encoder, heads, tree, eps, iterations, pndb=None, answers=None):
    """Iterative refinement: every node is blended with its masked-modeling
    reconstruction, levels traversed top-down, children regrown from updated
    nodes.  eps=0 is a bit-exact identity (nothing is touched)."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("edit blend factor must lie in [0, 1]")
    if eps == 0.0 or iterations == 0:
        return tree
    names = stack.cfg.level_names
    edit_levels = list(reversed(names[1:-1]))  # top-down, skipping top and token
    for _ in range(iterations):
        for level in edit_levels:
            _copyedit_level(stack, encoder, heads, tree, level, eps)
            _regrow_below(stack, encoder, tree, level, pndb, answers)
    return tree


def mlm_reconstruction_vectors(encoder, heads, level, parents, candidates):
    """N_MLM per node: the node's slot replaced by the level mask vector, the
    context re-encoded, and the MLM softmax used as weights over candidate
    vectors (an expectation, since copyediting needs a vector, not a class)."""
    cap = encoder.cfg.level(level).cap
    dim = encoder.cfg.level(level).dim
    eos = encoder.level_vector(level, "eos").data
    pad = encoder.level_vector(level, "pad").data
    mask_vec = encoder.level_vector(level, "mask").data
    rows = []
    masks = []
    slots = []
    for parent in parents:
        child_vecs = [c.vector for c in parent.children]
        k = min(len(child_vecs), cap - 1)
        base = np.stack([*child_vecs[:k], eos] + [pad] * (cap - k - 1))
        real = np.zeros(cap, bool)
        real[:k + 1] = True
        for j in range(k):
            m = base.copy()
            m[j] = mask_vec
            rows.append(m)
            masks.append(real)
            slots.append(j)
    if not rows:
        return {}
    batch_mat = Tensor(np.stack(rows))
    with T.no_grad():
        ctx = encoder.encode_children(level, batch_mat, np.stack(masks))
        picked = ctx.data[np.arange(len(slots)), np.asarray(slots)]
        logits = heads.level_logits(level, Tensor(picked), Tensor(candidates))
        weights = L.softmax(logits, axis=-1).data
    return weights @ candidates


def _copyedit_level(stack, encoder, heads, tree, level, eps):
    names = stack.cfg.level_names
    parent_level = names[names.index(level) + 1]
    parents = [p for p in tree_nodes_at(tree, parent_level) if p.children]
    nodes = [c for p in parents for c in p.children[:encoder.cfg.level(level).cap - 1]]
    if not nodes:
        return
    candidates = np.stack([n.vector for n in nodes])
    recon = mlm_reconstruction_vectors(encoder, heads, level, parents, candidates)
    # simultaneous update of every node at this level
    for node, n_mlm in zip(nodes, recon):
        node.vector = eps * n_mlm + (1.0 - eps) * node.vector


def _regrow_below(stack, encoder, tree, level, pndb, answers):
    names = stack.cfg.level_names
    child_level = names[names.index(level) - 1]
    for node in tree_nodes_at(tree, level):
        node.children = []
        if child_level == "sentence":
            for vec in decode_one_level(stack, encoder, "sentence", node.vector):
                node.children.append(
                    decode_sentence_node(stack, encoder, vec, pndb, answers))
        elif child_level == "token":
            refreshed = decode_sentence_node(stack, encoder, node.vector, pndb, answers)
            node.token_ids = refreshed.token_ids
            node.token_logits = refreshed.token_logits
            node.flags = refreshed.flags
        else:
            for vec in decode_one_level(stack, encoder, child_level, node.vector):
                child = GenNode(level=child_level, vector=vec)
                node.children.append(child)
                _regrow_below(stack, encoder, child, child_level, pndb, answers)


def emit_text(tree, vocab):
    """Generated tree -> corpus-format dict (re-parses under parse_nested).

    Empty sentences/paragraphs are flagged and dropped; a fully empty document
    falls back to a single unknown-token sentence so the output still parses.
    """
    flags = []

    def sentence_text(node):
        if not node.token_ids:
            flags.append("empty-sentence")
            return None
        return " ".join(vocab.token_of(i) for i in node.token_ids)

    def build(node):
        if node.level == "sentence":
            return sentence_text(node)
        parts = []
        for c in node.children:
            built = build(c)
            if built:
                parts.append(built)
        if not parts:
            flags.append(f"empty-{node.level}")
            return None
        if node.children and node.children[0].level == "sentence":
            return {"sentences": parts}
        key = "paragraphs" if node.children and node.children[0].level == "paragraph" \
            else "chapters"
        return {key: parts}

    doc = build(tree)
    if doc is None or not isinstance(doc, dict):
        if "empty-document" not in flags:
            flags.append("empty-document")
        doc = {"paragraphs": [{"sentences": [vocab.token_of(3)]}]}
    return doc, flags
