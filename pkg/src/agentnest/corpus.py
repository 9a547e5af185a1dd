"""Nested-document corpus handling: parsing, vocabulary, id encoding and
fixed-shape batch assembly.

External formats:
  * corpus file -- UTF-8 JSON, one document per file:
      {"chapters": [{"paragraphs": [{"sentences": ["tok tok ...", ...]}, ...]}, ...]}
    The "chapters" layer may be omitted for depth-3 documents.
  * vocabulary file -- UTF-8 text, one token per line; line number = id - 4
    (ids 0..3 are reserved, in order: PAD, EoS, MASK, UNK).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

RESERVED = ("<PAD>", "<EoS>", "<MASK>", "<UNK>")
PAD_ID, EOS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3

# bottom-up level names keyed by tree depth (edges from document to token)
_LEVELS_BY_DEPTH = {
    3: ("token", "sentence", "paragraph", "document"),
    4: ("token", "sentence", "paragraph", "chapter", "document"),
}
_CONTAINER_KEYS = {"sentence": "sentences", "paragraph": "paragraphs", "chapter": "chapters"}


class ParseError(ValueError):
    """Malformed nested-document input; carries a breadcrumb path."""

    def __init__(self, message, path="document"):
        super().__init__(f"{path}: {message}")
        self.path = path


def tokenize(text):
    """Whitespace tokenizer with lowercasing."""
    return text.lower().split()


@dataclass(frozen=True)
class DocumentTree:
    """Uniform-depth nested document; leaves are token strings.

    ``levels`` is bottom-up (token first, document last); depth equals
    ``len(levels) - 1`` edges, so every leaf sits at the same distance from
    the root.
    """

    levels: tuple
    root: tuple  # nested tuples of tuples; innermost entries are token strings

    @property
    def depth(self):
        return len(self.levels) - 1

    def leaf_tokens(self):
        out = []

        def walk(node, d):
            if d == self.depth - 1:
                out.extend(node)
            else:
                for child in node:
                    walk(child, d + 1)

        walk(self.root, 0)
        return out


def parse_nested(source):
    """Parse a nested document (JSON text or an already-decoded dict).

    Accepts either the depth-3 layout ({"paragraphs": ...}) or the depth-4
    layout ({"chapters": ...}); raises :class:`ParseError` for malformed
    nesting, empty nodes, or unknown keys.
    """
    if isinstance(source, (str, bytes)):
        try:
            obj = json.loads(source)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    else:
        obj = source
    if not isinstance(obj, dict):
        raise ParseError(f"document must be a JSON object, got {type(obj).__name__}")

    if "chapters" in obj:
        levels = _LEVELS_BY_DEPTH[4]
    elif "paragraphs" in obj:
        levels = _LEVELS_BY_DEPTH[3]
    else:
        raise ParseError('expected a "chapters" or "paragraphs" key')

    # walk top-down: document holds chapters? -> paragraphs -> sentences
    def walk(node, level_idx, path):
        level = levels[level_idx]
        key = _CONTAINER_KEYS[level]
        if not isinstance(node, dict):
            raise ParseError(f"expected an object with a {key!r} key, got "
                             f"{type(node).__name__}", path)
        extra = set(node) - {key}
        if key not in node:
            have = ", ".join(sorted(node)) or "nothing"
            raise ParseError(f"non-uniform depth: expected {key!r} here, found {have}", path)
        if extra:
            raise ParseError(f"unexpected keys {sorted(extra)} alongside {key!r}", path)
        children = node[key]
        if not isinstance(children, list) or not children:
            raise ParseError(f"{key!r} must be a non-empty list", path)
        out = []
        for i, child in enumerate(children):
            child_path = f"{path}.{key}[{i}]"
            if level == "sentence":
                if not isinstance(child, str):
                    raise ParseError("sentence must be a string of tokens", child_path)
                toks = tokenize(child)
                if not toks:
                    raise ParseError("empty sentence", child_path)
                out.append(tuple(toks))
            else:
                out.append(walk(child, level_idx - 1, child_path))
        return tuple(out)

    root = walk(obj, len(levels) - 2, "document")
    return DocumentTree(levels=levels, root=root)


def serialize_nested(tree):
    """Inverse of :func:`parse_nested`: DocumentTree -> JSON-ready dict."""

    def build(node, level_idx):
        level = tree.levels[level_idx]
        key = _CONTAINER_KEYS[level]
        if level == "sentence":
            return {key: [" ".join(sent) for sent in node]}
        return {key: [build(child, level_idx - 1) for child in node]}

    return build(tree.root, len(tree.levels) - 2)


# -- vocabulary -----------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    index: dict = field(repr=False)

    @classmethod
    def from_tokens(cls, tokens):
        toks = RESERVED + tuple(t for t in tokens if t not in RESERVED)
        index = {t: i for i, t in enumerate(toks)}
        if len(index) != len(toks):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(tokens=toks, index=index)

    @property
    def size(self):
        return len(self.tokens)

    def id_of(self, token):
        return self.index.get(token, UNK_ID)

    def token_of(self, idx):
        return self.tokens[idx]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_tokens([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(trees, min_freq=1, max_size=None):
    """Frequency vocabulary: keep tokens with count >= min_freq, truncate to
    ``max_size`` by descending frequency with lexicographic tie-break."""
    if not trees:
        raise ValueError("build_vocab requires at least one document")
    if max_size is not None and max_size < len(RESERVED):
        raise ValueError(f"max_size must be >= {len(RESERVED)} to fit reserved tokens")
    counts = Counter()
    for tree in trees:
        counts.update(tree.leaf_tokens())
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size - len(RESERVED)]
    return Vocabulary.from_tokens(kept)


def encode_ids(tree, vocab):
    """Replace leaf tokens by vocabulary ids; structure is preserved and
    unknown tokens map to <UNK> (total function)."""

    def walk(node, d):
        if d == tree.depth - 1:
            return tuple(vocab.id_of(t) for t in node)
        return tuple(walk(child, d + 1) for child in node)

    return walk(tree.root, 0)


# -- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Fixed-shape arrays for one batch of documents.

    Token sequences are truncated to cap-1, EoS-terminated and padded to the
    token cap.  Higher levels store child counts; their EoS/pad slots are
    materialized by the encoder from trainable level vectors.  Children of
    node ``k`` at any level occupy a contiguous index range at the level
    below, recorded in ``child_start``/``child_count``.
    """

    level_names: tuple
    caps: dict
    token_ids: np.ndarray   # [n_sentences, cap_token]
    token_len: np.ndarray   # [n_sentences] real length including EoS
    counts: dict            # level name -> number of nodes
    child_start: dict       # level name (>= paragraph) -> start of child range
    child_count: dict       # level name (>= paragraph) -> real child count
    parent: dict            # level name (< document)   -> parent node index

    @property
    def n_docs(self):
        return self.counts[self.level_names[-1]]

    def token_real_mask(self):
        """True at real token slots (content + EoS)."""
        s_tok = self.caps["token"]
        return np.arange(s_tok)[None, :] < self.token_len[:, None]

    def child_real_mask(self, level):
        """[n_nodes, cap] mask with True at child slots and the EoS slot."""
        cap = self.caps[self.level_names[self.level_names.index(level) - 1]]
        count = self.child_count[level]
        return np.arange(cap)[None, :] <= count[:, None]


def make_batches(id_trees, caps, batch_size, level_names=None):
    """Group encoded documents into batches of at most ``batch_size``.

    ``caps`` maps child-level names to slot counts (content + EoS), e.g.
    {"token": 16, "sentence": 8, "paragraph": 8}.  Over-cap sequences are
    truncated, never rejected.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for name, cap in caps.items():
        if cap < 2:
            raise ValueError(f"cap for {name!r} must be >= 2 (content + EoS), got {cap}")
    level_names = tuple(level_names) if level_names else _LEVELS_BY_DEPTH[3]
    batches = []
    for lo in range(0, len(id_trees), batch_size):
        batches.append(_build_batch(id_trees[lo:lo + batch_size], caps, level_names))
    return batches


def _build_batch(docs, caps, level_names):
    # upper levels listed bottom-up above "sentence": e.g. (paragraph, document)
    upper = level_names[2:]
    nodes = {name: [] for name in level_names[1:]}  # per level: list of child lists
    token_rows, token_lens = [], []

    def walk(node, level_idx):
        """Returns this node's index at its level; children processed first."""
        name = level_names[level_idx]
        if name == "sentence":
            s_tok = caps["token"]
            ids = list(node[:s_tok - 1]) + [EOS_ID]
            token_lens.append(len(ids))
            token_rows.append(ids + [PAD_ID] * (s_tok - len(ids)))
            nodes["sentence"].append(None)
            return len(nodes["sentence"]) - 1
        child_name = level_names[level_idx - 1]
        kept = node[:caps[child_name] - 1]
        child_idx = [walk(c, level_idx - 1) for c in kept]
        nodes[name].append(child_idx)
        return len(nodes[name]) - 1

    for doc in docs:
        walk(doc, len(level_names) - 1)

    counts = {name: len(nodes[name]) for name in level_names[1:]}
    counts["token"] = int(np.sum(token_lens))
    child_start, child_count, parent = {}, {}, {}
    for name in upper:
        starts = np.array([c[0] if c else 0 for c in nodes[name]], dtype=np.int64)
        cnts = np.array([len(c) for c in nodes[name]], dtype=np.int64)
        child_start[name] = starts
        child_count[name] = cnts
        child_level = level_names[level_names.index(name) - 1]
        par = np.zeros(counts[child_level], dtype=np.int64)
        for i, c in enumerate(nodes[name]):
            for j in c:
                par[j] = i
        parent[child_level] = par

    return Batch(
        level_names=level_names,
        caps=dict(caps),
        token_ids=np.array(token_rows, dtype=np.int64),
        token_len=np.array(token_lens, dtype=np.int64),
        counts=counts,
        child_start=child_start,
        child_count=child_count,
        parent=parent,
    )


def load_corpus_dir(path):
    """Read every ``*.json`` document under a directory, sorted by name."""
    import pathlib

    files = sorted(pathlib.Path(path).glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no *.json documents under {path}")
    trees = []
    for f in files:
        try:
            trees.append(parse_nested(f.read_text(encoding="utf-8")))
        except ParseError as e:
            raise ParseError(str(e), path=str(f)) from e
    return trees
