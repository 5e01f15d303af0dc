"""Vocabularies, spans, and binary source trees.

Node indexing convention used throughout the package: for a sentence of
length S, leaves occupy indices 0..S-1 in surface order and the S-1
internal nodes occupy S..2S-2 in post-order.  This gives every tree over
the same sentence length a stable, dense index space, which the rule
tensors rely on for masking.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

UNK_TOKEN = "<unk>"


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Bidirectional token<->id map with unknown-token fallback."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(repr=False)
    unk_id: int = 0

    def __post_init__(self):
        if not (0 <= self.unk_id < len(self.id_to_token)):
            raise VocabularyError("unk_id out of range")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.lookup(t) for t in tokens)

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.id_to_token[i] for i in ids)


def build_vocabulary(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from token sequences.

    Tokens occurring fewer than ``min_count`` times collapse to the unk
    token.  Ids are assigned by descending frequency, ties broken
    lexicographically, so construction is deterministic.
    """
    if min_count < 1:
        raise VocabularyError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n_seqs = 0
    for seq in corpus:
        n_seqs += 1
        counts.update(seq)
    if n_seqs == 0:
        raise VocabularyError("empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count and t != UNK_TOKEN),
        key=lambda t: (-counts[t], t),
    )
    id_to_token = (UNK_TOKEN, *kept)
    return Vocabulary(id_to_token, {t: i for i, t in enumerate(id_to_token)}, unk_id=0)


def vocabulary_from_tokens(tokens: Sequence[str]) -> Vocabulary:
    """Vocabulary over an explicit token universe (closed vocabularies)."""
    seen = []
    dedup = set()
    for t in tokens:
        if t not in dedup and t != UNK_TOKEN:
            dedup.add(t)
            seen.append(t)
    id_to_token = (UNK_TOKEN, *seen)
    return Vocabulary(id_to_token, {t: i for i, t in enumerate(id_to_token)}, unk_id=0)


@dataclass(frozen=True, order=True)
class Span:
    """Half-open token span [start, end)."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid span ({self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def contains(self, other: "Span") -> bool:
        return self.start <= other.start and other.end <= self.end


@dataclass(frozen=True)
class TreeNode:
    span: Span
    left: Optional[int] = None   # child node indices; both None for leaves
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class BinarySourceTree:
    """Binary tree over S tokens with 2S-1 indexed nodes.

    ``labels`` optionally carries per-node grammar symbol ids (used by the
    source parser: preterminal ids on leaves, nonterminal ids on internal
    nodes); the transducer only consumes the structure.
    """

    leaves: tuple[int, ...]
    nodes: tuple[TreeNode, ...]
    root: int
    labels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        s = len(self.leaves)
        if s < 1:
            raise TreeError("empty sentence")
        if len(self.nodes) != 2 * s - 1:
            raise TreeError(f"expected {2 * s - 1} nodes, got {len(self.nodes)}")
        for i in range(s):
            node = self.nodes[i]
            if not (node.is_leaf and node.span.start == i and len(node.span) == 1):
                raise TreeError(f"node {i} is not the leaf over position {i}")
        for i in range(s, 2 * s - 1):
            node = self.nodes[i]
            if node.is_leaf:
                raise TreeError(f"internal node {i} has no children")
            lspan, rspan = self.nodes[node.left].span, self.nodes[node.right].span
            if lspan.end != rspan.start or (lspan.start, rspan.end) != (node.span.start, node.span.end):
                raise TreeError(f"node {i} span is not the union of its children")
        if len(self.nodes[self.root].span) != s:
            raise TreeError("root does not span the sentence")
        if self.labels is not None and len(self.labels) != len(self.nodes):
            raise TreeError("labels length mismatch")

    @property
    def sentence_length(self) -> int:
        return len(self.leaves)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def check_node(self, node: int) -> None:
        if not (0 <= node < len(self.nodes)):
            raise TreeError(f"node index {node} out of range")

    def node_span(self, node: int) -> Span:
        self.check_node(node)
        return self.nodes[node].span

    def structure(self) -> "BinarySourceTree":
        """The same tree with labels dropped."""
        if self.labels is None:
            return self
        return BinarySourceTree(self.leaves, self.nodes, self.root)


def node_yield(tree: BinarySourceTree, node: int) -> tuple[int, ...]:
    """Token ids under ``node``."""
    tree.check_node(node)
    span = tree.nodes[node].span
    return tree.leaves[span.start:span.end]


def is_descendant_or_self(tree: BinarySourceTree, ancestor: int, node: int) -> bool:
    """True iff ``node`` is reachable from ``ancestor`` via child links (or equal)."""
    tree.check_node(ancestor)
    tree.check_node(node)
    # Spans in a single binary tree nest, so reachability is span containment.
    return tree.nodes[ancestor].span.contains(tree.nodes[node].span)


NestedSpans = "int | tuple"


def tree_from_nested(leaves: Sequence[int], nested, labels_by_span: Optional[dict] = None) -> BinarySourceTree:
    """Build a tree from a nested bracketing.

    ``nested`` is either a leaf position (int) or a pair of nested
    bracketings, e.g. ``((0, 1), 2)`` for a left-branching 3-token tree.
    """
    s = len(leaves)
    nodes: list[Optional[TreeNode]] = [TreeNode(Span(i, i + 1)) for i in range(s)]
    order: list[tuple] = []  # (span, left_idx, right_idx) in post-order

    def walk(item) -> tuple[int, Span]:
        if isinstance(item, int):
            return item, Span(item, item + 1)
        left, right = item
        li, lspan = walk(left)
        ri, rspan = walk(right)
        if lspan.end != rspan.start:
            raise TreeError("children are not adjacent")
        span = Span(lspan.start, rspan.end)
        order.append((span, li, ri))
        return s + len(order) - 1, span

    root, root_span = walk(nested)
    if len(root_span) != s:
        raise TreeError("bracketing does not cover the sentence")
    for span, li, ri in order:
        nodes.append(TreeNode(span, li, ri))
    labels = None
    if labels_by_span is not None:
        labels = tuple(labels_by_span[(n.span.start, n.span.end)] for n in nodes)
    return BinarySourceTree(tuple(leaves), tuple(nodes), root, labels)


def single_node_tree(token: int, label: Optional[int] = None) -> BinarySourceTree:
    labels = None if label is None else (label,)
    return BinarySourceTree((token,), (TreeNode(Span(0, 1)),), 0, labels)


def enumerate_bracketings(start: int, end: int):
    """All nested bracketings of [start, end); oracle helper for small spans."""
    if end - start == 1:
        yield start
        return
    for mid in range(start + 1, end):
        for left in enumerate_bracketings(start, mid):
            for right in enumerate_bracketings(mid, end):
                yield (left, right)
