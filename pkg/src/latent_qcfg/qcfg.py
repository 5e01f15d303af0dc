"""Neural grammar over target strings conditioned on a source tree.

Every target symbol is paired with one source tree node.  Rule scores
come from symbol-plus-node embeddings pushed through residual
feedforward networks; alignment constraints are realized as boolean
masks over the rule tensors.  The binary rule score factors as
f1(parent) . (f2(left) + f3(right)), so the third-order tensor is kept
factored as two matrices plus per-parent normalizers; the inside pass
and the sampler exploit this, and ``binary_full`` materializes the
dense tensor for small instances.

Copy symbols (one optional nonterminal, one optional preterminal) carry
indicator semantics: their chart entries are 1 exactly when the target
span equals the aligned node's yield, and they are excluded from the
softmax groups of ordinary rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import BinarySourceTree, is_descendant_or_self, node_yield
from .nets import ResidualFeedforward
from .numerics import DTYPE, NEG_BIG, NEG_INF, NEG_THRESHOLD, is_log_zero, log_sum_exp, masked_log_softmax


class QcfgError(ValueError):
    pass


class ConstraintError(QcfgError):
    pass


class SamplingError(RuntimeError):
    pass


NT_ALIGN_ANY = "any"
NT_ALIGN_INTERNAL = "internal"
PT_ALIGN_ANY = "any"
PT_ALIGN_LEAF = "leaf"
BIN_UNCONSTRAINED = "unconstrained"
BIN_DESCENDANT = "descendant-or-self"
BIN_STRICT_CHILDREN = "distinct-children-or-self-leaf"


@dataclass(frozen=True)
class ConstraintConfig:
    start_must_be_root: bool = False
    nonterminal_alignment: str = NT_ALIGN_ANY
    preterminal_alignment: str = PT_ALIGN_ANY
    binary_alignment: str = BIN_UNCONSTRAINED
    copy_nonterminal: Optional[int] = None
    copy_preterminal: Optional[int] = None

    def __post_init__(self):
        if self.nonterminal_alignment not in (NT_ALIGN_ANY, NT_ALIGN_INTERNAL):
            raise ConstraintError(f"bad nonterminal_alignment {self.nonterminal_alignment!r}")
        if self.preterminal_alignment not in (PT_ALIGN_ANY, PT_ALIGN_LEAF):
            raise ConstraintError(f"bad preterminal_alignment {self.preterminal_alignment!r}")
        if self.binary_alignment not in (BIN_UNCONSTRAINED, BIN_DESCENDANT, BIN_STRICT_CHILDREN):
            raise ConstraintError(f"bad binary_alignment {self.binary_alignment!r}")


def scan_constraints(copy_nonterminal=None, copy_preterminal=None) -> ConstraintConfig:
    """Root-only start, internal-node nonterminals, leaf preterminals,
    children aligned to descendants-or-self."""
    return ConstraintConfig(
        start_must_be_root=True,
        nonterminal_alignment=NT_ALIGN_INTERNAL,
        preterminal_alignment=PT_ALIGN_LEAF,
        binary_alignment=BIN_DESCENDANT,
        copy_nonterminal=copy_nonterminal,
        copy_preterminal=copy_preterminal,
    )


def mt_constraints(copy_nonterminal=None, copy_preterminal=None) -> ConstraintConfig:
    """Root-only start; children aligned to the parent's two distinct
    children, or self-inherited at leaf parents."""
    return ConstraintConfig(
        start_must_be_root=True,
        binary_alignment=BIN_STRICT_CHILDREN,
        copy_nonterminal=copy_nonterminal,
        copy_preterminal=copy_preterminal,
    )


@dataclass
class QcfgRuleTensors:
    """Masked rule log-probabilities for one (tree, parameter) instance."""

    tree: BinarySourceTree
    num_nt: int
    num_pt: int
    constraints: ConstraintConfig
    start: torch.Tensor            # (num_nt, n) log-probs, -inf masked
    start_mask: torch.Tensor       # bool (num_nt, n)
    score_left: torch.Tensor       # (pdim, cdim) factored binary scores
    score_right: torch.Tensor      # (pdim, cdim)
    group_masks: list[tuple[torch.Tensor, torch.Tensor]]  # [(maskB, maskC)] bool (pdim, cdim)
    log_z: torch.Tensor            # (pdim,) binary normalizers, -inf on invalid parents
    parent_mask: torch.Tensor      # bool (pdim,)
    emission: torch.Tensor         # (num_pt, n, V) log-probs over the target vocabulary
    pt_mask: torch.Tensor          # bool (num_pt, n) alignment-valid emitters
    node_yields: tuple[Optional[tuple[int, ...]], ...]  # target-id yield per node

    @property
    def num_nodes(self) -> int:
        return self.tree.num_nodes

    @property
    def num_m(self) -> int:
        return self.num_nt + self.num_pt

    @property
    def cdim(self) -> int:
        return self.num_m * self.num_nodes

    @property
    def pdim(self) -> int:
        return self.num_nt * self.num_nodes

    def child_index(self, m_sym: int, node: int) -> int:
        return m_sym * self.num_nodes + node

    def parent_index(self, nt: int, node: int) -> int:
        return nt * self.num_nodes + node

    def is_copy_child(self, m_sym: int) -> bool:
        c = self.constraints
        if m_sym < self.num_nt:
            return c.copy_nonterminal is not None and m_sym == c.copy_nonterminal
        return c.copy_preterminal is not None and m_sym - self.num_nt == c.copy_preterminal

    def pair_mask(self, parent: int) -> torch.Tensor:
        """bool (cdim, cdim) of allowed child pairs for one parent index."""
        out = torch.zeros(self.cdim, self.cdim, dtype=torch.bool)
        if not bool(self.parent_mask[parent]):
            return out
        for mask_b, mask_c in self.group_masks:
            out |= mask_b[parent][:, None] & mask_c[parent][None, :]
        return out

    def binary_logprob(self, parent: int, b: int, c: int) -> float:
        if not bool(self.parent_mask[parent]):
            return NEG_INF
        ok = any(bool(mb[parent, b]) and bool(mc[parent, c]) for mb, mc in self.group_masks)
        if not ok:
            return NEG_INF
        return float((self.score_left[parent, b] + self.score_right[parent, c] - self.log_z[parent]).detach())

    def binary_full(self) -> torch.Tensor:
        """Dense (pdim, cdim, cdim) log-prob tensor; small instances only."""
        dense = self.score_left[:, :, None] + self.score_right[:, None, :] - self.log_z[:, None, None]
        allowed = torch.zeros(self.pdim, self.cdim, self.cdim, dtype=torch.bool)
        for mask_b, mask_c in self.group_masks:
            allowed |= mask_b[:, :, None] & mask_c[:, None, :]
        allowed &= self.parent_mask[:, None, None]
        return dense.masked_fill(~allowed, NEG_INF)


class NeuralQcfg(nn.Module):
    """Symbol embeddings and scoring networks for the target-side grammar."""

    def __init__(self, vocab_size: int, dim: int, num_nt: int = 10, num_pt: int = 1):
        super().__init__()
        if min(vocab_size, dim, num_nt, num_pt) < 1:
            raise QcfgError("vocab_size, dim and symbol counts must be positive")
        self.vocab_size = vocab_size
        self.dim = dim
        self.num_nt = num_nt
        self.num_pt = num_pt
        self.nt_emb = nn.Parameter(torch.empty(num_nt, dim))
        self.pt_emb = nn.Parameter(torch.empty(num_pt, dim))
        self.start_emb = nn.Parameter(torch.empty(1, dim))
        self.term_emb = nn.Parameter(torch.empty(vocab_size, dim))
        self.term_bias = nn.Parameter(torch.zeros(vocab_size))
        for emb in (self.nt_emb, self.pt_emb, self.start_emb, self.term_emb):
            nn.init.xavier_uniform_(emb)
        self.f_parent = ResidualFeedforward(dim)   # f1
        self.f_left = ResidualFeedforward(dim)     # f2
        self.f_right = ResidualFeedforward(dim)    # f3
        self.f_emit = ResidualFeedforward(dim)     # f4
        self.to(DTYPE)

    def symbol_node_embedding(self, embeddings: torch.Tensor, node_reps: torch.Tensor) -> torch.Tensor:
        """e[sym, node] = u_sym + h_node; (syms, n, d)."""
        return embeddings[:, None, :] + node_reps[None, :, :]

    def _check_copy_ids(self, constraints: ConstraintConfig) -> None:
        c = constraints
        if c.copy_nonterminal is not None and not 0 <= c.copy_nonterminal < self.num_nt:
            raise ConstraintError(f"copy nonterminal id {c.copy_nonterminal} out of range")
        if c.copy_preterminal is not None and not 0 <= c.copy_preterminal < self.num_pt:
            raise ConstraintError(f"copy preterminal id {c.copy_preterminal} out of range")

    def build_rule_tensors(
        self,
        tree: BinarySourceTree,
        node_reps: torch.Tensor,
        constraints: ConstraintConfig,
        copy_yields: Optional[Sequence[Optional[tuple[int, ...]]]] = None,
    ) -> QcfgRuleTensors:
        self._check_copy_ids(constraints)
        n = tree.num_nodes
        if node_reps.shape[0] != n:
            raise QcfgError("node representations do not cover the tree")
        num_nt, num_pt, num_m = self.num_nt, self.num_pt, self.num_nt + self.num_pt
        c = constraints

        if copy_yields is None:
            copy_yields = [node_yield(tree, i) for i in range(n)]
        node_yields = tuple(None if y is None else tuple(y) for y in copy_yields)
        if len(node_yields) != n:
            raise QcfgError("copy_yields length mismatch")

        internal = torch.tensor([not tree.nodes[i].is_leaf for i in range(n)])
        leaf = ~internal
        nt_node_ok = internal if c.nonterminal_alignment == NT_ALIGN_INTERNAL else torch.ones(n, dtype=torch.bool)
        pt_node_ok = leaf if c.preterminal_alignment == PT_ALIGN_LEAF else torch.ones(n, dtype=torch.bool)
        yield_known = torch.tensor([y is not None for y in node_yields])

        e_nt = self.symbol_node_embedding(self.nt_emb, node_reps)   # (nt, n, d)
        e_pt = self.symbol_node_embedding(self.pt_emb, node_reps)   # (pt, n, d)
        e_m = torch.cat([e_nt, e_pt], dim=0)                        # (m, n, d)

        # Start rules S -> A[node].
        start_logits = (e_nt * self.start_emb.squeeze(0)).sum(-1)
        start_mask = nt_node_ok[None, :].expand(num_nt, n).clone()
        if c.start_must_be_root:
            root_only = torch.zeros(n, dtype=torch.bool)
            root_only[tree.root] = True
            start_mask &= root_only[None, :]
        if c.copy_nonterminal is not None:
            start_mask[c.copy_nonterminal] &= yield_known
        if not start_mask.any():
            raise ConstraintError("no valid start rule under the active constraints")
        start = masked_log_softmax(start_logits, start_mask, dims=(0, 1))

        # Child validity per (m-symbol, node), flattened sym-major.
        child_ok = torch.zeros(num_m, n, dtype=torch.bool)
        child_ok[:num_nt] = nt_node_ok[None, :]
        child_ok[num_nt:] = pt_node_ok[None, :]
        if c.copy_nonterminal is not None:
            child_ok[c.copy_nonterminal] &= yield_known
        if c.copy_preterminal is not None:
            # A copy preterminal emits a single token, so it only pairs with
            # nodes whose yield has length one.
            one_token = torch.tensor([y is not None and len(y) == 1 for y in node_yields])
            child_ok[num_nt + c.copy_preterminal] &= one_token
        child_ok_flat = child_ok.reshape(-1)  # (cdim,)

        # Binary rules, factored: score[p, b, c] = sl[p, b] + sr[p, c].
        parent_vec = self.f_parent(e_nt).reshape(num_nt * n, self.dim)
        left_vec = self.f_left(e_m).reshape(num_m * n, self.dim)
        right_vec = self.f_right(e_m).reshape(num_m * n, self.dim)
        score_left = parent_vec @ left_vec.T    # (pdim, cdim)
        score_right = parent_vec @ right_vec.T

        parent_mask = nt_node_ok[None, :].expand(num_nt, n).clone()
        if c.copy_nonterminal is not None:
            parent_mask[c.copy_nonterminal] = False
        parent_mask = parent_mask.reshape(-1)

        pdim, cdim = num_nt * n, num_m * n
        node_of_child = torch.arange(cdim) % n
        node_of_parent = torch.arange(pdim) % n

        def relation_mask(allowed_child_nodes: torch.Tensor) -> torch.Tensor:
            # allowed_child_nodes: bool (pdim, n) -> bool (pdim, cdim)
            per_child = allowed_child_nodes[:, node_of_child]
            return per_child & child_ok_flat[None, :] & parent_mask[:, None]

        group_masks: list[tuple[torch.Tensor, torch.Tensor]] = []
        if c.binary_alignment in (BIN_UNCONSTRAINED, BIN_DESCENDANT):
            if c.binary_alignment == BIN_UNCONSTRAINED:
                rel = torch.ones(pdim, n, dtype=torch.bool)
            else:
                desc = torch.tensor(
                    [[is_descendant_or_self(tree, a, b) for b in range(n)] for a in range(n)]
                )
                rel = desc[node_of_parent]
            mask = relation_mask(rel)
            group_masks.append((mask, mask))
        else:  # BIN_STRICT_CHILDREN
            left_child = torch.zeros(pdim, n, dtype=torch.bool)
            right_child = torch.zeros(pdim, n, dtype=torch.bool)
            self_leaf = torch.zeros(pdim, n, dtype=torch.bool)
            for node_idx in range(n):
                tn = tree.nodes[node_idx]
                rows = node_of_parent == node_idx
                if tn.is_leaf:
                    self_leaf[rows, node_idx] = True
                else:
                    left_child[rows, tn.left] = True
                    right_child[rows, tn.right] = True
            # Group 1: (left, right) ordered pairs, plus leaf self-inheritance.
            # Group 2: the swapped (right, left) pairs.  Disjoint by construction.
            group_masks.append((relation_mask(left_child | self_leaf), relation_mask(right_child | self_leaf)))
            group_masks.append((relation_mask(right_child), relation_mask(left_child)))

        group_terms = []
        for mask_b, mask_c in group_masks:
            lb = torch.logsumexp(score_left.masked_fill(~mask_b, NEG_BIG), dim=1)
            rb = torch.logsumexp(score_right.masked_fill(~mask_c, NEG_BIG), dim=1)
            group_terms.append(lb + rb)
        log_z = torch.logsumexp(torch.stack(group_terms), dim=0)
        bad = parent_mask & (log_z.detach() <= NEG_THRESHOLD)
        if bad.any():
            p = int(bad.nonzero()[0])
            raise ConstraintError(
                f"parent N{p // n}[{p % n}] has no unmasked child pair under the active constraints"
            )
        log_z = log_z.masked_fill(~parent_mask, NEG_BIG)

        # Emission rules D[node] -> w, softmax over the target vocabulary.
        emit_logits = self.f_emit(e_pt) @ self.term_emb.T + self.term_bias
        emission = torch.log_softmax(emit_logits, dim=-1)
        pt_mask = pt_node_ok[None, :].expand(num_pt, n).clone()
        if c.copy_preterminal is not None:
            pt_mask[c.copy_preterminal] = False  # indicator rows, not softmax rows

        return QcfgRuleTensors(
            tree=tree,
            num_nt=num_nt,
            num_pt=num_pt,
            constraints=c,
            start=start,
            start_mask=start_mask,
            score_left=score_left,
            score_right=score_right,
            group_masks=group_masks,
            log_z=log_z,
            parent_mask=parent_mask,
            emission=emission,
            pt_mask=pt_mask,
            node_yields=node_yields,
        )


def _copy_indicator_entries(tensors: QcfgRuleTensors, span_tokens: tuple[int, ...]) -> list[int]:
    """Child-space indices whose copy indicator fires for this span."""
    hits = []
    c = tensors.constraints
    n = tensors.num_nodes
    for node, y in enumerate(tensors.node_yields):
        if y is None or y != span_tokens:
            continue
        if c.copy_nonterminal is not None:
            hits.append(tensors.child_index(c.copy_nonterminal, node))
        if c.copy_preterminal is not None and len(y) == 1:
            hits.append(tensors.child_index(tensors.num_nt + c.copy_preterminal, node))
    return hits


@dataclass
class QcfgChart:
    length: int
    entries: dict[tuple[int, int], torch.Tensor]  # (cdim,) per span
    log_marginal: torch.Tensor

    def entry(self, start: int, end: int) -> torch.Tensor:
        return self.entries[(start, end)]


def qcfg_inside(y: Sequence[int], tensors: QcfgRuleTensors) -> QcfgChart:
    """Inside chart over (span, symbol-node) and log p(y | source tree).

    The grammar assigns zero probability to length-one strings, so T >= 2
    is required; singleton replication upstream is the caller's job.
    """
    t_len = len(y)
    if t_len < 2:
        raise QcfgError("target length must be >= 2")
    y = tuple(y)
    n, num_nt, num_pt = tensors.num_nodes, tensors.num_nt, tensors.num_pt
    cdim, pdim = tensors.cdim, tensors.pdim

    masked_left = [tensors.score_left.masked_fill(~mb, NEG_BIG) for mb, _ in tensors.group_masks]
    masked_right = [tensors.score_right.masked_fill(~mc, NEG_BIG) for _, mc in tensors.group_masks]
    log_z = tensors.log_z

    def with_copy_hits(vec: torch.Tensor, span_tokens: tuple[int, ...]) -> torch.Tensor:
        hits = _copy_indicator_entries(tensors, span_tokens)
        if not hits:
            return vec
        return vec.index_fill(0, torch.tensor(hits), 0.0)

    entries: dict[tuple[int, int], torch.Tensor] = {}
    for s in range(t_len):
        emit = tensors.emission[:, :, y[s]].masked_fill(~tensors.pt_mask, NEG_BIG)
        vec = torch.cat([torch.full((num_nt * n,), NEG_BIG, dtype=DTYPE), emit.reshape(-1)])
        entries[(s, s + 1)] = with_copy_hits(vec, (y[s],))

    for width in range(2, t_len + 1):
        spans = [(s, s + width) for s in range(t_len - width + 1)]
        left = torch.stack([torch.stack([entries[(s, m)] for m in range(s + 1, e)]) for s, e in spans])
        right = torch.stack([torch.stack([entries[(m, e)] for m in range(s + 1, e)]) for s, e in spans])
        # (spans, splits, pdim) per factor group, then combine.
        group_scores = []
        for ml, mr in zip(masked_left, masked_right):
            lb = torch.logsumexp(left[:, :, None, :] + ml[None, None, :, :], dim=-1)
            rb = torch.logsumexp(right[:, :, None, :] + mr[None, None, :, :], dim=-1)
            group_scores.append(torch.logsumexp(lb + rb, dim=1))  # over splits
        nt_scores = torch.logsumexp(torch.stack(group_scores), dim=0) - log_z[None, :]
        nt_scores = nt_scores.masked_fill(~tensors.parent_mask[None, :], NEG_BIG)
        pt_pad = torch.full((num_pt * n,), NEG_BIG, dtype=DTYPE)
        for (s, e), row in zip(spans, nt_scores):
            entries[(s, e)] = with_copy_hits(torch.cat([row, pt_pad]), y[s:e])

    start_flat = tensors.start.reshape(-1).clamp_min(NEG_BIG)
    log_marginal = log_sum_exp(start_flat + entries[(0, t_len)][:pdim])
    return QcfgChart(t_len, entries, log_marginal)


def yield_perplexity(y: Sequence[int], tensors: QcfgRuleTensors) -> float:
    """exp(-log p(y|s) / |y|); +inf for unparseable strings."""
    if len(y) < 2:
        raise QcfgError("target length must be >= 2")
    logp = qcfg_inside(y, tensors).log_marginal.item()
    if is_log_zero(logp):
        return float("inf")
    return float(np.exp(-logp / len(y)))


@dataclass(frozen=True)
class DerivationNode:
    """One node of a target derivation.

    Exactly one of ``children`` (binary expansion) or ``tokens``
    (emission or copy yield) is set.
    """

    symbol: int                 # nonterminal id, or preterminal id if is_preterminal
    node: int                   # aligned source node index
    is_preterminal: bool
    children: Optional[tuple["DerivationNode", "DerivationNode"]] = None
    tokens: Optional[tuple[int, ...]] = None
    is_copy: bool = False

    def __post_init__(self):
        if (self.children is None) == (self.tokens is None):
            raise QcfgError("derivation node needs children xor tokens")

    def target_yield(self) -> tuple[int, ...]:
        if self.tokens is not None:
            return self.tokens
        return self.children[0].target_yield() + self.children[1].target_yield()


@dataclass(frozen=True)
class Derivation:
    root: DerivationNode
    target: tuple[int, ...] = field(default=())

    @staticmethod
    def from_root(root: DerivationNode) -> "Derivation":
        return Derivation(root, root.target_yield())


def derivation_logprob(derivation: Derivation, tensors: QcfgRuleTensors) -> float:
    """Sum of log rule probabilities; -inf if any rule is masked."""
    n, num_nt = tensors.num_nodes, tensors.num_nt
    root = derivation.root
    if root.is_preterminal:
        return NEG_INF  # start rules only target nonterminals
    if not bool(tensors.start_mask[root.symbol, root.node]):
        return NEG_INF
    total = float(tensors.start[root.symbol, root.node].detach())

    def walk(dn: DerivationNode) -> float:
        c = tensors.constraints
        if dn.is_copy:
            expected = tensors.node_yields[dn.node]
            if expected is None or dn.tokens != expected:
                return NEG_INF
            if dn.is_preterminal and len(dn.tokens) != 1:
                return NEG_INF
            return 0.0  # indicator factor
        if dn.is_preterminal:
            if not bool(tensors.pt_mask[dn.symbol, dn.node]) or len(dn.tokens) != 1:
                return NEG_INF
            return float(tensors.emission[dn.symbol, dn.node, dn.tokens[0]].detach())
        p = tensors.parent_index(dn.symbol, dn.node)
        lc, rc = dn.children
        b = tensors.child_index(lc.symbol if not lc.is_preterminal else num_nt + lc.symbol, lc.node)
        cidx = tensors.child_index(rc.symbol if not rc.is_preterminal else num_nt + rc.symbol, rc.node)
        lp = tensors.binary_logprob(p, b, cidx)
        if lp == NEG_INF:
            return NEG_INF
        return lp + walk(lc) + walk(rc)

    sub = walk(root)
    if sub == NEG_INF:
        return NEG_INF
    return total + sub


def derivation_is_valid(derivation: Derivation, tensors: QcfgRuleTensors) -> bool:
    return derivation_logprob(derivation, tensors) > NEG_INF


@dataclass(frozen=True)
class SamplingLimits:
    max_length: int = 64
    max_depth: int = 32
    max_attempts: int = 32


class _Budget:
    def __init__(self, limits: SamplingLimits):
        self.limits = limits
        self.emitted = 0

    def charge(self, count: int) -> None:
        self.emitted += count
        if self.emitted > self.limits.max_length:
            raise _OverBudget


class _OverBudget(Exception):
    pass


class DerivationSampler:
    """Ancestral top-down sampler over one rule-tensor instance.

    Caches per-parent child-pair distributions; rejection handles
    runaway recursion up to ``max_attempts``.
    """

    def __init__(self, tensors: QcfgRuleTensors, limits: SamplingLimits = SamplingLimits()):
        self.tensors = tensors
        self.limits = limits
        start_w = tensors.start.detach().numpy().reshape(-1)
        self._start_probs = _normalized_probs(start_w)
        self._pair_probs: dict[int, np.ndarray] = {}
        self._emit_probs: dict[tuple[int, int], np.ndarray] = {}

    def _pairs(self, parent: int) -> np.ndarray:
        probs = self._pair_probs.get(parent)
        if probs is None:
            t = self.tensors
            w = (t.score_left[parent][:, None] + t.score_right[parent][None, :] - t.log_z[parent]).detach().numpy()
            w = np.where(t.pair_mask(parent).numpy(), w, NEG_INF)
            probs = _normalized_probs(w.reshape(-1))
            self._pair_probs[parent] = probs
        return probs

    def _emit(self, pt: int, node: int) -> np.ndarray:
        key = (pt, node)
        probs = self._emit_probs.get(key)
        if probs is None:
            probs = _normalized_probs(self.tensors.emission[pt, node].detach().numpy())
            self._emit_probs[key] = probs
        return probs

    def sample(self, rng: np.random.Generator) -> Derivation:
        for _ in range(self.limits.max_attempts):
            try:
                return self._sample_once(rng)
            except _OverBudget:
                continue
        raise SamplingError(f"no derivation within limits after {self.limits.max_attempts} attempts")

    def _sample_once(self, rng: np.random.Generator) -> Derivation:
        t = self.tensors
        n = t.num_nodes
        budget = _Budget(self.limits)
        a = int(rng.choice(len(self._start_probs), p=self._start_probs))
        root = self._expand(a // n, a % n, rng, budget, depth=0)
        return Derivation.from_root(root)

    def _expand(self, nt: int, node: int, rng, budget: _Budget, depth: int) -> DerivationNode:
        t = self.tensors
        c = t.constraints
        if depth > self.limits.max_depth:
            raise _OverBudget
        if c.copy_nonterminal is not None and nt == c.copy_nonterminal:
            tokens = t.node_yields[node]
            budget.charge(len(tokens))
            return DerivationNode(nt, node, is_preterminal=False, tokens=tokens, is_copy=True)
        parent = t.parent_index(nt, node)
        probs = self._pairs(parent)
        pair = int(rng.choice(len(probs), p=probs))
        b, cidx = pair // t.cdim, pair % t.cdim
        children = []
        for child in (b, cidx):
            sym, cnode = child // t.num_nodes, child % t.num_nodes
            if sym < t.num_nt:
                children.append(self._expand(sym, cnode, rng, budget, depth + 1))
            else:
                pt = sym - t.num_nt
                if c.copy_preterminal is not None and pt == c.copy_preterminal:
                    tokens = t.node_yields[cnode]
                    budget.charge(len(tokens))
                    children.append(DerivationNode(pt, cnode, is_preterminal=True, tokens=tokens, is_copy=True))
                else:
                    tok = int(rng.choice(t.emission.shape[-1], p=self._emit(pt, cnode)))
                    budget.charge(1)
                    children.append(DerivationNode(pt, cnode, is_preterminal=True, tokens=(tok,)))
        return DerivationNode(nt, node, is_preterminal=False, children=(children[0], children[1]))


def _normalized_probs(weights: np.ndarray) -> np.ndarray:
    finite = np.isfinite(weights) & (weights > NEG_THRESHOLD)
    if not finite.any():
        raise SamplingError("no unmasked outcome to sample")
    shifted = np.where(finite, weights - weights[finite].max(), NEG_INF)
    probs = np.exp(shifted)
    probs[~finite] = 0.0
    return probs / probs.sum()


def format_derivation(derivation: Derivation, token_name=str) -> str:
    """Bracketed form, e.g. ``(N4[7] (P0[5] TURN-RIGHT) (P0[4] JUMP))``."""

    def fmt(dn: DerivationNode) -> str:
        kind = "P" if dn.is_preterminal else "N"
        head = f"{kind}{dn.symbol}{'*' if dn.is_copy else ''}[{dn.node}]"
        if dn.tokens is not None:
            return f"({head} {' '.join(token_name(t) for t in dn.tokens)})"
        return f"({head} {fmt(dn.children[0])} {fmt(dn.children[1])})"

    return fmt(derivation.root)
