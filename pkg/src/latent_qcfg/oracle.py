"""Brute-force enumeration oracles.

Everything here works in ordinary probability space over explicitly
enumerated trees/derivations, independent of the vectorized log-space
dynamic programs it is used to check.  Only practical for tiny
instances.
"""

from __future__ import annotations

import math
from itertools import product
from typing import Iterator, Sequence

import numpy as np

from .core import BinarySourceTree, enumerate_bracketings, single_node_tree, tree_from_nested
from .pcfg import PcfgPotentials
from .qcfg import Derivation, DerivationNode, QcfgRuleTensors


# --------------------------------------------------------------------------
# Source-side PCFG oracles


def enumerate_labeled_source_trees(
    x: Sequence[int], num_nt: int, num_pt: int
) -> Iterator[BinarySourceTree]:
    """Every labeled binary tree whose yield is ``x``."""
    s = len(x)
    if s == 1:
        for d in range(num_pt):
            yield single_node_tree(x[0], d)
        return
    for nested in enumerate_bracketings(0, s):
        spans = _spans_of(nested)
        internal = [sp for sp in spans if sp[1] - sp[0] > 1]
        leaves = [(i, i + 1) for i in range(s)]
        for nt_labels in product(range(num_nt), repeat=len(internal)):
            for pt_labels in product(range(num_pt), repeat=s):
                labels_by_span = dict(zip(internal, nt_labels))
                labels_by_span.update(dict(zip(leaves, pt_labels)))
                yield tree_from_nested(list(x), nested, labels_by_span)


def _spans_of(nested) -> list[tuple[int, int]]:
    if isinstance(nested, int):
        return [(nested, nested + 1)]
    left, right = nested
    ls, rs = _spans_of(left), _spans_of(right)
    return ls + rs + [(ls[0][0], rs[-1][1])]


def pcfg_tree_prob(tree: BinarySourceTree, potentials: PcfgPotentials) -> float:
    """Naive per-rule product of probabilities for one labeled tree."""
    start = np.exp(potentials.start.detach().numpy())
    start_pt = np.exp(potentials.start_pt.detach().numpy())
    binary = np.exp(potentials.binary.detach().numpy())
    emission = np.exp(potentials.emission.detach().numpy())
    num_nt = potentials.num_nt
    if tree.sentence_length == 1:
        d = tree.labels[tree.root]
        return float(start_pt[d] * emission[d, tree.leaves[0]])
    prob = float(start[tree.labels[tree.root]])
    for idx, node in enumerate(tree.nodes):
        if node.is_leaf:
            prob *= float(emission[tree.labels[idx], tree.leaves[idx]])
        else:
            def m(j):
                return tree.labels[j] + (num_nt if tree.nodes[j].is_leaf else 0)
            prob *= float(binary[tree.labels[idx], m(node.left), m(node.right)])
    return prob


def pcfg_marginal_oracle(x: Sequence[int], potentials: PcfgPotentials) -> float:
    return sum(
        pcfg_tree_prob(t, potentials)
        for t in enumerate_labeled_source_trees(x, potentials.num_nt, potentials.num_pt)
    )


def pcfg_marginal_oracle_structured(x: Sequence[int], potentials: PcfgPotentials) -> float:
    """Marginal via explicit structure enumeration with per-structure label sums.

    Enumerates every bracketing and sums over labelings bottom-up in
    normal probability space; same quantity as ``pcfg_marginal_oracle``
    but fast enough for exhaustive S=5 sweeps.
    """
    s = len(x)
    start = np.exp(potentials.start.detach().numpy())
    start_pt = np.exp(potentials.start_pt.detach().numpy())
    binary = np.exp(potentials.binary.detach().numpy())
    emission = np.exp(potentials.emission.detach().numpy())
    num_nt, num_m = potentials.num_nt, potentials.num_m
    if s == 1:
        return float(start_pt @ emission[:, x[0]])

    def mass(nested) -> np.ndarray:
        # Probability vector over M-space symbols at this node.
        if isinstance(nested, int):
            out = np.zeros(num_m)
            out[num_nt:] = emission[:, x[nested]]
            return out
        left, right = nested
        pair = np.outer(mass(left), mass(right))
        out = np.zeros(num_m)
        out[:num_nt] = (binary * pair[None, :, :]).sum(axis=(1, 2))
        return out

    total = 0.0
    for nested in enumerate_bracketings(0, s):
        total += float(start @ mass(nested)[:num_nt])
    return total


def pcfg_map_value_oracle_structured(x: Sequence[int], potentials: PcfgPotentials) -> float:
    """Probability of the best labeled tree; max-product twin of
    ``pcfg_marginal_oracle_structured``."""
    s = len(x)
    start = np.exp(potentials.start.detach().numpy())
    start_pt = np.exp(potentials.start_pt.detach().numpy())
    binary = np.exp(potentials.binary.detach().numpy())
    emission = np.exp(potentials.emission.detach().numpy())
    num_nt, num_m = potentials.num_nt, potentials.num_m
    if s == 1:
        return float((start_pt * emission[:, x[0]]).max())

    def best(nested) -> np.ndarray:
        # Max probability over subtrees rooted at each M-space symbol.
        if isinstance(nested, int):
            out = np.zeros(num_m)
            out[num_nt:] = emission[:, x[nested]]
            return out
        left, right = nested
        pair = np.outer(best(left), best(right))
        out = np.zeros(num_m)
        out[:num_nt] = (binary * pair[None, :, :]).max(axis=(1, 2))
        return out

    return max(float((start * best(nested)[:num_nt]).max()) for nested in enumerate_bracketings(0, s))


def pcfg_map_oracle(x: Sequence[int], potentials: PcfgPotentials) -> tuple[BinarySourceTree, float]:
    best_tree, best_prob = None, -1.0
    for t in enumerate_labeled_source_trees(x, potentials.num_nt, potentials.num_pt):
        p = pcfg_tree_prob(t, potentials)
        if p > best_prob:
            best_tree, best_prob = t, p
    return best_tree, best_prob


def pcfg_posterior_oracle(
    x: Sequence[int], potentials: PcfgPotentials
) -> dict[tuple, float]:
    """Exact posterior over labeled trees, keyed by a hashable signature."""
    probs: dict[tuple, float] = {}
    for t in enumerate_labeled_source_trees(x, potentials.num_nt, potentials.num_pt):
        probs[tree_signature(t)] = pcfg_tree_prob(t, potentials)
    total = sum(probs.values())
    return {k: v / total for k, v in probs.items()}


def tree_signature(tree: BinarySourceTree) -> tuple:
    """Hashable (structure, labels) signature of a labeled tree."""
    def walk(idx):
        node = tree.nodes[idx]
        label = None if tree.labels is None else tree.labels[idx]
        if node.is_leaf:
            return (node.span.start, label)
        return (walk(node.left), walk(node.right), label)
    return walk(tree.root)


# --------------------------------------------------------------------------
# Target-side grammar oracles


def enumerate_span_derivations(
    y: Sequence[int], tensors: QcfgRuleTensors
) -> list[tuple[Derivation, float]]:
    """All complete derivations whose yield is exactly ``y``, with probabilities."""
    y = tuple(y)
    t_len = len(y)
    n, num_nt = tensors.num_nodes, tensors.num_nt
    c = tensors.constraints
    memo: dict[tuple[int, int, int], list[tuple[DerivationNode, float]]] = {}

    def derive(s: int, e: int, child: int) -> list[tuple[DerivationNode, float]]:
        key = (s, e, child)
        if key in memo:
            return memo[key]
        sym, node = child // n, child % n
        out: list[tuple[DerivationNode, float]] = []
        if sym < num_nt and c.copy_nonterminal is not None and sym == c.copy_nonterminal:
            if tensors.node_yields[node] == y[s:e]:
                out.append((DerivationNode(sym, node, False, tokens=y[s:e], is_copy=True), 1.0))
        elif sym >= num_nt:
            pt = sym - num_nt
            if c.copy_preterminal is not None and pt == c.copy_preterminal:
                if e - s == 1 and tensors.node_yields[node] == y[s:e]:
                    out.append((DerivationNode(pt, node, True, tokens=y[s:e], is_copy=True), 1.0))
            elif e - s == 1 and bool(tensors.pt_mask[pt, node]):
                p = math.exp(float(tensors.emission[pt, node, y[s]].detach()))
                out.append((DerivationNode(pt, node, True, tokens=(y[s],)), p))
        else:
            parent = tensors.parent_index(sym, node)
            for m in range(s + 1, e):
                for b in range(tensors.cdim):
                    lefts = derive(s, m, b)
                    if not lefts:
                        continue
                    for cc in range(tensors.cdim):
                        lp = tensors.binary_logprob(parent, b, cc)
                        if lp == -math.inf:
                            continue
                        rights = derive(m, e, cc)
                        if not rights:
                            continue
                        rule_p = math.exp(lp)
                        for ln, lprob in lefts:
                            for rn, rprob in rights:
                                out.append(
                                    (DerivationNode(sym, node, False, children=(ln, rn)), rule_p * lprob * rprob)
                                )
        memo[key] = out
        return out

    results: list[tuple[Derivation, float]] = []
    for a in range(num_nt):
        for node in range(n):
            if not bool(tensors.start_mask[a, node]):
                continue
            sp = math.exp(float(tensors.start[a, node].detach()))
            for dn, prob in derive(0, t_len, tensors.child_index(a, node)):
                results.append((Derivation.from_root(dn), sp * prob))
    return results


def qcfg_marginal_oracle(y: Sequence[int], tensors: QcfgRuleTensors) -> float:
    """Total probability of ``y`` by scalar recursion over spans.

    Same quantity as summing ``enumerate_span_derivations`` but without
    materializing the (potentially huge) derivation list.
    """
    y = tuple(y)
    t_len = len(y)
    n, num_nt = tensors.num_nodes, tensors.num_nt
    c = tensors.constraints
    memo: dict[tuple[int, int, int], float] = {}

    def mass(s: int, e: int, child: int) -> float:
        key = (s, e, child)
        if key in memo:
            return memo[key]
        sym, node = child // n, child % n
        total = 0.0
        if sym < num_nt and c.copy_nonterminal is not None and sym == c.copy_nonterminal:
            total = 1.0 if tensors.node_yields[node] == y[s:e] else 0.0
        elif sym >= num_nt:
            pt = sym - num_nt
            if c.copy_preterminal is not None and pt == c.copy_preterminal:
                total = 1.0 if e - s == 1 and tensors.node_yields[node] == y[s:e] else 0.0
            elif e - s == 1 and bool(tensors.pt_mask[pt, node]):
                total = math.exp(float(tensors.emission[pt, node, y[s]].detach()))
        else:
            parent = tensors.parent_index(sym, node)
            for m in range(s + 1, e):
                for b in range(tensors.cdim):
                    lm = mass(s, m, b)
                    if lm == 0.0:
                        continue
                    for cc in range(tensors.cdim):
                        lp = tensors.binary_logprob(parent, b, cc)
                        if lp == -math.inf:
                            continue
                        total += math.exp(lp) * lm * mass(m, e, cc)
        memo[key] = total
        return total

    out = 0.0
    for a in range(num_nt):
        for node in range(n):
            if not bool(tensors.start_mask[a, node]):
                continue
            sp = math.exp(float(tensors.start[a, node].detach()))
            out += sp * mass(0, t_len, tensors.child_index(a, node))
    return out


def enumerate_free_derivations(
    tensors: QcfgRuleTensors, max_depth: int, max_length: int
) -> list[tuple[Derivation, float]]:
    """All derivations the generator can produce within the given bounds.

    The returned probabilities sum to at most 1; the gap is the mass on
    derivations exceeding the bounds.
    """
    n, num_nt = tensors.num_nodes, tensors.num_nt
    c = tensors.constraints

    def expand(child: int, depth: int) -> list[tuple[DerivationNode, float]]:
        sym, node = child // n, child % n
        if sym < num_nt and c.copy_nonterminal is not None and sym == c.copy_nonterminal:
            toks = tensors.node_yields[node]
            return [(DerivationNode(sym, node, False, tokens=toks, is_copy=True), 1.0)]
        if sym >= num_nt:
            pt = sym - num_nt
            if c.copy_preterminal is not None and pt == c.copy_preterminal:
                toks = tensors.node_yields[node]
                return [(DerivationNode(pt, node, True, tokens=toks, is_copy=True), 1.0)]
            out = []
            for tok in range(tensors.emission.shape[-1]):
                p = math.exp(float(tensors.emission[pt, node, tok].detach()))
                if p > 0:
                    out.append((DerivationNode(pt, node, True, tokens=(tok,)), p))
            return out
        if depth >= max_depth:
            return []
        parent = tensors.parent_index(sym, node)
        out = []
        for b in range(tensors.cdim):
            for cc in range(tensors.cdim):
                lp = tensors.binary_logprob(parent, b, cc)
                if lp == -math.inf:
                    continue
                rule_p = math.exp(lp)
                for ln, lprob in expand(b, depth + 1):
                    for rn, rprob in expand(cc, depth + 1):
                        out.append((DerivationNode(sym, node, False, children=(ln, rn)), rule_p * lprob * rprob))
        return out

    results = []
    for a in range(num_nt):
        for node in range(n):
            if not bool(tensors.start_mask[a, node]):
                continue
            sp = math.exp(float(tensors.start[a, node].detach()))
            for dn, prob in expand(tensors.child_index(a, node), depth=0):
                d = Derivation.from_root(dn)
                if len(d.target) <= max_length:
                    results.append((d, sp * prob))
    return results


def derivation_signature(derivation: Derivation) -> tuple:
    def walk(dn: DerivationNode):
        base = (dn.symbol, dn.node, dn.is_preterminal, dn.is_copy)
        if dn.tokens is not None:
            return base + (dn.tokens,)
        return base + (walk(dn.children[0]), walk(dn.children[1]))
    return walk(derivation.root)


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
