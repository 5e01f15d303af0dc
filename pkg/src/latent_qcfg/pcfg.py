"""Neural PCFG over source strings.

Provides the grammar potentials, the inside marginal, Viterbi (MAP)
parsing, posterior tree sampling, and joint tree scoring.  Symbol
convention: nonterminal ids run 0..num_nt-1, preterminal ids 0..num_pt-1;
where both appear in one axis ("M-space") nonterminals come first and
preterminals are offset by num_nt.  Tree labels store nonterminal ids on
internal nodes and preterminal ids on leaves.

Sentences of length one are parsed as a bare preterminal chain via a
separate start-to-preterminal distribution used only at width one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import BinarySourceTree, TreeError, single_node_tree, tree_from_nested
from .nets import ResidualFeedforward
from .numerics import DTYPE, NEG_BIG, NEG_INF, NEG_THRESHOLD, log_sum_exp


class PcfgError(ValueError):
    pass


@dataclass
class PcfgPotentials:
    """Sentence-independent log-distributions for one parameter state."""

    start: torch.Tensor      # (num_nt,) log p(S -> A)
    start_pt: torch.Tensor   # (num_pt,) log p(S -> D), width-1 sentences only
    binary: torch.Tensor     # (num_nt, num_m, num_m) log p(A -> B C)
    emission: torch.Tensor   # (num_pt, vocab) log p(D -> w)

    @property
    def num_nt(self) -> int:
        return self.start.shape[0]

    @property
    def num_pt(self) -> int:
        return self.start_pt.shape[0]

    @property
    def num_m(self) -> int:
        return self.num_nt + self.num_pt


@dataclass
class InsideChart:
    """Log inside scores per (start, end) span over M-space symbols.

    Width-1 spans carry preterminal entries only; wider spans carry
    nonterminal entries only; everything else is -inf.
    """

    length: int
    entries: dict[tuple[int, int], torch.Tensor]
    log_marginal: torch.Tensor

    def entry(self, start: int, end: int) -> torch.Tensor:
        return self.entries[(start, end)]


class NeuralPcfg(nn.Module):
    """Embedding-and-residual-network parameterization of PCFG rule scores."""

    def __init__(self, vocab_size: int, dim: int, num_nt: int = 20, num_pt: int = 20):
        super().__init__()
        if min(vocab_size, dim, num_nt, num_pt) < 1:
            raise PcfgError("vocab_size, dim and symbol counts must be positive")
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
        self.f_start = ResidualFeedforward(dim)
        self.f_parent = ResidualFeedforward(dim)
        self.f_left = ResidualFeedforward(dim)
        self.f_right = ResidualFeedforward(dim)
        self.f_emit = ResidualFeedforward(dim)
        self.to(DTYPE)

    def potentials(self) -> PcfgPotentials:
        e_m = torch.cat([self.nt_emb, self.pt_emb], dim=0)
        start = torch.log_softmax(self.f_start(self.nt_emb) @ self.start_emb.squeeze(0), dim=0)
        start_pt = torch.log_softmax(self.f_start(self.pt_emb) @ self.start_emb.squeeze(0), dim=0)
        parent = self.f_parent(self.nt_emb)                       # (nt, d)
        score_left = parent @ self.f_left(e_m).T                  # (nt, m)
        score_right = parent @ self.f_right(e_m).T                # (nt, m)
        logits = score_left[:, :, None] + score_right[:, None, :]
        binary = torch.log_softmax(logits.reshape(self.num_nt, -1), dim=1).reshape(logits.shape)
        emission = torch.log_softmax(self.f_emit(self.pt_emb) @ self.term_emb.T + self.term_bias, dim=1)
        return PcfgPotentials(start, start_pt, binary, emission)


def pcfg_inside(x: Sequence[int], potentials: PcfgPotentials) -> InsideChart:
    """Inside chart and log marginal log p(x) = log sum over trees."""
    s = len(x)
    if s == 0:
        raise PcfgError("empty sentence")
    num_nt, num_pt, num_m = potentials.num_nt, potentials.num_pt, potentials.num_m
    # NEG_BIG (not -inf) keeps backward through the logsumexp cascade NaN-free.
    neg = torch.full((num_m,), NEG_BIG, dtype=DTYPE)
    entries: dict[tuple[int, int], torch.Tensor] = {}
    for i, token in enumerate(x):
        entries[(i, i + 1)] = torch.cat([neg[:num_nt], potentials.emission[:, token]])
    binary_flat = potentials.binary.reshape(num_nt, -1)
    for width in range(2, s + 1):
        for i in range(s - width + 1):
            k = i + width
            left = torch.stack([entries[(i, m)] for m in range(i + 1, k)])
            right = torch.stack([entries[(m, k)] for m in range(i + 1, k)])
            pair = left[:, :, None] + right[:, None, :]
            combined = torch.logsumexp(pair, dim=0).reshape(-1)
            nt_scores = torch.logsumexp(binary_flat + combined[None, :], dim=1)
            entries[(i, k)] = torch.cat([nt_scores, neg[num_nt:]])
    if s == 1:
        log_marginal = log_sum_exp(potentials.start_pt + entries[(0, 1)][num_nt:])
    else:
        log_marginal = log_sum_exp(potentials.start + entries[(0, s)][:num_nt])
    return InsideChart(s, entries, log_marginal)


def pcfg_tree_logprob(tree: BinarySourceTree, potentials: PcfgPotentials) -> torch.Tensor:
    """Log joint probability of a labeled tree (start + binary + emission terms)."""
    if tree.labels is None:
        raise TreeError("tree has no symbol labels")
    num_nt, num_pt = potentials.num_nt, potentials.num_pt

    def m_label(idx: int) -> int:
        label = tree.labels[idx]
        if tree.nodes[idx].is_leaf:
            if not 0 <= label < num_pt:
                raise PcfgError(f"invalid preterminal label {label}")
            return num_nt + label
        if not 0 <= label < num_nt:
            raise PcfgError(f"invalid nonterminal label {label}")
        return label

    if tree.sentence_length == 1:
        d = tree.labels[tree.root]
        return potentials.start_pt[d] + potentials.emission[d, tree.leaves[0]]
    total = potentials.start[tree.labels[tree.root]]
    for idx, node in enumerate(tree.nodes):
        if node.is_leaf:
            total = total + potentials.emission[tree.labels[idx], tree.leaves[idx]]
        else:
            total = total + potentials.binary[tree.labels[idx], m_label(node.left), m_label(node.right)]
    return total


def pcfg_viterbi(x: Sequence[int], potentials: PcfgPotentials) -> BinarySourceTree:
    """MAP labeled tree; ties broken by lowest split, then lowest symbol ids."""
    s = len(x)
    if s == 0:
        raise PcfgError("empty sentence")
    num_nt = potentials.num_nt
    if s == 1:
        scores = (potentials.start_pt + potentials.emission[:, x[0]]).detach().numpy()
        return single_node_tree(x[0], int(np.argmax(scores)))
    binary = potentials.binary.detach().numpy()
    emission = potentials.emission.detach().numpy()
    num_m = potentials.num_m
    best: dict[tuple[int, int], np.ndarray] = {}
    back: dict[tuple[int, int], list] = {}
    for i, token in enumerate(x):
        vec = np.full(num_m, NEG_INF)
        vec[num_nt:] = emission[:, token]
        best[(i, i + 1)] = vec
    for width in range(2, s + 1):
        for i in range(s - width + 1):
            k = i + width
            # Candidate axis ordered split-major then child symbols, so the
            # first argmax occurrence realizes the tie-break rule.
            cands = np.stack(
                [binary + best[(i, m)][None, :, None] + best[(m, k)][None, None, :] for m in range(i + 1, k)]
            )  # (splits, nt, m, m)
            flat = cands.transpose(1, 0, 2, 3).reshape(num_nt, -1)
            arg = np.argmax(flat, axis=1)
            vec = np.full(num_m, NEG_INF)
            vec[:num_nt] = flat[np.arange(num_nt), arg]
            best[(i, k)] = vec
            back[(i, k)] = [
                (int(i + 1 + a // (num_m * num_m)), int((a // num_m) % num_m), int(a % num_m))
                for a in arg
            ]
    root_scores = potentials.start.detach().numpy() + np.array([best[(0, s)][a] for a in range(num_nt)])
    root_label = int(np.argmax(root_scores))

    labels_by_span: dict[tuple[int, int], int] = {}

    def build(i: int, k: int, m_sym: int):
        if k - i == 1:
            labels_by_span[(i, k)] = m_sym - num_nt
            return i
        # Wide spans hold nonterminals only, so m_sym is already an NT id.
        labels_by_span[(i, k)] = m_sym
        split, b, c = back[(i, k)][m_sym]
        return (build(i, split, b), build(split, k, c))

    nested = build(0, s, root_label)
    return tree_from_nested(list(x), nested, labels_by_span)


def pcfg_sample_posterior(
    x: Sequence[int],
    potentials: PcfgPotentials,
    chart: InsideChart,
    rng: np.random.Generator,
) -> tuple[BinarySourceTree, torch.Tensor]:
    """Ancestral sample from p(tree | x) plus its differentiable log-conditional."""
    s = len(x)
    if chart.length != s:
        raise PcfgError("chart length does not match sentence")
    num_nt, num_m = potentials.num_nt, potentials.num_m

    def draw(weights: np.ndarray) -> int:
        ok = np.isfinite(weights) & (weights > NEG_THRESHOLD)
        if not ok.any():
            raise PcfgError("no expandable candidates (all log-zero)")
        probs = np.exp(np.where(ok, weights - weights[ok].max(), NEG_INF))
        probs[~ok] = 0.0
        probs /= probs.sum()
        return int(rng.choice(len(weights), p=probs))

    if s == 1:
        weights = (potentials.start_pt + chart.entry(0, 1)[num_nt:]).detach().numpy()
        d = draw(weights)
        tree = single_node_tree(x[0], d)
        return tree, pcfg_tree_logprob(tree, potentials) - chart.log_marginal

    binary = potentials.binary.detach().numpy()
    entries = {span: t.detach().numpy() for span, t in chart.entries.items()}
    labels_by_span: dict[tuple[int, int], int] = {}

    def expand(i: int, k: int, nt: int):
        labels_by_span_key = (i, k)
        labels_by_span[labels_by_span_key] = nt
        cands = np.stack(
            [binary[nt] + entries[(i, m)][:, None] + entries[(m, k)][None, :] for m in range(i + 1, k)]
        )
        a = draw(cands.reshape(-1))
        split = i + 1 + a // (num_m * num_m)
        b, c = (a // num_m) % num_m, a % num_m

        def child(lo, hi, sym):
            if hi - lo == 1:
                labels_by_span[(lo, hi)] = sym - num_nt
                return lo
            return expand(lo, hi, sym)

        return (child(i, split, b), child(split, k, c))

    root_weights = potentials.start.detach().numpy() + entries[(0, s)][:num_nt]
    root = draw(root_weights)
    nested = expand(0, s, root)
    tree = tree_from_nested(list(x), nested, labels_by_span)
    return tree, pcfg_tree_logprob(tree, potentials) - chart.log_marginal
