"""Predictive decoding and evaluation.

Decoding: MAP source tree, then K sampled derivations from the
tree-conditioned grammar, then rescoring of the distinct yields by
string-level perplexity (full inside sum over all derivations of the
yield, not just the sampled one).  Samples are drawn sequentially so a
run with K+1 samples extends the run with K under the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BinarySourceTree
from .model import LatentQcfgModel
from .qcfg import (
    Derivation,
    DerivationSampler,
    QcfgRuleTensors,
    SamplingError,
    SamplingLimits,
    derivation_is_valid,
    yield_perplexity,
)

DecodeFilter = Callable[[Derivation, BinarySourceTree], bool]


class DecodeError(RuntimeError):
    """No decodable candidate; carries the MAP source tree for diagnostics."""

    def __init__(self, message: str, source_tree: Optional[BinarySourceTree] = None):
        super().__init__(message)
        self.source_tree = source_tree


@dataclass(frozen=True)
class DecodeConfig:
    num_samples: int = 10
    limits: SamplingLimits = SamplingLimits()
    filters: tuple[DecodeFilter, ...] = ()
    deduplicate: bool = True
    # Filter rejections resample rather than consuming the K budget, up to
    # this many total draws.
    max_filter_attempts_per_sample: int = 20

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass
class Candidate:
    sample_index: int
    derivation: Derivation
    perplexity: float

    @property
    def target(self) -> tuple[int, ...]:
        return self.derivation.target


@dataclass
class DecodeResult:
    best_yield: tuple[int, ...]
    best_derivation: Derivation
    best_perplexity: float
    source_tree: BinarySourceTree
    candidates: list[Candidate] = field(default_factory=list)


def decode(
    model: LatentQcfgModel,
    x: Sequence[int],
    config: DecodeConfig = DecodeConfig(),
    rng: Optional[np.random.Generator] = None,
) -> DecodeResult:
    if rng is None:
        rng = np.random.default_rng(0)
    source_tree = model.map_source_tree(x)
    tensors = model.rule_tensors(source_tree)
    return decode_with_tensors(source_tree, tensors, config, rng)


def decode_with_tensors(
    source_tree: BinarySourceTree,
    tensors: QcfgRuleTensors,
    config: DecodeConfig,
    rng: np.random.Generator,
) -> DecodeResult:
    sampler = DerivationSampler(tensors, config.limits)
    derivations: list[Derivation] = []
    attempts_left = config.num_samples * config.max_filter_attempts_per_sample
    while len(derivations) < config.num_samples and attempts_left > 0:
        attempts_left -= 1
        try:
            derivation = sampler.sample(rng)
        except SamplingError:
            break
        if all(f(derivation, source_tree) for f in config.filters):
            derivations.append(derivation)
    if not derivations:
        raise DecodeError("no derivation survived sampling and filtering", source_tree)

    seen: dict[tuple[int, ...], Candidate] = {}
    candidates: list[Candidate] = []
    for index, derivation in enumerate(derivations):
        target = derivation.target
        if config.deduplicate and target in seen:
            continue
        ppl = yield_perplexity(target, tensors) if len(target) >= 2 else float("inf")
        cand = Candidate(index, derivation, ppl)
        seen[target] = cand
        candidates.append(cand)

    best = candidates[0]
    for cand in candidates[1:]:
        if cand.perplexity < best.perplexity:  # ties keep the earlier sample
            best = cand

    for cand in candidates:
        if not derivation_is_valid(cand.derivation, tensors):
            raise DecodeError("sampled derivation violates the active rule masks", source_tree)
        if not all(f(cand.derivation, source_tree) for f in config.filters):
            raise DecodeError("candidate violates a decode filter post hoc", source_tree)

    return DecodeResult(best.target, best.derivation, best.perplexity, source_tree, candidates)


def make_root_split_filter(conjunction_ids: Sequence[int]) -> DecodeFilter:
    """Reject derivations splitting "x {and, after} y" on one side only.

    For sources containing a conjunction token, the root binary rule must
    not align both children strictly to the same side of it.  Sources
    without a conjunction always pass.
    """
    conj = set(conjunction_ids)

    def side(tree: BinarySourceTree, node: int, pos: int) -> int:
        span = tree.nodes[node].span
        if span.end <= pos:
            return -1
        if span.start > pos:
            return 1
        return 0  # straddles the conjunction

    def accept(derivation: Derivation, tree: BinarySourceTree) -> bool:
        positions = [i for i, tok in enumerate(tree.leaves) if tok in conj]
        if len(positions) != 1:
            return True
        pos = positions[0]
        root = derivation.root
        if root.children is None:
            return True
        left_side = side(tree, root.children[0].node, pos)
        right_side = side(tree, root.children[1].node, pos)
        return not (left_side == right_side and left_side != 0)

    return accept


def exact_match(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise ValueError("empty evaluation set")
    hits = sum(tuple(p) == tuple(r) for p, r in zip(predictions, references))
    return hits / len(references)


def format_source_tree(tree: BinarySourceTree, token_name=str) -> str:
    """Bracketed structure with tokens at the leaves."""

    def fmt(idx: int) -> str:
        node = tree.nodes[idx]
        if node.is_leaf:
            return token_name(tree.leaves[idx])
        return f"({fmt(node.left)} {fmt(node.right)})"

    return fmt(tree.root)
