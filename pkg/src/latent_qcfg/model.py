"""Joint latent-tree transduction model.

Bundles the source parser (neural PCFG), the tree encoder, and the
tree-conditioned target grammar behind one module, and owns the
source-to-target token translation used by copy rules: a source node is
copyable only if every token in its yield has a same-surface-form
counterpart in the target vocabulary.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import BinarySourceTree, Vocabulary, node_yield
from .encoder import TreeEncoder
from .pcfg import NeuralPcfg, pcfg_inside, pcfg_sample_posterior, pcfg_viterbi
from .qcfg import ConstraintConfig, NeuralQcfg, QcfgRuleTensors, qcfg_inside


def copy_token_map(src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> tuple[Optional[int], ...]:
    """Per-source-id target id with the same surface form, or None."""
    out = []
    for i, token in enumerate(src_vocab.id_to_token):
        j = tgt_vocab.token_to_id.get(token)
        if i == src_vocab.unk_id or j is None or j == tgt_vocab.unk_id:
            out.append(None)
        else:
            out.append(j)
    return tuple(out)


class LatentQcfgModel(nn.Module):
    def __init__(
        self,
        src_vocab_size: int,
        tgt_vocab_size: int,
        dim: int = 256,
        qcfg_num_nt: int = 10,
        qcfg_num_pt: int = 1,
        pcfg_num_nt: int = 20,
        pcfg_num_pt: int = 20,
        constraints: ConstraintConfig = ConstraintConfig(),
        use_bilstm: bool = False,
        use_emphasis: bool = False,
        copy_map: Optional[Sequence[Optional[int]]] = None,
    ):
        super().__init__()
        self.constraints = constraints
        self.copy_map = None if copy_map is None else tuple(copy_map)
        self.pcfg = NeuralPcfg(src_vocab_size, dim, pcfg_num_nt, pcfg_num_pt)
        self.encoder = TreeEncoder(src_vocab_size, dim, use_bilstm=use_bilstm, use_emphasis=use_emphasis)
        self.qcfg = NeuralQcfg(tgt_vocab_size, dim, qcfg_num_nt, qcfg_num_pt)
        # With emphasis on, copyable tokens (those with a same-surface-form
        # target counterpart) are marked by default, giving the grammar a
        # class-level copyability feature that transfers to tokens whose
        # embeddings were never trained.
        self.emphasis_ids: Optional[frozenset[int]] = None
        if use_emphasis and self.copy_map is not None:
            self.emphasis_ids = frozenset(
                i for i, t in enumerate(self.copy_map) if t is not None
            )

    def translated_yields(self, tree: BinarySourceTree) -> list[Optional[tuple[int, ...]]]:
        """Target-id yield per node; None where any token is untranslatable."""
        out: list[Optional[tuple[int, ...]]] = []
        for i in range(tree.num_nodes):
            src = node_yield(tree, i)
            if self.copy_map is None:
                out.append(tuple(src))
                continue
            tgt = [self.copy_map[t] if t < len(self.copy_map) else None for t in src]
            out.append(None if any(t is None for t in tgt) else tuple(tgt))
        return out

    def rule_tensors(
        self, tree: BinarySourceTree, emphasis: Optional[Sequence[bool]] = None
    ) -> QcfgRuleTensors:
        structure = tree.structure()
        if emphasis is None and self.emphasis_ids is not None:
            emphasis = [t in self.emphasis_ids for t in structure.leaves]
        reps = self.encoder.node_representations(structure, emphasis)
        return self.qcfg.build_rule_tensors(
            structure, reps, self.constraints, copy_yields=self.translated_yields(structure)
        )

    def target_logprob(
        self,
        tree: BinarySourceTree,
        y: Sequence[int],
        emphasis: Optional[Sequence[bool]] = None,
    ) -> torch.Tensor:
        """Differentiable log p(y | tree)."""
        return qcfg_inside(y, self.rule_tensors(tree, emphasis)).log_marginal

    def sample_source_tree(
        self, x: Sequence[int], rng: np.random.Generator
    ) -> tuple[BinarySourceTree, torch.Tensor, torch.Tensor]:
        """Posterior tree sample, its differentiable log-conditional, and log p(x)."""
        potentials = self.pcfg.potentials()
        chart = pcfg_inside(x, potentials)
        tree, log_cond = pcfg_sample_posterior(x, potentials, chart, rng)
        return tree, log_cond, chart.log_marginal

    def map_source_tree(self, x: Sequence[int]) -> BinarySourceTree:
        with torch.no_grad():
            return pcfg_viterbi(x, self.pcfg.potentials())
