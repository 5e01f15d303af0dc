"""Verification suites behind the gradcheck and enumerate-oracle commands.

The gradient suites freeze any sampled structure (the posterior tree and
the self-critical advantage) before differencing, so the analytic path
and the finite-difference path compute the same deterministic function.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import tree_from_nested
from .encoder import TreeEncoder
from .model import LatentQcfgModel
from .numerics import finite_diff_check
from .oracle import pcfg_marginal_oracle, qcfg_marginal_oracle
from .pcfg import NeuralPcfg, pcfg_inside, pcfg_tree_logprob
from .qcfg import ConstraintConfig, NeuralQcfg, mt_constraints, qcfg_inside, scan_constraints


def _small_model(dim: int, seed: int) -> LatentQcfgModel:
    torch.manual_seed(seed)
    return LatentQcfgModel(
        src_vocab_size=5,
        tgt_vocab_size=6,
        dim=dim,
        qcfg_num_nt=2,
        qcfg_num_pt=2,
        pcfg_num_nt=2,
        pcfg_num_pt=2,
        constraints=scan_constraints(),
    )


def run_gradient_suites(
    dim: int = 16, seed: int = 0, max_coords_per_param: int = 4, epsilon: float = 1e-5
) -> dict[str, float]:
    model = _small_model(dim, seed)
    x = (1, 2, 3)
    y = (1, 2, 3)
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    pcfg_params = list(model.pcfg.parameters())
    results["source_marginal"] = finite_diff_check(
        lambda: pcfg_inside(x, model.pcfg.potentials()).log_marginal,
        pcfg_params,
        epsilon=epsilon,
        max_coords_per_param=max_coords_per_param,
    )

    fixed_tree = model.map_source_tree(x)
    theta_params = list(model.encoder.parameters()) + list(model.qcfg.parameters())
    results["target_likelihood"] = finite_diff_check(
        lambda: model.target_logprob(fixed_tree, y),
        theta_params,
        epsilon=epsilon,
        max_coords_per_param=max_coords_per_param,
    )

    sampled_tree, _, _ = model.sample_source_tree(x, rng)
    with torch.no_grad():
        advantage = float(model.target_logprob(sampled_tree, y) - model.target_logprob(fixed_tree, y))

    def surrogate() -> torch.Tensor:
        potentials = model.pcfg.potentials()
        chart = pcfg_inside(x, potentials)
        log_cond = pcfg_tree_logprob(sampled_tree, potentials) - chart.log_marginal
        reward = model.target_logprob(sampled_tree, y)
        return -(reward + advantage * log_cond + chart.log_marginal)

    results["surrogate_loss"] = finite_diff_check(
        surrogate,
        list(model.parameters()),
        epsilon=epsilon,
        max_coords_per_param=max_coords_per_param,
    )
    return results


def run_oracle_comparisons(seed: int = 0) -> dict[str, float]:
    """Max |inside - enumeration| log-marginal gap per grammar variant."""
    torch.manual_seed(seed)
    results: dict[str, float] = {}

    pcfg = NeuralPcfg(vocab_size=4, dim=8, num_nt=2, num_pt=2)
    potentials = pcfg.potentials()
    gap = 0.0
    for x in [(1,), (1, 2), (2, 0, 1), (1, 3, 2, 0)]:
        inside = pcfg_inside(x, potentials).log_marginal.item()
        exact = float(np.log(pcfg_marginal_oracle(x, potentials)))
        gap = max(gap, abs(inside - exact))
    results["pcfg_inside"] = gap

    encoder = TreeEncoder(vocab_size=4, dim=8)
    qcfg = NeuralQcfg(vocab_size=5, dim=8, num_nt=2, num_pt=2)
    tree = tree_from_nested([1, 2, 3], ((0, 1), 2))
    reps = encoder.node_representations(tree)
    variants = {
        "qcfg_inside_unconstrained": ConstraintConfig(),
        "qcfg_inside_scan": scan_constraints(),
        "qcfg_inside_mt": mt_constraints(),
        "qcfg_inside_copy": scan_constraints(copy_nonterminal=1, copy_preterminal=1),
    }
    for name, constraints in variants.items():
        tensors = qcfg.build_rule_tensors(tree, reps, constraints)
        gap = 0.0
        for y in [(1, 2), (2, 3, 1), (1, 2, 3, 4)]:
            inside = qcfg_inside(y, tensors).log_marginal.item()
            mass = qcfg_marginal_oracle(y, tensors)
            exact = float(np.log(mass)) if mass > 0 else float("-inf")
            if np.isfinite(exact):
                gap = max(gap, abs(inside - exact))
            elif inside > -1e25:
                gap = max(gap, float("inf"))
        results[name] = gap
    return results
