import numpy as np
import pytest
import torch

from latent_qcfg.core import tree_from_nested
from latent_qcfg.encoder import TreeEncoder
from latent_qcfg.qcfg import NeuralQcfg


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_qcfg_setup(seed=0, num_nt=2, num_pt=2, dim=8, src_vocab=5, tgt_vocab=5, leaves=(1, 2, 3), nested=((0, 1), 2)):
    """A tree, its node representations, and a small target grammar."""
    torch.manual_seed(seed)
    encoder = TreeEncoder(src_vocab, dim)
    qcfg = NeuralQcfg(tgt_vocab, dim, num_nt, num_pt)
    tree = tree_from_nested(list(leaves), nested)
    reps = encoder.node_representations(tree)
    return tree, reps, qcfg
