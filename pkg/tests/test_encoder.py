import pytest
import torch

from latent_qcfg.core import tree_from_nested
from latent_qcfg.encoder import EncoderConfigError, TreeEncoder
from latent_qcfg.numerics import DTYPE


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return TreeEncoder(vocab_size=6, dim=8)


class TestEmbedding:
    def test_shape_and_dtype(self, encoder):
        out = encoder.embed_tokens([1, 2, 3])
        assert out.shape == (3, 8) and out.dtype == DTYPE

    def test_out_of_range_token_rejected(self, encoder):
        with pytest.raises(EncoderConfigError):
            encoder.embed_tokens([0, 6])

    def test_emphasis_requires_configuration(self, encoder):
        with pytest.raises(EncoderConfigError):
            encoder.embed_tokens([1], emphasis=[True])

    def test_emphasis_shifts_embeddings(self):
        torch.manual_seed(0)
        enc = TreeEncoder(vocab_size=6, dim=8, use_emphasis=True)
        plain = enc.embed_tokens([1, 2], emphasis=[False, False])
        marked = enc.embed_tokens([1, 2], emphasis=[False, True])
        assert torch.allclose(plain[0], marked[0])
        assert not torch.allclose(plain[1], marked[1])

    def test_emphasis_length_mismatch(self):
        enc = TreeEncoder(vocab_size=6, dim=4, use_emphasis=True)
        with pytest.raises(EncoderConfigError):
            enc.embed_tokens([1, 2], emphasis=[True])


class TestTreeEncoding:
    def test_one_representation_per_node(self, encoder):
        tree = tree_from_nested([1, 2, 3, 4], ((0, 1), (2, 3)))
        reps = encoder.node_representations(tree)
        assert reps.shape == (7, 8)

    def test_deterministic(self, encoder):
        tree = tree_from_nested([1, 2, 3], (0, (1, 2)))
        a = encoder.node_representations(tree)
        b = encoder.node_representations(tree)
        assert torch.equal(a, b)

    def test_node_representation_depends_only_on_yield(self, encoder):
        # Without the BiLSTM, a subtree's representation ignores the rest of
        # the sentence.
        left_heavy = tree_from_nested([1, 2, 3], ((0, 1), 2))
        other = tree_from_nested([1, 2, 5], ((0, 1), 2))
        a = encoder.node_representations(left_heavy)
        b = encoder.node_representations(other)
        assert torch.allclose(a[3], b[3])  # shared (1, 2) subtree
        assert not torch.allclose(a[4], b[4])

    def test_structure_changes_internal_representations(self, encoder):
        a = encoder.node_representations(tree_from_nested([1, 2, 3], ((0, 1), 2)))
        b = encoder.node_representations(tree_from_nested([1, 2, 3], (0, (1, 2))))
        assert not torch.allclose(a[4], b[4])  # roots differ

    def test_leaf_vector_count_checked(self, encoder):
        tree = tree_from_nested([1, 2], (0, 1))
        with pytest.raises(EncoderConfigError):
            encoder.encode_tree(tree, torch.zeros(3, 8, dtype=DTYPE))

    def test_gradients_flow_to_embeddings(self, encoder):
        tree = tree_from_nested([1, 2], (0, 1))
        reps = encoder.node_representations(tree)
        reps.sum().backward()
        assert encoder.embedding.weight.grad is not None
        assert encoder.embedding.weight.grad.abs().sum() > 0


class TestBilstm:
    def test_contextualized_shape(self):
        torch.manual_seed(0)
        enc = TreeEncoder(vocab_size=6, dim=8, use_bilstm=True)
        tree = tree_from_nested([1, 2, 3], ((0, 1), 2))
        assert enc.node_representations(tree).shape == (5, 8)

    def test_context_makes_subtrees_sentence_dependent(self):
        torch.manual_seed(0)
        enc = TreeEncoder(vocab_size=6, dim=8, use_bilstm=True)
        a = enc.node_representations(tree_from_nested([1, 2, 3], ((0, 1), 2)))
        b = enc.node_representations(tree_from_nested([1, 2, 5], ((0, 1), 2)))
        assert not torch.allclose(a[3], b[3])

    def test_contextualize_requires_configuration(self, encoder):
        with pytest.raises(EncoderConfigError):
            encoder.contextualize(torch.zeros(2, 8, dtype=DTYPE))
