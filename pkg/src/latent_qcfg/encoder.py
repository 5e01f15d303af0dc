"""Source-side encoder: word embeddings, optional BiLSTM context, TreeLSTM.

Produces one d-dimensional representation per tree node.  Without the
BiLSTM option a node's representation depends only on its yield, which
keeps node-level alignments interpretable; with it, representations see
the whole sentence.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
from torch import nn

from .core import BinarySourceTree
from .numerics import DTYPE


class EncoderConfigError(ValueError):
    pass


def _xavier_linear(linear: nn.Linear) -> None:
    nn.init.xavier_uniform_(linear.weight)
    nn.init.zeros_(linear.bias)


class BinaryTreeLstmCell(nn.Module):
    """Binary TreeLSTM cell with per-child forget gates.

    One cell serves leaves and internal nodes: leaves get their token
    vector as input with zero child states, internal nodes get a zero
    input with their children's (h, c) states.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        # Gates i, o, u plus one forget gate per child; the slices of the
        # weight acting on h_left and h_right are the distinct per-child
        # matrices.
        self.gates = nn.Linear(3 * dim, 5 * dim)
        _xavier_linear(self.gates)

    def forward(self, x, h_left, c_left, h_right, c_right):
        z = self.gates(torch.cat([x, h_left, h_right], dim=-1))
        i, o, u, f_l, f_r = z.chunk(5, dim=-1)
        c = torch.sigmoid(i) * torch.tanh(u) + torch.sigmoid(f_l) * c_left + torch.sigmoid(f_r) * c_right
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class TreeEncoder(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        dim: int,
        use_bilstm: bool = False,
        use_emphasis: bool = False,
    ):
        super().__init__()
        self.dim = dim
        self.use_bilstm = use_bilstm
        self.use_emphasis = use_emphasis
        self.embedding = nn.Embedding(vocab_size, dim)
        nn.init.xavier_uniform_(self.embedding.weight)
        if use_emphasis:
            self.emphasis_embedding = nn.Embedding(2, dim)
            nn.init.xavier_uniform_(self.emphasis_embedding.weight)
        if use_bilstm:
            self.bilstm = nn.LSTM(dim, dim, batch_first=True, bidirectional=True)
            self.bilstm_proj = nn.Linear(2 * dim, dim)
            _xavier_linear(self.bilstm_proj)
        self.cell = BinaryTreeLstmCell(dim)
        self.to(DTYPE)

    def embed_tokens(self, token_ids: Sequence[int], emphasis: Optional[Sequence[bool]] = None) -> torch.Tensor:
        """S x d embedding matrix, with the emphasis flag embedding added when given."""
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        if (ids < 0).any() or (ids >= self.embedding.num_embeddings).any():
            raise EncoderConfigError("token id out of range")
        out = self.embedding(ids)
        if emphasis is not None:
            if not self.use_emphasis:
                raise EncoderConfigError("emphasis flags given but emphasis embeddings disabled")
            if len(emphasis) != len(token_ids):
                raise EncoderConfigError("emphasis length mismatch")
            flags = torch.as_tensor([int(b) for b in emphasis], dtype=torch.long)
            out = out + self.emphasis_embedding(flags)
        return out

    def contextualize(self, embeddings: torch.Tensor) -> torch.Tensor:
        """BiLSTM pass over the sentence, projected back down to d."""
        if not self.use_bilstm:
            raise EncoderConfigError("BiLSTM weights not configured")
        hidden, _ = self.bilstm(embeddings.unsqueeze(0))
        return self.bilstm_proj(hidden.squeeze(0))

    def encode_tree(self, tree: BinarySourceTree, leaf_vectors: torch.Tensor) -> torch.Tensor:
        """(2S-1) x d node representations in node-index order."""
        if leaf_vectors.shape[0] != tree.sentence_length:
            raise EncoderConfigError("leaf vector rows do not match tree leaves")
        zero = leaf_vectors.new_zeros(self.dim)
        hs: list[torch.Tensor] = []
        cs: list[torch.Tensor] = []
        # Children always precede parents in node-index order.
        for idx, node in enumerate(tree.nodes):
            if node.is_leaf:
                h, c = self.cell(leaf_vectors[idx], zero, zero, zero, zero)
            else:
                h, c = self.cell(zero, hs[node.left], cs[node.left], hs[node.right], cs[node.right])
            hs.append(h)
            cs.append(c)
        return torch.stack(hs)

    def node_representations(
        self,
        tree: BinarySourceTree,
        emphasis: Optional[Sequence[bool]] = None,
    ) -> torch.Tensor:
        vecs = self.embed_tokens(tree.leaves, emphasis)
        if self.use_bilstm:
            vecs = self.contextualize(vecs)
        return self.encode_tree(tree, vecs)
