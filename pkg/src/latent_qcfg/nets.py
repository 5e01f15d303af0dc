"""Shared feedforward blocks for rule scoring."""

from __future__ import annotations

import torch
from torch import nn


class ResidualBlock(nn.Module):
    """relu(V(relu(Ux + c)) + d) + x"""

    def __init__(self, dim: int):
        super().__init__()
        self.inner = nn.Linear(dim, dim)
        self.outer = nn.Linear(dim, dim)
        nn.init.xavier_uniform_(self.inner.weight)
        nn.init.zeros_(self.inner.bias)
        nn.init.xavier_uniform_(self.outer.weight)
        nn.init.zeros_(self.outer.bias)

    def forward(self, x):
        return torch.relu(self.outer(torch.relu(self.inner(x)))) + x


class ResidualFeedforward(nn.Module):
    """Affine map followed by three residual blocks; preserves dimension."""

    def __init__(self, dim: int, num_blocks: int = 3):
        super().__init__()
        self.affine = nn.Linear(dim, dim)
        nn.init.xavier_uniform_(self.affine.weight)
        nn.init.zeros_(self.affine.bias)
        self.blocks = nn.ModuleList(ResidualBlock(dim) for _ in range(num_blocks))

    def forward(self, x):
        x = self.affine(x)
        for block in self.blocks:
            x = block(x)
        return x
