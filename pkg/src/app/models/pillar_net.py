from typing import Sequence

import torch
from torch import nn

from src.app.services.pillars import DECORATED_DIMS, PillarTensor


class PillarFeatureNet(nn.Module):
    """
    A simplified PointNet that encodes the pillar features and scatters them to a dense BEV map
    """

    def __init__(self, in_dim: int = DECORATED_DIMS, out_dim: int = 32):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.linear = nn.Linear(in_dim, out_dim)
        self.act = nn.ReLU()

    def forward(self, features: torch.Tensor, coords: torch.Tensor, mask: torch.Tensor,
                grid_size: Sequence[int]) -> torch.Tensor:
        nx, ny = grid_size
        canvas = features.new_zeros(self.out_dim, nx * ny)
        if features.shape[0] == 0:
            return canvas.view(self.out_dim, nx, ny)

        x = self.act(self.linear(features))                            # (P, M, C)
        x = x.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        pooled = x.max(dim=1).values                                   # (P, C)

        flat = coords[:, 0] * ny + coords[:, 1]
        canvas = canvas.index_copy(1, flat, pooled.transpose(0, 1))
        return canvas.view(self.out_dim, nx, ny)

    def forward_batch(self, pillars: Sequence[PillarTensor]) -> torch.Tensor:
        param = self.linear.weight
        maps = []
        for pt in pillars:
            maps.append(self(
                torch.as_tensor(pt.features, dtype=param.dtype, device=param.device),
                torch.as_tensor(pt.coords, dtype=torch.long, device=param.device),
                torch.as_tensor(pt.mask, dtype=torch.bool, device=param.device),
                pt.grid_size,
            ))
        return torch.stack(maps)
