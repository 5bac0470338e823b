import math

import torch
from torch import nn


def init_module_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=.02)
        if m.bias is not None:
            nn.init.constant_(m.bias, 0)
    elif isinstance(m, nn.LayerNorm):
        nn.init.constant_(m.bias, 0)
        nn.init.constant_(m.weight, 1.0)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
        fan_out //= m.groups
        m.weight.data.normal_(0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            m.bias.data.zero_()


def map_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def tokens_to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} tokens cannot form a {h}x{w} map")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


def norm_layer(dim: int, enabled: bool = True, eps: float = 1e-5) -> nn.Module:
    return nn.LayerNorm(dim, eps=eps) if enabled else nn.Identity()


def sincos_position_embedding(h: int, w: int, dim: int, temperature: float = 10000.,
                              dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2D sine/cosine embedding, shape (h*w, dim); dims beyond a multiple of 4 are zero."""
    pos_dim = dim // 4
    out = torch.zeros(h * w, dim, dtype=dtype, device=device)
    if pos_dim == 0:
        return out
    grid_h, grid_w = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                                    torch.arange(w, dtype=dtype, device=device), indexing="ij")
    omega = torch.arange(pos_dim, dtype=dtype, device=device) / pos_dim
    omega = 1. / (temperature ** omega)
    out_h = grid_h.flatten()[:, None] * omega[None]
    out_w = grid_w.flatten()[:, None] * omega[None]
    out[:, :4 * pos_dim] = torch.cat([out_h.sin(), out_h.cos(), out_w.sin(), out_w.cos()], dim=1)
    return out
