from typing import List

import torch
import torch.nn.functional as F
from torch import nn

from src.app.models.attention import MultiHeadAttention
from src.app.models.base import init_module_weights, map_to_tokens, norm_layer, tokens_to_map
from src.app.schemas import BackboneConfig


class DWConv(nn.Module):

    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 3, 1, 1, bias=True, groups=dim)

    def forward(self, x, h, w):
        return map_to_tokens(self.dwconv(tokens_to_map(x, h, w)))


class ConvFeedForward(nn.Module):

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = DWConv(hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        return self.fc2(self.act(self.dwconv(self.fc1(x), h, w)))


class SpatialReductionAttention(nn.Module):
    """Self-attention whose keys/values come from an average-pooled copy of the map."""

    def __init__(self, dim: int, heads: int, sr_ratio: int, normalize: bool = True, eps: float = 1e-5):
        super().__init__()
        self.sr_ratio = sr_ratio
        self.attn = MultiHeadAttention(dim, heads, bias=False)
        if sr_ratio > 1:
            self.sr = nn.Linear(dim, dim)
            self.norm = norm_layer(dim, normalize, eps)

    def forward(self, x, h, w):
        kv = x
        if self.sr_ratio > 1:
            pooled = F.adaptive_avg_pool2d(tokens_to_map(x, h, w),
                                           (max(1, h // self.sr_ratio), max(1, w // self.sr_ratio)))
            kv = self.norm(self.sr(map_to_tokens(pooled)))
        return self.attn(x, kv, kv)


class PyramidBlock(nn.Module):

    def __init__(self, dim, heads, ffn_expansion, sr_ratio, normalize=True, eps=1e-5):
        super().__init__()
        self.norm1 = norm_layer(dim, normalize, eps)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio, normalize, eps)
        self.norm2 = norm_layer(dim, normalize, eps)
        self.mlp = ConvFeedForward(dim, dim * ffn_expansion)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.mlp(self.norm2(x), h, w)
        return x


class OverlapPatchEmbed(nn.Module):

    def __init__(self, patch_size, stride, in_chans, embed_dim, normalize=True, eps=1e-5):
        super().__init__()
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=stride,
                              padding=patch_size // 2)
        self.norm = norm_layer(embed_dim, normalize, eps)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(map_to_tokens(x)), h, w


class PyramidBackbone(nn.Module):
    """Four-stage pyramid transformer producing maps at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList()
        in_chans = cfg.in_channels
        for i in range(4):
            dim = cfg.channels[i]
            stage = nn.Module()
            stage.patch_embed = OverlapPatchEmbed(cfg.patch_sizes[i], cfg.patch_strides[i], in_chans, dim,
                                                  cfg.normalize, cfg.eps)
            stage.blocks = nn.ModuleList([
                PyramidBlock(dim, cfg.heads[i], cfg.ffn_expansion[i], cfg.sr_ratios[i], cfg.normalize, cfg.eps)
                for _ in range(cfg.depths[i])
            ])
            stage.norm = norm_layer(dim, cfg.normalize, cfg.eps)
            self.stages.append(stage)
            in_chans = dim
        self.apply(init_module_weights)

    @property
    def out_channels(self) -> List[int]:
        return list(self.cfg.channels)

    def forward(self, bev: torch.Tensor) -> List[torch.Tensor]:
        _, _, height, width = bev.shape
        if height % 32 or width % 32:
            raise ValueError(f"BEV size {height}x{width} is not divisible by 32")
        outs = []
        x = bev
        for stage in self.stages:
            tokens, h, w = stage.patch_embed(x)
            for block in stage.blocks:
                tokens = block(tokens, h, w)
            x = tokens_to_map(stage.norm(tokens), h, w)
            outs.append(x)
        return outs
