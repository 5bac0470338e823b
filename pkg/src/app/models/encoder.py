from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from src.app.models.attention import AttentionBlock
from src.app.models.base import init_module_weights, map_to_tokens, sincos_position_embedding, tokens_to_map
from src.app.schemas import EncoderConfig

ALT_SIMILARITIES = ("cosine", "euclidean", "xcorr")


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return x if factor == 1 else F.interpolate(x, scale_factor=factor, mode="nearest")


def similarity_map(search: torch.Tensor, template: torch.Tensor, kind: str) -> torch.Tensor:
    """Per-search-pixel similarity against the template, shape (B, 1, Hs, Ws).

    cosine: best cosine similarity over template pixels.
    euclidean: smallest channel-space distance to a template pixel.
    xcorr: template used as a correlation kernel, normalised by its element count.
    """
    if search.shape[1] != template.shape[1]:
        raise ValueError(f"channel mismatch {search.shape[1]} vs {template.shape[1]}")
    b, c, hs, ws = search.shape
    _, _, ht, wt = template.shape
    if kind == "cosine":
        s = F.normalize(map_to_tokens(search), dim=-1)
        t = F.normalize(map_to_tokens(template), dim=-1)
        sim = (s @ t.transpose(1, 2)).max(dim=-1).values
        return sim.view(b, 1, hs, ws)
    if kind == "euclidean":
        s, t = map_to_tokens(search), map_to_tokens(template)
        squared = ((s[:, :, None, :] - t[:, None, :, :]) ** 2).sum(-1)
        dist = squared.min(dim=-1).values.clamp_min(1e-12).sqrt()
        return dist.view(b, 1, hs, ws)
    if kind == "xcorr":
        corr = F.conv2d(search.reshape(1, b * c, hs, ws), template, padding="same", groups=b)
        return corr.view(b, 1, hs, ws) / (c * ht * wt)
    raise ValueError(f"Unknown similarity kind '{kind}'")


class CrossSimilarity(nn.Module):
    """Search pixels attend over template pixels after a shared 1x1 projection."""

    def __init__(self, in_channels: int, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, cfg.width, 1)
        self.blocks = nn.ModuleList([AttentionBlock(cfg.width, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)])
        self.positional = cfg.positional_encoding
        self.apply(init_module_weights)

    def forward(self, search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
        e_s, e_t = self.proj(search), self.proj(template)
        _, c, hs, ws = e_s.shape
        _, _, ht, wt = e_t.shape
        x, memory = map_to_tokens(e_s), map_to_tokens(e_t)
        query_pos = memory_pos = None
        if self.positional:
            query_pos = sincos_position_embedding(hs, ws, c, dtype=x.dtype, device=x.device)
            memory_pos = sincos_position_embedding(ht, wt, c, dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x = block(x, memory, query_pos, memory_pos)
        return tokens_to_map(x, hs, ws)


class AltSimilarity(nn.Module):
    """Non-attention similarity multiplied onto the projected search feature."""

    def __init__(self, in_channels: int, cfg: EncoderConfig, kind: str):
        super().__init__()
        if kind not in ALT_SIMILARITIES:
            raise ValueError(f"Unknown similarity kind '{kind}'")
        self.kind = kind
        self.proj = nn.Conv2d(in_channels, cfg.width, 1)
        self.apply(init_module_weights)

    def forward(self, search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
        e_s, e_t = self.proj(search), self.proj(template)
        sim = similarity_map(e_s, e_t, self.kind)
        weight = torch.exp(-sim) if self.kind == "euclidean" else sim
        return e_s * weight


def make_similarity(in_channels: int, cfg: EncoderConfig) -> nn.Module:
    if cfg.similarity == "attention":
        return CrossSimilarity(in_channels, cfg)
    return AltSimilarity(in_channels, cfg, cfg.similarity)


class TopDownFusion(nn.Module):
    """P'_5 = P_5; P'_{i-1} = Conv3x3(Conv1x1(P_{i-1}) + Upsample(P'_i))."""

    def __init__(self, width: int, levels: int = 4):
        super().__init__()
        self.lateral = nn.ModuleList([nn.Conv2d(width, width, 1) for _ in range(levels - 1)])
        self.smooth = nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in range(levels - 1)])
        self.apply(init_module_weights)

    def forward(self, features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        outs = list(features)
        for i in range(len(outs) - 1, 0, -1):
            outs[i - 1] = self.smooth[i - 1](self.lateral[i - 1](outs[i - 1]) + upsample(outs[i], 2))
        return outs


class ScaleMerge(nn.Module):
    """Upsample to the finest scale, concatenate, fuse with a 1x1 conv."""

    def __init__(self, width: int, levels: int = 4):
        super().__init__()
        self.fuse = nn.Conv2d(width * levels, width, 1)
        self.apply(init_module_weights)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        ups = [upsample(f, 2 ** i) for i, f in enumerate(features)]
        return self.fuse(torch.cat(ups, dim=1))


class MultiScaleEncoder(nn.Module):
    """Cross-branch similarity per scale, top-down propagation, scale merge and self-attention.

    `fusion` selects the wiring:
      late  - similarity at every scale, then propagation and merge
      early - propagation and merge per branch, then a single similarity
      c2/c5 - similarity on the finest / coarsest scale only
    Every wiring returns a map at the stride-4 resolution.
    """

    def __init__(self, in_channels: Sequence[int], cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = cfg.fusion
        width = cfg.width
        if self.fusion == "late":
            self.similarities = nn.ModuleList([make_similarity(c, cfg) for c in in_channels])
            self.fpn = TopDownFusion(width)
            self.merge = ScaleMerge(width)
        elif self.fusion == "early":
            self.branch_proj = nn.ModuleList([nn.Conv2d(c, width, 1) for c in in_channels])
            self.fpn = TopDownFusion(width)
            self.merge = ScaleMerge(width)
            self.similarity = make_similarity(width, cfg)
        elif self.fusion == "c2":
            self.similarity = make_similarity(in_channels[0], cfg)
        elif self.fusion == "c5":
            self.similarity = make_similarity(in_channels[-1], cfg)
        else:
            raise ValueError(f"Unknown fusion strategy '{self.fusion}'")
        self.self_attn = AttentionBlock(width, cfg.heads, cfg.ffn_dim)
        self.apply(init_module_weights)

    def _merge_branch(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        projected = [proj(f) for proj, f in zip(self.branch_proj, features)]
        return self.merge(self.fpn(projected))

    def fuse_scales(self, search: Sequence[torch.Tensor], template: Sequence[torch.Tensor]) -> torch.Tensor:
        if self.fusion == "late":
            sims = [sim(s, t) for sim, s, t in zip(self.similarities, search, template)]
            return self.merge(self.fpn(sims))
        if self.fusion == "early":
            return self.similarity(self._merge_branch(search), self._merge_branch(template))
        if self.fusion == "c2":
            return self.similarity(search[0], template[0])
        factor = search[0].shape[-1] // search[-1].shape[-1]
        return upsample(self.similarity(search[-1], template[-1]), factor)

    def forward(self, search: Sequence[torch.Tensor], template: Sequence[torch.Tensor]) -> torch.Tensor:
        u = self.fuse_scales(search, template)
        _, c, h, w = u.shape
        x = map_to_tokens(u)
        pos = None
        if self.cfg.positional_encoding:
            pos = sincos_position_embedding(h, w, c, dtype=x.dtype, device=x.device)
        return tokens_to_map(self.self_attn(x, query_pos=pos), h, w)
