import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
from torch import nn

from src.app.models.attention import AttentionBlock
from src.app.models.base import init_module_weights, map_to_tokens
from src.app.schemas import DecoderConfig
from src.app.services.geometry import Box3D

BOX_DIMS = 5  # x, y, z, sin(yaw), cos(yaw)


@dataclass
class StageOneOutput:
    logits: torch.Tensor  # (B, N)
    boxes: torch.Tensor  # (B, N, 5), x/y already include the cell centre


@dataclass
class TargetQueries:
    queries: torch.Tensor  # (B, k, C)
    boxes: torch.Tensor  # (B, k, 5)
    features: torch.Tensor  # (B, k, C)
    indices: torch.Tensor  # (B, k)


@dataclass
class PredictionSet:
    boxes: torch.Tensor  # (..., k, 5)
    logits: torch.Tensor  # (..., k)

    @property
    def scores(self) -> torch.Tensor:
        return self.logits.sigmoid()

    def __len__(self) -> int:
        return self.logits.shape[-1]

    def sample(self, i: int) -> "PredictionSet":
        return PredictionSet(self.boxes[i], self.logits[i])


@dataclass
class DecoderOutput:
    stage_one: StageOneOutput | None
    predictions: PredictionSet


def box_sine_embedding(xyz: torch.Tensor, num_bands: int, extent: float) -> torch.Tensor:
    """Sine/cosine bands per coordinate; band m has angular frequency pi * 2^m / extent."""
    freqs = math.pi * (2.0 ** torch.arange(num_bands, dtype=xyz.dtype, device=xyz.device)) / extent
    phase = xyz[..., None] * freqs                                   # (..., 3, bands)
    return torch.cat([phase.sin(), phase.cos()], dim=-1).flatten(-2)  # (..., 3 * 2 * bands)


def select_topk(stage_one: StageOneOutput, tokens: torch.Tensor, k: int):
    """Top-k locations by score; ties go to the smaller flattened index."""
    n = stage_one.logits.shape[-1]
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available locations")
    order = torch.sort(stage_one.logits, dim=-1, descending=True, stable=True).indices
    indices = order[:, :k]
    boxes = torch.gather(stage_one.boxes, 1, indices[..., None].expand(-1, -1, stage_one.boxes.shape[-1]))
    features = torch.gather(tokens, 1, indices[..., None].expand(-1, -1, tokens.shape[-1]))
    return boxes, features, indices


class TwoStageDecoder(nn.Module):

    def __init__(self, width: int, cfg: DecoderConfig, cell_centers: torch.Tensor, extent: float):
        super().__init__()
        self.cfg = cfg
        self.width = width
        self.extent = extent
        self.register_buffer("cell_centers", cell_centers.clone(), persistent=False)
        self.score_head_1 = nn.Linear(width, 1)
        self.box_head_1 = nn.Linear(width, BOX_DIMS)
        embed_dim = 3 * 2 * cfg.num_bands
        self.query_proj = nn.Linear(width + embed_dim, width)
        if not cfg.two_stage:
            self.query_embed = nn.Embedding(cfg.k, width)
        self.blocks = nn.ModuleList([AttentionBlock(width, cfg.heads, cfg.ffn_dim) for _ in range(cfg.depth)])
        self.score_head_2 = nn.Linear(width, 1)
        self.box_head_2 = nn.Linear(width, BOX_DIMS)
        self.apply(init_module_weights)
        if not cfg.two_stage:
            nn.init.normal_(self.query_embed.weight)

    def stage_one(self, tokens: torch.Tensor) -> StageOneOutput:
        if tokens.shape[1] != self.cell_centers.shape[0]:
            raise ValueError(f"{tokens.shape[1]} tokens for {self.cell_centers.shape[0]} cell centres")
        logits = self.score_head_1(tokens).squeeze(-1)
        raw = self.box_head_1(tokens)
        offset = torch.zeros_like(raw)
        offset[..., :2] = self.cell_centers.to(raw.dtype)
        return StageOneOutput(logits, raw + offset)

    def make_queries(self, boxes: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        embed = box_sine_embedding(boxes[..., :3], self.cfg.num_bands, self.extent)
        return self.query_proj(torch.cat([features, embed], dim=-1))

    def decode(self, queries: torch.Tensor, memory: torch.Tensor, reference: torch.Tensor) -> PredictionSet:
        x = queries
        for block in self.blocks:
            x = block(x, memory)
        logits = self.score_head_2(x).squeeze(-1)
        raw = self.box_head_2(x)
        base = torch.zeros_like(raw)
        base[..., :3] = reference[..., :3]
        return PredictionSet(raw + base, logits)

    def forward(self, fused: torch.Tensor) -> DecoderOutput:
        tokens = map_to_tokens(fused)
        if not self.cfg.two_stage:
            b = tokens.shape[0]
            queries = self.query_embed.weight[None].expand(b, -1, -1)
            reference = tokens.new_zeros(b, self.cfg.k, BOX_DIMS)
            return DecoderOutput(None, self.decode(queries, tokens, reference))
        s1 = self.stage_one(tokens)
        boxes, features, _ = select_topk(s1, tokens, self.cfg.k)
        boxes = boxes.detach()
        queries = self.make_queries(boxes, features)
        return DecoderOutput(s1, self.decode(queries, features, boxes))


def pick_best(predictions: PredictionSet, known_size: Tuple[float, float, float]) -> Box3D:
    """Highest-scoring box of one unbatched set, yaw from atan2, size copied from the target."""
    if predictions.logits.numel() == 0:
        raise ValueError("Cannot pick from an empty prediction set")
    best = int(torch.argmax(predictions.logits))
    x, y, z, s, c = (float(v) for v in predictions.boxes[best])
    w, l, h = known_size
    return Box3D(x, y, z, w, l, h, math.atan2(s, c))


def queries_from_proposals(decoder: TwoStageDecoder, fused: torch.Tensor) -> TargetQueries:
    tokens = map_to_tokens(fused)
    s1 = decoder.stage_one(tokens)
    boxes, features, indices = select_topk(s1, tokens, decoder.cfg.k)
    return TargetQueries(decoder.make_queries(boxes.detach(), features), boxes, features, indices)


def cell_center_grid(xs: Sequence[float], ys: Sequence[float]) -> torch.Tensor:
    gx, gy = torch.meshgrid(torch.tensor(xs, dtype=torch.float64), torch.tensor(ys, dtype=torch.float64),
                            indexing="ij")
    return torch.stack([gx.flatten(), gy.flatten()], dim=1)
