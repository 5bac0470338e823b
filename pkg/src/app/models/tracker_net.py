from typing import List, Sequence

import numpy as np
import torch
from torch import nn

from src.app.models.backbone import PyramidBackbone
from src.app.models.decoder import DecoderOutput, PredictionSet, TwoStageDecoder, cell_center_grid
from src.app.models.encoder import MultiScaleEncoder
from src.app.models.pillar_net import PillarFeatureNet
from src.app.schemas import PillarConfig, RunConfig
from src.app.services.pillars import PillarTensor, crop_points, pillarize

FUSED_STRIDE = 4


class SiameseTracker(nn.Module):
    """Pillar encoder -> shared pyramid backbone -> multi-scale encoder -> two-stage decoder."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.pillar_net = PillarFeatureNet(out_dim=cfg.backbone.in_channels)
        self.backbone = PyramidBackbone(cfg.backbone)
        self.encoder = MultiScaleEncoder(self.backbone.out_channels, cfg.encoder)
        xs, ys = cfg.pillars.cell_centers(FUSED_STRIDE)
        area = cfg.pillars.area
        extent = max(area[3] - area[0], area[4] - area[1])
        self.decoder = TwoStageDecoder(cfg.encoder.width, cfg.decoder, cell_center_grid(xs, ys), extent)

    @property
    def config_hash(self) -> str:
        return self.cfg.config_hash

    def forward(self, template_bev: torch.Tensor, search_bev: torch.Tensor) -> DecoderOutput:
        template_feats = self.backbone(template_bev)
        search_feats = self.backbone(search_bev)
        fused = self.encoder(search_feats, template_feats)
        return self.decoder(fused)

    def bev(self, pillars: Sequence[PillarTensor]) -> torch.Tensor:
        return self.pillar_net.forward_batch(pillars)

    def pillarize_batch(self, clouds: Sequence[np.ndarray], pillar_cfg: PillarConfig) -> List[PillarTensor]:
        return [pillarize(crop_points(cloud, pillar_cfg.area), pillar_cfg, seed=self.cfg.seed) for cloud in clouds]

    def forward_points(self, templates: Sequence[np.ndarray], searches: Sequence[np.ndarray]) -> DecoderOutput:
        template_bev = self.bev(self.pillarize_batch(templates, self.cfg.template_pillars))
        search_bev = self.bev(self.pillarize_batch(searches, self.cfg.pillars))
        return self(template_bev, search_bev)

    @torch.no_grad()
    def predict(self, template: np.ndarray, search: np.ndarray) -> PredictionSet:
        was_training = self.training
        self.eval()
        out = self.forward_points([template], [search])
        self.train(was_training)
        return out.predictions.sample(0)
