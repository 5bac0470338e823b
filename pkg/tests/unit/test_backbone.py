import pytest
import torch

from src.app.models.backbone import PyramidBackbone, SpatialReductionAttention
from src.app.schemas import BackboneConfig


class TestPyramidBackbone:
    def test_stage_strides(self):
        backbone = PyramidBackbone(BackboneConfig())
        outs = backbone(torch.randn(2, 32, 64, 64))
        assert [o.shape for o in outs] == [
            (2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]
        assert backbone.out_channels == [16, 32, 64, 128]

    def test_smallest_legal_input(self):
        outs = PyramidBackbone(BackboneConfig())(torch.randn(1, 32, 32, 32))
        assert outs[-1].shape[-2:] == (1, 1)

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            PyramidBackbone(BackboneConfig())(torch.randn(1, 32, 48, 48))

    def test_full_preset(self):
        cfg = BackboneConfig(preset="pvtv2-b2-paper")
        assert cfg.channels == (64, 128, 320, 512)
        assert cfg.depths == (3, 4, 6, 3)

    def test_bad_strides(self):
        with pytest.raises(ValueError):
            BackboneConfig(patch_strides=(2, 2, 2, 2))

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            BackboneConfig(heads=(3, 2, 4, 8))

    def test_reduction_keeps_token_count(self):
        sra = SpatialReductionAttention(16, 2, sr_ratio=4)
        assert sra(torch.randn(1, 64, 16), 8, 8).shape == (1, 64, 16)

    def test_gradient(self, gradient_error):
        torch.manual_seed(0)
        backbone = PyramidBackbone(BackboneConfig()).double()
        bev = torch.randn(1, 32, 32, 32, dtype=torch.float64, requires_grad=True)
        weights = [torch.randn(o.shape, dtype=torch.float64) for o in backbone(bev.detach())]

        def loss():
            return sum((o * w).sum() for o, w in zip(backbone(bev), weights))

        assert gradient_error(loss, [bev, *backbone.parameters()]) < 1e-3

    def test_bitwise_deterministic(self):
        bev = torch.randn(1, 32, 32, 32)
        outs = []
        for _ in range(2):
            torch.manual_seed(7)
            outs.append(PyramidBackbone(BackboneConfig())(bev))
        assert all(torch.equal(a, b) for a, b in zip(*outs))
