import numpy as np
import pytest
import torch

from src.app.models.pillar_net import PillarFeatureNet
from src.app.schemas import PillarConfig
from src.app.services.pillars import as_point_cloud, crop_points, pillar_indices, pillarize


def random_cloud(rng, n, cfg: PillarConfig):
    low, high = np.array(cfg.area[:3]), np.array(cfg.area[3:])
    xyz = rng.uniform(low, high, (n, 3))
    return np.concatenate([xyz, rng.uniform(0, 1, (n, 1))], axis=1)


class TestPillarize:
    def test_car_grid(self):
        assert PillarConfig().grid_size == (64, 64)

    def test_crop_half_open(self):
        cfg = PillarConfig()
        pts = np.array([[3.2, 0.0, 0.0, 0.0], [-3.2, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
        assert np.array_equal(crop_points(pts, cfg.area), pts[1:2])

    def test_partition(self, rng):
        cfg = PillarConfig()
        for _ in range(20):
            cloud = random_cloud(rng, int(rng.integers(1, 400)), cfg)
            pt = pillarize(cloud, cfg)
            assert pt.mask.sum() == len(cloud)
            keys = pt.coords[:, 0] * 64 + pt.coords[:, 1]
            assert len(np.unique(keys)) == pt.num_pillars
            expected = {tuple(c) for c in pillar_indices(cloud, cfg)}
            assert {tuple(c) for c in pt.coords} == expected

    def test_points_land_in_their_cell(self, rng):
        cfg = PillarConfig()
        pt = pillarize(random_cloud(rng, 200, cfg), cfg)
        for row in range(pt.num_pillars):
            ix, iy = pt.coords[row]
            xs = pt.features[row, pt.mask[row], 0]
            ys = pt.features[row, pt.mask[row], 1]
            assert np.all(np.floor((xs + 3.2) / 0.1) == ix)
            assert np.all(np.floor((ys + 3.2) / 0.1) == iy)

    def test_point_cap_is_seeded(self):
        cfg = PillarConfig(max_points_per_pillar=2)
        pts = np.array([[0.01 * i, 0.01, 0.0, 0.0] for i in range(5)])
        a, b = pillarize(pts, cfg, seed=3), pillarize(pts, cfg, seed=3)
        assert a.mask.sum() == 2
        assert np.array_equal(a.features, b.features)

    def test_pillar_cap(self, rng):
        cfg = PillarConfig(max_pillars=10)
        pt = pillarize(random_cloud(rng, 500, cfg), cfg)
        assert pt.num_pillars == 10

    def test_decoration(self):
        cfg = PillarConfig()
        pts = np.array([[0.01, 0.02, 0.5, 0.3], [0.03, 0.08, -0.5, 0.6]])
        pt = pillarize(pts, cfg)
        feats = pt.features[0, :2]
        assert np.allclose(feats[:, :4], pts)
        assert np.allclose(feats[:, 4:7].sum(axis=0), 0.0)
        assert np.allclose(feats[:, 7:10], pts[:, :3] - np.array([0.05, 0.05, -1.0]))

    def test_empty(self):
        pt = pillarize(np.zeros((0, 4)), PillarConfig())
        assert pt.num_pillars == 0
        assert pt.features.shape == (0, 32, 10)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            as_point_cloud(np.zeros((3, 3)))

    def test_grid_must_divide(self):
        with pytest.raises(ValueError):
            PillarConfig(pillar_size=(0.3, 0.3, 4.0))


class TestPillarFeatureNet:
    def test_scatter(self):
        cfg = PillarConfig()
        net = PillarFeatureNet(out_dim=4)
        with torch.no_grad():
            net.linear.weight.zero_()
            net.linear.bias.fill_(1.0)
        pt = pillarize(np.array([[0.07, -3.15, 0.0, 1.0]]), cfg)
        bev = net.forward_batch([pt])
        assert bev.shape == (1, 4, 64, 64)
        assert torch.nonzero(bev[0].sum(0)).tolist() == [[32, 0]]
        assert torch.all(bev[0, :, 32, 0] == 1.0)

    def test_empty_is_zero(self):
        net = PillarFeatureNet(out_dim=4)
        bev = net.forward_batch([pillarize(np.zeros((0, 4)), PillarConfig())])
        assert torch.count_nonzero(bev) == 0

    def test_masked_points_are_ignored(self):
        torch.manual_seed(0)
        net = PillarFeatureNet(out_dim=8)
        features = torch.randn(1, 3, 10)
        mask = torch.tensor([[True, False, False]])
        full = net(features, torch.tensor([[0, 0]]), mask, (4, 4))
        features[0, 1:] = 1e6
        assert torch.equal(full, net(features, torch.tensor([[0, 0]]), mask, (4, 4)))

    def test_point_order_within_pillar(self):
        torch.manual_seed(2)
        net = PillarFeatureNet(out_dim=8)
        features = torch.randn(3, 5, 10)
        mask = torch.ones(3, 5, dtype=torch.bool)
        mask[1, 3:] = False
        coords = torch.tensor([[0, 1], [2, 2], [3, 0]])
        perm = torch.tensor([4, 2, 0, 3, 1])
        base = net(features, coords, mask, (4, 4))
        shuffled = net(features[:, perm], coords, mask[:, perm], (4, 4))
        assert torch.allclose(base, shuffled, atol=1e-6)

    def test_gradient(self, rng, gradient_error):
        torch.manual_seed(1)
        cfg = PillarConfig(area=(-1.6, -1.6, -2.0, 1.6, 1.6, 2.0), pillar_size=(0.1, 0.1, 4.0))
        net = PillarFeatureNet(out_dim=8).double()
        pt = pillarize(random_cloud(rng, 60, cfg), cfg)
        features = torch.tensor(pt.features, requires_grad=True)
        coords, mask = torch.tensor(pt.coords), torch.tensor(pt.mask)
        weight = torch.randn(8, 32, 32, dtype=torch.float64)

        def loss():
            return (net(features, coords, mask, pt.grid_size) * weight).sum()

        assert gradient_error(loss, [features, *net.parameters()]) < 1e-3
