import numpy as np
import pytest
import torch

from src.app.models.tracker_net import SiameseTracker
from src.app.schemas import RunConfig, ScenarioConfig
from src.app.services.geometry import Box3D
from src.app.services.synthdata import generate_sequence

# 32x32 search grid so that a full forward pass stays fast on CPU
TINY_CONFIG = """\
pillars.pillar_size = 0.2,0.2,4
decoder.k = 16
training.max_steps = 3
training.batch_size = 2
training.log_every = 1
data.train_sequences = 2
data.eval_sequences = 1
scenario.n_frames = 3
scenario.points_on_target = 64
scenario.clutter_points = 16
"""


def relative_gradient_error(loss_fn, tensors, entries=20, eps=1e-5, seed=0):
    """Norm-wise relative error between autograd and central differences on random entries."""
    tensors = [t for t in tensors if t.requires_grad]
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, tensors)]
    gen = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([t.numel() for t in tensors], dtype=torch.float64)
    analytic, numeric = [], []
    for _ in range(entries):
        which = int(torch.multinomial(sizes, 1, generator=gen))
        flat = tensors[which].data.view(-1)
        idx = int(torch.randint(flat.numel(), (1,), generator=gen))
        original = flat[idx].item()
        with torch.no_grad():
            flat[idx] = original + eps
            plus = float(loss_fn())
            flat[idx] = original - eps
            minus = float(loss_fn())
            flat[idx] = original
        numeric.append((plus - minus) / (2 * eps))
        analytic.append(float(grads[which].reshape(-1)[idx]))
    a, n = torch.tensor(analytic), torch.tensor(numeric)
    scale = float(a.norm() + n.norm())
    if scale < 1e-10:
        return 0.0
    return float((a - n).norm()) / scale


@pytest.fixture
def gradient_error():
    return relative_gradient_error


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return RunConfig.from_text(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    return SiameseTracker(tiny_config)


@pytest.fixture
def car_box():
    return Box3D(10.0, 0.0, 0.0, 1.8, 4.2, 1.6, 0.0)


@pytest.fixture
def scenario():
    return ScenarioConfig(n_frames=4, points_on_target=128, clutter_points=32, seed=7)


@pytest.fixture
def sample_sequence(scenario):
    return generate_sequence(scenario)
