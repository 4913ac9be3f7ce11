import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from translearn.datamodel import SyntheticConfig, generate_synthetic, load_dataset
from translearn.networks import FeatureLearner, Generator, NetworkBundle, PatchDiscriminator, ArchConfig


def central_fd(fn, params, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every element of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(fn())
                flat[k] = orig - h
                down = float(fn())
                flat[k] = orig
                gflat[k] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def max_rel_error(fn, params, h=1e-6, floor=1e-3):
    """Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor * scale),
    where scale = max(1, largest |analytic| entry).

    A small step keeps the stencil off ReLU kinks; the floor stops exactly-zero
    gradients (biases feeding an instance norm) from turning rounding noise
    into a large ratio.
    """
    params = list(params)
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    numeric = central_fd(fn, params, h)
    floor = floor * max(1.0, max(float(a.abs().max()) for a in analytic))
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


class TinyEmbedder(nn.Module):
    """Stand-in SiaNet: conv -> FC -> unit norm (well under 1k parameters)."""

    def __init__(self, h=16, w=8, dim=6):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 4, stride=2, padding=1)
        self.fc = nn.Linear(4 * (h // 4) * (w // 4), dim)

    def forward(self, x):
        z = F.max_pool2d(F.leaky_relu(self.conv(x), 0.2), 2)
        return F.normalize(self.fc(z.flatten(1)), dim=1)


class TinyBackbone(nn.Module):
    def __init__(self, channels=6):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 4, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(4, channels, 3, padding=1)
        self.out_channels = channels

    def forward(self, x):
        return torch.tanh(self.conv2(torch.tanh(self.conv1(x))))


def tiny_bundle(num_classes=3, seed=0, dtype=torch.float64, h=16, w=8) -> NetworkBundle:
    torch.manual_seed(seed)
    G = Generator(ngf=1, n_blocks=1)
    F_ = Generator(ngf=1, n_blocks=1)
    D_T, D_S = PatchDiscriminator(ndf=2, n_layers=1), PatchDiscriminator(ndf=2, n_layers=1)
    M = TinyEmbedder(h, w)
    C = FeatureLearner(num_classes, TinyBackbone(), dropout=0.0)
    for net in (G, F_, D_T, D_S):
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0, 0.5)
                nn.init.normal_(m.bias, 0, 0.1)
    bundle = NetworkBundle(G, F_, D_T, D_S, M, C, ArchConfig((h, w), num_classes))
    return bundle.to(dtype)


@pytest.fixture
def tiny():
    return tiny_bundle()


@pytest.fixture
def images64():
    torch.manual_seed(1)
    return (torch.rand(2, 3, 16, 8, dtype=torch.float64) * 2 - 1), (torch.rand(2, 3, 16, 8, dtype=torch.float64) * 2 - 1)


SMALL_SYNTH = SyntheticConfig(num_identities=4, images_per_identity_per_domain=6, num_test_identities=4,
                              query_per_identity=2, gallery_per_identity=3, num_distractors=2, rng_seed=3)


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    records = generate_synthetic(SMALL_SYNTH, root)
    return root, records


@pytest.fixture(scope="session")
def small_domains(small_synthetic):
    root, _ = small_synthetic
    return load_dataset(root / "source", "synthetic", "source"), load_dataset(root / "target", "synthetic", "target")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria outcomes, filled by test_acceptance and printed at the end of the run
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title} ({detail})")
