import numpy as np
import pytest
import torch

from ctxbias.data import LabeledDataset, SyntheticConfig, generate_synthetic


def random_dataset(rng, n=40, m=5, p=0.4, split="test"):
    labels = (rng.random((n, m)) < p).astype(np.uint8)
    ids = [f"img{i:04d}" for i in range(n)]
    return LabeledDataset(ids, labels, [f"cat{k}" for k in range(m)], split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_synthetic():
    cfg = SyntheticConfig(num_images=60, image_size=32, num_categories=6,
                          pair_specs=((0, 4, 0.9), (1, 5, 0.9)), seed=3,
                          biased_fraction=0.25, glyph_size=6)
    return generate_synthetic(cfg)


def tiny_net(m=4, seed=0, feature_dim=4):
    """Float64 network with a few hundred parameters, for gradient checks."""
    from ctxbias.model import MultiLabelNet

    torch.manual_seed(seed)
    return MultiLabelNet(m, "small", feature_dim, widths=(2, 2, 2), batchnorm=False).double()


def grad_batch(seed=0, n=6, m=4, size=12):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, size, size, generator=g, dtype=torch.float64)
    labels = np.array([[1, 1, 0, 1], [1, 0, 1, 0], [0, 1, 1, 1],
                       [1, 1, 1, 0], [0, 0, 1, 1], [1, 0, 0, 1]])[:n, :m]
    return x, torch.as_tensor(labels, dtype=torch.float64), labels


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
