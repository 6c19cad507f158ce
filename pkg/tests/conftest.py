import numpy as np
import pytest
import torch

from partreid.config import TrainConfig
from partreid.synthetic import DataConfig, make_splits

TINY_DATA = DataConfig(seed=5, n_train_ids=4, n_eval_ids=2, samples_per_id=4, query_per_id=1, n_cameras=2)
TINY_TRAIN = TrainConfig(
    epochs=10, warmup_epochs=2, decay_epochs=(6, 8), eval_every=5,
    base_lr=3.5e-3, warmup_start_lr=3.5e-4, decay_lrs=(3.5e-4, 3.5e-5),
    n_ids=2, n_per_id=2, feat_channels=16, mid_channels=8, embed_dim=8, encoder_widths=(4, 8, 8),
)


@pytest.fixture(scope="session")
def tiny_splits():
    return make_splits(TINY_DATA)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def central_difference(f, x: torch.Tensor, step: float, indices=None) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. tensor ``x`` (perturbed in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    for i in (range(flat.numel()) if indices is None else indices):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + step
            up = float(f())
            flat[i] = orig - step
            down = float(f())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / b.norm().clamp_min(1e-30))


def brute_force_triplet(parts: np.ndarray, ids: np.ndarray, margin: float) -> float:
    """O(n^2) enumeration: mean over anchors with a positive of [max d_ap - min d_an + margin]_+."""
    n, x, _ = parts.shape

    def d(i, j):
        return sum(float(np.sqrt(np.sum((parts[i, k] - parts[j, k]) ** 2))) for k in range(x)) / x

    losses = []
    for a in range(n):
        pos = [d(a, p) for p in range(n) if p != a and ids[p] == ids[a]]
        neg = [d(a, q) for q in range(n) if ids[q] != ids[a]]
        if not pos:
            continue
        losses.append(max(0.0, max(pos) - min(neg) + margin))
    return sum(losses) / len(losses)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
