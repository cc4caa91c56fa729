import numpy as np
import pytest

from cloudlstm import intactness
from cloudlstm.tensor import Tensor

# PASS/FAIL lines appended by the acceptance suite
ACCEPTANCE: list[str] = []


def numeric_grad(f, arr: np.ndarray, positions, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at flat ``positions``."""
    flat = arr.reshape(-1)
    out = np.empty(len(positions))
    for i, p in enumerate(positions):
        orig = flat[p]
        flat[p] = orig + h
        up = f()
        flat[p] = orig - h
        down = f()
        flat[p] = orig
        out[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build_loss, tensors: dict[str, Tensor], samples: int | None = None, seed: int = 0,
              h: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and finite differences per named tensor.

    ``build_loss`` rebuilds the graph from the tensors' current data and
    returns a scalar Tensor. With ``samples`` set, only that many random
    entries per tensor are probed.
    """
    for t in tensors.values():
        t.grad = None
    loss = build_loss()
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)).copy() for k, t in tensors.items()}
    rng = np.random.default_rng(seed)
    errs = {}
    for name, t in tensors.items():
        n = t.size
        pos = np.arange(n) if samples is None or samples >= n else rng.choice(n, samples, replace=False)
        num = numeric_grad(lambda: build_loss().item(), t.data, pos, h)
        errs[name] = rel_err(analytic[name].reshape(-1)[pos], num)
    return errs


def random_features(rng, lead, n, h=1, l=2):
    vals = rng.normal(size=tuple(lead) + (n, h))
    coords = rng.uniform(size=tuple(lead) + (n, l))
    return np.concatenate([vals, coords], axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(items):
    # acceptance last, so its intactness tally covers the rest of the suite
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    checks, violations = intactness.totals()
    terminalreporter.write_line(
        f"point-count checks: {checks} performed, {violations} violations"
    )
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
