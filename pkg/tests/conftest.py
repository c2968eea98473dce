import os
from pathlib import Path

import numpy as np
import pytest

from sbnq.arch import parse_arch
from sbnq.model import Conv2D, Linear, SimSBNQ

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "mnist100"
REPO_ROOT = Path(__file__).resolve().parents[1]


def mnist_dir() -> Path | None:
    """Full MNIST directory: $SBNQ_MNIST_DIR, else <repo>/data/mnist."""
    cand = Path(os.environ.get("SBNQ_MNIST_DIR", REPO_ROOT / "data" / "mnist"))
    return cand if cand.is_dir() else None


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURE_DIR


def random_small_graph(seed: int, bits: int = 4):
    """A random small conv net with randomized running statistics."""
    rng = np.random.default_rng(seed)
    c1 = int(rng.integers(1, 5))
    c2 = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3]))
    relu1 = " relu" if rng.random() < 0.5 else ""
    relu2 = " relu" if rng.random() < 0.5 else ""
    pool = "maxpool 2\n" if rng.random() < 0.5 else ""
    text = (
        "input 1 8 8\n"
        f"conv {c1} {k} pad={k // 2}\n"
        f"sbnq{relu1}\n"
        f"{pool}"
        f"conv {c2} 3 stride=2 pad=1\n"
        f"sbnq{relu2}\n"
        "flatten\n"
        "linear 6\n"
        "sbnq relu\n"
        "linear 3\n"
    )
    g = parse_arch(text, weight_bits=bits, act_bits=bits, seed=seed)
    for layer in g.layers:
        if isinstance(layer, SimSBNQ):
            layer.running_mu = rng.normal(0, 40, layer.channels)
            layer.running_sigma = 2.0 ** rng.uniform(0, 7, layer.channels)
        elif isinstance(layer, (Conv2D, Linear)):
            layer.weight = layer.weight + rng.normal(0, 0.3, layer.weight.shape)
    return g


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n}: NOT RUN (skipped or deselected)"))
