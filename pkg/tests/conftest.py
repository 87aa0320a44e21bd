import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from loma.model import ModelConfig, init_model  # noqa: E402
from loma.structuring import LomaParams, build_sample  # noqa: E402
from loma.tokenizer import BOS_ID  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


def mini_config(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=8, d_ff=16, max_position=512, seed=3, init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


def random_doc(n, seed=0, alphabet=256):
    rng = np.random.default_rng(seed)
    return np.concatenate([[BOS_ID], rng.integers(0, alphabet, size=n - 1)])


@pytest.fixture
def mini_model():
    return init_model(mini_config())


@pytest.fixture
def small_model():
    # a touch wider so random-init logits are well separated
    return init_model(ModelConfig(n_layers=2, n_heads=2, d_model=32, max_position=2048, seed=5, init_std=0.2))


@pytest.fixture
def sample_t2c2():
    p = LomaParams(c=2, t=2)
    return build_sample(random_doc(12, seed=1), p, 30)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.format_results():
        terminalreporter.write_line(line)
