import os
from pathlib import Path

import numpy as np
import pytest

from aedit.denoiser import Denoiser, DenoiserConfig, init_params

CACHE = Path(os.environ.get("AEDIT_TEST_CACHE", Path(__file__).parent / ".cache"))


def random_head_model(seed=0, cfg=None, scale=0.005):
    """Untrained model whose zero-initialised output paths get small random values."""
    cfg = cfg or DenoiserConfig()
    params = init_params(cfg, seed)
    zero = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in params.items():
        if not np.any(zero[k]):
            params[k] = scale * rng.standard_normal(v.shape)
    return Denoiser(cfg, params, seed)


@pytest.fixture(scope="session")
def tiny_model():
    return random_head_model()


@pytest.fixture(scope="session")
def trained_model():
    """Reference model trained with the package defaults, cached on disk."""
    from aedit.reference import reference_model
    return reference_model(CACHE)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
