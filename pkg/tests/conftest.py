import json

import numpy as np
import pytest

from guidegen.config import desk_config
from guidegen.phantoms import OrganSpec, PhantomSpec, generate_case


def tiny_phantom_spec(grid=16) -> PhantomSpec:
    """Small-grid spec for fast tests; hosts still fit their tumors."""
    return PhantomSpec(
        grid=grid,
        organs=(
            OrganSpec("lung", (0.30, 0.50, 0.65), (0.18, 0.23, 0.19), -920.0),
            OrganSpec("bone", (0.50, 0.50, 0.26), (0.10, 0.10, 0.30), 800.0),
            OrganSpec("liver", (0.68, 0.36, 0.62), (0.22, 0.19, 0.19), -150.0),
            OrganSpec("spleen", (0.66, 0.72, 0.60), (0.18, 0.17, 0.17), 50.0),
        ),
        tumor_radius=(1.1, 1.6),
    )


def tiny_config() -> dict:
    """Desk config shrunk for CLI tests: 16^3 grid, 6-step schedules."""
    cfg = desk_config()
    cfg["phantom"] = tiny_phantom_spec().to_config()
    cfg["schedule_tcss"] = {"kind": "cosine", "T": 6, "offset": 0.008}
    cfg["schedule_lfg"] = {"kind": "cosine", "T": 6, "offset": 0.008}
    cfg["training"].update({"tcss_steps": 2, "ae_steps": 2, "lfg_steps": 2,
                            "batch_size": 1, "ckpt_interval": 0})
    return cfg


@pytest.fixture(scope="session")
def phantom_spec() -> PhantomSpec:
    return PhantomSpec()


@pytest.fixture(scope="session")
def small_cases(phantom_spec):
    return [generate_case(phantom_spec, seed) for seed in range(6)]


@pytest.fixture(scope="session")
def tiny_spec():
    return tiny_phantom_spec()


@pytest.fixture(scope="session")
def tiny_cases(tiny_spec):
    return [generate_case(tiny_spec, seed) for seed in range(5)]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
