import numpy as np
import pytest

from certmpc.config import from_dict
from certmpc.dataset import GridSpec, generate, seed_grid, uniform_points
from certmpc.mlp import train
from certmpc.ocp import pendulum_spec

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def spec():
    return pendulum_spec()


@pytest.fixture(scope="session")
def grid():
    return GridSpec([-2 * np.pi, -1.0], [2 * np.pi, 1.0], (25, 14))


@pytest.fixture(scope="session")
def pendulum_dataset(spec, grid):
    return generate(seed_grid(grid), spec, with_sensitivities=True, grid=grid, seed=0)


@pytest.fixture(scope="session")
def validation_set(spec, grid):
    cfg = from_dict({})
    pts = uniform_points(grid.lower, grid.upper, cfg.validation_size(),
                         cfg.stage_seed("validation"))
    return generate(pts, spec, with_sensitivities=False)


@pytest.fixture(scope="session")
def trained_pairs(pendulum_dataset, validation_set):
    """Per seed: {variant: (params, report)} trained with the shipped defaults."""
    out = {}
    for seed in (0, 1, 2):
        cfg = from_dict({"seed": seed})
        out[seed] = {v: train(pendulum_dataset, cfg.train_config(v), validation=validation_set)
                     for v in ("nominal", "sensreg")}
    return out
