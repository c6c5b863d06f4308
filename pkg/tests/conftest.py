import numpy as np
import pytest

from fleetlearn import envsim
from fleetlearn.actor import demo_episode
from fleetlearn.config import RunConfig
from fleetlearn.harness import demo_corpus


@pytest.fixture(scope="session")
def small_cfg():
    return RunConfig(demo_per_task=40)


@pytest.fixture(scope="session")
def small_corpus(small_cfg):
    return demo_corpus(small_cfg)


def quiet_domain(task_id: int, seed: int) -> envsim.DomainParam:
    """Domain without slip or observation noise."""
    return envsim.sample_domain(task_id, seed, slip_range=(0.0, 0.0), noise_range=(0.0, 0.0))


def quiet_demos(n_per_task: int, seed: int = 0, num_tasks: int = 3):
    out = []
    for i in range(n_per_task):
        for t in range(num_tasks):
            dom = quiet_domain(t, 20_000 + i)
            out.append((dom, demo_episode(dom, np.random.default_rng([seed, t, i]), 80, 20_000 + i)))
    return out
