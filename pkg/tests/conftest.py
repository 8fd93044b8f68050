import numpy as np
import pytest

from gridstate.caseio import (
    load_ieee30,
    load_ieee30_config,
    load_ieee30_partition,
    load_ieee30_plan,
)
from gridstate.measurement import ModelView
from gridstate.netmodel import Branch, Bus, PowerNetwork
from gridstate.powerflow import run_powerflow


@pytest.fixture(scope="session")
def net30():
    return load_ieee30()


@pytest.fixture(scope="session")
def part30(net30):
    return load_ieee30_partition(net30)


@pytest.fixture(scope="session")
def plan30():
    return load_ieee30_plan()


@pytest.fixture(scope="session")
def cfg30():
    return load_ieee30_config()


@pytest.fixture(scope="session")
def truth30(net30):
    return run_powerflow(net30, tol=1e-10, max_iter=20).state


@pytest.fixture(scope="session")
def view30(net30):
    return ModelView.full(net30)


@pytest.fixture(scope="session")
def specs30(net30, plan30):
    return plan30.expand(net30)


@pytest.fixture()
def two_bus():
    """Slack feeding a load over a mostly reactive line."""
    return PowerNetwork(
        buses=(
            Bus(1, "slack", vm=1.0),
            Bus(2, "load", p=-0.1, q=-0.05),
        ),
        branches=(Branch(1, 2, 0.01, 0.1, 0.02),),
    )


def synth_zero(view, state, specs):
    """Noise-free measurement set (sigma table identically zero)."""
    from gridstate.measurement import synthesize

    return synthesize(view, state, specs, lambda kind: 0.0, np.random.default_rng(0))
