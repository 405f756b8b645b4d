import os

import pytest

from amortsteer.generator import GeneratorConfig, build_generator
from amortsteer.hypernet import HypernetConfig, init, load_state
from amortsteer.trainer import TrainConfig, train
from amortsteer.world import WorldConfig, build_world

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """Record a criterion outcome for the summary, then assert it."""

    def record(n: int, ok: bool, detail: str):
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


@pytest.fixture(scope="session")
def world():
    return build_world(WorldConfig())


@pytest.fixture(scope="session")
def gen(world):
    return build_generator(GeneratorConfig(input_dim=world.config.embed_dim))


@pytest.fixture(scope="session")
def trained(world, gen):
    """Hypernetwork trained with the default recipe (300 epochs).

    Set AMORTSTEER_TRAINED_CKPT to a checkpoint directory to skip training
    while iterating on the tests.
    """
    path = os.environ.get("AMORTSTEER_TRAINED_CKPT")
    if path:
        state, _ = load_state(path)
        return state, None
    state = init(HypernetConfig.for_sites(world.config.embed_dim, gen.sites), seed=0)
    log = train(world, gen, state, TrainConfig())
    return state, log
