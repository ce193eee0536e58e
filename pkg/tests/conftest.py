import functools

import pytest

from memstab.config import load_config
from memstab.harness import Lab


@functools.lru_cache(maxsize=None)
def _lab():
    return Lab(load_config())


@functools.lru_cache(maxsize=None)
def profile(sampler="ddim"):
    return _lab().profile(sampler)


@functools.lru_cache(maxsize=None)
def batch(scenario, sampler="ddim", n=200, offset=0):
    return tuple(_lab().run(scenario, sampler, _lab().eval_seeds(n, offset)))


@pytest.fixture(scope="session")
def lab():
    return _lab()


@pytest.fixture(scope="session")
def cfg():
    return _lab().cfg
