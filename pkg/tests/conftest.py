import numpy as np
import pytest

from bqsched.envsim import EnvConfig, calibrate
from bqsched.workload import BatchSet, PlanNode, QuerySpec, generate_workload


def make_query(qid, cpu=2.0, io=2.0, tables=(0,), alpha=0.0):
    scans = [PlanNode("scan", frozenset({t})) for t in tables] or [PlanNode("scan")]
    root = scans[0]
    for s in scans[1:]:
        root = PlanNode("join", children=(root, s))
    return QuerySpec(qid, root, cpu, io, frozenset(tables), alpha)


@pytest.fixture(scope="session")
def planted20():
    return generate_workload(20, 7, "planted")


@pytest.fixture(scope="session")
def env_default():
    return EnvConfig()


@pytest.fixture(scope="session")
def calib20(planted20, env_default):
    return calibrate(planted20, env_default)


@pytest.fixture(scope="session")
def small_batch():
    return generate_workload(4, 3, "plain")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_batch(n=3):
    return BatchSet([make_query(i, 1.0 + i, 1.0 + 0.5 * i, tables=(i, i + 1)) for i in range(n)])
