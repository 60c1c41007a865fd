import os
import warnings

import numpy as np
import pytest

from arithbench import manifolds, universe

RUN_SLOW = os.environ.get("ARITHBENCH_RUN_SLOW") == "1"

slow = pytest.mark.skipif(
    not RUN_SLOW, reason="full-scale build; set ARITHBENCH_RUN_SLOW=1 to run"
)


@pytest.fixture(scope="session")
def u3():
    return universe.build_universe(3, seed=7)


@pytest.fixture(scope="session")
def u4():
    return universe.build_universe(4, seed=7)


@pytest.fixture(scope="session")
def classes4(u4):
    return universe.partition_equivalence(u4)


@pytest.fixture(scope="session")
def sem_model4(u4):
    return manifolds.fit_semantic(u4, seed=11)


@pytest.fixture(scope="session")
def syn_model4(u4):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", manifolds.DegenerateRankWarning)
        return manifolds.fit_syntactic(u4, seed=11)


@pytest.fixture(scope="session")
def sem4(u4, sem_model4):
    return np.ascontiguousarray(manifolds.embed_universe_semantic(u4, sem_model4))


@pytest.fixture(scope="session")
def syn4(u4, syn_model4):
    rows, zero_flags = manifolds.embed_universe_syntactic(u4, syn_model4)
    return np.ascontiguousarray(rows), zero_flags


@pytest.fixture(scope="session")
def source_index3(u3):
    return {u3.source(i): i for i in range(len(u3))}


@pytest.fixture(scope="session")
def source_index4(u4):
    return {u4.source(i): i for i in range(len(u4))}
