import os

import pytest

os.environ.setdefault("MPLBACKEND", "Agg")

from stzoo.datapipe import SyntheticTask, make_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def direction_store(tmp_path_factory):
    return make_synthetic(SyntheticTask.DIRECTION, 6, 8, 32, seed=0, root=tmp_path_factory.mktemp("direction"))


@pytest.fixture(scope="session")
def adjacency_store(tmp_path_factory):
    return make_synthetic(SyntheticTask.ADJACENCY, 6, 16, 32, seed=0, root=tmp_path_factory.mktemp("adjacency"))
