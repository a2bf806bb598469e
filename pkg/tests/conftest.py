import pytest
import numpy as np
import logging

from fbm_volterra.config import ExperimentConfig
from fbm_volterra.kernels import TimeGrid


@pytest.fixture
def grid_16():
    return TimeGrid(1.0, 16)


@pytest.fixture
def grid_32():
    return TimeGrid(1.0, 32)


@pytest.fixture
def grid_64():
    return TimeGrid(1.0, 64)


@pytest.fixture(params=[0.3, 0.7])
def rough_or_smooth_h(request):
    return request.param


@pytest.fixture
def seed():
    return 20240601


@pytest.fixture
def rng(seed):
    return np.random.default_rng(seed)


@pytest.fixture
def sample_config(tmp_path):
    return ExperimentConfig(
        experiment="fou-limit",
        hurst=0.7,
        fou_a=1.0,
        fou_b=0.5,
        n_list=(50, 100, 200, 400, 800),
        k_list=(2,),
        t_list=(1.0,),
        seed=7,
        out=str(tmp_path / "results"),
        sequential=True,
    )


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.env"
    path.write_text(
        "# fOU rate experiment\n"
        "EXPERIMENT=fou-limit\n"
        "HURST=0.7\n"
        "FOU_A=1.0\n"
        "FOU_B=0.5\n"
        "N_LIST=50,100,200\n"
        "K_LIST=2\n"
        "SEED=11\n"
        "SEQUENTIAL=true\n",
        encoding="utf-8",
    )
    return str(path)


@pytest.fixture(autouse=True)
def reset_package_logger():
    yield
    logger = logging.getLogger("fbm_volterra")
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)
