import os
import sys
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from constants import *
from synthgen import GeneratorConfig, generate_dataset
from twinvae import ModelConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run the desk-scale training tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale test, only run with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_model_config():
    return ModelConfig(channel_scale=0.125, latent_dim=8, dropout_rate=0.0)


@pytest.fixture(scope='session')
def syn_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('syn'))
    config = GeneratorConfig(style=STYLE_SYN_PC, count_distribution={1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25})
    generate_dataset(config, 12, 7, out, verbose=False)
    return out


@pytest.fixture(scope='session')
def nat_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('nat'))
    config = GeneratorConfig(style=STYLE_PSEUDO_NAT_PC, count_distribution={1: 0.5, 2: 0.5})
    generate_dataset(config, 10, 11, out, labeled=4, verbose=False)
    return out
