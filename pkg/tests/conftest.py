# -*- coding: utf-8 -*-
import pytest
import torch

from passform import synthface, trainer
from passform.models import IdentityEncoder


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run slow end-to-end experiments')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long end-to-end experiment, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope='session')
def corpus(tmp_path_factory):
    """Six identities at 64x64; identities 3-5 (one per skin group) are the test split."""

    out = tmp_path_factory.mktemp('corpus')
    return synthface.build_corpus(6, 3, str(out), seed=1, resolution=64, test_fraction=0.5)


@pytest.fixture
def tiny_cfg():
    return trainer.TrainConfig(resolution=64, d_w=16, max_channels=16, min_channels=8,
                               disc_channels=8, batch_size=2, total_steps=3, device='cpu',
                               checkpoint_interval=2, log_interval=1)


@pytest.fixture
def tiny_encoder():
    torch.manual_seed(0)
    encoder = IdentityEncoder(64, d_e=16, widths=(8, 16, 16))
    encoder.arch['trained'] = True
    return encoder.freeze()
