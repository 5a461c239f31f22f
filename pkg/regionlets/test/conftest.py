import os

import pytest

from regionlets.core import derive_rng
from regionlets.gradcheck import tiny_config
from .utils import small_experiment


def pytest_collection_modifyitems(config, items):
    if os.environ.get('REGIONLET_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set REGIONLET_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(params=[0, 1, 2], scope='function')
def rng(request):
    '''A private generator for each of three seeds'''
    return derive_rng(request.param)


@pytest.fixture(scope='function')
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope='function')
def experiment(tmp_path):
    '''Seconds-scale experiment writing into a temporary directory'''
    return small_experiment(tmp_path)
