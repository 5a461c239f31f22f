import os

import pytest

from regionlets.conf import (KEYS, ConfigKeyError, ConfigValueError,
                             ExperimentConfig, TrainConfig, ablation_variants,
                             load_configuration)


EXAMPLE = """
# offset-only variant with a denser grid
rsn.num_regions = 9
rsn.mode = offset-only     # scale frozen
head.density = 3x3
pool.out = 1x1
backbone.channels = [4, 8]
train.schedule = 0:0.02, 100:0.002
gate.enabled = false
bench.jitter = 0.25
"""


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.rsn.num_regions == 16
    assert cfg.head.density == (4, 4)
    assert cfg.backbone.stride == 8
    assert cfg.head.num_classes == cfg.bench.num_classes == 4
    assert cfg.train.schedule == ((0, 0.01), (800, 0.001))
    assert (cfg.bench.num_train, cfg.bench.num_val) == (160, 40)


def test_parse_text():
    cfg = ExperimentConfig.from_text(EXAMPLE)
    assert cfg.rsn.num_regions == 9
    assert cfg.rsn.mode == 'offset-only'
    assert cfg.head.density == (3, 3)
    assert (cfg.pool.out_h, cfg.pool.out_w) == (1, 1)
    assert cfg.backbone.channels == (4, 8)
    assert cfg.train.schedule == ((0, 0.02), (100, 0.002))
    assert cfg.gate.enabled is False
    assert cfg.bench.jitter == 0.25
    # untouched keys keep their defaults
    assert cfg.train.epochs == 30


def test_text_round_trip(tmp_path):
    cfg = ExperimentConfig.from_text(EXAMPLE)
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    path = str(tmp_path / 'experiment.cfg')
    cfg.save(path)
    assert ExperimentConfig.load(path) == cfg
    assert len(cfg.to_text().splitlines()) == len(KEYS)


@pytest.mark.parametrize('text,key,expected', [
    ('train.momentum = 1e-3', 'train.momentum', 1e-3),
    ('head.score_thresh = 1e-2', 'head.score_thresh', 1e-2),
    ('head.lambda_reg = 2', 'head.lambda_reg', 2.0),
    ('bench.jitter = 1.5E-1', 'bench.jitter', 0.15)])
def test_exponent_floats(text, key, expected):
    value = ExperimentConfig.from_text(text).as_dict()[key]
    assert isinstance(value, float) and value == expected


def test_exponent_float_override():
    cfg = ExperimentConfig().with_overrides({'head.score_thresh': '1e-4'})
    assert cfg.head.score_thresh == 1e-4


@pytest.mark.parametrize('text', ['rsn.regions = 4', 'bench.classes = disk',
                                  'model.seed = 1'])
def test_unknown_keys(text):
    with pytest.raises(ConfigKeyError):
        ExperimentConfig.from_text(text)


@pytest.mark.parametrize('text', [
    'rsn.num_regions = many',
    'rsn.num_regions = 5',
    'rsn.mode = scale-only',
    'head.density = 3by3',
    'backbone.channels = [4, x]',
    'train.schedule = 10:0.1',
    'train.schedule = 0=0.1',
    'gate.enabled = 1',
    'head.num_classes = 3',
    'pool.out = 3x3',
    'just some words'])
def test_invalid_values(text):
    with pytest.raises(ConfigValueError):
        ExperimentConfig.from_text(text)


def test_section_named_in_error():
    with pytest.raises(ConfigValueError) as excinfo:
        ExperimentConfig.from_text('rsn.num_regions = 5')
    assert str(excinfo.value).startswith('[rsn]')


def test_overrides():
    cfg = ExperimentConfig()
    other = cfg.with_overrides({'train.epochs': 2, 'pool.out': (2, 2)})
    assert other.train.epochs == 2 and other.pool.out_h == 2
    assert cfg.train.epochs == 30
    with pytest.raises(ConfigKeyError):
        cfg.with_overrides({'train.epoch': 2})
    with pytest.raises(ConfigValueError):
        cfg.with_overrides({'train.momentum': 'high'})


@pytest.mark.parametrize('schedule', [((5, 0.1),), ((0, 0.1), (0, 0.01)),
                                      ((0, 0.1), (10, 0.0)), ()])
def test_schedule_errors(schedule):
    with pytest.raises(ValueError):
        TrainConfig(schedule=schedule)


def test_learning_rate_schedule():
    train = TrainConfig(schedule=((0, 0.1), (10, 0.01), (20, 0.001)))
    assert [train.lr_at(i) for i in (0, 9, 10, 19, 20, 500)] == [
        0.1, 0.1, 0.01, 0.01, 0.001, 0.001]


def test_ablation_variants_differ_only_in_their_keys(tiny_cfg):
    variants = ablation_variants(tiny_cfg)
    assert list(variants) == ['global', 'offset-only', 'non-gating', 'full']
    full = variants['full'].as_dict()

    def changed(name):
        values = variants[name].as_dict()
        return {k for k in full if values[k] != full[k]}

    assert changed('global') == {'rsn.mode', 'rsn.num_regions'}
    assert changed('offset-only') == {'rsn.mode'}
    assert changed('non-gating') == {'gate.enabled'}
    assert variants['full'] == tiny_cfg


# ### runtime settings ########################################################

@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.setenv('HOME', str(tmp_path))
    monkeypatch.delenv('CONDA_ETC_', raising=False)
    for var in ('RLTEST_THREADS', 'RLTEST_LOG_LEVEL'):
        monkeypatch.delenv(var, raising=False)
    return tmp_path


DEFAULTS = {'threads': 1, 'log_level': 'INFO'}


def test_runtime_defaults(home):
    assert load_configuration('rltest', 'RLTEST', DEFAULTS) == DEFAULTS


def test_runtime_cascade(home, monkeypatch):
    conf_dir = home / '.config' / 'rltest'
    os.makedirs(str(conf_dir))
    (conf_dir / 'rltest.yml').write_text('threads: 3\nlog_level: WARNING\n')
    conf = load_configuration('rltest', 'RLTEST', DEFAULTS)
    assert conf == {'threads': 3, 'log_level': 'WARNING'}

    monkeypatch.setenv('RLTEST_LOG_LEVEL', 'DEBUG')
    monkeypatch.setenv('RLTEST_THREADS', '5')
    conf = load_configuration('rltest', 'RLTEST', DEFAULTS)
    assert conf == {'threads': 5, 'log_level': 'DEBUG'}


def test_runtime_conda_file(home, monkeypatch):
    etc = home / 'etc'
    os.makedirs(str(etc))
    (etc / 'rltest.yml').write_text('threads: 2\n')
    monkeypatch.setenv('CONDA_ETC_', str(etc))
    assert load_configuration('rltest', 'RLTEST', DEFAULTS)['threads'] == 2


def test_runtime_bad_environment_value(home, monkeypatch):
    monkeypatch.setenv('RLTEST_THREADS', 'lots')
    with pytest.raises(ConfigValueError):
        load_configuration('rltest', 'RLTEST', DEFAULTS)
