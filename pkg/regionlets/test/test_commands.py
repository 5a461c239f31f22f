import io
import os

import numpy as np
import pytest

from regionlets import cli, commands
from regionlets.bench import read_ppm, write_ppm
from regionlets.checkpoint import load_checkpoint
from regionlets.conf import ExperimentConfig
from regionlets.core import NonFiniteError, derive_rng
from regionlets.model import RegionletDetector
from regionlets.warp import IDENTITY_THETA
from .utils import read_csv_lines, small_experiment


# val mAP@0.5 of the default experiment (seed 0, 30 epochs)
BASELINE_VAL_MAP = 0.86
BASELINE_TOLERANCE = 0.05


# ### train / eval ############################################################

def test_zero_epochs_writes_header_and_checkpoint(tmp_path):
    cfg = small_experiment(tmp_path, **{'train.epochs': 0})
    summary = commands.cmd_train(cfg)
    lines = read_csv_lines(str(tmp_path / 'metrics.csv'))
    assert lines == ['# schema v1', ','.join(commands.METRICS_FIELDS)]
    params = load_checkpoint(str(tmp_path / 'model.ckpt'))
    assert list(params) == list(RegionletDetector(cfg).params)
    assert 0.0 <= summary['val_map'] <= 1.0
    assert summary['iterations'] == 0
    assert ExperimentConfig.load(str(tmp_path / 'experiment.cfg')) == cfg


def test_training_writes_a_row_per_epoch(experiment):
    cfg = experiment.with_overrides({'train.epochs': 2})
    summary = commands.cmd_train(cfg)
    out = cfg.train.output_dir
    lines = read_csv_lines(os.path.join(out, 'metrics.csv'))
    assert len(lines) == 4
    assert [line.split(',')[0] for line in lines[2:]] == ['1', '2']
    assert summary['iterations'] == 4
    timing = read_csv_lines(os.path.join(out, 'timing.csv'))
    assert timing[1] == 'epoch,seconds' and len(timing) == 4


def test_training_is_reproducible(tmp_path):
    first = small_experiment(tmp_path / 'a')
    second = small_experiment(tmp_path / 'b')
    commands.cmd_train(first)
    commands.cmd_train(second)
    for name in ('metrics.csv', 'model.ckpt'):
        with open(str(tmp_path / 'a' / name), 'rb') as a, \
                open(str(tmp_path / 'b' / name), 'rb') as b:
            assert a.read() == b.read()


def test_full_batch_loss_keeps_falling(tmp_path):
    cfg = small_experiment(tmp_path, **{
        'train.epochs': 6, 'train.batch_size': 4, 'train.momentum': 0.0,
        'train.schedule': ((0, 1e-4),)})
    commands.cmd_train(cfg)
    path = str(tmp_path / 'metrics.csv')
    raw = commands.smoothed_loss(path, window=1)
    assert len(raw) == 6
    assert all(b <= a for a, b in zip(raw, raw[1:]))
    smoothed = commands.smoothed_loss(path)
    assert len(smoothed) == 4
    assert smoothed[0] == pytest.approx(sum(raw[:3]) / 3)


def test_smoothed_loss_needs_enough_epochs(tmp_path):
    cfg = small_experiment(tmp_path, **{'train.epochs': 2})
    commands.cmd_train(cfg)
    assert commands.smoothed_loss(str(tmp_path / 'metrics.csv')) == []


def test_eval_matches_final_training_row(experiment):
    summary = commands.cmd_train(experiment)
    report = commands.cmd_eval(summary['checkpoint'])
    last = read_csv_lines(os.path.join(summary['output_dir'],
                                       'metrics.csv'))[-1]
    assert report['map_50'] == float(last.split(',')[-1])
    assert report['map_50'] == summary['val_map']
    assert report['map_70'] <= report['map_50']
    assert report['mmap'] <= report['map_50']
    assert report['num_images'] == 2


def test_non_finite_training_leaves_diagnostics(experiment, monkeypatch):
    def explode(self, instances, lr):
        raise NonFiniteError("gradient of cls.fc.w at iteration 0: nan")

    monkeypatch.setattr(RegionletDetector, 'train_step', explode)
    with pytest.raises(NonFiniteError):
        commands.cmd_train(experiment)
    path = os.path.join(experiment.train.output_dir, 'diagnostics.txt')
    with open(path) as f:
        text = f.read()
    assert 'cls.fc.w' in text and 'iteration: 0' in text


# ### ablation and sweep ######################################################

def test_ordering_check():
    means = {'global': 0.1, 'offset-only': 0.6, 'non-gating': 0.7,
             'full': 0.8}
    assert commands.ordering_check(means) == (True, True)
    means['non-gating'] = 0.9
    assert commands.ordering_check(means) == (True, False)
    means['full'] = 0.5
    assert commands.ordering_check(means) == (False, False)
    means.update({'full': 0.8, 'global': 0.65})
    assert commands.ordering_check(means)[0] is False


def test_ablation_table(experiment):
    summary = commands.cmd_ablate(experiment, seeds=(0,))
    assert list(summary['means']) == ['global', 'offset-only', 'non-gating',
                                      'full']
    lines = read_csv_lines(os.path.join(summary['output_dir'],
                                        'ablation.csv'))
    assert lines[1] == 'variant,mean_val_map,sd_val_map,runs'
    assert [line.split(',')[0] for line in lines[2:]] == list(
        summary['means'])
    assert os.path.exists(os.path.join(summary['output_dir'], 'global',
                                       'seed0', 'model.ckpt'))


def test_sweep_resumes(experiment):
    cfg = experiment.with_overrides({'train.epochs': 0})
    out = cfg.train.output_dir
    with open(os.path.join(out, 'sweep.csv'), 'w') as f:
        f.write('# schema v1\nnum_regions,density,val_map\n4,2,0.5\n')
    summary = commands.cmd_sweep(cfg)
    assert summary['trained'] == 14
    assert summary['cells']['4/2'] == 0.5
    assert len(summary['cells']) == 15
    matrix = read_csv_lines(os.path.join(out, 'sweep_matrix.csv'))
    assert matrix[1] == 'num_regions,2x2,3x3,4x4,5x5,6x6'
    assert [row.split(',')[0] for row in matrix[2:]] == ['4', '9', '16']
    assert matrix[2].split(',')[1] == '0.5'
    # a second run has nothing left to do
    assert commands.cmd_sweep(cfg)['trained'] == 0


# ### gradcheck and visual checks #############################################

def test_gradcheck_table_and_csv(tmp_path):
    stream = io.StringIO()
    path = str(tmp_path / 'gradcheck.csv')
    results = commands.cmd_gradcheck('fc', seeds=2, csv_path=path,
                                     stream=stream)
    assert len(results) == 1 and results[0]['passed']
    table = stream.getvalue().splitlines()
    assert table[0].split()[0] == 'module'
    assert table[1].split()[0] == 'fc' and ' ok ' in table[1]
    lines = read_csv_lines(path)
    assert lines[1] == ','.join(commands.GRADCHECK_FIELDS)
    assert len(lines) == 2 + 2 * 3


def test_identity_demo_warp_reproduces_image(tmp_path):
    source, target = str(tmp_path / 'in.ppm'), str(tmp_path / 'out.ppm')
    write_ppm(source, derive_rng(0).uniform(0, 1, (3, 8, 6)))
    V = commands.cmd_demo_warp(source, IDENTITY_THETA, 8, 6, target)
    assert np.max(np.abs(V - read_ppm(source))) <= 1e-12
    assert np.array_equal(read_ppm(target), read_ppm(source))


def test_demo_warp_zoom(tmp_path):
    source, target = str(tmp_path / 'in.ppm'), str(tmp_path / 'out.ppm')
    write_ppm(source, derive_rng(1).uniform(0, 1, (3, 8, 8)))
    theta = [0.5, 0.0, 0.0, 0.0, 0.5, 0.0]
    V = commands.cmd_demo_warp(source, theta, 4, 4, target)
    assert V.shape == (3, 4, 4)
    assert read_ppm(target).shape == (3, 4, 4)


def test_region_outline():
    corners = commands.region_outline(IDENTITY_THETA, (2.0, 4.0, 10.0, 6.0))
    assert corners == [(2.0, 4.0), (12.0, 4.0), (12.0, 10.0), (2.0, 10.0)]


def test_regions_drawing(experiment, tmp_path):
    summary = commands.cmd_train(experiment.with_overrides(
        {'train.epochs': 0}))
    path = str(tmp_path / 'regions.ppm')
    thetas = commands.cmd_regions(summary['checkpoint'], path)
    assert thetas.shape == (experiment.rsn.num_regions, 6)
    assert read_ppm(path).shape == (3, 32 * 4, 32 * 4)


# ### command line ############################################################

def _config_file(directory, **overrides):
    cfg = small_experiment(directory, **overrides)
    path = str(directory / 'input.cfg')
    cfg.save(path)
    return path


def test_cli_unknown_key_exits_with_config_error(tmp_path):
    path = str(tmp_path / 'bad.cfg')
    with open(path, 'w') as f:
        f.write('rsn.bogus = 1\n')
    assert cli.main(['train', path]) == cli.EXIT_CONFIG


def test_cli_invalid_value_exits_with_config_error(tmp_path):
    path = str(tmp_path / 'bad.cfg')
    with open(path, 'w') as f:
        f.write('rsn.num_regions = 5\n')
    assert cli.main(['train', path]) == cli.EXIT_CONFIG


def test_cli_gradcheck(capsys):
    assert cli.main(['gradcheck', '--module', 'sigmoid', '--seeds', '2']) == 0
    assert cli.main(['gradcheck', '--module', 'sigmoid', '--seeds', '2',
                     '--corrupt']) == cli.EXIT_FAILED_CHECK
    assert 'FAIL' in capsys.readouterr().out


def test_cli_non_finite_exit_code(tmp_path, monkeypatch):
    def explode(self, instances, lr):
        raise NonFiniteError("loss is nan")

    monkeypatch.setattr(RegionletDetector, 'train_step', explode)
    path = _config_file(tmp_path)
    assert cli.main(['train', path]) == cli.EXIT_NON_FINITE
    assert os.path.exists(str(tmp_path / 'diagnostics.txt'))


def test_cli_train_eval_export(tmp_path, capsys):
    path = _config_file(tmp_path, **{'train.epochs': 0})
    assert cli.main(['train', path, '--output-dir',
                     str(tmp_path / 'run')]) == 0
    assert cli.main(['eval', str(tmp_path / 'run' / 'model.ckpt')]) == 0
    assert 'mAP@0.5' in capsys.readouterr().out
    assert cli.main(['export', path, str(tmp_path / 'images')]) == 0
    names = os.listdir(str(tmp_path / 'images'))
    assert sorted(names)[:2] == ['00004.ppm', '00005.ppm']


# ### full-size runs ##########################################################

@pytest.mark.slow
def test_untrained_detector_is_near_chance(tmp_path):
    cfg = ExperimentConfig().with_overrides({
        'train.epochs': 0, 'train.output_dir': str(tmp_path)})
    summary = commands.cmd_train(cfg)
    assert commands.cmd_eval(summary['checkpoint'])['map_50'] < 0.1


@pytest.mark.slow
def test_default_run_reaches_baseline_and_settles(tmp_path):
    cfg = ExperimentConfig().with_overrides({
        'train.output_dir': str(tmp_path)})
    summary = commands.cmd_train(cfg)
    assert summary['val_map'] >= BASELINE_VAL_MAP - BASELINE_TOLERANCE
    tail = commands.smoothed_loss(str(tmp_path / 'metrics.csv'),
                                  window=5)[-20:]
    assert len(tail) == 20
    assert all(b <= a for a, b in zip(tail, tail[1:]))


@pytest.mark.slow
def test_ablation_ordering(tmp_path):
    cfg = ExperimentConfig().with_overrides({
        'train.output_dir': str(tmp_path)})
    assert commands.cmd_ablate(cfg)['ordering_ok']
