"""Experiment commands behind the ``regionlets`` CLI.

Each ``cmd_*`` function takes plain Python arguments, writes its artifacts
and returns a read-only summary record; argument parsing and exit codes
live in :mod:`regionlets.cli`.  CSV outputs start with ``# schema v1``.
"""
import csv
import logging
import os
import sys
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor

import doct as doc
import numpy as np
from PIL import Image, ImageDraw

from . import gradcheck
from .bench import (evaluate_coco_map, evaluate_map, generate_dataset,
                    read_ppm, train_val_split, write_ppm)
from .checkpoint import load_checkpoint, save_checkpoint
from .conf import ExperimentConfig, ablation_variants
from .conf import runtime_config
from .core import NonFiniteError, derive_rng
from .model import RegionletDetector
from .warp import grid_generate, warp_forward


logger = logging.getLogger(__name__)


SCHEMA_LINE = '# schema v1'
CHECKPOINT_NAME = 'model.ckpt'
CONFIG_NAME = 'experiment.cfg'
METRICS_FIELDS = ['epoch', 'loss', 'cls_loss', 'reg_loss', 'train_map',
                  'val_map']
SWEEP_REGIONS = (4, 9, 16)
SWEEP_DENSITIES = (2, 3, 4, 5, 6)

_SHUFFLE_STREAM = 0x5F1E


def _config(config):
    if isinstance(config, ExperimentConfig):
        return config
    return ExperimentConfig.load(config)


def _workers(count):
    return max(1, min(int(runtime_config['threads']), count))


class _CsvLog(object):
    """Schema-versioned CSV file, created with a header if missing"""
    def __init__(self, path, fieldnames):
        self.path = path
        self.fieldnames = list(fieldnames)

    def create(self):
        with open(self.path, 'w', newline='') as f:
            f.write(SCHEMA_LINE + '\n')
            csv.writer(f, lineterminator='\n').writerow(self.fieldnames)

    def append(self, row):
        if not os.path.exists(self.path):
            self.create()
        with open(self.path, 'a', newline='') as f:
            csv.writer(f, lineterminator='\n').writerow(
                [row[k] for k in self.fieldnames])

    def rows(self):
        if not os.path.exists(self.path):
            return []
        with open(self.path, newline='') as f:
            lines = [line for line in f if not line.startswith('#')]
        return list(csv.DictReader(lines))


def evaluate_model(model, instances, iou_thresh=0.5):
    """Detections of ``model`` on ``instances`` and the resulting mAP report"""
    detections = [model.detect(inst.image, inst.proposals)
                  for inst in instances]
    gts = [(inst.gt_boxes, inst.gt_labels) for inst in instances]
    return evaluate_map(detections, gts, model.config.head.num_classes,
                        iou_thresh)


def _write_diagnostics(directory, model, error):
    path = os.path.join(directory, 'diagnostics.txt')
    with open(path, 'w') as f:
        f.write('error: {}\n'.format(error))
        f.write('iteration: {}\n'.format(model.iteration))
        for name, norm in model.parameter_norms().items():
            f.write('{} {!r}\n'.format(name, norm))
    logger.error("Non-finite values during training; diagnostics in %s", path)
    return path


# train / eval ###############################################################

def cmd_train(config, output_dir=None):
    """Train a detector on the synthetic benchmark

    Writes ``metrics.csv`` (one row per epoch), ``timing.csv`` (wall time
    per epoch), ``experiment.cfg`` and the ``model.ckpt`` checkpoint, which
    is rewritten after every epoch.

    Parameters
    ----------
    config : str or ExperimentConfig
    output_dir : str, optional
        Overrides ``train.output_dir``

    Returns
    -------
    summary : doct.Document
    """
    cfg = _config(config)
    out = output_dir or cfg.train.output_dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, CONFIG_NAME))
    train, val = train_val_split(cfg.bench)
    model = RegionletDetector(cfg, seed=cfg.train.seed)
    checkpoint = os.path.join(out, CHECKPOINT_NAME)
    save_checkpoint(checkpoint, model.params)

    metrics = _CsvLog(os.path.join(out, 'metrics.csv'), METRICS_FIELDS)
    timing = _CsvLog(os.path.join(out, 'timing.csv'), ['epoch', 'seconds'])
    metrics.create()
    timing.create()
    logger.info("Training %r on %d images (%d val) for %d epochs in %s",
                model, len(train), len(val), cfg.train.epochs, out)

    batch = cfg.train.batch_size
    val_map = None
    for epoch in range(1, cfg.train.epochs + 1):
        start = time.time()
        order = derive_rng(cfg.train.seed, _SHUFFLE_STREAM,
                           epoch).permutation(len(train))
        sums, steps = np.zeros(3), 0
        for first in range(0, len(order), batch):
            instances = [train[i] for i in order[first:first + batch]]
            lr = cfg.train.lr_at(model.iteration)
            try:
                sums += model.train_step(instances, lr)
            except NonFiniteError as err:
                _write_diagnostics(out, model, err)
                raise
            steps += 1
        train_map = evaluate_model(model, train[:cfg.train.map_subset])['map']
        val_map = evaluate_model(model, val)['map']
        means = sums / max(steps, 1)
        metrics.append(dict(epoch=epoch, loss=means[0], cls_loss=means[1],
                            reg_loss=means[2], train_map=train_map,
                            val_map=val_map))
        timing.append(dict(epoch=epoch, seconds=round(time.time() - start,
                                                      3)))
        save_checkpoint(checkpoint, model.params)
        logger.info("epoch %d: cls %.4f reg %.4f train mAP %.4f val mAP "
                    "%.4f", epoch, means[1], means[2], train_map, val_map)
    if val_map is None:
        val_map = evaluate_model(model, val)['map']
    return doc.Document('TrainSummary', dict(
        output_dir=out, checkpoint=checkpoint, epochs=cfg.train.epochs,
        iterations=model.iteration, val_map=val_map))


def smoothed_loss(metrics_path, window=3):
    """Trailing moving average of the per-epoch training loss

    Returns one value per epoch from epoch ``window`` on, each the mean
    loss of that epoch and the ``window - 1`` before it.
    """
    rows = _CsvLog(metrics_path, METRICS_FIELDS).rows()
    losses = np.array([float(r['loss']) for r in rows])
    if len(losses) < window:
        return []
    kernel = np.ones(window) / window
    return [float(v) for v in np.convolve(losses, kernel, mode='valid')]


def load_model(checkpoint, config=None):
    """Rebuild a detector from a checkpoint and its ``experiment.cfg``"""
    if config is None:
        config = os.path.join(os.path.dirname(os.path.abspath(checkpoint)),
                              CONFIG_NAME)
    model = RegionletDetector(_config(config))
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def _validation_set(cfg, dataset_seed=None):
    seed = cfg.bench.seed if dataset_seed is None else dataset_seed
    return generate_dataset(cfg.bench, seed, cfg.bench.num_val,
                            start=cfg.bench.num_train)


def cmd_eval(checkpoint, dataset_seed=None, config=None):
    """Validation mAP at IoU 0.5 and 0.7 plus the 0.5:0.95 mean

    Returns
    -------
    report : doct.Document
    """
    model = load_model(checkpoint, config)
    val = _validation_set(model.config, dataset_seed)
    detections = [model.detect(inst.image, inst.proposals) for inst in val]
    gts = [(inst.gt_boxes, inst.gt_labels) for inst in val]
    num_classes = model.config.head.num_classes
    at_50 = evaluate_map(detections, gts, num_classes, 0.5)
    at_70 = evaluate_map(detections, gts, num_classes, 0.7)
    report = doc.Document('EvalReport', dict(
        checkpoint=checkpoint, num_images=len(val), map_50=at_50['map'],
        map_70=at_70['map'], mmap=evaluate_coco_map(detections, gts,
                                                    num_classes),
        ap_50=dict(at_50['ap']), ap_70=dict(at_70['ap'])))
    logger.info("mAP@0.5 %.4f  mAP@0.7 %.4f  mmAP %.4f", report['map_50'],
                report['map_70'], report['mmap'])
    return report


# ablation and sweep #########################################################

def _train_val_map(cfg):
    # module-level so worker processes can unpickle it
    return cmd_train(cfg)['val_map']


def _run_all(configs, workers):
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for result in pool.map(_train_val_map, configs):
                yield result
    else:
        for cfg in configs:
            yield _train_val_map(cfg)


def ordering_check(means):
    """Whether variant means order as full >= offset-only >> global

    Returns ``(hard, soft)``: ``hard`` requires every regionlet variant to
    beat global and full to reach offset-only, ``soft`` additionally
    requires full >= non-gating >= offset-only.
    """
    others = [means[k] for k in ('offset-only', 'non-gating', 'full')]
    hard = (min(others) > means['global'] and
            means['full'] >= means['offset-only'])
    soft = hard and (means['full'] >= means['non-gating'] >=
                     means['offset-only'])
    return hard, soft


def cmd_ablate(config, output_dir=None, seeds=(0, 1, 2)):
    """Train the global, offset-only, non-gating and full variants

    Every variant is trained with the same seeds and schedule; the table
    ``ablation.csv`` holds mean and standard deviation of the final val
    mAP per variant.

    Returns
    -------
    summary : doct.Document
        Includes ``ordering_ok`` (the hard ordering requirement)
    """
    cfg = _config(config)
    out = output_dir or cfg.train.output_dir
    os.makedirs(out, exist_ok=True)
    variants = ablation_variants(cfg)
    runs = []
    for name, variant in variants.items():
        for seed in seeds:
            runs.append((name, variant.with_overrides({
                'train.seed': seed,
                'train.output_dir': os.path.join(out, name,
                                                 'seed{}'.format(seed))})))
    results = list(_run_all([c for _, c in runs], _workers(len(runs))))

    per_variant = OrderedDict((name, []) for name in variants)
    for (name, _), value in zip(runs, results):
        per_variant[name].append(value)
    table = _CsvLog(os.path.join(out, 'ablation.csv'),
                    ['variant', 'mean_val_map', 'sd_val_map', 'runs'])
    table.create()
    means = OrderedDict()
    for name, values in per_variant.items():
        means[name] = float(np.mean(values))
        table.append(dict(variant=name, mean_val_map=means[name],
                          sd_val_map=float(np.std(values)),
                          runs=len(values)))
        logger.info("%-12s val mAP %.4f +/- %.4f", name, means[name],
                    np.std(values))
    hard, soft = ordering_check(means)
    if not hard:
        logger.warning("Ablation ordering violated: %s", dict(means))
    return doc.Document('AblationSummary', dict(
        output_dir=out, means=dict(means),
        values={k: list(v) for k, v in per_variant.items()},
        ordering_ok=hard, full_ordering=soft))


def sweep_configs(cfg, out):
    """One config per (num_regions, density) cell, row-major"""
    cells = OrderedDict()
    for regions in SWEEP_REGIONS:
        for density in SWEEP_DENSITIES:
            cells[regions, density] = cfg.with_overrides({
                'rsn.num_regions': regions,
                'head.density': (density, density),
                'train.output_dir': os.path.join(
                    out, 'k{}_d{}x{}'.format(regions, density, density))})
    return cells


def cmd_sweep(config, output_dir=None):
    """Val mAP over number of regions x regionlet density

    Finished cells are appended to ``sweep.csv`` as they complete and are
    skipped when the sweep is run again, so an interrupted sweep resumes.
    The 3 x 5 matrix is written to ``sweep_matrix.csv``.

    Returns
    -------
    summary : doct.Document
    """
    cfg = _config(config)
    out = output_dir or cfg.train.output_dir
    os.makedirs(out, exist_ok=True)
    cells = sweep_configs(cfg, out)
    log = _CsvLog(os.path.join(out, 'sweep.csv'),
                  ['num_regions', 'density', 'val_map'])
    done = {(int(r['num_regions']), int(r['density'])): float(r['val_map'])
            for r in log.rows()}
    if done:
        logger.info("Resuming sweep: %d of %d cells already done", len(done),
                    len(cells))
    pending = [key for key in cells if key not in done]
    results = _run_all([cells[k] for k in pending], _workers(len(pending)))
    for key, value in zip(pending, results):
        done[key] = value
        log.append(dict(num_regions=key[0], density=key[1], val_map=value))

    matrix = _CsvLog(os.path.join(out, 'sweep_matrix.csv'),
                     ['num_regions'] + ['{}x{}'.format(d, d)
                                        for d in SWEEP_DENSITIES])
    matrix.create()
    for regions in SWEEP_REGIONS:
        row = {'num_regions': regions}
        row.update(('{}x{}'.format(d, d), done[regions, d])
                   for d in SWEEP_DENSITIES)
        matrix.append(row)
    return doc.Document('SweepSummary', dict(
        output_dir=out, cells={'{}/{}'.format(*k): v
                               for k, v in sorted(done.items())},
        trained=len(pending)))


# gradcheck ##################################################################

GRADCHECK_FIELDS = ['module', 'seed', 'tensor', 'max_rel_error',
                    'worst_index', 'analytic', 'numeric', 'passed']


def cmd_gradcheck(module='all', seeds=20, tol=None, corrupt=None,
                  csv_path=None, stream=None):
    """Gradient checks with a report table on ``stream`` and optional CSV

    Returns
    -------
    results : list of doct.Document
        One per module, see :func:`regionlets.gradcheck.check_module`
    """
    stream = sys.stdout if stream is None else stream
    modules = list(gradcheck.CHECKS) if module == 'all' else [module]
    workers = _workers(seeds if isinstance(seeds, int) else len(seeds))
    results = [gradcheck.check_module(m, seeds, tol, corrupt, workers)
               for m in modules]
    stream.write('{:<12} {:>6} {:>10} {:>12} {:<8}  worst\n'.format(
        'module', 'reports', 'tolerance', 'max_rel_err', 'status'))
    for result in results:
        worst = result['worst']
        stream.write('{:<12} {:>6} {:>10.1e} {:>12.3e} {:<8}  {} seed {} {}'
                     '\n'.format(result['module'], len(result['reports']),
                                 result['tolerance'], worst['max_rel_error'],
                                 'ok' if result['passed'] else 'FAIL',
                                 worst['tensor'], worst['seed'],
                                 worst['worst_index']))
    if csv_path is not None:
        log = _CsvLog(csv_path, GRADCHECK_FIELDS)
        log.create()
        for result in results:
            for report in result['reports']:
                log.append(report)
    return results


# visual checks ##############################################################

def cmd_demo_warp(image_path, theta, height, width, output_path, roi=None):
    """Warp an image with one affine transform and write the H x W result

    The image is its own feature map (stride 1); ``roi`` defaults to the
    whole image.
    """
    U = read_ppm(image_path)
    if roi is None:
        roi = (0.0, 0.0, float(U.shape[2]), float(U.shape[1]))
    grid = grid_generate(np.asarray(theta, dtype=np.float64), roi, height,
                         width, 1.0)
    V = warp_forward(U, grid).V
    write_ppm(output_path, np.clip(V, 0.0, 1.0))
    logger.info("Wrote %dx%d warp of %s to %s", height, width, image_path,
                output_path)
    return V


def region_outline(theta, roi):
    """Image-space corners of the region selected by ``theta`` in ``roi``"""
    w0, h0, w, h = roi
    corners = []
    for tx, ty in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
        xn = theta[0] * tx + theta[1] * ty + theta[2]
        yn = theta[3] * tx + theta[4] * ty + theta[5]
        corners.append((w0 + 0.5 * (xn + 1.0) * w, h0 + 0.5 * (yn + 1.0) * h))
    return corners


def cmd_regions(checkpoint, output_path, index=0, proposal=0,
                dataset_seed=None, scale=4):
    """Draw the K learned regions of one proposal over a validation image

    Returns
    -------
    thetas : ndarray, shape (K, 6)
    """
    model = load_model(checkpoint)
    val = _validation_set(model.config, dataset_seed)
    inst = val[index]
    roi = inst.proposals[proposal]
    thetas = model.region_thetas(inst.image, [roi])[0]

    pixels = np.clip(np.round(np.moveaxis(inst.image, 0, -1) * 255), 0, 255)
    canvas = Image.fromarray(pixels.astype(np.uint8), 'RGB')
    canvas = canvas.resize((canvas.width * scale, canvas.height * scale),
                           Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    x1, y1, x2, y2 = roi.box
    draw.rectangle([x1 * scale, y1 * scale, x2 * scale, y2 * scale],
                   outline=(255, 255, 255))
    for k, theta in enumerate(thetas):
        hue = derive_rng(k).uniform(80, 255, 3).astype(int)
        draw.polygon([(x * scale, y * scale)
                      for x, y in region_outline(theta, (roi.w0, roi.h0,
                                                         roi.w, roi.h))],
                     outline=tuple(int(c) for c in hue))
    canvas.save(output_path, format='PPM')
    logger.info("Drew %d regions of proposal %d on image %d to %s",
                len(thetas), proposal, inst.index, output_path)
    return thetas
