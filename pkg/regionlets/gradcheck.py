"""Finite-difference gradient oracle.

Every analytic backward pass is compared against central differences of
its forward pass on randomized instances.  A check builds a list of
:class:`Probe` objects per seed; each probe holds a scalar loss closure,
the point it is evaluated at and the analytic gradient of that loss.  The
numeric side only ever calls forward code.

Backward functions are looked up through their modules at call time
(``core.fc_backward`` rather than an imported name) so that a test can
swap in a broken implementation and watch the check fail.
"""
import collections
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor

import doct as doc
import numpy as np

from . import core, gating, selection, warp
from .bench import DetectionInstance
from .conf import ExperimentConfig
from .core import derive_rng
from .head import assign_targets, detection_loss
from .model import RegionletDetector
from .selection import RegionOfInterest


logger = logging.getLogger(__name__)


STEP = 1e-5
DENOMINATOR_FLOOR = 1e-8
# absolute disagreement at or below this is float64 rounding in the
# differenced loss, not a gradient error
NOISE_FLOOR = 1e-9
KINK_DISTANCE = 1e-3

LAYER_TOL = 1e-6
WARP_THETA_TOL = 1e-5
END_TO_END_TOL = 1e-4


Probe = collections.namedtuple('Probe', ['name', 'point', 'forward',
                                         'analytic', 'coords'])
Probe.__new__.__defaults__ = (None,)


def central_diff(forward, point, index, step=STEP):
    """``(f(x + h e) - f(x - h e)) / 2h`` for the element ``index`` of x

    Parameters
    ----------
    forward : callable
        Scalar-valued function of an array shaped like ``point``
    point : array-like
    index : int or tuple
    step : float, optional

    Returns
    -------
    derivative : float
    """
    x = np.array(point, dtype=np.float64)
    original = x[index]
    x[index] = original + step
    plus = forward(x)
    x[index] = original - step
    minus = forward(x)
    return (plus - minus) / (2.0 * step)


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|, 1e-8)``, elementwise"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                             DENOMINATOR_FLOOR)
    return np.abs(analytic - numeric) / denominator


def _dot(weights, values):
    return float(np.sum(weights * values))


def _near_integer(values):
    return np.any(np.abs(values - np.round(values)) < KINK_DISTANCE)


def _compare(module_id, seed, probe, corrupt=None):
    point = np.asarray(probe.point, dtype=np.float64)
    coords = (list(np.ndindex(point.shape)) if probe.coords is None
              else list(probe.coords))
    if probe.coords is None:
        analytic = np.array([probe.analytic[c] for c in coords])
    else:
        analytic = np.asarray(probe.analytic, dtype=np.float64)
    if corrupt is not None:
        analytic = analytic * corrupt
    numeric = np.array([central_diff(probe.forward, point, c)
                        for c in coords])
    errors = relative_error(analytic, numeric)
    errors[np.abs(analytic - numeric) <= NOISE_FLOOR] = 0.0
    worst = int(np.argmax(errors)) if len(errors) else 0
    return dict(module=module_id, seed=int(seed), tensor=probe.name,
                max_rel_error=float(errors[worst]) if len(errors) else 0.0,
                worst_index=tuple(int(i) for i in coords[worst])
                if len(errors) else (),
                analytic=float(analytic[worst]) if len(errors) else 0.0,
                numeric=float(numeric[worst]) if len(errors) else 0.0)


# per-layer instances ########################################################

def _fc_probes(rng):
    x = rng.uniform(-1, 1, (3, 4))
    w = rng.uniform(-1, 1, (4, 5))
    b = rng.uniform(-1, 1, 5)
    r = rng.uniform(-1, 1, (3, 5))
    grads = core.fc_backward(x, w, r)
    return [
        Probe('input', x, lambda v: _dot(r, core.fc_forward(v, w, b)),
              grads.wrt_input),
        Probe('weights', w, lambda v: _dot(r, core.fc_forward(x, v, b)),
              grads.wrt_params[0]),
        Probe('bias', b, lambda v: _dot(r, core.fc_forward(x, w, v)),
              grads.wrt_params[1]),
    ]


def _conv2d_probes(rng):
    stride = int(rng.integers(1, 3))
    x = rng.uniform(-1, 1, (2, 5, 5))
    w = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    r = rng.uniform(-1, 1, core.conv2d_forward(x, w, b, stride).shape)
    grads = core.conv2d_backward(x, w, r, stride)
    return [
        Probe('input', x,
              lambda v: _dot(r, core.conv2d_forward(v, w, b, stride)),
              grads.wrt_input),
        Probe('weights', w,
              lambda v: _dot(r, core.conv2d_forward(x, v, b, stride)),
              grads.wrt_params[0]),
        Probe('bias', b,
              lambda v: _dot(r, core.conv2d_forward(x, w, v, stride)),
              grads.wrt_params[1]),
    ]


def _relu_probes(rng):
    # keep every input clear of the kink at zero
    x = rng.choice([-1.0, 1.0], (4, 6)) * rng.uniform(0.01, 1.0, (4, 6))
    r = rng.uniform(-1, 1, x.shape)
    return [Probe('input', x, lambda v: _dot(r, core.relu_forward(v)),
                  core.relu_backward(x, r))]


def _sigmoid_probes(rng):
    x = rng.uniform(-1, 1, (4, 6))
    r = rng.uniform(-1, 1, x.shape)
    return [Probe('input', x, lambda v: _dot(r, core.sigmoid_forward(v)),
                  core.sigmoid_backward(core.sigmoid_forward(x), r))]


def _softmax_ce_probes(rng):
    logits = rng.uniform(-1, 1, (4, 5)) * 3.0
    labels = rng.integers(0, 5, 4)
    _, grad = core.softmax_cross_entropy(logits, labels)
    return [Probe('logits', logits,
                  lambda v: core.softmax_cross_entropy(v, labels)[0], grad)]


def _smooth_l1_probes(rng):
    while True:
        target = rng.uniform(-1, 1, (3, 4))
        pred = target + rng.uniform(-2, 2, target.shape)
        if not np.any(np.abs(np.abs(pred - target) - 1.0) < KINK_DISTANCE):
            break
    _, grad = core.smooth_l1(pred, target)
    return [Probe('pred', pred, lambda v: core.smooth_l1(v, target)[0],
                  grad)]


def _warp_instance(rng, height=3, width=3, stride=2.0):
    """Feature map, theta and RoI with no sample within 1e-3 of a lattice
    line"""
    U = rng.uniform(-1, 1, (2, 6, 7))
    while True:
        theta = 0.6 * warp.IDENTITY_THETA + rng.uniform(-0.3, 0.3, 6)
        roi = np.array([rng.uniform(0, 4), rng.uniform(0, 3),
                        rng.uniform(4, 9), rng.uniform(4, 9)])
        grid = warp.grid_generate(theta, roi, height, width, stride)
        if not (_near_integer(grid.source_x) or
                _near_integer(grid.source_y)):
            return U, theta, roi, grid


def _warp_input_probes(rng):
    U, _, _, grid = _warp_instance(rng)
    r = rng.uniform(-1, 1, (U.shape[0],) + grid.size)
    return [Probe('U', U, lambda v: _dot(r, warp.warp_forward(v, grid).V),
                  warp.warp_backward_input(r, grid, U.shape))]


def _warp_theta_probes(rng):
    U, theta, roi, grid = _warp_instance(rng)
    height, width = grid.size
    r = rng.uniform(-1, 1, (U.shape[0], height, width))

    def loss(t):
        g = warp.grid_generate(t, roi, height, width, grid.stride)
        return _dot(r, warp.warp_forward(U, g).V)
    return [Probe('theta', theta, loss,
                  warp.warp_backward_theta(r, grid, U))]


def _rsn_probes(rng):
    cfg = selection.RsnConfig(num_regions=4, hidden=6, summary_grid=2)
    dim = 8
    while True:
        summary = rng.uniform(-1, 1, (2, dim))
        params = selection.init_rsn_params(cfg, dim, rng)
        params['rsn.head.w'] = rng.normal(0.0, 0.1,
                                          params['rsn.head.w'].shape)
        thetas, cache = selection.rsn_forward(summary, params)
        kinks = [np.abs(cache['z1']), np.abs(cache['z2']),
                 np.abs(np.abs(cache['raw']) - 1.0)]
        if min(k.min() for k in kinks) >= KINK_DISTANCE:
            break
    r = rng.uniform(-1, 1, thetas.shape)
    grads = selection.rsn_backward(cache, r)

    def with_param(name):
        def loss(v):
            changed = dict(params)
            changed[name] = v
            return _dot(r, selection.rsn_forward(summary, changed)[0])
        return loss
    probes = [Probe('summary', summary,
                    lambda v: _dot(r, selection.rsn_forward(v, params)[0]),
                    grads.wrt_input)]
    for name, grad in zip(selection.RSN_PARAM_NAMES, grads.wrt_params):
        probes.append(Probe(name, params[name], with_param(name), grad))
    return probes


def _gate_probes(rng):
    granularity = gating.GRANULARITIES[int(rng.integers(2))]
    channels, height, width = 2, 2, 2
    dim = channels * height * width
    num = dim if granularity == 'per-element' else height * width
    if rng.integers(2):
        regions = 3
        V = rng.uniform(-1, 1, (2, regions, channels, height, width))
        weight = rng.normal(0.0, 0.5, (regions, dim, num))
        bias = rng.normal(0.0, 0.5, (regions, num))
    else:
        V = rng.uniform(-1, 1, (3, channels, height, width))
        weight = rng.normal(0.0, 0.5, (dim, num))
        bias = rng.normal(0.0, 0.5, num)
    r = rng.uniform(-1, 1, V.shape)
    _, _, cache = gating.gate_forward(V, weight, bias, granularity)
    grads = gating.gate_backward(cache, r)

    def loss(v, w, b):
        return _dot(r, gating.gate_forward(v, w, b, granularity)[0])
    return [
        Probe('V', V, lambda v: loss(v, weight, bias), grads.wrt_input),
        Probe('weight', weight, lambda w: loss(V, w, bias),
              grads.wrt_params[0]),
        Probe('bias', bias, lambda b: loss(V, weight, b),
              grads.wrt_params[1]),
    ]


def _pool_probes(rng, cfg):
    while True:
        gated = rng.uniform(-1, 1, (2, 4, 4))
        windows, _ = gating._windows(gated, cfg)
        top = np.sort(windows, axis=-1)[..., -2:]
        if cfg.mode != 'max' or np.min(top[..., 1] - top[..., 0]) >= \
                KINK_DISTANCE:
            break
    pooled, cache = gating.regionlet_pool_forward(gated, cfg)
    r = rng.uniform(-1, 1, pooled.shape)
    return [Probe('gated', gated,
                  lambda v: _dot(r, gating.regionlet_pool_forward(v, cfg)[0]),
                  gating.regionlet_pool_backward(cache, r))]


def _pool_max_probes(rng):
    return _pool_probes(rng, gating.PoolConfig('max', 2, 2))


def _pool_avg_probes(rng):
    return _pool_probes(rng, gating.PoolConfig('average', 2, 1))


# end to end #################################################################

def tiny_config():
    """A detector small enough to difference parameter by parameter"""
    return ExperimentConfig.from_dict({
        'backbone.channels': (3, 4), 'rsn.num_regions': 4,
        'rsn.hidden': 8, 'rsn.summary_grid': 2, 'head.density': (2, 2),
        'head.fc_hidden': 8, 'pool.mode': 'average', 'pool.out': (1, 1),
        'bench.image_size': 16})


def _head_probes(rng, samples=10, min_grad=1e-4):
    model = RegionletDetector(tiny_config(),
                              seed=int(rng.integers(2 ** 31)))
    model.params['rsn.head.w'] = rng.normal(
        0.0, 0.05, model.params['rsn.head.w'].shape)
    image = rng.uniform(0, 1, (3, 16, 16))
    gt_boxes = np.array([[2.0, 3.0, 11.0, 10.0]])
    gt_labels = np.array([int(rng.integers(1, 4))])
    proposals = [RegionOfInterest(2.5, 2.5, 8.0, 7.5),
                 RegionOfInterest(1.0, 4.0, 10.0, 7.0),
                 RegionOfInterest(8.0, 9.0, 6.0, 5.0)]
    instance = DetectionInstance(image, gt_boxes, gt_labels, proposals)
    labels, targets = assign_targets(proposals, gt_boxes, gt_labels,
                                     model.config.head.fg_iou)
    _, grads = model.loss_and_grads(instance)

    candidates = [(name, idx) for name, g in grads.items()
                  for idx in zip(*np.nonzero(np.abs(g) > min_grad))]
    picks = rng.choice(len(candidates), min(samples, len(candidates)),
                       replace=False)
    chosen = collections.defaultdict(list)
    for k in sorted(picks):
        name, idx = candidates[k]
        chosen[name].append(tuple(int(i) for i in idx))

    def with_param(name):
        def loss(v):
            saved = model.params[name]
            model.params[name] = v
            try:
                out = model.forward(image, proposals)
                return detection_loss(out, labels, targets,
                                      model.config.head.lambda_reg)[0][0]
            finally:
                model.params[name] = saved
        return loss
    return [Probe(name, model.params[name], with_param(name),
                  [grads[name][c] for c in coords], coords)
            for name, coords in chosen.items()]


# registry ###################################################################

CHECKS = collections.OrderedDict([
    ('fc', (_fc_probes, LAYER_TOL)),
    ('conv2d', (_conv2d_probes, LAYER_TOL)),
    ('relu', (_relu_probes, LAYER_TOL)),
    ('sigmoid', (_sigmoid_probes, LAYER_TOL)),
    ('softmax_ce', (_softmax_ce_probes, LAYER_TOL)),
    ('smooth_l1', (_smooth_l1_probes, LAYER_TOL)),
    ('warp_input', (_warp_input_probes, LAYER_TOL)),
    ('warp_theta', (_warp_theta_probes, WARP_THETA_TOL)),
    ('rsn', (_rsn_probes, LAYER_TOL)),
    ('gate', (_gate_probes, LAYER_TOL)),
    ('pool_max', (_pool_max_probes, LAYER_TOL)),
    ('pool_avg', (_pool_avg_probes, LAYER_TOL)),
    ('head', (_head_probes, END_TO_END_TOL)),
])


def _check_seed(module_id, seed, corrupt=None):
    build, _ = CHECKS[module_id]
    rng = derive_rng(seed, zlib.crc32(module_id.encode('ascii')))
    return [_compare(module_id, seed, probe, corrupt) for probe in build(rng)]


def check_module(module_id, seeds=20, tol=None, corrupt=None, workers=1):
    """Run the randomized gradient check of one module

    Parameters
    ----------
    module_id : str
        A key of ``CHECKS``
    seeds : int or iterable of int
        An int ``n`` means seeds ``0 .. n - 1``
    tol : float, optional
        Maximum relative error; the module's default if omitted
    corrupt : float, optional
        Multiply every analytic gradient by this factor (negative control)
    workers : int, optional
        Processes to spread the seeds over

    Returns
    -------
    result : doct.Document
        ``passed``, ``tolerance``, ``worst`` and one GradReport per seed
        and probed tensor under ``reports``
    """
    if module_id not in CHECKS:
        raise KeyError("no gradient check named {!r}; choose from {}".format(
            module_id, list(CHECKS)))
    if tol is None:
        tol = CHECKS[module_id][1]
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            batches = list(pool.map(_check_seed, [module_id] * len(seeds),
                                    seeds, [corrupt] * len(seeds)))
    else:
        batches = [_check_seed(module_id, s, corrupt) for s in seeds]
    reports = []
    for batch in batches:
        for fields in batch:
            fields['passed'] = fields['max_rel_error'] <= tol
            reports.append(doc.Document('GradReport', fields))
    worst = max(reports, key=lambda r: r['max_rel_error'])
    passed = all(r['passed'] for r in reports)
    if passed:
        logger.info("gradcheck %s: %d reports, worst %.3g", module_id,
                    len(reports), worst['max_rel_error'])
    else:
        logger.warning("gradcheck %s FAILED: %s seed %d at %s analytic %r "
                       "numeric %r (rel %.3g > %.3g)", module_id,
                       worst['tensor'], worst['seed'], worst['worst_index'],
                       worst['analytic'], worst['numeric'],
                       worst['max_rel_error'], tol)
    return doc.Document('GradCheck', dict(module=module_id, tolerance=tol,
                                          passed=passed, reports=reports,
                                          worst=worst))
