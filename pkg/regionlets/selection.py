"""Region Selection Network.

The RSN looks at a fixed ``S x S`` bilinear summary of a detection
window and predicts ``K`` sets of normalized affine parameters, one per
selected region.  A shared trunk ``FC(256) -> ReLU -> FC(256) -> ReLU``
feeds ``K`` independent ``FC(6)`` heads (stored as one ``hidden x 6K``
matrix).  The head weights start at zero and the head biases at a
non-overlapping cell grid, so training begins from an even partition of
the window.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import core
from .core import LayerGradients, MissingCacheError, check_finite
from .warp import IDENTITY_THETA, grid_generate, roi_array, warp_forward
from .warp import warp_backward_input


logger = logging.getLogger(__name__)


class UnknownModeError(ValueError):
    pass


MODES = ('full', 'offset-only', 'global')

RSN_PARAM_NAMES = ('rsn.fc1.w', 'rsn.fc1.b', 'rsn.fc2.w', 'rsn.fc2.b',
                   'rsn.head.w', 'rsn.head.b')


@dataclass(frozen=True)
class RegionOfInterest:
    """Detection window in image pixels: top-left ``(w0, h0)``, size ``w x h``"""
    w0: float
    h0: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("RegionOfInterest needs positive width and "
                             "height, got {}x{}".format(self.w, self.h))

    @classmethod
    def from_box(cls, box):
        x1, y1, x2, y2 = (float(v) for v in box)
        return cls(x1, y1, x2 - x1, y2 - y1)

    @property
    def box(self):
        return (self.w0, self.h0, self.w0 + self.w, self.h0 + self.h)

    def clamped(self, width, height, min_size=1.0):
        """Clip the window to a ``width x height`` image"""
        x1, y1, x2, y2 = self.box
        x1 = min(max(x1, 0.0), width - min_size)
        y1 = min(max(y1, 0.0), height - min_size)
        x2 = min(max(x2, x1 + min_size), width)
        y2 = min(max(y2, y1 + min_size), height)
        return RegionOfInterest(x1, y1, x2 - x1, y2 - y1)


def rois_to_array(rois):
    """Stack RegionOfInterest objects into an (R, 4) ``(w0, h0, w, h)`` array"""
    return np.array([roi_array(r) for r in rois], dtype=np.float64).reshape(
        -1, 4)


@dataclass
class RsnConfig:
    num_regions: int = 16
    hidden: int = 256
    summary_grid: int = 4
    mode: str = 'full'

    def __post_init__(self):
        if self.mode not in MODES:
            raise UnknownModeError("rsn.mode must be one of {}, got {!r}"
                                   .format(MODES, self.mode))
        grid_n = math.isqrt(self.num_regions)
        if self.num_regions < 1 or grid_n * grid_n != self.num_regions:
            raise ValueError("rsn.num_regions must be a perfect square, got "
                             "{}".format(self.num_regions))
        if self.mode == 'global' and self.num_regions != 1:
            raise ValueError("global mode selects a single region, got "
                             "rsn.num_regions = {}".format(self.num_regions))
        if self.hidden < 1 or self.summary_grid < 1:
            raise ValueError("rsn.hidden and rsn.summary_grid must be "
                             "positive")

    @property
    def grid_n(self):
        return math.isqrt(self.num_regions)


def cell_init(grid_n, row, col):
    """Affine parameters selecting cell ``(row, col)`` of an ``n x n`` grid

    Normalized y grows downward, so the top-left cell of a 3x3 grid is
    ``[1/3, 0, -2/3, 0, 1/3, -2/3]``.
    """
    if not (0 <= row < grid_n and 0 <= col < grid_n):
        raise IndexError("cell ({}, {}) outside a {}x{} grid".format(
            row, col, grid_n, grid_n))
    scale = 1.0 / grid_n
    return np.array([scale, 0.0, (2.0 * col + 1.0) / grid_n - 1.0,
                     0.0, scale, (2.0 * row + 1.0) / grid_n - 1.0])


def cell_grid(grid_n):
    """All ``n * n`` cells in row-major order, shape (n*n, 6)"""
    return np.stack([cell_init(grid_n, r, c)
                     for r in range(grid_n) for c in range(grid_n)])


def initial_thetas(cfg):
    if cfg.mode == 'global':
        return IDENTITY_THETA[None, :].copy()
    return cell_grid(cfg.grid_n)


def freeze_mask(mode):
    """Per-component gradient mask for the six affine parameters

    ``offset-only`` keeps the scale/shear entries ``t1, t2, t4, t5`` fixed.
    """
    if mode in ('full', 'global'):
        return np.ones(6)
    if mode == 'offset-only':
        return np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    raise UnknownModeError("unknown rsn mode {!r}".format(mode))


# RoI summary ################################################################

def _clamp_to_feature_cell(rois, stride):
    rois = np.array(rois, dtype=np.float64)
    for axis in (2, 3):
        small = rois[..., axis] < stride
        if np.any(small):
            logger.debug("%d RoI extents below one feature cell, clamped",
                         int(small.sum()))
            centre = rois[..., axis - 2] + 0.5 * rois[..., axis]
            rois[..., axis] = np.where(small, stride, rois[..., axis])
            rois[..., axis - 2] = np.where(small, centre - 0.5 * stride,
                                           rois[..., axis - 2])
    return rois


def summarize_roi(feature_map, roi, stride, summary_grid):
    """Bilinear ``S x S`` resample of the RoI window, flattened

    Parameters
    ----------
    feature_map : ndarray, shape (C, Hf, Wf)
    roi : RegionOfInterest or array-like, shape lead + (4,)
    stride : float
    summary_grid : int

    Returns
    -------
    summary : ndarray, shape lead + (C * S * S,)
    grid : SampleGrid
        Needed by :func:`summarize_roi_backward`
    """
    rois = _clamp_to_feature_cell(roi_array(roi), stride)
    grid = grid_generate(IDENTITY_THETA, rois, summary_grid, summary_grid,
                         stride)
    V = warp_forward(feature_map, grid).V
    return V.reshape(V.shape[:-3] + (-1,)), grid


def summarize_roi_backward(upstream, grid, feature_shape):
    channels = feature_shape[0]
    upstream = upstream.reshape(grid.lead + (channels,) + grid.size)
    return warp_backward_input(upstream, grid, feature_shape)


# network ####################################################################

def init_rsn_params(cfg, input_dim, rng):
    """Trunk weights He-normal, head weights zero, head biases at the cells"""
    hidden = cfg.hidden
    params = OrderedDict()
    params['rsn.fc1.w'] = rng.normal(0.0, math.sqrt(2.0 / input_dim),
                                     (input_dim, hidden))
    params['rsn.fc1.b'] = np.zeros(hidden)
    params['rsn.fc2.w'] = rng.normal(0.0, math.sqrt(2.0 / hidden),
                                     (hidden, hidden))
    params['rsn.fc2.b'] = np.zeros(hidden)
    params['rsn.head.w'] = np.zeros((hidden, 6 * cfg.num_regions))
    params['rsn.head.b'] = initial_thetas(cfg).ravel()
    return params


def rsn_forward(summary, params):
    """Predict K affine parameter sets for each RoI summary

    Parameters
    ----------
    summary : ndarray, shape (R, d)
    params : mapping
        Holds the arrays named in ``RSN_PARAM_NAMES``

    Returns
    -------
    thetas : ndarray, shape (R, K, 6)
        Clamped to ``[-1, 1]``
    cache : dict
    """
    z1 = core.fc_forward(summary, params['rsn.fc1.w'], params['rsn.fc1.b'])
    a1 = core.relu_forward(z1)
    z2 = core.fc_forward(a1, params['rsn.fc2.w'], params['rsn.fc2.b'])
    a2 = core.relu_forward(z2)
    raw = core.fc_forward(a2, params['rsn.head.w'], params['rsn.head.b'])
    check_finite('rsn output', raw)
    thetas = np.clip(raw, -1.0, 1.0).reshape(summary.shape[0], -1, 6)
    cache = dict(summary=summary, z1=z1, a1=a1, z2=z2, a2=a2, raw=raw,
                 params=params)
    return thetas, cache


def rsn_backward(cache, upstream_dtheta, mask=None):
    """Back-propagate ``dL/dtheta`` (shape (R, K, 6)) through the RSN

    Components with ``|raw| > 1`` were clamped and receive no gradient.
    ``mask`` (six 0/1 values, see :func:`freeze_mask`) zeroes frozen
    components before anything reaches the weights.

    Returns
    -------
    grads : LayerGradients
        ``wrt_params`` follows ``RSN_PARAM_NAMES``
    """
    if not cache:
        raise MissingCacheError("rsn_backward needs the rsn_forward cache")
    params = cache['params']
    raw = cache['raw']
    upstream = np.asarray(upstream_dtheta, dtype=np.float64)
    if mask is not None:
        upstream = upstream * mask
    upstream = upstream.reshape(raw.shape)
    d_raw = np.where(np.abs(raw) <= 1.0, upstream, 0.0)
    head = core.fc_backward(cache['a2'], params['rsn.head.w'], d_raw)
    d_z2 = core.relu_backward(cache['z2'], head.wrt_input)
    fc2 = core.fc_backward(cache['a1'], params['rsn.fc2.w'], d_z2)
    d_z1 = core.relu_backward(cache['z1'], fc2.wrt_input)
    fc1 = core.fc_backward(cache['summary'], params['rsn.fc1.w'], d_z1)
    return LayerGradients(fc1.wrt_input,
                          fc1.wrt_params + fc2.wrt_params + head.wrt_params)
