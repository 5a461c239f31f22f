"""Soft regionlet selection and regionlet pooling.

The gate is a fully connected layer followed by a sigmoid; its outputs
weight the warped regionlet features elementwise.  The pool then compacts
each region's ``H x W`` regionlets into ``out_h x out_w`` cells by max or
average over equal, non-overlapping windows.

Both operate on arrays shaped ``lead + (C, H, W)``.  Gate weights are
either one ``(D, G)`` matrix or a stack ``(K, D, G)`` holding one gate per
region, in which case the last leading axis of ``V`` indexes the region.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import core
from .core import (DimensionError, LayerGradients, MissingCacheError,
                   check_shape)


class PartitionError(ValueError):
    pass


GRANULARITIES = ('per-element', 'per-regionlet')
POOL_MODES = ('max', 'average')


@dataclass
class GateConfig:
    enabled: bool = True
    granularity: str = 'per-element'

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError("gate.granularity must be one of {}, got {!r}"
                             .format(GRANULARITIES, self.granularity))

    def num_gates(self, channels, height, width):
        if self.granularity == 'per-element':
            return channels * height * width
        return height * width


@dataclass
class PoolConfig:
    mode: str = 'max'
    out_h: int = 1
    out_w: int = 1

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ValueError("pool.mode must be one of {}, got {!r}"
                             .format(POOL_MODES, self.mode))
        if self.out_h < 1 or self.out_w < 1:
            raise PartitionError("pool output must be at least 1x1, got "
                                 "{}x{}".format(self.out_h, self.out_w))

    def windows(self, height, width):
        """Window size ``(kh, kw)`` for an ``H x W`` regionlet grid"""
        if (self.out_h > height or self.out_w > width or
                height % self.out_h or width % self.out_w):
            raise PartitionError(
                "{}x{} pool output does not evenly partition a {}x{} grid"
                .format(self.out_h, self.out_w, height, width))
        return height // self.out_h, width // self.out_w


# gate #######################################################################

def init_gate_params(cfg, num_regions, channels, height, width, rng):
    """One gate per region; small weights so every gate starts near 0.5"""
    dim = channels * height * width
    gates = cfg.num_gates(channels, height, width)
    params = OrderedDict()
    params['gate.w'] = rng.normal(0.0, 1.0 / math.sqrt(dim),
                                  (num_regions, dim, gates)) * 0.1
    params['gate.b'] = np.zeros((num_regions, gates))
    return params


def _gate_layout(V, weight, bias, granularity):
    if V.ndim < 3:
        raise DimensionError("V must be (..., C, H, W), got {}"
                             .format(V.shape))
    if granularity not in GRANULARITIES:
        raise ValueError("unknown gate granularity {!r}".format(granularity))
    channels, height, width = V.shape[-3:]
    dim = channels * height * width
    num = dim if granularity == 'per-element' else height * width
    if weight.ndim == 3:
        if V.ndim < 4 or V.shape[-4] != weight.shape[0]:
            raise DimensionError("stacked gate weights {} need V with a "
                                 "region axis of {}, got {}".format(
                                     weight.shape, weight.shape[0], V.shape))
    elif weight.ndim != 2:
        raise DimensionError("gate weights must be (D, G) or (K, D, G), got "
                             "{}".format(weight.shape))
    check_shape('gate weights', weight, weight.shape[:-2] + (dim, num))
    check_shape('gate bias', bias, weight.shape[:-2] + (num,))
    return dim, num


def gate_forward(V, weight, bias, granularity='per-element'):
    """Sigmoid gates from ``FC(flatten(V))`` multiplied into ``V``

    Parameters
    ----------
    V : ndarray, shape lead + (C, H, W)
    weight : ndarray, shape (D, G) or (K, D, G)
    bias : ndarray, shape (G,) or (K, G)
    granularity : {'per-element', 'per-regionlet'}
        One gate per value of V (``G = C*H*W``) or one per regionlet
        shared across channels (``G = H*W``)

    Returns
    -------
    gated : ndarray, same shape as V
    gates : ndarray, shape lead + (G,)
    cache : dict
    """
    dim, num = _gate_layout(V, weight, bias, granularity)
    flat = V.reshape(V.shape[:-3] + (dim,))
    if weight.ndim == 2:
        pre = flat @ weight + bias
    else:
        pre = np.einsum('...kd,kdg->...kg', flat, weight) + bias
    gates = core.sigmoid_forward(pre)
    gated = V * _gate_view(gates, V.shape, granularity)
    cache = dict(V=V, gates=gates, weight=weight,
                 granularity=granularity)
    return gated, gates, cache


def _gate_view(gates, v_shape, granularity):
    if granularity == 'per-element':
        return gates.reshape(v_shape)
    return gates.reshape(v_shape[:-3] + (1,) + v_shape[-2:])


def gate_backward(cache, upstream):
    """Gradients of :func:`gate_forward`

    V reaches the output twice, through the product and through the gate
    input; both paths are summed.

    Returns
    -------
    grads : LayerGradients
        ``wrt_params`` is ``[d_weight, d_bias]``
    """
    if not cache:
        raise MissingCacheError("gate_backward needs the gate_forward cache")
    V, gates, weight = cache['V'], cache['gates'], cache['weight']
    granularity = cache['granularity']
    check_shape('gate upstream', upstream, V.shape)

    d_direct = upstream * _gate_view(gates, V.shape, granularity)
    d_gates = upstream * V
    if granularity == 'per-regionlet':
        d_gates = d_gates.sum(axis=-3)
    d_pre = core.sigmoid_backward(gates, d_gates.reshape(gates.shape))

    dim, num = weight.shape[-2:]
    flat = V.reshape(V.shape[:-3] + (dim,))
    if weight.ndim == 2:
        rows = flat.reshape(-1, dim)
        d_rows = d_pre.reshape(-1, num)
        fc = core.fc_backward(rows, weight, d_rows)
        d_flat, (d_weight, d_bias) = fc.wrt_input, fc.wrt_params
    else:
        regions = weight.shape[0]
        rows = flat.reshape(-1, regions, dim)
        d_rows = d_pre.reshape(-1, regions, num)
        d_weight = np.einsum('rkd,rkg->kdg', rows, d_rows)
        d_bias = d_rows.sum(axis=0)
        d_flat = np.einsum('rkg,kdg->rkd', d_rows, weight)
    d_V = d_direct + d_flat.reshape(V.shape)
    return LayerGradients(d_V, [d_weight, d_bias])


# regionlet pool #############################################################

def _windows(values, cfg):
    height, width = values.shape[-2:]
    kh, kw = cfg.windows(height, width)
    split = values.reshape(values.shape[:-2] +
                           (cfg.out_h, kh, cfg.out_w, kw))
    # (..., oh, kh, ow, kw) -> (..., oh, ow, kh * kw)
    split = np.swapaxes(split, -3, -2)
    return split.reshape(split.shape[:-2] + (kh * kw,)), (kh, kw)


def regionlet_pool_forward(gated, cfg):
    """Max or average over equal windows of the regionlet grid

    Ties in max mode go to the first element in row-major window order.

    Returns
    -------
    pooled : ndarray, shape lead + (C, out_h, out_w)
    cache : dict
    """
    if gated.ndim < 3:
        raise DimensionError("pool input must be (..., C, H, W), got {}"
                             .format(gated.shape))
    windows, (kh, kw) = _windows(gated, cfg)
    cache = dict(shape=gated.shape, cfg=cfg, window=(kh, kw))
    if cfg.mode == 'max':
        index = np.argmax(windows, axis=-1)
        cache['index'] = index
        pooled = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    else:
        pooled = windows.mean(axis=-1)
    return pooled, cache


def regionlet_pool_backward(cache, upstream):
    """Route ``upstream`` back through :func:`regionlet_pool_forward`"""
    if not cache:
        raise MissingCacheError("regionlet_pool_backward needs the forward "
                                "cache")
    shape, cfg = cache['shape'], cache['cfg']
    kh, kw = cache['window']
    check_shape('pool upstream', upstream,
                shape[:-2] + (cfg.out_h, cfg.out_w))
    if cfg.mode == 'max':
        grad = np.zeros(upstream.shape + (kh * kw,))
        np.put_along_axis(grad, cache['index'][..., None],
                          upstream[..., None], axis=-1)
    else:
        grad = np.repeat(upstream[..., None] / (kh * kw), kh * kw, axis=-1)
    grad = grad.reshape(upstream.shape + (kh, kw))
    # (..., oh, ow, kh, kw) -> (..., oh, kh, ow, kw)
    grad = np.swapaxes(grad, -3, -2)
    return grad.reshape(shape)
