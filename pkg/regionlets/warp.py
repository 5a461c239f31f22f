"""Affine regionlet sampling and its analytic gradients.

A selected region is described by six normalized affine parameters
``theta = [t1, t2, t3, t4, t5, t6]`` relative to a detection window
``(w0, h0, w, h)``.  An ``H x W`` grid of regionlet centres in
``[-1, 1]^2`` is pushed through the affine map, scaled into the window
and divided by the feature stride; the feature map is then read with the
bilinear hat kernel ``max(0, 1 - |x - m|) * max(0, 1 - |y - n|)``.

Feature index ``m`` is the centre of the image cell
``[m * stride, (m + 1) * stride)``, hence the half-cell shift in
:func:`grid_generate`.

All functions accept arbitrary leading batch dimensions on ``theta`` and
``roi`` so one call can warp every region of every RoI.
"""
from dataclasses import dataclass, field

import numpy as np

from .core import DimensionError, MissingCacheError, check_finite


IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass
class SampleGrid:
    """Target and source coordinates of a regionlet grid.

    ``target_x``/``target_y`` have shape ``(H, W)``; the region-normalized
    (``region_*``) and feature-map (``source_*``) coordinates have shape
    ``lead + (H, W)``.  ``theta`` is ``lead + (6,)`` and ``roi`` is
    ``lead + (4,)`` holding ``(w0, h0, w, h)``.
    """
    target_x: np.ndarray
    target_y: np.ndarray
    region_x: np.ndarray
    region_y: np.ndarray
    source_x: np.ndarray
    source_y: np.ndarray
    theta: np.ndarray
    roi: np.ndarray
    stride: float

    @property
    def size(self):
        return self.target_x.shape

    @property
    def lead(self):
        return self.source_x.shape[:-2]


@dataclass
class WarpedRegionlets:
    """Sampled regionlet features ``V`` with shape ``lead + (C, H, W)``"""
    V: np.ndarray
    grid: SampleGrid
    feature_shape: tuple
    feature_id: object = field(default=None)


def roi_array(roi):
    """``(w0, h0, w, h)`` array from a RegionOfInterest or array-like"""
    if hasattr(roi, 'w0'):
        return np.array([roi.w0, roi.h0, roi.w, roi.h], dtype=np.float64)
    roi = np.asarray(roi, dtype=np.float64)
    if roi.shape[-1:] != (4,):
        raise DimensionError("roi must end in 4 values (w0, h0, w, h), "
                             "got shape {}".format(roi.shape))
    return roi


def target_coordinates(height, width):
    """Cell-centre target grid in ``[-1, 1]``, each of shape (H, W)"""
    if height < 1 or width < 1:
        raise ValueError("regionlet grid must be at least 1x1, got {}x{}"
                         .format(height, width))
    ty = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    tx = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    target_x, target_y = np.meshgrid(tx, ty)
    return target_x, target_y


def grid_generate(theta, roi, height, width, stride):
    """Map an ``H x W`` regionlet grid into feature-map coordinates

    Parameters
    ----------
    theta : array-like, shape lead + (6,)
        Normalized affine parameters
    roi : RegionOfInterest or array-like, shape lead + (4,)
        Detection window ``(w0, h0, w, h)`` in image pixels
    height, width : int
        Regionlet density ``H x W``
    stride : float
        Image pixels per feature-map cell

    Returns
    -------
    grid : SampleGrid
    """
    if not stride > 0:
        raise ValueError("stride must be positive, got {!r}".format(stride))
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape[-1:] != (6,):
        raise DimensionError("theta must end in 6 values, got shape {}"
                             .format(theta.shape))
    roi = roi_array(roi)
    lead = np.broadcast_shapes(theta.shape[:-1], roi.shape[:-1])
    theta = np.broadcast_to(theta, lead + (6,))
    roi = np.broadcast_to(roi, lead + (4,))

    target_x, target_y = target_coordinates(height, width)
    t = theta[..., None, None, :]
    region_x = t[..., 0] * target_x + t[..., 1] * target_y + t[..., 2]
    region_y = t[..., 3] * target_x + t[..., 4] * target_y + t[..., 5]
    r = roi[..., None, None, :]
    source_x = (r[..., 0] + 0.5 * (region_x + 1.0) * r[..., 2]) / stride - 0.5
    source_y = (r[..., 1] + 0.5 * (region_y + 1.0) * r[..., 3]) / stride - 0.5
    return SampleGrid(target_x, target_y, region_x, region_y,
                      source_x, source_y, theta, roi, float(stride))


# bilinear kernel ############################################################

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _corner_weights(fx, fy):
    return {(0, 0): (1.0 - fx) * (1.0 - fy), (0, 1): fx * (1.0 - fy),
            (1, 0): (1.0 - fx) * fy, (1, 1): fx * fy}


def _split(xs, ys):
    m0 = np.floor(xs).astype(np.int64)
    n0 = np.floor(ys).astype(np.int64)
    return m0, n0, xs - m0, ys - n0


def _gather(U, n, m):
    """U[:, n, m] with zeros for out-of-map neighbours, shape (C,) + n.shape"""
    height, width = U.shape[1:]
    valid = (n >= 0) & (n < height) & (m >= 0) & (m < width)
    values = U[:, np.clip(n, 0, height - 1), np.clip(m, 0, width - 1)]
    return np.where(valid, values, 0.0), valid


def _check_feature_map(U):
    if U.ndim != 3:
        raise DimensionError("feature map must be (C, H, W), got {}"
                             .format(U.shape))


def bilinear_sample(U, xs, ys):
    """Sample ``U`` at fractional ``(xs, ys)``

    Implements ``sum_n sum_m U[c, n, m] k(xs - m) k(ys - n)`` with the hat
    kernel ``k``, restricted to the four contributing neighbours.
    Neighbours outside the map contribute zero.

    Returns
    -------
    values : ndarray, shape (C,) + xs.shape
    """
    _check_feature_map(U)
    check_finite('sample coordinates', xs)
    check_finite('sample coordinates', ys)
    m0, n0, fx, fy = _split(xs, ys)
    weights = _corner_weights(fx, fy)
    out = np.zeros((U.shape[0],) + xs.shape)
    for dn, dm in _CORNERS:
        values, _ = _gather(U, n0 + dn, m0 + dm)
        out += values * weights[dn, dm]
    return out


def bilinear_sample_backward(upstream, xs, ys, feature_shape):
    """Scatter ``upstream`` (shape (C,) + xs.shape) back onto the map"""
    channels, height, width = feature_shape
    check_finite('sample coordinates', xs)
    check_finite('sample coordinates', ys)
    if upstream.shape != (channels,) + xs.shape:
        raise DimensionError("upstream has shape {}, expected {}".format(
            upstream.shape, (channels,) + xs.shape))
    m0, n0, fx, fy = _split(xs.ravel(), ys.ravel())
    weights = _corner_weights(fx, fy)
    flat_up = upstream.reshape(channels, -1)
    grad = np.zeros((channels, height * width))
    for dn, dm in _CORNERS:
        n, m = n0 + dn, m0 + dm
        valid = (n >= 0) & (n < height) & (m >= 0) & (m < width)
        index = (n * width + m)[valid]
        w = weights[dn, dm][valid]
        for c in range(channels):
            grad[c] += np.bincount(index, weights=flat_up[c, valid] * w,
                                   minlength=height * width)
    return grad.reshape(feature_shape)


def bilinear_sample_coordinate_grad(upstream, U, xs, ys):
    """Gradient of ``sum(upstream * bilinear_sample(U, xs, ys))`` w.r.t.
    the sample coordinates

    The kernel derivative follows the case table
    ``0 if |m - x| >= 1; +1 if m > x; -1 if m < x``; at lattice points
    (``|m - x| == 0``) the derivative is taken as zero.

    Returns
    -------
    d_xs, d_ys : ndarray, shape xs.shape
    """
    _check_feature_map(U)
    m0, n0, fx, fy = _split(xs, ys)
    g = {}
    for dn, dm in _CORNERS:
        g[dn, dm], _ = _gather(U, n0 + dn, m0 + dm)
    dv_dx = (g[0, 1] - g[0, 0]) * (1.0 - fy) + (g[1, 1] - g[1, 0]) * fy
    dv_dy = (g[1, 0] - g[0, 0]) * (1.0 - fx) + (g[1, 1] - g[0, 1]) * fx
    dv_dx = np.where(fx == 0.0, 0.0, dv_dx)
    dv_dy = np.where(fy == 0.0, 0.0, dv_dy)
    return (upstream * dv_dx).sum(axis=0), (upstream * dv_dy).sum(axis=0)


# regionlet warp #############################################################

def _channels_first(values, lead_ndim):
    # (C,) + lead + (H, W)  ->  lead + (C, H, W)
    return np.moveaxis(values, 0, lead_ndim)


def _channels_leading(values, lead_ndim):
    return np.moveaxis(values, lead_ndim, 0)


def warp_forward(U, grid, feature_id=None):
    """Sample the regionlets of ``grid`` from the feature map ``U``

    Parameters
    ----------
    U : ndarray, shape (C, Hf, Wf)
    grid : SampleGrid

    Returns
    -------
    warped : WarpedRegionlets
        ``V`` has shape ``grid.lead + (C, H, W)``
    """
    values = bilinear_sample(U, grid.source_x, grid.source_y)
    V = _channels_first(values, len(grid.lead))
    return WarpedRegionlets(V, grid, U.shape, feature_id)


def _check_upstream(upstream, grid, channels):
    expected = grid.lead + (channels,) + grid.size
    if upstream.shape != expected:
        raise DimensionError("upstream has shape {}, expected {}".format(
            upstream.shape, expected))


def warp_backward_input(upstream, grid, feature_shape):
    """Gradient of the loss w.r.t. the feature map

    ``dL/dU[c, n, m] = sum_p upstream[c, p] k(x_p - m) k(y_p - n)``

    Returns
    -------
    grad : ndarray, shape feature_shape
    """
    if grid is None:
        raise MissingCacheError("warp_backward_input needs the forward grid")
    _check_upstream(upstream, grid, feature_shape[0])
    lead_ndim = len(grid.lead)
    return bilinear_sample_backward(_channels_leading(upstream, lead_ndim),
                                     grid.source_x, grid.source_y,
                                     tuple(feature_shape))


def warp_backward_theta(upstream, grid, U):
    """Gradient of the loss w.r.t. the six affine parameters

    Chains ``dV/dx_s`` through ``dx_s/dx_n = w / (2 stride)`` and the affine
    map (``dx_n/dt1 = x_t``, ``dx_n/dt2 = y_t``, ``dx_n/dt3 = 1``, and the
    same for ``t4..t6`` through ``y_n``).

    Returns
    -------
    grad : ndarray, shape grid.lead + (6,)
    """
    if grid is None:
        raise MissingCacheError("warp_backward_theta needs the forward grid")
    _check_upstream(upstream, grid, U.shape[0])
    lead_ndim = len(grid.lead)
    d_xs, d_ys = bilinear_sample_coordinate_grad(
        _channels_leading(upstream, lead_ndim), U,
        grid.source_x, grid.source_y)
    d_xn = d_xs * (grid.roi[..., 2] / (2.0 * grid.stride))[..., None, None]
    d_yn = d_ys * (grid.roi[..., 3] / (2.0 * grid.stride))[..., None, None]
    axes = (-2, -1)
    return np.stack([(d_xn * grid.target_x).sum(axis=axes),
                     (d_xn * grid.target_y).sum(axis=axes),
                     d_xn.sum(axis=axes),
                     (d_yn * grid.target_x).sum(axis=axes),
                     (d_yn * grid.target_y).sum(axis=axes),
                     d_yn.sum(axis=axes)], axis=-1)
