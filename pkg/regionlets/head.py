"""Deep regionlet detection head.

Per RoI: RoI summary -> RSN -> K affine warps of ``H x W`` regionlets ->
gate -> regionlet pool -> concatenation -> ``FC -> ReLU`` -> class logits
and class-agnostic box deltas.  A three layer stride-2 convolutional
backbone produces the feature map.

Boxes are ``(x1, y1, x2, y2)`` in image pixels with area
``(x2 - x1) * (y2 - y1)``.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import DimensionError, check_finite
from .gating import (gate_backward, gate_forward, init_gate_params,
                     regionlet_pool_backward, regionlet_pool_forward)
from .selection import (RSN_PARAM_NAMES, RegionOfInterest, freeze_mask,
                        init_rsn_params, rois_to_array, rsn_backward, rsn_forward,
                        summarize_roi, summarize_roi_backward)
from .warp import (grid_generate, warp_backward_input, warp_backward_theta,
                   warp_forward)


logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    channels: tuple = (8, 16, 16)
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError("backbone.channels must be positive, got {}"
                             .format(self.channels))

    @property
    def stride(self):
        return 2 ** len(self.channels)

    @property
    def out_channels(self):
        return self.channels[-1]


@dataclass
class HeadConfig:
    num_classes: int = 4
    density: tuple = (4, 4)
    fc_hidden: int = 256
    nms_iou: float = 0.5
    score_thresh: float = 0.05
    lambda_reg: float = 1.0
    fg_iou: float = 0.5

    def __post_init__(self):
        self.density = tuple(int(d) for d in self.density)
        if self.num_classes < 2:
            raise ValueError("head.num_classes counts the background and "
                             "must be >= 2, got {}".format(self.num_classes))
        if len(self.density) != 2 or min(self.density) < 1:
            raise ValueError("head.density must be HxW with H, W >= 1, got "
                             "{}".format(self.density))


@dataclass(frozen=True)
class Detection:
    box: tuple
    label: int
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError("degenerate detection box {}".format(self.box))
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


# boxes ######################################################################

def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return ((boxes[..., 2] - boxes[..., 0]).clip(min=0) *
            (boxes[..., 3] - boxes[..., 1]).clip(min=0))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise intersection-over-union, shape (N, M)"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)[:, None, :]
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)[None, :, :]
    w = (np.minimum(a[..., 2], b[..., 2]) -
         np.maximum(a[..., 0], b[..., 0])).clip(min=0)
    h = (np.minimum(a[..., 3], b[..., 3]) -
         np.maximum(a[..., 1], b[..., 1])).clip(min=0)
    inter = w * h
    union = box_area(a) + box_area(b) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(box_a, box_b):
    return float(iou_matrix(box_a, box_b)[0, 0])


def encode_deltas(rois, targets):
    """``(dx, dy, dw, dh)`` taking box ``rois`` onto box ``targets``"""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    tw, th = targets[:, 2] - targets[:, 0], targets[:, 3] - targets[:, 1]
    dx = ((targets[:, 0] + 0.5 * tw) - (rois[:, 0] + 0.5 * rw)) / rw
    dy = ((targets[:, 1] + 0.5 * th) - (rois[:, 1] + 0.5 * rh)) / rh
    return np.stack([dx, dy, np.log(tw / rw), np.log(th / rh)], axis=1)


def decode_deltas(rois, deltas):
    """Inverse of :func:`encode_deltas`"""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    rw, rh = rois[:, 2] - rois[:, 0], rois[:, 3] - rois[:, 1]
    cx = rois[:, 0] + 0.5 * rw + deltas[:, 0] * rw
    cy = rois[:, 1] + 0.5 * rh + deltas[:, 1] * rh
    # keep exp() finite for wild predictions
    w = rw * np.exp(np.minimum(deltas[:, 2], 4.0))
    h = rh * np.exp(np.minimum(deltas[:, 3], 4.0))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h],
                    axis=1)


def assign_targets(rois, gt_boxes, gt_labels, fg_iou=0.5):
    """Class and box-delta targets for every RoI

    A RoI whose best IoU with any ground truth box is ``>= fg_iou`` takes
    that box's label and regression target; every other RoI is background
    (label 0) with a zero delta target.

    Parameters
    ----------
    rois : sequence of RegionOfInterest or array (R, 4) of boxes
    gt_boxes : array (G, 4)
    gt_labels : sequence of int, length G, values >= 1

    Returns
    -------
    labels : ndarray of int, shape (R,)
    deltas : ndarray, shape (R, 4)
    """
    boxes = _as_boxes(rois)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    labels = np.zeros(len(boxes), dtype=np.int64)
    deltas = np.zeros((len(boxes), 4))
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return labels, deltas
    overlaps = iou_matrix(boxes, gt_boxes)
    best = overlaps.argmax(axis=1)
    fg = overlaps[np.arange(len(boxes)), best] >= fg_iou
    labels[fg] = gt_labels[best[fg]]
    if np.any(fg):
        deltas[fg] = encode_deltas(boxes[fg], gt_boxes[best[fg]])
    return labels, deltas


def _as_boxes(rois):
    if len(rois) and isinstance(rois[0], RegionOfInterest):
        return np.array([r.box for r in rois], dtype=np.float64)
    return np.asarray(rois, dtype=np.float64).reshape(-1, 4)


def nms(detections, iou_threshold):
    """Greedy non-maximum suppression

    Detections are visited by descending score (equal scores keep their
    input order); any later detection overlapping a kept one with
    ``IoU > iou_threshold`` is dropped.
    """
    if not detections:
        return []
    scores = np.array([d.score for d in detections])
    boxes = np.array([d.box for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind='stable')
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(detections), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(detections[i])
        suppressed |= overlaps[i] > iou_threshold
    return kept


# backbone ###################################################################

def init_backbone_params(cfg, in_channels, rng):
    params = OrderedDict()
    c_in = in_channels
    for i, c_out in enumerate(cfg.channels, start=1):
        fan_in = c_in * cfg.kernel * cfg.kernel
        params['backbone.conv{}.w'.format(i)] = rng.normal(
            0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, cfg.kernel,
                                           cfg.kernel))
        params['backbone.conv{}.b'.format(i)] = np.zeros(c_out)
        c_in = c_out
    return params


def backbone_forward(image, params, cfg):
    """Stride-2 ``conv -> ReLU`` stages; returns features and the cache"""
    cache = []
    x = image
    for i in range(1, len(cfg.channels) + 1):
        w = params['backbone.conv{}.w'.format(i)]
        b = params['backbone.conv{}.b'.format(i)]
        z = core.conv2d_forward(x, w, b, stride=2)
        cache.append((x, z))
        x = core.relu_forward(z)
    return x, cache


def backbone_backward(cache, d_features, params, grads):
    upstream = d_features
    for i in range(len(cache), 0, -1):
        x, z = cache[i - 1]
        d_z = core.relu_backward(z, upstream)
        conv = core.conv2d_backward(x, params['backbone.conv{}.w'.format(i)],
                                    d_z, stride=2)
        grads['backbone.conv{}.w'.format(i)] = conv.wrt_params[0]
        grads['backbone.conv{}.b'.format(i)] = conv.wrt_params[1]
        upstream = conv.wrt_input
    return upstream


# head #######################################################################

def regionlet_feature_dim(cfg):
    return (cfg.rsn.num_regions * cfg.backbone.out_channels *
            cfg.pool.out_h * cfg.pool.out_w)


def init_head_params(cfg, rng):
    """Parameters of everything after the backbone, in a fixed order"""
    channels = cfg.backbone.out_channels
    height, width = cfg.head.density
    cfg.pool.windows(height, width)
    params = OrderedDict()
    params.update(init_rsn_params(
        cfg.rsn, channels * cfg.rsn.summary_grid ** 2, rng))
    if cfg.gate.enabled:
        params.update(init_gate_params(cfg.gate, cfg.rsn.num_regions,
                                       channels, height, width, rng))
    dim, hidden = regionlet_feature_dim(cfg), cfg.head.fc_hidden
    params['cls.fc.w'] = rng.normal(0.0, math.sqrt(2.0 / dim), (dim, hidden))
    params['cls.fc.b'] = np.zeros(hidden)
    params['cls.score.w'] = rng.normal(0.0, 0.01,
                                       (hidden, cfg.head.num_classes))
    params['cls.score.b'] = np.zeros(cfg.head.num_classes)
    params['cls.bbox.w'] = rng.normal(0.0, 0.001, (hidden, 4))
    params['cls.bbox.b'] = np.zeros(4)
    return params


@dataclass
class HeadOutput:
    """Per-RoI class logits/probabilities and box deltas"""
    logits: np.ndarray
    probs: np.ndarray
    deltas: np.ndarray
    thetas: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def head_forward(features, rois, params, cfg):
    """Run the regionlet head over every RoI

    Parameters
    ----------
    features : ndarray, shape (C, Hf, Wf)
    rois : sequence of RegionOfInterest, or array (R, 4) of (w0, h0, w, h)
    params : mapping of name -> ndarray
    cfg : object with ``backbone``, ``rsn``, ``gate``, ``pool``, ``head``

    Returns
    -------
    out : HeadOutput
    """
    rois = (rois_to_array(rois) if len(rois) and
            isinstance(rois[0], RegionOfInterest)
            else np.asarray(rois, dtype=np.float64).reshape(-1, 4))
    if len(rois) == 0:
        raise DimensionError("head_forward needs at least one RoI")
    stride = cfg.backbone.stride
    height, width = cfg.head.density

    summary, summary_grid = summarize_roi(features, rois, stride,
                                          cfg.rsn.summary_grid)
    thetas, rsn_cache = rsn_forward(summary, params)
    grid = grid_generate(thetas, rois[:, None, :], height, width, stride)
    V = warp_forward(features, grid).V

    if cfg.gate.enabled:
        gated, _, gate_cache = gate_forward(V, params['gate.w'],
                                            params['gate.b'],
                                            cfg.gate.granularity)
    else:
        gated, gate_cache = V, None
    pooled, pool_cache = regionlet_pool_forward(gated, cfg.pool)

    feat = pooled.reshape(len(rois), -1)
    z = core.fc_forward(feat, params['cls.fc.w'], params['cls.fc.b'])
    a = core.relu_forward(z)
    logits = core.fc_forward(a, params['cls.score.w'], params['cls.score.b'])
    deltas = core.fc_forward(a, params['cls.bbox.w'], params['cls.bbox.b'])
    check_finite('class logits', logits)
    check_finite('box deltas', deltas)

    cache = dict(features=features, summary_grid=summary_grid,
                 rsn=rsn_cache, grid=grid, gate=gate_cache,
                 pool=pool_cache, pooled_shape=pooled.shape, feat=feat,
                 z=z, a=a, params=params, cfg=cfg)
    return HeadOutput(logits, core.softmax(logits), deltas, thetas, cache)


def head_backward(cache, d_logits, d_deltas):
    """Back-propagate logit and delta gradients through the whole head

    Returns
    -------
    grads : OrderedDict
        Gradient for every head parameter
    d_features : ndarray
        Gradient w.r.t. the feature map, through both the regionlet warps
        and the RSN input summary
    """
    if not cache:
        raise core.MissingCacheError("head_backward needs the forward cache")
    params, cfg, features = cache['params'], cache['cfg'], cache['features']
    grads = OrderedDict()

    score = core.fc_backward(cache['a'], params['cls.score.w'], d_logits)
    bbox = core.fc_backward(cache['a'], params['cls.bbox.w'], d_deltas)
    d_z = core.relu_backward(cache['z'], score.wrt_input + bbox.wrt_input)
    fc = core.fc_backward(cache['feat'], params['cls.fc.w'], d_z)

    d_gated = regionlet_pool_backward(
        cache['pool'], fc.wrt_input.reshape(cache['pooled_shape']))
    if cache['gate'] is not None:
        gate = gate_backward(cache['gate'], d_gated)
        d_V = gate.wrt_input
        grads['gate.w'], grads['gate.b'] = gate.wrt_params
    else:
        d_V = d_gated

    grid = cache['grid']
    d_features = warp_backward_input(d_V, grid, features.shape)
    d_theta = warp_backward_theta(d_V, grid, features)
    rsn = rsn_backward(cache['rsn'], d_theta, mask=freeze_mask(cfg.rsn.mode))
    d_features = d_features + summarize_roi_backward(
        rsn.wrt_input, cache['summary_grid'], features.shape)

    grads.update(zip(RSN_PARAM_NAMES, rsn.wrt_params))
    grads['cls.fc.w'], grads['cls.fc.b'] = fc.wrt_params
    grads['cls.score.w'], grads['cls.score.b'] = score.wrt_params
    grads['cls.bbox.w'], grads['cls.bbox.b'] = bbox.wrt_params
    return grads, d_features


def detection_loss(out, labels, delta_targets, lambda_reg=1.0):
    """Cross-entropy plus ``lambda_reg`` times smooth-L1 on foreground RoIs

    Returns
    -------
    losses : tuple of float
        ``(total, classification, regression)``
    d_logits, d_deltas : ndarray
    """
    cls_loss, d_logits = core.softmax_cross_entropy(out.logits, labels)
    fg = np.asarray(labels) > 0
    reg_loss, d_fg = core.smooth_l1(out.deltas[fg], delta_targets[fg])
    d_deltas = np.zeros_like(out.deltas)
    d_deltas[fg] = lambda_reg * d_fg
    total = cls_loss + lambda_reg * reg_loss
    if not math.isfinite(total):
        raise core.NonFiniteError("detection loss is {!r} (cls {!r}, reg {!r})"
                                  .format(total, cls_loss, reg_loss))
    return (total, cls_loss, reg_loss), d_logits, d_deltas


def postprocess(out, rois, cfg, image_size):
    """Per-class scoring, box decoding, clipping and NMS

    Returns
    -------
    detections : list of Detection
        Sorted by descending score
    """
    boxes = decode_deltas(_as_boxes(rois), out.deltas)
    height, width = image_size
    boxes[:, 0::2] = boxes[:, 0::2].clip(0.0, width)
    boxes[:, 1::2] = boxes[:, 1::2].clip(0.0, height)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    detections = []
    num_candidates = 0
    for label in range(1, cfg.head.num_classes):
        scores = out.probs[:, label]
        keep = np.flatnonzero(valid & (scores >= cfg.head.score_thresh))
        candidates = [Detection(tuple(float(v) for v in boxes[i]), label,
                                float(scores[i])) for i in keep]
        num_candidates += len(candidates)
        detections.extend(nms(candidates, cfg.head.nms_iou))
    logger.debug("%d of %d candidates above %.3g kept after NMS",
                 len(detections), num_candidates, cfg.head.score_thresh)
    detections.sort(key=lambda d: -d.score)
    return detections
