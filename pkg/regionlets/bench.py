"""Synthetic shape detection benchmark.

Images hold one to three anti-aliased coloured shapes (disk, triangle,
elongated rotated bar) on a dark noisy background.  Proposals are jittered
copies of the ground truth plus random negatives, standing in for a
region proposal network.  Every image is rendered from its own generator,
``derive_rng(seed, index)``, so a dataset is a pure function of
``(config, seed)`` and images can be produced in any order.
"""
import logging
import math
import os
from dataclasses import dataclass, field

import doct as doc
import numpy as np
from PIL import Image, ImageDraw

from .core import derive_rng
from .head import iou_matrix
from .selection import RegionOfInterest


logger = logging.getLogger(__name__)


CLASSES = ('disk', 'triangle', 'rotated-bar')

# 2x2 supersampling for anti-aliasing
_SUPERSAMPLE = 2


@dataclass
class BenchConfig:
    image_size: int = 64
    classes: tuple = CLASSES
    min_shapes: int = 1
    max_shapes: int = 3
    jitter: float = 0.2
    jitters_per_object: int = 3
    negatives: int = 4
    num_train: int = 160
    num_val: int = 40
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ValueError("unknown shape classes {}".format(sorted(unknown)))
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= bench.min_shapes <= bench.max_shapes")
        if self.image_size < 16:
            raise ValueError("bench.image_size must be at least 16")

    @property
    def num_classes(self):
        """Foreground classes plus background"""
        return len(self.classes) + 1


@dataclass
class DetectionInstance:
    """One image with its ground truth and proposals"""
    image: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    proposals: list
    index: int = field(default=0)

    @property
    def size(self):
        return self.image.shape[1:]


# rendering ##################################################################

def _shape_outline(kind, rng, size):
    """Vertices (or disk centre/radius) relative to the shape centre"""
    if kind == 'disk':
        radius = size * rng.uniform(0.08, 0.2)
        return ('disk', radius), np.array([[-radius, -radius],
                                           [radius, radius]])
    angle = rng.uniform(0.0, math.pi)
    if kind == 'triangle':
        radius = size * rng.uniform(0.11, 0.22)
        turns = angle + np.array([0.0, 2.0, 4.0]) * math.pi / 3.0
        points = radius * np.stack([np.cos(turns), np.sin(turns)], axis=1)
    else:
        length = size * rng.uniform(0.28, 0.55)
        # aspect ratio between 3 and 6
        thickness = length / rng.uniform(3.0, 6.0)
        along = np.array([math.cos(angle), math.sin(angle)])
        across = np.array([-along[1], along[0]])
        points = np.array([sa * 0.5 * length * along + sc * 0.5 * thickness *
                           across for sa, sc in ((-1, -1), (1, -1), (1, 1),
                                                 (-1, 1))])
    return ('polygon', points), points


def _render_alpha(outline, centre, size):
    """Coverage in [0, 1] of one shape, shape (size, size)"""
    scale = _SUPERSAMPLE
    canvas = Image.new('L', (size * scale, size * scale), 0)
    draw = ImageDraw.Draw(canvas)
    kind, geometry = outline
    cx, cy = centre
    if kind == 'disk':
        r = geometry
        draw.ellipse([scale * (cx - r), scale * (cy - r),
                      scale * (cx + r) - 1, scale * (cy + r) - 1], fill=255)
    else:
        draw.polygon([(scale * (cx + x), scale * (cy + y))
                      for x, y in geometry], fill=255)
    alpha = np.asarray(canvas, dtype=np.float64) / 255.0
    return alpha.reshape(size, scale, size, scale).mean(axis=(1, 3))


def render_instance(cfg, rng):
    """Render one image; returns ``(image, gt_boxes, gt_labels)``"""
    size = cfg.image_size
    image = rng.uniform(0.0, 0.1, (3, size, size))
    boxes, labels = [], []
    for _ in range(int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))):
        label = int(rng.integers(len(cfg.classes)))
        kind = cfg.classes[label]
        outline, extent = _shape_outline(kind, rng, size)
        lo, hi = extent.min(axis=0), extent.max(axis=0)
        cx = rng.uniform(-lo[0] + 1.0, size - hi[0] - 1.0)
        cy = rng.uniform(-lo[1] + 1.0, size - hi[1] - 1.0)
        colour = rng.uniform(0.35, 1.0, 3)
        alpha = _render_alpha(outline, (cx, cy), size)
        image = image * (1.0 - alpha) + colour[:, None, None] * alpha
        box = (np.clip(cx + lo[0], 0, size), np.clip(cy + lo[1], 0, size),
               np.clip(cx + hi[0], 0, size), np.clip(cy + hi[1], 0, size))
        boxes.append(box)
        labels.append(label + 1)
    return (image, np.array(boxes, dtype=np.float64).reshape(-1, 4),
            np.array(labels, dtype=np.int64))


def make_proposals(cfg, gt_boxes, rng):
    """Jittered ground truth plus random negative windows"""
    size = float(cfg.image_size)
    proposals = []
    for x1, y1, x2, y2 in gt_boxes:
        w, h = x2 - x1, y2 - y1
        for _ in range(cfg.jitters_per_object):
            sx, sy, dx, dy = rng.uniform(-cfg.jitter, cfg.jitter, 4)
            jw, jh = w * (1.0 + sx), h * (1.0 + sy)
            cx, cy = 0.5 * (x1 + x2) + dx * w, 0.5 * (y1 + y2) + dy * h
            proposals.append(RegionOfInterest(
                cx - 0.5 * jw, cy - 0.5 * jh, jw, jh).clamped(size, size))
    for _ in range(cfg.negatives):
        w, h = rng.uniform(6.0, size / 2.0, 2)
        x, y = rng.uniform(0.0, size - w), rng.uniform(0.0, size - h)
        proposals.append(RegionOfInterest(x, y, w, h))
    return proposals


def generate_instance(cfg, seed, index):
    rng = derive_rng(seed, index)
    image, boxes, labels = render_instance(cfg, rng)
    return DetectionInstance(image, boxes, labels,
                             make_proposals(cfg, boxes, rng), index)


def generate_dataset(cfg, seed, count=None, start=0):
    """Render ``count`` instances with indices ``start, start + 1, ...``

    Parameters
    ----------
    cfg : BenchConfig
    seed : int
    count : int, optional
        ``cfg.num_train`` by default
    start : int, optional

    Returns
    -------
    instances : list of DetectionInstance
    """
    if count is None:
        count = cfg.num_train
    return [generate_instance(cfg, seed, i)
            for i in range(start, start + count)]


def train_val_split(cfg, seed=None):
    """Training images then validation images from one index range"""
    seed = cfg.seed if seed is None else seed
    train = generate_dataset(cfg, seed, cfg.num_train, 0)
    val = generate_dataset(cfg, seed, cfg.num_val, cfg.num_train)
    return train, val


# evaluation #################################################################

def _average_precision(recall, precision):
    """Area under the interpolated (monotone) precision-recall curve"""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _class_ap(label, detections_per_image, gt_per_image, iou_thresh):
    gts = []
    for boxes, labels in gt_per_image:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        gts.append(boxes[np.asarray(labels) == label])
    num_pos = sum(len(g) for g in gts)
    if num_pos == 0:
        return None
    ranked = [(d.score, i, d.box)
              for i, dets in enumerate(detections_per_image)
              for d in dets if d.label == label]
    if not ranked:
        return 0.0
    order = np.argsort([-r[0] for r in ranked], kind='stable')
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked))
    for rank, k in enumerate(order):
        _, image, box = ranked[k]
        if len(gts[image]) == 0:
            continue
        overlaps = np.where(matched[image], -1.0,
                            iou_matrix(box, gts[image])[0])
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thresh:
            matched[image][best] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_pos
    precision = cum_tp / np.arange(1, len(ranked) + 1)
    return _average_precision(recall, precision)


def evaluate_map(detections_per_image, gt_per_image, num_classes,
                 iou_thresh=0.5):
    """VOC-style average precision per class and their mean

    Detections are ranked by score over the whole set; each is matched to
    the highest-IoU ground truth box of its image and class that is still
    unmatched, and counts as a true positive if that IoU reaches
    ``iou_thresh``.  AP integrates the interpolated precision over every
    recall point.

    Parameters
    ----------
    detections_per_image : list of list of Detection
    gt_per_image : list of (boxes, labels)
    num_classes : int
        Including background (label 0)
    iou_thresh : float, optional

    Returns
    -------
    report : doct.Document
        ``ap`` maps each label with ground truth to its AP, ``map`` is
        their mean (0.0 if no class has ground truth)
    """
    if len(detections_per_image) != len(gt_per_image):
        raise ValueError("{} detection lists for {} images".format(
            len(detections_per_image), len(gt_per_image)))
    aps = {}
    for label in range(1, num_classes):
        ap = _class_ap(label, detections_per_image, gt_per_image, iou_thresh)
        if ap is not None:
            aps[label] = ap
    mean = float(np.mean(list(aps.values()))) if aps else 0.0
    return doc.Document('MapReport', {'ap': aps, 'map': mean,
                                      'iou_thresh': iou_thresh})


COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def evaluate_coco_map(detections_per_image, gt_per_image, num_classes):
    """Mean of :func:`evaluate_map` over IoU thresholds 0.50:0.05:0.95"""
    maps = [evaluate_map(detections_per_image, gt_per_image, num_classes,
                         t)['map'] for t in COCO_THRESHOLDS]
    return float(np.mean(maps))


# image files ################################################################

def write_ppm(path, image):
    """Write a (3, H, W) image with values in [0, 1] as binary PPM"""
    pixels = np.clip(np.round(np.moveaxis(image, 0, -1) * 255.0), 0, 255)
    Image.fromarray(pixels.astype(np.uint8), 'RGB').save(path, format='PPM')


def read_ppm(path):
    """Read any RGB image file into a (3, H, W) float array in [0, 1]"""
    with Image.open(path) as im:
        pixels = np.asarray(im.convert('RGB'), dtype=np.float64)
    return np.moveaxis(pixels, -1, 0) / 255.0


def export_dataset(instances, directory, classes=CLASSES):
    """One PPM per image plus ``annotations.txt``

    Annotation lines read ``<idx> <class> <x1> <y1> <x2> <y2>``.
    """
    os.makedirs(directory, exist_ok=True)
    lines = []
    for inst in instances:
        write_ppm(os.path.join(directory, '{:05d}.ppm'.format(inst.index)),
                  inst.image)
        for box, label in zip(inst.gt_boxes, inst.gt_labels):
            lines.append('{} {} {:.2f} {:.2f} {:.2f} {:.2f}'.format(
                inst.index, classes[label - 1], *box))
    with open(os.path.join(directory, 'annotations.txt'), 'w') as f:
        f.write('\n'.join(lines) + ('\n' if lines else ''))
    logger.info("Exported %d images to %s", len(instances), directory)
