import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionlets.core import derive_rng
from regionlets.gating import gate_forward, regionlet_pool_forward
from regionlets.head import (BackboneConfig, Detection, HeadConfig,
                             assign_targets, backbone_forward, decode_deltas,
                             detection_loss, encode_deltas, head_backward,
                             head_forward, init_backbone_params,
                             init_head_params, iou, iou_matrix, nms,
                             postprocess, regionlet_feature_dim)
from regionlets.selection import RegionOfInterest, rsn_forward, summarize_roi
from regionlets.warp import IDENTITY_THETA, grid_generate, warp_forward


def _box(draw_values):
    x1, y1, w, h = draw_values
    return (x1, y1, x1 + w, y1 + h)


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30),
                  st.floats(1, 30)).map(_box)


# ### boxes ###################################################################

def test_iou_hand_values():
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-12)
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    # touching edges do not overlap
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


@settings(max_examples=50)
@given(boxes, boxes)
def test_iou_bounded_and_symmetric(a, b):
    ab, ba = iou(a, b), iou(b, a)
    assert 0.0 <= ab <= 1.0
    assert abs(ab - ba) <= 1e-12
    assert abs(iou(a, a) - 1.0) <= 1e-12


def test_iou_matrix_shape():
    assert iou_matrix(np.zeros((3, 4)), np.ones((5, 4))).shape == (3, 5)


@settings(max_examples=50)
@given(boxes, boxes)
def test_decode_inverts_encode(roi, target):
    deltas = encode_deltas(roi, target)
    assert np.allclose(decode_deltas(roi, deltas)[0], target, rtol=0,
                       atol=1e-9)


def test_zero_deltas_keep_the_box():
    roi = np.array([[2.0, 4.0, 10.0, 8.0]])
    assert np.array_equal(decode_deltas(roi, np.zeros((1, 4))), roi)


def test_nms_cases():
    a = Detection((0, 0, 10, 10), 1, 0.9)
    b = Detection((1, 1, 10, 10), 1, 0.8)
    c = Detection((20, 20, 30, 30), 1, 0.7)
    assert nms([], 0.5) == []
    assert nms([b, a, c], 0.5) == [a, c]
    assert nms([a, b], 0.9) == [a, b]


def test_nms_equal_scores_keep_input_order():
    a = Detection((0, 0, 10, 10), 1, 0.5)
    b = Detection((0, 0, 10, 10), 1, 0.5)
    assert nms([a, b], 0.5)[0] is a
    assert nms([b, a], 0.5)[0] is b


def _reference_nms(detections, threshold):
    def area(r):
        return (r[2] - r[0]) * (r[3] - r[1])

    def overlap(a, b):
        w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        return w * h / (area(a) + area(b) - w * h)

    remaining = list(range(len(detections)))
    kept = []
    while remaining:
        best = max(remaining, key=lambda i: (detections[i].score, -i))
        kept.append(detections[best])
        remaining = [i for i in remaining if i != best and
                     overlap(detections[i].box, detections[best].box) <=
                     threshold]
    return kept


@pytest.mark.parametrize('seed', range(10))
@pytest.mark.parametrize('threshold', [0.3, 0.5, 0.7])
def test_nms_matches_exhaustive_search(seed, threshold):
    rng = derive_rng(seed)
    corners = rng.uniform(0, 40, (25, 2))
    sizes = rng.uniform(5, 20, (25, 2))
    scores = rng.integers(0, 8, 25) / 8.0
    detections = [Detection(tuple(np.r_[c, c + s]), 1, float(p))
                  for c, s, p in zip(corners, sizes, scores)]
    assert nms(detections, threshold) == _reference_nms(detections,
                                                         threshold)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((5, 5, 5, 10), 1, 0.5)
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 1, float('nan'))


def test_assign_targets():
    gt = np.array([[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]])
    rois = [RegionOfInterest(0, 0, 10, 10), RegionOfInterest(21, 20, 10, 10),
            RegionOfInterest(40, 40, 5, 5)]
    labels, deltas = assign_targets(rois, gt, [2, 3])
    assert list(labels) == [2, 3, 0]
    assert np.array_equal(deltas[0], np.zeros(4))
    assert deltas[1][0] == pytest.approx(-0.1)
    assert np.array_equal(deltas[2], np.zeros(4))
    labels, _ = assign_targets(rois, np.zeros((0, 4)), [])
    assert not np.any(labels)


# ### backbone and head #######################################################

def test_backbone_shapes():
    cfg = BackboneConfig(channels=(3, 4))
    assert cfg.stride == 4 and cfg.out_channels == 4
    params = init_backbone_params(cfg, 3, derive_rng(0))
    features, cache = backbone_forward(np.zeros((3, 16, 16)), params, cfg)
    assert features.shape == (4, 4, 4)
    assert len(cache) == 2


@pytest.mark.parametrize('kwargs', [dict(num_classes=1), dict(density=(4,)),
                                    dict(density=(0, 4))])
def test_head_config_errors(kwargs):
    with pytest.raises(ValueError):
        HeadConfig(**kwargs)


def _run_head(cfg, seed=0, rois=None):
    rng = derive_rng(seed)
    params = init_head_params(cfg, rng)
    features = rng.uniform(0, 1, (cfg.backbone.out_channels, 4, 4))
    if rois is None:
        rois = [RegionOfInterest(0, 0, 16, 16), RegionOfInterest(2, 3, 9, 7)]
    return params, features, head_forward(features, rois, params, cfg), rois


def test_head_output_shapes(tiny_cfg):
    params, features, out, _ = _run_head(tiny_cfg)
    assert out.logits.shape == (2, tiny_cfg.head.num_classes)
    assert out.deltas.shape == (2, 4)
    assert out.thetas.shape == (2, tiny_cfg.rsn.num_regions, 6)
    assert np.allclose(out.probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    grads, d_features = head_backward(out.cache, np.ones_like(out.logits),
                                      np.ones_like(out.deltas))
    assert set(grads) == set(params)
    for name in params:
        assert grads[name].shape == params[name].shape
    assert d_features.shape == features.shape


def test_feature_dimension(tiny_cfg):
    assert regionlet_feature_dim(tiny_cfg) == 4 * 4 * 1 * 1


def test_non_gating_head_has_no_gate(tiny_cfg):
    cfg = tiny_cfg.with_overrides({'gate.enabled': False})
    params, _, out, _ = _run_head(cfg)
    assert 'gate.w' not in params
    grads, _ = head_backward(out.cache, np.ones_like(out.logits),
                             np.zeros_like(out.deltas))
    assert 'gate.w' not in grads


def test_offset_only_head_freezes_scale(tiny_cfg):
    cfg = tiny_cfg.with_overrides({'rsn.mode': 'offset-only'})
    params, _, out, _ = _run_head(cfg)
    grads, _ = head_backward(out.cache, derive_rng(1).normal(
        0, 1, out.logits.shape), derive_rng(2).normal(0, 1, out.deltas.shape))
    head_b = grads['rsn.head.b'].reshape(-1, 6)
    assert not np.any(head_b[:, [0, 1, 3, 4]])
    assert not np.any(grads['rsn.head.w'].reshape(-1, 4, 6)[..., [0, 1, 3, 4]])


def test_background_only_has_no_regression_loss(tiny_cfg):
    _, _, out, _ = _run_head(tiny_cfg)
    losses, _, d_deltas = detection_loss(out, np.array([0, 0]),
                                         np.ones((2, 4)))
    total, cls_loss, reg_loss = losses
    assert reg_loss == 0.0
    assert total == cls_loss
    assert not np.any(d_deltas)


def test_loss_weights_regression(tiny_cfg):
    _, _, out, _ = _run_head(tiny_cfg)
    targets = np.ones((2, 4))
    (total, cls_loss, reg_loss), _, d_deltas = detection_loss(
        out, np.array([1, 0]), targets, lambda_reg=2.0)
    assert total == pytest.approx(cls_loss + 2.0 * reg_loss)
    assert reg_loss > 0
    assert not np.any(d_deltas[1])


def test_postprocess_sorted_and_clipped(tiny_cfg):
    cfg = tiny_cfg.with_overrides({'head.score_thresh': 0.0})
    rois = [RegionOfInterest(0, 0, 16, 16), RegionOfInterest(10, 10, 6, 6)]
    _, _, out, _ = _run_head(cfg, rois=rois)
    out.deltas[:] = [0.0, 0.0, 1.0, 1.0]
    detections = postprocess(out, rois, cfg, (16, 16))
    assert detections
    scores = [d.score for d in detections]
    assert scores == sorted(scores, reverse=True)
    for d in detections:
        x1, y1, x2, y2 = d.box
        assert 0.0 <= x1 < x2 <= 16.0 and 0.0 <= y1 < y2 <= 16.0
        assert 1 <= d.label < cfg.head.num_classes


def test_postprocess_logs_nms_counts(tiny_cfg, caplog):
    cfg = tiny_cfg.with_overrides({'head.score_thresh': 0.0})
    rois = [RegionOfInterest(0, 0, 16, 16), RegionOfInterest(10, 10, 6, 6)]
    _, _, out, _ = _run_head(cfg, rois=rois)
    with caplog.at_level(logging.DEBUG, logger='regionlets.head'):
        detections = postprocess(out, rois, cfg, (16, 16))
    message = caplog.records[-1].getMessage()
    assert message.startswith('{} of '.format(len(detections)))
    assert message.endswith('kept after NMS')


# ### module composition ######################################################

ROIS = np.array([[0.0, 0.0, 16.0, 16.0], [2.0, 3.0, 9.0, 7.0],
                 [5.0, 1.0, 8.0, 12.0]])


def _head_from_thetas(features, thetas, params, cfg):
    "Warp, gate, pool and classify with plain numpy for the dense layers."
    height, width = cfg.head.density
    grid = grid_generate(thetas, ROIS[:, None, :], height, width,
                         cfg.backbone.stride)
    V = warp_forward(features, grid).V
    if cfg.gate.enabled:
        V, _, _ = gate_forward(V, params['gate.w'], params['gate.b'],
                               cfg.gate.granularity)
    pooled, _ = regionlet_pool_forward(V, cfg.pool)
    feat = pooled.reshape(len(ROIS), -1)
    a = np.maximum(0.0, feat @ params['cls.fc.w'] + params['cls.fc.b'])
    return (a @ params['cls.score.w'] + params['cls.score.b'],
            a @ params['cls.bbox.w'] + params['cls.bbox.b'])


def _random_head(cfg, seed):
    rng = derive_rng(seed)
    params = init_head_params(cfg, rng)
    params['rsn.head.w'] = rng.normal(0, 0.1, params['rsn.head.w'].shape)
    features = rng.uniform(0, 1, (cfg.backbone.out_channels, 4, 4))
    return params, features


def test_head_is_bit_reproducible(tiny_cfg):
    params, features = _random_head(tiny_cfg, 3)
    first = head_forward(features, ROIS, params, tiny_cfg)
    second = head_forward(features, ROIS.copy(), params, tiny_cfg)
    for name in ('logits', 'probs', 'deltas', 'thetas'):
        assert np.array_equal(getattr(first, name), getattr(second, name))


@pytest.mark.parametrize('seed', range(3))
@pytest.mark.parametrize('mode', ['max', 'average'])
def test_head_equals_module_chain(tiny_cfg, seed, mode):
    cfg = tiny_cfg.with_overrides({'pool.mode': mode})
    params, features = _random_head(cfg, seed)
    out = head_forward(features, ROIS, params, cfg)
    summary, _ = summarize_roi(features, ROIS, cfg.backbone.stride,
                               cfg.rsn.summary_grid)
    thetas, _ = rsn_forward(summary, params)
    logits, deltas = _head_from_thetas(features, thetas, params, cfg)
    assert np.max(np.abs(out.thetas - thetas)) <= 1e-10
    assert np.max(np.abs(out.logits - logits)) <= 1e-10
    assert np.max(np.abs(out.deltas - deltas)) <= 1e-10


def test_open_gates_equal_a_head_without_gating(tiny_cfg):
    params, features = _random_head(tiny_cfg, 4)
    params['gate.w'] = np.zeros_like(params['gate.w'])
    params['gate.b'] = np.full_like(params['gate.b'], 50.0)
    gated = head_forward(features, ROIS, params, tiny_cfg)

    cfg = tiny_cfg.with_overrides({'gate.enabled': False})
    plain = {k: v for k, v in params.items() if not k.startswith('gate.')}
    ungated = head_forward(features, ROIS, plain, cfg)
    assert np.max(np.abs(gated.logits - ungated.logits)) <= 1e-12
    assert np.max(np.abs(gated.deltas - ungated.deltas)) <= 1e-12

    logits, deltas = _head_from_thetas(features, ungated.thetas, plain, cfg)
    assert np.max(np.abs(ungated.logits - logits)) <= 1e-12


def test_global_mode_is_a_whole_roi_head(tiny_cfg):
    cfg = tiny_cfg.with_overrides({'rsn.mode': 'global',
                                   'rsn.num_regions': 1})
    params = init_head_params(cfg, derive_rng(5))
    features = derive_rng(6).uniform(0, 1, (cfg.backbone.out_channels, 4, 4))
    out = head_forward(features, ROIS, params, cfg)
    identity = np.broadcast_to(IDENTITY_THETA, (len(ROIS), 1, 6))
    assert np.array_equal(out.thetas, identity)
    logits, deltas = _head_from_thetas(features, identity, params, cfg)
    assert np.max(np.abs(out.logits - logits)) <= 1e-12
    assert np.max(np.abs(out.deltas - deltas)) <= 1e-12
