"""The trainable detector: backbone, regionlet head and SGD state."""
import logging
from collections import OrderedDict

import numpy as np

from . import core
from .checkpoint import CheckpointFormatError
from .head import (assign_targets, backbone_backward, backbone_forward,
                   detection_loss, head_backward, head_forward,
                   init_backbone_params, init_head_params, postprocess)


logger = logging.getLogger(__name__)


# stream id for parameter initialisation, kept apart from data streams
_INIT_STREAM = 0x1417


class RegionletDetector(object):
    """A toy two-stage detector with a deep regionlet head

    Parameters
    ----------
    config : ExperimentConfig
        Anything with ``backbone``, ``rsn``, ``gate``, ``pool`` and
        ``head`` sections
    seed : int, optional
        Seeds the parameter initialisation
    in_channels : int, optional
    """
    def __init__(self, config, seed=0, in_channels=3):
        self.config = config
        self.seed = seed
        rng = core.derive_rng(seed, _INIT_STREAM)
        params = init_backbone_params(config.backbone, in_channels, rng)
        params.update(init_head_params(config, rng))
        self.params = params
        self._reset_state()

    def _reset_state(self):
        self.momentum = OrderedDict((k, np.zeros_like(v))
                                    for k, v in self.params.items())
        self.iteration = 0

    def __getstate__(self):
        return self.config, self.params

    def __setstate__(self, state):
        self.config, self.params = state
        self.seed = None
        self._reset_state()

    def __repr__(self):
        return '{}({} tensors, {} values)'.format(
            type(self).__name__, len(self.params), self.num_values)

    @property
    def num_values(self):
        return int(sum(v.size for v in self.params.values()))

    def state_dict(self):
        return OrderedDict((k, v.copy()) for k, v in self.params.items())

    def load_state_dict(self, params):
        """Replace every parameter; names and shapes must match exactly"""
        if list(params) != list(self.params):
            missing = set(self.params) - set(params)
            extra = set(params) - set(self.params)
            raise CheckpointFormatError(
                "parameter names do not match the model (missing {}, "
                "unexpected {})".format(sorted(missing), sorted(extra)))
        for name, value in params.items():
            if np.shape(value) != self.params[name].shape:
                raise CheckpointFormatError(
                    "{} has shape {} in the checkpoint, {} in the model"
                    .format(name, np.shape(value), self.params[name].shape))
        self.params = OrderedDict((k, np.array(v, dtype=np.float64))
                                  for k, v in params.items())
        self._reset_state()

    def parameter_norms(self):
        return OrderedDict((k, float(np.linalg.norm(v)))
                           for k, v in self.params.items())

    # inference ##############################################################

    def forward(self, image, rois):
        """Backbone and head over one image

        Parameters
        ----------
        image : ndarray, shape (C, H, W)
        rois : sequence of RegionOfInterest

        Returns
        -------
        out : HeadOutput
            The backbone cache is kept under ``out.cache['backbone']``
        """
        features, backbone_cache = backbone_forward(image, self.params,
                                                    self.config.backbone)
        out = head_forward(features, rois, self.params, self.config)
        out.cache['backbone'] = backbone_cache
        return out

    def detect(self, image, proposals):
        out = self.forward(image, proposals)
        return postprocess(out, proposals, self.config, image.shape[1:])

    def region_thetas(self, image, rois):
        """Affine parameters of the K selected regions, shape (R, K, 6)"""
        return self.forward(image, rois).thetas

    # training ###############################################################

    def loss_and_grads(self, instance):
        """Detection loss of one image and the gradient of every parameter

        Returns
        -------
        losses : tuple of float
            ``(total, classification, regression)``
        grads : OrderedDict
            In parameter order
        """
        out = self.forward(instance.image, instance.proposals)
        labels, targets = assign_targets(instance.proposals,
                                         instance.gt_boxes, instance.gt_labels,
                                         self.config.head.fg_iou)
        losses, d_logits, d_deltas = detection_loss(
            out, labels, targets, self.config.head.lambda_reg)
        grads, d_features = head_backward(out.cache, d_logits, d_deltas)
        backbone_backward(out.cache['backbone'], d_features, self.params,
                          grads)
        return losses, OrderedDict((k, grads[k]) for k in self.params)

    def train_step(self, instances, lr):
        """One SGD step on the mean loss of a batch of images

        Returns
        -------
        losses : tuple of float
            Batch means of ``(total, classification, regression)``
        """
        if not instances:
            raise ValueError("train_step needs at least one image")
        total = OrderedDict((k, np.zeros_like(v))
                            for k, v in self.params.items())
        sums = np.zeros(3)
        for inst in instances:
            losses, grads = self.loss_and_grads(inst)
            sums += losses
            for k, g in grads.items():
                total[k] += g
        scale = 1.0 / len(instances)
        momentum = self.config.train.momentum
        for k in self.params:
            try:
                self.params[k], self.momentum[k] = core.sgd_step(
                    self.params[k], total[k] * scale, lr, momentum,
                    self.momentum[k])
            except core.NonFiniteError as err:
                raise core.NonFiniteError("gradient of {} at iteration {}: {}"
                                          .format(k, self.iteration, err))
        self.iteration += 1
        logger.debug("iteration %d lr %g loss %.6f", self.iteration, lr,
                     sums[0] * scale)
        return tuple(float(v) for v in sums * scale)
