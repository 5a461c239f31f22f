"""Dense float64 layers with hand-written forward and backward passes.

Every function here is a pure function of its arguments.  Tensors are
``numpy.ndarray`` objects of dtype float64; shapes are checked explicitly
and a :class:`DimensionError` is raised instead of broadcasting.
"""
import collections

import numpy as np


class DimensionError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class MissingCacheError(RuntimeError):
    pass


LayerGradients = collections.namedtuple('LayerGradients',
                                        ['wrt_input', 'wrt_params'])
LayerGradients.__doc__ = """Gradients of one layer.

wrt_input : ndarray
    Gradient with respect to the layer input, same shape as the input.
wrt_params : list of ndarray
    Gradients with respect to each parameter, in the layer's parameter
    order and with the parameter shapes.
"""


_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(value):
    """One round of the splitmix64 mixing function

    Parameters
    ----------
    value : int
        Any integer, reduced modulo 2**64

    Returns
    -------
    mixed : int
        64-bit unsigned result
    """
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_rng(seed, *stream):
    """Return a private generator for ``(seed, *stream)``

    The stream ids are folded into the seed with :func:`splitmix64` so
    that, e.g., image ``i`` of a dataset gets the same generator no matter
    which process renders it.
    """
    state = splitmix64(int(seed))
    for s in stream:
        state = splitmix64(state ^ int(s))
    return np.random.Generator(np.random.PCG64(state))


def as_tensor(values):
    """Copy ``values`` into a C-ordered float64 array"""
    return np.array(values, dtype=np.float64, order='C')


def check_shape(name, array, shape):
    """Raise DimensionError unless ``array.shape == shape``

    ``None`` entries in ``shape`` match any extent.
    """
    if len(array.shape) != len(shape) or any(
            s is not None and s != a for a, s in zip(array.shape, shape)):
        raise DimensionError("{} has shape {}, expected {}".format(
            name, tuple(array.shape), tuple(shape)))


def check_finite(name, array):
    """Raise NonFiniteError if ``array`` holds NaN or Inf"""
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(np.asarray(array)))
        raise NonFiniteError(
            "non-finite values in {} (first bad index {}, {} bad of {})"
            .format(name, tuple(bad[0]), len(bad), np.size(array)))


# fully connected ############################################################

def fc_forward(inputs, weights, bias):
    """Affine layer ``inputs @ weights + bias``

    Parameters
    ----------
    inputs : ndarray, shape (batch, d_in)
    weights : ndarray, shape (d_in, d_out)
    bias : ndarray, shape (d_out,)

    Returns
    -------
    out : ndarray, shape (batch, d_out)
    """
    if inputs.ndim != 2 or weights.ndim != 2:
        raise DimensionError("fc expects 2-d input and weights, got {} and {}"
                             .format(inputs.shape, weights.shape))
    check_shape('fc weights', weights, (inputs.shape[1], None))
    check_shape('fc bias', bias, (weights.shape[1],))
    return inputs @ weights + bias


def fc_backward(inputs, weights, upstream):
    """Gradients of :func:`fc_forward`

    Returns
    -------
    grads : LayerGradients
        ``wrt_params`` is ``[d_weights, d_bias]``
    """
    check_shape('fc upstream', upstream, (inputs.shape[0], weights.shape[1]))
    return LayerGradients(upstream @ weights.T,
                          [inputs.T @ upstream, upstream.sum(axis=0)])


# convolution ################################################################

def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _conv_geometry(inputs, weights, stride, pad):
    if inputs.ndim != 3 or weights.ndim != 4:
        raise DimensionError("conv2d expects (C, H, W) input and "
                             "(C_out, C_in, kh, kw) weights, got {} and {}"
                             .format(inputs.shape, weights.shape))
    if weights.shape[1] != inputs.shape[0]:
        raise DimensionError("conv2d weights expect {} input channels, got {}"
                             .format(weights.shape[1], inputs.shape[0]))
    if stride < 1:
        raise ValueError("stride must be >= 1, got {!r}".format(stride))
    _, kh, kw = weights.shape[1:]
    if pad is None:
        pad = kh // 2
    out_h = conv_output_size(inputs.shape[1], kh, stride, pad)
    out_w = conv_output_size(inputs.shape[2], kw, stride, pad)
    if out_h < 1 or out_w < 1:
        raise DimensionError("conv2d input {} too small for kernel {}"
                             .format(inputs.shape, weights.shape))
    return pad, out_h, out_w


def conv2d_forward(inputs, weights, bias, stride=1, pad=None):
    """Zero-padded 2-D cross-correlation of a single image

    Parameters
    ----------
    inputs : ndarray, shape (C_in, H, W)
    weights : ndarray, shape (C_out, C_in, kh, kw)
    bias : ndarray, shape (C_out,)
    stride : int, optional
    pad : int, optional
        Zero padding on every side, ``kh // 2`` by default

    Returns
    -------
    out : ndarray, shape (C_out, H_out, W_out)
    """
    pad, out_h, out_w = _conv_geometry(inputs, weights, stride, pad)
    check_shape('conv2d bias', bias, (weights.shape[0],))
    padded = np.pad(inputs, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((weights.shape[0], out_h, out_w))
    for ki in range(weights.shape[2]):
        for kj in range(weights.shape[3]):
            patch = padded[:, ki:ki + stride * out_h:stride,
                           kj:kj + stride * out_w:stride]
            out += np.tensordot(weights[:, :, ki, kj], patch, axes=(1, 0))
    return out + bias[:, None, None]


def conv2d_backward(inputs, weights, upstream, stride=1, pad=None):
    """Gradients of :func:`conv2d_forward`

    Returns
    -------
    grads : LayerGradients
        ``wrt_params`` is ``[d_weights, d_bias]``
    """
    pad, out_h, out_w = _conv_geometry(inputs, weights, stride, pad)
    check_shape('conv2d upstream', upstream, (weights.shape[0], out_h, out_w))
    padded = np.pad(inputs, ((0, 0), (pad, pad), (pad, pad)))
    d_padded = np.zeros_like(padded)
    d_weights = np.zeros_like(weights)
    for ki in range(weights.shape[2]):
        for kj in range(weights.shape[3]):
            window = (slice(None), slice(ki, ki + stride * out_h, stride),
                      slice(kj, kj + stride * out_w, stride))
            d_weights[:, :, ki, kj] = np.tensordot(
                upstream, padded[window], axes=([1, 2], [1, 2]))
            d_padded[window] += np.tensordot(weights[:, :, ki, kj], upstream,
                                             axes=(0, 0))
    height, width = inputs.shape[1:]
    d_inputs = d_padded[:, pad:pad + height, pad:pad + width]
    return LayerGradients(d_inputs, [d_weights, upstream.sum(axis=(1, 2))])


# activations ################################################################

def relu_forward(inputs):
    return np.maximum(inputs, 0.0)


def relu_backward(inputs, upstream):
    check_shape('relu upstream', upstream, inputs.shape)
    return np.where(inputs > 0, upstream, 0.0)


def sigmoid_forward(inputs):
    """Logistic function ``1 / (1 + exp(-x))``, overflow free"""
    return 0.5 * (1.0 + np.tanh(0.5 * inputs))


def sigmoid_backward(outputs, upstream):
    """Gradient of the sigmoid given its *outputs*"""
    check_shape('sigmoid upstream', upstream, outputs.shape)
    return upstream * outputs * (1.0 - outputs)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# losses #####################################################################

def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``

    Parameters
    ----------
    logits : ndarray, shape (batch, K)
    labels : sequence of int, length batch
        Class index of each row, in ``[0, K)``

    Returns
    -------
    loss : float
    grad : ndarray, shape (batch, K)
        Gradient of ``loss`` with respect to ``logits``
    """
    if logits.ndim != 2:
        raise DimensionError("logits must be 2-d, got {}".format(logits.shape))
    labels = np.asarray(labels, dtype=np.int64)
    check_shape('labels', labels, (logits.shape[0],))
    num_classes = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelRangeError("labels must lie in [0, {}), got {}".format(
            num_classes, labels[(labels < 0) | (labels >= num_classes)]))
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def smooth_l1(pred, target):
    """Huber loss with unit threshold, averaged over all elements

    Each element contributes ``0.5 * x**2`` if ``|x| < 1`` and
    ``|x| - 0.5`` otherwise, where ``x = pred - target``.

    Returns
    -------
    loss : float
    grad : ndarray
        Gradient of ``loss`` with respect to ``pred``
    """
    check_shape('smooth_l1 target', target, pred.shape)
    if pred.size == 0:
        return 0.0, np.zeros_like(pred)
    diff = pred - target
    small = np.abs(diff) < 1.0
    per_element = np.where(small, 0.5 * diff * diff, np.abs(diff) - 0.5)
    grad = np.where(small, diff, np.sign(diff))
    return float(per_element.sum() / diff.size), grad / diff.size


# optimisation ###############################################################

def sgd_step(params, grads, lr, momentum, state):
    """One SGD-with-momentum update

    ``state <- momentum * state + grads``; ``params <- params - lr * state``

    Parameters
    ----------
    params, grads, state : ndarray
        All of the same shape
    lr : float
        Learning rate, must be positive
    momentum : float

    Returns
    -------
    params, state : ndarray
        New arrays; the inputs are left untouched

    Raises
    ------
    NonFiniteError
        If ``grads`` holds NaN or Inf
    """
    check_shape('sgd grads', grads, params.shape)
    check_shape('sgd state', state, params.shape)
    if not lr > 0:
        raise ValueError("learning rate must be positive, got {!r}".format(lr))
    check_finite('sgd grads', grads)
    state = momentum * state + grads
    return params - lr * state, state
