"""Deterministic reverse-mode kernels for small 1-D convolutional networks.

A feature map is a float64 ndarray of shape ``(channels, length)``; batched
variants take ``(batch, channels, length)``. Convolution follows the
cross-correlation convention (no kernel flip) with stride 1 and symmetric
zero padding. The transposed convolution is the exact adjoint of the
convolution with the same padding, plus a per-channel bias.

All operations are pure functions of their inputs plus explicit RNG state,
and every backward op is an exact analytical gradient (verified against
central finite differences in the test suite).
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError, TrainingError

__all__ = [
    "ConvLayerParams",
    "AdamState",
    "conv1d_forward",
    "conv1d_backward",
    "conv_transpose1d_forward",
    "conv_transpose1d_backward",
    "conv1d_forward_batch",
    "conv1d_backward_batch",
    "conv_transpose1d_forward_batch",
    "conv_transpose1d_backward_batch",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "make_dropout_mask",
    "dropout_apply",
    "mse_loss",
    "adam_init",
    "adam_step",
    "init_conv_params",
]


@dataclass
class ConvLayerParams:
    """Weights of one (possibly transposed) 1-D convolution layer.

    ``weights`` has shape ``(out_channels, in_channels, kernel_size)``,
    ``bias`` has shape ``(out_channels,)``.
    """

    in_channels: int
    out_channels: int
    kernel_size: int
    padding: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel_size < 1:
            raise ParameterError("channel counts and kernel size must be positive")
        if self.padding < 0:
            raise ParameterError("padding must be non-negative")
        expected = (self.out_channels, self.in_channels, self.kernel_size)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.shape != expected:
            raise ShapeError(
                f"weights shape {self.weights.shape} != expected {expected}"
            )
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"bias shape {self.bias.shape} != ({self.out_channels},)"
            )
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ParameterError("layer parameters must be finite")

    def copy(self):
        return ConvLayerParams(
            self.in_channels,
            self.out_channels,
            self.kernel_size,
            self.padding,
            self.weights.copy(),
            self.bias.copy(),
        )


@dataclass
class AdamState:
    """Per-tensor Adam moment estimates."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self):
        return AdamState(
            self.first_moment.copy(),
            self.second_moment.copy(),
            self.step_count,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def _as_map(x, name="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (channels, length), got shape {x.shape}")
    return x


def _pad(x, p):
    if p == 0:
        return x
    width = [(0, 0)] * (x.ndim - 1) + [(p, p)]
    return np.pad(x, width)


def _im2col(x, k):
    """Contiguous window matrix ``(B, T, C, k)`` from ``(B, C, L)``, T = L-k+1."""
    win = sliding_window_view(x, k, axis=-1)  # (B, C, T, k) view
    return np.ascontiguousarray(win.swapaxes(1, 2))


def _fold_add(gt):
    """Adjoint of window extraction: fold ``(C, k, B, T)`` onto ``(B, C, T+k-1)``.

    Slice j accumulates at samples [j, j+T); k shifted vector adds beat both
    the giant strided buffer of an im2col formulation and a big transpose.
    The caller arranges the GEMM so ``gt`` arrives contiguous in this layout.
    """
    c, k, b, t = gt.shape
    acc = np.zeros((c, b, t + k - 1))
    for j in range(k):
        acc[:, :, j : j + t] += gt[:, j]
    return acc.swapaxes(0, 1)  # (B, C, T + k - 1), caller copies if needed


def conv1d_forward_batch(x, layer, return_cols=False):
    """Cross-correlation of a batch ``(B, C, L)`` with ``layer``.

    With ``return_cols`` the contiguous im2col buffer comes back too, so the
    backward pass can reuse it instead of rebuilding it.
    """
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    length = x.shape[-1]
    out_len = length + 2 * layer.padding - layer.kernel_size + 1
    if out_len < 1:
        raise ShapeError(
            f"conv output length {out_len} < 1 "
            f"(input {length}, kernel {layer.kernel_size}, padding {layer.padding})"
        )
    o, c, k = layer.weights.shape
    cols = _im2col(_pad(x, layer.padding), k)  # (B, T, C, k)
    b = cols.shape[0]
    flat = cols.reshape(b * out_len, c * k) @ layer.weights.reshape(o, c * k).T
    y = np.ascontiguousarray(flat.reshape(b, out_len, o).swapaxes(1, 2))
    y += layer.bias[None, :, None]
    return (y, cols) if return_cols else y


def conv1d_backward_batch(x, layer, grad_out, need_input_grad=True, cols=None):
    p, k = layer.padding, layer.kernel_size
    length = x.shape[-1]
    out_len = length + 2 * p - k + 1
    if grad_out.shape != (x.shape[0], layer.out_channels, out_len):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != "
            f"{(x.shape[0], layer.out_channels, out_len)}"
        )
    o, c, _ = layer.weights.shape
    b = x.shape[0]
    grad_bias = grad_out.sum(axis=(0, 2))
    if cols is None:
        cols = _im2col(_pad(x, p), k)
    g_flat = np.ascontiguousarray(grad_out.swapaxes(1, 2)).reshape(b * out_len, o)
    grad_w = (g_flat.T @ cols.reshape(b * out_len, c * k)).reshape(o, c, k)
    grad_x = None
    if need_input_grad:
        gt = (layer.weights.reshape(o, c * k).T @ g_flat.T).reshape(
            c, k, b, out_len
        )
        gx_pad = _fold_add(gt)  # (B, C, L + 2p)
        grad_x = np.ascontiguousarray(gx_pad[:, :, p : p + length])
    return grad_x, grad_w, grad_bias


def conv_transpose1d_forward_batch(x, layer):
    """Adjoint of :func:`conv1d_forward_batch` with the same padding, plus bias."""
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    p, k = layer.padding, layer.kernel_size
    length = x.shape[-1]
    out_len = length - 1 + k - 2 * p
    if out_len < 1:
        raise ShapeError(
            f"transposed conv output length {out_len} < 1 "
            f"(input {length}, kernel {k}, padding {p})"
        )
    o, i, _ = layer.weights.shape
    b = x.shape[0]
    x_flat = np.ascontiguousarray(x.swapaxes(0, 1)).reshape(i, b * length)
    w_flat = np.ascontiguousarray(layer.weights.swapaxes(0, 1)).reshape(i, o * k)
    gt = (w_flat.T @ x_flat).reshape(o, k, b, length)
    full = _fold_add(gt)  # (B, O, L + k - 1)
    y = np.ascontiguousarray(full[:, :, p : p + out_len])
    y += layer.bias[None, :, None]
    return y


def conv_transpose1d_backward_batch(x, layer, grad_out, need_input_grad=True):
    p, k = layer.padding, layer.kernel_size
    length = x.shape[-1]
    out_len = length - 1 + k - 2 * p
    if grad_out.shape != (x.shape[0], layer.out_channels, out_len):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != "
            f"{(x.shape[0], layer.out_channels, out_len)}"
        )
    o, i, _ = layer.weights.shape
    b = x.shape[0]
    grad_bias = grad_out.sum(axis=(0, 2))
    g_full = _pad(grad_out, p)  # (B, O, L + k - 1)
    cols_g = _im2col(g_full, k).reshape(b * length, o * k)  # windows land on L
    x_flat = np.ascontiguousarray(x.swapaxes(1, 2)).reshape(b * length, i)
    grad_w = np.ascontiguousarray(
        (x_flat.T @ cols_g).reshape(i, o, k).swapaxes(0, 1)
    )
    grad_x = None
    if need_input_grad:
        w_flat = np.ascontiguousarray(layer.weights.swapaxes(0, 1)).reshape(i, o * k)
        grad_x = np.ascontiguousarray(
            (cols_g @ w_flat.T).reshape(b, length, i).swapaxes(1, 2)
        )
    return grad_x, grad_w, grad_bias


def conv1d_forward(x, layer):
    """Single-map convolution: ``out[c, t] = bias[c] + sum w[c, i, k] * x_pad[i, t + k]``."""
    x = _as_map(x)
    return conv1d_forward_batch(x[None], layer)[0]


def conv1d_backward(x, layer, grad_out):
    x = _as_map(x)
    grad_out = _as_map(grad_out, "grad_out")
    gx, gw, gb = conv1d_backward_batch(x[None], layer, grad_out[None])
    return gx[0], gw, gb


def conv_transpose1d_forward(x, layer):
    x = _as_map(x)
    return conv_transpose1d_forward_batch(x[None], layer)[0]


def conv_transpose1d_backward(x, layer, grad_out):
    x = _as_map(x)
    grad_out = _as_map(grad_out, "grad_out")
    gx, gw, gb = conv_transpose1d_backward_batch(x[None], layer, grad_out[None])
    return gx[0], gw, gb


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    """Derivative taken as 0 at x == 0."""
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x):
    # Split by sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(output, grad_out):
    """Backward pass given the forward *output* (sigma' = sigma * (1 - sigma))."""
    return grad_out * output * (1.0 - output)


def make_dropout_mask(shape, keep_probability, rng):
    """Binary keep mask drawn reproducibly from ``rng``."""
    if keep_probability <= 0.0 or keep_probability > 1.0:
        raise ParameterError(f"keep probability must be in (0, 1], got {keep_probability}")
    return (rng.random(shape) < keep_probability).astype(np.float64)


def dropout_apply(x, keep_probability, mask, training):
    """Inverted dropout: scaling happens at train time, inference is the identity."""
    if keep_probability <= 0.0 or keep_probability > 1.0:
        raise ParameterError(f"keep probability must be in (0, 1], got {keep_probability}")
    if not training:
        return x
    return x * mask / keep_probability


def mse_loss(prediction, target):
    """Mean squared error and its gradient w.r.t. the prediction."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ShapeError(
            f"prediction shape {prediction.shape} != target shape {target.shape}"
        )
    diff = prediction - target
    n = diff.size
    loss = float(np.mean(diff * diff))
    grad = (2.0 / n) * diff
    return loss, grad


def adam_init(param, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return AdamState(
        first_moment=np.zeros_like(param),
        second_moment=np.zeros_like(param),
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params, grads, state, learning_rate, param_label=None):
    """One Adam update with bias correction; mutates ``params`` and ``state``.

    Standard form: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise ShapeError("params, grads and Adam state must be congruent")
    if not np.isfinite(grads).all():
        where = f" in {param_label}" if param_label is not None else ""
        raise TrainingError(f"non-finite gradient{where}")
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grads
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    params -= learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def init_conv_params(in_channels, out_channels, kernel_size, padding, activation, rng):
    """Uniform init scaled for the activation that follows the layer.

    ReLU layers get bound sqrt(6 / fan_in), sigmoid layers
    sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """
    fan_in = in_channels * kernel_size
    fan_out = out_channels * kernel_size
    if activation == "relu":
        bound = np.sqrt(6.0 / fan_in)
    elif activation == "sigmoid":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ParameterError(f"unknown activation {activation!r}")
    weights = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size))
    bias = np.zeros(out_channels)
    return ConvLayerParams(in_channels, out_channels, kernel_size, padding, weights, bias)
