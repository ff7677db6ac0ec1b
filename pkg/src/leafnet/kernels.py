#!/usr/bin/env python
# -*- coding: utf-8; py-indent-offset:4 -*-
###########################################################################
#
#    leafnet - Leaf identification with a deep convolutional neural network
#
#    Copyright (C) 2024  Philipp Craighero
#
#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.
#
#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.
#
#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.
#
###########################################################################

"""
Forward and backward kernels of the layer types used by the network.

Tensors are plain numpy arrays in NCHW layout. Training runs in float32;
float64 arrays pass through every kernel unchanged, which is what the
gradient checks use. Every forward kernel returns its output together with
a LayerCache that the matching backward kernel consumes.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from leafnet.errors import DimensionError, ParameterError, StateError


FLOAT = np.float32
DOUBLE = np.float64


def as_tensor(values, double: bool = False):
    """
    Converts array-like values into a contiguous float tensor.

    Args:
        values (array_like): The values.
        double (bool, optional): Use 64-bit floats instead of 32-bit. Defaults to False.

    Returns:
        numpy.ndarray: The tensor.
    """
    return np.ascontiguousarray(values, dtype=DOUBLE if double else FLOAT)

class LayerCache():
    """
    Values saved by a forward kernel for its backward kernel.

    Attributes:
        kind (str): The kernel that produced the cache.
        values (dict): The saved arrays and settings.
    """

    def __init__(self, kind: str, **values):
        self.kind = kind
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

def _require_cache(cache, kind: str):
    if cache is None:
        raise StateError(f"No cache for {kind} backward, forward must run first")
    if cache.kind != kind:
        raise StateError(f"Cache of {cache.kind} handed to {kind} backward")

def _require_shape(name: str, array, rank: int):
    if array.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got shape {array.shape}")

def conv2d_forward(input, weights, bias):
    """
    Valid cross-correlation with stride 1 plus a bias per filter.

    The kernel loops over the kh*kw filter offsets and contracts the channel
    axis for each of them, so memory stays at the size of the output.

    Args:
        input (numpy.ndarray): Input of shape (N, C, H, W).
        weights (numpy.ndarray): Filters of shape (K, C, kh, kw).
        bias (numpy.ndarray): Bias of shape (K,).

    Returns:
        tuple: The output of shape (N, K, H-kh+1, W-kw+1) and the LayerCache.

    Raises:
        DimensionError: If the shapes do not agree.
    """
    _require_shape('conv input', input, 4)
    _require_shape('conv weights', weights, 4)
    n, c, h, w = input.shape
    k, wc, kh, kw = weights.shape
    if wc != c:
        raise DimensionError(f"conv channel axis: input has {c} channels, weights expect {wc}")
    if kh > h or kw > w:
        raise DimensionError(f"conv spatial axes: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (k,):
        raise DimensionError(f"conv bias axis: expected ({k},), got {bias.shape}")

    ho, wo = h - kh + 1, w - kw + 1
    out = np.zeros((k, n, ho, wo), dtype=input.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(weights[:, :, i, j], input[:, :, i:i + ho, j:j + wo], axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]

    return np.ascontiguousarray(out), LayerCache('conv2d', input=input, weights=weights)

def conv2d_backward(upstream, cache):
    """
    Gradients of the valid cross-correlation.

    Args:
        upstream (numpy.ndarray): Gradient w.r.t. the forward output.
        cache (LayerCache): The cache of the forward call.

    Returns:
        tuple: Gradients w.r.t. input, weights and bias.

    Raises:
        StateError: If the cache is missing.
        DimensionError: If the upstream shape differs from the forward output.
    """
    _require_cache(cache, 'conv2d')
    input, weights = cache['input'], cache['weights']
    n, c, h, w = input.shape
    k, _, kh, kw = weights.shape
    ho, wo = h - kh + 1, w - kw + 1
    if upstream.shape != (n, k, ho, wo):
        raise DimensionError(f"conv upstream: expected {(n, k, ho, wo)}, got {upstream.shape}")

    d_input = np.zeros_like(input)
    d_weights = np.zeros_like(weights)
    for i in range(kh):
        for j in range(kw):
            window = input[:, :, i:i + ho, j:j + wo]
            d_weights[:, :, i, j] = np.tensordot(upstream, window, axes=([0, 2, 3], [0, 2, 3]))
            d_input[:, :, i:i + ho, j:j + wo] += np.tensordot(upstream, weights[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    d_bias = upstream.sum(axis=(0, 2, 3))

    return d_input, d_weights, d_bias.astype(weights.dtype)

def maxpool_forward(input, k: int = 2, stride: int = 2):
    """
    Max-pooling over k x k windows.

    Args:
        input (numpy.ndarray): Input of shape (N, C, H, W).
        k (int, optional): The window size. Defaults to 2.
        stride (int, optional): The window stride. Defaults to 2.

    Returns:
        tuple: The pooled output and the LayerCache holding the argmax positions.

    Raises:
        DimensionError: If the window is larger than the input.
    """
    _require_shape('pool input', input, 4)
    n, c, h, w = input.shape
    if k > h or k > w:
        raise DimensionError(f"pool spatial axes: window {k}x{k} larger than input {h}x{w}")

    windows = sliding_window_view(input, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, ho, wo, k * k)
    # argmax returns the first occurrence on ties
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    return out, LayerCache('maxpool', shape=input.shape, argmax=argmax, k=k, stride=stride)

def maxpool_backward(upstream, cache):
    """
    Routes every upstream value to the argmax position of its window.

    Args:
        upstream (numpy.ndarray): Gradient w.r.t. the pooled output.
        cache (LayerCache): The cache of the forward call.

    Returns:
        numpy.ndarray: Gradient w.r.t. the input.

    Raises:
        StateError: If the cache is missing.
    """
    _require_cache(cache, 'maxpool')
    argmax, k, stride = cache['argmax'], cache['k'], cache['stride']
    n, c, ho, wo = argmax.shape
    if upstream.shape != argmax.shape:
        raise DimensionError(f"pool upstream: expected {argmax.shape}, got {upstream.shape}")

    rows = np.arange(ho)[None, None, :, None] * stride + argmax // k
    cols = np.arange(wo)[None, None, None, :] * stride + argmax % k
    batch = np.broadcast_to(np.arange(n)[:, None, None, None], argmax.shape)
    channel = np.broadcast_to(np.arange(c)[None, :, None, None], argmax.shape)

    d_input = np.zeros(cache['shape'], dtype=upstream.dtype)
    if k <= stride:
        # windows do not overlap, every position receives at most one value
        d_input[batch, channel, rows, cols] = upstream
    else:
        np.add.at(d_input, (batch, channel, rows, cols), upstream)

    return d_input

def relu(input):
    """
    Elementwise max(x, 0).

    Args:
        input (numpy.ndarray): The input.

    Returns:
        tuple: The output and the LayerCache.
    """
    mask = input > 0
    return np.where(mask, input, input.dtype.type(0)), LayerCache('relu', mask=mask)

def relu_backward(upstream, cache):
    """
    Passes the upstream gradient where the input was positive.

    The gradient at exactly 0 is 0.

    Args:
        upstream (numpy.ndarray): Gradient w.r.t. the output.
        cache (LayerCache): The cache of the forward call.

    Returns:
        numpy.ndarray: Gradient w.r.t. the input.
    """
    _require_cache(cache, 'relu')
    return np.where(cache['mask'], upstream, upstream.dtype.type(0))

def fully_connected_forward(input, weights, bias):
    """
    Affine map x.W + b. Inputs of rank 4 are flattened to (N, D) first.

    Args:
        input (numpy.ndarray): Input of shape (N, D) or (N, C, H, W).
        weights (numpy.ndarray): Weights of shape (D, M).
        bias (numpy.ndarray): Bias of shape (M,).

    Returns:
        tuple: The output of shape (N, M) and the LayerCache.

    Raises:
        DimensionError: If the inner dimensions disagree.
    """
    shape = input.shape
    flat = input.reshape(shape[0], -1)
    d, m = weights.shape
    if flat.shape[1] != d:
        raise DimensionError(f"fully connected inner axis: input has {flat.shape[1]} features, weights expect {d}")
    if bias.shape != (m,):
        raise DimensionError(f"fully connected bias axis: expected ({m},), got {bias.shape}")

    return flat @ weights + bias, LayerCache('fc', input=flat, shape=shape, weights=weights)

def fully_connected_backward(upstream, cache):
    """
    Gradients of the affine map.

    Args:
        upstream (numpy.ndarray): Gradient w.r.t. the output, shape (N, M).
        cache (LayerCache): The cache of the forward call.

    Returns:
        tuple: Gradients w.r.t. input (in its original shape), weights and bias.
    """
    _require_cache(cache, 'fc')
    flat, weights = cache['input'], cache['weights']
    d_input = (upstream @ weights.T).reshape(cache['shape'])
    d_weights = flat.T @ upstream
    d_bias = upstream.sum(axis=0)

    return d_input, d_weights, d_bias

def dropout(input, rate: float, mode: str, rng=None, mask=None):
    """
    Inverted dropout.

    In train mode every element is zeroed with probability rate and the
    survivors are scaled by 1/(1-rate). In eval mode the input passes unchanged.

    Args:
        input (numpy.ndarray): The input.
        rate (float): The drop probability, 0 <= rate < 1.
        mode (str): 'train' or 'eval'.
        rng (numpy.random.Generator, optional): Source of the mask in train mode.
        mask (numpy.ndarray, optional): A fixed keep mask of 0/1 values, used instead of rng.

    Returns:
        tuple: The output and the LayerCache.

    Raises:
        ParameterError: If the rate or mode is invalid.
    """
    if not 0 <= rate < 1:
        raise ParameterError(f"Dropout rate must lie in [0, 1), got {rate}")
    if mode not in ('train', 'eval'):
        raise ParameterError(f"Unknown dropout mode: {mode}")

    if mode == 'eval' or rate == 0:
        return input, LayerCache('dropout', scale=None)

    if mask is None:
        if rng is None:
            raise ParameterError("Train mode dropout needs a random generator or a mask")
        mask = rng.random(input.shape) >= rate

    scale = mask.astype(input.dtype) / input.dtype.type(1 - rate)
    return input * scale, LayerCache('dropout', scale=scale)

def dropout_backward(upstream, cache):
    """
    Gradient of inverted dropout.

    Args:
        upstream (numpy.ndarray): Gradient w.r.t. the output.
        cache (LayerCache): The cache of the forward call.

    Returns:
        numpy.ndarray: Gradient w.r.t. the input.
    """
    _require_cache(cache, 'dropout')
    if cache['scale'] is None:
        return upstream
    return upstream * cache['scale']

def softmax(logits):
    """
    Row-wise softmax with max subtraction.

    Args:
        logits (numpy.ndarray): Logits of shape (N, C).

    Returns:
        numpy.ndarray: Row-normalized probabilities.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)

def softmax_cross_entropy(logits, labels):
    """
    Mean cross-entropy of the softmax over a batch.

    Args:
        logits (numpy.ndarray): Logits of shape (N, C).
        labels (array_like): Class indices of shape (N,).

    Returns:
        tuple: The scalar loss, the probabilities and the gradient w.r.t. the logits.

    Raises:
        ParameterError: If a label lies outside [0, C).
        DimensionError: If logits and labels disagree in length.
    """
    _require_shape('logits', logits, 2)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels axis: expected ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ParameterError(f"Labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()

    d_logits = probs.copy()
    d_logits[rows, labels] -= 1
    d_logits /= n

    return float(loss), probs, d_logits

def numerical_gradient(function, point, eps: float = 1e-3):
    """
    Central finite differences of a scalar function.

    Args:
        function (callable): Maps an array of the shape of point to a float.
        point (numpy.ndarray): The evaluation point, modified in place and restored.
        eps (float, optional): The step. Defaults to 1e-3.

    Returns:
        numpy.ndarray: The numerical gradient.
    """
    gradient = np.zeros(point.shape, dtype=DOUBLE)
    # indexes point itself, so strided views are perturbed in place as well
    for index in np.ndindex(point.shape):
        original = point[index]
        point[index] = original + eps
        upper = function(point)
        point[index] = original - eps
        lower = function(point)
        point[index] = original
        gradient[index] = (upper - lower) / (2 * eps)
    return gradient

def relative_error(analytic, numeric):
    """
    Maximum elementwise relative error between two gradients.

    Args:
        analytic (numpy.ndarray): The analytic gradient.
        numeric (numpy.ndarray): The numerical gradient.

    Returns:
        float: max |a - n| / max(|a| + |n|, 1e-8).
    """
    analytic = np.asarray(analytic, dtype=DOUBLE)
    numeric = np.asarray(numeric, dtype=DOUBLE)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)))
