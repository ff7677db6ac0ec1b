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
The convolutional network: configuration, shape validation, parameters,
forward and backward pass.
"""

import json
from dataclasses import dataclass, field, asdict
import numpy as np
import pandas as pd
from leafnet import kernels
from leafnet.errors import ConfigurationError, DimensionError, StateError
from leafnet.utils import fnv1a_64, make_rng, resolve_logger


CLASSIFIER = 'softmax_classifier'
# random stream ids of the network, separate from data and solver streams
INIT_STREAM = 4
CLASSIFIER_STREAM = 5


@dataclass
class NetworkConfig:
    """
    Declarative network layout.

    Every convolution block is a stride-1 valid convolution followed by
    max-pooling. The blocks feed a fully-connected layer with ReLU and
    dropout, then the classifier.

    Attributes:
        input_size (int): Edge length of the square input.
        channels (int): Input colour channels.
        kernels (list): Kernel edge length per convolution block.
        filters (list): Filter count per convolution block.
        pool (int): Pooling window edge length.
        pool_stride (int): Pooling stride.
        fc_width (int): Width of the fully-connected layer.
        dropout (float): Dropout rate after the fully-connected layer.
    """
    input_size: int = 300
    channels: int = 3
    kernels: list = field(default_factory=lambda: [5, 5, 3, 3])
    filters: list = field(default_factory=lambda: [32, 64, 128, 256])
    pool: int = 2
    pool_stride: int = 2
    fc_width: int = 500
    dropout: float = 0.5

    @classmethod
    def scaled(cls, input_size: int = 56, kernels=(5, 5), filters=(16, 32), fc_width: int = 128, dropout: float = 0.5):
        """
        A smaller layout of the same family, for desk-scale experiments.
        """
        return cls(input_size=input_size, kernels=list(kernels), filters=list(filters), fc_width=fc_width, dropout=dropout)

    def canonical(self):
        """
        Canonical serialization, the input of the digest.
        """
        return json.dumps(asdict(self), sort_keys=True, separators=(',', ':'))

    def digest(self, num_classes: int):
        """
        64-bit FNV-1a digest of the layout and the class count.
        """
        return fnv1a_64((self.canonical() + f'|classes={num_classes}').encode('utf-8'))

    def shape_chain(self, num_classes: int):
        """
        Applies the shape rules of every layer to the input shape.

        Args:
            num_classes (int): Width of the classifier.

        Returns:
            list: (layer name, kind, output shape without batch axis) per layer.

        Raises:
            ConfigurationError: If a layer cannot be applied, naming the layer.
        """
        if len(self.kernels) != len(self.filters) or not self.kernels:
            raise ConfigurationError('NETWORK.kernels', "kernels and filters need one entry per convolution block")
        if num_classes < 1:
            raise ConfigurationError('NETWORK.classes', f"need at least one class, got {num_classes}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError('NETWORK.dropout', f"rate must lie in [0, 1), got {self.dropout}")
        if self.pool < 1 or self.pool_stride < 1 or self.fc_width < 1:
            raise ConfigurationError('NETWORK', "pool, pool_stride and fc_width must be positive")

        chain = []
        channels, size = self.channels, self.input_size
        for block, (k, f) in enumerate(zip(self.kernels, self.filters), start=1):
            if k < 1 or f < 1:
                raise ConfigurationError(f'conv{block}', "kernel size and filter count must be positive")
            if k > size:
                raise ConfigurationError(f'conv{block}', f"kernel {k}x{k} larger than feature map {size}x{size}")
            channels, size = f, size - k + 1
            chain.append((f'conv{block}', 'conv', (channels, size, size)))
            if self.pool > size:
                raise ConfigurationError(f'pool{block}', f"window {self.pool}x{self.pool} larger than feature map {size}x{size}")
            size = (size - self.pool) // self.pool_stride + 1
            chain.append((f'pool{block}', 'pool', (channels, size, size)))

        chain.append(('fc1', 'fc', (self.fc_width,)))
        chain.append(('fc1_relu', 'relu', (self.fc_width,)))
        chain.append(('dropout', 'dropout', (self.fc_width,)))
        chain.append((CLASSIFIER, 'fc', (num_classes,)))
        return chain

    def feature_size(self, num_classes: int = 1):
        """
        Flattened size of the last pooling output, the input width of fc1.
        """
        channels, height, width = self.shape_chain(num_classes)[2 * len(self.kernels) - 1][2]
        return channels * height * width

class Parameter():
    """
    A named tensor with its gradient and solver velocity.

    Attributes:
        name (str): Unique name, e.g. 'conv1.weights'.
        value (numpy.ndarray): The tensor.
        grad (numpy.ndarray): Gradient of the last backward pass.
        velocity (numpy.ndarray): Solver momentum.
    """

    def __init__(self, name: str, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)

    @property
    def layer(self):
        return self.name.rsplit('.', 1)[0]

    @property
    def is_bias(self):
        return self.name.endswith('.bias')

class Network():
    """
    The classification network.

    Attributes:
        _config (NetworkConfig): The layout.
        _num_classes (int): Width of the classifier.
        _chain (list): The validated shape chain.
        _params (dict): Parameters by name, empty until initialized or loaded.
        _caches (list): Layer caches of the last train-mode forward.
        _dtype (numpy.dtype): float32, or float64 for gradient checks.
        _logger (logging.Logger): The logger.
    """

    def __init__(self, config: NetworkConfig, num_classes: int, double: bool = False, logger=None):
        """
        Builds the layer chain without allocating parameters.

        Args:
            config (NetworkConfig): The layout.
            num_classes (int): Width of the classifier.
            double (bool, optional): Use 64-bit floats. Defaults to False.
            logger (logging.Logger, optional): The logger. Defaults to None.

        Raises:
            ConfigurationError: If the shape chain is inconsistent.
        """
        self._logger = resolve_logger(logger, 'Network')

        self._config = config
        self._num_classes = num_classes
        self._chain = config.shape_chain(num_classes)
        self._dtype = np.dtype(kernels.DOUBLE if double else kernels.FLOAT)
        self._params = {}
        self._caches = None
        self._logits = None

        self._logger.info(f"Network built: {len(config.kernels)} convolution blocks, "
                          f"{config.feature_size(num_classes)} features, {num_classes} classes")
        self._logger.debug("Layer chain:\n" + self.summary().to_string(index=False))

    def shapes(self):
        """
        Parameter shapes in layer order.
        """
        shapes = {}
        channels = self._config.channels
        for block, (k, f) in enumerate(zip(self._config.kernels, self._config.filters), start=1):
            shapes[f'conv{block}.weights'] = (f, channels, k, k)
            shapes[f'conv{block}.bias'] = (f,)
            channels = f
        features = self._config.feature_size(self._num_classes)
        shapes['fc1.weights'] = (features, self._config.fc_width)
        shapes['fc1.bias'] = (self._config.fc_width,)
        shapes[f'{CLASSIFIER}.weights'] = (self._config.fc_width, self._num_classes)
        shapes[f'{CLASSIFIER}.bias'] = (self._num_classes,)
        return shapes

    @staticmethod
    def _fan_in(shape):
        return int(np.prod(shape[1:])) if len(shape) == 4 else int(shape[0])

    def _draw(self, name: str, shape, rng):
        if name.endswith('.bias'):
            return np.zeros(shape, dtype=self._dtype)
        std = np.sqrt(2.0 / self._fan_in(shape))
        return (rng.standard_normal(shape) * std).astype(self._dtype)

    def init_weights(self, seed: int):
        """
        Random initialization with variance 2/fan-in, zero biases and zero velocities.

        Args:
            seed (int): The seed.
        """
        self._logger.info("Initializing weights ...")

        rng = make_rng(seed, INIT_STREAM)
        self._params = {name: Parameter(name, self._draw(name, shape, rng)) for name, shape in self.shapes().items()}
        self._caches = None

        self._logger.info("Weights initialized")

    def init_classifier(self, seed: int):
        """
        Re-initializes only the classifier layer.

        Args:
            seed (int): The seed.

        Returns:
            list: Names of the re-initialized tensors.
        """
        rng = make_rng(seed, CLASSIFIER_STREAM)
        names = []
        for name, shape in self.shapes().items():
            if name.startswith(CLASSIFIER + '.'):
                self._params[name] = Parameter(name, self._draw(name, shape, rng))
                names.append(name)
        return names

    def set_tensors(self, tensors: dict):
        """
        Replaces all parameters by the given tensors, resetting velocities.

        Args:
            tensors (dict): Arrays by parameter name, must match every shape.

        Raises:
            DimensionError: If a tensor is missing or has the wrong shape.
        """
        shapes = self.shapes()
        for name, shape in shapes.items():
            if name not in tensors:
                raise DimensionError(f"Tensor {name} missing")
            if tuple(tensors[name].shape) != shape:
                raise DimensionError(f"Tensor {name}: expected {shape}, got {tuple(tensors[name].shape)}")
        self._params = {name: Parameter(name, np.array(tensors[name], dtype=self._dtype)) for name in shapes}
        self._caches = None

    def tensors(self):
        """
        Parameter values by name in layer order.
        """
        return {name: p.value for name, p in self._params.items()}

    def parameters(self):
        """
        The Parameter objects in layer order.
        """
        return list(self._params.values())

    def _require_initialized(self):
        if not self._params:
            raise StateError("Network parameters are neither initialized nor loaded")

    def forward(self, batch, mode: str = 'eval', rng=None):
        """
        Computes the logits of a batch.

        In train mode dropout is active and the layer caches are kept for
        backward. Eval mode keeps nothing and is a pure function of the
        parameters and the input.

        Args:
            batch (numpy.ndarray): Input of shape (N, channels, input_size, input_size).
            mode (str, optional): 'train' or 'eval'. Defaults to 'eval'.
            rng (numpy.random.Generator, optional): Dropout random source, required in train mode.

        Returns:
            numpy.ndarray: Logits of shape (N, classes).

        Raises:
            StateError: If the parameters are not initialized.
            DimensionError: If the input shape does not match the layout.
        """
        self._require_initialized()
        expected = (self._config.channels, self._config.input_size, self._config.input_size)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
            raise DimensionError(f"Network input: expected (N, {expected[0]}, {expected[1]}, {expected[2]}), got {batch.shape}")

        x = batch.astype(self._dtype, copy=False)
        caches = []
        p = self._params
        for block in range(1, len(self._config.kernels) + 1):
            x, cache = kernels.conv2d_forward(x, p[f'conv{block}.weights'].value, p[f'conv{block}.bias'].value)
            caches.append(cache)
            x, cache = kernels.maxpool_forward(x, self._config.pool, self._config.pool_stride)
            caches.append(cache)

        x, cache = kernels.fully_connected_forward(x, p['fc1.weights'].value, p['fc1.bias'].value)
        caches.append(cache)
        x, cache = kernels.relu(x)
        caches.append(cache)
        x, cache = kernels.dropout(x, self._config.dropout, mode, rng)
        caches.append(cache)
        logits, cache = kernels.fully_connected_forward(x, p[f'{CLASSIFIER}.weights'].value, p[f'{CLASSIFIER}.bias'].value)
        caches.append(cache)

        if mode == 'train':
            self._caches = caches
            self._logits = logits
        return logits

    def backward(self, labels):
        """
        Backpropagates the softmax cross-entropy of the last train-mode forward.

        Args:
            labels (array_like): Class indices of the batch.

        Returns:
            float: The loss.

        Raises:
            StateError: If no train-mode forward preceded the call.
        """
        if self._caches is None:
            raise StateError("Backward needs a preceding train-mode forward")

        loss, _, upstream = kernels.softmax_cross_entropy(self._logits, labels)
        caches = list(self._caches)
        p = self._params

        upstream, p[f'{CLASSIFIER}.weights'].grad, p[f'{CLASSIFIER}.bias'].grad = kernels.fully_connected_backward(upstream, caches.pop())
        upstream = kernels.dropout_backward(upstream, caches.pop())
        upstream = kernels.relu_backward(upstream, caches.pop())
        upstream, p['fc1.weights'].grad, p['fc1.bias'].grad = kernels.fully_connected_backward(upstream, caches.pop())

        for block in range(len(self._config.kernels), 0, -1):
            upstream = kernels.maxpool_backward(upstream, caches.pop())
            upstream, p[f'conv{block}.weights'].grad, p[f'conv{block}.bias'].grad = kernels.conv2d_backward(upstream, caches.pop())

        self._caches = None
        self._logits = None
        return loss

    def predict_proba(self, batch):
        """
        Softmax probabilities in eval mode.
        """
        return kernels.softmax(self.forward(batch, mode='eval'))

    def summary(self):
        """
        The shape chain as a table.

        Returns:
            pandas.DataFrame: Columns layer, kind, output and parameters.
        """
        shapes = self.shapes()
        rows = []
        for name, kind, shape in self._chain:
            count = sum(int(np.prod(s)) for n, s in shapes.items() if n.rsplit('.', 1)[0] == name)
            rows.append({'layer': name, 'kind': kind, 'output': 'x'.join(str(d) for d in shape), 'parameters': count})
        return pd.DataFrame(rows)

    @property
    def initialized(self):
        return bool(self._params)

    def get_config(self):
        return self._config

    def set_config(self, config):
        raise ValueError("Error: Config cannot be changed")

    def get_num_classes(self):
        return self._num_classes

    def set_num_classes(self, num_classes):
        raise ValueError("Error: Class count cannot be changed")

    def get_dtype(self):
        return self._dtype

    def get_logger(self):
        return self._logger

    def set_logger(self, logger):
        raise ValueError("Error: Logger cannot be changed")

    def digest(self):
        return self._config.digest(self._num_classes)

    config = property(get_config, set_config, doc='Get/set the network layout')
    num_classes = property(get_num_classes, set_num_classes, doc='Get/set the class count')
    dtype = property(get_dtype, doc='Get the float type of the parameters')
    logger = property(get_logger, set_logger, doc='Get/set the logger')

def build_network(config: NetworkConfig, num_classes: int, double: bool = False, logger=None):
    """
    Builds a network and validates its shape chain.

    Args:
        config (NetworkConfig): The layout.
        num_classes (int): Width of the classifier.
        double (bool, optional): Use 64-bit floats. Defaults to False.
        logger (logging.Logger, optional): The logger. Defaults to None.

    Returns:
        Network: The network, parameters unallocated.
    """
    return Network(config, num_classes, double=double, logger=logger)
