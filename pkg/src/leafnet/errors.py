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
Error kinds raised by leafnet.

Each error subclasses the closest builtin so that plain ValueError or
RuntimeError handling keeps working.
"""


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit together."""


class ParameterError(ValueError):
    """Raised when an argument lies outside its allowed range."""


class StateError(RuntimeError):
    """Raised when an operation is called in the wrong state, e.g. backward without forward."""


class NoForegroundError(ValueError):
    """Raised when an image contains only background pixels."""


class SplitParseError(ValueError):
    """
    Raised when a split notation cannot be parsed.

    Attributes:
        text (str): The offending text.
        position (int): The character position where parsing failed.
    """

    def __init__(self, text: str, position: int, reason: str):
        self.text = text
        self.position = position
        super().__init__(f"Invalid split '{text}' at position {position}: {reason}")


class CapacityError(ValueError):
    """
    Raised when a class has too few images for a split.

    Attributes:
        class_name (str): The class that is too small.
    """

    def __init__(self, class_name: str, needed: int, available: int):
        self.class_name = class_name
        super().__init__(f"Class '{class_name}' needs {needed} images but has only {available}")


class ConfigurationError(ValueError):
    """
    Raised when a configuration is invalid.

    Attributes:
        key (str): The key path of the failing entry, e.g. 'SOLVER.momentum'.
    """

    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"{key}: {reason}")


class CheckpointError(Exception):
    """Base class of all checkpoint errors."""


class VersionError(CheckpointError):
    """Raised when the checkpoint format version is not supported."""


class DigestError(CheckpointError):
    """Raised when the network configuration digest does not match."""


class TruncationError(CheckpointError):
    """Raised when a checkpoint file ends before its declared content."""


class TransferError(CheckpointError):
    """
    Raised when a tensor cannot be transferred into a network.

    Attributes:
        name (str): The offending tensor name.
    """

    def __init__(self, name: str, reason: str):
        self.name = name
        super().__init__(f"{name}: {reason}")


class TrainingAborted(RuntimeError):
    """
    Raised when training cannot continue.

    Attributes:
        iteration (int): The iteration at which training stopped.
        layer (str): The layer or tensor that caused the abort, if known.
    """

    def __init__(self, iteration: int, reason: str, layer: str = None):
        self.iteration = iteration
        self.layer = layer
        where = f" in {layer}" if layer else ""
        super().__init__(f"Training aborted at iteration {iteration}{where}: {reason}")
