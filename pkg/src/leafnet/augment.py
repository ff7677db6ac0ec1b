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
Label-preserving image transformations and the policies that sample them.

Images are numpy uint8 arrays of shape (height, width, 3) in RGB order.
Pixels outside the source canvas read as white, which matches the white
backgrounds of the leaf photographs.
"""

from dataclasses import dataclass
from enum import Enum
import numpy as np
from leafnet.errors import ParameterError
from leafnet.utils import to_uint8


WHITE = 255
SCALE_EXPONENT = 0.1
CONTRAST_EXPONENT = 1.0
BRIGHTNESS_RANGE = 20.0
# restricted comparison setting: mild rotation, scaling, cropping and contrast
RESTRICTED_ANGLE = 10.0
RESTRICTED_SCALE = (0.9, 1.1)
RESTRICTED_CONTRAST = (0.8, 1.2)
RESTRICTED_CROP = 0.1

# coordinates closer than this to an integer are snapped onto the pixel lattice
_SNAP = 1e-6


class PolicyKind(Enum):
    """
    The transformation policies.

    T0 is the untransformed centered window, TR draws every operation
    uniformly at random, TF is a series of evenly spaced rotations.
    RESTRICTED uses mild ranges only and NONE disables augmentation
    during training.
    """
    T0 = 't0'
    TR = 'tr'
    TF = 'tf'
    RESTRICTED = 'restricted'
    NONE = 'none'

@dataclass(frozen=True)
class TransformParams:
    """
    One sampled transformation.

    Attributes:
        angle (float): Rotation in degrees, [0, 360).
        scale (float): Scaling factor about the canvas center.
        crop_x (int): Left edge of the window.
        crop_y (int): Top edge of the window.
        contrast (float): Multiplicative colour factor.
        brightness (float): Additive colour delta.
        flip (bool): Mirror the window horizontally.
    """
    angle: float = 0.0
    scale: float = 1.0
    crop_x: int = 0
    crop_y: int = 0
    contrast: float = 1.0
    brightness: float = 0.0
    flip: bool = False

    def as_dict(self):
        return {
            'angle': self.angle, 'scale': self.scale, 'crop_x': self.crop_x, 'crop_y': self.crop_y,
            'contrast': self.contrast, 'brightness': self.brightness, 'flip': self.flip,
            }

@dataclass(frozen=True)
class TransformPolicy:
    """
    A transformation policy.

    Attributes:
        kind (PolicyKind): The policy.
        count (int): Number of fixed rotations for TF.
    """
    kind: PolicyKind = PolicyKind.TR
    count: int = 64

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError(f"Policy count must be at least 1, got {self.count}")

    @classmethod
    def parse(cls, text: str, count: int = 64):
        """
        Creates a policy from its name.

        Args:
            text (str): One of 't0', 'tr', 'tf', 'restricted', 'none' (case-insensitive).
            count (int, optional): Rotation count for 'tf'. Defaults to 64.

        Returns:
            TransformPolicy: The policy.

        Raises:
            ParameterError: If the name is unknown.
        """
        try:
            kind = PolicyKind(text.strip().lower())
        except ValueError:
            raise ParameterError(f"Unknown transform policy: {text}")
        return cls(kind=kind, count=count)

def centered_offset(canvas: int, size: int):
    """
    Offset of a centered size x size window on a canvas.
    """
    return (canvas - size) // 2

def identity_params(canvas: int = 350, size: int = 300):
    """
    The identity transformation with a centered window.
    """
    offset = centered_offset(canvas, size)
    return TransformParams(crop_x=offset, crop_y=offset)

def sample_params(policy: TransformPolicy, rng=None, canvas: int = 350, size: int = 300):
    """
    Samples transformation parameters according to a policy.

    Args:
        policy (TransformPolicy): The policy.
        rng (numpy.random.Generator, optional): Random source, required for TR and RESTRICTED.
        canvas (int, optional): Edge length of the source canvas. Defaults to 350.
        size (int, optional): Edge length of the cropped window. Defaults to 300.

    Returns:
        TransformParams or list: A single parameter set, or for TF the list of
        count fixed rotations.

    Raises:
        ParameterError: If the window does not fit or a random policy lacks rng.
    """
    if size > canvas:
        raise ParameterError(f"Window {size} larger than canvas {canvas}")

    offset = centered_offset(canvas, size)

    if policy.kind in (PolicyKind.T0, PolicyKind.NONE):
        return identity_params(canvas, size)

    if policy.kind == PolicyKind.TF:
        step = 360.0 / policy.count
        return [TransformParams(angle=i * step, crop_x=offset, crop_y=offset) for i in range(policy.count)]

    if rng is None:
        raise ParameterError(f"Policy {policy.kind.value} needs a random generator")

    if policy.kind == PolicyKind.TR:
        # draw order is fixed, the parameter stream depends on it
        angle = rng.uniform(0.0, 360.0)
        scale = 2.0 ** rng.uniform(-SCALE_EXPONENT, SCALE_EXPONENT)
        crop_x = int(rng.integers(0, canvas - size + 1))
        crop_y = int(rng.integers(0, canvas - size + 1))
        contrast = 2.0 ** rng.uniform(-CONTRAST_EXPONENT, CONTRAST_EXPONENT)
        brightness = rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE)
        flip = bool(rng.random() < 0.5)
        return TransformParams(angle=float(angle) % 360.0, scale=float(scale), crop_x=crop_x, crop_y=crop_y,
                               contrast=float(contrast), brightness=float(brightness), flip=flip)

    # RESTRICTED
    spread = int(round(RESTRICTED_CROP * (canvas - size) / 2))
    angle = rng.uniform(-RESTRICTED_ANGLE, RESTRICTED_ANGLE)
    scale = rng.uniform(*RESTRICTED_SCALE)
    crop_x = offset + int(rng.integers(-spread, spread + 1))
    crop_y = offset + int(rng.integers(-spread, spread + 1))
    contrast = rng.uniform(*RESTRICTED_CONTRAST)
    return TransformParams(angle=float(angle) % 360.0, scale=float(scale), crop_x=crop_x, crop_y=crop_y,
                           contrast=float(contrast))

def _sample_bilinear(img, src_x, src_y):
    """
    Bilinear lookup of source coordinates, white outside the canvas.

    Args:
        img (numpy.ndarray): Source image (H, W, 3).
        src_x (numpy.ndarray): Source column for every output pixel.
        src_y (numpy.ndarray): Source row for every output pixel.

    Returns:
        numpy.ndarray: The interpolated image as uint8.
    """
    h, w = img.shape[:2]

    src_x = np.where(np.abs(src_x - np.round(src_x)) < _SNAP, np.round(src_x), src_x)
    src_y = np.where(np.abs(src_y - np.round(src_y)) < _SNAP, np.round(src_y), src_y)

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]

    source = img.astype(np.float64)

    def fetch(yy, xx):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        values = source[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid[..., None], values, float(WHITE))

    top = (1 - fx) * fetch(y0, x0) + fx * fetch(y0, x0 + 1)
    bottom = (1 - fx) * fetch(y0 + 1, x0) + fx * fetch(y0 + 1, x0 + 1)

    return to_uint8((1 - fy) * top + fy * bottom)

def _grid(img):
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs - (w - 1) / 2.0, ys - (h - 1) / 2.0, (w - 1) / 2.0, (h - 1) / 2.0

def rotate(img, angle: float):
    """
    Rotates an image about its canvas center, keeping the canvas size.

    Args:
        img (numpy.ndarray): The image.
        angle (float): Counter-clockwise angle in degrees.

    Returns:
        numpy.ndarray: The rotated image.
    """
    if angle % 360.0 == 0:
        return img.copy()

    dx, dy, cx, cy = _grid(img)
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    # inverse mapping: rotate every output pixel back into the source
    src_x = cx + cos * dx - sin * dy
    src_y = cy + sin * dx + cos * dy

    return _sample_bilinear(img, src_x, src_y)

def rescale(img, factor: float):
    """
    Scales the image content about the canvas center, keeping the canvas size.

    Args:
        img (numpy.ndarray): The image.
        factor (float): The scaling factor, > 0.

    Returns:
        numpy.ndarray: The scaled image.

    Raises:
        ParameterError: If factor is not positive.
    """
    if factor <= 0:
        raise ParameterError(f"Scaling factor must be positive, got {factor}")
    if factor == 1:
        return img.copy()

    dx, dy, cx, cy = _grid(img)
    return _sample_bilinear(img, cx + dx / factor, cy + dy / factor)

def crop(img, x: int, y: int, size: int = 300):
    """
    Copies a size x size window.

    Args:
        img (numpy.ndarray): The image.
        x (int): Left edge.
        y (int): Top edge.
        size (int, optional): Window edge length. Defaults to 300.

    Returns:
        numpy.ndarray: The window.

    Raises:
        ParameterError: If the window leaves the image.
    """
    h, w = img.shape[:2]
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise ParameterError(f"Window {size}x{size} at ({x}, {y}) outside image {w}x{h}")

    return img[y:y + size, x:x + size].copy()

def adjust_contrast(img, factor: float):
    """
    Multiplies all colour values, rounding half away from zero and clamping to [0, 255].
    """
    if factor == 1:
        return img.copy()
    return to_uint8(img.astype(np.float64) * factor)

def adjust_brightness(img, delta: float):
    """
    Adds a value to all colour values, rounding half away from zero and clamping to [0, 255].
    """
    if delta == 0:
        return img.copy()
    return to_uint8(img.astype(np.float64) + delta)

def flip_horizontal(img):
    """
    Mirrors the columns.
    """
    return img[:, ::-1].copy()

def apply_transform(img, params: TransformParams, size: int = 300):
    """
    Applies a full transformation.

    The order is rotate, rescale, crop, contrast, brightness, flip.

    Args:
        img (numpy.ndarray): Preprocessed square image, e.g. 350 x 350 x 3.
        params (TransformParams): The transformation.
        size (int, optional): Window edge length. Defaults to 300.

    Returns:
        numpy.ndarray: The size x size x 3 result.

    Raises:
        ParameterError: If the image is not a square RGB canvas or the window leaves it.
    """
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
        raise ParameterError(f"Expected a square RGB canvas, got shape {img.shape}")

    out = rotate(img, params.angle)
    out = rescale(out, params.scale)
    out = crop(out, params.crop_x, params.crop_y, size)
    out = adjust_contrast(out, params.contrast)
    out = adjust_brightness(out, params.brightness)
    if params.flip:
        out = flip_horizontal(out)

    return out

def resize_bilinear(img, height: int, width: int):
    """
    Resizes an image to height x width without keeping the aspect ratio.

    Pixel centers are aligned, so resizing to the same size is the identity.
    Border pixels are extended instead of reading white.

    Args:
        img (numpy.ndarray): The image.
        height (int): Target height.
        width (int): Target width.

    Returns:
        numpy.ndarray: The resized image.

    Raises:
        ParameterError: If a target size is not positive.
    """
    if height < 1 or width < 1:
        raise ParameterError(f"Target size must be positive, got {height}x{width}")

    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()

    ys = (np.arange(height, dtype=np.float64) + 0.5) * h / height - 0.5
    xs = (np.arange(width, dtype=np.float64) + 0.5) * w / width - 0.5
    src_y, src_x = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing='ij')

    return _sample_bilinear(img, src_x, src_y)
