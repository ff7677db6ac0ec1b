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
Shared test images and stores.
"""

import numpy as np
from leafnet.data import ImageStore


def smooth_image(size: int = 64, seed: int = 0):
    """
    A smooth colourful square image without white areas, for interpolation tests.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(0.5, 2.0, size=3)
        channels.append(120 + 60 * np.sin(a * np.pi * xs + b) * np.cos(c * np.pi * ys))
    return np.clip(np.stack(channels, axis=-1), 0, 255).round().astype(np.uint8)

def leaf_canvas(size: int = 64, colour=(40, 120, 40), box=(16, 20, 24, 30)):
    """
    White canvas with one coloured rectangle at box = (x, y, width, height).
    """
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    x, y, w, h = box
    img[y:y + h, x:x + w] = colour
    return img

class ArrayStore(ImageStore):
    """
    ImageStore fed from memory.
    """

    def __init__(self, images: dict, canvas: int):
        super().__init__(root='.', canvas=canvas)
        for ref, img in images.items():
            self.put(ref, img)

