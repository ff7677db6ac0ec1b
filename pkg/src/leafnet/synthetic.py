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
Procedural leaf-like dataset for desk-scale experiments.
"""

from pathlib import Path
import numpy as np
from PIL import Image, ImageDraw
from leafnet.data import scan_dataset
from leafnet.utils import make_rng


SUPERSAMPLE = 4
OUTLINE_POINTS = 180

COLOURS = [
    (46, 125, 50), (104, 140, 36), (27, 94, 70), (130, 119, 23),
    (85, 107, 47), (110, 70, 40), (20, 105, 110), (150, 150, 40),
    ]


def _ellipse(t):
    return np.cos(t), 0.62 * np.sin(t)

def _lobed(t):
    r = 1 + 0.28 * np.cos(5 * t)
    return r * np.cos(t), r * np.sin(t)

def _lanceolate(t):
    return np.cos(t), 0.28 * np.sin(t) * (1 + np.cos(t))

def _cordate(t):
    x = 16 * np.sin(t) ** 3
    y = 13 * np.cos(t) - 5 * np.cos(2 * t) - 2 * np.cos(3 * t) - np.cos(4 * t)
    return x, -y

def _needles(t):
    r = np.where(np.arange(t.size) % 2 == 0, 1.0, 0.22)
    return r * np.cos(t), r * np.sin(t)

def _palmate(t):
    r = 0.45 + 0.55 * np.abs(np.cos(1.5 * t))
    return r * np.cos(t), r * np.sin(t)

def _round(t):
    r = 1 + 0.05 * np.cos(12 * t)
    return r * np.cos(t), r * np.sin(t)

SHAPES = [
    ('ellipse', _ellipse, OUTLINE_POINTS),
    ('lobed', _lobed, OUTLINE_POINTS),
    ('lanceolate', _lanceolate, OUTLINE_POINTS),
    ('cordate', _cordate, OUTLINE_POINTS),
    ('needles', _needles, 14),
    ('palmate', _palmate, OUTLINE_POINTS),
    ('round', _round, OUTLINE_POINTS),
    ]


def _outline(family: int):
    _, shape, count = SHAPES[family]
    t = np.linspace(0, 2 * np.pi, count, endpoint=False)
    x, y = shape(t)
    x, y = x - (x.max() + x.min()) / 2, y - (y.max() + y.min()) / 2
    extent = np.sqrt(x ** 2 + y ** 2).max()
    return x / extent, y / extent

def draw_leaf(family: int, colour, size: int, rng):
    """
    Draws one jittered leaf of a shape family on a white square.

    Args:
        family (int): Index into SHAPES.
        colour (tuple): Base RGB colour.
        size (int): Output edge length.
        rng (numpy.random.Generator): Source of the jitter.

    Returns:
        numpy.ndarray: The size x size x 3 uint8 image.
    """
    big = size * SUPERSAMPLE
    x, y = _outline(family)

    angle = rng.uniform(0, 2 * np.pi)
    radius = big * 0.38 * rng.uniform(0.85, 1.15)
    stretch = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.05, 0.05, size=2) * big
    cos, sin = np.cos(angle), np.sin(angle)
    px = big / 2 + shift[0] + radius * (cos * x * stretch - sin * y)
    py = big / 2 + shift[1] + radius * (sin * x * stretch + cos * y)

    tint = tuple(int(np.clip(c + rng.integers(-15, 16), 0, 200)) for c in colour)
    vein = tuple(max(c - 30, 0) for c in tint)

    img = Image.new('RGB', (big, big), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    draw.polygon(list(zip(px.tolist(), py.tolist())), fill=tint)
    # midrib along the main axis
    tip = np.array([cos, sin]) * radius * 0.9
    centre = np.array([big / 2, big / 2]) + shift
    draw.line([tuple(centre - tip), tuple(centre + tip)], fill=vein, width=max(1, SUPERSAMPLE))

    img = img.resize((size, size), Image.Resampling.LANCZOS)
    return np.asarray(img, dtype=np.uint8)

def make_synthetic_dataset(root: Path, classes: int = 5, per_class: int = 50, size: int = 64, seed: int = 0):
    """
    Writes a procedural dataset of leaf-like shapes.

    Class i uses shape family i mod len(SHAPES) and colour band i mod
    len(COLOURS). Images are <root>/<class>/<nnn>.png.

    Args:
        root (Path): Target directory.
        classes (int, optional): Number of classes. Defaults to 5.
        per_class (int, optional): Images per class. Defaults to 50.
        size (int, optional): Edge length. Defaults to 64.
        seed (int, optional): Seed. Defaults to 0.

    Returns:
        DatasetIndex: The index of the written dataset.
    """
    root = Path(root)
    for c in range(classes):
        family = c % len(SHAPES)
        name = f'{c:02d}_{SHAPES[family][0]}'
        directory = root / name
        directory.mkdir(parents=True, exist_ok=True)
        rng = make_rng(seed, c)
        colour = COLOURS[(c + c // len(SHAPES)) % len(COLOURS)]
        for i in range(per_class):
            Image.fromarray(draw_leaf(family, colour, size, rng)).save(directory / f'{i:03d}.png')

    return scan_dataset(root, name=root.name)
