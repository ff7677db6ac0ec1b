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

import pytest
import numpy as np
import leafnet
from tests.helpers import ArrayStore, leaf_canvas


@pytest.fixture(scope='session')
def logger():
    return leafnet.generate_logger(name='TEST_leafnet', stream_level='warning')

@pytest.fixture
def rng():
    return np.random.default_rng(12345)

@pytest.fixture
def colour_store():
    """
    Three classes, each a canvas with one solid colour block, four images per class.
    """
    colours = [(200, 30, 30), (30, 200, 30), (30, 30, 200)]
    images, items = {}, []
    for c, colour in enumerate(colours):
        for i in range(4):
            ref = f'class{c}/{i}.png'
            images[ref] = leaf_canvas(24, colour, box=(4 + i, 4, 14, 16))
            items.append((c, ref))
    return ArrayStore(images, canvas=24), items, ['red', 'green', 'blue']
