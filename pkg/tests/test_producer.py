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

import numpy as np
import pytest
from scipy import stats
from leafnet.augment import PolicyKind, TransformPolicy
from leafnet.data import Split
from leafnet.errors import ParameterError, StateError
from leafnet.producer import BatchProducer, build_batch
from tests.helpers import ArrayStore


class FailingStore(ArrayStore):

    def get(self, ref):
        raise OSError(f"cannot read {ref}")

@pytest.fixture
def split(colour_store):
    _, items, names = colour_store
    return Split(train=items, test=[], seed=0, classes=names)

def take(producer, n):
    with producer:
        return [next(producer) for _ in range(n)]

def test_batch_shapes(colour_store, split, logger):
    store = colour_store[0]
    batches = take(BatchProducer(split, store, batch_size=5, size=16, workers=1, seed=3, logger=logger), 3)
    for batch in batches:
        assert batch.images.shape == (5, 3, 16, 16)
        assert batch.images.dtype == np.float32
        assert batch.labels.shape == (5,)
        assert len(batch.items) == len(batch.params) == 5
        assert np.array_equal(batch.labels, [c for c, _ in batch.items])
        assert 0.0 <= batch.images.min() and batch.images.max() <= 1.0

def test_same_seed_same_batches(colour_store, split, logger):
    store = colour_store[0]
    a = take(BatchProducer(split, store, batch_size=4, size=16, workers=1, seed=7, logger=logger), 4)
    b = take(BatchProducer(split, store, batch_size=4, size=16, workers=1, seed=7, logger=logger), 4)
    for x, y in zip(a, b):
        assert x.items == y.items
        assert np.array_equal(x.images, y.images)

def test_synchronous_matches_single_worker(colour_store, split, logger):
    store = colour_store[0]
    threaded = take(BatchProducer(split, store, batch_size=4, size=16, workers=1, seed=11, logger=logger), 3)
    inline = take(BatchProducer(split, store, batch_size=4, size=16, workers=0, seed=11, logger=logger), 3)
    for x, y in zip(threaded, inline):
        assert x.items == y.items
        assert x.params == y.params
        assert np.array_equal(x.images, y.images)

def test_seeds_differ(colour_store, split, logger):
    store = colour_store[0]
    a = take(BatchProducer(split, store, batch_size=8, size=16, workers=0, seed=1, logger=logger), 2)
    b = take(BatchProducer(split, store, batch_size=8, size=16, workers=0, seed=2, logger=logger), 2)
    assert any(not np.array_equal(x.images, y.images) for x, y in zip(a, b))

def test_multiple_workers_only_full_batches(colour_store, split, logger):
    store = colour_store[0]
    batches = take(BatchProducer(split, store, batch_size=6, size=16, workers=3, queue_capacity=2, seed=5, logger=logger), 12)
    assert all(len(b.items) == 6 for b in batches)
    assert {b.worker for b in batches} <= {0, 1, 2}

def test_worker_failure_propagates(colour_store, split, logger):
    images = {ref: colour_store[0].get(ref) for _, ref in colour_store[1]}
    producer = BatchProducer(split, FailingStore(images, canvas=24), batch_size=4, size=16, workers=1, logger=logger)
    producer.start()
    with pytest.raises(OSError):
        producer.next_batch(timeout=10)
    assert producer.get_status() == 'inactive'

def test_lifecycle(colour_store, split, logger):
    producer = BatchProducer(split, colour_store[0], batch_size=2, size=16, workers=1, logger=logger)
    with pytest.raises(StateError):
        producer.next_batch()
    assert producer.start()
    assert not producer.start()
    assert producer.stop()
    assert producer.get_status() == 'inactive'

    with pytest.raises(ValueError):
        producer.workers = 4

@pytest.mark.parametrize('kwargs', [{'batch_size': 0}, {'workers': -1}, {'queue_capacity': 0}])
def test_invalid_arguments(colour_store, split, logger, kwargs):
    with pytest.raises(ParameterError):
        BatchProducer(split, colour_store[0], logger=logger, **kwargs)

def test_fixed_rotation_is_not_a_training_policy(colour_store, rng):
    store, items, _ = colour_store
    with pytest.raises(ParameterError):
        build_batch(items[:2], store, TransformPolicy(PolicyKind.TF), rng, size=16)

def test_identity_policy(colour_store, rng):
    store, items, _ = colour_store
    batch = build_batch(items[:1], store, TransformPolicy(PolicyKind.T0), rng, size=16)
    expected = store.get(items[0][1])[4:20, 4:20].transpose(2, 0, 1) / np.float32(255)
    assert np.allclose(batch.images[0], expected)

def test_four_workers_match_one_worker_in_distribution(colour_store, split, logger):
    store = colour_store[0]
    single = take(BatchProducer(split, store, batch_size=32, size=16, workers=1, seed=21, logger=logger), 100)
    pooled = take(BatchProducer(split, store, batch_size=32, size=16, workers=4, seed=22, logger=logger), 100)
    refs = sorted({ref for _, ref in split.train})

    def slots(batches):
        items = [item for b in batches for item in b.items]
        params = [p for b in batches for p in b.params]
        return items, params

    (items_a, params_a), (items_b, params_b) = slots(single), slots(pooled)
    assert len(items_a) == len(items_b) == 3200

    labels = np.array([np.bincount([c for c, _ in items], minlength=3) for items in (items_a, items_b)])
    assert stats.chi2_contingency(labels).pvalue > 0.001
    images = np.array([[sum(1 for _, r in items if r == ref) for ref in refs] for items in (items_a, items_b)])
    assert stats.chi2_contingency(images).pvalue > 0.001

    for key in ('angle', 'scale', 'contrast', 'brightness'):
        a = [getattr(p, key) for p in params_a]
        b = [getattr(p, key) for p in params_b]
        assert stats.ks_2samp(a, b).pvalue > 0.001, key
    for key in ('crop_x', 'crop_y', 'flip'):
        a = np.array([int(getattr(p, key)) for p in params_a])
        b = np.array([int(getattr(p, key)) for p in params_b])
        values = np.union1d(a, b)
        table = np.array([[np.sum(x == v) for v in values] for x in (a, b)])
        assert stats.chi2_contingency(table).pvalue > 0.001, key
