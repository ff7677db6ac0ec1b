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

import json
import numpy as np
import pandas as pd
import pytest
from PIL import Image
from leafnet.augment import PolicyKind
from leafnet.data import Split
from leafnet.errors import ParameterError, StateError
from leafnet.evaluation import (EvalProtocol, Evaluator, ConfusionMatrix, PredictionRecord, aggregate_runs,
                                aggregate_table, evaluate, merged_confusion, vote, write_reports)
from leafnet.network import NetworkConfig, build_network, CLASSIFIER


SMALL = NetworkConfig(input_size=16, kernels=[3, 3], filters=[2, 3], fc_width=6, dropout=0.5)


@pytest.fixture
def constant_network(logger):
    """
    Always predicts class 1: every weight is zero, the classifier bias favours class 1.
    """
    network = build_network(SMALL, 3, logger=logger)
    network.set_tensors({name: np.zeros(shape, dtype=np.float32) for name, shape in network.shapes().items()})
    network.tensors()[f'{CLASSIFIER}.bias'][:] = [0.0, 1.0, 0.0]
    return network

@pytest.fixture
def random_network(logger):
    network = build_network(SMALL, 3, logger=logger)
    network.init_weights(8)
    return network

def test_protocols():
    assert EvalProtocol().copies == 1
    assert EvalProtocol(PolicyKind.TR, 64).copies == 64
    assert EvalProtocol.parse('TF', 16).label == 'Av. TF'
    assert EvalProtocol.parse('t0').name == 't0'
    with pytest.raises(ParameterError):
        EvalProtocol(PolicyKind.RESTRICTED)
    with pytest.raises(ParameterError):
        EvalProtocol(PolicyKind.TR, 0)

def test_vote_ties_go_to_smallest_class():
    assert vote([2, 2, 1, 1, 0], 4)[0] == 1
    winner, histogram = vote([3, 3, 0], 4)
    assert winner == 3
    assert histogram.tolist() == [1, 0, 0, 2]

@pytest.mark.parametrize('protocol', [EvalProtocol(PolicyKind.T0), EvalProtocol(PolicyKind.TR, 8), EvalProtocol(PolicyKind.TF, 8)])
def test_constant_classifier(constant_network, colour_store, protocol):
    store, items, names = colour_store
    split = Split(train=[], test=items, seed=0, classes=names)
    accuracy, records, confusion = evaluate(constant_network, split, store, protocol, seed=1)

    assert accuracy == pytest.approx(1 / 3)
    assert all(r.predicted == 1 for r in records)
    assert all(sum(r.votes) == protocol.copies for r in records)
    assert confusion.counts[:, 1].tolist() == [4, 4, 4]
    assert confusion.total == 12

def test_untrained_network(logger, colour_store):
    store, items, _ = colour_store
    evaluator = Evaluator(build_network(SMALL, 3, logger=logger), logger=logger)
    with pytest.raises(StateError):
        evaluator.predict_single(store.get(items[0][1]), EvalProtocol())

def test_tr_evaluation_is_reproducible(random_network, colour_store, logger):
    store, items, names = colour_store
    evaluator = Evaluator(random_network, logger=logger)
    protocol = EvalProtocol(PolicyKind.TR, 6)
    first = evaluator.evaluate(items, store, protocol, names, seed=4)
    second = evaluator.evaluate(items, store, protocol, names, seed=4)
    assert [r.votes for r in first[1]] == [r.votes for r in second[1]]

def test_t0_is_deterministic(random_network, colour_store, logger):
    store, items, _ = colour_store
    evaluator = Evaluator(random_network, logger=logger)
    img = store.get(items[5][1])
    a = evaluator.predict_single(img, EvalProtocol())
    b = evaluator.predict_single(img, EvalProtocol())
    assert a.predicted == b.predicted and a.votes == b.votes

def test_average_probabilities(random_network, colour_store, logger):
    store, items, _ = colour_store
    evaluator = Evaluator(random_network, average_probabilities=True, logger=logger)
    img = store.get(items[0][1])
    record = evaluator.predict_single(img, EvalProtocol(PolicyKind.TF, 4))
    windows = evaluator._windows(img, EvalProtocol(PolicyKind.TF, 4), None)
    assert record.predicted == int(np.argmax(evaluator.probabilities(windows).mean(axis=0)))

def test_monitor(constant_network, colour_store, rng, logger):
    store, items, _ = colour_store
    accuracy = Evaluator(constant_network, chunk=5, logger=logger).monitor(items, store, 30, rng)
    assert 0.0 <= accuracy <= 1.0
    class_one = [item for item in items if item[0] == 1]
    assert Evaluator(constant_network, logger=logger).monitor(class_one, store, 7, rng) == 1.0

def test_aggregate_examples():
    assert aggregate_runs([{'t0': 0.99}] * 3)['t0'].text == '99.00 ± 0.00'
    assert aggregate_runs([{'t0': 1.0}, {'t0': 0.0}])['t0'].text == '50.00 ± 50.00'
    with pytest.raises(ParameterError):
        aggregate_runs([])

def test_aggregate_table():
    aggregates = aggregate_runs([{'t0': 0.9, 'tr': 0.95}, {'t0': 0.8, 'tr': 0.85}])
    table = aggregate_table(aggregates)
    assert table['label'].tolist() == ['Single image T0', 'Av. TR']
    assert table['runs'].tolist() == [2, 2]
    assert table['mean'].tolist() == pytest.approx([0.85, 0.9])

def test_confusion_matrix():
    names = ['a', 'b', 'c']
    records = [PredictionRecord('x', 0, 0), PredictionRecord('y', 0, 2), PredictionRecord('z', 2, 0),
               PredictionRecord('w', 2, 0), PredictionRecord('v', 1, 1)]
    matrix = ConfusionMatrix.from_records(records, names)
    assert matrix.counts.tolist() == [[1, 0, 1], [0, 1, 0], [2, 0, 0]]
    assert matrix.accuracy == pytest.approx(2 / 5)

    # true a -> predicted c is not the same error as true c -> predicted a
    errors = matrix.normalized_errors()
    assert errors[2, 0] == 1.0 and errors[0, 2] == 0.5

    image = matrix.render(cell=4)
    assert image.shape == (12, 12) and image.dtype == np.uint8
    assert image[8, 0] == 0 and image[0, 0] == 255 and image[0, 8] == 128

    merged, normalized = merged_confusion([matrix, matrix])
    assert merged.counts.tolist() == [[2, 0, 2], [0, 2, 0], [4, 0, 0]]
    assert np.array_equal(normalized, errors)

    with pytest.raises(ParameterError):
        matrix + ConfusionMatrix(['a', 'b'])
    with pytest.raises(ParameterError):
        merged_confusion([])

def test_confusion_without_errors():
    matrix = ConfusionMatrix(['a', 'b'], [[3, 0], [0, 2]])
    assert not matrix.normalized_errors().any()
    assert (matrix.render(cell=2) == 255).all()

def test_write_reports(constant_network, colour_store, tmp_path):
    store, items, names = colour_store
    split = Split(train=[], test=items, seed=0, classes=names)
    results = {'t0': evaluate(constant_network, split, store, EvalProtocol()),
               'tf': evaluate(constant_network, split, store, EvalProtocol(PolicyKind.TF, 4))}
    write_reports(tmp_path, results, meta={'seed': 1})

    report = json.loads((tmp_path / 'report.json').read_text())
    assert report['seed'] == 1
    assert set(report['protocols']) == {'t0', 'tf'}
    assert len(report['protocols']['tf']['records']) == 12
    assert pd.read_csv(tmp_path / 'accuracy.csv')['protocol'].tolist() == ['t0', 'tf']
    merged = pd.read_csv(tmp_path / 'confusion_merged.csv', index_col=0)
    assert merged.values.sum() == 24
    with Image.open(tmp_path / 'confusion_merged.png') as image:
        assert image.size == (24, 24)
