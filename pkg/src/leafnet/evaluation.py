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
Evaluation: single-image and oversampled prediction, accuracy,
confusion matrices and multi-run aggregation.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple
import numpy as np
import pandas as pd
from PIL import Image
from leafnet.augment import PolicyKind, TransformPolicy, sample_params, apply_transform
from leafnet.data import ImageStore, normalize
from leafnet.network import Network
from leafnet.errors import ParameterError, StateError
from leafnet.utils import make_rng, resolve_logger


EVAL_STREAM = 6
# row labels of the accuracy table
PROTOCOL_LABELS = {
    't0': 'Single image T0',
    'tr': 'Av. TR',
    'tf': 'Av. TF',
    }


@dataclass(frozen=True)
class EvalProtocol:
    """
    How a test image is predicted.

    Attributes:
        policy (PolicyKind): T0, TR or TF.
        augmentations (int): Copies per image for TR and TF, ignored for T0.
    """
    policy: PolicyKind = PolicyKind.T0
    augmentations: int = 64

    def __post_init__(self):
        if self.policy not in (PolicyKind.T0, PolicyKind.TR, PolicyKind.TF):
            raise ParameterError(f"Policy {self.policy.value} is not an evaluation protocol")
        if self.augmentations < 1:
            raise ParameterError(f"Augmentation count must be at least 1, got {self.augmentations}")

    @classmethod
    def parse(cls, text: str, augmentations: int = 64):
        return cls(policy=TransformPolicy.parse(text).kind, augmentations=augmentations)

    @property
    def name(self):
        return self.policy.value

    @property
    def label(self):
        return PROTOCOL_LABELS[self.name]

    @property
    def copies(self):
        return 1 if self.policy == PolicyKind.T0 else self.augmentations

@dataclass
class PredictionRecord:
    """
    The prediction of one test image.

    Attributes:
        ref (str): The image ref.
        true_class (int): The correct class index.
        predicted (int): The predicted class index.
        votes (list): Vote count per class, sums to the number of copies.
    """
    ref: str
    true_class: int
    predicted: int
    votes: list = field(default_factory=list)

    @property
    def correct(self):
        return self.true_class == self.predicted

    def as_dict(self):
        return {'ref': self.ref, 'true_class': self.true_class, 'predicted': self.predicted, 'votes': self.votes}

def vote(predictions, num_classes: int):
    """
    The mode of a set of class predictions.

    Ties go to the smallest class index.

    Args:
        predictions (array_like): Predicted class indices.
        num_classes (int): Histogram length.

    Returns:
        tuple: The winning class and the vote histogram.
    """
    histogram = np.bincount(np.asarray(predictions, dtype=np.int64), minlength=num_classes)
    return int(np.argmax(histogram)), histogram

class ConfusionMatrix():
    """
    Counts of true class (rows) against predicted class (columns).

    Attributes:
        classes (list): Class names.
        counts (numpy.ndarray): The C x C integer counts.
    """

    def __init__(self, classes, counts=None):
        self.classes = list(classes)
        size = len(self.classes)
        if counts is None:
            counts = np.zeros((size, size), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (size, size):
            raise ParameterError(f"Confusion counts must be {size}x{size}, got {counts.shape}")
        self.counts = counts

    @classmethod
    def from_records(cls, records, classes):
        matrix = cls(classes)
        for record in records:
            matrix.add(record.true_class, record.predicted)
        return matrix

    def add(self, true_class: int, predicted: int, count: int = 1):
        self.counts[true_class, predicted] += count

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def trace(self):
        return int(np.trace(self.counts))

    @property
    def accuracy(self):
        return self.trace / self.total if self.total else 0.0

    def __add__(self, other):
        if list(other.classes) != self.classes:
            raise ParameterError("Confusion matrices of different class sets cannot be merged")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def errors(self):
        """
        The misclassification counts, diagonal set to zero.
        """
        errors = self.counts.copy()
        np.fill_diagonal(errors, 0)
        return errors

    def normalized_errors(self):
        """
        Misclassifications divided by their maximum, all zero without errors.
        """
        errors = self.errors().astype(np.float64)
        peak = errors.max() if errors.size else 0
        return errors / peak if peak > 0 else errors

    def to_frame(self):
        return pd.DataFrame(self.counts, index=pd.Index(self.classes, name='true'), columns=self.classes)

    def render(self, cell: int = 8):
        """
        Grayscale picture of the normalized misclassifications, the maximum is black.

        Args:
            cell (int, optional): Pixels per matrix cell. Defaults to 8.

        Returns:
            numpy.ndarray: uint8 image of shape (C*cell, C*cell).
        """
        shade = np.rint(255 * (1.0 - self.normalized_errors())).astype(np.uint8)
        return np.kron(shade, np.ones((cell, cell), dtype=np.uint8))

    def write(self, csv_path: Path, image_path: Path = None, cell: int = 8):
        """
        Writes the counts as CSV and optionally the rendering as PNG or PGM (by suffix).
        """
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(csv_path)
        if image_path is not None:
            Image.fromarray(self.render(cell)).save(image_path)

def merged_confusion(matrices):
    """
    Sums confusion matrices of several protocols and runs.

    Images evaluated under several protocols are counted once per protocol.

    Args:
        matrices (list): ConfusionMatrix objects sharing one class set.

    Returns:
        tuple: The summed ConfusionMatrix and its normalized misclassification array.

    Raises:
        ParameterError: If the list is empty or the class sets differ.
    """
    matrices = list(matrices)
    if not matrices:
        raise ParameterError("Nothing to merge")
    merged = ConfusionMatrix(matrices[0].classes)
    for matrix in matrices:
        merged = merged + matrix
    return merged, merged.normalized_errors()

class Evaluator():
    """
    Predicts test images with a trained network.

    Eval-mode forward does not touch the network, several evaluators may
    share one network across threads.

    Attributes:
        _network (Network): The trained network.
        _mean (numpy.ndarray): Channel mean subtracted at normalization, or None.
        _chunk (int): Images per forward call.
        _average (bool): Predict from the mean softmax instead of vote counting.
        _logger (logging.Logger): The logger.
    """

    def __init__(self, network: Network, mean=None, chunk: int = 64, average_probabilities: bool = False, logger=None):
        self._logger = resolve_logger(logger, 'Evaluator')

        self._network = network
        self._mean = mean
        self._chunk = chunk
        self._average = average_probabilities

    @property
    def size(self):
        return self._network.config.input_size

    def probabilities(self, images):
        """
        Softmax outputs of a list of uint8 windows.
        """
        out = []
        for start in range(0, len(images), self._chunk):
            out.append(self._network.predict_proba(normalize(images[start:start + self._chunk], self._mean)))
        return np.concatenate(out, axis=0)

    def classify(self, images):
        """
        Single-shot argmax predictions of a list of uint8 windows.
        """
        return np.argmax(self.probabilities(images), axis=1)

    def _windows(self, img, protocol: EvalProtocol, rng):
        canvas = img.shape[0]
        if protocol.policy == PolicyKind.T0:
            params = [sample_params(TransformPolicy(PolicyKind.T0), canvas=canvas, size=self.size)]
        elif protocol.policy == PolicyKind.TF:
            params = sample_params(TransformPolicy(PolicyKind.TF, protocol.augmentations), canvas=canvas, size=self.size)
        else:
            if rng is None:
                raise ParameterError("TR evaluation needs a random generator")
            policy = TransformPolicy(PolicyKind.TR)
            params = [sample_params(policy, rng, canvas=canvas, size=self.size) for _ in range(protocol.augmentations)]
        return [apply_transform(img, p, self.size) for p in params]

    def predict_single(self, img, protocol: EvalProtocol, rng=None, ref: str = '', true_class: int = -1):
        """
        Predicts one preprocessed image.

        T0 classifies the centered window. TR and TF classify every augmented
        copy and take the most frequent prediction.

        Args:
            img (numpy.ndarray): The preprocessed canvas.
            protocol (EvalProtocol): The protocol.
            rng (numpy.random.Generator, optional): Random source, required for TR.
            ref (str, optional): Image ref stored in the record.
            true_class (int, optional): Correct class stored in the record.

        Returns:
            PredictionRecord: The prediction with its vote histogram.

        Raises:
            StateError: If the network has no parameters.
        """
        if not self._network.initialized:
            raise StateError("Cannot predict with an untrained network")

        probabilities = self.probabilities(self._windows(img, protocol, rng))
        num_classes = self._network.num_classes
        predicted, histogram = vote(np.argmax(probabilities, axis=1), num_classes)
        if self._average:
            predicted = int(np.argmax(probabilities.mean(axis=0)))

        return PredictionRecord(ref=ref, true_class=int(true_class), predicted=predicted, votes=histogram.tolist())

    def evaluate(self, items, store: ImageStore, protocol: EvalProtocol, classes, seed: int = 0):
        """
        Predicts every test image.

        Image i under TR draws from the stream (seed, EVAL_STREAM, i), so
        results do not depend on evaluation order. T0 and TF draw nothing.

        Args:
            items (list): (class index, ref) pairs.
            store (ImageStore): Source of preprocessed images.
            protocol (EvalProtocol): The protocol.
            classes (list): Class names.
            seed (int, optional): Seed of the TR draws. Defaults to 0.

        Returns:
            tuple: Accuracy, list of PredictionRecord and ConfusionMatrix.
        """
        if not items:
            raise ParameterError("Test set is empty")

        self._logger.info(f"Evaluating {len(items)} images with protocol {protocol.name} ...")

        records = []
        for i, (c, ref) in enumerate(items):
            rng = make_rng(seed, EVAL_STREAM, i) if protocol.policy == PolicyKind.TR else None
            records.append(self.predict_single(store.get(ref), protocol, rng, ref=ref, true_class=c))

        confusion = ConfusionMatrix.from_records(records, classes)
        accuracy = confusion.accuracy

        self._logger.info(f"Evaluation {protocol.name} done, accuracy {accuracy:.4f}")

        return accuracy, records, confusion

    def monitor(self, items, store: ImageStore, samples: int, rng):
        """
        Accuracy on randomly drawn test images, each TR-augmented once.

        Args:
            items (list): (class index, ref) pairs of the test set.
            store (ImageStore): Source of preprocessed images.
            samples (int): Number of drawn images.
            rng (numpy.random.Generator): Random source of draws and transforms.

        Returns:
            float: The fraction of correct single-shot predictions.
        """
        policy = TransformPolicy(PolicyKind.TR)
        correct = 0
        for start in range(0, samples, self._chunk):
            windows, labels = [], []
            for _ in range(min(self._chunk, samples - start)):
                c, ref = items[int(rng.integers(len(items)))]
                img = store.get(ref)
                windows.append(apply_transform(img, sample_params(policy, rng, canvas=img.shape[0], size=self.size), self.size))
                labels.append(c)
            correct += int(np.sum(self.classify(windows) == np.asarray(labels)))
        return correct / samples

def predict_single(network: Network, img, protocol: EvalProtocol, rng=None, mean=None, average_probabilities: bool = False):
    """
    Predicts one preprocessed image, see Evaluator.predict_single.
    """
    evaluator = Evaluator(network, mean=mean, average_probabilities=average_probabilities, logger=network.logger)
    return evaluator.predict_single(img, protocol, rng)

def evaluate(network: Network, split, store: ImageStore, protocol: EvalProtocol, seed: int = 0, mean=None,
             average_probabilities: bool = False):
    """
    Evaluates the test set of a split, see Evaluator.evaluate.
    """
    evaluator = Evaluator(network, mean=mean, average_probabilities=average_probabilities, logger=network.logger)
    return evaluator.evaluate(split.test, store, protocol, split.classes, seed)

class Aggregate(NamedTuple):
    """
    Mean and population standard deviation of per-run accuracies.
    """
    mean: float
    std: float
    runs: int

    @property
    def text(self):
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}"

def aggregate_runs(results):
    """
    Aggregates per-run accuracies per protocol.

    Args:
        results (list): One dict per run mapping protocol name to accuracy.

    Returns:
        dict: Aggregate per protocol, in first-seen protocol order.

    Raises:
        ParameterError: If there are no results.
    """
    results = list(results)
    if not results:
        raise ParameterError("Cannot aggregate zero runs")

    protocols = []
    for result in results:
        protocols.extend(p for p in result if p not in protocols)

    aggregates = {}
    for protocol in protocols:
        values = np.array([result[protocol] for result in results if protocol in result], dtype=np.float64)
        aggregates[protocol] = Aggregate(mean=float(values.mean()), std=float(values.std()), runs=len(values))
    return aggregates

def aggregate_table(aggregates: dict):
    """
    The aggregate as an accuracy table with one row per protocol.
    """
    rows = [{'protocol': name, 'label': PROTOCOL_LABELS.get(name, name), 'mean': a.mean, 'std': a.std,
             'runs': a.runs, 'accuracy': a.text} for name, a in aggregates.items()]
    return pd.DataFrame(rows, columns=['protocol', 'label', 'mean', 'std', 'runs', 'accuracy'])

def write_reports(out_dir: Path, results: dict, meta: dict = None, image_suffix: str = '.png'):
    """
    Writes the evaluation outputs of one run.

    Files: report.json (protocols, accuracies, per-image records, meta),
    accuracy.csv, confusion_<protocol>.csv per protocol and the merged
    confusion_merged.csv with its grayscale rendering.

    Args:
        out_dir (Path): Target directory.
        results (dict): Protocol name -> (accuracy, records, ConfusionMatrix).
        meta (dict, optional): Additional report entries.
        image_suffix (str, optional): '.png' or '.pgm'. Defaults to '.png'.

    Returns:
        dict: The report as written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = dict(meta or {})
    report['protocols'] = {
        name: {'label': PROTOCOL_LABELS.get(name, name), 'accuracy': accuracy,
               'records': [record.as_dict() for record in records]}
        for name, (accuracy, records, _) in results.items()
        }
    (out_dir / 'report.json').write_text(json.dumps(report, indent=2, sort_keys=True))

    table = pd.DataFrame([{'protocol': name, 'label': PROTOCOL_LABELS.get(name, name), 'accuracy': accuracy}
                          for name, (accuracy, _, _) in results.items()])
    table.to_csv(out_dir / 'accuracy.csv', index=False)

    for name, (_, _, confusion) in results.items():
        confusion.write(out_dir / f'confusion_{name}.csv')
    if results:
        merged, _ = merged_confusion(confusion for _, _, confusion in results.values())
        merged.write(out_dir / 'confusion_merged.csv', out_dir / f'confusion_merged{image_suffix}')

    return report
