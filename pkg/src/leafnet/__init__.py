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

from leafnet.utils import generate_logger
from leafnet.augment import PolicyKind, TransformPolicy, TransformParams, sample_params, apply_transform
from leafnet.data import DatasetIndex, SplitSpec, Split, scan_dataset, parse_split_spec, make_split, sample_batch, ImageStore
from leafnet.producer import Batch, BatchProducer
from leafnet.network import NetworkConfig, Network, build_network
from leafnet.checkpoint import Checkpoint, save_checkpoint, load_checkpoint, restore, transfer_load
from leafnet.solver import SolverConfig, Trainer, learning_rate, nesterov_step, train, multi_run
from leafnet.evaluation import EvalProtocol, PredictionRecord, ConfusionMatrix, Evaluator, predict_single, evaluate, aggregate_runs, merged_confusion
from leafnet.synthetic import make_synthetic_dataset

__version__ = '0.1.0'
__all__ = [
    'generate_logger',
    'PolicyKind', 'TransformPolicy', 'TransformParams', 'sample_params', 'apply_transform',
    'DatasetIndex', 'SplitSpec', 'Split', 'scan_dataset', 'parse_split_spec', 'make_split', 'sample_batch', 'ImageStore',
    'Batch', 'BatchProducer',
    'NetworkConfig', 'Network', 'build_network',
    'Checkpoint', 'save_checkpoint', 'load_checkpoint', 'restore', 'transfer_load',
    'SolverConfig', 'Trainer', 'learning_rate', 'nesterov_step', 'train', 'multi_run',
    'EvalProtocol', 'PredictionRecord', 'ConfusionMatrix', 'Evaluator', 'predict_single', 'evaluate', 'aggregate_runs', 'merged_confusion',
    'make_synthetic_dataset',
    ]
