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
Experiment orchestration: one run is split, batch production, network
initialization or transfer, training and evaluation under every protocol.
"""

import json
from dataclasses import replace
from pathlib import Path
import pandas as pd
from leafnet.augment import TransformPolicy
from leafnet.config import RunConfig
from leafnet.data import ImageStore, SplitKind, Split, scan_dataset, make_split, channel_mean
from leafnet.producer import BatchProducer
from leafnet.network import build_network
from leafnet.checkpoint import load_checkpoint, transfer_load
from leafnet.solver import Trainer, TrainingSinks, multi_run
from leafnet.evaluation import Evaluator, aggregate_runs, aggregate_table, merged_confusion, write_reports
from leafnet.utils import resolve_logger, utc_timestamp


# switches of the training-curve comparison, applied on top of the run configuration
ABLATION_VARIANTS = {
    'full': {},
    'restricted': {'policy': 'restricted'},
    'no_augmentation': {'policy': 'none'},
    'no_dropout': {'dropout': 0.0},
    'no_pretraining': {'pretrained': False},
    }


def run_directory(output: Path, index: int, seed: int):
    return Path(output) / f'run_{index:02d}_seed_{seed}'

def write_json(path: Path, data: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))

class Experiment():
    """
    Runs the pipeline of a RunConfig.

    Attributes:
        _config (RunConfig): The configuration.
        _index (DatasetIndex): The dataset.
        _store (ImageStore): Preprocessed images, shared by all runs.
        _pretrained (Checkpoint): Pretrained weights or None.
        _confusions (list): Confusion matrices of the finished runs.
        _logger (logging.Logger): The logger.
    """

    def __init__(self, config: RunConfig, logger=None):
        self._logger = resolve_logger(logger, 'Experiment')

        self._config = config
        self._index = scan_dataset(config.root)
        self._store = ImageStore(config.root, cache_dir=config.cache, threshold=config.threshold,
                                 canvas=config.canvas, margin=config.margin)
        self._pretrained = load_checkpoint(config.pretrained) if config.pretrained else None
        self._confusions = []

        self._logger.info(f"Dataset {self._index.name}: {self._index.num_classes} classes, "
                          f"{len(self._index.all_refs())} images")

    @property
    def index(self):
        return self._index

    @property
    def store(self):
        return self._store

    def split(self, seed: int):
        """
        The partition of a run, identical for all seeds if the split is FIXED.
        """
        return make_split(self._index, self._config.split, seed, self._config.all_to_train)

    def _manifest(self, seed: int, split: Split, network, transfer, extra: dict = None):
        config = self._config
        fixed = config.split.kind == SplitKind.FIXED
        return {
            'name': config.name,
            'created': utc_timestamp(),
            'config': config.as_dict(),
            'config_digest': config.digest(),
            'config_sources': config.sources,
            'network_digest': f'{network.digest():016x}',
            'dataset': {'name': self._index.name, 'root': str(self._index.root), 'classes': self._index.classes},
            'seeds': {'run': seed, 'split': None if fixed else seed, 'producer': seed, 'dropout': seed,
                      'monitor': seed, 'init': seed, 'eval': seed},
            'split': {'spec': str(config.split), 'train': len(split.train), 'test': len(split.test)},
            'transfer': transfer,
            **(extra or {}),
            }

    def train(self, seed: int, out_dir: Path = None, policy: str = None, dropout: float = None,
              pretrained: bool = True, split: Split = None):
        """
        Trains one network.

        Args:
            seed (int): Seed of the split, batches, transforms and initialization.
            out_dir (Path, optional): Run directory, nothing is written without.
            policy (str, optional): Augmentation policy overriding the configuration.
            dropout (float, optional): Dropout rate overriding the configuration.
            pretrained (bool, optional): Use the configured pretrained weights. Defaults to True.
            split (Split, optional): A given partition instead of the seeded one.

        Returns:
            dict: 'network', 'split', 'state', 'transfer' and 'mean'.
        """
        config = self._config
        split = split or self.split(seed)
        network_config = config.network if dropout is None else replace(config.network, dropout=dropout)
        network = build_network(network_config, self._index.num_classes, logger=self._logger.getChild('network'))

        transfer = None
        if pretrained and self._pretrained is not None:
            transfer = transfer_load(self._pretrained, network, seed)
            self._logger.info(f"Transferred {len(transfer['restored'])} tensors, "
                              f"reinitialized {', '.join(transfer['reinitialized'])}")
        else:
            network.init_weights(seed)

        mean = channel_mean(self._store, [ref for _, ref in split.train]) if config.normalize_mean else None
        train_policy = TransformPolicy.parse(policy) if policy else config.policy

        sinks = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            write_json(out_dir / 'split.json', split.as_dict())
            manifest = self._manifest(seed, split, network, transfer, {
                'policy': train_policy.kind.value, 'dropout': network_config.dropout,
                'mean': None if mean is None else [float(m) for m in mean],
                })
            write_json(out_dir / 'manifest.json', manifest)
            sinks = TrainingSinks(out_dir, meta={'dataset': self._index.name, 'name': config.name})

        producer = BatchProducer(split, self._store, train_policy, batch_size=config.batch_size, size=config.crop,
                                 workers=config.workers, queue_capacity=config.queue_capacity, seed=seed, mean=mean,
                                 logger=self._logger.getChild('producer'))
        trainer = Trainer(network, config.solver, seed=seed, logger=self._logger.getChild('trainer'))
        with producer:
            state = trainer.train(producer, split, self._store, sinks, mean)

        return {'network': network, 'split': split, 'state': state, 'transfer': transfer, 'mean': mean}

    def evaluate(self, network, split: Split, seed: int, out_dir: Path = None, mean=None, protocols=None):
        """
        Evaluates a trained network under every protocol.

        Returns:
            dict: Protocol name -> (accuracy, records, ConfusionMatrix).
        """
        evaluator = Evaluator(network, mean=mean, average_probabilities=self._config.average_probabilities,
                              logger=self._logger.getChild('evaluator'))
        results = {}
        for protocol in protocols or self._config.protocols:
            results[protocol.name] = evaluator.evaluate(split.test, self._store, protocol, split.classes, seed)

        if out_dir is not None:
            write_reports(Path(out_dir), results, meta={'seed': seed, 'network_digest': f'{network.digest():016x}'})
        return results

    def run_single(self, seed: int, index: int = 0):
        """
        Train and evaluate one run into <output>/run_<index>_seed_<seed>.

        Returns:
            dict: Accuracy per protocol.
        """
        out_dir = run_directory(self._config.output, index, seed)
        trained = self.train(seed, out_dir)
        results = self.evaluate(trained['network'], trained['split'], seed, out_dir / 'eval', trained['mean'])
        self._confusions.append([confusion for _, _, confusion in results.values()])
        return {name: accuracy for name, (accuracy, _, _) in results.items()}

    def run(self, n_runs: int = None):
        """
        Repeated runs with seeds seed + i, aggregated per protocol.

        Writes <output>/experiment.json, aggregate.csv and the merged
        confusion matrix over all successful runs.

        Returns:
            dict: 'runs' (per-run outcomes), 'aggregate' (DataFrame) and 'status'.
        """
        config = self._config
        n_runs = n_runs or config.runs
        self._confusions = []

        self._logger.info(f"Running experiment {config.name} with {n_runs} runs ...")

        outcomes = multi_run(self.run_single, n_runs, config.seed, logger=self._logger)
        succeeded = [outcome['result'] for outcome in outcomes if outcome['status'] == 'ok']

        output = Path(config.output)
        table = None
        if succeeded:
            aggregates = aggregate_runs(succeeded)
            table = aggregate_table(aggregates)
            output.mkdir(parents=True, exist_ok=True)
            table.to_csv(output / 'aggregate.csv', index=False)
            merged, _ = merged_confusion(matrix for run in self._confusions for matrix in run)
            merged.write(output / 'confusion_merged.csv', output / 'confusion_merged.png')

        status = 'ok' if len(succeeded) == n_runs else ('partial' if succeeded else 'failed')
        write_json(output / 'experiment.json', {
            'name': config.name, 'config_digest': config.digest(), 'status': status,
            'runs': outcomes,
            'aggregate': [] if table is None else table.to_dict(orient='records'),
            })

        self._logger.info(f"Experiment {config.name} done, {len(succeeded)}/{n_runs} runs succeeded")

        return {'runs': outcomes, 'aggregate': table, 'status': status}

    def run_ablation(self, variants: dict = None, seed: int = None):
        """
        Trains one network per variant with identical seeds.

        Args:
            variants (dict, optional): Name -> switches (policy, dropout, pretrained).
                Defaults to ABLATION_VARIANTS.
            seed (int, optional): Seed of every variant. Defaults to the configured seed.

        Returns:
            pandas.DataFrame: The monitor curves in long form with a 'variant' column.
        """
        variants = variants or ABLATION_VARIANTS
        seed = self._config.seed if seed is None else seed
        split = self.split(seed)
        output = Path(self._config.output) / 'ablation'

        curves = []
        for name, switches in variants.items():
            self._logger.info(f"Training variant {name} ...")
            trained = self.train(seed, output / name, split=split, **switches)
            curve = trained['state'].curve_frame()
            curve.insert(0, 'variant', name)
            curves.append(curve)

        curves = pd.concat(curves, ignore_index=True)
        output.mkdir(parents=True, exist_ok=True)
        curves.to_csv(output / 'curves.csv', index=False)
        return curves

def aggregate_directory(output: Path):
    """
    Recomputes the aggregate from the run reports below a directory.

    Returns:
        pandas.DataFrame: The aggregate table.
    """
    results = []
    for report_path in sorted(Path(output).glob('run_*/eval/report.json')):
        report = json.loads(report_path.read_text())
        results.append({name: entry['accuracy'] for name, entry in report['protocols'].items()})
    return aggregate_table(aggregate_runs(results))
