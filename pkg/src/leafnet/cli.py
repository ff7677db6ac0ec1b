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
Command line interface.

    leafnet preprocess DATASET OUT
    leafnet train --config run.ini [--pretrained CKPT] [--iterations N] [--workers N]
    leafnet eval CHECKPOINT --config run.ini [--run-dir DIR | --seed N] [--protocol t0 ...] [--force]
    leafnet experiment --config run.ini [--runs N] [--ablation]
    leafnet synthetic-dataset OUT [--classes 5] [--per-class 50] [--size 64]
    leafnet report DIR

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 partial failure.
"""

import sys
import json
import logging
import argparse
from pathlib import Path
import numpy as np
from leafnet import __version__
from leafnet.config import load_run_config
from leafnet.data import PreprocessCache, Split, scan_dataset
from leafnet.network import build_network
from leafnet.checkpoint import load_checkpoint, restore
from leafnet.experiment import Experiment, aggregate_directory, write_json
from leafnet.evaluation import PROTOCOL_LABELS
from leafnet.synthetic import make_synthetic_dataset
from leafnet.errors import ConfigurationError, SplitParseError, ParameterError, CapacityError
from leafnet.utils import PACKAGE_LOGGER, generate_logger


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


def _attach_file_log(logger: logging.Logger, directory: Path):
    """
    Adds a debug file handler once the output location is known to be valid.
    """
    path = (directory / f'{logger.name}.log').absolute()
    if any(isinstance(h, logging.FileHandler) and Path(h.baseFilename) == path for h in logger.handlers):
        return
    directory.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    handler.setLevel(logging.DEBUG)
    logger.addHandler(handler)

def _overrides(args, **mapping):
    return {key: getattr(args, attr) for key, attr in mapping.items() if getattr(args, attr, None) is not None}

def cmd_preprocess(args, logger):
    """
    Writes the preprocessed image tree and its manifest.
    """
    index = scan_dataset(Path(args.dataset))
    _attach_file_log(logger, Path(args.out) / 'logs')
    manifest = PreprocessCache(Path(args.out), logger=logger.getChild('preprocess')).build(
        index, threshold=args.threshold, canvas=args.canvas, margin=args.margin)

    for class_name, count in manifest['counts'].items():
        print(f"{class_name}: {count}")
    for failure in manifest['failures']:
        print(f"failed: {failure['ref']} ({failure['reason']})")
    print(f"{len(manifest['written'])} written, {len(manifest['entries'])} cached, {len(manifest['failures'])} failed")

    empty = [c for c, count in manifest['counts'].items() if count == 0]
    if empty:
        logger.error(f"Classes without usable images: {', '.join(empty)}")
        return EXIT_VALIDATION
    return EXIT_PARTIAL if manifest['failures'] else EXIT_OK

def _load(args, logger):
    config = load_run_config(args.config, _overrides(
        args, **{'DATA.workers': 'workers', 'SOLVER.max_iter': 'iterations', 'RUN.pretrained': 'pretrained',
                 'RUN.seed': 'seed', 'RUN.output': 'output', 'RUN.runs': 'runs'}))
    experiment = Experiment(config, logger=logger)
    # raises CapacityError before the output directory exists
    experiment.split(config.seed)
    _attach_file_log(logger, Path(config.output) / 'logs')
    return config, experiment

def cmd_train(args, logger):
    """
    Trains one network into the output directory.
    """
    config, experiment = _load(args, logger)
    trained = experiment.train(config.seed, Path(config.output))
    curve = trained['state'].curve_frame()
    if not curve.empty:
        last = curve.iloc[-1]
        print(f"iteration {int(last['iteration'])}: accuracy {last['accuracy']:.4f}, smoothed {last['smoothed']:.4f}")
    print(f"checkpoint: {Path(config.output) / 'final.ckpt'}")
    return EXIT_OK

def cmd_eval(args, logger):
    """
    Evaluates a checkpoint on the test set of a run.
    """
    config = load_run_config(args.config, _overrides(
        args, **{'RUN.seed': 'seed', 'EVAL.protocols': 'protocols', 'EVAL.augmentations': 'augmentations'}))
    experiment = Experiment(config, logger=logger)
    checkpoint = load_checkpoint(Path(args.checkpoint))

    mean = None
    seed = config.seed
    if args.run_dir:
        run_dir = Path(args.run_dir)
        split = Split.from_dict(json.loads((run_dir / 'split.json').read_text()))
        manifest = json.loads((run_dir / 'manifest.json').read_text())
        seed = manifest['seeds']['run']
        mean = None if manifest.get('mean') is None else np.asarray(manifest['mean'], dtype=np.float32)
    else:
        split = experiment.split(seed)

    network = build_network(config.network, experiment.index.num_classes, logger=logger.getChild('network'))
    restore(network, checkpoint, strict=not args.force)

    out_dir = Path(args.out) if args.out else Path(args.checkpoint).parent / 'eval'
    _attach_file_log(logger, out_dir / 'logs')
    results = experiment.evaluate(network, split, seed, out_dir, mean)
    for name, (accuracy, _, _) in results.items():
        print(f"{PROTOCOL_LABELS.get(name, name)}: {100 * accuracy:.2f}")
    return EXIT_OK

def cmd_experiment(args, logger):
    """
    Repeated runs with aggregation, or the training-curve comparison.
    """
    config, experiment = _load(args, logger)
    if args.ablation:
        curves = experiment.run_ablation()
        print(curves.groupby('variant')['smoothed'].agg(['max', 'last']).to_string())
        return EXIT_OK

    outcome = experiment.run(config.runs)
    for run in outcome['runs']:
        print(f"run {run['run']} seed {run['seed']}: {run['status']}")
    if outcome['aggregate'] is not None:
        print(outcome['aggregate'][['label', 'accuracy']].to_string(index=False))
    return {'ok': EXIT_OK, 'partial': EXIT_PARTIAL}.get(outcome['status'], EXIT_RUNTIME)

def cmd_synthetic(args, logger):
    """
    Writes the procedural desk-scale dataset.
    """
    index = make_synthetic_dataset(Path(args.out), classes=args.classes, per_class=args.per_class, size=args.size, seed=args.seed)
    write_json(Path(args.out) / 'dataset.json', {'classes': index.classes, 'per_class': args.per_class,
                                                'size': args.size, 'seed': args.seed})
    print(f"{index.num_classes} classes, {len(index.all_refs())} images in {args.out}")
    return EXIT_OK

def cmd_report(args, logger):
    """
    Recomputes the aggregate table from the run reports on disk.
    """
    table = aggregate_directory(Path(args.dir))
    table.to_csv(Path(args.dir) / 'aggregate.csv', index=False)
    print(table[['label', 'accuracy']].to_string(index=False))
    return EXIT_OK

def build_parser():
    parser = argparse.ArgumentParser(prog='leafnet', description='Leaf identification with a convolutional network')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='info', choices=['debug', 'info', 'warning', 'error', 'critical'])
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('preprocess', help='write the preprocessed image tree')
    p.add_argument('dataset')
    p.add_argument('out')
    p.add_argument('--threshold', type=int, default=240)
    p.add_argument('--canvas', type=int, default=350)
    p.add_argument('--margin', type=int, default=3)
    p.set_defaults(handler=cmd_preprocess)

    def run_options(p):
        p.add_argument('--config', required=True)
        p.add_argument('--workers', type=int)
        p.add_argument('--iterations', type=int)
        p.add_argument('--pretrained')
        p.add_argument('--seed', type=int)
        p.add_argument('--output')

    p = commands.add_parser('train', help='train one network')
    run_options(p)
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', help='evaluate a checkpoint')
    p.add_argument('checkpoint')
    p.add_argument('--config', required=True)
    p.add_argument('--run-dir')
    p.add_argument('--seed', type=int)
    p.add_argument('--protocol', dest='protocol_list', action='append', choices=['t0', 'tr', 'tf'])
    p.add_argument('--augmentations', type=int)
    p.add_argument('--force', action='store_true')
    p.add_argument('--out')
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('experiment', help='repeated runs with aggregation')
    run_options(p)
    p.add_argument('--runs', type=int)
    p.add_argument('--ablation', action='store_true')
    p.set_defaults(handler=cmd_experiment)

    p = commands.add_parser('synthetic-dataset', help='write the procedural dataset')
    p.add_argument('out')
    p.add_argument('--classes', type=int, default=5)
    p.add_argument('--per-class', type=int, default=50)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=cmd_synthetic)

    p = commands.add_parser('report', help='aggregate run reports')
    p.add_argument('dir')
    p.set_defaults(handler=cmd_report)

    return parser

def main(argv=None):
    """
    Entry point of the leafnet command.

    Returns:
        int: The exit code.
    """
    args = build_parser().parse_args(argv)
    if getattr(args, 'protocol_list', None):
        args.protocols = ','.join(args.protocol_list)
    logger = generate_logger(PACKAGE_LOGGER, stream_level=args.log_level)

    try:
        return args.handler(args, logger)
    except (ConfigurationError, SplitParseError, ParameterError, CapacityError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

if __name__ == '__main__':
    sys.exit(main())
