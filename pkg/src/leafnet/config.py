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
Experiment configuration.

Values are resolved in three layers: the package defaults (defaults.ini),
the experiment file (same sections and keys) and explicit overrides such
as command line flags. The whole configuration is validated before
anything is written.
"""

import os
import json
import configparser
from dataclasses import dataclass, field, asdict
from pathlib import Path
from leafnet.augment import PolicyKind, TransformPolicy
from leafnet.data import SplitSpec, parse_split_spec
from leafnet.network import NetworkConfig
from leafnet.solver import SolverConfig
from leafnet.evaluation import EvalProtocol
from leafnet.errors import ConfigurationError
from leafnet.utils import fnv1a_64


DEFAULTS_PATH = Path(__file__).parent.absolute() / 'defaults.ini'
OUTPUT_ENV = 'LEAFNET_OUTPUT'
# keys accepted in an experiment file although they have no package default
OPTIONAL_KEYS = {('NETWORK', 'input_size')}


def _read_defaults():
    config = configparser.ConfigParser()
    if not config.read(DEFAULTS_PATH):
        raise FileNotFoundError(f'Default configuration not found at {DEFAULTS_PATH}')
    return config

@dataclass
class RunConfig:
    """
    A fully resolved and validated experiment configuration.
    """
    root: Path
    split: SplitSpec
    network: NetworkConfig
    solver: SolverConfig
    policy: TransformPolicy
    protocols: list
    cache: Path = None
    threshold: int = 240
    canvas: int = 350
    margin: int = 3
    workers: int = 1
    queue_capacity: int = 4
    normalize_mean: bool = False
    all_to_train: bool = True
    average_probabilities: bool = False
    seed: int = 1
    runs: int = 10
    deterministic: bool = True
    output: Path = Path('runs')
    pretrained: Path = None
    name: str = 'leafnet'
    sources: list = field(default_factory=list)

    @property
    def crop(self):
        return self.network.input_size

    @property
    def batch_size(self):
        return self.solver.batch_size

    @property
    def augmentations(self):
        return self.protocols[0].augmentations if self.protocols else 64

    def as_dict(self):
        """
        JSON-serializable view, the input of the digest.
        """
        return {
            'root': str(self.root), 'cache': str(self.cache) if self.cache else None, 'split': str(self.split),
            'threshold': self.threshold, 'canvas': self.canvas, 'margin': self.margin, 'workers': self.workers,
            'queue_capacity': self.queue_capacity, 'normalize_mean': self.normalize_mean,
            'all_to_train': self.all_to_train, 'policy': self.policy.kind.value,
            'network': asdict(self.network), 'solver': asdict(self.solver),
            'protocols': [p.name for p in self.protocols], 'augmentations': self.augmentations,
            'average_probabilities': self.average_probabilities, 'seed': self.seed, 'runs': self.runs,
            'deterministic': self.deterministic, 'output': str(self.output),
            'pretrained': str(self.pretrained) if self.pretrained else None, 'name': self.name,
            }

    def digest(self):
        """
        64-bit FNV-1a digest of the canonical configuration, as hex string.
        """
        return f"{fnv1a_64(json.dumps(self.as_dict(), sort_keys=True).encode('utf-8')):016x}"

class _Reader():
    """
    Typed access to the merged parser that reports failures by key path.
    """

    def __init__(self, parser: configparser.ConfigParser):
        self._parser = parser

    def _raw(self, section: str, key: str):
        return self._parser.get(section, key, fallback='').strip()

    def text(self, section: str, key: str):
        return self._raw(section, key)

    def path(self, section: str, key: str):
        value = self._raw(section, key)
        return Path(value).expanduser() if value else None

    def _convert(self, section: str, key: str, convert, kind: str):
        value = self._raw(section, key)
        try:
            return convert(value)
        except ValueError:
            raise ConfigurationError(f'{section}.{key}', f"expected {kind}, got '{value}'")

    def integer(self, section: str, key: str, minimum: int = None):
        value = self._convert(section, key, int, 'an integer')
        if minimum is not None and value < minimum:
            raise ConfigurationError(f'{section}.{key}', f"must be at least {minimum}, got {value}")
        return value

    def number(self, section: str, key: str):
        return self._convert(section, key, float, 'a number')

    def flag(self, section: str, key: str):
        try:
            return self._parser.getboolean(section, key)
        except ValueError:
            raise ConfigurationError(f'{section}.{key}', f"expected yes or no, got '{self._raw(section, key)}'")

    def integers(self, section: str, key: str):
        return self._convert(section, key, lambda v: [int(part) for part in v.split(',') if part.strip()],
                             'comma separated integers')

    def names(self, section: str, key: str):
        return [part.strip().lower() for part in self._raw(section, key).split(',') if part.strip()]

def _check_keys(file_parser: configparser.ConfigParser, defaults: configparser.ConfigParser, path: Path):
    for section in file_parser.sections():
        if not defaults.has_section(section):
            raise ConfigurationError(section, f"unknown section in {path}")
        for key in file_parser[section]:
            if key not in defaults[section] and (section, key) not in OPTIONAL_KEYS:
                raise ConfigurationError(f'{section}.{key}', f"unknown key in {path}")

def load_run_config(path: Path = None, overrides: dict = None, require_root: bool = True):
    """
    Resolves and validates an experiment configuration.

    Args:
        path (Path, optional): Experiment file. Defaults to None (package defaults only).
        overrides (dict, optional): 'SECTION.key' -> value, applied last.
        require_root (bool, optional): Fail if DATA.root is unset or missing. Defaults to True.

    Returns:
        RunConfig: The configuration.

    Raises:
        ConfigurationError: Naming the key path of the first invalid entry.
    """
    defaults = _read_defaults()
    parser = _read_defaults()
    sources = [str(DEFAULTS_PATH)]
    explicit = set()

    if path is not None:
        path = Path(path).expanduser()
        if not path.is_file():
            raise ConfigurationError('config', f"experiment file not found at {path}")
        file_parser = configparser.ConfigParser()
        try:
            file_parser.read(path)
        except configparser.Error as e:
            raise ConfigurationError('config', f"cannot parse {path}: {e}")
        _check_keys(file_parser, defaults, path)
        parser.read(path)
        sources.append(str(path))
        explicit |= {(s, k) for s in file_parser.sections() for k in file_parser[s]}

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition('.')
        section, key = section.upper(), key.lower()
        if not parser.has_section(section) or (key not in defaults[section] and (section, key) not in OPTIONAL_KEYS):
            raise ConfigurationError(dotted, "unknown key")
        if isinstance(value, bool):
            value = 'yes' if value else 'no'
        parser.set(section, key, str(value))
        explicit.add((section, key))

    if ('RUN', 'output') not in explicit and os.environ.get(OUTPUT_ENV):
        parser.set('RUN', 'output', os.environ[OUTPUT_ENV])

    read = _Reader(parser)

    root = read.path('DATA', 'root')
    if require_root:
        if root is None:
            raise ConfigurationError('DATA.root', "dataset directory is not set")
        if not root.is_dir():
            raise ConfigurationError('DATA.root', f"dataset directory not found at {root}")

    try:
        split = parse_split_spec(read.text('DATA', 'split'))
    except ValueError as e:
        raise ConfigurationError('DATA.split', str(e))

    try:
        policy = TransformPolicy.parse(read.text('AUGMENT', 'policy'))
    except ValueError as e:
        raise ConfigurationError('AUGMENT.policy', str(e))
    if policy.kind == PolicyKind.TF:
        raise ConfigurationError('AUGMENT.policy', "the fixed rotation series is an evaluation protocol only")

    crop = read.integer('AUGMENT', 'crop', minimum=1)
    canvas = read.integer('DATA', 'canvas', minimum=1)
    margin = read.integer('DATA', 'margin', minimum=0)
    if crop > canvas:
        raise ConfigurationError('AUGMENT.crop', f"window {crop} larger than canvas {canvas}")
    if 2 * margin >= canvas:
        raise ConfigurationError('DATA.margin', f"margin {margin} leaves no content on canvas {canvas}")
    input_size = read.integer('NETWORK', 'input_size', minimum=1) if parser.has_option('NETWORK', 'input_size') else crop
    if input_size != crop:
        raise ConfigurationError('NETWORK.input_size', f"must equal AUGMENT.crop ({crop}), got {input_size}")

    network = NetworkConfig(
        input_size=input_size,
        kernels=read.integers('NETWORK', 'kernels'),
        filters=read.integers('NETWORK', 'filters'),
        pool=read.integer('NETWORK', 'pool', minimum=1),
        pool_stride=read.integer('NETWORK', 'pool_stride', minimum=1),
        fc_width=read.integer('NETWORK', 'fc_width', minimum=1),
        dropout=read.number('NETWORK', 'dropout'),
        )
    try:
        network.shape_chain(num_classes=1)
    except ConfigurationError as e:
        key = e.key if e.key.startswith('NETWORK') else f'NETWORK.{e.key}'
        raise ConfigurationError(key, str(e).split(': ', 1)[-1])

    solver = SolverConfig(
        base_lr=read.number('SOLVER', 'base_lr'),
        lr_gamma=read.number('SOLVER', 'lr_gamma'),
        lr_step=read.integer('SOLVER', 'lr_step'),
        momentum=read.number('SOLVER', 'momentum'),
        weight_decay=read.number('SOLVER', 'weight_decay'),
        decay_biases=read.flag('SOLVER', 'decay_biases'),
        max_iter=read.integer('SOLVER', 'max_iter'),
        batch_size=read.integer('DATA', 'batch_size', minimum=1),
        monitor_every=read.integer('SOLVER', 'monitor_every'),
        monitor_samples=read.integer('SOLVER', 'monitor_samples'),
        monitor_smooth=read.integer('SOLVER', 'monitor_smooth'),
        snapshot_every=read.integer('SOLVER', 'snapshot_every'),
        )
    solver.validate()

    augmentations = read.integer('EVAL', 'augmentations', minimum=1)
    names = read.names('EVAL', 'protocols')
    if not names:
        raise ConfigurationError('EVAL.protocols', "at least one protocol is needed")
    try:
        protocols = [EvalProtocol.parse(name, augmentations) for name in names]
    except ValueError as e:
        raise ConfigurationError('EVAL.protocols', str(e))

    workers = read.integer('DATA', 'workers', minimum=0)
    deterministic = read.flag('RUN', 'deterministic')
    if deterministic and workers > 1:
        raise ConfigurationError('DATA.workers', f"deterministic runs use at most one producer thread, got {workers}")

    pretrained = read.path('RUN', 'pretrained')
    if pretrained is not None and not pretrained.is_file():
        raise ConfigurationError('RUN.pretrained', f"checkpoint not found at {pretrained}")

    output = read.path('RUN', 'output')
    if output is None:
        raise ConfigurationError('RUN.output', "output directory is not set")

    return RunConfig(
        root=root,
        split=split,
        network=network,
        solver=solver,
        policy=policy,
        protocols=protocols,
        cache=read.path('DATA', 'cache'),
        threshold=read.integer('DATA', 'threshold', minimum=1),
        canvas=canvas,
        margin=margin,
        workers=workers,
        queue_capacity=read.integer('DATA', 'queue_capacity', minimum=1),
        normalize_mean=read.flag('DATA', 'normalize_mean'),
        all_to_train=read.flag('DATA', 'all_to_train'),
        average_probabilities=read.flag('EVAL', 'average_probabilities'),
        seed=read.integer('RUN', 'seed'),
        runs=read.integer('RUN', 'runs', minimum=1),
        deterministic=deterministic,
        output=output,
        pretrained=pretrained,
        name=read.text('RUN', 'name') or 'leafnet',
        sources=sources,
        )
