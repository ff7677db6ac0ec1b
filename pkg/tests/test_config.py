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
from leafnet.augment import PolicyKind
from leafnet.config import OUTPUT_ENV, load_run_config
from leafnet.data import SplitKind
from leafnet.errors import ConfigurationError


def write_ini(path, sections: dict):
    lines = []
    for section, values in sections.items():
        lines.append(f'[{section}]')
        lines.extend(f'{key}={value}' for key, value in values.items())
        lines.append('')
    path.write_text('\n'.join(lines))
    return path

@pytest.fixture(autouse=True)
def no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)

@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / 'dataset'
    (root / 'a').mkdir(parents=True)
    return root

def test_package_defaults():
    config = load_run_config(require_root=False)
    assert config.root is None
    assert config.split.kind == SplitKind.COUNT_ALL and config.split.test == 10
    assert config.crop == 300 and config.canvas == 350 and config.margin == 3
    assert config.network.kernels == [5, 5, 3, 3]
    assert config.network.filters == [32, 64, 128, 256]
    assert config.network.fc_width == 500 and config.network.dropout == 0.5
    assert config.solver.base_lr == 0.001 and config.solver.momentum == 0.95
    assert config.solver.max_iter == 50000 and config.batch_size == 32
    assert config.policy.kind == PolicyKind.TR
    assert [p.name for p in config.protocols] == ['t0', 'tr', 'tf']
    assert config.augmentations == 64
    assert config.seed == 1 and config.runs == 10 and config.deterministic

def test_experiment_file_and_overrides(tmp_path, dataset):
    ini = write_ini(tmp_path / 'run.ini', {
        'DATA': {'ROOT': dataset, 'SPLIT': '10x40'},
        'SOLVER': {'MAX_ITER': 1000},
        'RUN': {'OUTPUT': tmp_path / 'out'},
        })
    config = load_run_config(ini, {'SOLVER.max_iter': 200, 'RUN.seed': 5, 'EVAL.protocols': 't0'})
    assert config.root == dataset
    assert str(config.split) == '10x40'
    assert config.solver.max_iter == 200
    assert config.seed == 5
    assert [p.name for p in config.protocols] == ['t0']
    assert config.sources[-1] == str(ini)

def test_digest(tmp_path, dataset):
    ini = write_ini(tmp_path / 'run.ini', {'DATA': {'ROOT': dataset}})
    assert load_run_config(ini).digest() == load_run_config(ini).digest()
    assert load_run_config(ini).digest() != load_run_config(ini, {'RUN.seed': 2}).digest()

def test_output_from_environment(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / 'env'))
    plain = write_ini(tmp_path / 'plain.ini', {'DATA': {'ROOT': dataset}})
    assert load_run_config(plain).output == tmp_path / 'env'

    pinned = write_ini(tmp_path / 'pinned.ini', {'DATA': {'ROOT': dataset}, 'RUN': {'OUTPUT': tmp_path / 'file'}})
    assert load_run_config(pinned).output == tmp_path / 'file'

@pytest.mark.parametrize('sections, key', [
    ({'DATA': {'COLOUR': 'green'}}, 'DATA.colour'),
    ({'PLOTS': {'STYLE': 'dark'}}, 'PLOTS'),
    ({'SOLVER': {'MAX_ITER': 'many'}}, 'SOLVER.max_iter'),
    ({'SOLVER': {'MOMENTUM': '1.5'}}, 'SOLVER.momentum'),
    ({'SOLVER': {'LR_STEP': '750'}}, 'SOLVER.lr_step'),
    ({'DATA': {'SPLIT': '7x'}}, 'DATA.split'),
    ({'DATA': {'WORKERS': '4'}}, 'DATA.workers'),
    ({'DATA': {'NORMALIZE_MEAN': 'maybe'}}, 'DATA.normalize_mean'),
    ({'AUGMENT': {'POLICY': 'tf'}}, 'AUGMENT.policy'),
    ({'AUGMENT': {'POLICY': 'sideways'}}, 'AUGMENT.policy'),
    ({'AUGMENT': {'CROP': '400'}}, 'AUGMENT.crop'),
    ({'NETWORK': {'INPUT_SIZE': '256'}}, 'NETWORK.input_size'),
    ({'AUGMENT': {'CROP': '20'}}, 'NETWORK.conv3'),
    ({'NETWORK': {'FILTERS': '32,64'}}, 'NETWORK.kernels'),
    ({'EVAL': {'PROTOCOLS': 't0,restricted'}}, 'EVAL.protocols'),
    ({'EVAL': {'AUGMENTATIONS': '0'}}, 'EVAL.augmentations'),
    ({'RUN': {'PRETRAINED': '/does/not/exist.ckpt'}}, 'RUN.pretrained'),
    ])
def test_invalid_entries_name_their_key(tmp_path, dataset, sections, key):
    sections = {'DATA': {}, **sections}
    sections['DATA'] = {'ROOT': dataset, **sections['DATA']}
    ini = write_ini(tmp_path / 'run.ini', sections)
    with pytest.raises(ConfigurationError) as info:
        load_run_config(ini)
    assert info.value.key == key

def test_dataset_root_is_checked(tmp_path):
    with pytest.raises(ConfigurationError) as info:
        load_run_config(write_ini(tmp_path / 'run.ini', {'RUN': {'SEED': 1}}))
    assert info.value.key == 'DATA.root'
    with pytest.raises(ConfigurationError) as info:
        load_run_config(write_ini(tmp_path / 'run.ini', {'DATA': {'ROOT': tmp_path / 'missing'}}))
    assert info.value.key == 'DATA.root'

def test_unknown_override(dataset):
    with pytest.raises(ConfigurationError) as info:
        load_run_config(overrides={'DATA.root': dataset, 'SOLVER.speed': 3})
    assert info.value.key == 'SOLVER.speed'

def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / 'absent.ini')

def test_nondeterministic_runs_allow_more_workers(tmp_path, dataset):
    ini = write_ini(tmp_path / 'run.ini', {'DATA': {'ROOT': dataset, 'WORKERS': 4}, 'RUN': {'DETERMINISTIC': 'no'}})
    assert load_run_config(ini).workers == 4
