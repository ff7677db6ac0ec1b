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
import logging
import numpy as np
import pandas as pd
import pytest
from leafnet import cli
from leafnet.config import OUTPUT_ENV
from leafnet.data import save_image
from leafnet.synthetic import make_synthetic_dataset
from tests.test_config import write_ini


@pytest.fixture(autouse=True)
def no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)

@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp('synthetic')
    make_synthetic_dataset(root, classes=3, per_class=6, size=40, seed=2)
    return root

def tiny_ini(path, dataset, output, **extra):
    sections = {
        'DATA': {'ROOT': dataset, 'SPLIT': '2x4', 'CANVAS': 24, 'MARGIN': 1, 'BATCH_SIZE': 4, 'WORKERS': 0},
        'AUGMENT': {'CROP': 20},
        'NETWORK': {'KERNELS': '3,3', 'FILTERS': '2,3', 'FC_WIDTH': 6},
        'SOLVER': {'BASE_LR': 0.01, 'MAX_ITER': 4, 'LR_STEP': 2, 'MONITOR_EVERY': 2, 'MONITOR_SAMPLES': 4},
        'EVAL': {'AUGMENTATIONS': 2},
        'RUN': {'OUTPUT': output, 'RUNS': 2, 'NAME': 'tiny'},
        }
    for dotted, value in extra.items():
        section, key = dotted.split('__')
        sections.setdefault(section, {})[key] = value
    return write_ini(path, sections)

def test_synthetic_dataset_command(tmp_path, capsys):
    assert cli.main(['synthetic-dataset', str(tmp_path / 'leaves'), '--classes', '3', '--per-class', '2', '--size', '32']) == 0
    assert sorted(p.name for p in (tmp_path / 'leaves').iterdir() if p.is_dir()) == ['00_ellipse', '01_lobed', '02_lanceolate']
    info = json.loads((tmp_path / 'leaves' / 'dataset.json').read_text())
    assert info['per_class'] == 2 and info['size'] == 32
    assert '3 classes, 6 images' in capsys.readouterr().out

def test_preprocess_command(dataset, tmp_path):
    assert cli.main(['preprocess', str(dataset), str(tmp_path / 'cache'), '--canvas', '32']) == 0
    manifest = json.loads((tmp_path / 'cache' / 'manifest.json').read_text())
    assert len(manifest['entries']) == 18
    assert manifest['params'] == {'threshold': 240, 'canvas': 32, 'margin': 3}

def test_preprocess_partial_failure(tmp_path):
    make_synthetic_dataset(tmp_path / 'raw', classes=2, per_class=2, size=32)
    save_image(np.full((32, 32, 3), 255, dtype=np.uint8), tmp_path / 'raw' / '00_ellipse' / 'blank.png')
    assert cli.main(['preprocess', str(tmp_path / 'raw'), str(tmp_path / 'cache')]) == cli.EXIT_PARTIAL

def test_invalid_config_writes_nothing(dataset, tmp_path, capsys):
    ini = tiny_ini(tmp_path / 'run.ini', dataset, tmp_path / 'out', SOLVER__MOMENTUM=2)
    assert cli.main(['train', '--config', str(ini)]) == cli.EXIT_VALIDATION
    assert not (tmp_path / 'out').exists()
    assert 'SOLVER.momentum' in capsys.readouterr().err

def test_split_error_is_a_validation_failure(dataset, tmp_path):
    ini = tiny_ini(tmp_path / 'run.ini', dataset, tmp_path / 'out', DATA__SPLIT='5x4')
    assert cli.main(['train', '--config', str(ini)]) == cli.EXIT_VALIDATION
    assert not (tmp_path / 'out').exists()

def test_train_and_eval(dataset, tmp_path):
    out = tmp_path / 'out'
    ini = tiny_ini(tmp_path / 'run.ini', dataset, out)
    assert cli.main(['train', '--config', str(ini)]) == 0
    for name in ('final.ckpt', 'split.json', 'manifest.json', 'curve.csv', 'state.json'):
        assert (out / name).exists()
    assert len(pd.read_csv(out / 'curve.csv')) == 2
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['seeds']['run'] == 1
    assert manifest['split'] == {'spec': '2x4', 'train': 12, 'test': 6}

    assert cli.main(['eval', str(out / 'final.ckpt'), '--config', str(ini), '--run-dir', str(out),
                     '--protocol', 't0', '--protocol', 'tf']) == 0
    report = json.loads((out / 'eval' / 'report.json').read_text())
    assert set(report['protocols']) == {'t0', 'tf'}
    assert all(len(p['records']) == 6 for p in report['protocols'].values())

def test_eval_missing_checkpoint_is_a_runtime_failure(dataset, tmp_path):
    ini = tiny_ini(tmp_path / 'run.ini', dataset, tmp_path / 'out')
    assert cli.main(['eval', str(tmp_path / 'none.ckpt'), '--config', str(ini)]) == cli.EXIT_RUNTIME

def test_experiment_and_report(dataset, tmp_path):
    out = tmp_path / 'out'
    ini = tiny_ini(tmp_path / 'run.ini', dataset, out)
    assert cli.main(['experiment', '--config', str(ini)]) == 0

    summary = json.loads((out / 'experiment.json').read_text())
    assert summary['status'] == 'ok'
    assert [run['seed'] for run in summary['runs']] == [1, 2]
    for run in ('run_00_seed_1', 'run_01_seed_2'):
        assert (out / run / 'eval' / 'report.json').exists()
    table = pd.read_csv(out / 'aggregate.csv')
    assert table['protocol'].tolist() == ['t0', 'tr', 'tf']
    assert (out / 'confusion_merged.png').exists()

    (out / 'aggregate.csv').unlink()
    assert cli.main(['report', str(out)]) == 0
    assert pd.read_csv(out / 'aggregate.csv')['mean'].tolist() == pytest.approx(table['mean'].tolist())

def test_ablation(dataset, tmp_path):
    out = tmp_path / 'out'
    ini = tiny_ini(tmp_path / 'run.ini', dataset, out)
    assert cli.main(['experiment', '--config', str(ini), '--ablation']) == 0
    curves = pd.read_csv(out / 'ablation' / 'curves.csv')
    assert sorted(curves['variant'].unique()) == ['full', 'no_augmentation', 'no_dropout', 'no_pretraining', 'restricted']
    assert (curves.groupby('variant').size() == 2).all()

def test_deterministic_reruns_are_bit_identical(dataset, tmp_path):
    for name in ('a', 'b'):
        ini = tiny_ini(tmp_path / f'{name}.ini', dataset, tmp_path / name)
        assert cli.main(['train', '--config', str(ini)]) == 0
        assert cli.main(['eval', str(tmp_path / name / 'final.ckpt'), '--config', str(ini),
                         '--run-dir', str(tmp_path / name)]) == 0

    assert (tmp_path / 'a' / 'final.ckpt').read_bytes() == (tmp_path / 'b' / 'final.ckpt').read_bytes()
    assert (tmp_path / 'a' / 'eval' / 'report.json').read_text() == (tmp_path / 'b' / 'eval' / 'report.json').read_text()
    assert (tmp_path / 'a' / 'curve.csv').read_text() == (tmp_path / 'b' / 'curve.csv').read_text()

def test_log_level_applies_on_every_call(tmp_path):
    logger = logging.getLogger('leafnet')
    for level, expected in (('debug', logging.DEBUG), ('error', logging.ERROR)):
        out = tmp_path / level
        assert cli.main(['--log-level', level, 'synthetic-dataset', str(out), '--classes', '1', '--per-class', '1', '--size', '16']) == 0
        assert [h.level for h in logger.handlers if not isinstance(h, logging.FileHandler)] == [expected]
