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
Training: learning-rate schedule, Nesterov update, the training loop with
its periodic test-set monitor, and repeated runs.
"""

import json
from dataclasses import dataclass, field, asdict, replace
from decimal import Decimal
from pathlib import Path
import numpy as np
import pandas as pd
from leafnet.checkpoint import save_checkpoint
from leafnet.data import ImageStore
from leafnet.evaluation import Evaluator
from leafnet.network import Network
from leafnet.errors import ConfigurationError, DimensionError, ParameterError, TrainingAborted
from leafnet.utils import make_rng, resolve_logger


MONITOR_STREAM = 2
DROPOUT_STREAM = 3
CURVE_COLUMNS = ['iteration', 'lr', 'loss', 'accuracy', 'smoothed']


@dataclass
class SolverConfig:
    """
    Solver settings.

    Attributes:
        base_lr (float): Initial learning rate.
        lr_gamma (float): Factor applied every lr_step iterations.
        lr_step (int): Iterations per learning-rate phase.
        momentum (float): Nesterov momentum in [0, 1).
        weight_decay (float): L2 factor added to every gradient.
        decay_biases (bool): Apply weight decay to biases too.
        max_iter (int): Number of iterations.
        batch_size (int): Images per batch.
        monitor_every (int): Iterations between monitor points.
        monitor_samples (int): Test images per monitor point.
        monitor_smooth (int): Trailing points of the smoothed accuracy.
        snapshot_every (int): Iterations between checkpoints, 0 means lr_step.
    """
    base_lr: float = 0.001
    lr_gamma: float = 0.1
    lr_step: int = 20000
    momentum: float = 0.95
    weight_decay: float = 0.0005
    decay_biases: bool = True
    max_iter: int = 50000
    batch_size: int = 32
    monitor_every: int = 500
    monitor_samples: int = 3200
    monitor_smooth: int = 5
    snapshot_every: int = 0

    def validate(self):
        """
        Checks every field.

        Raises:
            ConfigurationError: Naming the first invalid key.
        """
        checks = [
            ('base_lr', self.base_lr > 0, "must be positive"),
            ('lr_gamma', self.lr_gamma > 0, "must be positive"),
            ('lr_step', self.lr_step > 0, "must be positive"),
            ('momentum', 0 <= self.momentum < 1, "must lie in [0, 1)"),
            ('weight_decay', self.weight_decay >= 0, "must not be negative"),
            ('max_iter', self.max_iter > 0, "must be positive"),
            ('batch_size', self.batch_size > 0, "must be positive"),
            ('monitor_every', self.monitor_every > 0, "must be positive"),
            ('monitor_samples', self.monitor_samples > 0, "must be positive"),
            ('monitor_smooth', self.monitor_smooth > 0, "must be positive"),
            ('snapshot_every', self.snapshot_every >= 0, "must not be negative"),
            ]
        for key, valid, reason in checks:
            if not valid:
                raise ConfigurationError(f'SOLVER.{key}', f"{reason}, got {getattr(self, key)}")
        if self.lr_step % self.monitor_every != 0:
            raise ConfigurationError('SOLVER.lr_step', f"must be a multiple of monitor_every ({self.monitor_every})")
        return self

    def pretraining(self):
        """
        The preset for pretraining runs on a large dataset.
        """
        return replace(self, max_iter=100000)

    @property
    def snapshot_interval(self):
        return self.snapshot_every or self.lr_step

def learning_rate(iteration: int, config: SolverConfig):
    """
    Step schedule base_lr * gamma ^ floor(iteration / lr_step).

    Computed in decimal on the written values, so 0.001 * 0.1 is exactly 0.0001.

    Args:
        iteration (int): The iteration, starting at 0.
        config (SolverConfig): The schedule.

    Returns:
        float: The learning rate.
    """
    if iteration < 0:
        raise ParameterError(f"Iteration must not be negative, got {iteration}")
    phase = iteration // config.lr_step
    return float(Decimal(repr(config.base_lr)) * Decimal(repr(config.lr_gamma)) ** phase)

def nesterov_step(param, grad, velocity, lr: float, momentum: float, weight_decay: float, name: str = None,
                  iteration: int = -1):
    """
    One momentum-corrected Nesterov update, in place.

        g = grad + weight_decay * param
        v_new = momentum * v - lr * g
        param += (1 + momentum) * v_new - momentum * v
        v = v_new

    Args:
        param (numpy.ndarray): The parameter, updated in place.
        grad (numpy.ndarray): Its gradient.
        velocity (numpy.ndarray): Its velocity, updated in place.
        lr (float): Learning rate.
        momentum (float): Momentum.
        weight_decay (float): L2 factor.
        name (str, optional): Parameter name for diagnostics.
        iteration (int, optional): Iteration for diagnostics.

    Raises:
        DimensionError: If the shapes differ.
        TrainingAborted: If the gradient contains NaN or infinity.
    """
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise DimensionError(f"Shape mismatch in {name}: {param.shape}, {grad.shape}, {velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingAborted(iteration, "non-finite gradient", layer=name)

    g = grad + weight_decay * param if weight_decay else grad
    previous = velocity.copy()
    velocity *= momentum
    velocity -= lr * g
    param += (1 + momentum) * velocity - momentum * previous

@dataclass
class TrainState:
    """
    Progress of a training run.

    Attributes:
        seed (int): Seed of the dropout and monitor streams.
        iteration (int): Completed iterations.
        curve (list): Monitor points, dicts with CURVE_COLUMNS keys.
        losses (list): Batch losses since the last monitor point.
        streams (dict): Bit generator states of the training streams.
    """
    seed: int = 0
    iteration: int = 0
    curve: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    streams: dict = field(default_factory=dict)

    def record(self, lr: float, accuracy: float, smooth: int):
        """
        Appends a monitor point, the smoothed accuracy is the mean of the
        trailing smooth raw points.
        """
        raw = [point['accuracy'] for point in self.curve] + [accuracy]
        point = {
            'iteration': self.iteration,
            'lr': lr,
            'loss': float(np.mean(self.losses)) if self.losses else float('nan'),
            'accuracy': accuracy,
            'smoothed': float(np.mean(raw[-smooth:])),
            }
        self.curve.append(point)
        self.losses = []
        return point

    def curve_frame(self):
        return pd.DataFrame(self.curve, columns=CURVE_COLUMNS)

    def velocities(self, network: Network):
        """
        The velocity tensors, by parameter name.
        """
        return {p.name: p.velocity for p in network.parameters()}

    def as_dict(self):
        return asdict(self)

    def write(self, path: Path):
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))

class TrainingSinks():
    """
    Where a training run writes its artifacts.

    Layout: <out_dir>/checkpoints/iter_<n>.ckpt, <out_dir>/final.ckpt,
    <out_dir>/curve.csv and <out_dir>/state.json.
    """

    def __init__(self, out_dir: Path, meta: dict = None):
        self.out_dir = Path(out_dir)
        self.meta = dict(meta or {})
        self.checkpoints = []

    def checkpoint(self, network: Network, state: TrainState, final: bool = False):
        path = self.out_dir / 'final.ckpt' if final else self.out_dir / 'checkpoints' / f'iter_{state.iteration:06d}.ckpt'
        save_checkpoint(network, {**self.meta, 'iteration': state.iteration, 'seed': state.seed}, path)
        self.checkpoints.append(path)
        return path

    def progress(self, state: TrainState):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        state.curve_frame().to_csv(self.out_dir / 'curve.csv', index=False)
        state.write(self.out_dir / 'state.json')

class Trainer():
    """
    Runs the training loop of one network.

    Attributes:
        _network (Network): The network, initialized or transferred.
        _config (SolverConfig): The solver settings.
        _seed (int): Seed of the dropout and monitor streams.
        _logger (logging.Logger): The logger.
    """

    def __init__(self, network: Network, config: SolverConfig, seed: int = 0, logger=None):
        self._logger = resolve_logger(logger, 'Trainer')

        self._network = network
        self._config = config.validate()
        self._seed = seed

    def _decay(self, param):
        if param.is_bias and not self._config.decay_biases:
            return 0.0
        return self._config.weight_decay

    def step(self, batch, lr: float, rng, iteration: int):
        """
        Forward, backward and update on one batch.

        Returns:
            float: The batch loss.

        Raises:
            TrainingAborted: On a non-finite loss or gradient.
        """
        self._network.forward(batch.images, mode='train', rng=rng)
        loss = self._network.backward(batch.labels)
        if not np.isfinite(loss):
            raise TrainingAborted(iteration, f"non-finite loss {loss}")

        for param in self._network.parameters():
            nesterov_step(param.value, param.grad, param.velocity, lr, self._config.momentum, self._decay(param),
                          name=param.name, iteration=iteration)
        return loss

    def train(self, batches, test_split=None, store: ImageStore = None, sinks: TrainingSinks = None, mean=None):
        """
        Trains for exactly max_iter iterations.

        Every monitor_every iterations monitor_samples TR-augmented test
        images are classified single-shot. Dropout and monitor draw from
        their own streams, so the training trajectory does not depend on
        monitoring.

        Args:
            batches (iterator): Yields Batch objects.
            test_split (Split, optional): Split whose test set feeds the monitor.
            store (ImageStore, optional): Image source of the monitor.
            sinks (TrainingSinks, optional): Artifact writer, nothing is written without.
            mean (numpy.ndarray, optional): Channel mean of the normalization.

        Returns:
            TrainState: The final state with the monitor curve.

        Raises:
            TrainingAborted: On stream exhaustion or non-finite values.
        """
        config = self._config
        state = TrainState(seed=self._seed)
        dropout_rng = make_rng(self._seed, DROPOUT_STREAM)
        monitor_rng = make_rng(self._seed, MONITOR_STREAM)
        evaluator = None
        if test_split is not None and store is not None and test_split.test:
            evaluator = Evaluator(self._network, mean=mean, logger=self._logger.getChild('monitor'))

        self._logger.info(f"Training for {config.max_iter} iterations ...")

        batches = iter(batches)
        for iteration in range(config.max_iter):
            lr = learning_rate(iteration, config)
            try:
                batch = next(batches)
            except StopIteration:
                self._logger.error(f"Batch stream exhausted at iteration {iteration}")
                raise TrainingAborted(iteration, "batch stream exhausted")

            try:
                state.losses.append(self.step(batch, lr, dropout_rng, iteration))
            except TrainingAborted as e:
                self._logger.error(str(e))
                raise
            state.iteration = iteration + 1

            if state.iteration % config.monitor_every == 0:
                accuracy = evaluator.monitor(test_split.test, store, config.monitor_samples, monitor_rng) if evaluator else float('nan')
                point = state.record(lr, accuracy, config.monitor_smooth)
                self._logger.info(f"Iteration {state.iteration}: loss {point['loss']:.4f}, "
                                  f"accuracy {accuracy:.4f}, smoothed {point['smoothed']:.4f}")
                if sinks:
                    sinks.progress(state)

            if sinks and state.iteration % config.snapshot_interval == 0 and state.iteration < config.max_iter:
                sinks.checkpoint(self._network, state)

        state.streams = {'dropout': dropout_rng.bit_generator.state, 'monitor': monitor_rng.bit_generator.state}
        if sinks:
            sinks.checkpoint(self._network, state, final=True)
            sinks.progress(state)

        self._logger.info("Training done")

        return state

def train(network: Network, batch_stream, test_split, config: SolverConfig, sinks: TrainingSinks = None,
          store: ImageStore = None, seed: int = 0, mean=None, logger=None):
    """
    Trains a network, see Trainer.train.
    """
    trainer = Trainer(network, config, seed=seed, logger=logger or network.logger)
    return trainer.train(batch_stream, test_split, store, sinks, mean)

def multi_run(run, n_runs: int = 10, base_seed: int = 1, logger=None):
    """
    Executes repeated runs with seeds base_seed + i.

    A failing run is recorded and the remaining runs proceed.

    Args:
        run (callable): run(seed, index) returning a dict of per-protocol accuracies
            (and optionally further entries).
        n_runs (int, optional): Number of runs. Defaults to 10.
        base_seed (int, optional): Seed of the first run. Defaults to 1.
        logger (logging.Logger, optional): The logger. Defaults to None.

    Returns:
        list: One dict per run with keys 'run', 'seed', 'status' and either
        'result' or 'error'.
    """
    logger = resolve_logger(logger, 'multi_run')
    if n_runs < 1:
        raise ParameterError(f"Need at least one run, got {n_runs}")

    outcomes = []
    for index in range(n_runs):
        seed = base_seed + index
        logger.info(f"Run {index + 1}/{n_runs} with seed {seed} ...")
        try:
            result = run(seed, index)
        except Exception as e:
            logger.error(f"Run {index + 1} failed: {e}")
            outcomes.append({'run': index, 'seed': seed, 'status': 'failed', 'error': str(e)})
            continue
        outcomes.append({'run': index, 'seed': seed, 'status': 'ok', 'result': result})
        logger.info(f"Run {index + 1} done")

    return outcomes
