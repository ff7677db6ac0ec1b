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
Online batch generation.

Worker threads sample batches from the training set, transform every image
and put finished batches into a bounded queue that the training loop reads.
"""

import time
from dataclasses import dataclass
from queue import Queue, Empty, Full
import numpy as np
from leafnet.augment import PolicyKind, TransformPolicy, apply_transform, sample_params
from leafnet.data import Split, ImageStore, normalize, sample_batch
from leafnet.errors import ParameterError, StateError
from leafnet.utils import CustomThread, make_rng, resolve_logger


# random streams below this id belong to the batch producer, stream ids are (PRODUCER_STREAM, worker index)
PRODUCER_STREAM = 1


@dataclass
class Batch:
    """
    A training batch.

    Attributes:
        images (numpy.ndarray): Float32 tensor (N, 3, S, S).
        labels (numpy.ndarray): Class indices (N,).
        items (list): The sampled (class index, ref) pairs.
        params (list): The TransformParams applied per image.
        worker (int): The worker that produced the batch.
    """
    images: np.ndarray
    labels: np.ndarray
    items: list
    params: list
    worker: int = 0

class _WorkerFailure():
    """
    Queue entry that carries the exception of a dead worker.
    """

    def __init__(self, worker: int, error: BaseException):
        self.worker = worker
        self.error = error

def build_batch(items, store: ImageStore, policy: TransformPolicy, rng, size: int, mean=None, worker: int = 0):
    """
    Transforms and normalizes the images of sampled items.

    Args:
        items (list): (class index, ref) pairs.
        store (ImageStore): Source of preprocessed images.
        policy (TransformPolicy): The augmentation policy, TF is not allowed.
        rng (numpy.random.Generator): Random source of the transformations.
        size (int): Window edge length.
        mean (numpy.ndarray, optional): Channel mean to subtract.
        worker (int, optional): Worker id recorded in the batch.

    Returns:
        Batch: The batch.
    """
    if policy.kind == PolicyKind.TF:
        raise ParameterError("The fixed rotation series is an evaluation protocol, not a training policy")

    images, params = [], []
    for _, ref in items:
        img = store.get(ref)
        p = sample_params(policy, rng, canvas=img.shape[0], size=size)
        images.append(apply_transform(img, p, size))
        params.append(p)

    labels = np.array([c for c, _ in items], dtype=np.int64)
    return Batch(images=normalize(images, mean), labels=labels, items=list(items), params=params, worker=worker)

class BatchProducer():
    """
    Produces an endless stream of freshly augmented batches.

    With workers >= 1 every worker runs in its own thread with its own random
    stream (seed, 1, worker index) and feeds one bounded queue. With
    workers == 0 batches are built synchronously in the consumer thread from
    the stream of worker 0, which reproduces the exact single-worker sequence.

    Attributes:
        _split (Split): The partition, only the training set is sampled.
        _store (ImageStore): Source of preprocessed images.
        _policy (TransformPolicy): The augmentation policy.
        _batch_size (int): Images per batch.
        _size (int): Window edge length.
        _workers (int): Number of worker threads.
        _seed (int): Base seed.
        _mean (numpy.ndarray): Optional channel mean.
        _queue (Queue): Bounded queue of finished batches.
        _threads (dict): Worker threads and their run flag.
        _logger (logging.Logger): The logger.
    """

    def __init__(self, split: Split, store: ImageStore, policy: TransformPolicy = None, batch_size: int = 32,
                 size: int = 300, workers: int = 1, queue_capacity: int = 4, seed: int = 0, mean=None, logger=None):
        """
        Initializes the producer without starting it.

        Args:
            split (Split): The partition.
            store (ImageStore): Source of preprocessed images.
            policy (TransformPolicy, optional): Augmentation policy. Defaults to TR.
            batch_size (int, optional): Images per batch. Defaults to 32.
            size (int, optional): Window edge length. Defaults to 300.
            workers (int, optional): Worker threads, 0 for synchronous production. Defaults to 1.
            queue_capacity (int, optional): Maximum queued batches. Defaults to 4.
            seed (int, optional): Base seed. Defaults to 0.
            mean (numpy.ndarray, optional): Channel mean to subtract. Defaults to None.
            logger (logging.Logger, optional): The logger. Defaults to None.

        Raises:
            ParameterError: If sizes or counts are invalid.
            ValueError: If the logger argument is not an instance of logging.Logger.
        """
        self._logger = resolve_logger(logger, 'BatchProducer')

        if batch_size < 1:
            raise ParameterError(f"Batch size must be positive, got {batch_size}")
        if workers < 0:
            raise ParameterError(f"Worker count must not be negative, got {workers}")
        if queue_capacity < 1:
            raise ParameterError(f"Queue capacity must be positive, got {queue_capacity}")

        self._split = split
        self._store = store
        self._policy = policy or TransformPolicy(PolicyKind.TR)
        self._batch_size = batch_size
        self._size = size
        self._workers = workers
        self._seed = seed
        self._mean = mean
        self._queue = Queue(maxsize=queue_capacity)
        self._threads = {}
        self._sync_rng = None
        self._status = 'inactive'

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def __iter__(self):
        return self

    def __next__(self):
        return self.next_batch()

    def start(self):
        """
        Starts the worker threads.

        Returns:
            bool: True if the producer was started, False if it was already running.
        """
        if self._status == 'active':
            self._logger.warning("BatchProducer already started")
            return False

        self._logger.info("Starting BatchProducer ...")

        if self._workers == 0:
            self._sync_rng = make_rng(self._seed, PRODUCER_STREAM, 0)
        else:
            for index in range(self._workers):
                thread_data = {'run': True}
                thread_data['thread'] = CustomThread(target=self._work, args=(index, thread_data), daemon=True, name=f'BatchWorker-{index}')
                self._threads[index] = thread_data
                thread_data['thread'].start()

        self._status = 'active'
        self._logger.info(f"BatchProducer started with {self._workers} workers")
        return True

    def _make(self, rng, worker: int):
        items = sample_batch(self._split, self._batch_size, rng)
        return build_batch(items, self._store, self._policy, rng, self._size, self._mean, worker)

    def _work(self, index: int, thread_data: dict):
        """
        Worker loop: builds batches until stopped.

        Args:
            index (int): The worker index, also its random stream id.
            thread_data (dict): Holds the 'run' flag.
        """
        rng = make_rng(self._seed, PRODUCER_STREAM, index)

        while thread_data['run']:
            try:
                batch = self._make(rng, index)
            except Exception as e:
                self._logger.error(f"Worker {index} failed: {e}")
                self._put(_WorkerFailure(index, e), thread_data)
                return

            self._put(batch, thread_data)

        self._logger.info(f"Worker {index} stopped")

    def _put(self, item, thread_data: dict):
        # retries so that a stopped producer does not leave workers blocked on a full queue
        while thread_data['run']:
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except Full:
                continue
        return False

    def next_batch(self, timeout: float = None):
        """
        Returns the next finished batch.

        Args:
            timeout (float, optional): Seconds to wait, None waits forever.

        Returns:
            Batch: The batch.

        Raises:
            StateError: If the producer is not running or no batch arrived in time.
            Exception: The error of a failed worker, which also stops the producer.
        """
        if self._status != 'active':
            raise StateError("BatchProducer is not running")

        if self._workers == 0:
            return self._make(self._sync_rng, 0)

        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            try:
                item = self._queue.get(timeout=0.1)
                break
            except Empty:
                if not any(data['thread'].is_alive() for data in self._threads.values()):
                    self.stop()
                    raise StateError("All batch workers died")
                if deadline is not None and time.monotonic() > deadline:
                    raise StateError("No batch arrived in time")

        if isinstance(item, _WorkerFailure):
            self.stop()
            raise item.error

        return item

    def stop(self):
        """
        Stops all workers and discards queued batches.

        Returns:
            bool: True when all workers have ended.
        """
        if self._status != 'active':
            return True

        self._logger.info("Stopping BatchProducer ...")

        for data in self._threads.values():
            data['run'] = False

        # drain so that blocked workers can finish
        while True:
            try:
                self._queue.get_nowait()
            except Empty:
                break

        for data in self._threads.values():
            data['thread'].join()

        self._threads = {}
        self._status = 'inactive'
        self._logger.info("BatchProducer stopped")
        return True

    def get_status(self):
        return self._status

    def get_workers(self):
        return self._workers

    def set_workers(self, workers):
        raise ValueError("Error: Workers cannot be changed")

    workers = property(get_workers, set_workers, doc='Get/set the number of workers')
