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
Binary checkpoint container.

Layout, all integers little-endian:

    header   magic b'LFNT' | version u16 | config digest u64 | tensor count u32
    tensor   name length u16 | name utf-8 | dtype tag u8 | rank u8 | dims u32 * rank | payload
    trailer  metadata length u32 | metadata JSON utf-8

Payloads are little-endian float32.
"""

import os
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from leafnet.network import Network, CLASSIFIER
from leafnet.errors import CheckpointError, VersionError, DigestError, TruncationError, TransferError


MAGIC = b'LFNT'
VERSION = 1
DTYPE_TAGS = {1: np.dtype('<f4')}
FLOAT_TAG = 1

_HEADER = struct.Struct('<4sHQI')


@dataclass
class Checkpoint:
    """
    A loaded checkpoint.

    Attributes:
        version (int): Format version.
        digest (int): Digest of the network configuration and class count.
        tensors (dict): Arrays by tensor name in file order.
        meta (dict): Training metadata (iteration, seed, dataset, ...).
    """
    version: int
    digest: int
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self):
        """
        Serializes the checkpoint.
        """
        parts = [_HEADER.pack(MAGIC, self.version, self.digest, len(self.tensors))]
        for name, tensor in self.tensors.items():
            encoded = name.encode('utf-8')
            parts.append(struct.pack('<H', len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack('<BB', FLOAT_TAG, tensor.ndim))
            parts.append(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
            parts.append(np.ascontiguousarray(tensor, dtype=DTYPE_TAGS[FLOAT_TAG]).tobytes())

        meta = json.dumps(self.meta, sort_keys=True, separators=(',', ':')).encode('utf-8')
        parts.append(struct.pack('<I', len(meta)))
        parts.append(meta)
        return b''.join(parts)

    @classmethod
    def from_bytes(cls, data: bytes):
        """
        Parses a serialized checkpoint.

        Raises:
            CheckpointError: If the magic bytes are wrong.
            VersionError: If the version is not supported.
            TruncationError: If the data ends early or carries trailing bytes.
        """
        reader = _Reader(data)
        magic, version, digest, count = reader.unpack(_HEADER)
        if magic != MAGIC:
            raise CheckpointError("Not a leafnet checkpoint")
        if version != VERSION:
            raise VersionError(f"Unsupported checkpoint version {version}, expected {VERSION}")

        tensors = {}
        for _ in range(count):
            (length,) = reader.unpack(struct.Struct('<H'))
            name = reader.take(length).decode('utf-8')
            tag, rank = reader.unpack(struct.Struct('<BB'))
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"Tensor {name}: unknown dtype tag {tag}")
            dims = reader.unpack(struct.Struct(f'<{rank}I'))
            dtype = DTYPE_TAGS[tag]
            payload = reader.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)

        (length,) = reader.unpack(struct.Struct('<I'))
        meta = json.loads(reader.take(length).decode('utf-8'))
        if not reader.exhausted:
            raise TruncationError(f"{reader.remaining} unexpected bytes after the metadata")

        return cls(version=version, digest=digest, tensors=tensors, meta=meta)

class _Reader():
    """
    Sequential reader that turns short reads into TruncationError.
    """

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, size: int):
        if self._pos + size > len(self._data):
            raise TruncationError(f"Checkpoint ends at byte {len(self._data)}, needed {self._pos + size}")
        chunk = self._data[self._pos:self._pos + size]
        self._pos += size
        return chunk

    def unpack(self, layout: struct.Struct):
        return layout.unpack(self.take(layout.size))

    @property
    def remaining(self):
        return len(self._data) - self._pos

    @property
    def exhausted(self):
        return self._pos == len(self._data)

def save_checkpoint(network: Network, meta: dict, path: Path):
    """
    Writes the parameters of a network.

    The file is written next to the target and moved into place, a crash
    never leaves a half-written checkpoint under the final name.

    Args:
        network (Network): The network, parameters must exist.
        meta (dict): JSON-serializable training metadata.
        path (Path): Target file.

    Returns:
        Checkpoint: The saved checkpoint.
    """
    tensors = network.tensors()
    if not tensors:
        raise CheckpointError("Network has no parameters to save")

    checkpoint = Checkpoint(version=VERSION, digest=network.digest(), tensors=dict(tensors), meta=dict(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(path.name + '.tmp')
    temp.write_bytes(checkpoint.to_bytes())
    os.replace(temp, path)
    return checkpoint

def load_checkpoint(path: Path):
    """
    Reads a checkpoint file.

    Args:
        path (Path): The file.

    Returns:
        Checkpoint: The parsed checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist.
        VersionError: If the version is not supported.
        TruncationError: If the file is truncated.
    """
    return Checkpoint.from_bytes(Path(path).read_bytes())

def restore(network: Network, checkpoint: Checkpoint, strict: bool = True):
    """
    Restores every tensor of a checkpoint into a network.

    Nothing is changed if any check fails.

    Args:
        network (Network): The target network.
        checkpoint (Checkpoint): The source.
        strict (bool, optional): Verify the configuration digest. Defaults to True.

    Raises:
        DigestError: If strict and the digest differs.
        TransferError: If a tensor is missing or has another shape.
    """
    if strict and checkpoint.digest != network.digest():
        raise DigestError(f"Checkpoint digest {checkpoint.digest:016x} does not match the network {network.digest():016x}")

    shapes = network.shapes()
    for name, shape in shapes.items():
        if name not in checkpoint.tensors:
            raise TransferError(name, "missing in checkpoint")
        if tuple(checkpoint.tensors[name].shape) != shape:
            raise TransferError(name, f"expected shape {shape}, checkpoint has {tuple(checkpoint.tensors[name].shape)}")

    network.set_tensors(checkpoint.tensors)

def transfer_load(checkpoint: Checkpoint, network: Network, seed: int):
    """
    Initializes a network from a checkpoint of another task.

    Every tensor except the classifier is copied exactly, the classifier is
    drawn fresh from the seed whatever its width in the checkpoint.

    Args:
        checkpoint (Checkpoint): The pretrained weights.
        network (Network): The target network.
        seed (int): Seed of the classifier initialization.

    Returns:
        dict: {'restored': [...], 'reinitialized': [...]} tensor names.

    Raises:
        TransferError: If a non-classifier tensor is missing or has another shape.
    """
    shapes = network.shapes()
    restored = [name for name in shapes if not name.startswith(CLASSIFIER + '.')]
    for name in restored:
        if name not in checkpoint.tensors:
            raise TransferError(name, "missing in checkpoint")
        if tuple(checkpoint.tensors[name].shape) != shapes[name]:
            raise TransferError(name, f"expected shape {shapes[name]}, checkpoint has {tuple(checkpoint.tensors[name].shape)}")

    # the classifier needs placeholders of the target width before set_tensors
    tensors = {name: checkpoint.tensors[name] for name in restored}
    for name, shape in shapes.items():
        if name not in tensors:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    network.set_tensors(tensors)
    reinitialized = network.init_classifier(seed)

    return {'restored': restored, 'reinitialized': reinitialized}
