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
Dataset indexing, preprocessing, train/test splitting and batch sampling.
"""

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from threading import Lock
from typing import NamedTuple
import numpy as np
from PIL import Image
from leafnet.augment import resize_bilinear
from leafnet.errors import CapacityError, NoForegroundError, ParameterError, SplitParseError, StateError
from leafnet.utils import make_rng, resolve_logger, sha256_file


IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff', '.gif', '.ppm', '.pgm'}
MANIFEST_NAME = 'manifest.json'


class BoundingBox(NamedTuple):
    """
    A rectangle in pixel coordinates.

    Attributes:
        x (int): Left column.
        y (int): Top row.
        width (int): Number of columns.
        height (int): Number of rows.
    """
    x: int
    y: int
    width: int
    height: int

def load_image(path: Path):
    """
    Reads a raster file as an RGB uint8 array.

    Args:
        path (Path): The file.

    Returns:
        numpy.ndarray: Array of shape (H, W, 3).
    """
    with Image.open(path) as image:
        return np.asarray(image.convert('RGB'), dtype=np.uint8).copy()

def save_image(img, path: Path):
    """
    Writes an RGB uint8 array as a lossless PNG.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path, format='PNG')

def compute_bounding_box(img, background_threshold: int = 240):
    """
    Tightest rectangle around all foreground pixels.

    A pixel is foreground if any of its channels is below the threshold.

    Args:
        img (numpy.ndarray): The image.
        background_threshold (int, optional): The threshold. Defaults to 240.

    Returns:
        BoundingBox: The rectangle.

    Raises:
        NoForegroundError: If the image has no foreground pixel.
    """
    foreground = (img < background_threshold).any(axis=2)
    rows = np.flatnonzero(foreground.any(axis=1))
    cols = np.flatnonzero(foreground.any(axis=0))
    if rows.size == 0:
        raise NoForegroundError("Image contains no foreground pixel")

    return BoundingBox(x=int(cols[0]), y=int(rows[0]), width=int(cols[-1] - cols[0] + 1), height=int(rows[-1] - rows[0] + 1))

def preprocess_image(raw, background_threshold: int = 240, canvas: int = 350, margin: int = 3):
    """
    Crops the leaf to its bounding box, resizes it and adds a white margin.

    The content is resized to (canvas - 2*margin) square without keeping the
    aspect ratio, e.g. 344 x 344 plus 3 white pixels per side gives 350 x 350.

    Args:
        raw (numpy.ndarray): The photograph.
        background_threshold (int, optional): Foreground threshold. Defaults to 240.
        canvas (int, optional): Output edge length. Defaults to 350.
        margin (int, optional): White margin per side. Defaults to 3.

    Returns:
        numpy.ndarray: The canvas x canvas x 3 image.

    Raises:
        NoForegroundError: If the image has no foreground pixel.
        ParameterError: If the margin leaves no room for content.
    """
    inner = canvas - 2 * margin
    if inner < 1:
        raise ParameterError(f"Margin {margin} leaves no content on a {canvas} canvas")

    box = compute_bounding_box(raw, background_threshold)
    content = raw[box.y:box.y + box.height, box.x:box.x + box.width]
    content = resize_bilinear(content, inner, inner)

    out = np.full((canvas, canvas, 3), 255, dtype=np.uint8)
    out[margin:margin + inner, margin:margin + inner] = content
    return out

class DatasetIndex():
    """
    The classes and image files of a dataset.

    Attributes:
        name (str): The dataset name.
        root (Path): The dataset directory, refs are relative to it.
        classes (list): Ordered class names, the position is the class index.
        images (dict): Maps class name to the list of image refs.
        fixed (dict): Optional prescribed assignment {'train': {class: refs}, 'test': {class: refs}}.
    """

    def __init__(self, name: str, root: Path, images: dict, fixed: dict = None):
        if not images:
            raise ParameterError("Dataset index needs at least one class")
        for class_name, refs in images.items():
            if not refs:
                raise ParameterError(f"Class '{class_name}' has no images")

        self.name = name
        self.root = Path(root)
        self.classes = list(images)
        if len(set(self.classes)) != len(self.classes):
            raise ParameterError("Class names must be unique")
        self.images = {class_name: list(refs) for class_name, refs in images.items()}
        self.fixed = fixed

    @property
    def num_classes(self):
        return len(self.classes)

    def class_index(self, class_name: str):
        return self.classes.index(class_name)

    def all_refs(self):
        """
        Returns all (class index, ref) pairs.
        """
        return [(c, ref) for c, class_name in enumerate(self.classes) for ref in self.images[class_name]]

def _list_images(directory: Path):
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)

def scan_dataset(root: Path, name: str = None):
    """
    Builds an index from a dataset directory.

    The layout is <root>/<class>/<images>. If <root>/train and <root>/test
    exist, the dataset carries a Fixed assignment and its classes are the
    union of both trees.

    Args:
        root (Path): The dataset directory.
        name (str, optional): Dataset name. Defaults to the directory name.

    Returns:
        DatasetIndex: The index.

    Raises:
        FileNotFoundError: If the directory does not exist.
        ParameterError: If a class contains no images.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found at {root}")
    name = name or root.name

    if (root / 'train').is_dir() and (root / 'test').is_dir():
        fixed = {'train': {}, 'test': {}}
        for part in ('train', 'test'):
            for class_dir in sorted(p for p in (root / part).iterdir() if p.is_dir()):
                fixed[part][class_dir.name] = [p.relative_to(root).as_posix() for p in _list_images(class_dir)]
        class_names = sorted(set(fixed['train']) | set(fixed['test']))
        images = {c: fixed['train'].get(c, []) + fixed['test'].get(c, []) for c in class_names}
        return DatasetIndex(name=name, root=root, images=images, fixed=fixed)

    images = {}
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images[class_dir.name] = [p.relative_to(root).as_posix() for p in _list_images(class_dir)]
    return DatasetIndex(name=name, root=root, images=images)

class SplitKind(Enum):
    COUNT_COUNT = 'count_count'
    COUNT_ALL = 'count_all'
    FRAC_FRAC = 'frac_frac'
    FIXED = 'fixed'

@dataclass(frozen=True)
class SplitSpec:
    """
    Parsed split notation.

    Attributes:
        kind (SplitKind): The notation kind.
        test (float): Test count (or fraction for FRAC_FRAC).
        train (float): Train count (or fraction), None for COUNT_ALL and FIXED.
    """
    kind: SplitKind
    test: float = None
    train: float = None

    def __str__(self):
        def side(value):
            if self.kind == SplitKind.FRAC_FRAC:
                return f"{value:g}"
            return str(int(value))
        if self.kind == SplitKind.FIXED:
            return 'FIXED'
        if self.kind == SplitKind.COUNT_ALL:
            return f"{side(self.test)}xALL"
        return f"{side(self.test)}x{side(self.train)}"

_NUMBER = re.compile(r'\d+')

def _parse_side(text: str, pos: int):
    """
    Parses an integer or a fraction a/b starting at pos.

    Returns:
        tuple: (value, is_fraction, new position)
    """
    match = _NUMBER.match(text, pos)
    if not match:
        raise SplitParseError(text, pos, "expected a number")
    value = int(match.group())
    pos = match.end()
    if pos < len(text) and text[pos] == '/':
        denominator = _NUMBER.match(text, pos + 1)
        if not denominator:
            raise SplitParseError(text, pos + 1, "expected a denominator")
        if int(denominator.group()) == 0:
            raise SplitParseError(text, pos + 1, "denominator must not be zero")
        return value / int(denominator.group()), True, denominator.end()
    return value, False, pos

def parse_split_spec(text: str):
    """
    Parses a split notation.

    Accepted forms are 'AxB', 'AxALL', 'a/bxc/d' and 'FIXED', case-insensitive,
    with 'x' or '×' as separator.

    Args:
        text (str): The notation.

    Returns:
        SplitSpec: The parsed split.

    Raises:
        SplitParseError: If the text is malformed.
    """
    original = text
    text = text.strip().upper().replace('×', 'X')
    if text == 'FIXED':
        return SplitSpec(kind=SplitKind.FIXED)

    test, test_frac, pos = _parse_side(text, 0)
    if pos >= len(text) or text[pos] != 'X':
        raise SplitParseError(original, pos, "expected 'x'")
    pos += 1

    if text[pos:] == 'ALL':
        if test_frac:
            raise SplitParseError(original, pos, "ALL needs a count on the test side")
        if test < 1:
            raise SplitParseError(original, 0, "count must be positive")
        return SplitSpec(kind=SplitKind.COUNT_ALL, test=test)

    train, train_frac, end = _parse_side(text, pos)
    if end != len(text):
        raise SplitParseError(original, end, "unexpected trailing characters")
    if test_frac != train_frac:
        raise SplitParseError(original, pos, "both sides must be counts or both fractions")

    if test_frac:
        if not (0 < test < 1 and 0 < train < 1) or test + train > 1:
            raise SplitParseError(original, 0, "fractions must lie in (0, 1) and sum to at most 1")
        return SplitSpec(kind=SplitKind.FRAC_FRAC, test=test, train=train)

    if test < 1 or train < 1:
        raise SplitParseError(original, 0, "counts must be positive")
    return SplitSpec(kind=SplitKind.COUNT_COUNT, test=test, train=train)

@dataclass
class Split:
    """
    A concrete train/test partition.

    Attributes:
        train (list): (class index, ref) pairs of the training set.
        test (list): (class index, ref) pairs of the testing set.
        seed (int): The seed that produced the partition.
        classes (list): Class names, the position is the class index.
    """
    train: list
    test: list
    seed: int
    classes: list = field(default_factory=list)

    def train_by_class(self):
        """
        Groups the training refs per class index.
        """
        groups = {c: [] for c in range(len(self.classes))}
        for c, ref in self.train:
            groups[c].append(ref)
        return groups

    def as_dict(self):
        return {'seed': self.seed, 'classes': self.classes,
                'train': [list(item) for item in self.train], 'test': [list(item) for item in self.test]}

    @classmethod
    def from_dict(cls, data: dict):
        return cls(train=[(int(c), ref) for c, ref in data['train']], test=[(int(c), ref) for c, ref in data['test']],
                   seed=int(data['seed']), classes=list(data['classes']))

def make_split(index: DatasetIndex, spec: SplitSpec, seed: int, all_to_train: bool = True):
    """
    Partitions a dataset into training and testing sets.

    Per class the test images are drawn first and the training images are
    drawn from the remainder, both without replacement.

    For 'AxALL' with all_to_train=True, A images per class test and all
    others train. With all_to_train=False the A images train and the
    remainder tests.

    Args:
        index (DatasetIndex): The dataset.
        spec (SplitSpec): The split notation.
        seed (int): The seed.
        all_to_train (bool, optional): Reading of 'AxALL'. Defaults to True.

    Returns:
        Split: The partition.

    Raises:
        CapacityError: If a class has too few images.
        ParameterError: If FIXED is requested for a dataset without prescribed assignment.
    """
    if spec.kind == SplitKind.FIXED:
        if not index.fixed:
            raise ParameterError(f"Dataset '{index.name}' carries no fixed train/test assignment")
        train = [(index.class_index(c), ref) for c, refs in index.fixed['train'].items() for ref in refs]
        test = [(index.class_index(c), ref) for c, refs in index.fixed['test'].items() for ref in refs]
        return Split(train=sorted(train), test=sorted(test), seed=seed, classes=list(index.classes))

    rng = make_rng(seed, 0)
    train, test = [], []
    for c, class_name in enumerate(index.classes):
        refs = index.images[class_name]
        n = len(refs)

        if spec.kind == SplitKind.COUNT_COUNT:
            n_test, n_train = int(spec.test), int(spec.train)
        elif spec.kind == SplitKind.COUNT_ALL:
            if all_to_train:
                n_test, n_train = int(spec.test), n - int(spec.test)
            else:
                n_train, n_test = int(spec.test), n - int(spec.test)
        else:
            n_test, n_train = int(spec.test * n), int(spec.train * n)

        if n_test < 1 or n_train < 1 or n_test + n_train > n:
            if spec.kind == SplitKind.COUNT_COUNT:
                needed = n_test + n_train
            elif spec.kind == SplitKind.COUNT_ALL:
                needed = int(spec.test) + 1
            else:
                needed = int(np.ceil(1 / min(spec.test, spec.train)))
            raise CapacityError(class_name, needed, n)

        order = rng.permutation(n)
        test_part = order[:n_test]
        # COUNT_ALL with the literal reading draws the training images first
        if spec.kind == SplitKind.COUNT_ALL and not all_to_train:
            train_part, test_part = order[:n_train], order[n_train:]
        else:
            train_part = order[n_test:n_test + n_train]

        test.extend((c, refs[i]) for i in test_part)
        train.extend((c, refs[i]) for i in train_part)

    return Split(train=train, test=test, seed=seed, classes=list(index.classes))

def sample_batch(split: Split, size: int = 32, rng=None):
    """
    Draws a batch with a uniform class distribution.

    Every slot draws a class uniformly and then an image of that class
    uniformly, so images may repeat within a batch.

    Args:
        split (Split): The partition, only its training set is used.
        size (int, optional): Batch size. Defaults to 32.
        rng (numpy.random.Generator): Random source.

    Returns:
        list: (class index, ref) pairs.

    Raises:
        StateError: If a class has no training image.
    """
    groups = split.train_by_class()
    empty = [split.classes[c] for c, refs in groups.items() if not refs]
    if empty:
        raise StateError(f"Classes without training images: {', '.join(empty)}")

    batch = []
    for _ in range(size):
        c = int(rng.integers(len(groups)))
        refs = groups[c]
        batch.append((c, refs[int(rng.integers(len(refs)))]))
    return batch

class ImageStore():
    """
    Provides preprocessed images by ref.

    Images are read from a preprocessed cache directory if one is given,
    otherwise the raw dataset file is preprocessed on first access. Loaded
    images are memoized, access is thread-safe.

    Attributes:
        _root (Path): Dataset directory.
        _cache_dir (Path): Preprocessed cache directory or None.
        _threshold (int): Foreground threshold.
        _canvas (int): Preprocessed edge length.
        _margin (int): White margin.
        _images (dict): Memoized images.
        _lock (Lock): Guards _images.
    """

    def __init__(self, root: Path, cache_dir: Path = None, threshold: int = 240, canvas: int = 350, margin: int = 3):
        self._root = Path(root)
        self._cache_dir = Path(cache_dir) if cache_dir else None
        self._threshold = threshold
        self._canvas = canvas
        self._margin = margin
        self._images = {}
        self._lock = Lock()

    @property
    def canvas(self):
        return self._canvas

    def put(self, ref: str, img):
        """
        Registers an already preprocessed image.
        """
        with self._lock:
            self._images[ref] = img

    def get(self, ref: str):
        """
        Returns the preprocessed image of a ref.

        Args:
            ref (str): The image ref relative to the dataset root.

        Returns:
            numpy.ndarray: The canvas x canvas x 3 image.
        """
        with self._lock:
            if ref in self._images:
                return self._images[ref]

        if self._cache_dir is not None:
            img = load_image(self._cache_dir / cached_name(ref))
        else:
            img = preprocess_image(load_image(self._root / ref), self._threshold, self._canvas, self._margin)

        with self._lock:
            self._images[ref] = img
        return img

def cached_name(ref: str):
    """
    Path of a ref inside the preprocessed cache, always a PNG.
    """
    return Path(ref).with_suffix('.png')

class PreprocessCache():
    """
    Mirrors a dataset as preprocessed images plus a JSON manifest.

    The manifest records per ref the source path, its SHA-256 checksum and
    the preprocessing parameters. Sources whose checksum and parameters
    are unchanged are not processed again.
    """

    def __init__(self, out_dir: Path, logger=None):
        self._logger = resolve_logger(logger, 'PreprocessCache')
        self._out_dir = Path(out_dir)

    def read_manifest(self):
        """
        Returns the manifest, an empty one if none exists.
        """
        path = self._out_dir / MANIFEST_NAME
        if not path.exists():
            return {'dataset': None, 'params': {}, 'entries': {}, 'failures': []}
        return json.loads(path.read_text())

    def build(self, index: DatasetIndex, threshold: int = 240, canvas: int = 350, margin: int = 3):
        """
        Preprocesses every image of an index.

        Args:
            index (DatasetIndex): The dataset.
            threshold (int, optional): Foreground threshold. Defaults to 240.
            canvas (int, optional): Output edge length. Defaults to 350.
            margin (int, optional): White margin. Defaults to 3.

        Returns:
            dict: The manifest with additional keys 'written' (refs processed
            in this call), 'failures' (refs without foreground or unreadable)
            and 'counts' (images per class).
        """
        self._logger.info("Preprocessing dataset " + index.name + " ...")

        params = {'threshold': threshold, 'canvas': canvas, 'margin': margin}
        previous = self.read_manifest()
        entries = {}
        written = []
        failures = []
        counts = {c: 0 for c in index.classes}

        for c, ref in index.all_refs():
            source = index.root / ref
            target = self._out_dir / cached_name(ref)
            try:
                checksum = sha256_file(source)
                old = previous['entries'].get(ref)
                if old and old['checksum'] == checksum and old['params'] == params and target.exists():
                    entries[ref] = old
                    counts[index.classes[c]] += 1
                    continue

                img = preprocess_image(load_image(source), threshold, canvas, margin)
            except NoForegroundError:
                self._logger.error("No foreground in " + ref)
                failures.append({'ref': ref, 'reason': 'no foreground'})
                continue
            except (OSError, ValueError) as e:
                self._logger.error("Could not read " + ref + ": " + str(e))
                failures.append({'ref': ref, 'reason': str(e)})
                continue

            save_image(img, target)
            entries[ref] = {'source': str(source), 'class': index.classes[c], 'checksum': checksum, 'params': params}
            written.append(ref)
            counts[index.classes[c]] += 1

        manifest = {'dataset': index.name, 'params': params, 'entries': entries, 'failures': failures}
        path = self._out_dir / MANIFEST_NAME
        if manifest != previous or not path.exists():
            self._out_dir.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        else:
            self._logger.debug("Manifest unchanged")

        self._logger.info(f"Preprocessing done, {len(written)} written, {len(failures)} failed")

        manifest['written'] = written
        manifest['counts'] = counts
        return manifest

def normalize(images, mean=None):
    """
    Converts uint8 images into a float32 NCHW tensor in [0, 1].

    Args:
        images (list): Arrays of shape (H, W, 3).
        mean (numpy.ndarray, optional): Per-channel mean to subtract after scaling.

    Returns:
        numpy.ndarray: Tensor of shape (N, 3, H, W).
    """
    tensor = np.stack(images).astype(np.float32).transpose(0, 3, 1, 2) / np.float32(255)
    if mean is not None:
        tensor = tensor - np.asarray(mean, dtype=np.float32)[None, :, None, None]
    return np.ascontiguousarray(tensor)

def channel_mean(store: ImageStore, refs):
    """
    Per-channel mean of preprocessed images in [0, 1], used when mean subtraction is enabled.
    """
    total = np.zeros(3, dtype=np.float64)
    for ref in refs:
        total += store.get(ref).reshape(-1, 3).mean(axis=0) / 255.0
    return (total / max(len(refs), 1)).astype(np.float32)
