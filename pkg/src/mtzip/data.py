"""Datasets: MNIST IDX files, synthetic correlated tasks, and error-rate evaluation."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "MTZIP_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ValueError("dataset needs a nonempty (n, dim) input matrix")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.dtype.kind in "iu":
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
                raise ValueError("labels outside the class range")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.split, self.n_classes, self.name)

    def sample(self, n: int, seed: int = 0) -> "Dataset":
        """Deterministic random subset of ``min(n, len)`` samples."""
        idx = np.random.default_rng(seed).permutation(len(self))[: min(n, len(self))]
        return self.subset(np.sort(idx))


class TaskData(NamedTuple):
    train: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", buf[:4])[0]
    if found != magic:
        raise IdxFormatError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) - header < size:
        raise IdxFormatError(f"{path}: truncated data ({len(buf) - header} of {size} bytes)")
    if len(buf) - header > size:
        raise IdxFormatError(f"{path}: {len(buf) - header - size} trailing bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, LABELS_MAGIC, 1)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGES_MAGIC, 1: LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-D label and 3-D image arrays are supported")
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), split, 10, "mnist")


def default_data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def find_mnist(directory=None) -> Path | None:
    """Locate a directory holding the four uncompressed MNIST IDX files."""
    candidates = [directory] if directory is not None else [default_data_dir()]
    for d in candidates:
        if d is None:
            continue
        d = Path(d)
        if all((d / f).is_file() for pair in MNIST_FILES.values() for f in pair):
            return d
    return None


def load_mnist(directory, split: str = "train") -> Dataset:
    images, labels = MNIST_FILES[split]
    directory = Path(directory)
    return load_idx(directory / images, directory / labels, split)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskSpec:
    """Classification task labelled by a random teacher network.

    Tasks with the same ``trunk_seed`` share the teacher's hidden layer and
    differ only in their output heads, which makes them correlated.
    """

    name: str
    seed: int
    input_dim: int = 10
    n_classes: int = 4
    trunk_seed: int = 0
    trunk_hidden: list = field(default_factory=lambda: [16])
    label_noise: float = 0.0
    n_train: int = 3000
    n_test: int = 1000

    def __post_init__(self):
        if self.input_dim < 1 or self.n_classes < 2:
            raise ValueError("need input_dim >= 1 and n_classes >= 2")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("sample counts must be positive")


def _teacher_trunk(spec: SyntheticTaskSpec):
    rng = np.random.default_rng([spec.trunk_seed, spec.input_dim])
    dims = [spec.input_dim, *spec.trunk_hidden]
    return [
        (rng.normal(0.0, 2.0 / np.sqrt(a), size=(a, b)), rng.normal(0.0, 0.5, size=b))
        for a, b in zip(dims[:-1], dims[1:])
    ]


def _teacher_features(trunk, x):
    h = x - 0.5
    for w, b in trunk:
        h = np.tanh(h @ w + b)
    return h


def gen_correlated_tasks(specs) -> dict:
    """Generate ``{name: TaskData(train, test)}``; deterministic in the seeds."""
    out = {}
    for spec in specs:
        if spec.name in out:
            raise ValueError(f"duplicate task name {spec.name!r}")
        trunk = _teacher_trunk(spec)
        rng = np.random.default_rng([spec.seed, 1])
        head = rng.normal(size=(spec.trunk_hidden[-1] if spec.trunk_hidden else spec.input_dim, spec.n_classes))
        # centre the logits on a reference sample so that classes are roughly balanced
        ref = _teacher_features(trunk, np.random.default_rng([spec.seed, 2]).random((4096, spec.input_dim)))
        offset = (ref @ head).mean(axis=0)
        splits = []
        for split, n in (("train", spec.n_train), ("test", spec.n_test)):
            x = rng.random((n, spec.input_dim))
            y = (_teacher_features(trunk, x) @ head - offset).argmax(axis=1)
            flip = rng.random(n) < spec.label_noise
            y[flip] = rng.integers(0, spec.n_classes, size=int(flip.sum()))
            splits.append(Dataset(x, y.astype(np.int64), split, spec.n_classes, spec.name))
        out[spec.name] = TaskData(*splits)
    return out


def load_task_specs(path) -> list:
    """Read ``{"tasks": [{...}, ...]}`` from a JSON file."""
    doc = json.loads(Path(path).read_text())
    return [SyntheticTaskSpec(**entry) for entry in doc["tasks"]]


def dump_task_specs(specs, path) -> None:
    Path(path).write_text(json.dumps({"tasks": [asdict(s) for s in specs]}, indent=2))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, task, dataset: Dataset, batch_size: int = 2000) -> float:
    """Fraction of samples whose argmax output differs from the label.

    ``model`` is a Network (``task`` ignored) or a ZippedModel.
    """
    from .model import ZippedModel, predict

    net = model.task_network(task) if isinstance(model, ZippedModel) else model
    if dataset.dim != net.input_dim:
        raise ValueError(f"dataset dim {dataset.dim} does not match model input {net.input_dim}")
    pred = predict(net, dataset.inputs, batch_size).argmax(axis=1)
    return float(np.mean(pred != dataset.labels))
