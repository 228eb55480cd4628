"""Datasets, deterministic splits and ordered task streams.

Images arrive as (n, channels, height, width) float64 arrays scaled to
[0, 1]; synthetic datasets are plain (n, dim) vectors. Labels are global
integers 0..C-1. A task stream groups consecutive labels into tasks and
attaches within-task labels, so a stream is fully determined by the
dataset contents, the classes-per-task count and the seed.
"""

import gzip
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError
from .rng import Rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files."""


@dataclass
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ConfigurationError("sample and label counts differ")

    def __len__(self):
        return len(self.x)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    @property
    def sample_shape(self):
        return self.x.shape[1:]

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


@dataclass
class Task:
    index: int              # 1-based position in the stream
    classes: list           # global labels owned by this task
    label_offset: int       # y_global = label_offset + y_task
    x: np.ndarray
    y_task: np.ndarray
    y_global: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass
class TaskStream:
    tasks: list
    num_classes: int
    classes_per_task: int
    seed: int = 0
    dataset_hash: str = ""

    def __len__(self):
        return len(self.tasks)

    def classes_seen(self, through_task: int) -> list:
        seen = []
        for task in self.tasks[:through_task]:
            seen.extend(task.classes)
        return seen

    def task_of_class(self, label: int) -> int:
        return label // self.classes_per_task + 1

    def within_task_label(self, label: int) -> int:
        return label - (self.task_of_class(label) - 1) * self.classes_per_task


# ---------------------------------------------------------------------------
# IDX ingestion


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Parse one IDX file. Image files (magic 0x803) come back as float64
    arrays scaled by 1/255 with an explicit channel axis; label files
    (magic 0x801) come back as int64 vectors."""
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == LABELS_MAGIC:
        ndim = 1
    elif magic == IMAGES_MAGIC:
        ndim = 3
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8)
    if magic == LABELS_MAGIC:
        return data.astype(np.int64)
    images = data.astype(np.float64).reshape(dims) / 255.0
    return images[:, None, :, :]  # channel-major


def load_mnist(images_path, labels_path, name="mnist") -> LabeledDataset:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 4:
        raise IdxFormatError(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: not a label file")
    if len(images) != len(labels):
        raise IdxFormatError("image and label counts differ")
    return LabeledDataset(images, labels, name=name)


# ---------------------------------------------------------------------------
# synthetic data


def synth_blobs(classes: int, per_class: int, dim: int, separation: float,
                seed: int, span: int | None = None) -> LabeledDataset:
    """Unit-variance Gaussian clusters at antipodal vertices scaled by
    `separation`: classes (2p, 2p+1) sit at +/- separation * v_p, so the
    two classes of a task are always 2*separation apart regardless of how
    hard the stream is elsewhere.

    The pair directions v_p live in a randomly rotated `span`-dimensional
    subspace (default: the full space, where they are orthonormal, i.e.
    the vertices of a rotated cross-polytope). A small span forces the
    pair directions of different tasks to overlap, which makes sequential
    tasks compete for the same features; that is the knob that turns
    interference on at desk scale."""
    if separation <= 0:
        raise ConfigurationError("separation must be positive")
    if span is None:
        span = dim
    if not 1 <= span <= dim:
        raise ConfigurationError(f"span must be in 1..{dim}, got {span}")
    rng = Rng(seed).fork("blobs")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    basis = basis[:, :span]
    pairs = (classes + 1) // 2
    directions = np.empty((pairs, dim))
    for p in range(pairs):
        if p < span:
            directions[p] = basis[:, p]
        else:
            combo = rng.normal(size=span)
            combo /= np.linalg.norm(combo)
            directions[p] = basis @ combo
    xs, ys = [], []
    for k in range(classes):
        center = separation * directions[k // 2] * (1.0 if k % 2 == 0 else -1.0)
        xs.append(center + rng.normal(size=(per_class, dim)))
        ys.append(np.full(per_class, k, dtype=np.int64))
    if not xs or per_class == 0:
        return LabeledDataset(np.empty((0, dim)), np.empty(0, dtype=np.int64), name="blobs")
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), name="blobs")


# ---------------------------------------------------------------------------
# splits and streams


def split_train_test(dataset: LabeledDataset, seed: int):
    """Label-balanced 80/20 split; the test share is rounded down per class."""
    rng = Rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(dataset.y):
        idx = np.flatnonzero(dataset.y == c)
        if len(idx) < 5:
            raise ConfigurationError(f"class {c} has only {len(idx)} samples; need >= 5")
        order = rng.fork(f"class{c}").permutation(len(idx))
        idx = idx[order]
        n_test = int(len(idx) * 0.2)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    return (
        LabeledDataset(dataset.x[train_idx], dataset.y[train_idx], name=dataset.name),
        LabeledDataset(dataset.x[test_idx], dataset.y[test_idx], name=dataset.name),
    )


def build_task_stream(dataset: LabeledDataset, classes_per_task: int, seed: int) -> TaskStream:
    """Group ascending labels into tasks of `classes_per_task` classes;
    the last task keeps the remainder."""
    num_classes = dataset.num_classes
    if classes_per_task <= 1:
        raise ConfigurationError("classes per task must be > 1")
    if classes_per_task > num_classes:
        raise ConfigurationError(
            f"classes per task ({classes_per_task}) exceeds class count ({num_classes})"
        )
    present = np.unique(dataset.y)
    if not np.array_equal(present, np.arange(num_classes)):
        raise ConfigurationError("labels must form a contiguous 0..C-1 range")
    rng = Rng(seed)
    num_tasks = -(-num_classes // classes_per_task)
    tasks = []
    for t in range(1, num_tasks + 1):
        offset = (t - 1) * classes_per_task
        classes = list(range(offset, min(offset + classes_per_task, num_classes)))
        mask = np.isin(dataset.y, classes)
        idx = np.flatnonzero(mask)
        idx = idx[rng.fork(f"task{t}").permutation(len(idx))]
        y_global = dataset.y[idx]
        tasks.append(Task(
            index=t,
            classes=classes,
            label_offset=offset,
            x=dataset.x[idx],
            y_task=y_global - offset,
            y_global=y_global,
        ))
    return TaskStream(
        tasks=tasks,
        num_classes=num_classes,
        classes_per_task=classes_per_task,
        seed=seed,
        dataset_hash=dataset.content_hash(),
    )


# ---------------------------------------------------------------------------
# config-string addressing


def parse_dataset_spec(spec: str, seed: int) -> LabeledDataset:
    """Build a dataset from a config string such as
    ``blobs:classes=10,dim=20,sep=6,per_class=200`` or
    ``mnist:images=PATH,labels=PATH``."""
    kind, _, argstr = spec.partition(":")
    args = {}
    if argstr:
        for item in argstr.split(","):
            key, _, value = item.partition("=")
            if not key or not value:
                raise ConfigurationError(f"malformed dataset argument {item!r}")
            args[key.strip()] = value.strip()
    if kind == "blobs":
        return synth_blobs(
            classes=int(args.get("classes", 10)),
            per_class=int(args.get("per_class", 200)),
            dim=int(args.get("dim", 20)),
            separation=float(args.get("sep", 6.0)),
            seed=seed,
            span=int(args["span"]) if "span" in args else None,
        )
    if kind == "mnist":
        if "dir" in args:
            base = args["dir"].rstrip("/")
            for suffix in ("", ".gz"):
                images = f"{base}/train-images-idx3-ubyte{suffix}"
                labels = f"{base}/train-labels-idx1-ubyte{suffix}"
                try:
                    return load_mnist(images, labels)
                except FileNotFoundError:
                    continue
            raise ConfigurationError(f"no MNIST IDX files found under {base}")
        if "images" not in args or "labels" not in args:
            raise ConfigurationError("mnist spec needs images=PATH,labels=PATH or dir=PATH")
        return load_mnist(args["images"], args["labels"])
    raise ConfigurationError(f"unknown dataset kind {kind!r}")
