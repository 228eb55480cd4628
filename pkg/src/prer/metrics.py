"""Result-matrix metrics, set-coverage and generation-quality scores,
and memory-footprint accounting.

The result matrix R is (M, M) with R[i-1, j-1] the percent accuracy on
task j after training task i; entries above the diagonal may stay NaN.
"""

import numpy as np

from .exceptions import ConfigurationError
from .nn import row_cosine_similarity


def accuracy(r: np.ndarray) -> float:
    """Mean accuracy over the last row of the result matrix."""
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ConfigurationError("result matrix must be square")
    last = r[-1]
    if np.isnan(last).any():
        raise ConfigurationError("final row of the result matrix is incomplete")
    return float(last.mean())


def bwt(r: np.ndarray) -> float:
    """Average change of past-task accuracy relative to the accuracy each
    task had right after its own training."""
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ConfigurationError("result matrix must be square")
    m = r.shape[0]
    if m < 2:
        raise ConfigurationError("backward transfer needs at least two tasks")
    total = 0.0
    for i in range(1, m):
        for j in range(i):
            if np.isnan(r[i, j]) or np.isnan(r[j, j]):
                raise ConfigurationError("result matrix missing required entries")
            total += r[i, j] - r[j, j]
    return float(total / (m * (m - 1) / 2))


# ---------------------------------------------------------------------------
# set coverage


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets (Euclidean)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ConfigurationError("Hausdorff distance needs non-empty sets")
    # row-chunked so the (n, m, d) broadcast never exceeds ~32 MB; the
    # per-element arithmetic stays identical to the one-shot version, so
    # d(a, b) == d(b, a) holds bitwise
    chunk = max(1, int(4e6 / max(len(b) * a.shape[1], 1)))
    min_ab = np.empty(len(a))
    min_ba = np.full(len(b), np.inf)
    for start in range(0, len(a), chunk):
        d2 = ((a[start:start + chunk, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        d = np.sqrt(d2)
        min_ab[start:start + chunk] = d.min(axis=1)
        min_ba = np.minimum(min_ba, d.min(axis=0))
    return float(max(min_ab.max(), min_ba.max()))


def coverage_hausdorff(real_by_class: dict, generated_by_class: dict) -> float:
    """Class-averaged Hausdorff distance between real and generated
    embedding sets. Both dicts must share keys and per-class counts."""
    if set(real_by_class) != set(generated_by_class):
        raise ConfigurationError("real and generated sets cover different classes")
    if not real_by_class:
        raise ConfigurationError("no classes to compare")
    values = []
    for c in sorted(real_by_class):
        real = np.atleast_2d(np.asarray(real_by_class[c], dtype=float))
        gen = np.atleast_2d(np.asarray(generated_by_class[c], dtype=float))
        if len(real) == 0 or len(gen) == 0:
            raise ConfigurationError(f"class {c} has an empty set")
        if len(real) != len(gen):
            raise ConfigurationError(
                f"class {c}: real and generated counts differ ({len(real)} vs {len(gen)})"
            )
        values.append(hausdorff_distance(real, gen))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# generation quality


def generation_quality(memory, model) -> float:
    """Mean cosine similarity (x100) between the embeddings stored with
    generated images and the embeddings the current model assigns them."""
    if len(memory) == 0:
        raise ConfigurationError("memory is empty")
    z_now = model.encode_classify(memory.images)
    sims = row_cosine_similarity(z_now, memory.embeddings)
    return float(100.0 * sims.mean())


# ---------------------------------------------------------------------------
# memory accounting


def memory_footprint(method: str, num_tasks: int, samples_per_task: int,
                     image_floats: int, embedding_floats: int = 0,
                     model_params: int = 0) -> float:
    """Float count of the extra storage each strategy carries."""
    for value in (num_tasks, samples_per_task, image_floats, embedding_floats, model_params):
        if value < 0:
            raise ConfigurationError("footprint inputs must be non-negative")
    if method in ("replay", "gem"):
        return float(num_tasks * samples_per_task * image_floats)
    if method == "er":
        return float(num_tasks * samples_per_task * (image_floats + embedding_floats))
    if method in ("prer", "prer_r"):
        return float(model_params)
    if method == "naive":
        return 0.0
    raise ConfigurationError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# probes and task evaluation


class KnnProbe:
    """k-nearest-neighbour class assigner, used to label generated
    embeddings when no conditioning is available."""

    def __init__(self, k: int = 5):
        self.k = int(k)
        self._x = None
        self._y = None

    def fit(self, x, y):
        self._x = np.atleast_2d(np.asarray(x, dtype=float))
        self._y = np.asarray(y, dtype=int)
        if len(self._x) == 0:
            raise ConfigurationError("cannot fit a probe on an empty set")
        return self

    def predict(self, x) -> np.ndarray:
        if self._x is None:
            raise ConfigurationError("probe used before fit")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        # |x - y|^2 expanded through a matmul keeps memory at (n, m)
        d2 = ((x ** 2).sum(axis=1)[:, None] + (self._x ** 2).sum(axis=1)[None, :]
              - 2.0 * x @ self._x.T)
        k = min(self.k, len(self._x))
        nearest = np.argpartition(d2, k - 1, axis=1)[:, :k]
        out = np.empty(len(x), dtype=int)
        for i, idx in enumerate(nearest):
            out[i] = np.bincount(self._y[idx]).argmax()
        return out


def task_accuracy(model, task) -> float:
    """Percent accuracy of the task's own head on the task's data."""
    logits = model.classify(task.x, task.index)
    pred = np.asarray(logits).argmax(axis=1)
    return float(100.0 * (pred == task.y_task).mean())
