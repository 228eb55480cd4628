"""Per-task training: the three-phase procedure, synthetic-memory
construction, mini-batch overwrite replay and the baseline strategies.

One task is trained in strict phase order: (1) classifier, (2)
autoencoder with the backbone frozen, (3) density model on the
reconstruction embeddings. A single flow and a single decoder persist
across all tasks; strategies that keep a memory of real data refresh it
at task end, the synthetic memory is regenerated at every task start.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .exceptions import ConfigurationError, DivergenceError, StateError
from .flow import FlowStack, nll_loss_and_backward
from .metrics import KnnProbe
from .model import ContinualModel, one_hot
from .rng import Rng

STRATEGIES = ("naive", "replay", "er", "prer", "prer_r")


@dataclass
class TrainConfig:
    strategy: str = "prer"
    classifier_epochs: int = 20
    ae_max_epochs: int = 150
    flow_max_epochs: int = 150
    patience: int = 5
    min_delta: float = 1e-4
    beta: float = 1.0
    memory_size: int = 200
    replay_fraction: float = 0.5
    batch_size: int = 64
    lr: float = 0.001
    validation_fraction: float = 0.1

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.replay_fraction < 1.0:
            raise ConfigurationError("replay fraction must be in [0, 1)")
        if self.beta < 0.0:
            raise ConfigurationError("beta must be >= 0")
        if self.memory_size < 0:
            raise ConfigurationError("memory size must be >= 0")
        if min(self.classifier_epochs, self.ae_max_epochs, self.flow_max_epochs) < 1:
            raise ConfigurationError("epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation fraction must be in [0, 1)")
        return self


@dataclass
class SyntheticMemory:
    """Generated images paired with the embeddings the model assigned
    them at generation time; `classes` holds the requested labels when
    any conditioning was available."""

    images: np.ndarray
    embeddings: np.ndarray
    classes: np.ndarray | None
    source_task: int

    def __len__(self):
        return len(self.images)


@dataclass
class ErMemory:
    """Real images kept per completed task, optionally with the
    embeddings they had when their task ended."""

    images: np.ndarray
    y_global: np.ndarray
    y_task: np.ndarray
    task_ids: np.ndarray
    embeddings: np.ndarray | None

    def __len__(self):
        return len(self.images)

    @staticmethod
    def add_task(memory, images, y_global, y_task, task_id, embeddings=None):
        task_ids = np.full(len(images), task_id, dtype=int)
        if memory is None:
            return ErMemory(images, y_global, y_task, task_ids, embeddings)
        emb = None
        if memory.embeddings is not None and embeddings is not None:
            emb = np.concatenate([memory.embeddings, embeddings])
        return ErMemory(
            np.concatenate([memory.images, images]),
            np.concatenate([memory.y_global, y_global]),
            np.concatenate([memory.y_task, y_task]),
            np.concatenate([memory.task_ids, task_ids]),
            emb,
        )


class EarlyStop:
    """Stop once `patience` consecutive epochs fail to improve the best
    loss by at least `min_delta`."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def classifier_loss(model: ContinualModel, x, y_task, task_id: int, beta: float = 0.0,
                    memory_images=None, memory_embeddings=None) -> dict:
    """Evaluate the classification loss, optionally with the embedding
    retention penalty, without touching any gradients."""
    logits = model.classify(x, task_id)
    ce = nn.cross_entropy(logits, y_task)
    reg = 0.0
    if beta > 0.0 and memory_images is not None and len(memory_images):
        z = model.encode_classify(memory_images)
        reg = nn.mean_cosine_distance(z, memory_embeddings)
    return {"total": ce + beta * reg, "cross_entropy": ce, "regularizer": reg}


def _grouped_classifier_step(model, current_task_id, x, y_task, task_ids, dropout_rng):
    """Cross-entropy over a batch whose rows may belong to different
    tasks. Each row is scored by its own task's head; only the current
    head runs in train mode, but gradients flow through the frozen past
    heads into the shared encoder."""
    z = model.encode_classify(x, train=True, rng=dropout_rng)
    dz = np.zeros_like(z)
    total = 0.0
    n = len(x)
    for tid in np.unique(task_ids):
        rows = np.flatnonzero(task_ids == tid)
        head = model.head(int(tid))
        is_current = int(tid) == current_task_id
        logits = head.forward(z[rows], train=is_current, rng=dropout_rng)
        weight = len(rows) / n
        total += nn.cross_entropy(logits, y_task[rows]) * weight
        dlogits = nn.cross_entropy_grad(logits, y_task[rows]) * weight
        dz[rows] = head.backward(dlogits)
    dh = model.proj_classify.backward(dz)
    model.encoder.backward(dh)
    return total


def train_classifier_phase(model: ContinualModel, task, cfg: TrainConfig, rng: Rng,
                           penalty=None, replay=None) -> dict:
    """Phase 1. Trains the backbone, the classification projection and
    the current task head. `penalty` is (images, embeddings) for the
    retention term; `replay` is (images, y_task, task_ids) for mini-batch
    overwriting. The epoch snapshot with the best held-out accuracy on
    the current task is kept."""
    if len(task) == 0:
        raise ConfigurationError(f"task {task.index} has no training data")
    model.ensure_head(task.index, len(task.classes), rng.fork("head-init"))
    head = model.head(task.index)
    pairs = model.classifier_parameters(task.index)
    adam = nn.Adam(pairs, lr=cfg.lr)

    n_val = int(len(task) * cfg.validation_fraction)
    order = rng.fork("val-split").permutation(len(task))
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if len(fit_idx) == 0:
        raise ConfigurationError("validation fraction leaves no training data")
    x_fit, y_fit = task.x[fit_idx], task.y_task[fit_idx]
    x_val, y_val = task.x[val_idx], task.y_task[val_idx]

    dropout_rng = rng.fork("dropout")
    batch_rng = rng.fork("batches")
    mem_rng = rng.fork("memory")

    use_penalty = (penalty is not None and cfg.beta > 0.0 and len(penalty[0]) > 0)
    use_replay = (replay is not None and cfg.replay_fraction > 0.0 and len(replay[0]) > 0)

    best_acc = -1.0
    best_params = None
    history = []
    for _ in range(cfg.classifier_epochs):
        epoch_loss, steps = 0.0, 0
        for idx in _batches(len(x_fit), cfg.batch_size, batch_rng):
            xb, yb = x_fit[idx], y_fit[idx]
            model.encoder.zero_grads()
            model.proj_classify.zero_grads()
            head.zero_grads()

            if use_replay:
                rep_x, rep_y, rep_t = replay
                k = min(int(np.ceil(cfg.replay_fraction * len(idx))), len(idx))
                pick = mem_rng.choice(len(rep_x), size=k, replace=len(rep_x) < k)
                xb = xb.copy()
                yb = yb.copy()
                tids = np.full(len(xb), task.index)
                xb[:k] = rep_x[pick]
                yb[:k] = rep_y[pick]
                tids[:k] = rep_t[pick]
                loss = _grouped_classifier_step(model, task.index, xb, yb, tids, dropout_rng)
            else:
                logits = model.classify(xb, task.index, train=True, rng=dropout_rng)
                loss = nn.cross_entropy(logits, yb)
                dlogits = nn.cross_entropy_grad(logits, yb)
                dz = head.backward(dlogits)
                dh = model.proj_classify.backward(dz)
                model.encoder.backward(dh)

            if use_penalty:
                mem_x, mem_z = penalty
                k = min(cfg.batch_size, len(mem_x))
                pick = mem_rng.choice(len(mem_x), size=k, replace=False)
                z = model.encode_classify(mem_x[pick], train=True)
                reg = nn.mean_cosine_distance(z, mem_z[pick])
                dz = cfg.beta * nn.mean_cosine_distance_grad(z, mem_z[pick])
                dh = model.proj_classify.backward(dz)
                model.encoder.backward(dh)
                loss += cfg.beta * reg

            adam.step()
            epoch_loss += loss
            steps += 1
        history.append(epoch_loss / max(steps, 1))

        if len(val_idx):
            logits = model.classify(x_val, task.index)
            acc = float((logits.argmax(axis=1) == y_val).mean())
            # ties go to the later epoch: equally accurate but further trained
            if acc >= best_acc:
                best_acc = acc
                best_params = [p.copy() for p, _ in pairs]

    if best_params is not None:
        for (p, _), saved in zip(pairs, best_params):
            p[...] = saved
    return {"loss_history": history, "best_val_accuracy": best_acc}


def train_autoencoder_phase(model: ContinualModel, task, cfg: TrainConfig, rng: Rng,
                            memory: SyntheticMemory | None = None) -> dict:
    """Phase 2. Trains the reconstruction projection and the decoder on
    pixel MSE; the backbone and the classification projection stay
    untouched. A fraction of every mini-batch is overwritten with
    memory images."""
    if len(task) == 0:
        raise ConfigurationError(f"task {task.index} has no training data")
    use_memory = memory is not None and len(memory) > 0 and cfg.replay_fraction > 0.0
    if use_memory and model.decoder_conditioned and memory.classes is None:
        raise ConfigurationError("decoder is conditioned but the memory carries no classes")

    pairs = model.autoencoder_parameters()
    adam = nn.Adam(pairs, lr=cfg.lr)
    batch_rng = rng.fork("batches")
    mem_rng = rng.fork("memory")
    stop = EarlyStop(cfg.patience, cfg.min_delta)

    history = []
    for _ in range(cfg.ae_max_epochs):
        epoch_loss, steps = 0.0, 0
        for idx in _batches(len(task), cfg.batch_size, batch_rng):
            xb = task.x[idx]
            y_cond = task.y_global[idx]
            if use_memory:
                k = min(int(np.ceil(cfg.replay_fraction * len(idx))), len(idx))
                pick = mem_rng.choice(len(memory), size=k, replace=len(memory) < k)
                xb = xb.copy()
                xb[:k] = memory.images[pick]
                if memory.classes is not None:
                    y_cond = y_cond.copy()
                    y_cond[:k] = memory.classes[pick]

            model.proj_reconstruct.zero_grads()
            model.decoder.zero_grads()
            h = model.encoder.forward(xb)  # frozen: no backward into the backbone
            z = model.proj_reconstruct.forward(h, train=True)
            cond = one_hot(y_cond, model.num_classes) if model.decoder_conditioned else None
            flat = model.decoder.forward(z, train=True, cond=cond)
            target = xb.reshape(len(xb), -1)
            loss = nn.mse(flat, target)
            dflat = nn.mse_grad(flat, target)
            dz = model.decoder.backward(dflat)
            model.proj_reconstruct.backward(dz)
            adam.step()
            epoch_loss += loss
            steps += 1
        mean_loss = epoch_loss / max(steps, 1)
        history.append(mean_loss)
        if stop.update(mean_loss):
            break
    return {"loss_history": history, "epochs": len(history)}


def train_flow_phase(flow: FlowStack, model: ContinualModel, task, cfg: TrainConfig,
                     rng: Rng, memory: SyntheticMemory | None = None) -> dict:
    """Phase 3. Fits the single persistent flow to the reconstruction
    embeddings of the current task, mixed with memory images so that the
    density keeps covering earlier tasks."""
    if len(task) == 0:
        raise ConfigurationError(f"task {task.index} has no training data")
    use_memory = memory is not None and len(memory) > 0 and cfg.replay_fraction > 0.0
    if use_memory and model.flow_conditioned and memory.classes is None:
        raise ConfigurationError("flow is conditioned but the memory carries no classes")

    adam = nn.Adam(flow.parameters(), lr=cfg.lr)
    batch_rng = rng.fork("batches")
    mem_rng = rng.fork("memory")
    stop = EarlyStop(cfg.patience, cfg.min_delta)

    history = []
    for epoch in range(cfg.flow_max_epochs):
        epoch_loss, steps = 0.0, 0
        for idx in _batches(len(task), cfg.batch_size, batch_rng):
            if len(idx) < 2:  # batch norm needs a real batch
                continue
            xb = task.x[idx]
            y_cond = task.y_global[idx]
            if use_memory:
                k = min(int(np.ceil(cfg.replay_fraction * len(idx))), len(idx))
                pick = mem_rng.choice(len(memory), size=k, replace=len(memory) < k)
                xb = xb.copy()
                xb[:k] = memory.images[pick]
                if memory.classes is not None:
                    y_cond = y_cond.copy()
                    y_cond[:k] = memory.classes[pick]
            z = model.encode_reconstruct(xb)
            cond = one_hot(y_cond, model.num_classes) if model.flow_conditioned else None
            flow.zero_grads()
            try:
                loss = nll_loss_and_backward(flow, z, cond=cond, train=True)
            except DivergenceError as err:
                raise DivergenceError(
                    f"flow phase, task {task.index}, epoch {epoch}: {err}"
                ) from None
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"flow NLL diverged on task {task.index}, epoch {epoch}"
                )
            adam.step()
            epoch_loss += loss
            steps += 1
        if steps == 0:
            raise ConfigurationError("task too small for flow training at this batch size")
        mean_loss = epoch_loss / steps
        history.append(mean_loss)
        if stop.update(mean_loss):
            break
    return {"loss_history": history, "epochs": len(history)}


def class_schedule(classes_seen, n: int, rng: Rng) -> np.ndarray:
    """n class labels spread as evenly as possible over the classes seen
    so far, in shuffled order."""
    classes = sorted(set(int(c) for c in classes_seen))
    if not classes:
        raise ConfigurationError("no classes seen yet")
    base, extra = divmod(n, len(classes))
    counts = np.full(len(classes), base)
    if extra:
        counts[rng.choice(len(classes), size=extra, replace=False)] += 1
    schedule = np.repeat(classes, counts)
    return schedule[rng.permutation(len(schedule))]


def generate_memory(flow: FlowStack, model: ContinualModel, n: int, schedule,
                    rng: Rng, task_index: int) -> SyntheticMemory:
    """Sample embeddings from the flow, decode them and re-encode the
    decoded images; the resulting tuples are the rehearsal memory for
    the upcoming task."""
    if task_index <= 1:
        raise StateError("memory generation needs a flow trained on at least one earlier task")
    conditioned = model.flow_conditioned or model.decoder_conditioned
    if n == 0:
        empty = np.empty((0,) + model.input_shape)
        return SyntheticMemory(empty, np.empty((0, model.embedding_dim)),
                               np.empty(0, dtype=int) if conditioned else None, task_index)
    if conditioned:
        schedule = np.asarray(schedule, dtype=int)
        if schedule.shape != (n,):
            raise ConfigurationError(f"class schedule must have length {n}")
    flow_cond = one_hot(schedule, model.num_classes) if model.flow_conditioned else None
    z = flow.sample(n, rng, cond=flow_cond)
    dec_cond = one_hot(schedule, model.num_classes) if model.decoder_conditioned else None
    images = model.decode(z, y_onehot=dec_cond)
    embeddings = model.encode_classify(images)
    return SyntheticMemory(images, embeddings,
                           schedule.copy() if conditioned else None, task_index)


# ---------------------------------------------------------------------------
# strategy dispatch


@dataclass
class RunState:
    model: ContinualModel
    flow: FlowStack | None
    stream: object
    cfg: TrainConfig
    rng: Rng
    completed_tasks: int = 0
    synthetic_memory: SyntheticMemory | None = None
    er_memory: ErMemory | None = None
    timings: dict = field(default_factory=dict)

    def _time(self, phase, seconds):
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds


def _past_task_probe(state: RunState, through_task: int) -> KnnProbe:
    """Probe fitted on current-model embeddings of real data from the
    tasks before `through_task`; used to label unconditioned samples."""
    xs, ys = [], []
    for task in state.stream.tasks[:through_task - 1]:
        xs.append(state.model.encode_classify(task.x))
        ys.append(task.y_global)
    return KnnProbe(k=5).fit(np.concatenate(xs), np.concatenate(ys))


def strategy_train_task(strategy: str, state: RunState, task) -> RunState:
    """Train one task under the given strategy and advance the state."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if task.index != state.completed_tasks + 1:
        raise StateError(
            f"tasks must be trained in order; expected task {state.completed_tasks + 1}, "
            f"got {task.index}"
        )
    cfg = state.cfg
    model = state.model
    t = task.index
    rng_t = state.rng.fork(f"task{t}")

    if strategy in ("prer", "prer_r"):
        if state.flow is None:
            raise ConfigurationError(f"strategy {strategy!r} needs a flow")
        if t > 1 and cfg.memory_size > 0:
            start = time.perf_counter()
            conditioned = model.flow_conditioned or model.decoder_conditioned
            schedule = None
            if conditioned:
                schedule = class_schedule(state.stream.classes_seen(t - 1),
                                          cfg.memory_size, rng_t.fork("schedule"))
            state.synthetic_memory = generate_memory(
                state.flow, model, cfg.memory_size, schedule, rng_t.fork("memory-gen"), t
            )
            state._time("memory", time.perf_counter() - start)

    penalty = None
    replay = None
    memory = state.synthetic_memory
    if strategy == "er" and state.er_memory is not None and len(state.er_memory):
        penalty = (state.er_memory.images, state.er_memory.embeddings)
    elif strategy == "prer" and memory is not None and len(memory):
        penalty = (memory.images, memory.embeddings)
    elif strategy == "replay" and state.er_memory is not None and len(state.er_memory):
        replay = (state.er_memory.images, state.er_memory.y_task, state.er_memory.task_ids)
    elif strategy == "prer_r" and memory is not None and len(memory):
        # replay labels must describe what a generated image actually
        # contains, and the requested condition class is only a request;
        # the nearest-class probe over real past-task embeddings labels
        # the content itself, so it is used in every conditioning mode
        labels = _past_task_probe(state, t).predict(memory.embeddings)
        y_task = np.array([state.stream.within_task_label(y) for y in labels])
        task_ids = np.array([state.stream.task_of_class(y) for y in labels])
        replay = (memory.images, y_task, task_ids)

    start = time.perf_counter()
    train_classifier_phase(model, task, cfg, rng_t.fork("classifier"),
                           penalty=penalty, replay=replay)
    state._time("classifier", time.perf_counter() - start)

    if strategy in ("prer", "prer_r"):
        start = time.perf_counter()
        train_autoencoder_phase(model, task, cfg, rng_t.fork("autoencoder"), memory=memory)
        state._time("autoencoder", time.perf_counter() - start)
        start = time.perf_counter()
        train_flow_phase(state.flow, model, task, cfg, rng_t.fork("flow"), memory=memory)
        state._time("flow", time.perf_counter() - start)

    if strategy in ("replay", "er"):
        k = min(cfg.memory_size, len(task))
        if k > 0:
            pick = rng_t.fork("store").choice(len(task), size=k, replace=False)
            embeddings = None
            if strategy == "er":
                embeddings = model.encode_classify(task.x[pick])
            state.er_memory = ErMemory.add_task(
                state.er_memory, task.x[pick], task.y_global[pick],
                task.y_task[pick], t, embeddings,
            )

    state.completed_tasks = t
    return state
