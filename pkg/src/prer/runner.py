"""Experiment runner: builds everything from a config, trains the task
stream, evaluates the result matrix and persists per-run records.

A run is a pure function of (config, seed): datasets, splits, weight
initialization and every training draw derive from the seed, so
re-running reproduces the record exactly.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, nn
from .config import ExperimentConfig
from .data import build_task_stream, parse_dataset_spec, split_train_test
from .exceptions import ConfigurationError
from .flow import build_flow
from .model import build_conv_model, build_mlp_model, one_hot
from .pipeline import RunState, strategy_train_task
from .rng import Rng


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    strategy: str
    dataset: str
    num_tasks: int
    r_matrix: list
    accuracy: float
    bwt: float | None
    d_t: dict = field(default_factory=dict)
    q_t: dict = field(default_factory=dict)
    memory_floats: float = 0.0
    footprints: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    flow_params: int = 0
    decoder_params: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        data = json.loads(text)
        return cls(**data)

    def result_matrix(self) -> np.ndarray:
        m = np.full((self.num_tasks, self.num_tasks), np.nan)
        for i, row in enumerate(self.r_matrix):
            for j, value in enumerate(row):
                if value is not None:
                    m[i, j] = value
        return m


def build_model_from_config(cfg: ExperimentConfig, input_shape, num_classes, rng: Rng):
    if cfg.encoder == "mlp":
        return build_mlp_model(
            input_shape, num_classes, rng,
            embedding_dim=cfg.embedding_dim,
            encoder_hidden=cfg.encoder_hidden,
            decoder_hidden=cfg.decoder_hidden or None,
            head_hidden=cfg.head_hidden,
            head_dropout=cfg.head_dropout,
            decoder_conditioned=cfg.decoder_conditioned,
            flow_conditioned=cfg.flow_conditioned,
        )
    return build_conv_model(
        input_shape, num_classes, rng,
        embedding_dim=cfg.embedding_dim,
        conv_channels=cfg.conv_channels,
        decoder_hidden=cfg.decoder_hidden or (256,),
        head_hidden=cfg.head_hidden,
        head_dropout=cfg.head_dropout,
        decoder_conditioned=cfg.decoder_conditioned,
        flow_conditioned=cfg.flow_conditioned,
    )


def build_flow_from_config(cfg: ExperimentConfig, num_classes, rng: Rng):
    return build_flow(
        cfg.embedding_dim, cfg.flow_levels, cfg.flow_blocks, rng,
        hidden_multiplier=cfg.flow_hidden_multiplier,
        cond_width=num_classes if cfg.flow_conditioned else 0,
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
    )


def _coverage(state, train_stream, through_task, cap, rng):
    """Class-averaged Hausdorff distance between real reconstruction
    embeddings and flow samples, per class seen so far."""
    model = state.model
    classes = sorted(train_stream.classes_seen(through_task))
    real_by_class = {}
    for c in classes:
        xs = []
        for task in train_stream.tasks[:through_task]:
            rows = np.flatnonzero(task.y_global == c)
            if len(rows):
                xs.append(task.x[rows])
        x = np.concatenate(xs)
        if len(x) > cap:
            x = x[rng.fork(f"cap{c}").choice(len(x), size=cap, replace=False)]
        real_by_class[c] = model.encode_reconstruct(x)

    gen_by_class = {}
    if model.flow_conditioned:
        for c in classes:
            n_c = len(real_by_class[c])
            cond = one_hot(np.full(n_c, c), model.num_classes)
            gen_by_class[c] = state.flow.sample(n_c, rng.fork(f"gen{c}"), cond=cond)
    else:
        needed = {c: len(real_by_class[c]) for c in classes}
        total = sum(needed.values())
        pool = state.flow.sample(3 * total, rng.fork("gen-pool"))
        probe_x = np.concatenate([real_by_class[c] for c in classes])
        probe_y = np.concatenate([np.full(len(real_by_class[c]), c) for c in classes])
        labels = metrics.KnnProbe(k=5).fit(probe_x, probe_y).predict(pool)
        for c in classes:
            got = pool[labels == c][:needed[c]]
            if len(got) == 0:
                # the flow assigns this class no mass at all; worst case,
                # drop it from the average rather than fail the run
                del real_by_class[c]
                continue
            if len(got) < needed[c]:
                keep = rng.fork(f"trim{c}").choice(needed[c], size=len(got), replace=False)
                real_by_class[c] = real_by_class[c][keep]
            gen_by_class[c] = got
    return metrics.coverage_hausdorff(real_by_class, gen_by_class)


def _checkpoint_path(out_dir, cfg, strategy, seed) -> Path:
    return Path(out_dir) / f"state_{strategy}_{cfg.config_hash()}_seed{seed}.npz"


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None, resume=False) -> RunRecord:
    cfg.validate()
    nn.reset_run_warnings()
    strategy = cfg.strategy
    train_cfg = cfg.train_config()

    dataset = parse_dataset_spec(cfg.dataset, seed)
    train_set, test_set = split_train_test(dataset, seed)
    train_stream = build_task_stream(train_set, cfg.c_m, seed)
    test_stream = build_task_stream(test_set, cfg.c_m, seed)
    num_tasks = len(train_stream)
    num_classes = train_stream.num_classes

    rng = Rng(seed)
    model = build_model_from_config(cfg, dataset.sample_shape, num_classes,
                                    rng.fork("model-init"))
    flow = None
    if strategy in ("prer", "prer_r"):
        flow = build_flow_from_config(cfg, num_classes, rng.fork("flow-init"))

    r = np.full((num_tasks, num_tasks), np.nan)
    state = RunState(model=model, flow=flow, stream=train_stream, cfg=train_cfg, rng=rng)
    d_t, q_t = {}, {}

    ckpt_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt_path = _checkpoint_path(out_dir, cfg, strategy, seed)
    if resume and ckpt_path is not None and ckpt_path.exists():
        restored = checkpoint.load_run_state(ckpt_path)
        state.model = model = restored["model"]
        state.flow = flow = restored["flow"]
        state.completed_tasks = restored["completed_tasks"]
        state.synthetic_memory = restored["synthetic_memory"]
        state.er_memory = restored["er_memory"]
        state.timings = restored["timings"]
        r = restored["result_matrix"]
        d_t = {int(k): v for k, v in restored["extra"].get("d_t", {}).items()}
        q_t = {int(k): v for k, v in restored["extra"].get("q_t", {}).items()}

    for task in train_stream.tasks[state.completed_tasks:]:
        strategy_train_task(strategy, state, task)
        t = task.index

        start = time.perf_counter()
        for j in range(1, t + 1):
            r[t - 1, j - 1] = metrics.task_accuracy(model, test_stream.tasks[j - 1])
        if strategy in ("prer", "prer_r"):
            d_t[t] = _coverage(state, train_stream, t, cfg.coverage_cap,
                               rng.fork(f"coverage{t}"))
            if state.synthetic_memory is not None and len(state.synthetic_memory):
                q_t[t] = metrics.generation_quality(state.synthetic_memory, model)
        state._time("evaluation", time.perf_counter() - start)

        if cfg.checkpoints and ckpt_path is not None:
            extra = {
                "seed": seed,
                "config_hash": cfg.config_hash(),
                "d_t": {str(k): v for k, v in d_t.items()},
                "q_t": {str(k): v for k, v in q_t.items()},
            }
            checkpoint.save_run_state(ckpt_path, state, r, extra)

    image_floats = int(np.prod(dataset.sample_shape))
    decoder_params = model.decoder.param_count()
    flow_params = flow.param_count() if flow is not None else 0
    footprints = {
        "naive": 0.0,
        "replay": metrics.memory_footprint("replay", num_tasks, cfg.memory_size, image_floats),
        "er": metrics.memory_footprint("er", num_tasks, cfg.memory_size, image_floats,
                                       cfg.embedding_dim),
        "prer": metrics.memory_footprint("prer", num_tasks, cfg.memory_size, image_floats,
                                         cfg.embedding_dim,
                                         decoder_params + flow_params),
    }
    footprints["prer_r"] = footprints["prer"]

    r_matrix = [[None if math.isnan(v) else float(v) for v in row] for row in r]
    return RunRecord(
        config_hash=cfg.config_hash(),
        seed=seed,
        strategy=strategy,
        dataset=cfg.dataset,
        num_tasks=num_tasks,
        r_matrix=r_matrix,
        accuracy=metrics.accuracy(r),
        bwt=metrics.bwt(r) if num_tasks >= 2 else None,
        d_t={str(k): float(v) for k, v in d_t.items()},
        q_t={str(k): float(v) for k, v in q_t.items()},
        memory_floats=footprints[strategy],
        footprints=footprints,
        timings=dict(state.timings),
        flow_params=flow_params,
        decoder_params=decoder_params,
    )


# ---------------------------------------------------------------------------
# record IO and aggregation


def record_path(out_dir, record: RunRecord) -> Path:
    return Path(out_dir) / (
        f"run_{record.strategy}_{record.config_hash}_seed{record.seed}.json"
    )


def write_record(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = record_path(out, record)
    path.write_text(record.to_json(), encoding="utf-8")
    return path


def read_records(in_dir) -> list:
    records = []
    for path in sorted(Path(in_dir).glob("run_*.json")):
        records.append(RunRecord.from_json(path.read_text(encoding="utf-8")))
    return records


def aggregate(records) -> list:
    """Mean and population standard deviation per (strategy, dataset)."""
    if not records:
        raise ConfigurationError("no records to aggregate")
    groups = {}
    for rec in records:
        groups.setdefault((rec.strategy, rec.dataset), []).append(rec)
    rows = []
    for (strategy, dataset), recs in sorted(groups.items()):
        accs = np.array([r.accuracy for r in recs])
        bwts = [r.bwt for r in recs]
        has_bwt = all(b is not None for b in bwts)
        bwt_arr = np.array(bwts, dtype=float) if has_bwt else None
        rows.append({
            "strategy": strategy,
            "dataset": dataset,
            "seed_count": len(recs),
            "accuracy_mean": float(accs.mean()),
            "accuracy_std": float(accs.std()),
            "bwt_mean": float(bwt_arr.mean()) if has_bwt else None,
            "bwt_std": float(bwt_arr.std()) if has_bwt else None,
            "memory_floats": float(np.mean([r.memory_floats for r in recs])),
        })
    return rows


SUMMARY_COLUMNS = ("strategy", "dataset", "seed_count", "accuracy_mean", "accuracy_std",
                   "bwt_mean", "bwt_std", "memory_floats")


def summary_table(rows) -> str:
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for row in rows:
        cells = []
        for col in SUMMARY_COLUMNS:
            value = row[col]
            cells.append("" if value is None else repr(value) if isinstance(value, float)
                         else str(value))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
