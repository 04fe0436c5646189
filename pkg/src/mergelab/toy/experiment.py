"""Pairwise merge experiments, merge spectra, and the similarity/delta study.

Every random choice is keyed off ``ExperimentConfig.seed`` plus a stable
identifier (task seed, pair id), never off submission order, so running the
per-expert and per-pair jobs on a thread pool gives identical results.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from os import PathLike
from typing import Any

import numpy as np

from ..checkpoint import Checkpoint
from ..errors import ArgumentError, SchemaError, TrainingError
from ..merge import (
    DareConfig,
    TiesConfig,
    dare_ties_merge_vectors,
    derive_seed,
    linear_merge,
    task_vector,
    ties_merge_vectors,
)
from ..similarity import ActivationSet, SimilarityReport, cka_profile, parametric_diff
from ..stats import CorrelationReport, DeltaRecord, correlate_measures, merge_delta
from .model import ToyModel, evaluate, forward, init_model, train
from .tasks import ToyDataset, ToyTaskSpec, generate_task, sample_task

log = logging.getLogger(__name__)

METHODS = ("linear", "ties", "dare_ties")
INIT_MODES = ("shared", "independent")
MEASURES = ("mean_cka", "mean_cosine", "mean_stable_rank_diff", "mean_l2_diff")


@dataclass(frozen=True)
class MethodConfig:
    name: str
    density: float = 0.2
    lam: float = 1.0
    drop_prob: float = 0.9

    def __post_init__(self):
        if self.name not in METHODS:
            raise SchemaError(f"unknown merge method {self.name!r}; expected one of {METHODS}")
        if self.name != "linear":
            TiesConfig(self.density, self.lam)
        if self.name == "dare_ties":
            DareConfig(self.drop_prob)


def _default_methods() -> tuple[MethodConfig, ...]:
    return (MethodConfig("linear"), MethodConfig("ties"), MethodConfig("dare_ties"))


@dataclass(frozen=True)
class ExperimentConfig:
    n_tasks: int = 10
    input_dim: int = 16
    n_classes: int = 4
    n_train: int = 1024
    n_eval: int = 512
    separation: float = 6.0
    clusters_per_class: int = 4
    task_offset: float = 32.0
    hidden: tuple[int, ...] = (64, 64)
    init_gain: float = 4.0
    init_mode: str = "independent"  # shared | independent | both
    independent_base: str = "reference"  # reference | own_init
    epochs: int = 40
    shared_epochs: int | None = None
    lr: float = 0.05
    batch_size: int = 32
    methods: tuple[MethodConfig, ...] = field(default_factory=_default_methods)
    probe_size: int = 512
    seed: int = 0
    order_seed: int = 0
    spectrum_method: str = "linear"
    output_dir: str = "toy_output"
    plots: bool = True

    def __post_init__(self):
        if self.n_tasks < 2:
            raise SchemaError("n_tasks must be >= 2")
        if self.init_mode not in INIT_MODES + ("both",):
            raise SchemaError(f"init_mode must be shared, independent, or both; got {self.init_mode!r}")
        if self.independent_base not in ("reference", "own_init"):
            raise SchemaError("independent_base must be 'reference' or 'own_init'")
        if self.spectrum_method not in METHODS:
            raise SchemaError(f"unknown spectrum_method {self.spectrum_method!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.probe_size < 3:
            raise SchemaError("need lr > 0, epochs >= 0, batch_size >= 1, probe_size >= 3")
        if not self.methods:
            raise SchemaError("at least one merge method is required")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.n_classes)

    @property
    def modes(self) -> tuple[str, ...]:
        return INIT_MODES if self.init_mode == "both" else (self.init_mode,)

    def method(self, name: str) -> MethodConfig:
        for m in self.methods:
            if m.name == name:
                return m
        return MethodConfig(name)

    def tasks(self) -> list[ToyTaskSpec]:
        return [
            ToyTaskSpec(
                seed=derive_seed(self.seed, "task", i) % (1 << 32),
                input_dim=self.input_dim,
                n_classes=self.n_classes,
                n_train=self.n_train,
                n_eval=self.n_eval,
                separation=self.separation,
                clusters_per_class=self.clusters_per_class,
                offset=self.task_offset,
            )
            for i in range(self.n_tasks)
        ]

    # -- JSON ---------------------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise SchemaError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise SchemaError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(raw)
        if "hidden" in kw:
            kw["hidden"] = tuple(int(h) for h in kw["hidden"])
        if "methods" in kw:
            kw["methods"] = tuple(_parse_method(name, opts) for name, opts in _method_items(kw["methods"]))
        try:
            return cls(**kw)
        except TypeError as exc:
            raise SchemaError(str(exc)) from None
        except ArgumentError as exc:
            raise SchemaError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | PathLike) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["methods"] = {
            m.name: {k: v for k, v in (("density", m.density), ("lambda", m.lam), ("drop_prob", m.drop_prob))
                     if m.name != "linear" and not (k == "drop_prob" and m.name == "ties")}
            for m in self.methods
        }
        return d


def _method_items(raw) -> Iterable[tuple[str, dict]]:
    if isinstance(raw, dict):
        return raw.items()
    if isinstance(raw, list):
        return [(m, {}) if isinstance(m, str) else (m.get("name"), {k: v for k, v in m.items() if k != "name"}) for m in raw]
    raise SchemaError("methods must be an object or a list")


def _parse_method(name: str, opts: dict) -> MethodConfig:
    opts = dict(opts or {})
    allowed = {"linear": set(), "ties": {"density", "lambda"}, "dare_ties": {"density", "lambda", "drop_prob"}}
    if name not in allowed:
        raise SchemaError(f"unknown merge method {name!r}")
    extra = set(opts) - allowed[name]
    if extra:
        raise SchemaError(f"method {name!r} does not accept {sorted(extra)}")
    if "lambda" in opts:
        opts["lam"] = opts.pop("lambda")
    try:
        return MethodConfig(name, **opts)
    except ArgumentError as exc:
        raise SchemaError(str(exc)) from None


# -- experts --------------------------------------------------------------------

@dataclass
class ExpertSet:
    """Trained experts plus what task-vector methods need as their base."""

    init_mode: str
    tasks: list[ToyTaskSpec]
    data: list[ToyDataset]
    experts: list[ToyModel]
    inits: list[ToyModel]
    base: ToyModel  # shared init, or the designated reference init
    independent_base: str = "reference"

    def expert_accuracy(self, i: int) -> float:
        d = self.data[i]
        return evaluate(self.experts[i], d.eval_x, d.eval_y).accuracy


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train_experts(
    tasks: Sequence[ToyTaskSpec],
    init_mode: str,
    config: ExperimentConfig,
    threads: int = 1,
) -> ExpertSet:
    """One expert per task, from a common init (shared) or per-task inits (independent)."""
    if init_mode not in INIT_MODES:
        raise ArgumentError(f"init_mode must be one of {INIT_MODES}")
    sizes = config.sizes
    data = [generate_task(t) for t in tasks]
    shared_init = init_model(sizes, derive_seed(config.seed, "shared_init") % (1 << 32), config.init_gain)
    if init_mode == "shared":
        inits = [shared_init] * len(tasks)
        base = shared_init
        epochs = config.shared_epochs if config.shared_epochs is not None else config.epochs
    else:
        inits = [init_model(sizes, derive_seed(config.seed, "init", t.seed) % (1 << 32), config.init_gain) for t in tasks]
        base = init_model(sizes, derive_seed(config.seed, "reference_init") % (1 << 32), config.init_gain)
        epochs = config.epochs

    def fit(i: int) -> ToyModel:
        d = data[i]
        seed = derive_seed(config.seed, "train", init_mode, tasks[i].seed) % (1 << 32)
        log.debug("training %s expert for task %d", init_mode, i)
        try:
            res = train(inits[i], d.train_x, d.train_y, epochs, config.lr, seed, config.batch_size)
        except TrainingError as exc:
            raise TrainingError(f"{init_mode} expert for task {i}: {exc}") from None
        return ToyModel(res.model.sizes, res.model.params.with_metadata(task=str(i), init_mode=init_mode))

    experts = _pmap(fit, list(range(len(tasks))), threads)
    return ExpertSet(init_mode, list(tasks), data, experts, inits, base, config.independent_base)


def merge_models(es: ExpertSet, idx: Sequence[int], method: MethodConfig, seed: int) -> ToyModel:
    """Merge ``es.experts[idx]`` with one method; DARE masks keyed by ``seed``."""
    models = [es.experts[i] for i in idx]
    sizes = models[0].sizes
    if method.name == "linear":
        return ToyModel(sizes, linear_merge([m.params for m in models]))
    if es.init_mode == "independent" and es.independent_base == "own_init":
        base = linear_merge([es.inits[i].params for i in idx])
        tvs = [task_vector(es.experts[i].params, es.inits[i].params) for i in idx]
    else:
        base = es.base.params
        tvs = [task_vector(m.params, base) for m in models]
    ties = TiesConfig(method.density, method.lam)
    if method.name == "ties":
        return ToyModel(sizes, ties_merge_vectors(base, tvs, ties))
    return ToyModel(sizes, dare_ties_merge_vectors(base, tvs, DareConfig(method.drop_prob, seed), ties))


# -- pairwise experiment ----------------------------------------------------------

@dataclass
class ExperimentRecord:
    pair_id: str
    task_a: int
    task_b: int
    init_mode: str
    chance: float
    expert_acc: tuple[float, float]
    merged_acc: dict[str, tuple[float, float]]
    deltas: dict[str, DeltaRecord]
    similarity: SimilarityReport

    def measure(self, name: str) -> float | None:
        return getattr(self.similarity, name)


def probe_set(a: ToyTaskSpec, b: ToyTaskSpec, size: int, seed: int) -> np.ndarray:
    """``size`` fresh items, half from each task, fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    xa, _ = sample_task(a, size // 2, rng)
    xb, _ = sample_task(b, size - size // 2, rng)
    return np.vstack([xa, xb])


def capture_activations(model: ToyModel, probe: np.ndarray, probe_id: str) -> ActivationSet:
    _, acts = forward(model, probe)
    return ActivationSet(acts, probe_id)


def _pair_record(es: ExpertSet, i: int, j: int, config: ExperimentConfig, expert_acc: list[float]) -> ExperimentRecord:
    ta, tb = es.tasks[i], es.tasks[j]
    da, db = es.data[i], es.data[j]
    pair_id = f"{es.init_mode}:{i}-{j}"
    merged_acc: dict[str, tuple[float, float]] = {}
    deltas: dict[str, DeltaRecord] = {}
    for m in config.methods:
        merged = merge_models(es, (i, j), m, derive_seed(config.seed, "dare", pair_id) % (1 << 63))
        acc = (evaluate(merged, da.eval_x, da.eval_y).accuracy, evaluate(merged, db.eval_x, db.eval_y).accuracy)
        merged_acc[m.name] = acc
        deltas[m.name] = merge_delta((expert_acc[i], expert_acc[j]), acc, pair=(str(i), str(j)))

    report = parametric_diff(es.experts[i].params, es.experts[j].params)
    probe_seed = derive_seed(config.seed, "probe", ta.seed, tb.seed) % (1 << 63)
    probe = probe_set(ta, tb, config.probe_size, probe_seed)
    probe_id = f"probe:{probe_seed}"
    prof = cka_profile(
        capture_activations(es.experts[i], probe, probe_id),
        capture_activations(es.experts[j], probe, probe_id),
    )
    for layer, v in enumerate(prof.per_layer):
        report.layer(layer).cka = v
    return ExperimentRecord(pair_id, i, j, es.init_mode, ta.chance, (expert_acc[i], expert_acc[j]), merged_acc, deltas, report)



def pairwise_records(es: ExpertSet, config: ExperimentConfig, threads: int = 1) -> list[ExperimentRecord]:
    expert_acc = [es.expert_accuracy(i) for i in range(len(es.experts))]
    pairs = list(itertools.combinations(range(len(es.tasks)), 2))
    return _pmap(lambda p: _pair_record(es, p[0], p[1], config, expert_acc), pairs, threads)


def run_pairwise_experiment(
    tasks: Sequence[ToyTaskSpec],
    init_mode: str,
    methods: Sequence[str | MethodConfig] | None = None,
    config: ExperimentConfig | None = None,
    threads: int = 1,
) -> list[ExperimentRecord]:
    """Train one expert per task and merge every unordered pair with each method."""
    if len(tasks) < 2:
        raise ArgumentError("need at least two tasks")
    config = config or ExperimentConfig(n_tasks=len(tasks))
    if methods is not None:
        config = replace(config, methods=tuple(m if isinstance(m, MethodConfig) else config.method(m) for m in methods))
    modes = INIT_MODES if init_mode == "both" else (init_mode,)
    records: list[ExperimentRecord] = []
    for mode in modes:
        es = train_experts(tasks, mode, config, threads)
        records.extend(pairwise_records(es, config, threads))
    return records


# -- spectrum ---------------------------------------------------------------------

@dataclass(frozen=True)
class SpectrumRow:
    k: int
    task: int
    accuracy: float
    in_merge: bool


def merge_order(n: int, order_seed: int) -> list[int]:
    return [int(i) for i in np.random.default_rng(order_seed).permutation(n)]


def spectrum_from_experts(es: ExpertSet, order_seed: int, method: MethodConfig, seed: int = 0) -> list[SpectrumRow]:
    """Cumulative equal-weight merges of the first k experts in a seeded order.

    k = 1 is the first expert on its own. Each merged model is evaluated on
    every task.
    """
    order = merge_order(len(es.experts), order_seed)
    rows: list[SpectrumRow] = []
    for k in range(1, len(order) + 1):
        idx = order[:k]
        model = es.experts[idx[0]] if k == 1 else merge_models(es, idx, method, derive_seed(seed, "spectrum", k) % (1 << 63))
        for t, d in enumerate(es.data):
            rows.append(SpectrumRow(k, t, evaluate(model, d.eval_x, d.eval_y).accuracy, t in idx))
    return rows


def spectrum_experiment(
    tasks: Sequence[ToyTaskSpec],
    order_seed: int,
    method: str | MethodConfig = "linear",
    config: ExperimentConfig | None = None,
    init_mode: str = "independent",
    threads: int = 1,
) -> list[SpectrumRow]:
    if len(tasks) < 2:
        raise ArgumentError("need at least two tasks")
    config = config or ExperimentConfig(n_tasks=len(tasks))
    m = method if isinstance(method, MethodConfig) else config.method(method)
    es = train_experts(tasks, init_mode, config, threads)
    return spectrum_from_experts(es, order_seed, m, config.seed)


def spectrum_summary(rows: Sequence[SpectrumRow]) -> dict[int, float]:
    """Mean accuracy over the tasks already in the merge, per k."""
    out: dict[int, list[float]] = {}
    for r in rows:
        if r.in_merge:
            out.setdefault(r.k, []).append(r.accuracy)
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


# -- checkpoint-wise trajectory (mixed vs merged over training) --------------------

@dataclass(frozen=True)
class TrajectoryRow:
    epoch: int
    model: str  # "mixed" or "merged"
    task: int
    accuracy: float


def trajectory_experiment(config: ExperimentConfig, eval_every: int = 1, threads: int = 1) -> list[TrajectoryRow]:
    """Train independent experts and one mixed-data model side by side.

    At every ``eval_every`` epochs the current expert checkpoints are merged
    linearly and compared, task by task, with the mixed model at the same
    point of training.
    """
    tasks = config.tasks()
    data = [generate_task(t) for t in tasks]
    sizes = config.sizes
    experts = [init_model(sizes, derive_seed(config.seed, "init", t.seed) % (1 << 32), config.init_gain) for t in tasks]
    mixed = init_model(sizes, derive_seed(config.seed, "mixed_init") % (1 << 32), config.init_gain)
    mix_x = np.vstack([d.train_x for d in data])
    mix_y = np.concatenate([d.train_y for d in data])
    rows: list[TrajectoryRow] = []
    for epoch in range(1, config.epochs + 1):
        def step(i: int) -> ToyModel:
            d = data[i]
            return train(experts[i], d.train_x, d.train_y, 1, config.lr, derive_seed(config.seed, "traj", i, epoch) % (1 << 32), config.batch_size).model

        experts = _pmap(step, list(range(len(tasks))), threads)
        # one pass over the pooled data per epoch: the mixed model sees n_tasks times more items
        mixed = train(mixed, mix_x, mix_y, 1, config.lr, derive_seed(config.seed, "traj_mixed", epoch) % (1 << 32), config.batch_size).model
        if epoch % eval_every and epoch != config.epochs:
            continue
        merged = ToyModel(sizes, linear_merge([e.params for e in experts]))
        for t, d in enumerate(data):
            rows.append(TrajectoryRow(epoch, "mixed", t, evaluate(mixed, d.eval_x, d.eval_y).accuracy))
            rows.append(TrajectoryRow(epoch, "merged", t, evaluate(merged, d.eval_x, d.eval_y).accuracy))
    return rows


# -- similarity vs delta ----------------------------------------------------------

def cka_delta_study(
    records: Sequence[ExperimentRecord],
    method: str = "linear",
    measures: Sequence[str] = MEASURES,
    permutation: bool = False,
    seed: int = 0,
) -> dict[str, CorrelationReport]:
    """Correlate each similarity measure with -delta (positive = similar pairs merge better)."""
    if len(records) < 3:
        raise ArgumentError("need at least 3 records")
    out = {}
    for name in measures:
        pairs = [(r.measure(name), -r.deltas[method].delta) for r in records]
        pairs = [(m, d) for m, d in pairs if m is not None]
        out[name] = correlate_measures(pairs, permutation=permutation, seed=seed)
    return out


# -- CSV ------------------------------------------------------------------------------

RECORD_COLUMNS = (
    "pair_id", "init_mode", "task_a", "task_b", "method", "chance",
    "expert_acc_a", "expert_acc_b", "merged_acc_a", "merged_acc_b", "delta",
    "mean_cosine", "mean_stable_rank_diff", "mean_l2_diff", "mean_cka",
)
SPECTRUM_COLUMNS = ("k", "task", "accuracy", "in_merge")
TRAJECTORY_COLUMNS = ("epoch", "model", "task", "accuracy")


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def records_to_csv(records: Sequence[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        sim = r.similarity
        for method, d in r.deltas.items():
            w.writerow([
                r.pair_id, r.init_mode, r.task_a, r.task_b, method, _num(r.chance),
                _num(d.expert_scores[0]), _num(d.expert_scores[1]),
                _num(d.merged_scores[0]), _num(d.merged_scores[1]), _num(d.delta),
                _num(sim.mean_cosine), _num(sim.mean_stable_rank_diff), _num(sim.mean_l2_diff), _num(sim.mean_cka),
            ])
    return buf.getvalue()


def read_records_csv(text: str) -> list[dict[str, Any]]:
    """Rows of a records CSV with numeric columns parsed (empty -> None)."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != RECORD_COLUMNS:
        raise SchemaError(f"records CSV must have columns {', '.join(RECORD_COLUMNS)}")
    rows = []
    for row in reader:
        parsed: dict[str, Any] = {}
        for k, v in row.items():
            if k in ("pair_id", "init_mode", "method"):
                parsed[k] = v
            elif k in ("task_a", "task_b"):
                parsed[k] = int(v)
            else:
                try:
                    parsed[k] = float(v) if v != "" else None
                except ValueError:
                    raise SchemaError(f"column {k}: {v!r} is not a number") from None
        rows.append(parsed)
    return rows


def spectrum_to_csv(rows: Sequence[SpectrumRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPECTRUM_COLUMNS)
    for r in rows:
        w.writerow([r.k, r.task, repr(r.accuracy), int(r.in_merge)])
    return buf.getvalue()


def read_spectrum_csv(text: str) -> list[SpectrumRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != SPECTRUM_COLUMNS:
        raise SchemaError(f"spectrum CSV must have columns {', '.join(SPECTRUM_COLUMNS)}")
    try:
        return [SpectrumRow(int(r["k"]), int(r["task"]), float(r["accuracy"]), bool(int(r["in_merge"]))) for r in reader]
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad spectrum row: {exc}") from None


def trajectory_to_csv(rows: Sequence[TrajectoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for r in rows:
        w.writerow([r.epoch, r.model, r.task, repr(r.accuracy)])
    return buf.getvalue()
