"""Seeded experiment runs and result files.

Every component draws from its own generator, derived from the run seed by
``SeedSequence([seed, k])`` with a fixed counter ``k`` per component (see
``SUBSEED``). Toggling one component therefore never shifts another's draws;
in particular the outer-loop buffer draw of a CBA run does not disturb the
inner-loop draws it shares with the matching baseline run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bilevel import BilevelState, StepRecord, StepRngs, cba_train_step, draw_train_batch, remember
from .buffer import MemoryBuffer, buffer_sample
from .methods import MethodConfig, baseline_train_step
from .metrics import (
    compute_ACC,
    compute_ACC_AUC,
    compute_FM,
    evaluate_model,
    gradient_alignment,
    new_accuracy_matrix,
)
from .nn import ModelSpec, classifier_forward, init_params
from .streams import (
    TaskStream,
    gen_gaussian_mixture,
    load_dataset,
    online_iterator,
    permute_task_order,
    split_blurry,
    split_disjoint,
)

log = logging.getLogger(__name__)

SUBSEED = {"data": 0, "split": 1, "init": 2, "shuffle": 3, "buffer": 4}
METRICS = ("ACC", "FM", "ACC_AUC_raw", "ACC_AUC_norm")


def subseed(seed: int, component: str) -> int:
    return int(np.random.SeedSequence([seed, SUBSEED[component]]).generate_state(1)[0])


@dataclass
class RunConfig:
    method: str = "er"
    use_cba: bool = False
    tasks: int = 5
    blurry_K: float | None = None
    epochs: int = 1
    batch: int = 20
    alpha: float = 0.03
    beta: float = 0.3
    M: int = 500
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    dataset: str = "synthetic"
    task_order: list[int] | None = None
    eval_interval: int = 5
    out: str = "results"
    diag: bool = False
    backbone_widths: list[int] = field(default_factory=lambda: [64])
    cba_hidden: int = 256
    test_fraction: float = 0.2
    # synthetic benchmark
    classes: int = 10
    dim: int = 16
    n_per_class: int = 500
    separation: float = 6.0
    spread: float = 1.5
    workers: int = 0  # 0 = one per available core
    poison_seeds: list[int] = field(default_factory=list)  # test hook: NaN-inject these seeds

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.M < 0:
            raise ValueError(f"M must be >= 0, got {self.M}")
        if self.eval_interval < 1:
            raise ValueError(f"eval interval must be >= 1, got {self.eval_interval}")
        if self.blurry_K is not None and not 0 <= self.blurry_K < 100:
            raise ValueError(f"blurry K must be in [0, 100), got {self.blurry_K}")
        if self.epochs < 1 or self.batch < 1 or self.tasks < 1:
            raise ValueError("epochs, batch and tasks must all be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be nonnegative")
        self.method_config()

    def method_config(self) -> MethodConfig:
        return MethodConfig(self.method, self.use_cba, self.alpha, self.beta)

    def echo(self) -> dict:
        """Effective configuration minus execution-only fields."""
        d = asdict(self)
        for k in ("out", "workers", "poison_seeds"):
            d.pop(k)
        return d


@dataclass
class SeedResult:
    seed: int
    matrix: np.ndarray
    trace_steps: list[int] = field(default_factory=list)
    trace_acc: list[float] = field(default_factory=list)
    trace_task_acc: list[list[float]] = field(default_factory=list)  # per seen task, per sample
    diag: list[StepRecord] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    params: object = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RunResult:
    config: RunConfig
    seeds: list[SeedResult]

    @property
    def succeeded(self) -> list[SeedResult]:
        return [s for s in self.seeds if s.ok]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in METRICS:
            vals = np.array([s.metrics[m] for s in self.succeeded])
            if vals.size == 0:
                out[m] = (math.nan, math.nan)
            else:
                std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
                out[m] = (float(np.mean(vals)), std)
        return out


def build_stream(cfg: RunConfig, seed: int) -> TaskStream:
    if cfg.dataset == "synthetic":
        data = gen_gaussian_mixture(cfg.classes, cfg.dim, cfg.n_per_class, cfg.separation,
                                    cfg.spread, seed=subseed(seed, "data"))
    else:
        data = load_dataset(cfg.dataset)
    split_seed = subseed(seed, "split")
    if cfg.blurry_K is not None:
        stream = split_blurry(data, cfg.tasks, cfg.blurry_K, cfg.test_fraction, split_seed)
    else:
        stream = split_disjoint(data, cfg.tasks, cfg.test_fraction, split_seed)
    if cfg.task_order is not None:
        stream = permute_task_order(stream, cfg.task_order)
    stream.epochs_per_task = cfg.epochs
    return stream


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    """One full pass over the stream; failures are captured, not raised."""
    result = SeedResult(seed, new_accuracy_matrix(cfg.tasks))
    try:
        _run_seed(cfg, seed, result)
    except Exception as exc:  # noqa: BLE001 - crash isolation across seeds
        log.error("seed %d failed: %s", seed, exc)
        result.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return result


def _run_seed(cfg: RunConfig, seed: int, result: SeedResult) -> None:
    stream = build_stream(cfg, seed)
    T = len(stream)
    spec = ModelSpec(stream.tasks[0].train_X.shape[1], stream.class_count,
                     tuple(cfg.backbone_widths), cfg.cba_hidden, seed=subseed(seed, "init"))
    method = cfg.method_config()
    state = BilevelState(init_params(spec), cfg.alpha, cfg.beta)
    buffer = MemoryBuffer(cfg.M)
    rngs = StepRngs.from_seed(subseed(seed, "buffer"))
    test_sets = stream.test_sets
    current = 0
    poisoned = seed in cfg.poison_seeds

    def close_task(t: int) -> None:
        result.matrix[: t + 1, t] = evaluate_model(state.params.classifier(), test_sets[: t + 1])

    for step, sb in enumerate(online_iterator(stream, cfg.batch, seed=subseed(seed, "shuffle")), 1):
        while current < sb.task:
            close_task(current)
            current += 1
        batch = sb.batch
        if poisoned:
            batch.x = np.full_like(batch.x, np.nan)
        if cfg.use_cba:
            state, record = cba_train_step(state, batch, buffer, rngs, method, cfg.batch, cfg.diag)
        else:
            state, record = _baseline_step(state, batch, buffer, rngs, method, cfg)
        if cfg.diag:
            result.diag.append(record)
        if step % cfg.eval_interval == 0:
            accs = evaluate_model(state.params.classifier(), test_sets[: current + 1])
            result.trace_steps.append(step)
            result.trace_acc.append(float(np.mean(accs)))
            result.trace_task_acc.append([float(a) for a in accs])
    for t in range(current, T):
        close_task(t)

    raw, norm = compute_ACC_AUC(result.trace_steps, result.trace_acc, cfg.eval_interval) \
        if result.trace_steps else (math.nan, math.nan)
    result.metrics = {
        "ACC": compute_ACC(result.matrix),
        "FM": compute_FM(result.matrix),
        "ACC_AUC_raw": raw,
        "ACC_AUC_norm": norm,
    }
    result.params = state.params


def _baseline_step(state: BilevelState, batch, buffer, rngs: StepRngs, method: MethodConfig, cfg: RunConfig):
    step = state.step + 1
    trn = draw_train_batch(batch, buffer, cfg.batch, method, rngs.inner)
    before = state.params
    params, loss = baseline_train_step(before, trn, method, step)
    record = StepRecord(step, loss, outer_skipped=True)
    if cfg.diag and len(buffer):
        buf2 = buffer_sample(buffer, cfg.batch, rngs.outer, batch.x.shape[1])
        with ad.no_record():
            record.outer_loss = ad.cross_entropy(classifier_forward(params, buf2.x), buf2.y).item()
        diag = gradient_alignment(before, trn, buf2, method)
        record.align_ip, record.trn_grad_sq = diag.inner_product, diag.trn_grad_sq
    state = BilevelState(params, state.alpha, state.beta, step)
    remember(buffer, batch, params, method, rngs.reservoir)
    return state, record


def run_experiment(cfg: RunConfig) -> RunResult:
    cfg.validate()
    workers = cfg.workers or os.cpu_count() or 1
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfg.seeds))) as pool:
            seeds = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        seeds = [run_seed(cfg, s) for s in cfg.seeds]
    return RunResult(cfg, seeds)


# ---------------------------------------------------------------------------
# result files


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_results(result: RunResult, out: str | os.PathLike | None = None) -> Path:
    """Write summary.csv, matrix_/trace_/diag_<seed>.csv and config.echo."""
    cfg = result.config
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    method, cba = cfg.method, int(cfg.use_cba)
    T = cfg.tasks

    rows = []
    for s in result.seeds:
        rows.append([method, cba, s.seed] + [_fmt(s.metrics.get(m, math.nan)) for m in METRICS])
        _write_csv(out / f"matrix_{s.seed}.csv", ["task"] + [f"after_task_{j + 1}" for j in range(T)],
                   [[f"task_{i + 1}"] + [_fmt(v) for v in s.matrix[i]] for i in range(T)])
        _write_csv(out / f"trace_{s.seed}.csv", ["step", "avg_acc"],
                   [[st, _fmt(a)] for st, a in zip(s.trace_steps, s.trace_acc)])
        if cfg.diag:
            _write_csv(out / f"diag_{s.seed}.csv",
                       ["step", "inner_loss", "outer_loss", "align_ip", "trn_grad_sq"],
                       [[r.step, _fmt(r.inner_loss), _fmt(r.outer_loss), _fmt(r.align_ip),
                         _fmt(r.trn_grad_sq)] for r in s.diag])
        marker = out / f"FAILED_{s.seed}"
        if not s.ok:
            marker.write_text(s.error + "\n", encoding="utf-8")
        elif marker.exists():
            marker.unlink()
    agg = result.aggregate()
    rows.append([method, cba, "mean"] + [_fmt(agg[m][0]) for m in METRICS])
    rows.append([method, cba, "std"] + [_fmt(agg[m][1]) for m in METRICS])
    _write_csv(out / "summary.csv", ["method", "cba", "seed", *METRICS], rows)
    (out / "config.echo").write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    return out


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) if v else math.nan for v in row[1:]] for row in rows[1:]])
