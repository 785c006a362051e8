"""Training, inference-evaluation and sweep protocols with CSV/JSON result emission."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import ConfigError, ExperimentMode, ExperimentSpec, TileConfig, TileMode, get_path, scale_path, to_dict
from .compounds import optimizer_kind
from .data import Dataset, batches, load_idx_dataset, synthetic_blobs
from .nn import AnalogMLP
from .numerics import RandomStream

METRICS_HEADER = ("run_id", "seed", "time_s", "metric", "value")


@dataclass(frozen=True)
class ResultRecord:
    run_id: str
    seed: int
    time_s: float | None
    metric: str
    value: float


# ------------------------------------------------------------------ builders


def load_dataset(spec: ExperimentSpec) -> Dataset:
    ds = spec.dataset
    if ds.kind == "mnist_idx":
        return load_idx_dataset(ds.path, ds.train_subset, ds.test_subset)
    data = synthetic_blobs(ds.n_samples, ds.n_features, ds.n_classes, ds.spread, RandomStream(spec.seed, "blobs"))
    if ds.train_subset:
        data.x_train, data.y_train = data.x_train[: ds.train_subset], data.y_train[: ds.train_subset]
    if ds.test_subset:
        data.x_test, data.y_test = data.x_test[: ds.test_subset], data.y_test[: ds.test_subset]
    return data


def tile_for(spec: ExperimentSpec, mode: ExperimentMode, tile: TileConfig | None = None) -> TileConfig:
    """Tile configuration implied by a training mode."""
    tile = copy.deepcopy(tile or spec.tile)
    if mode == ExperimentMode.train_fp:
        tile.mode = TileMode.digital
    elif mode == ExperimentMode.train_inmemory:
        tile.mode = TileMode.training
        tile.compound.kind = optimizer_kind(spec.optimizer.name)
    elif mode == ExperimentMode.train_hwa:
        tile.mode = TileMode.inference
    else:
        raise ConfigError(f"mode: {mode.value} is not a training mode")
    return tile


def build_model(spec: ExperimentSpec, tile: TileConfig, seed: int) -> AnalogMLP:
    dtype = np.float64 if spec.dtype == "float64" else np.float32
    return AnalogMLP(spec.network.widths, spec.network.activations, tile, RandomStream(seed, "model"), dtype)


def learning_rate(spec: ExperimentSpec, epoch: int) -> float:
    o = spec.optimizer
    return o.lr * o.decay_factor ** sum(epoch >= e for e in o.decay_epochs)


def _check_shapes(spec: ExperimentSpec, data: Dataset) -> None:
    w = spec.network.widths
    if data.n_features != w[0]:
        raise ConfigError(f"network.widths[0]: {w[0]} does not match dataset features ({data.n_features})")
    if data.n_classes > w[-1]:
        raise ConfigError(f"network.widths[-1]: {w[-1]} is smaller than the number of classes ({data.n_classes})")


# ------------------------------------------------------------------ training


def train_model(
    spec: ExperimentSpec,
    mode: ExperimentMode,
    seed: int,
    data: Dataset | None = None,
    tile: TileConfig | None = None,
    run_id: str | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[AnalogMLP, list[ResultRecord]]:
    data = data or load_dataset(spec)
    _check_shapes(spec, data)
    tile = tile_for(spec, mode, tile)
    model = build_model(spec, tile, seed)
    run_id = run_id or f"{spec.name}/seed{seed}"
    order_stream = RandomStream(seed, "order")
    records = []
    n = len(data.y_train)
    for epoch in range(spec.optimizer.epochs):
        lr = learning_rate(spec, epoch)
        model.train()
        loss_sum = correct = 0.0
        for idx in batches(n, spec.optimizer.batch_size, order_stream.child(epoch)):
            res = model.train_step(data.x_train[idx], data.y_train[idx], lr)
            loss_sum += res.loss * len(idx)
            correct += res.correct
        model.eval()
        test_acc = model.accuracy(data.x_test, data.y_test)
        tag = f"epoch{epoch + 1:03d}"
        records += [
            ResultRecord(run_id, seed, None, f"{tag}.train_loss", loss_sum / n),
            ResultRecord(run_id, seed, None, f"{tag}.train_accuracy", correct / n),
            ResultRecord(run_id, seed, None, f"{tag}.test_accuracy", test_acc),
        ]
        if log:
            log(f"{run_id} epoch {epoch + 1}: loss {loss_sum / n:.4f} test {test_acc:.4f}")
    model.eval()
    final = model.accuracy(data.x_test, data.y_test)
    records.append(ResultRecord(run_id, seed, None, "final.test_accuracy", final))
    return model, records


def _train_job(args):
    spec, mode, seed = args
    model, records = train_model(spec, mode, seed)
    return model.state_dict(), records


def _map(fn, jobs: list, workers: int) -> list:
    """Run jobs in order; results come back in job order regardless of ``workers``."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _seeds(spec: ExperimentSpec) -> list[int]:
    return list(spec.eval.seeds) or [spec.seed]


def run_train(spec: ExperimentSpec, workers: int = 1) -> tuple[list[ResultRecord], dict, list[dict]]:
    """Train one model per seed. Returns records, summary and per-seed checkpoints."""
    mode = spec.mode if spec.mode != ExperimentMode.infer_eval else spec.train_mode
    jobs = [(spec, mode, s) for s in _seeds(spec)]
    out = _map(_train_job, jobs, workers)
    records = [r for _, recs in out for r in recs]
    finals = [r.value for r in records if r.metric == "final.test_accuracy"]
    summary = {
        "mode": mode.value,
        "seeds": _seeds(spec),
        "final_test_accuracy": finals,
        "mean": float(np.mean(finals)),
        "std": float(np.std(finals)),
    }
    records += _aggregate_records(spec.name, finals, None, "final.test_accuracy")
    return records, summary, [state for state, _ in out]


def _aggregate_records(run_id, values, time_s, metric) -> list[ResultRecord]:
    return [
        ResultRecord(run_id, -1, time_s, f"{metric}.mean", float(np.mean(values))),
        ResultRecord(run_id, -1, time_s, f"{metric}.std", float(np.std(values))),
    ]


# ------------------------------------------------------------ inference eval


def save_checkpoint(path: str | Path, states: list[dict] | dict, spec: ExperimentSpec | None = None) -> None:
    doc = {"format": "crossbar-sim-checkpoint/1", "models": states if isinstance(states, list) else [states]}
    if spec is not None:
        doc["spec"] = to_dict(spec)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: checkpoint not found")
    doc = json.loads(p.read_text())
    if doc.get("format") != "crossbar-sim-checkpoint/1":
        raise ValueError(f"{p}: not a crossbar-sim checkpoint")
    return doc["models"]


def _eval_job(args):
    spec, state, seed, rep = args
    data = load_dataset(spec)
    tile = tile_for(spec, ExperimentMode.train_hwa)
    model = build_model(spec, tile, seed)
    model.load_state_dict(state)
    model.eval()
    base = RandomStream(seed, "infer-eval").child(rep)
    out = []
    if tile.noise_enabled:
        model.program_analog_weights(base.child("program"))
    for t in spec.eval.time_grid:
        if tile.noise_enabled:
            model.drift_analog_weights(t, base.child("drift", repr(t)))
        # the same forward-noise stream at every time point
        model.reseed(base.child("forward"))
        out.append((t, model.accuracy(data.x_test, data.y_test)))
    return out


def evaluate_states(spec: ExperimentSpec, states: list[dict], workers: int = 1) -> tuple[list[ResultRecord], dict]:
    seeds = _seeds(spec)
    if len(states) not in (1, len(seeds)):
        raise ValueError("need one checkpoint model, or one per seed")
    jobs = [
        (spec, states[i if len(states) > 1 else 0], s, r)
        for i, s in enumerate(seeds)
        for r in range(spec.eval.repetitions)
    ]
    results = _map(_eval_job, jobs, workers)
    records = []
    per_time: dict[float, list[float]] = {t: [] for t in spec.eval.time_grid}
    for (_, _, seed, rep), res in zip(jobs, results):
        for t, acc in res:
            records.append(ResultRecord(f"{spec.name}/rep{rep}", seed, t, "test_accuracy", acc))
            per_time[t].append(acc)
    for t in spec.eval.time_grid:
        records += _aggregate_records(spec.name, per_time[t], t, "test_accuracy")
    summary = {
        "time_grid": spec.eval.time_grid,
        "repetitions": spec.eval.repetitions,
        "seeds": seeds,
        "mean": [float(np.mean(per_time[t])) for t in spec.eval.time_grid],
        "std": [float(np.std(per_time[t])) for t in spec.eval.time_grid],
    }
    return records, summary


def run_infer_eval(spec: ExperimentSpec, workers: int = 1) -> tuple[list[ResultRecord], dict, list[dict]]:
    """Program, drift and evaluate a trained model over the time grid."""
    if spec.checkpoint:
        states = load_checkpoint(spec.checkpoint)
        train_records = []
    else:
        train_spec = copy.deepcopy(spec)
        train_spec.mode = spec.train_mode
        train_records, _, states = run_train(train_spec, workers)
    records, summary = evaluate_states(spec, states, workers)
    return train_records + records, summary, states


# --------------------------------------------------------------------- sweep


def swept_tile(spec: ExperimentSpec, factor: float) -> TileConfig:
    tile = copy.deepcopy(spec.tile)
    for path in spec.sweep.parameters:
        get_path(tile, path)
        scale_path(tile, path, factor)
    return tile


def _sweep_job(args):
    spec, factor, seed = args
    tile = swept_tile(spec, factor)
    _, records = train_model(spec, spec.sweep.train_mode, seed, tile=tile, run_id=f"{spec.name}/factor{factor:g}/seed{seed}")
    return records


def run_sweep(spec: ExperimentSpec, workers: int = 1) -> tuple[list[ResultRecord], dict, list[dict]]:
    """Train once per (factor, seed) with the swept parameters multiplied by the factor."""
    for path in spec.sweep.parameters:
        get_path(spec.tile, path)
    seeds = _seeds(spec)
    jobs = [(spec, f, s) for f in spec.sweep.factors for s in seeds]
    results = _map(_sweep_job, jobs, workers)
    records = [r for recs in results for r in recs]
    finals: dict[float, list[float]] = {f: [] for f in spec.sweep.factors}
    for (_, f, _), recs in zip(jobs, results):
        finals[f].append(next(r.value for r in recs if r.metric == "final.test_accuracy"))
    for f in spec.sweep.factors:
        records += _aggregate_records(f"{spec.name}/factor{f:g}", finals[f], None, "final.test_accuracy")
    summary = {
        "parameters": spec.sweep.parameters,
        "factors": spec.sweep.factors,
        "seeds": seeds,
        "mean": [float(np.mean(finals[f])) for f in spec.sweep.factors],
        "std": [float(np.std(finals[f])) for f in spec.sweep.factors],
    }
    return records, summary, []


# -------------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def metrics_csv(records: Iterable[ResultRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.run_id, r.seed, _fmt(r.time_s), r.metric, _fmt(float(r.value))])
    return buf.getvalue()


def write_outputs(out_dir: str | Path, records: list[ResultRecord], summary: dict, states: list[dict] | None = None,
                  spec: ExperimentSpec | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(records))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if states:
        save_checkpoint(out / "checkpoint.json", states, spec)


def read_metrics(path: str | Path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        ResultRecord(r["run_id"], int(r["seed"]), float(r["time_s"]) if r["time_s"] else None, r["metric"], float(r["value"]))
        for r in rows
    ]


RUNNERS = {
    ExperimentMode.train_fp: run_train,
    ExperimentMode.train_inmemory: run_train,
    ExperimentMode.train_hwa: run_train,
    ExperimentMode.infer_eval: run_infer_eval,
    ExperimentMode.sweep: run_sweep,
}


def run(spec: ExperimentSpec, workers: int = 1):
    return RUNNERS[spec.mode](spec, workers)
