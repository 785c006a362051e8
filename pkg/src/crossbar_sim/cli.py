"""Command line entry point: ``crossbar-sim <command> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
import tomli

from .config import ConfigError, ExperimentMode, from_dict, load_spec
from .devices import DeviceParams, simulate_response, standard_protocol
from .experiments import ResultRecord, metrics_csv, run_infer_eval, run_sweep, run_train, write_outputs
from .fitting import fit_device, fit_fragment, mean_response, read_measurement, write_fit_toml
from .numerics import RandomStream

TRAIN_MODES = (ExperimentMode.train_fp, ExperimentMode.train_inmemory, ExperimentMode.train_hwa)


def _load(args):
    spec = load_spec(args.config)
    base = Path(args.config).resolve().parent
    if spec.dataset.path and not Path(spec.dataset.path).is_absolute():
        spec.dataset.path = str(base / spec.dataset.path)
    if spec.checkpoint and not Path(spec.checkpoint).is_absolute():
        spec.checkpoint = str(base / spec.checkpoint)
    if args.seed is not None:
        spec.seed = args.seed
        spec.eval.seeds = [args.seed]
    return spec


def cmd_train(args) -> None:
    spec = _load(args)
    if spec.mode not in TRAIN_MODES:
        spec = copy.deepcopy(spec)
        spec.mode = spec.train_mode
    records, summary, states = run_train(spec, args.workers)
    write_outputs(args.out, records, summary, states, spec)
    print(f"final test accuracy {summary['mean']:.4f} +- {summary['std']:.4f}")


def cmd_infer_eval(args) -> None:
    spec = _load(args)
    if args.checkpoint:
        spec.checkpoint = str(Path(args.checkpoint).resolve())
    records, summary, states = run_infer_eval(spec, args.workers)
    write_outputs(args.out, records, summary, states if not spec.checkpoint else None, spec)
    for t, m, s in zip(summary["time_grid"], summary["mean"], summary["std"]):
        print(f"t={t:g}s accuracy {m:.4f} +- {s:.4f}")


def cmd_sweep(args) -> None:
    spec = _load(args)
    records, summary, _ = run_sweep(spec, args.workers)
    write_outputs(args.out, records, summary)
    for f, m, s in zip(summary["factors"], summary["mean"], summary["std"]):
        print(f"factor {f:g}: accuracy {m:.4f} +- {s:.4f}")


def _table(args, name: str) -> dict:
    with open(args.config, "rb") as fh:
        doc = tomli.load(fh)
    table = doc.get(name, {})
    if not isinstance(table, dict):
        raise ConfigError(f"{name}: expected a table")
    return doc, table


def cmd_fit_device(args) -> None:
    """``[fit]`` table: ``measurement`` (CSV), ``kind``, ``dtod``."""
    _, fit = _table(args, "fit")
    if "measurement" not in fit:
        raise ConfigError("fit.measurement: value required")
    unknown = set(fit) - {"measurement", "kind", "dtod"}
    if unknown:
        raise ConfigError(f"fit.{sorted(unknown)[0]}: unknown field")
    path = Path(fit["measurement"])
    if not path.is_absolute():
        path = Path(args.config).resolve().parent / path
    meas = read_measurement(path)
    result = fit_device(meas.weights, meas.directions, fit.get("kind", "SoftBounds"), fit.get("dtod", 0.1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fit_toml(out / "fitted_device.toml", result, meas)
    pred = mean_response(result.params, meas.directions, result.w0)
    with open(out / "fit_response.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pulse_index", "measured", "fitted"])
        for i, (a, b) in enumerate(zip(meas.weights, pred)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    records = [ResultRecord("fit", -1, None, "rms", result.rms)]
    records += [ResultRecord("fit", -1, None, k, float(v)) for k, v in fit_fragment(result).items() if k != "kind"]
    (out / "metrics.csv").write_text(metrics_csv(records))
    summary = {"converged": result.converged, "rms": result.rms, "device": fit_fragment(result), "w0": result.w0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"fit rms {result.rms:.4g} (converged {result.converged}) -> {out / 'fitted_device.toml'}")


def cmd_plot_response(args) -> None:
    """``[tile.device]`` plus optional ``[response]``: ``n_up``, ``n_down``, ``n_pairs``, ``n_devices``, ``w0``."""
    doc, resp = _table(args, "response")
    device = from_dict(DeviceParams, doc.get("tile", {}).get("device", {}), "tile.device")
    unknown = set(resp) - {"n_up", "n_down", "n_pairs", "n_devices", "w0"}
    if unknown:
        raise ConfigError(f"response.{sorted(unknown)[0]}: unknown field")
    protocol = standard_protocol(resp.get("n_up", 200), resp.get("n_down", 200), resp.get("n_pairs", 100))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    trace = simulate_response(device, protocol, RandomStream(seed, "response"), resp.get("n_devices", 1), resp.get("w0"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pulse_index", "weight"])
    mean = trace.mean(axis=1)
    for i, v in enumerate(mean):
        w.writerow([i, repr(float(v))])
    (out / "response.csv").write_text(buf.getvalue())
    records = [
        ResultRecord("response", seed, None, "weight_max", float(mean.max())),
        ResultRecord("response", seed, None, "weight_min", float(mean.min())),
        ResultRecord("response", seed, None, "weight_final", float(mean[-1])),
    ]
    (out / "metrics.csv").write_text(metrics_csv(records))
    _plot(out / "response.png", protocol, trace)
    print(f"wrote {len(mean)} pulses to {out / 'response.csv'}")


def _plot(path: Path, protocol, trace: np.ndarray) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(trace, lw=0.8)
    ax.set_xlabel("pulse index")
    ax.set_ylabel("weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {
    "train": cmd_train,
    "infer-eval": cmd_infer_eval,
    "sweep": cmd_sweep,
    "fit-device": cmd_fit_device,
    "plot-response": cmd_plot_response,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crossbar-sim", description="Analog crossbar training and inference simulator.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML configuration file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, help="override the seed (and eval seeds)")
    ap.add_argument("--workers", type=int, default=1, help="worker processes for seeds, repetitions and sweep points")
    ap.add_argument("--checkpoint", help="infer-eval: trained model checkpoint.json")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
