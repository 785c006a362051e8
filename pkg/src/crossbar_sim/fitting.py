"""Fit a pulsed device model to a measured conductance response.

The measurement is a sequence of up/down pulses with the conductance read
after each pulse.  Conductances are first mapped to normalized weights.
The noise-free mean response of the model is then fitted to the trace by
nonlinear least squares over ``dw_min``, ``up_down``, the bounds and the
unknown starting weight.  The cycle-to-cycle spread is estimated afterwards
from the residual spread of the individual steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .devices import DeviceKind, DeviceParams, step_shape

# parameters fitted for every model kind, plus the model-specific shape ones
_BASE = ("dw_min", "up_down", "w_max", "w_min")
_SHAPE = {
    DeviceKind.ConstantStep: (),
    DeviceKind.SoftBounds: (),
    DeviceKind.SoftBoundsReference: (),
    DeviceKind.LinearStep: ("gamma",),
    DeviceKind.PowStep: ("gamma",),
    DeviceKind.ExpStep: ("c0", "c1"),
}

_STARTS = {k: [{}] for k in _SHAPE}
_STARTS[DeviceKind.LinearStep] = _STARTS[DeviceKind.PowStep] = [{"gamma": g} for g in (0.3, 1.0, 3.0)]
_STARTS[DeviceKind.ExpStep] = [{"c0": c0, "c1": c1} for c0 in (0.0, 0.5) for c1 in (0.5, 2.0)]


@dataclass
class Measurement:
    directions: np.ndarray
    conductance: np.ndarray  # uS
    weights: np.ndarray  # normalized
    g_center: float
    g_half_range: float


@dataclass
class FitResult:
    params: DeviceParams
    w0: float
    rms: float
    converged: bool
    message: str = ""
    c2c_estimate: float = 0.0
    values: dict = field(default_factory=dict)


def read_measurement(path: str | Path) -> Measurement:
    """Read ``pulse_index,direction,conductance_uS`` rows (sorted by pulse index)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"pulse_index", "direction", "conductance_uS"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            rows.append((int(r["pulse_index"]), int(float(r["direction"])), float(r["conductance_uS"])))
    if not rows:
        raise ValueError(f"{path}: no measurements")
    rows.sort()
    directions = np.array([r[1] for r in rows])
    if not np.all(np.isin(directions, (1, -1))):
        raise ValueError(f"{path}: direction must be +1 or -1")
    g = np.array([r[2] for r in rows])
    return normalize_measurement(directions, g)


def normalize_measurement(directions: np.ndarray, g: np.ndarray) -> Measurement:
    """Map conductances linearly so that the observed range becomes [-1, 1]."""
    g = np.asarray(g, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    if hi - lo <= 0:
        raise ValueError("constant conductance trace cannot be fitted")
    center, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return Measurement(np.asarray(directions, int), g, (g - center) / half, center, half)


def write_measurement(path: str | Path, directions, conductance) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pulse_index", "direction", "conductance_uS"])
        for i, (d, g) in enumerate(zip(directions, conductance)):
            w.writerow([i, int(d), f"{g:.6f}"])


def mean_response(params: DeviceParams, directions: np.ndarray, w0: float) -> np.ndarray:
    """Noise-free weight after each pulse of ``directions`` for a single nominal device."""
    b_max, b_min = params.w_max, params.w_min
    up_step = params.dw_min * (1 + params.up_down)
    down_step = params.dw_min * (1 - params.up_down)
    w = float(np.clip(w0, b_min, b_max))
    out = np.empty(len(directions))
    for t, d in enumerate(directions):
        if d > 0:
            w = w + up_step * float(step_shape(params, w, True, b_max, b_min))
        else:
            w = w - down_step * float(step_shape(params, w, False, b_max, b_min))
        w = min(max(w, b_min), b_max)
        out[t] = w
    return out


def _initial_guess(kind: DeviceKind, weights: np.ndarray, directions: np.ndarray) -> dict:
    dw = np.diff(np.concatenate([[weights[0]], weights]))
    near = np.abs(weights) < 0.5
    up = np.abs(dw[(directions > 0) & near])
    down = np.abs(dw[(directions < 0) & near])
    up_m = float(np.median(up)) if up.size else float(np.median(np.abs(dw)))
    down_m = float(np.median(down)) if down.size else up_m
    dw_min = max(0.5 * (up_m + down_m), 1e-4)
    ud = float(np.clip((up_m - down_m) / (up_m + down_m + 1e-12), -0.9, 0.9))
    guess = {
        "dw_min": dw_min,
        "up_down": ud,
        "w_max": max(float(weights.max()) * 1.1, 0.05),
        "w_min": min(float(weights.min()) * 1.1, -0.05),
        "gamma": 1.0,
        "c0": 0.5,
        "c1": 1.0,
    }
    if kind == DeviceKind.ConstantStep:
        guess["w_max"], guess["w_min"] = float(weights.max()), float(weights.min())
    return guess


def _bounds(name: str):
    return {
        "dw_min": (1e-6, 1.0),
        "up_down": (-0.95, 0.95),
        "w_max": (1e-3, 10.0),
        "w_min": (-10.0, -1e-3),
        "gamma": (1e-3, 10.0),
        "c0": (-10.0, 0.99),
        "c1": (1e-3, 20.0),
        "w0": (-10.0, 10.0),
    }[name]


def fit_device(
    weights: np.ndarray,
    directions: np.ndarray,
    kind: DeviceKind | str = DeviceKind.SoftBounds,
    dtod: float = 0.1,
    max_nfev: int = 2000,
) -> FitResult:
    """Least-squares fit of the mean response of ``kind`` to a normalized trace.

    ``weights[t]`` is the (normalized) weight read after pulse ``t`` and
    ``directions[t]`` is +1 or -1.  ``dtod`` is written into the result as
    the assumed device-to-device spread (a single trace cannot reveal it).
    """
    kind = DeviceKind(kind)
    if kind not in _SHAPE:
        raise ValueError(f"fitting is not supported for {kind.value}")
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    directions = np.asarray(directions).reshape(-1)
    if weights.shape != directions.shape or weights.size < 4:
        raise ValueError("need matching weights/directions with at least 4 pulses")
    if np.ptp(weights) == 0:
        raise ValueError("constant trace cannot be fitted")
    guess = _initial_guess(kind, weights, directions)
    names = list(_BASE) + list(_SHAPE[kind]) + ["w0"]
    guess["w0"] = float(weights[0])
    lo = np.array([_bounds(n)[0] for n in names])
    hi = np.array([_bounds(n)[1] for n in names])

    def make(x) -> tuple[DeviceParams, float]:
        v = dict(zip(names, x))
        kw = {n: v[n] for n in names if n != "w0"}
        return DeviceParams(kind=kind, dw_min_std=0.0, dw_min_dtod=0.0, **kw), v["w0"]

    def residual(x):
        try:
            p, w0 = make(x)
        except ValueError:
            return np.full(weights.shape, 10.0)
        return mean_response(p, directions, w0) - weights

    # shape parameters get a few starts: clipping at the bounds leaves local minima
    sol = None
    for start in _STARTS[kind]:
        x0 = np.clip([{**guess, **start}[n] for n in names], lo + 1e-9, hi - 1e-9)
        trial = least_squares(residual, x0, bounds=(lo, hi), x_scale="jac", max_nfev=max_nfev)
        if sol is None or trial.cost < sol.cost:
            sol = trial
    params, w0 = make(sol.x)
    pred = mean_response(params, directions, w0)
    rms = float(np.sqrt(np.mean((pred - weights) ** 2)))
    c2c = estimate_c2c(params, directions, weights)
    params.dw_min_std = c2c
    params.dw_min_dtod = dtod
    params.w_max_std = params.w_min_std = dtod
    return FitResult(params, float(w0), rms, bool(sol.success), sol.message, c2c, dict(zip(names, sol.x.tolist())))


def estimate_c2c(params: DeviceParams, directions: np.ndarray, weights: np.ndarray) -> float:
    """Cycle-to-cycle spread relative to the model step, away from the bounds.

    Step residuals are ``c2c_t + r_t - r_(t-1)`` with ``r`` white read noise, so
    the read noise shows up as a negative lag-1 covariance, ``-var(r)``.
    ``var + 2 cov`` leaves the cycle-to-cycle variance alone.
    """
    prev = weights[:-1]
    obs = np.diff(weights)
    d = directions[1:]
    expected = np.where(
        d > 0,
        params.dw_min * (1 + params.up_down) * step_shape(params, prev, True, params.w_max, params.w_min),
        -params.dw_min * (1 - params.up_down) * step_shape(params, prev, False, params.w_max, params.w_min),
    )
    ok = np.abs(expected) > 0.3 * params.dw_min
    if ok.sum() < 4:
        return 0.0
    e = obs - expected
    pair = ok[:-1] & ok[1:]
    var = float(np.mean(e[ok] ** 2))
    cov = float(np.mean(e[:-1][pair] * e[1:][pair])) if pair.any() else 0.0
    c2c_var = max(var + 2 * min(cov, 0.0), 0.0)
    return float(np.sqrt(c2c_var / np.mean(expected[ok] ** 2)))


def fit_fragment(result: FitResult) -> dict:
    """Plain dict for a ``[tile.device]`` TOML table."""
    p = result.params
    frag = {
        "kind": p.kind.value,
        "dw_min": round(float(p.dw_min), 6),
        "up_down": round(float(p.up_down), 6),
        "w_max": round(float(p.w_max), 6),
        "w_min": round(float(p.w_min), 6),
        "dw_min_std": round(float(p.dw_min_std), 6),
        "dw_min_dtod": round(float(p.dw_min_dtod), 6),
        "w_max_std": round(float(p.w_max_std), 6),
        "w_min_std": round(float(p.w_min_std), 6),
    }
    for name in _SHAPE[p.kind]:
        frag[name] = round(float(getattr(p, name)), 6)
    return frag


def write_fit_toml(path: str | Path, result: FitResult, meas: Measurement | None = None) -> None:
    import tomli_w

    doc = {"tile": {"device": fit_fragment(result)}}
    header = f"# fitted device: rms {result.rms:.4g}, converged {result.converged}\n"
    if meas is not None:
        header += f"# weight = (g - {meas.g_center:.4f} uS) / {meas.g_half_range:.4f} uS\n"
    Path(path).write_text(header + tomli_w.dumps(doc))
