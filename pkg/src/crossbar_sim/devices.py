"""Pulsed device response models with device-to-device and cycle-to-cycle variation.

Weights are in normalized conductance units.  A single pulse moves a device
by ``s * delta * f_s(w)`` where ``s`` is the direction (+1 up, -1 down),
``delta`` the (noisy) step size of that device and ``f_s`` the shape of the
response, normalized so that ``f_s(0) = 1``.  With that normalization
``dw_min`` is always the mean step at zero weight.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import FLOAT, RandomStream


class DeviceKind(str, enum.Enum):
    ConstantStep = "ConstantStep"
    LinearStep = "LinearStep"
    SoftBounds = "SoftBounds"
    SoftBoundsReference = "SoftBoundsReference"
    PowStep = "PowStep"
    ExpStep = "ExpStep"
    PiecewiseStep = "PiecewiseStep"


# realized step sizes and bound magnitudes never go below this fraction of the mean
_FLOOR = 0.01


@dataclass
class DeviceParams:
    """Mean device response plus its variation.

    ``dw_min_std`` is the cycle-to-cycle spread of a pulse, relative to the
    device's step.  ``dw_min_dtod``, ``w_max_std`` and ``w_min_std`` are
    relative device-to-device spreads drawn once per array.  ``up_down``
    makes up steps ``(1 + up_down)`` and down steps ``(1 - up_down)`` times
    the step size.  ``reference``/``reference_std`` (absolute units) set the
    weight subtracted at read time for ``SoftBoundsReference``.
    """

    kind: DeviceKind = DeviceKind.SoftBounds
    dw_min: float = 0.001
    dw_min_std: float = 0.3
    dw_min_dtod: float = 0.3
    w_max: float = 1.0
    w_min: float = -1.0
    w_max_std: float = 0.0
    w_min_std: float = 0.0
    up_down: float = 0.0
    up_down_dtod: float = 0.0
    gamma: float = 1.0
    c0: float = 0.5
    c1: float = 1.0
    nodes: list[float] = field(default_factory=lambda: [1.0, 1.0])
    nodes_down: list[float] | None = None
    reference: float = 0.0
    reference_std: float = 0.0

    def __post_init__(self):
        self.kind = DeviceKind(self.kind)
        self.nodes = [float(v) for v in self.nodes]
        if self.nodes_down is not None:
            self.nodes_down = [float(v) for v in self.nodes_down]
        self.validate()

    def validate(self) -> None:
        if not (self.w_min < 0 < self.w_max):
            raise ValueError(f"need w_min < 0 < w_max, got {self.w_min}, {self.w_max}")
        if self.dw_min <= 0:
            raise ValueError("dw_min must be positive")
        for name in ("dw_min_std", "dw_min_dtod", "w_max_std", "w_min_std", "up_down_dtod", "reference_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if abs(self.up_down) >= 1:
            raise ValueError("|up_down| must be < 1")
        if self.kind == DeviceKind.ExpStep and not self.c0 < 1:
            raise ValueError("ExpStep needs c0 < 1")
        if self.kind == DeviceKind.PiecewiseStep:
            for nodes in (self.nodes, self.nodes_down or self.nodes):
                if len(nodes) < 2 or min(nodes) < 0:
                    raise ValueError("PiecewiseStep needs at least 2 non-negative node values")
            if _piecewise_at(np.asarray(self.nodes), self.w_min, self.w_max, 0.0) <= 0:
                raise ValueError("PiecewiseStep node value at w=0 must be positive")

    @property
    def n_states(self) -> float:
        """Conductance range divided by the step size at zero."""
        return (self.w_max - self.w_min) / self.dw_min


def _piecewise_at(nodes: np.ndarray, lo, hi, w):
    """Linear interpolation of node values spaced evenly on ``[lo, hi]``."""
    k = len(nodes) - 1
    pos = np.clip((np.asarray(w) - lo) / (np.asarray(hi) - lo), 0.0, 1.0) * k
    idx = np.minimum(np.floor(pos).astype(int), k - 1)
    q = pos - idx
    return (1 - q) * nodes[idx] + q * nodes[idx + 1]


def step_shape(params: DeviceParams, w, up: bool, b_max, b_min):
    """Response shape ``f(w) >= 0`` of a pulse in the given direction (``f(0) = 1``)."""
    kind = params.kind
    if kind == DeviceKind.ConstantStep:
        return np.ones(np.shape(w))
    if kind in (DeviceKind.SoftBounds, DeviceKind.SoftBoundsReference):
        f = 1 - w / (b_max if up else b_min)
    elif kind == DeviceKind.LinearStep:
        f = 1 - params.gamma * w / (b_max if up else b_min)
    elif kind == DeviceKind.PowStep:
        base = (b_max - w) / b_max if up else (w - b_min) / -b_min
        f = np.maximum(base, 0) ** params.gamma
    elif kind == DeviceKind.ExpStep:
        # the exponent sign flips with direction so both directions saturate
        e = np.exp(params.c1 * w) if up else np.exp(-params.c1 * w)
        f = (1 - params.c0 * e) / (1 - params.c0)
    elif kind == DeviceKind.PiecewiseStep:
        if up:
            nodes = np.asarray(params.nodes)
        else:
            nodes = np.asarray(params.nodes_down if params.nodes_down is not None else params.nodes[::-1])
        norm = _piecewise_at(nodes, params.w_min, params.w_max, 0.0)
        f = _piecewise_at(nodes, b_min, b_max, w) / norm
    else:  # pragma: no cover
        raise ValueError(f"unknown device kind {kind}")
    return np.maximum(f, 0)


def _bound_draw(mean: float, rel_std: float, shape, stream: RandomStream) -> np.ndarray:
    """``mean * (1 + rel_std * xi)``, kept on the sign of ``mean`` and away from zero."""
    if rel_std == 0:
        return np.full(shape, mean, dtype=np.float64)
    draw = mean * (1 + rel_std * stream.gaussian(shape))
    floor = _FLOOR * abs(mean)
    return np.maximum(draw, floor) if mean > 0 else np.minimum(draw, -floor)


class DeviceArray:
    """Realized crossbar of pulsed devices (shape ``out x in``).

    Device parameters are drawn once at construction.  ``weights`` is what a
    read returns: the device state minus the per-device reference (zero
    unless the model is ``SoftBoundsReference``).
    """

    def __init__(self, params: DeviceParams, rows: int, cols: int, stream: RandomStream):
        if rows <= 0 or cols <= 0:
            raise ValueError("rows and cols must be positive")
        params.validate()
        self.params = params
        self.shape = (rows, cols)
        shape = self.shape
        delta = _bound_draw(params.dw_min, params.dw_min_dtod, shape, stream)
        if params.up_down_dtod > 0:
            up_down = params.up_down + params.up_down_dtod * stream.gaussian(shape)
        else:
            up_down = np.full(shape, params.up_down)
        floor = _FLOOR * params.dw_min
        self.dw_up = np.maximum(delta * (1 + up_down), floor).astype(FLOAT)
        self.dw_down = np.maximum(delta * (1 - up_down), floor).astype(FLOAT)
        self.b_max = _bound_draw(params.w_max, params.w_max_std, shape, stream).astype(FLOAT)
        self.b_min = _bound_draw(params.w_min, params.w_min_std, shape, stream).astype(FLOAT)
        if params.kind == DeviceKind.SoftBoundsReference:
            ref = params.reference + params.reference_std * stream.gaussian(shape)
            self.ref = ref.astype(FLOAT)
        else:
            self.ref = np.zeros(shape, dtype=FLOAT)
        self.w = np.clip(np.zeros(shape, dtype=FLOAT) + self.ref, self.b_min, self.b_max)
        self.pulse_count = 0

    @property
    def weights(self) -> np.ndarray:
        return self.w - self.ref

    def set_weights(self, target: np.ndarray) -> None:
        """Write read-weights directly (clipped to the realized bounds)."""
        target = np.broadcast_to(np.asarray(target, dtype=FLOAT), self.shape)
        self.w = np.clip(target + self.ref, self.b_min, self.b_max).astype(FLOAT)

    def expected_step(self, w: np.ndarray, up: bool, idx=slice(None)) -> np.ndarray:
        """Noise-free step magnitude of devices ``idx`` (flat) at device state ``w``."""
        dw = (self.dw_up if up else self.dw_down).reshape(-1)[idx]
        f = step_shape(self.params, w, up, self.b_max.reshape(-1)[idx], self.b_min.reshape(-1)[idx])
        return dw * f

    def apply_pulses(self, flat_idx: np.ndarray, up: np.ndarray, stream: RandomStream) -> None:
        """Apply one pulse to each device in ``flat_idx``; ``up`` selects the direction.

        Indices must be unique within one call.
        """
        flat_idx = np.asarray(flat_idx)
        if flat_idx.size == 0:
            return
        up = np.broadcast_to(np.asarray(up, dtype=bool), flat_idx.shape)
        w = self.w.reshape(-1)
        c2c = self.params.dw_min_std
        for direction in (True, False):
            idx = flat_idx[up] if direction else flat_idx[~up]
            if idx.size == 0:
                continue
            step = self.expected_step(w[idx], direction, idx)
            if c2c > 0:
                step = step * (1 + c2c * stream.gaussian(idx.size, dtype=np.float32))
            new = w[idx] + step if direction else w[idx] - step
            w[idx] = np.clip(new, self.b_min.reshape(-1)[idx], self.b_max.reshape(-1)[idx])
        self.pulse_count += int(flat_idx.size)

    def apply_pulse_counts(self, counts: np.ndarray, up: np.ndarray, stream: RandomStream) -> None:
        """Apply ``counts[i, j]`` pulses to device ``(i, j)`` in direction ``up[i, j]``."""
        counts = np.asarray(counts).reshape(-1)
        up = np.asarray(up).reshape(-1)
        active = np.flatnonzero(counts)
        if active.size == 0:
            return
        c_act = counts[active]
        for k in range(1, int(c_act.max()) + 1):
            sel = c_act >= k
            self.apply_pulses(active[sel], up[active[sel]], stream)

    def symmetry_point(self, iterations: int = 60) -> np.ndarray:
        """Device state where the mean up and down steps cancel (per device).

        Found by bisection on ``[b_min, b_max]``; devices without a crossing
        (e.g. asymmetric constant steps) end at the bound they drift to, and
        devices whose steps cancel everywhere stay at the range center.
        """
        lo = self.b_min.astype(np.float64).reshape(-1)
        hi = self.b_max.astype(np.float64).reshape(-1)
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            net = self.expected_step(mid, True) - self.expected_step(mid, False)
            lo = np.where(net >= 0, mid, lo)
            hi = np.where(net <= 0, mid, hi)
        return (0.5 * (lo + hi)).reshape(self.shape)

    def set_reference_to_symmetry_point(self) -> None:
        """Zero-shift: make each device read zero at its symmetry point."""
        sp = self.symmetry_point().astype(FLOAT)
        weights = self.weights
        self.ref = sp
        self.set_weights(weights)


def realize_array(params: DeviceParams, rows: int, cols: int, stream: RandomStream) -> DeviceArray:
    return DeviceArray(params, rows, cols, stream)


def pulse_update(state: DeviceArray, i: int, j: int, direction: int, stream: RandomStream) -> float:
    """Apply a single pulse to device ``(i, j)`` and return its new read weight."""
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    flat = np.ravel_multi_index((i, j), state.shape)
    state.apply_pulses(np.array([flat]), np.array([direction > 0]), stream)
    return float(state.weights[i, j])


def standard_protocol(n_up: int = 200, n_down: int = 200, n_pairs: int = 100) -> np.ndarray:
    """Directions of the up/down/alternating response protocol."""
    tail = np.tile([1, -1], n_pairs)
    return np.concatenate([np.ones(n_up, int), -np.ones(n_down, int), tail]).astype(int)


def simulate_response(
    params: DeviceParams,
    protocol: Sequence[int],
    stream: RandomStream,
    n_devices: int = 1,
    w0: float | None = None,
) -> np.ndarray:
    """Read weight after every pulse of ``protocol``; shape ``(len(protocol), n_devices)``."""
    arr = DeviceArray(params, 1, n_devices, stream)
    if w0 is not None:
        arr.set_weights(np.full((1, n_devices), w0))
    protocol = np.asarray(protocol)
    trace = np.empty((len(protocol), n_devices), dtype=np.float64)
    idx = np.arange(n_devices)
    for t, direction in enumerate(protocol):
        arr.apply_pulses(idx, np.full(n_devices, direction > 0), stream)
        trace[t] = arr.weights[0]
    return trace
