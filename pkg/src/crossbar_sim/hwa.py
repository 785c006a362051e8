"""Hardware-aware training transforms.

Weight modifiers perturb the analog weights used in the forward pass of a
training step.  Clipping and remapping run after each optimizer step to keep
the analog weights in range.  Input ranges clip each tile's inputs; they are
either learned with a straight-through gradient or calibrated after
training from cached activations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .mvm import quantize
from .numerics import RandomStream


class ModifierType(str, enum.Enum):
    NONE = "NONE"
    DISCRETIZE = "DISCRETIZE"
    MULT_NORMAL = "MULT_NORMAL"
    ADD_NORMAL = "ADD_NORMAL"
    POLY = "POLY"
    PROG_NOISE = "PROG_NOISE"


class ClipType(str, enum.Enum):
    NONE = "NONE"
    FIXED_VALUE = "FIXED_VALUE"
    LAYER_GAUSSIAN = "LAYER_GAUSSIAN"


class RemapType(str, enum.Enum):
    NONE = "NONE"
    LAYERWISE_SYMMETRIC = "LAYERWISE_SYMMETRIC"
    CHANNELWISE_SYMMETRIC = "CHANNELWISE_SYMMETRIC"


@dataclass
class ModifierParams:
    type: ModifierType = ModifierType.NONE
    std_dev: float = 0.0
    res: float = 0.0
    sto_round: bool = False
    pdrop: float = 0.0
    coeffs: list[float] = field(default_factory=lambda: [0.26348, 1.9650, -1.1731])
    rel_to_actual_wmax: bool = True
    assumed_wmax: float = 1.0
    per_batch_sample: bool = False
    enable_during_test: bool = False

    def __post_init__(self):
        self.type = ModifierType(self.type)
        if not 0 <= self.pdrop <= 1:
            raise ValueError("pdrop must lie in [0, 1]")
        if self.type == ModifierType.DISCRETIZE and self.res <= 0:
            raise ValueError("DISCRETIZE needs res > 0")
        if self.std_dev < 0 or self.assumed_wmax <= 0:
            raise ValueError("std_dev must be >= 0 and assumed_wmax > 0")

    @property
    def active(self) -> bool:
        return self.type != ModifierType.NONE or self.pdrop > 0


@dataclass
class ClipRemapParams:
    clip_type: ClipType = ClipType.NONE
    fixed_value: float = 1.0
    sigma: float = 2.5
    remap_type: RemapType = RemapType.NONE
    remapped_wmax: float = 1.0

    def __post_init__(self):
        self.clip_type = ClipType(self.clip_type)
        self.remap_type = RemapType(self.remap_type)
        if self.fixed_value < 0:
            raise ValueError("fixed_value must be non-negative (0 disables it for LAYER_GAUSSIAN)")
        if self.clip_type == ClipType.FIXED_VALUE and self.fixed_value == 0:
            raise ValueError("FIXED_VALUE clipping needs fixed_value > 0")
        if self.clip_type == ClipType.LAYER_GAUSSIAN and self.sigma <= 0:
            raise ValueError("LAYER_GAUSSIAN needs sigma > 0")
        if self.remapped_wmax <= 0:
            raise ValueError("remapped_wmax must be positive")


def _wmax(w: np.ndarray, p: ModifierParams) -> float:
    if p.rel_to_actual_wmax:
        m = float(np.max(np.abs(w), initial=0.0))
        return m if m > 0 else 1.0
    return p.assumed_wmax


def _modify_once(w: np.ndarray, p: ModifierParams, stream: RandomStream) -> np.ndarray:
    t = p.type
    if t == ModifierType.NONE:
        out = w.copy()
    elif t == ModifierType.ADD_NORMAL:
        out = w + p.std_dev * stream.gaussian(w.shape, dtype=np.float32)
    elif t == ModifierType.MULT_NORMAL:
        out = w * (1 + p.std_dev * stream.gaussian(w.shape, dtype=np.float32))
    elif t == ModifierType.DISCRETIZE:
        omega = _wmax(w, p)
        out = quantize(w, omega, p.res, p.sto_round, stream)
    else:
        omega = _wmax(w, p)
        rel = np.abs(w) / omega
        poly = np.polynomial.polynomial.polyval(rel, p.coeffs)
        out = w + p.std_dev * poly * stream.gaussian(w.shape, dtype=np.float32)
        if t == ModifierType.PROG_NOISE:
            out = np.abs(out) * np.sign(w)
    if p.pdrop > 0:
        out = np.where(stream.bernoulli(p.pdrop, w.shape), 0, out)
    return out.astype(w.dtype, copy=False)


def modify_weights(
    w: np.ndarray, p: ModifierParams, stream: RandomStream, batch_size: int | None = None
) -> np.ndarray:
    """Perturbed copy of ``w`` for one training forward pass.

    With ``per_batch_sample`` and a ``batch_size`` the result has shape
    ``(batch_size, *w.shape)`` holding independent draws per sample.
    """
    if p.per_batch_sample and batch_size is not None:
        return np.stack([_modify_once(w, p, stream) for _ in range(batch_size)])
    return _modify_once(w, p, stream)


def clip_weights(w: np.ndarray, p: ClipRemapParams) -> np.ndarray:
    if p.clip_type == ClipType.NONE:
        return w
    if p.clip_type == ClipType.FIXED_VALUE:
        return np.clip(w, -p.fixed_value, p.fixed_value)
    bound = p.sigma * float(np.std(w))
    if p.fixed_value > 0:
        bound = min(bound, p.fixed_value)
    return np.clip(w, -bound, bound)


def remap_weights(
    w: np.ndarray, scales: np.ndarray | float, p: ClipRemapParams
) -> tuple[np.ndarray, np.ndarray]:
    """Move magnitude between analog weights and per-output-channel digital scales.

    ``w`` is ``out x in`` and ``scales`` has one entry per output (row); the
    represented weight ``scales[:, None] * w`` is preserved.  All-zero
    channels are left as they are.
    """
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (w.shape[0],)).copy()
    if p.remap_type == RemapType.NONE:
        return w, scales
    if p.remap_type == RemapType.LAYERWISE_SYMMETRIC:
        m = np.full(w.shape[0], float(np.max(np.abs(w), initial=0.0)))
    else:
        m = np.max(np.abs(w), axis=1, initial=0.0).astype(np.float64)
    safe = m > 0
    factor = np.where(safe, p.remapped_wmax / np.where(safe, m, 1.0), 1.0)
    w_new = (w * factor[:, None]).astype(w.dtype)
    return w_new, scales / factor


@dataclass
class InputRangeParams:
    enabled: bool = False
    init_value: float = 3.0
    init_from_data: int = 10
    init_std_alpha: float = 3.0
    decay: float = 0.01
    input_min_percentage: float = 0.95
    gradient_relative: bool = True
    learning_rate_scale: float = 1.0
    manage_output_clipping: bool = False

    def __post_init__(self):
        if not 0 < self.input_min_percentage <= 1:
            raise ValueError("input_min_percentage must lie in (0, 1]")
        if self.init_from_data < 0 or self.init_value <= 0:
            raise ValueError("init_from_data must be >= 0 and init_value > 0")
        if self.manage_output_clipping:
            raise ValueError("manage_output_clipping is not supported")


_WARMUP_MOMENTUM = 0.9
_MIN_RANGE = 1e-6


@dataclass
class InputRangeState:
    value: float
    batches_seen: int = 0
    last_clip_fraction: float = 0.0


def input_range_warmup(state: InputRangeState, inputs: np.ndarray, p: InputRangeParams) -> bool:
    """Moving-average initialization; returns True while still warming up."""
    if state.batches_seen >= p.init_from_data:
        return False
    target = p.init_std_alpha * float(np.std(inputs))
    if target > 0:
        if state.batches_seen == 0:
            state.value = target
        else:
            state.value = _WARMUP_MOMENTUM * state.value + (1 - _WARMUP_MOMENTUM) * target
    state.batches_seen += 1
    return True


def input_range_gradient(ir: float, inputs: np.ndarray, grad_inputs: np.ndarray, p: InputRangeParams) -> tuple[float, float]:
    """Gradient of the loss w.r.t. the input range, and the clipped fraction.

    ``grad_inputs`` is the loss gradient with respect to the clipped input.
    Clipped positions only ever widen the range (their contributions are
    kept where they are negative); the decay term is the only force that
    tightens it, and only while fewer than ``1 - input_min_percentage`` of
    the inputs are clipped.
    """
    clipped = np.abs(inputs) >= ir
    frac = float(np.mean(clipped)) if inputs.size else 0.0
    grad = float(np.sum(np.minimum(grad_inputs[clipped] * np.sign(inputs[clipped]), 0.0)))
    if frac < 1 - p.input_min_percentage:
        grad += ir * p.decay
    if p.gradient_relative:
        grad *= ir
    return grad, frac


def input_range_update(ir: float, inputs: np.ndarray, grad_inputs: np.ndarray, p: InputRangeParams, lr: float) -> float:
    grad, _ = input_range_gradient(ir, inputs, grad_inputs, p)
    return max(ir - lr * p.learning_rate_scale * grad, _MIN_RANGE)


def clip_inputs(x: np.ndarray, ir: float) -> np.ndarray:
    return np.clip(x, -ir, ir)


class InputRangeCalibrator:
    """Collects absolute activations of one tile and turns them into an input range."""

    def __init__(self, quantile: float, max_samples: int, stream: RandomStream,
                 moving_average: bool = False, momentum: float = 0.9):
        if not 0.5 < quantile <= 1:
            raise ValueError("quantile must lie in (0.5, 1]")
        if max_samples < 1:
            raise ValueError("max_samples must be >= 1")
        self.quantile = quantile
        self.max_samples = max_samples
        self.moving_average = moving_average
        self.momentum = momentum
        self.stream = stream
        self.cache = np.zeros(0, dtype=np.float64)
        self.estimate: float | None = None
        self.n_batches = 0

    def add(self, activations: np.ndarray) -> None:
        a = np.abs(np.asarray(activations, dtype=np.float64)).reshape(-1)
        if a.size == 0:
            return
        self.n_batches += 1
        if self.moving_average:
            q = float(np.quantile(a, self.quantile))
            self.estimate = q if self.estimate is None else self.momentum * self.estimate + (1 - self.momentum) * q
            return
        merged = np.concatenate([self.cache, a])
        if merged.size > self.max_samples:
            keep = self.stream.permutation(merged.size)[: self.max_samples]
            merged = merged[keep]
        self.cache = merged

    def value(self) -> float:
        if self.n_batches == 0:
            raise ValueError("no calibration data provided")
        if self.moving_average:
            return float(self.estimate)
        return float(np.quantile(self.cache, self.quantile))


def calibrate_input_ranges(
    model,
    data,
    quantile: float = 0.995,
    max_samples: int = 1000,
    moving_average: bool = False,
    stream: RandomStream | None = None,
) -> list[float]:
    """Set every tile's input range to a quantile of its cached inputs.

    ``model`` must provide ``tile_inputs(batch)`` returning, for each tile, the
    inputs it sees in evaluation mode, and ``set_tile_input_ranges(values)``.
    """
    stream = stream or RandomStream(0, "calibration")
    calibrators = None
    for batch in data:
        per_tile = model.tile_inputs(batch)
        if calibrators is None:
            calibrators = [
                InputRangeCalibrator(quantile, max_samples, stream.child(k), moving_average)
                for k in range(len(per_tile))
            ]
        for cal, acts in zip(calibrators, per_tile):
            cal.add(acts)
    if calibrators is None:
        raise ValueError("no calibration data provided")
    values = [max(c.value(), _MIN_RANGE) for c in calibrators]
    model.set_tile_input_ranges(values)
    return values
