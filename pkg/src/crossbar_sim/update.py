"""Stochastic pulse-train outer-product update of a device array.

Each row (input ``x_j``) and column (error ``d_i``) fires a train of ``BL``
pulse slots.  A device receives one pulse for every slot in which both its
row and column fire, so with firing probabilities ``px_j`` and ``pd_i`` the
expected number of pulses is ``BL * px_j * pd_i``.  The probabilities are
chosen so that this equals ``lr * |x_j| * |d_i| / dw_min``; the pulse
direction is ``-sign(x_j * d_i)``, giving ``E[dW] ~ -lr * d x^T``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .devices import DeviceArray
from .numerics import RandomStream


class PulseType(str, enum.Enum):
    StochasticCompressed = "StochasticCompressed"
    DeterministicImplicit = "DeterministicImplicit"


@dataclass
class UpdateParams:
    desired_bl: int = 31
    pulse_type: PulseType = PulseType.StochasticCompressed
    update_bl_management: bool = True
    update_management: bool = True
    x_res_implicit: float = 0.0
    d_res_implicit: float = 0.0

    def __post_init__(self):
        self.pulse_type = PulseType(self.pulse_type)
        if self.desired_bl < 1:
            raise ValueError("desired_bl must be >= 1")
        if self.x_res_implicit < 0 or self.d_res_implicit < 0:
            raise ValueError("implicit resolutions must be >= 0")


def pulse_probabilities(
    x: np.ndarray, d: np.ndarray, lr: float, dw_min: float, up: UpdateParams
) -> tuple[np.ndarray, np.ndarray, int]:
    """Row/column firing probabilities and the pulse train length.

    Update management balances the two probability vectors by the ratio of
    the absolute maxima of ``x`` and ``d``; the product ``px_j * pd_i`` does
    not change.  Update BL management shortens the train to the number of
    pulses the largest entry needs.  Probabilities are clipped at one, so
    updates that need more than ``BL`` pulses saturate.
    """
    if dw_min <= 0:
        raise ValueError("dw_min must be positive")
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ad = np.abs(np.asarray(d, dtype=np.float64))
    x_max = float(ax.max(initial=0.0))
    d_max = float(ad.max(initial=0.0))
    bl = up.desired_bl
    if lr == 0 or x_max == 0 or d_max == 0:
        return np.zeros_like(ax), np.zeros_like(ad), bl
    if up.update_bl_management:
        needed = lr * x_max * d_max / dw_min
        bl = int(min(up.desired_bl, max(1, math.ceil(needed - 1e-9))))
    scale = math.sqrt(lr / (dw_min * bl))
    k = math.sqrt(d_max / x_max) if up.update_management else 1.0
    px = np.minimum(scale * k * ax, 1.0)
    pd = np.minimum(scale / k * ad, 1.0)
    return px, pd, bl


def _implicit_counts(x, d, lr, dw_min, up: UpdateParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if up.x_res_implicit > 0:
        x = up.x_res_implicit * np.round(x / up.x_res_implicit)
    if up.d_res_implicit > 0:
        d = up.d_res_implicit * np.round(d / up.d_res_implicit)
    expected = lr * np.abs(np.outer(d, x)) / dw_min
    # round half away from zero on non-negative values
    return np.minimum(np.floor(expected + 0.5), up.desired_bl).astype(np.int64)


def coincidence_counts(
    x: np.ndarray, d: np.ndarray, lr: float, dw_min: float, up: UpdateParams, stream: RandomStream
) -> np.ndarray:
    """Number of pulses each device receives, shape ``(len(d), len(x))``."""
    if up.pulse_type == PulseType.DeterministicImplicit:
        return _implicit_counts(x, d, lr, dw_min, up)
    px, pd, bl = pulse_probabilities(x, d, lr, dw_min, up)
    if not px.any() or not pd.any():
        return np.zeros((len(pd), len(px)), dtype=np.int64)
    x_train = stream.bernoulli(px, (bl, len(px))).astype(np.float32)
    d_train = stream.bernoulli(pd, (bl, len(pd))).astype(np.float32)
    return np.rint(d_train.T @ x_train).astype(np.int64)


def pulsed_outer_update(
    state: DeviceArray,
    x: np.ndarray,
    d: np.ndarray,
    lr: float,
    up: UpdateParams,
    stream: RandomStream,
    dw_min: float | None = None,
) -> np.ndarray:
    """Rank-one pulsed update ``W += ~(-lr * d x^T)`` on ``state``.

    ``dw_min`` defaults to the device's nominal step.  Returns the pulse
    counts that were applied (useful for instrumentation).
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    x = np.asarray(x).reshape(-1)
    d = np.asarray(d).reshape(-1)
    if state.shape != (len(d), len(x)):
        raise ValueError(f"update shape {(len(d), len(x))} does not match array {state.shape}")
    dw_min = state.params.dw_min if dw_min is None else dw_min
    counts = coincidence_counts(x, d, lr, dw_min, up, stream)
    if counts.any():
        up_dir = np.outer(np.sign(d), np.sign(x)) < 0
        state.apply_pulse_counts(counts, up_dir, stream)
    return counts
