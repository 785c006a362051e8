"""Non-ideal analog matrix-vector multiplication.

The forward pass of one crossbar is

    y_i = alpha * f_adc( sum_j (w_ij + s_w xi_ij) (f_dac(x_j) + s_inp xi_j) + s_out xi_i )

where ``f_dac``/``f_adc`` clip and quantize, ``alpha`` undoes the dynamic
input scaling of noise/bound management and the xi are standard normal.
All quantities are in normalized units: analog weights in [-1, 1] and
inputs at most ``inp_bound``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream


class WeightNoiseType(str, enum.Enum):
    NONE = "NONE"
    ADDITIVE_CONSTANT = "ADDITIVE_CONSTANT"
    PCM_READ = "PCM_READ"


class NoiseManagementType(str, enum.Enum):
    NONE = "NONE"
    ABS_MAX = "ABS_MAX"


class BoundManagementType(str, enum.Enum):
    NONE = "NONE"
    ITERATIVE = "ITERATIVE"


@dataclass
class IOParams:
    """Nonideality settings of one analog MVM direction (forward or backward)."""

    is_perfect: bool = False
    inp_bound: float = 1.0
    inp_res: float = 254
    inp_sto_round: bool = False
    inp_noise: float = 0.0
    out_bound: float = 10.0
    out_res: float = 254
    out_sto_round: bool = False
    out_noise: float = 0.04
    w_noise: float = 0.01
    w_noise_type: WeightNoiseType = WeightNoiseType.ADDITIVE_CONSTANT
    ir_drop: float = 1.0
    ir_drop_g_ratio: float = 571428.57
    noise_management: NoiseManagementType = NoiseManagementType.ABS_MAX
    bound_management: BoundManagementType = BoundManagementType.ITERATIVE
    max_bm_factor: int = 1000
    out_nonlinearity: float = 0.0

    def __post_init__(self):
        self.w_noise_type = WeightNoiseType(self.w_noise_type)
        self.noise_management = NoiseManagementType(self.noise_management)
        self.bound_management = BoundManagementType(self.bound_management)
        if self.inp_bound <= 0 or self.out_bound <= 0:
            raise ValueError("inp_bound and out_bound must be positive")
        for name in ("inp_noise", "out_noise", "w_noise", "ir_drop"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("inp_res", "out_res"):
            res = getattr(self, name)
            if not (res == -1 or res > 0):
                raise ValueError(f"{name} must be -1 (off) or positive, got {res}")
        if self.max_bm_factor < 1:
            raise ValueError("max_bm_factor must be >= 1")
        if self.out_nonlinearity != 0.0:
            raise ValueError("out_nonlinearity other than 0 is not supported")

    @classmethod
    def perfect(cls) -> "IOParams":
        return cls(is_perfect=True)

    @classmethod
    def ideal(cls) -> "IOParams":
        """Non-perfect pipeline with every nonideality switched off."""
        return cls(
            inp_res=-1, out_res=-1, out_noise=0.0, w_noise=0.0,
            w_noise_type=WeightNoiseType.NONE, ir_drop=0.0,
            noise_management=NoiseManagementType.NONE,
            bound_management=BoundManagementType.NONE,
            out_bound=1e12, inp_bound=1e12,
        )


def resolution_step(bound: float, res: float) -> float:
    """Grid step ``2 * bound * r`` for ``res`` given as bin width (<1) or bin count (>=1)."""
    if res <= 0:
        return 0.0
    r = res if res < 1 else 1.0 / res
    return 2.0 * bound * r


def quantize(
    z: np.ndarray,
    bound: float,
    res: float,
    stochastic: bool = False,
    stream: RandomStream | None = None,
) -> np.ndarray:
    """Clip to ``[-bound, bound]`` and round onto the uniform grid of step ``2*bound*r``.

    ``res = -1`` (or any non-positive value) disables rounding but keeps the
    clipping.  Ties round upwards, so with ``bound=1, res=0.5`` the three bins
    are ``[-1, -0.5)``, ``[-0.5, 0.5)`` and ``[0.5, 1]``.
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    z = np.clip(z, -bound, bound)
    step = resolution_step(bound, res)
    if step == 0.0:
        return z
    scaled = z / step
    if stochastic:
        if stream is None:
            raise ValueError("stochastic rounding needs a random stream")
        scaled = np.floor(scaled + stream.uniform(np.shape(z)))
    else:
        scaled = np.floor(scaled + 0.5)
    return np.clip(scaled * step, -bound, bound).astype(np.result_type(z), copy=False)


def noise_manage(x: np.ndarray, mode: NoiseManagementType | str) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic input scaling. Returns ``(x / alpha, alpha)``.

    For batches (2-d input) alpha is computed per row and returned with
    shape ``(batch, 1)``.
    """
    mode = NoiseManagementType(mode)
    x = np.asarray(x)
    if mode == NoiseManagementType.NONE:
        alpha = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    else:
        alpha = np.max(np.abs(x), axis=-1, keepdims=True)
        alpha = np.where(alpha > 0, alpha, 1).astype(x.dtype)
    if x.ndim == 1:
        return x / alpha, alpha.reshape(())
    return x / alpha, alpha


def ir_drop_profile(n_rows: int) -> np.ndarray:
    """Quadratic position weighting of the rows (ADC sits after the last row)."""
    k = np.arange(n_rows, dtype=np.float64)
    return (n_rows * (n_rows + 1) - k * (k + 1)) / (2.0 * n_rows * n_rows)


def ir_drop_perturb(weights: np.ndarray, x: np.ndarray, io: IOParams) -> np.ndarray:
    """Output correction caused by wire resistance along each column.

    Every column is treated as a differential pair of physical lines (positive
    and negative weight parts).  For each line only its average integration
    current is used, which turns the first-order solution of the resistive
    line into ``-ir_drop * n / g_ratio * c * a``, where ``c`` is the total
    line current and ``a`` the line's conductances weighted by the quadratic
    row profile.  Returns the additive correction, shaped like ``x @ W.T``.
    """
    out_shape = np.shape(x)[:-1] + (weights.shape[0],)
    if io.ir_drop == 0:
        return np.zeros(out_shape, dtype=np.result_type(weights, x))
    n = weights.shape[1]
    profile = ir_drop_profile(n).astype(weights.dtype)
    w_pos = np.maximum(weights, 0)
    w_neg = np.maximum(-weights, 0)
    c_pos = x @ w_pos.T
    c_neg = x @ w_neg.T
    a_pos = w_pos @ profile
    a_neg = w_neg @ profile
    scale = io.ir_drop * n / io.ir_drop_g_ratio
    return -scale * (c_pos * a_pos - c_neg * a_neg)


def weight_read_noise(
    weights: np.ndarray, x_dac: np.ndarray, io: IOParams, stream: RandomStream
) -> np.ndarray:
    """Output-referred short-term weight noise for one MVM."""
    out_shape = np.shape(x_dac)[:-1] + (weights.shape[0],)
    if io.w_noise_type == WeightNoiseType.NONE or io.w_noise == 0:
        return np.zeros(out_shape, dtype=weights.dtype)
    if io.w_noise_type == WeightNoiseType.ADDITIVE_CONSTANT:
        # sum_j s xi_ij x_j  ~  N(0, s^2 |x|^2)
        std = io.w_noise * np.sqrt(np.sum(np.square(x_dac), axis=-1, keepdims=True))
    else:
        std = io.w_noise * np.sqrt(np.abs(x_dac) @ np.abs(weights).T)
    return (std * stream.gaussian(out_shape, dtype=np.float32)).astype(weights.dtype, copy=False)


def _mvm_once(weights: np.ndarray, x: np.ndarray, io: IOParams, stream: RandomStream) -> np.ndarray:
    """One pass of the analog pipeline on already-scaled inputs (pre-rescale output)."""
    x_dac = quantize(x, io.inp_bound, io.inp_res, io.inp_sto_round, stream)
    if io.inp_noise > 0:
        x_dac = x_dac + io.inp_noise * stream.gaussian(x_dac.shape, dtype=np.float32)
    y = x_dac @ weights.T
    y += weight_read_noise(weights, x_dac, io, stream)
    if io.ir_drop > 0:
        y += ir_drop_perturb(weights, x_dac, io)
    if io.out_noise > 0:
        y += io.out_noise * stream.gaussian(y.shape, dtype=np.float32)
    return y


def analog_forward(
    weights: np.ndarray, x: np.ndarray, io: IOParams, stream: RandomStream
) -> np.ndarray:
    """Non-ideal MVM of ``weights`` (out x in) with ``x`` (vector or batch x in)."""
    weights = np.asarray(weights)
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"dimension mismatch: weights {weights.shape} vs input {x.shape}")
    if io.is_perfect:
        return x @ weights.T
    single = x.ndim == 1
    xb = np.atleast_2d(x).astype(weights.dtype, copy=False)

    x_scaled, alpha = noise_manage(xb, io.noise_management)
    y = _mvm_once(weights, x_scaled, io, stream)
    scale = np.ones_like(alpha)

    if io.bound_management == BoundManagementType.ITERATIVE:
        max_rounds = int(math.floor(math.log2(io.max_bm_factor)))
        for _ in range(max_rounds):
            clipped = np.any(np.abs(y) > io.out_bound, axis=1)
            if not clipped.any():
                break
            scale[clipped] *= 2
            y[clipped] = _mvm_once(weights, x_scaled[clipped] / scale[clipped], io, stream)

    y = quantize(y, io.out_bound, io.out_res, io.out_sto_round, stream)
    y = y * (alpha * scale)
    return y[0] if single else y


def bound_management_rounds(io: IOParams) -> int:
    """Maximal number of recomputations under iterative bound management."""
    return int(math.floor(math.log2(io.max_bm_factor)))
