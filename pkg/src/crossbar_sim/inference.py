"""Long-term conductance corruption of programmed inference weights.

Each analog weight is stored on a pair of conductances ``(G+, G-)`` in uS.
Programming adds a state-dependent Gaussian error, every device then drifts
as ``g * (t / t0) ** -nu`` and each evaluation time draws one sample of
read noise.  A global drift compensation factor rescales the tile output
so that its one-hot response strength matches the one right after
programming.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .mvm import IOParams, analog_forward
from .numerics import RandomStream


class NoiseModelKind(str, enum.Enum):
    PCMLike = "PCMLike"
    Custom = "Custom"


# provisional PCM programming-error polynomial in g/g_max (uS)
PCM_PROG_COEFFS = (0.26348, 1.9650, -1.1731)


@dataclass
class NoiseModelParams:
    """Parameters of the statistical conductance model.

    ``t0`` defaults to 20 s for ``PCMLike`` and 1 s for ``Custom``.
    ``read_noise_scale`` multiplies the relative read noise; for
    ``PCMLike`` the relative noise additionally grows at low conductance.
    """

    kind: NoiseModelKind = NoiseModelKind.PCMLike
    g_max: float = 25.0
    prog_coeffs: list[float] = field(default_factory=lambda: list(PCM_PROG_COEFFS))
    prog_noise_scale: float = 1.0
    nu_mean: float = 0.05
    nu_std: float = 0.02
    nu_max: float = 0.2
    read_noise_scale: float = 1.0
    t0: float | None = None
    t_read: float = 250e-9

    def __post_init__(self):
        self.kind = NoiseModelKind(self.kind)
        self.prog_coeffs = [float(c) for c in self.prog_coeffs]
        if self.t0 is None:
            self.t0 = 20.0 if self.kind == NoiseModelKind.PCMLike else 1.0
        if self.g_max <= 0:
            raise ValueError("g_max must be positive")
        if self.t0 <= 0 or self.t_read <= 0:
            raise ValueError("t0 and t_read must be positive")
        if min(self.prog_noise_scale, self.nu_std, self.read_noise_scale) < 0:
            raise ValueError("noise scales must be non-negative")
        grid = np.linspace(0.0, self.g_max, 101)
        if np.any(self.prog_sigma(grid) < 0):
            raise ValueError("programming noise polynomial is negative on [0, g_max]")

    def prog_sigma(self, g: np.ndarray) -> np.ndarray:
        """Programming error std (uS) at target conductance ``g``."""
        gt = np.asarray(g, dtype=np.float64) / self.g_max
        return np.polynomial.polynomial.polyval(gt, self.prog_coeffs)


class NoiseModel:
    """Statistical conductance model; subclass and override the three hooks to customize."""

    def __init__(self, params: NoiseModelParams):
        self.params = params

    def apply_programming_noise(self, g_target: np.ndarray, stream: RandomStream) -> np.ndarray:
        p = self.params
        sigma = p.prog_noise_scale * np.maximum(p.prog_sigma(g_target), 0.0)
        g = g_target + sigma * stream.gaussian(np.shape(g_target))
        return np.maximum(g, 0.0)

    def generate_drift_coefficients(self, g_target: np.ndarray, stream: RandomStream) -> np.ndarray:
        p = self.params
        nu = p.nu_mean + p.nu_std * stream.gaussian(np.shape(g_target))
        return np.clip(nu, 0.0, p.nu_max)

    def relative_read_noise(self, g: np.ndarray) -> np.ndarray:
        p = self.params
        if p.kind == NoiseModelKind.PCMLike:
            g_rel = np.maximum(np.abs(g) / p.g_max, 1e-9) ** 0.65
            return p.read_noise_scale * np.minimum(0.0088 / np.maximum(g_rel, 1e-3), 0.2)
        return np.full(np.shape(g), p.read_noise_scale)

    def apply_drift_noise(
        self, g_prog: np.ndarray, nu: np.ndarray, t_inf: float, stream: RandomStream
    ) -> np.ndarray:
        p = self.params
        if t_inf < 0:
            raise ValueError("t_inf must be non-negative")
        if t_inf <= p.t0:
            return g_prog.copy()
        g = g_prog * (t_inf / p.t0) ** (-nu)
        if p.read_noise_scale > 0:
            sig = self.relative_read_noise(g_prog) * math.sqrt(math.log((t_inf + p.t_read) / p.t_read))
            g = g + np.abs(g) * sig * stream.gaussian(np.shape(g))
        return np.maximum(g, 0.0)


def make_noise_model(params: NoiseModelParams) -> NoiseModel:
    return NoiseModel(params)


def to_conductances(weights: np.ndarray, g_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Split analog weights in [-1, 1] onto a positive/negative conductance pair."""
    w = np.asarray(weights, dtype=np.float64)
    if g_max <= 0:
        raise ValueError("g_max must be positive")
    if np.any(np.abs(w) > 1 + 1e-6):
        raise ValueError("analog weights must lie in [-1, 1]")
    return g_max * np.maximum(w, 0.0), g_max * np.maximum(-w, 0.0)


def from_conductances(g_pos: np.ndarray, g_neg: np.ndarray, g_max: float) -> np.ndarray:
    return (np.asarray(g_pos) - np.asarray(g_neg)) / g_max


def one_hot_strength(weights: np.ndarray, io: IOParams, stream: RandomStream) -> float:
    """Mean absolute output over all one-hot inputs."""
    eye = np.eye(weights.shape[1], dtype=weights.dtype)
    return float(np.mean(np.abs(analog_forward(weights, eye, io, stream))))


@dataclass
class ProgrammedTile:
    g_pos_prog: np.ndarray
    g_neg_prog: np.ndarray
    nu_pos: np.ndarray
    nu_neg: np.ndarray
    g_max: float
    s0: float
    g_pos: np.ndarray
    g_neg: np.ndarray
    t_inf: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return from_conductances(self.g_pos, self.g_neg, self.g_max).astype(np.float32)


def program(
    conductances: tuple[np.ndarray, np.ndarray],
    model: NoiseModelParams | NoiseModel,
    stream: RandomStream,
    io: IOParams | None = None,
) -> ProgrammedTile:
    """Program a conductance pair and record the drift-compensation baseline."""
    nm = model if isinstance(model, NoiseModel) else make_noise_model(model)
    g_pos, g_neg = (np.asarray(g, dtype=np.float64) for g in conductances)
    gp = nm.apply_programming_noise(g_pos, stream)
    gn = nm.apply_programming_noise(g_neg, stream)
    nu_p = nm.generate_drift_coefficients(g_pos, stream)
    nu_n = nm.generate_drift_coefficients(g_neg, stream)
    g_max = nm.params.g_max
    w = from_conductances(gp, gn, g_max).astype(np.float32)
    s0 = one_hot_strength(w, io or IOParams.perfect(), stream)
    return ProgrammedTile(gp, gn, nu_p, nu_n, g_max, s0, gp.copy(), gn.copy(), 0.0)


def drift_to(
    tile: ProgrammedTile, t_inf: float, model: NoiseModelParams | NoiseModel, stream: RandomStream
) -> ProgrammedTile:
    """State of ``tile`` at ``t_inf`` seconds, always starting from the programmed conductances."""
    nm = model if isinstance(model, NoiseModel) else make_noise_model(model)
    gp = nm.apply_drift_noise(tile.g_pos_prog, tile.nu_pos, t_inf, stream)
    gn = nm.apply_drift_noise(tile.g_neg_prog, tile.nu_neg, t_inf, stream)
    return replace(tile, g_pos=gp, g_neg=gn, t_inf=float(t_inf))


class GlobalDriftCompensation:
    """Single output scale ``s0 / s_t`` from one-hot readouts; override ``readout`` to customize."""

    def readout(self, weights: np.ndarray, io: IOParams, stream: RandomStream) -> float:
        return one_hot_strength(weights, io, stream)

    def compensation_factor(self, tile: ProgrammedTile, io: IOParams, stream: RandomStream) -> float:
        s_t = self.readout(tile.weights, io, stream)
        if s_t == 0 or not np.isfinite(s_t):
            raise ValueError("drift compensation readout is zero (degenerate tile)")
        return tile.s0 / s_t


def compensation_factor(tile: ProgrammedTile, io: IOParams, stream: RandomStream) -> float:
    return GlobalDriftCompensation().compensation_factor(tile, io, stream)
