"""In-memory training optimizers built on the pulsed outer-product update.

``Single`` updates the weight array directly.  ``MixedPrecision`` computes
the rank-one update digitally into an accumulator and programs single
pulses once an entry crosses a threshold.  ``Transfer`` (Tiki-Taka) trains
a fast gradient array ``A`` and periodically moves one column of it into
``W``.  ``BufferedTransfer`` (TTv2) low-pass filters those reads in a
digital matrix ``H`` before any pulse reaches ``W``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .devices import DeviceArray, DeviceParams
from .mvm import IOParams, analog_forward
from .numerics import RandomStream
from .update import UpdateParams, pulsed_outer_update


class CompoundKind(str, enum.Enum):
    Single = "Single"
    MixedPrecision = "MixedPrecision"
    Transfer = "Transfer"
    BufferedTransfer = "BufferedTransfer"


OPTIMIZERS = {
    "sgd": CompoundKind.Single,
    "mixed-precision": CompoundKind.MixedPrecision,
    "tiki-taka": CompoundKind.Transfer,
    "ttv2": CompoundKind.BufferedTransfer,
}
_RESERVED = ("c-ttv2", "chopped-ttv2", "agad", "ChoppedTransfer", "DynamicTransfer")


def optimizer_kind(name: str) -> CompoundKind:
    """Map an optimizer name from a config onto a compound kind."""
    if name in _RESERVED:
        raise ValueError(f"optimizer {name!r} is unsupported (chopper/dynamic-offset variants are not implemented)")
    if name in OPTIMIZERS:
        return OPTIMIZERS[name]
    try:
        return CompoundKind(name)
    except ValueError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None


@dataclass
class CompoundParams:
    """Optimizer hyperparameters.

    ``fast_lr`` is the learning rate onto ``A`` (0 means use the step's lr).
    A transfer happens every ``transfer_every`` update calls and reads
    ``n_reads_per_transfer`` consecutive columns of ``A``.  The amount moved
    per read is ``transfer_lr * read`` (times the step's lr when
    ``scale_transfer_lr``).  For ``BufferedTransfer`` a pulse to ``W`` is
    emitted per ``auto_granularity * dw_min`` accumulated in ``H``.
    ``max_transfer_pulses`` caps the pulses one buffered transfer gives a
    device (0: no cap); the excess stays in ``H``.
    ``mp_threshold`` is the mixed-precision threshold in units of dw_min.
    """

    kind: CompoundKind = CompoundKind.Single
    fast_lr: float = 0.0
    transfer_lr: float = 1.0
    scale_transfer_lr: bool = True
    transfer_every: int = 1
    n_reads_per_transfer: int = 1
    auto_granularity: float = 1.0
    max_transfer_pulses: int = 0
    mp_threshold: float = 1.0
    zero_shift_a: bool = True
    transfer_io: IOParams = field(default_factory=IOParams)
    transfer_update: UpdateParams = field(default_factory=UpdateParams)

    def __post_init__(self):
        if isinstance(self.kind, str) and self.kind not in CompoundKind.__members__:
            self.kind = optimizer_kind(self.kind)
        self.kind = CompoundKind(self.kind)
        if self.fast_lr < 0 or self.transfer_lr < 0:
            raise ValueError("fast_lr and transfer_lr must be non-negative")
        if self.transfer_every < 1 or self.n_reads_per_transfer < 1:
            raise ValueError("transfer_every and n_reads_per_transfer must be >= 1")
        if self.max_transfer_pulses < 0:
            raise ValueError("max_transfer_pulses must be >= 0")
        if self.auto_granularity <= 0 or self.mp_threshold <= 0:
            raise ValueError("auto_granularity and mp_threshold must be positive")


@dataclass
class CompoundStats:
    updates: int = 0
    transfers: int = 0
    w_pulses: int = 0
    a_pulses: int = 0
    w_update_events: int = 0
    column_reads: np.ndarray | None = None
    accumulated: float = 0.0
    transferred: float = 0.0


class CompoundState:
    """Weight array plus whatever auxiliary state the optimizer needs."""

    def __init__(
        self,
        device: DeviceParams,
        rows: int,
        cols: int,
        params: CompoundParams,
        stream: RandomStream,
        a_device: DeviceParams | None = None,
    ):
        self.kind = params.kind
        self.params = params
        self.shape = (rows, cols)
        self.W = DeviceArray(device, rows, cols, stream.child("W"))
        self.A: DeviceArray | None = None
        self.H: np.ndarray | None = None
        self.chi: np.ndarray | None = None
        self.transfer_cursor = 0
        self.stats = CompoundStats(column_reads=np.zeros(cols, dtype=np.int64))
        if self.kind in (CompoundKind.Transfer, CompoundKind.BufferedTransfer):
            self.A = DeviceArray(a_device or device, rows, cols, stream.child("A"))
            if params.zero_shift_a:
                self.A.set_reference_to_symmetry_point()
            self.A.set_weights(0.0)
        if self.kind == CompoundKind.BufferedTransfer:
            self.H = np.zeros(self.shape, dtype=np.float64)
        if self.kind == CompoundKind.MixedPrecision:
            self.chi = np.zeros(self.shape, dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return self.W.weights

    def set_weights(self, w: np.ndarray) -> None:
        self.W.set_weights(w)

    @property
    def granularity(self) -> float:
        return self.params.auto_granularity * self.W.params.dw_min

    def update(self, x: np.ndarray, d: np.ndarray, lr: float, up: UpdateParams, stream: RandomStream) -> None:
        """One optimizer step for a mini-batch (or single sample) of ``x``, ``d``."""
        step = _STEPS[self.kind]
        if self.kind == CompoundKind.MixedPrecision:
            step(self, x, d, lr, stream)
        else:
            step(self, x, d, lr, up, stream)


def _check(state: CompoundState, kind: CompoundKind) -> None:
    if state.kind != kind:
        raise ValueError(f"compound kind mismatch: state is {state.kind.value}, step expects {kind.value}")


def _batched(x, d):
    x = np.atleast_2d(np.asarray(x))
    d = np.atleast_2d(np.asarray(d))
    if x.shape[0] != d.shape[0]:
        raise ValueError("x and d batch sizes differ")
    return x, d


def _pulse_each(array: DeviceArray, x, d, lr, up, stream) -> int:
    x, d = _batched(x, d)
    n = 0
    for xs, ds in zip(x, d):
        n += int(pulsed_outer_update(array, xs, ds, lr, up, stream).sum())
    return n


def sgd_step(state: CompoundState, x, d, lr: float, up: UpdateParams, stream: RandomStream) -> None:
    _check(state, CompoundKind.Single)
    state.stats.w_pulses += _pulse_each(state.W, x, d, lr, up, stream)
    state.stats.updates += 1


def _single_shot(array: DeviceArray, n: np.ndarray, stream: RandomStream) -> int:
    """Apply ``|n|`` pulses per device in the direction of ``sign(n)``."""
    counts = np.abs(n).astype(np.int64)
    if counts.any():
        array.apply_pulse_counts(counts, n > 0, stream)
    return int(counts.sum())


def mp_step(state: CompoundState, x, d, lr: float, stream: RandomStream) -> None:
    _check(state, CompoundKind.MixedPrecision)
    x, d = _batched(x, d)
    delta = -lr * (d.astype(np.float64).T @ x.astype(np.float64))
    state.chi += delta
    state.stats.accumulated += float(delta.sum())
    thr = state.params.mp_threshold * state.W.params.dw_min
    n = np.trunc(state.chi / thr)
    moved = n * thr
    state.chi -= moved
    state.stats.transferred += float(moved.sum())
    state.stats.w_pulses += _single_shot(state.W, n, stream)
    state.stats.updates += 1


def _fast_update(state: CompoundState, x, d, lr, up, stream) -> None:
    fast_lr = state.params.fast_lr or lr
    state.stats.a_pulses += _pulse_each(state.A, x, d, fast_lr, up, stream)
    state.stats.updates += 1


def _read_columns(state: CompoundState, stream: RandomStream):
    """Read the next columns of A with one-hot inputs; yields ``(col, amount)``."""
    p = state.params
    cols = state.shape[1]
    for _ in range(p.n_reads_per_transfer):
        j = state.transfer_cursor
        e = np.zeros(cols, dtype=np.float32)
        e[j] = 1.0
        read = analog_forward(state.A.weights, e, p.transfer_io, stream)
        state.transfer_cursor = (j + 1) % cols
        state.stats.column_reads[j] += 1
        yield j, read.astype(np.float64)


def _transfer_scale(state: CompoundState, lr: float) -> float:
    p = state.params
    return p.transfer_lr * (lr if p.scale_transfer_lr else 1.0)


def tt_step(state: CompoundState, x, d, lr: float, up: UpdateParams, stream: RandomStream) -> None:
    _check(state, CompoundKind.Transfer)
    _fast_update(state, x, d, lr, up, stream)
    if state.stats.updates % state.params.transfer_every:
        return
    scale = _transfer_scale(state, lr)
    cols = state.shape[1]
    for j, read in _read_columns(state, stream):
        if scale == 0 or not read.any():
            continue
        e = np.zeros(cols)
        e[j] = 1.0
        # W += scale * read as a pulsed rank-one update (d = -read)
        counts = pulsed_outer_update(state.W, e, -read, scale, state.params.transfer_update, stream)
        n = int(counts.sum())
        state.stats.w_pulses += n
        state.stats.w_update_events += int(n > 0)
    state.stats.transfers += 1


def ttv2_step(state: CompoundState, x, d, lr: float, up: UpdateParams, stream: RandomStream) -> None:
    _check(state, CompoundKind.BufferedTransfer)
    _fast_update(state, x, d, lr, up, stream)
    if state.stats.updates % state.params.transfer_every:
        return
    scale = _transfer_scale(state, lr)
    gran = state.granularity
    cap = state.params.max_transfer_pulses
    for j, read in _read_columns(state, stream):
        state.H[:, j] += scale * read
        n = np.trunc(state.H[:, j] / gran)
        if cap:
            n = np.clip(n, -cap, cap)
        if not n.any():
            continue
        state.H[:, j] -= n * gran
        sub = np.zeros(state.shape)
        sub[:, j] = n
        state.stats.w_pulses += _single_shot(state.W, sub, stream)
        state.stats.w_update_events += 1
    state.stats.transfers += 1


_STEPS = {
    CompoundKind.Single: sgd_step,
    CompoundKind.MixedPrecision: mp_step,
    CompoundKind.Transfer: tt_step,
    CompoundKind.BufferedTransfer: ttv2_step,
}
