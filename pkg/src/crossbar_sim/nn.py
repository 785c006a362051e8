"""Dense networks whose layers run on analog tiles.

A layer's weight matrix ``W`` (out x in) is stored as analog weights ``W_hat``
in [-1, 1] times digital per-output scales ``alpha``: ``W = alpha[:, None] *
W_hat``.  Large layers are split into a grid of tiles; partial outputs of
tiles that share output rows are summed in floating point.

Three tile modes exist.  ``inference`` runs the forward pass through the
non-ideal MVM but the backward pass and the update in floating point (for
hardware-aware training and later inference evaluation).  ``training`` runs
forward and backward through the MVM and updates the devices with a pulsed
compound optimizer.  ``digital`` is plain floating point.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .compounds import CompoundState
from .config import TileConfig, TileMode
from .hwa import (
    InputRangeState,
    clip_weights,
    input_range_gradient,
    input_range_warmup,
    modify_weights,
    remap_weights,
)
from .inference import (
    GlobalDriftCompensation,
    ProgrammedTile,
    drift_to,
    make_noise_model,
    program,
    to_conductances,
)
from .mvm import IOParams, analog_forward
from .numerics import RandomStream

# ---------------------------------------------------------------- activations


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def _softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0), lambda z, a: (z > 0).astype(z.dtype)),
    "sigmoid": (_sigmoid, lambda z, a: a * (1 - a)),
    "tanh": (np.tanh, lambda z, a: 1 - a * a),
}


def activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "softmax":
        return _softmax(z)
    return ACTIVATIONS[name][0](z)


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise derivative ``da/dz`` (not defined for softmax)."""
    return ACTIVATIONS[name][1](z, a)


def softmax(z: np.ndarray) -> np.ndarray:
    return _softmax(z)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    z = logits - np.max(logits, axis=-1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


# ---------------------------------------------------------------------- tiles


def _split(n: int, max_size: int) -> list[slice]:
    if max_size <= 0 or max_size >= n:
        return [slice(0, n)]
    return [slice(s, min(s + max_size, n)) for s in range(0, n, max_size)]


class AnalogTile:
    """One crossbar holding the analog weights of a (rows x cols) block."""

    def __init__(self, rows: slice, cols: slice, cfg: TileConfig, stream: RandomStream, dtype):
        self.rows, self.cols = rows, cols
        self.shape = (rows.stop - rows.start, cols.stop - cols.start)
        self.cfg = cfg
        self.stream = stream
        self.dtype = dtype
        self.compound: CompoundState | None = None
        self._w = np.zeros(self.shape, dtype=dtype)
        if cfg.mode == TileMode.training:
            self.compound = CompoundState(cfg.device, *self.shape, cfg.compound, stream.child("devices"), cfg.a_device)
        self.input_range = InputRangeState(cfg.input_range.init_value)
        self.programmed: ProgrammedTile | None = None
        self.current: ProgrammedTile | None = None
        self.gamma = 1.0
        # forward cache
        self._x = None
        self._x_in = None
        self._w_used = None

    @property
    def weights(self) -> np.ndarray:
        if self.compound is not None:
            return self.compound.weights.astype(self.dtype)
        return self._w

    def set_weights(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=self.dtype)
        if self.compound is not None:
            self.compound.set_weights(w)
        else:
            self._w = w.copy()

    @property
    def uses_input_range(self) -> bool:
        return self.cfg.input_range.enabled and self.cfg.mode != TileMode.digital

    def _inference_weights(self) -> np.ndarray:
        return self.current.weights.astype(self.dtype) if self.current is not None else self.weights

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        cfg = self.cfg
        self._x = x
        w = self._inference_weights()
        if cfg.mode == TileMode.digital:
            self._w_used = w
            self._x_in = x
            return x @ w.T
        mod = cfg.modifier
        if mod.active and (training or mod.enable_during_test) and self.current is None:
            w = modify_weights(w, mod, self.stream, batch_size=x.shape[0])
        self._w_used = w
        scale = 1.0
        if self.uses_input_range:
            ir = self.input_range
            if training and cfg.input_range.init_from_data > ir.batches_seen:
                input_range_warmup(ir, x, cfg.input_range)
            scale = ir.value
            x = np.clip(x, -scale, scale) / scale
        self._x_in = x
        if w.ndim == 3:
            y = np.stack([analog_forward(w[b], x[b], cfg.forward, self.stream) for b in range(x.shape[0])])
        else:
            y = analog_forward(w, x, cfg.forward, self.stream)
        return (y * (scale * self.gamma)).astype(self.dtype, copy=False)

    def backward(self, d: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the tile input given ``d`` (gradient w.r.t. the tile output)."""
        if self._x is None:
            raise RuntimeError("backward called without a cached forward pass")
        cfg = self.cfg
        w = self._w_used
        if cfg.mode == TileMode.training:
            g = analog_forward(np.ascontiguousarray(w.T), d, cfg.backward, self.stream)
        elif w.ndim == 3:
            g = np.einsum("bo,boi->bi", d, w)
        else:
            g = d @ w
        g = g.astype(self.dtype, copy=False)
        if self.uses_input_range:
            ir = self.input_range
            x = self._x
            inside = np.abs(x) < ir.value
            self._ir_grad, ir.last_clip_fraction = input_range_gradient(ir.value, x, g, cfg.input_range)
            g = g * inside
        self._d = d
        return g

    def update(self, lr: float, row_scales: np.ndarray | None = None) -> None:
        """Apply the cached gradient; ``row_scales`` divides each output row's update."""
        cfg = self.cfg
        x, d = self._x_in, self._d
        if row_scales is not None:
            d = d / row_scales[self.rows].astype(self.dtype)
        if cfg.mode == TileMode.training:
            # inputs were divided by the input range, so the weight gradient scales with it
            scale = self.input_range.value if self.uses_input_range else 1.0
            self.compound.update(x, d * scale, lr, cfg.update, self.stream)
        else:
            scale = self.input_range.value if self.uses_input_range else 1.0
            self._w = (self._w - lr * scale * (d.T @ x)).astype(self.dtype)
        if self.uses_input_range and self.input_range.batches_seen >= cfg.input_range.init_from_data:
            ir = self.input_range
            ir.value = max(ir.value - lr * cfg.input_range.learning_rate_scale * self._ir_grad, 1e-6)

    # ------------------------------------------------------------- inference

    def program(self, stream: RandomStream) -> None:
        cfg = self.cfg
        w = np.clip(self.weights, -1, 1)
        model = make_noise_model(cfg.noise_model)
        self.programmed = program(to_conductances(w, cfg.noise_model.g_max), model, stream, cfg.forward)
        self.current = self.programmed
        self.gamma = 1.0

    def drift(self, t_inf: float, stream: RandomStream) -> None:
        if self.programmed is None:
            raise RuntimeError("tile is not programmed")
        cfg = self.cfg
        self.current = drift_to(self.programmed, t_inf, make_noise_model(cfg.noise_model), stream)
        self.gamma = 1.0
        if cfg.drift_compensation:
            self.gamma = GlobalDriftCompensation().compensation_factor(self.current, cfg.forward, stream)

    def unprogram(self) -> None:
        self.programmed = self.current = None
        self.gamma = 1.0


# --------------------------------------------------------------------- layers


class AnalogLinear:
    """Fully connected layer ``y = alpha * (W_hat x) + b`` on a grid of tiles."""

    def __init__(self, in_features: int, out_features: int, cfg: TileConfig, stream: RandomStream, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.stream = stream
        m = cfg.mapping
        if cfg.mode == TileMode.digital:
            row_slices, col_slices = [slice(0, out_features)], [slice(0, in_features)]
        else:
            row_slices = _split(out_features, m.max_out_size)
            col_slices = _split(in_features, m.max_in_size)
        self.tiles = [
            AnalogTile(r, c, cfg, stream.child("tile", i, j), self.dtype)
            for i, r in enumerate(row_slices)
            for j, c in enumerate(col_slices)
        ]
        self.out_scales = np.ones(out_features, dtype=np.float64)
        self.bias = np.zeros(out_features, dtype=self.dtype) if m.digital_bias else None
        self._y_raw = None

    # -------------------------------------------------------------- weights

    @property
    def analog_weights(self) -> np.ndarray:
        w = np.zeros((self.out_features, self.in_features), dtype=self.dtype)
        for t in self.tiles:
            w[t.rows, t.cols] = t.weights
        return w

    def set_analog_weights(self, w_hat: np.ndarray, out_scales=None) -> None:
        for t in self.tiles:
            t.set_weights(w_hat[t.rows, t.cols])
        if out_scales is not None:
            self.out_scales = np.broadcast_to(np.asarray(out_scales, np.float64), (self.out_features,)).copy()

    def set_weights(self, w: np.ndarray, bias: np.ndarray | None = None, omega: float | None = None) -> None:
        """Map full weights onto analog weights and output scales.

        With ``omega > 0`` the largest magnitude (per output when columnwise)
        is mapped to ``omega``.  With ``omega == 0`` the weights are used as
        analog weights directly and must lie in [-1, 1].
        """
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.out_features, self.in_features):
            raise ValueError(f"weight shape {w.shape} does not match layer {(self.out_features, self.in_features)}")
        omega = self.cfg.omega if omega is None else omega
        if self.cfg.mode == TileMode.digital or omega == 0:
            if self.cfg.mode != TileMode.digital and np.any(np.abs(w) > 1):
                raise ValueError("analog weights outside [-1, 1] with weight scaling turned off")
            scales = np.ones(self.out_features)
        else:
            if self.cfg.mapping.weight_scaling_columnwise:
                wmax = np.max(np.abs(w), axis=1)
            else:
                wmax = np.full(self.out_features, np.max(np.abs(w)))
            wmax = np.where(wmax > 0, wmax, omega)
            scales = wmax / omega
        self.set_analog_weights((w / scales[:, None]).astype(self.dtype), scales)
        if bias is not None:
            if self.bias is None:
                raise ValueError("layer has no digital bias")
            self.bias = np.asarray(bias, dtype=self.dtype).copy()

    def get_weights(self) -> tuple[np.ndarray, np.ndarray | None]:
        w = self.out_scales[:, None] * self.analog_weights.astype(np.float64)
        return w, None if self.bias is None else self.bias.copy()

    # ---------------------------------------------------------- forward pass

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input of width {self.in_features}, got shape {x.shape}")
        y = np.zeros((x.shape[0], self.out_features), dtype=self.dtype)
        for t in self.tiles:
            y[:, t.rows] += t.forward(x[:, t.cols], training)
        self._y_raw = y
        out = y * self.out_scales.astype(self.dtype)
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._y_raw is None:
            raise RuntimeError("backward called without a cached forward pass")
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        self._grad_bias = grad_out.sum(axis=0)
        self._grad_scales = np.sum(grad_out * self._y_raw, axis=0)
        d = grad_out * self.out_scales.astype(self.dtype)
        grad_in = np.zeros((grad_out.shape[0], self.in_features), dtype=self.dtype)
        for t in self.tiles:
            grad_in[:, t.cols] += t.backward(d[:, t.rows])
        return grad_in

    def update(self, lr: float) -> None:
        cfg = self.cfg
        row_scales = None
        if cfg.mapping.weight_scaling_lr_compensation and cfg.mode != TileMode.digital:
            row_scales = self.out_scales ** 2
        for t in self.tiles:
            t.update(lr, row_scales)
        if cfg.mode == TileMode.inference:
            w_hat = clip_weights(self.analog_weights, cfg.clip)
            w_hat, scales = remap_weights(w_hat, self.out_scales, cfg.clip)
            self.set_analog_weights(w_hat, scales)
        if cfg.mapping.learn_out_scaling and cfg.mode != TileMode.digital:
            self.out_scales = self.out_scales - lr * self._grad_scales
        if self.bias is not None:
            self.bias = (self.bias - lr * self._grad_bias).astype(self.dtype)

    # ------------------------------------------------------------- inference

    def program(self, stream: RandomStream) -> None:
        for k, t in enumerate(self.tiles):
            t.program(stream.child(k))

    def drift(self, t_inf: float, stream: RandomStream) -> None:
        for k, t in enumerate(self.tiles):
            t.drift(t_inf, stream.child(k))

    def unprogram(self) -> None:
        for t in self.tiles:
            t.unprogram()


# ---------------------------------------------------------------------- model


@dataclass
class StepResult:
    loss: float
    correct: int


class AnalogMLP:
    """Stack of :class:`AnalogLinear` layers with digital activations.

    A final ``softmax`` activation is folded into the cross-entropy loss:
    :meth:`forward` returns logits.
    """

    def __init__(
        self,
        widths: list[int],
        activations: list[str],
        cfg: TileConfig,
        stream: RandomStream,
        dtype=np.float32,
        init: str = "uniform",
    ):
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        for a in activations[:-1]:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown hidden activation {a!r}")
        if activations[-1] not in ACTIVATIONS and activations[-1] != "softmax":
            raise ValueError(f"unknown output activation {activations[-1]!r}")
        self.widths = list(widths)
        self.activations = list(activations)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.stream = stream
        self.training = True
        self.layers = [
            AnalogLinear(i, o, cfg, stream.child("layer", k), self.dtype)
            for k, (i, o) in enumerate(zip(widths[:-1], widths[1:]))
        ]
        init_stream = stream.child("init")
        for layer in self.layers:
            bound = 1.0 / np.sqrt(layer.in_features)
            w = init_stream.uniform((layer.out_features, layer.in_features), -bound, bound)
            b = init_stream.uniform(layer.out_features, -bound, bound) if layer.bias is not None else None
            layer.set_weights(w, b)

    def reseed(self, stream: RandomStream) -> None:
        """Point every tile's runtime noise at a fresh sub-stream of ``stream``."""
        for k, layer in enumerate(self.layers):
            for i, t in enumerate(layer.tiles):
                t.stream = stream.child(k, i)

    def train(self, mode: bool = True) -> "AnalogMLP":
        self.training = mode
        return self

    def eval(self) -> "AnalogMLP":
        return self.train(False)

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = np.asarray(x, dtype=self.dtype)
        self._cache = []
        for layer, act in zip(self.layers, self.activations):
            z = layer.forward(a, self.training)
            a = z if act in ("softmax", "identity") else activation(act, z)
            self._cache.append((z, a, act))
        return a

    def predict(self, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
        out = [self.forward(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def backward(self, grad_out: np.ndarray) -> None:
        """Backpropagate the gradient w.r.t. the network output (logits for softmax)."""
        g = np.asarray(grad_out, dtype=self.dtype)
        for layer, (z, a, act) in zip(reversed(self.layers), reversed(self._cache)):
            if act not in ("softmax", "identity"):
                g = g * activation_grad(act, z, a)
            g = layer.backward(g)
        self._grad_input = g

    def update(self, lr: float) -> None:
        for layer in self.layers:
            layer.update(lr)

    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        out = self.forward(x)
        if self.activations[-1] == "softmax":
            return cross_entropy(out, labels)
        raise ValueError("loss_and_grad expects a softmax output layer")

    def train_step(self, x: np.ndarray, labels: np.ndarray, lr: float) -> StepResult:
        out = self.forward(x)
        loss, grad = cross_entropy(out.astype(np.float64), labels)
        correct = int(np.sum(np.argmax(out, axis=1) == labels))
        self.backward(grad)
        self.update(lr)
        return StepResult(loss, correct)

    def accuracy(self, x: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
        return float(np.mean(np.argmax(self.predict(x, batch_size), axis=1) == labels))

    # ------------------------------------------------------- input ranges

    def tile_inputs(self, batch: np.ndarray) -> list[np.ndarray]:
        """Per-tile inputs in evaluation mode with every nonideality off."""
        saved = [(t, t.cfg) for layer in self.layers for t in layer.tiles]
        quiet = copy.deepcopy(self.cfg)
        quiet.forward = IOParams.perfect()
        quiet.input_range.enabled = False
        quiet.modifier.enable_during_test = False
        try:
            for t, _ in saved:
                t.cfg = quiet
            was_training = self.training
            self.training = False
            a = np.asarray(batch, dtype=self.dtype)
            per_tile = []
            for layer, act in zip(self.layers, self.activations):
                per_tile.extend(a[:, t.cols] for t in layer.tiles)
                z = layer.forward(a, False)
                a = z if act in ("softmax", "identity") else activation(act, z)
        finally:
            for t, c in saved:
                t.cfg = c
            self.training = was_training
        return per_tile

    def set_tile_input_ranges(self, values: list[float]) -> None:
        tiles = [t for layer in self.layers for t in layer.tiles]
        if len(values) != len(tiles):
            raise ValueError("one input range per tile required")
        for t, v in zip(tiles, values):
            t.input_range.value = float(v)
            t.input_range.batches_seen = max(t.input_range.batches_seen, t.cfg.input_range.init_from_data)

    def input_ranges(self) -> list[float]:
        return [t.input_range.value for layer in self.layers for t in layer.tiles]

    def clip_fractions(self) -> list[float]:
        return [t.input_range.last_clip_fraction for layer in self.layers for t in layer.tiles]

    # ---------------------------------------------------------- inference

    def program_analog_weights(self, stream: RandomStream) -> None:
        for k, layer in enumerate(self.layers):
            layer.program(stream.child(k))

    def drift_analog_weights(self, t_inf: float, stream: RandomStream) -> None:
        for k, layer in enumerate(self.layers):
            layer.drift(t_inf, stream.child(k))

    def unprogram(self) -> None:
        for layer in self.layers:
            layer.unprogram()

    # --------------------------------------------------------- checkpoint

    def state_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            w_hat = layer.analog_weights
            layers.append({
                "shape": list(w_hat.shape),
                "analog_weights": w_hat.astype(np.float64).ravel().tolist(),
                "out_scales": layer.out_scales.tolist(),
                "bias": None if layer.bias is None else layer.bias.astype(np.float64).tolist(),
                "input_ranges": [t.input_range.value for t in layer.tiles],
            })
        return {"widths": self.widths, "activations": self.activations, "layers": layers}

    def load_state_dict(self, state: dict) -> None:
        if list(state["widths"]) != self.widths:
            raise ValueError(f"checkpoint widths {state['widths']} do not match model {self.widths}")
        for layer, ls in zip(self.layers, state["layers"]):
            shape = tuple(ls["shape"])
            w_hat = np.asarray(ls["analog_weights"], dtype=np.float64).reshape(shape)
            layer.set_analog_weights(w_hat.astype(layer.dtype), ls["out_scales"])
            if ls["bias"] is not None and layer.bias is not None:
                layer.bias = np.asarray(ls["bias"], dtype=layer.dtype)
            for t, v in zip(layer.tiles, ls.get("input_ranges", [])):
                t.input_range.value = float(v)
                t.input_range.batches_seen = t.cfg.input_range.init_from_data


def analog_sgd_step(model: AnalogMLP, lr: float) -> None:
    """Apply the captured gradients of the last backward pass to every layer."""
    model.update(lr)
