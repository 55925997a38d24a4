"""Dense numerics: a small two-layer encoder with hand-written backprop and a
central finite-difference gradient checker.

All arithmetic is float64. Batches are row-major ``(N, dim)`` arrays; a single
vector is a 1-D array and is treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

ACTIVATIONS = ("tanh", "identity")


class ShapeError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class EncoderState:
    """Parameters of an MLP encoder.

    ``layers`` is a list of ``(weight, bias)`` with weight shaped ``(out, in)``.
    The activation is applied between layers, never after the last one.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"
    normalize: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(f"layer {i} input width {w.shape[1]} does not match "
                                 f"previous output {self.layers[i - 1][0].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        return out

    def with_params(self, params: Mapping[str, np.ndarray]) -> "EncoderState":
        layers = [(params[f"layer{i}.weight"], params[f"layer{i}.bias"])
                  for i in range(len(self.layers))]
        return EncoderState(layers, self.activation, self.normalize)

    def copy(self) -> "EncoderState":
        return EncoderState([(w.copy(), b.copy()) for w, b in self.layers],
                            self.activation, self.normalize)

    def same_shape(self, other: "EncoderState") -> bool:
        return len(self.layers) == len(other.layers) and all(
            w.shape == ow.shape and b.shape == ob.shape
            for (w, b), (ow, ob) in zip(self.layers, other.layers))


def init_encoder(in_dim: int, out_dim: int = 16, hidden: int = 32, seed: int = 0,
                 activation: str = "tanh", normalize: bool = True) -> EncoderState:
    """Two-layer encoder with Glorot-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in ((in_dim, hidden), (hidden, out_dim)):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        layers.append((rng.normal(0.0, std, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return EncoderState(layers, activation, normalize)


def _act(name, z):
    return np.tanh(z) if name == "tanh" else z


def _act_grad(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _as_batch(state: EncoderState, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != state.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match encoder input width {state.in_dim}")
    return x, single


def _forward(state: EncoderState, x: np.ndarray):
    pre = []
    h = x
    last = len(state.layers) - 1
    for i, (w, b) in enumerate(state.layers):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else _act(state.activation, z)
    return pre, h


def encode(state: EncoderState, x) -> np.ndarray:
    """Forward pass; rows are L2-normalized when ``state.normalize`` is set."""
    xb, single = _as_batch(state, x)
    _, out = _forward(state, xb)
    if state.normalize:
        out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if single else out


def backprop(state: EncoderState, x, output_grad) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients of ``sum(output_grad * encode(state, x))``.

    Returns ``(layer_grads, input_grad)`` where ``layer_grads`` mirrors
    ``state.layers``. Gradients are summed over the batch.
    """
    xb, single = _as_batch(state, x)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (xb.shape[0], state.out_dim):
        raise ShapeError(f"output_grad of shape {g.shape}, expected {(xb.shape[0], state.out_dim)}")

    pre, out = _forward(state, xb)
    if state.normalize:
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        y = out / norm
        g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / norm

    grads = [None] * len(state.layers)
    for i in range(len(state.layers) - 1, -1, -1):
        w, _ = state.layers[i]
        h_in = xb if i == 0 else _act(state.activation, pre[i - 1])
        grads[i] = (g.T @ h_in, g.sum(axis=0))
        g = g @ w
        if i > 0:
            g = g * _act_grad(state.activation, pre[i - 1])
    return grads, (g[0] if single else g)


def layer_grads_to_params(grads) -> dict[str, np.ndarray]:
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"layer{i}.weight"] = dw
        out[f"layer{i}.bias"] = db
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: list[tuple[str, float]] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


LossFn = Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]]


def finite_diff_check(loss_fn: LossFn, params: Mapping[str, np.ndarray] | EncoderState,
                      h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences, entry by entry.

    ``loss_fn(params)`` returns ``(value, grads)`` with ``grads`` keyed like
    ``params``. Keys missing from ``grads`` are taken to have zero gradient.
    """
    if isinstance(params, EncoderState):
        params = params.params()
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, analytic = loss_fn(base)
    if not np.isfinite(value):
        raise EvaluationError(f"loss is not finite at the evaluation point: {value}")

    per_param = []
    for name, arr in base.items():
        a = np.asarray(analytic.get(name, np.zeros_like(arr)), dtype=np.float64)
        if a.shape != arr.shape:
            raise ShapeError(f"gradient for {name} has shape {a.shape}, expected {arr.shape}")
        numeric = np.empty_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up, _ = loss_fn(base)
            flat[j] = orig - h
            down, _ = loss_fn(base)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EvaluationError(f"non-finite loss while perturbing {name}[{j}]")
            num_flat[j] = (up - down) / (2.0 * h)
        err = float(relative_error(a, numeric).max()) if arr.size else 0.0
        per_param.append((name, err))
    max_err = max((e for _, e in per_param), default=0.0)
    return GradCheckReport(max_err, per_param)
