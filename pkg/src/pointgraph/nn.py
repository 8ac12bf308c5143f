"""Differentiable building blocks: ReLU MLPs, softmax cross-entropy, Adam, finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass
class MlpParams:
    """Weights are stored (d_out, d_in); ReLU between layers, nothing after the last."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("an MLP needs matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, dtype=np.float64,
             he_output: bool = False) -> "MlpParams":
        """He-uniform weights for layers followed by ReLU, zero biases.

        The final linear layer uses ``U(+-1/sqrt(fan_in))`` unless ``he_output``:
        the message sums over k neighbors would otherwise grow activations by
        roughly an order of magnitude per block.
        """
        if len(dims) < 2:
            raise ValueError("dims needs at least input and output width")
        weights, biases = [], []
        n = len(dims) - 1
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / d_in) if (i < n - 1 or he_output) else np.sqrt(1.0 / d_in)
            weights.append(rng.uniform(-limit, limit, size=(d_out, d_in)).astype(dtype))
            biases.append(np.zeros(d_out, dtype=dtype))
        return cls(weights, biases)

    @classmethod
    def identity(cls, d: int, dtype=np.float64) -> "MlpParams":
        return cls([np.eye(d, dtype=dtype)], [np.zeros(d, dtype=dtype)])

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])


@dataclass
class MlpTape:
    params_id: int
    lead_shape: tuple
    inputs: list[np.ndarray]  # input to each layer, flattened to 2-D
    pre: list[np.ndarray]  # pre-activations of hidden layers


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Apply the MLP to the last axis of ``x``; leading axes are batch."""
    x = np.asarray(x)
    if x.shape[-1] != p.d_in:
        raise ValueError(f"input width {x.shape[-1]} != MLP input width {p.d_in}")
    lead = x.shape[:-1]
    a = x.reshape(-1, p.d_in)
    inputs, pre = [], []
    n = len(p.weights)
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(a)
        z = a @ w.T + b
        if i < n - 1:
            pre.append(z)
            a = relu(z)
        else:
            a = z
    return a.reshape(*lead, p.d_out), MlpTape(id(p), lead, inputs, pre)


def mlp_backward(p: MlpParams, tape: MlpTape, dy: np.ndarray, need_dx: bool = True
                 ) -> tuple[np.ndarray | None, MlpParams]:
    """Reverse pass. ReLU'(0) is taken as 0."""
    if tape.params_id != id(p) or len(tape.inputs) != len(p.weights):
        raise ValueError("tape was not produced by these parameters")
    if dy.shape != (*tape.lead_shape, p.d_out):
        raise ValueError(f"dy shape {dy.shape} does not match output shape {(*tape.lead_shape, p.d_out)}")
    g = dy.reshape(-1, p.d_out)
    gw, gb = [None] * len(p.weights), [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        gw[i] = g.T @ tape.inputs[i]
        gb[i] = g.sum(axis=0)
        if i == 0 and not need_dx:
            g = None
            break
        g = g @ p.weights[i]
        if i > 0:
            g = g * (tape.pre[i - 1] > 0)
    dx = None if g is None else g.reshape(*tape.lead_shape, p.d_in)
    return dx, MlpParams(gw, gb)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels).reshape(-1)
    b, c = logits.shape
    if len(labels) != b:
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = softmax(logits)
    d[rows, labels] -= 1
    return loss, d / b


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """In-place bias-corrected Adam update; returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state must have the same length")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[int, tuple] | None = None
    n_checked: int = 0
    errors: list[float] = field(default_factory=list)


def finite_diff_check(loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
                      params: Sequence[np.ndarray], step: float = 1e-5, max_coords: int = 256,
                      seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` evaluates the loss at the current values of ``params`` and
    returns ``(loss, grads)``; coordinates are perturbed in place and restored.
    All coordinates are checked when there are at most ``max_coords``,
    otherwise a seeded sample of ``max_coords``. The error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    loss0, grads = loss_fn()
    if not np.isfinite(loss0):
        raise FloatingPointError("loss is not finite at the base point")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        coords = [coords[j] for j in sorted(rng.choice(len(coords), max_coords, replace=False))]
    report = GradCheckReport(0.0)
    for i, idx in coords:
        p = params[i]
        orig = p[idx]
        p[idx] = orig + step
        lp = loss_fn()[0]
        p[idx] = orig - step
        lm = loss_fn()[0]
        p[idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"loss is not finite when probing param {i} at {idx}")
        num = (lp - lm) / (2 * step)
        ana = grads[i][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        report.errors.append(err)
        if err >= report.max_rel_error:
            report.max_rel_error, report.worst = err, (i, idx)
    report.n_checked = len(coords)
    return report
