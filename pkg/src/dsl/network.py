"""Multi-output ReLU network with shared hidden layers, trained by Adam on squared loss.

Weights follow the ``W_l @ h`` convention: ``weights[l]`` has shape
``(width_out, width_in)``. Hidden layers use the rectifier, the output layer
is affine, and every output shares all hidden units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT_TAG = "dsl.MultiOutputMLP"
FORMAT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class MultiOutputMLP:
    weights: tuple
    biases: tuple
    x_mean: Optional[np.ndarray] = None
    x_scale: Optional[np.ndarray] = None
    loss_history: tuple = field(default=(), repr=False)

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def nonzero_count(self, tol: float = 1e-8) -> int:
        """Number of parameters with magnitude above ``tol`` (the sparsity statistic)."""
        return int(sum(np.sum(np.abs(w) > tol) + np.sum(np.abs(b) > tol)
                       for w, b in zip(self.weights, self.biases)))

    def max_abs(self) -> float:
        return float(max(max(np.max(np.abs(w)), np.max(np.abs(b))) for w, b in zip(self.weights, self.biases)))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        if self.x_mean is None:
            return x
        return (x - self.x_mean) / self.x_scale

    def __call__(self, x):
        return forward(self, x)

    # serialisation
    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "widths": list(self.widths),
            "activation": "relu",
            "x_mean": None if self.x_mean is None else self.x_mean.tolist(),
            "x_scale": None if self.x_scale is None else self.x_scale.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "loss_history": list(self.loss_history),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "MultiOutputMLP":
        if blob.get("format") != FORMAT_TAG:
            raise ValueError("not a serialised MultiOutputMLP")
        if blob.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {blob.get('version')!r}")
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        net = cls(tuple(np.asarray(w, dtype=float) for w in blob["weights"]),
                  tuple(np.asarray(b, dtype=float) for b in blob["biases"]),
                  arr(blob["x_mean"]), arr(blob["x_scale"]), tuple(blob.get("loss_history", ())))
        if list(net.widths) != list(blob["widths"]):
            raise ValueError("declared widths do not match parameter shapes")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MultiOutputMLP":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_mlp(widths: Sequence[int], seed, zero_output: bool = False) -> MultiOutputMLP:
    """He-style uniform initialisation, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases.

    With ``zero_output`` the output layer starts at zero, so the initial
    network is the constant 0 (hidden layers are drawn as usual).
    """
    widths = tuple(int(p) for p in widths)
    if len(widths) < 3:
        raise ValueError("need input, at least one hidden layer, and output widths")
    if any(p < 1 for p in widths):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    last = len(widths) - 2
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 0.0 if zero_output and layer == last else np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MultiOutputMLP(tuple(weights), tuple(biases))


def _forward_cache(net, x):
    acts = [x]
    pre = []
    h = x
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if layer == last else np.maximum(z, 0.0)
        acts.append(h)
    return pre, acts


def forward(net: MultiOutputMLP, x) -> np.ndarray:
    """Network output for one covariate vector (returns ``(J,)``) or a matrix of rows (``(n, J)``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != net.widths[0]:
        raise ValueError(f"expected {net.widths[0]} covariates, got {x2.shape[1]}")
    out = _forward_cache(net, net.standardize(x2))[1][-1]
    return out[0] if single else out


def _targets(phi) -> np.ndarray:
    return np.asarray(getattr(phi, "values", phi), dtype=float)


def loss(net: MultiOutputMLP, x_matrix, phi) -> float:
    """Mean over subjects and outputs of the squared residual."""
    target = _targets(phi)
    pred = forward(net, np.atleast_2d(x_matrix))
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match targets {target.shape}")
    return float(np.mean((target - pred) ** 2))


def _gradient_standardized(net, xs, target):
    pre, acts = _forward_cache(net, xs)
    if acts[-1].shape != target.shape:
        raise ValueError("batch shapes do not conform")
    delta = 2.0 * (acts[-1] - target) / target.size
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    for layer in range(len(net.weights) - 1, -1, -1):
        grads_w[layer] = delta.T @ acts[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ net.weights[layer]) * (pre[layer - 1] > 0)
    return grads_w, grads_b


def gradient(net: MultiOutputMLP, x_batch, phi_batch) -> tuple[list, list]:
    """Exact gradient of the batch loss with respect to ``(weights, biases)``.

    The rectifier's subgradient at zero is taken to be zero.
    """
    xb = np.atleast_2d(np.asarray(x_batch, dtype=float))
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    return _gradient_standardized(net, net.standardize(xb), np.atleast_2d(_targets(phi_batch)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    hidden: tuple = (128, 64, 32)
    standardize: bool = True
    magnitude_bound: Optional[float] = None
    zero_output_init: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam decay rates must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, net: MultiOutputMLP) -> "OptimizerState":
        params = list(net.weights) + list(net.biases)
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def _adam_inplace(params, grads, state, config):
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr = config.learning_rate
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def adam_step(net: MultiOutputMLP, state: OptimizerState, grads, config: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_net, new_state)``; inputs are untouched."""
    grads_w, grads_b = grads
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    new_state = state.copy()
    _adam_inplace(weights + biases, list(grads_w) + list(grads_b), new_state, config)
    return replace(net, weights=tuple(weights), biases=tuple(biases)), new_state


def train(x_matrix, phi, config: TrainConfig = TrainConfig()) -> MultiOutputMLP:
    """Mini-batch Adam on the squared loss, reshuffling every epoch.

    The returned network carries its input standardisation and the per-epoch
    training loss (evaluated on the full training set after each epoch).
    """
    x = np.atleast_2d(np.asarray(x_matrix, dtype=float))
    target = _targets(phi)
    if target.ndim == 1:
        target = target[:, None]
    n = x.shape[0]
    if target.shape[0] != n:
        raise ValueError("x and targets have different row counts")
    if not 1 <= config.batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}]")
    seed_init, seed_shuffle = np.random.SeedSequence(config.seed).spawn(2)
    net = init_mlp((x.shape[1], *config.hidden, target.shape[1]), seed_init, config.zero_output_init)
    if config.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        net = replace(net, x_mean=mean, x_scale=scale)
    xs = net.standardize(x)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    net = replace(net, weights=tuple(weights), biases=tuple(biases))
    params = weights + biases
    bound = config.magnitude_bound
    if bound is not None:
        for p in params:
            np.clip(p, -bound, bound, out=p)
    state = OptimizerState.zeros_like(net)
    rng = np.random.default_rng(seed_shuffle)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            gw, gb = _gradient_standardized(net, xs[idx], target[idx])
            _adam_inplace(params, gw + gb, state, config)
            if bound is not None:
                for p in params:
                    np.clip(p, -bound, bound, out=p)
        current = float(np.mean((_forward_cache(net, xs)[1][-1] - target) ** 2))
        if not np.isfinite(current):
            raise TrainingDivergedError(
                f"non-finite training loss at epoch {epoch} (step {state.step}); "
                f"max |param| = {max(np.max(np.abs(p)) for p in params):.3g}")
        history.append(current)
    for p in params:
        p.setflags(write=False)
    return replace(net, loss_history=tuple(history))


def spectral_norm(matrix: np.ndarray, iters: int = 20, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    v = np.random.default_rng(seed).standard_normal(matrix.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        v = matrix.T @ (matrix @ v)
        norm = np.linalg.norm(v)
        if norm == 0:
            return 0.0
        v /= norm
    return float(np.linalg.norm(matrix @ v))


def lipschitz_bound(net: MultiOutputMLP, iters: int = 20) -> float:
    """Product of per-layer spectral norms (with the standardisation scale folded in)."""
    bound = 1.0
    if net.x_scale is not None:
        bound /= float(np.min(net.x_scale))
    for w in net.weights:
        bound *= spectral_norm(w, iters)
    return bound
