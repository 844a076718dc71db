"""
Dense numerical substrate for the model: keyed random streams, affine/tanh
layers with hand-derived backward passes, and a finite-difference gradient
checker.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import log_softmax as _log_softmax

from errors import DimensionError

logger = logging.getLogger(__name__)

DenseMatrix = NDArray[np.float64]

ACTIVATIONS = ("tanh", None)


def as_dense(values, ndim: Optional[int] = None, name: str = "matrix") -> DenseMatrix:
    array = np.asarray(values, dtype=np.float64)
    if ndim is not None and array.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise DimensionError(f"{name} contains non-finite entries")
    return array


@dataclass(frozen=True)
class Rng:
    """Splittable random stream: the same (seed, key) always yields the same draws.

    Backed by numpy's counter-based Philox generator, so streams are identical
    on every platform.
    """

    seed: int
    key: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(sequence))


RngLike = Union[Rng, np.random.Generator]


def _as_generator(rng: RngLike) -> np.random.Generator:
    return rng.generator() if isinstance(rng, Rng) else rng


def log_softmax(logits, axis: int = -1) -> DenseMatrix:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise DimensionError("log_softmax needs a non-empty vector")
    # scipy subtracts the running max before exponentiating
    return _log_softmax(logits, axis=axis)


def _check_affine_shapes(W: DenseMatrix, b: DenseMatrix, x: DenseMatrix):
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine shape mismatch: W {W.shape}, b {b.shape}, x {x.shape}"
        )


def affine_forward(W, b, x, activation: Optional[str] = "tanh") -> DenseMatrix:
    """x @ W.T + b for a vector or a row-batch, optionally followed by tanh."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"Unsupported activation: {activation}")
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_affine_shapes(W, b, x)
    out = x @ W.T + b
    return np.tanh(out) if activation == "tanh" else out


def affine_tanh_forward(W, b, x) -> DenseMatrix:
    return affine_forward(W, b, x, activation="tanh")


def affine_linear_forward(W, b, x) -> DenseMatrix:
    return affine_forward(W, b, x, activation=None)


def affine_backward(W, x, y, grad_y, activation: Optional[str] = "tanh"):
    """Returns (dW, db, dx) given the layer input x, its output y and dL/dy."""
    grad_pre = grad_y * (1.0 - y * y) if activation == "tanh" else grad_y
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_pre)
    grad_W = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_pre @ W
    return grad_W, grad_b, grad_x


def glorot_uniform(fan_in: int, fan_out: int, rng: RngLike) -> DenseMatrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return _as_generator(rng).uniform(-limit, limit, size=(fan_out, fan_in))


class Mlp:
    """Affine layers with tanh on every hidden layer and a linear output layer."""

    def __init__(self, weights: List[DenseMatrix], biases: List[DenseMatrix]):
        if not weights or len(weights) != len(biases):
            raise DimensionError("an Mlp needs matching, non-empty weight and bias lists")
        weights = [as_dense(W, 2, f"layer {i} weight") for i, W in enumerate(weights)]
        biases = [as_dense(b, 1, f"layer {i} bias") for i, b in enumerate(biases)]
        for i, (W, b) in enumerate(zip(weights, biases)):
            if b.shape != (W.shape[0],):
                raise DimensionError(f"layer {i}: bias {b.shape} does not match weight {W.shape}")
            if i > 0 and W.shape[1] != weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i}: input width {W.shape[1]} != {weights[i - 1].shape[0]}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def initialize(cls, dims: Sequence[int], rng: Rng) -> "Mlp":
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DimensionError(f"invalid layer sizes: {list(dims)}")
        weights = [glorot_uniform(dims[i], dims[i + 1], rng.child(i)) for i in range(len(dims) - 1)]
        biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        return cls(weights, biases)

    @property
    def dims(self) -> List[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def _activation(self, layer: int) -> Optional[str]:
        return None if layer == self.n_layers - 1 else "tanh"

    def parameters(self, prefix: str) -> Dict[str, DenseMatrix]:
        params = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.{i}.weight"] = W
            params[f"{prefix}.{i}.bias"] = b
        return params

    def forward(self, x) -> Tuple[DenseMatrix, List[DenseMatrix]]:
        activations = [np.asarray(x, dtype=np.float64)]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            activations.append(affine_forward(W, b, activations[-1], self._activation(i)))
        return activations[-1], activations

    def backward(self, activations: List[DenseMatrix], grad_out: DenseMatrix, prefix: str):
        grads = {}
        grad = grad_out
        for i in reversed(range(self.n_layers)):
            grad_W, grad_b, grad = affine_backward(
                self.weights[i], activations[i], activations[i + 1], grad, self._activation(i)
            )
            grads[f"{prefix}.{i}.weight"] = grad_W
            grads[f"{prefix}.{i}.bias"] = grad_b
        return grads, grad

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])


def standard_normal(rng: RngLike, shape) -> DenseMatrix:
    return _as_generator(rng).standard_normal(shape)


def sample_gaussian(mu, sigma, rng: RngLike) -> DenseMatrix:
    """Reparameterized draw mu + sigma * eps with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise DimensionError(f"mean {mu.shape} and scale {sigma.shape} differ in shape")
    if np.any(sigma <= 0):
        raise ValueError("sample_gaussian needs a strictly positive scale")
    return mu + sigma * standard_normal(rng, mu.shape)


def grad_check(
    func: Callable[[DenseMatrix], Tuple[float, DenseMatrix]],
    point,
    h: float = 1e-5,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    `func(p)` returns (value, analytic gradient). The error of each
    coordinate is |numeric - analytic| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    point = np.array(point, dtype=np.float64).ravel()
    _, analytic = func(point)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != point.shape:
        raise DimensionError(f"gradient shape {analytic.shape} != point shape {point.shape}")

    numeric = np.empty_like(point)
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + h
        f_plus, _ = func(shifted)
        shifted[i] = point[i] - h
        f_minus, _ = func(shifted)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"function is not finite at the shifted points of coordinate {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    if point.size == 0:
        return 0.0
    errors = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))
    worst = int(np.argmax(errors))
    logger.debug(f"grad_check: worst coordinate {worst}, relative error {errors[worst]:.3e}")
    return float(errors[worst])
