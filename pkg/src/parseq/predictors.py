"""Noise predictors: the epsilon models the sampling chain queries.

Every predictor is a pure function of (x, t) together with a hand-written
vector-Jacobian product, so the gradient machinery needs no autodiff
framework.  ``predict`` consumes a state of shape (D,) and a natural
timestep label t; ``vjp`` pulls a cotangent of shape (D,) back through the
Jacobian at that same point.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod

import numpy as np

from .errors import ParseError, SchemaError, ShapeError
from .schedule import DiffusionSchedule


class NoisePredictor(ABC):
    """Interface shared by all epsilon models."""

    #: State dimension D.
    dim: int

    @abstractmethod
    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        """Predicted noise at state x and timestep t; shape (D,)."""

    @abstractmethod
    def vjp(self, x: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray:
        """cotangent^T @ (d predict / d x) evaluated at (x, t); shape (D,)."""

    def _check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected state of shape ({self.dim},), got {x.shape}")
        return x


class ZeroPredictor(NoisePredictor):
    """Predicts zero noise everywhere; Jacobian is identically zero."""

    def __init__(self, dim: int):
        self.dim = int(dim)

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        self._check_state(x)
        return np.zeros(self.dim)

    def vjp(self, x: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray:
        self._check_state(x)
        return np.zeros(self.dim)


class ConstantPredictor(NoisePredictor):
    """Predicts a fixed vector regardless of input; zero Jacobian."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim != 1:
            raise ShapeError("constant value must be 1-d")
        self.dim = int(self.value.size)

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        self._check_state(x)
        return self.value.copy()

    def vjp(self, x: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray:
        self._check_state(x)
        return np.zeros(self.dim)


class GaussianOptimalPredictor(NoisePredictor):
    """Closed-form posterior-mean noise for a diagonal Gaussian data law.

    If x_0 ~ N(mu, diag(var)) and x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps,
    the minimum-mean-square-error estimate of eps given x_t is

        E[eps | x_t] = sqrt(1 - a_t) * (x_t - sqrt(a_t) mu)
                       / (a_t var + (1 - a_t))

    elementwise, with a_t the schedule's signal product at t.  The Jacobian
    is diagonal and state-independent, which makes this the analytic anchor
    for solver and gradient checks.
    """

    def __init__(self, mu: np.ndarray, var: np.ndarray, schedule: DiffusionSchedule):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        if self.mu.ndim != 1 or self.var.shape != self.mu.shape:
            raise ShapeError("mu and var must be 1-d arrays of equal length")
        if np.any(self.var < 0.0):
            raise ShapeError("var entries must be >= 0")
        self.schedule = schedule
        self.dim = int(self.mu.size)

    def _gain(self, t: int) -> tuple[float, np.ndarray]:
        a = self.schedule.alpha_bar(t)
        denom = a * self.var + (1.0 - a)
        return a, np.sqrt(1.0 - a) / denom

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        x = self._check_state(x)
        a, gain = self._gain(t)
        return gain * (x - np.sqrt(a) * self.mu)

    def vjp(self, x: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray:
        self._check_state(x)
        cotangent = np.asarray(cotangent, dtype=np.float64)
        _, gain = self._gain(t)
        return gain * cotangent


class MlpPredictor(NoisePredictor):
    """Small dense network with tanh hidden layers and a linear head.

    The input is the state with the scalar t / t_max appended, so
    ``widths[0] == dim + 1`` and ``widths[-1] == dim``.  ``t_max`` is a
    runtime parameter (normally the chain length T), not part of the
    serialized weights.
    """

    def __init__(
        self,
        widths: list[int],
        weights: list[np.ndarray],
        biases: list[np.ndarray],
        t_max: int = 1000,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise SchemaError("widths must list at least input and output layers")
        if widths[0] != widths[-1] + 1:
            raise SchemaError(
                f"input width {widths[0]} must be output width {widths[-1]} + 1 "
                "(state plus one time slot)"
            )
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise SchemaError("need one weight matrix and bias per layer transition")
        self.weights = []
        self.biases = []
        for layer, (w, b) in enumerate(zip(weights, biases)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (widths[layer + 1], widths[layer]):
                raise SchemaError(
                    f"layer {layer} weight shape {w.shape} does not match widths "
                    f"({widths[layer + 1]}, {widths[layer]})"
                )
            if b.shape != (widths[layer + 1],):
                raise SchemaError(f"layer {layer} bias shape {b.shape} is wrong")
            self.weights.append(w)
            self.biases.append(b)
        self.widths = widths
        self.t_max = int(t_max)
        self.dim = widths[-1]

    def _forward(self, x: np.ndarray, t: int) -> list[np.ndarray]:
        a = np.concatenate([x, [t / self.t_max]])
        acts = [a]
        last = len(self.weights) - 1
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = w @ acts[-1] + b
            acts.append(z if layer == last else np.tanh(z))
        return acts

    def predict(self, x: np.ndarray, t: int) -> np.ndarray:
        x = self._check_state(x)
        return self._forward(x, t)[-1]

    def vjp(self, x: np.ndarray, t: int, cotangent: np.ndarray) -> np.ndarray:
        x = self._check_state(x)
        acts = self._forward(x, t)
        g = np.asarray(cotangent, dtype=np.float64)
        last = len(self.weights) - 1
        for layer in range(last, -1, -1):
            if layer != last:
                # acts[layer + 1] is tanh(z); tanh' = 1 - tanh^2.
                g = g * (1.0 - acts[layer + 1] ** 2)
            g = self.weights[layer].T @ g
        return g[:-1]


def random_mlp(
    dim: int,
    hidden: list[int],
    rng: np.random.Generator,
    t_max: int = 1000,
    scale: float = 1.0,
) -> MlpPredictor:
    """Draw an MlpPredictor with fan-in scaled normal weights."""
    widths = [dim + 1, *hidden, dim]
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * scale / np.sqrt(fan_in))
        biases.append(rng.standard_normal(fan_out) * 0.1 * scale)
    return MlpPredictor(widths, weights, biases, t_max=t_max)


def save_mlp(path: str, predictor: MlpPredictor) -> None:
    """Write MLP weights as JSON; row-major flat lists, one per layer."""
    payload = {
        "widths": predictor.widths,
        "weights": [w.ravel(order="C").tolist() for w in predictor.weights],
        "biases": [b.tolist() for b in predictor.biases],
        "time_embed": "scalar_append",
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_mlp(path: str, t_max: int = 1000, expect_dim: int | None = None) -> MlpPredictor:
    """Load an MLP weight file; reload is bit-identical to what was saved."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"mlp weight file {path} is not valid JSON: {exc}") from exc
    for field in ("widths", "weights", "biases", "time_embed"):
        if field not in payload:
            raise ParseError(f"mlp weight file missing field '{field}'")
    if payload["time_embed"] != "scalar_append":
        raise SchemaError(
            f"unsupported time_embed '{payload['time_embed']}'; expected 'scalar_append'"
        )
    widths = [int(w) for w in payload["widths"]]
    if len(payload["weights"]) != len(widths) - 1:
        raise SchemaError("number of weight matrices does not match widths")
    weights = []
    for layer, flat in enumerate(payload["weights"]):
        rows, cols = widths[layer + 1], widths[layer]
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != rows * cols:
            raise SchemaError(
                f"layer {layer} has {flat.size} weights, expected {rows * cols}"
            )
        weights.append(flat.reshape(rows, cols))
    biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    predictor = MlpPredictor(widths, weights, biases, t_max=t_max)
    if expect_dim is not None and predictor.dim != expect_dim:
        raise SchemaError(
            f"mlp operates on dimension {predictor.dim}, run requested {expect_dim}"
        )
    return predictor


def save_gaussian(path: str, mu: np.ndarray, var: np.ndarray) -> None:
    """Write diagonal Gaussian parameters as JSON {"mu": [...], "var": [...]}."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    with open(path, "w") as fh:
        json.dump({"mu": mu.tolist(), "var": var.tolist()}, fh)


def load_gaussian_params(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read diagonal Gaussian parameters written by save_gaussian."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"gaussian file {path} is not valid JSON: {exc}") from exc
    for field in ("mu", "var"):
        if field not in payload:
            raise ParseError(f"gaussian file missing field '{field}'")
    mu = np.asarray(payload["mu"], dtype=np.float64)
    var = np.asarray(payload["var"], dtype=np.float64)
    if mu.ndim != 1 or var.shape != mu.shape:
        raise SchemaError("mu and var must be equal-length lists")
    return mu, var
