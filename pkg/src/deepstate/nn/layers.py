"""Dense, LSTM and dropout layers built on :mod:`deepstate.nn.autodiff`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


def glorot_uniform(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseLayer:
    """Fully connected layer ``activation(W x + b)`` with W of shape (out, in)."""

    def __init__(self, weight, bias, activation="identity", name="dense"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"{name}: weight {weight.shape} inconsistent with bias {bias.shape}")
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.activation = activation
        self.weight = ad.parameter(weight, f"{name}.weight")
        self.bias = ad.parameter(bias, f"{name}.bias")

    @classmethod
    def init(cls, rng, n_in, n_out, activation="identity", name="dense"):
        return cls(glorot_uniform(rng, n_out, n_in), np.zeros(n_out), activation, name)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x):
        return ad.ACTIVATIONS[self.activation](ad.linear(x, self.weight, self.bias))


def dense_forward(layer, x):
    return layer(x)


class LstmCell:
    """LSTM cell with stacked gate parameters.

    ``weight`` has shape (4H, D_in + H); rows are the input, forget, output
    and candidate gates in that order.
    """

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, weight, bias, name="lstm"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] % 4 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"{name}: bad LSTM parameter shapes {weight.shape}, {bias.shape}")
        self.hidden_size = weight.shape[0] // 4
        if weight.shape[1] <= self.hidden_size:
            raise ShapeError(f"{name}: weight must have H + D_in columns")
        self.name = name
        self.weight = ad.parameter(weight, f"{name}.weight")
        self.bias = ad.parameter(bias, f"{name}.bias")

    @classmethod
    def init(cls, rng, n_in, hidden, forget_bias=1.0, name="lstm"):
        limit = np.sqrt(6.0 / (n_in + 2 * hidden))
        weight = rng.uniform(-limit, limit, size=(4 * hidden, n_in + hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = forget_bias
        return cls(weight, bias, name)

    @property
    def input_size(self):
        return self.weight.shape[1] - self.hidden_size

    def gate(self, which):
        """Return (weight, bias) arrays of one gate."""
        k = self.GATES.index(which)
        H = self.hidden_size
        return self.weight.value[k * H:(k + 1) * H], self.bias.value[k * H:(k + 1) * H]

    def parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x, h, c):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.input_size}")
        hc = ad.lstm_cell(x, h, c, self.weight, self.bias)
        H = self.hidden_size
        return hc[..., :H], hc[..., H:]


def lstm_step(cell, x, h, c):
    return cell(x, h, c)


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.1
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def dropout(x, spec, rng):
    """Inverted dropout; identity when ``spec.training`` is False or rate is 0."""
    if not spec.training or spec.rate == 0.0:
        return ad.as_tensor(x)
    keep = 1.0 - spec.rate
    shape = x.shape if isinstance(x, Tensor) else np.shape(x)
    mask = (rng.random(shape) < keep) / keep
    return ad.mul(x, mask)
