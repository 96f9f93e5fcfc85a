"""Linear layers and MLPs on top of :mod:`gto.autodiff`."""

import math

import numpy as np

from . import autodiff as ad


class Linear:
    """Affine map ``x @ W + b``.

    Weights default to uniform fan-in scaling ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    Passing ``gain`` switches to Xavier-uniform with that gain.
    """

    def __init__(self, fan_in, fan_out, rng, gain=None):
        if gain is None:
            bound = 1.0 / math.sqrt(max(fan_in, 1))
        else:
            bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = ad.parameter(np.zeros((1, fan_out)))

    @property
    def fan_in(self):
        return self.weight.rows

    @property
    def fan_out(self):
        return self.weight.cols

    def __call__(self, x):
        return ad.affine(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class MLP:
    """``in -> hidden -> hidden -> out`` with an activation after each hidden layer."""

    def __init__(self, fan_in, hidden, fan_out, rng, activation="silu", out_gain=None):
        self.layers = [
            Linear(fan_in, hidden, rng),
            Linear(hidden, hidden, rng),
            Linear(hidden, fan_out, rng, gain=out_gain),
        ]
        self.activation = activation

    @property
    def fan_in(self):
        return self.layers[0].fan_in

    @property
    def fan_out(self):
        return self.layers[-1].fan_out

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.activation(layer(x), self.activation)
        return self.layers[-1](x)

    def macs(self, rows=1):
        """Multiply-adds for ``rows`` input rows."""
        return rows * sum(l.fan_in * l.fan_out for l in self.layers)

    def named_parameters(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}.{i}"))
        return out

    def zero_(self):
        for layer in self.layers:
            layer.weight.data[...] = 0
            layer.bias.data[...] = 0


def mlp_macs(fan_in, hidden, fan_out):
    return fan_in * hidden + hidden * hidden + hidden * fan_out
