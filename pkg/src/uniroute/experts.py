"""Receptive-field expert blocks.

Two complementary experts share one interface: map [B,C,H,W] -> [B,C,H,W].
The local-detail expert is a depthwise-separable 3x3 block (influence radius
1 pixel); the global-context expert composes a 5x5 depthwise conv, a 5x5
depthwise conv at dilation 3, and a pointwise mix, then modulates the input
multiplicatively — composed support 17x17 (radius 8). GELU follows each
expert's pointwise stage; `activation=False` disables it so delta/identity
parameterizations reproduce the input exactly in tests.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

GLOBAL_DILATION = 3  # fixed dilation rate of the global expert's second conv


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class LocalDetailExpert:
    """Depthwise 3x3 (dilation 1) then pointwise 1x1 channel mix."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 activation: bool = True):
        self.channels = channels
        self.activation = activation
        self.dw = Tensor(_he(rng, (channels, 1, 3, 3), 9), requires_grad=True)
        self.pw = Tensor(_he(rng, (channels, channels, 1, 1), channels),
                         requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ContractViolation(
                f"expert built for {self.channels} channels, got {x.shape[1]}")
        y = T.conv2d_depthwise(x, self.dw, dilation=1)
        y = T.conv2d_pointwise(y, self.pw, self.bias)
        if self.activation:
            y = T.gelu(y)
        return y

    def parameters(self):
        return [("dw", self.dw, False), ("pw", self.pw, True),
                ("bias", self.bias, False)]


class GlobalContextExpert:
    """Decomposed large-context branch gating the input multiplicatively.

    branch = pointwise(depthwise_5x5_d3(depthwise_5x5(x))); output is
    branch * x, so a zero input annihilates the output regardless of
    parameters.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 activation: bool = True):
        self.channels = channels
        self.activation = activation
        self.dw = Tensor(_he(rng, (channels, 1, 5, 5), 25), requires_grad=True)
        self.dilated = Tensor(_he(rng, (channels, 1, 5, 5), 25),
                              requires_grad=True)
        self.pw = Tensor(_he(rng, (channels, channels, 1, 1), channels),
                         requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ContractViolation(
                f"expert built for {self.channels} channels, got {x.shape[1]}")
        y = T.conv2d_depthwise(x, self.dw, dilation=1)
        y = T.conv2d_depthwise(y, self.dilated, dilation=GLOBAL_DILATION)
        y = T.conv2d_pointwise(y, self.pw, self.bias)
        if self.activation:
            y = T.gelu(y)
        return T.mul(y, x)

    def parameters(self):
        return [("dw", self.dw, False), ("dilated", self.dilated, False),
                ("pw", self.pw, True), ("bias", self.bias, False)]


def local_expert_forward(expert: LocalDetailExpert, x: Tensor) -> Tensor:
    return expert.forward(x)


def global_expert_forward(expert: GlobalContextExpert, x: Tensor) -> Tensor:
    return expert.forward(x)
