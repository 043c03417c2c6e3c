"""Domain-specific batch normalization.

One set of affine parameters and running statistics per registered domain;
a forward pass touches only the branch of the batch's domain, so cross-domain
state stays bit-identical. Batches must be domain-homogeneous — mixed batches
are rejected rather than split.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .routing import UnknownDomainError
from .tensor import ContractViolation, Tensor


class DsbnLayer:
    """Per-domain batch norm over the (B, H, W) extents of [B,C,H,W] input.

    Train mode normalizes by the biased batch statistics and folds them into
    the domain's running mean/var with momentum 0.1; eval mode normalizes by
    the running statistics. The affine transform is applied last and is the
    only learned part.
    """

    def __init__(self, channels: int, n_domains: int,
                 momentum: float = 0.1, epsilon: float = 1e-5):
        self.channels = channels
        self.n_domains = n_domains
        self.momentum = momentum
        self.epsilon = epsilon
        self.gammas = [Tensor(np.ones(channels), requires_grad=True)
                       for _ in range(n_domains)]
        self.betas = [Tensor(np.zeros(channels), requires_grad=True)
                      for _ in range(n_domains)]
        self.running_mean = [np.zeros(channels) for _ in range(n_domains)]
        self.running_var = [np.ones(channels) for _ in range(n_domains)]

    def _resolve_domain(self, z) -> int:
        if isinstance(z, (int, np.integer)):
            d = int(z)
        else:
            ids = [int(v) for v in z]
            if not ids:
                raise ContractViolation("empty domain-id batch")
            if any(i != ids[0] for i in ids):
                raise ContractViolation(
                    f"mixed-domain batch rejected: {sorted(set(ids))}")
            d = ids[0]
        if not 0 <= d < self.n_domains:
            raise UnknownDomainError(
                f"domain {d} not registered (have {self.n_domains})")
        return d

    def forward(self, x: Tensor, z, training: bool) -> Tensor:
        if x.data.ndim != 4:
            raise ContractViolation("dsbn expects a rank-4 tensor")
        if x.shape[1] != self.channels:
            raise ContractViolation(
                f"layer built for {self.channels} channels, got {x.shape[1]}")
        d = self._resolve_domain(z)

        if training:
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            centered = T.sub(x, mu)
            var = T.tmean(T.mul(centered, centered), axis=(0, 2, 3),
                          keepdims=True)
            xhat = T.div(centered, T.sqrt(var + self.epsilon))
            m = self.momentum
            self.running_mean[d] = ((1.0 - m) * self.running_mean[d]
                                    + m * mu.data.reshape(-1))
            self.running_var[d] = ((1.0 - m) * self.running_var[d]
                                   + m * var.data.reshape(-1))
        else:
            mu = Tensor(self.running_mean[d].reshape(1, -1, 1, 1))
            std = Tensor(np.sqrt(self.running_var[d] + self.epsilon)
                         .reshape(1, -1, 1, 1))
            xhat = T.div(T.sub(x, mu), std)

        gamma = T.reshape(self.gammas[d], (1, self.channels, 1, 1))
        beta = T.reshape(self.betas[d], (1, self.channels, 1, 1))
        return T.add(T.mul(gamma, xhat), beta)

    def parameters(self):
        out = []
        for d in range(self.n_domains):
            out.append((f"gamma.d{d}", self.gammas[d], False))
            out.append((f"beta.d{d}", self.betas[d], False))
        return out

    def state_arrays(self):
        """Running statistics, for checkpointing."""
        out = []
        for d in range(self.n_domains):
            out.append((f"running_mean.d{d}", self.running_mean[d]))
            out.append((f"running_var.d{d}", self.running_var[d]))
        return out

    def load_state(self, name: str, value: np.ndarray):
        kind, dom = name.rsplit(".d", 1)
        buf = {"running_mean": self.running_mean,
               "running_var": self.running_var}[kind]
        buf[int(dom)] = value.copy()


def dsbn_forward(layer: DsbnLayer, x: Tensor, z, training: bool = True) -> Tensor:
    return layer.forward(x, z, training)
