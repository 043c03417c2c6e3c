"""Domain-conditioned gating and the pixel-wise hard-routed expert mixtures.

Routing keeps the forward pass discrete (binary or one-hot per pixel) while
gradients flow through the continuous gate probabilities unchanged — the
straight-through identity `hard - detach(probs) + probs`. Three alternative
gate modes (soft mixing, straight-through Gumbel, top-1 without the
straight-through trick) exist solely for the ablation runner.

`Ar2Moe` selects per pixel between a local-detail and a global-context
expert and adds the input back as a residual. `MdrMoe` selects per pixel one
of three bi-temporal difference primitives — projected subtraction,
concatenation, or multiplication — in that fixed channel order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .experts import GlobalContextExpert, LocalDetailExpert, _he
from .tensor import ContractViolation, Tensor

EMBED_DIM = 16
GATE_MODES = ("ste_hard", "soft", "gumbel", "top1_no_ste")
PRIMITIVES = ("sub", "cat", "mul")


class UnknownDomainError(KeyError):
    """A domain id outside the registered range was supplied."""


class DomainCodebook:
    """Learned embedding table, one row per registered modality pair."""

    def __init__(self, n_domains: int, rng: np.random.Generator,
                 embed_dim: int = EMBED_DIM):
        self.n_domains = n_domains
        self.embed_dim = embed_dim
        self.table = Tensor(rng.standard_normal((n_domains, embed_dim)) * 0.5,
                            requires_grad=True)

    def embed(self, domain_id: int) -> Tensor:
        if not 0 <= domain_id < self.n_domains:
            raise UnknownDomainError(
                f"domain {domain_id} not registered (have {self.n_domains})")
        return T.take_row(self.table, domain_id)

    def parameters(self):
        return [("embed", self.table, False)]


class GateNetwork:
    """probs = sigmoid(W_g(gamma(z) * phi(x) + beta(z))) per pixel.

    phi is a 1x1 projection to a hidden width of C_in/4 (floor 8); gamma and
    beta are per-gate affine heads on the shared domain embedding, applied
    channel-wise to the projected features. `grid_pool` > 1 average-pools the
    logits over square cells and nearest-upsamples back, coarsening the
    routing granularity.
    """

    def __init__(self, in_channels: int, k_out: int, rng: np.random.Generator,
                 embed_dim: int = EMBED_DIM, grid_pool: int = 1):
        self.in_channels = in_channels
        self.k_out = k_out
        self.grid_pool = grid_pool
        hidden = max(8, in_channels // 4)
        self.hidden = hidden
        self.phi_w = Tensor(_he(rng, (hidden, in_channels, 1, 1), in_channels),
                            requires_grad=True)
        self.phi_b = Tensor(np.zeros(hidden), requires_grad=True)
        self.wg = Tensor(rng.standard_normal((k_out, hidden, 1, 1))
                         * (0.1 / np.sqrt(hidden)), requires_grad=True)
        self.wg_b = Tensor(np.zeros(k_out), requires_grad=True)
        # FiLM heads: gamma starts at 1 (identity modulation), beta at 0
        self.gamma_w = Tensor(rng.standard_normal((hidden, embed_dim, 1, 1))
                              * 0.05, requires_grad=True)
        self.gamma_b = Tensor(np.ones(hidden), requires_grad=True)
        self.beta_w = Tensor(rng.standard_normal((hidden, embed_dim, 1, 1))
                             * 0.05, requires_grad=True)
        self.beta_b = Tensor(np.zeros(hidden), requires_grad=True)

    def logits(self, x: Tensor, z_embed: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ContractViolation(
                f"gate built for {self.in_channels} channels, got {x.shape[1]}")
        z = T.reshape(z_embed, (1, z_embed.shape[0], 1, 1))
        gamma = T.conv2d_pointwise(z, self.gamma_w, self.gamma_b)
        beta = T.conv2d_pointwise(z, self.beta_w, self.beta_b)
        feat = T.conv2d_pointwise(x, self.phi_w, self.phi_b)
        feat = T.add(T.mul(gamma, feat), beta)
        logits = T.conv2d_pointwise(feat, self.wg, self.wg_b)
        if self.grid_pool > 1:
            logits = _grid_coarsen(logits, self.grid_pool)
        return logits

    def probs(self, x: Tensor, z_embed: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x, z_embed))

    def parameters(self):
        return [("phi_w", self.phi_w, True), ("phi_b", self.phi_b, False),
                ("wg", self.wg, True), ("wg_b", self.wg_b, False),
                ("gamma_w", self.gamma_w, True), ("gamma_b", self.gamma_b, False),
                ("beta_w", self.beta_w, True), ("beta_b", self.beta_b, False)]


def _grid_coarsen(logits: Tensor, k: int) -> Tensor:
    pooled = T.avg_pool2d(logits, k)
    out = pooled
    steps = 0
    kk = k
    while kk > 1:
        if kk % 2:
            raise ContractViolation("grid_pool must be a power of two")
        out = T.upsample_nearest2x(out)
        kk //= 2
        steps += 1
    return out


# ---------------------------------------------------------------------------
# straight-through routing ops
# ---------------------------------------------------------------------------

def ste_binary(g: Tensor) -> Tensor:
    """Hard threshold at 0.5 in the forward pass, identity gradient back.

    Exactly 0.5 routes to mask 0 (strict inequality).
    """
    ind = Tensor((g.data > 0.5).astype(np.float64))
    return T.add(T.sub(ind, g.detach()), g)


def ste_top1(pi: Tensor) -> Tensor:
    """One-hot argmax over channels forward, identity gradient back.

    Ties route to the lowest index. Every channel of pi receives the
    upstream gradient of its mask channel.
    """
    if pi.shape[1] < 2:
        raise ContractViolation("ste_top1 needs K >= 2 channels")
    onehot = _onehot_argmax(pi.data)
    return T.add(T.sub(Tensor(onehot), pi.detach()), pi)


def _onehot_argmax(p: np.ndarray) -> np.ndarray:
    idx = p.argmax(axis=1)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
    return onehot


def top1_no_ste(pi: Tensor) -> Tensor:
    """One-hot argmax with no gradient path at all (the broken baseline)."""
    return Tensor(_onehot_argmax(pi.data))


def binary_no_ste(g: Tensor) -> Tensor:
    return Tensor((g.data > 0.5).astype(np.float64))


def gumbel_top1(logits: Tensor, tau: float,
                rng: np.random.Generator | None = None,
                noise: bool = True) -> Tensor:
    """Straight-through Gumbel-softmax over the channel axis.

    Forward is the hard one-hot of the (perturbed) logits; backward follows
    the temperature-tau softmax.
    """
    if tau <= 0:
        raise ContractViolation(f"gumbel temperature must be positive, got {tau}")
    z = logits
    if noise:
        if rng is None:
            raise ContractViolation("gumbel noise requested without an rng")
        u = rng.uniform(1e-12, 1.0, size=logits.shape)
        z = T.add(logits, Tensor(-np.log(-np.log(u))))
    soft = T.softmax_channels(z * (1.0 / tau))
    onehot = _onehot_argmax(soft.data)
    return T.add(T.sub(Tensor(onehot), soft.detach()), soft)


def gumbel_binary(logit: Tensor, tau: float,
                  rng: np.random.Generator | None = None,
                  noise: bool = True) -> Tensor:
    """Binary straight-through Gumbel: logistic noise on the logit."""
    if tau <= 0:
        raise ContractViolation(f"gumbel temperature must be positive, got {tau}")
    z = logit
    if noise:
        if rng is None:
            raise ContractViolation("gumbel noise requested without an rng")
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=logit.shape)
        z = T.add(logit, Tensor(np.log(u) - np.log1p(-u)))
    soft = T.sigmoid(z * (1.0 / tau))
    ind = Tensor((soft.data > 0.5).astype(np.float64))
    return T.add(T.sub(ind, soft.detach()), soft)


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

@dataclass
class RoutingDecision:
    """Per-pixel routing outcome of one mixture block.

    probs holds the continuous gate output ([B,1,H,W] for the two-expert
    block, [B,3,H,W] for the primitive block); hard_mask the forward-pass
    selection (None in soft mode); selection_rate the fraction of pixels
    routed to each expert, in expert order.
    """

    kind: str  # "ar2" | "mdr"
    probs: Tensor
    hard_mask: Tensor | None
    selection_rate: np.ndarray = field(default=None)

    def entropy_distribution(self, normalized: bool = True) -> Tensor:
        """Per-pixel distribution over experts for the entropy penalty.

        For the two-expert gate this is [1-g, g]. For the primitive gate the
        sigmoid scores are renormalized to sum 1 across K unless
        `normalized=False`, which keeps the raw sigmoid values.
        """
        if self.kind == "ar2":
            return T.concat_channels(1.0 - self.probs, self.probs)
        if normalized:
            total = T.tsum(self.probs, axis=1, keepdims=True)
            return T.div(self.probs, T.clamp_min(total, 1e-12))
        return self.probs


def _rates_binary(mask: np.ndarray) -> np.ndarray:
    r = float(mask.mean())
    return np.array([1.0 - r, r])


def _rates_topk(mask: np.ndarray) -> np.ndarray:
    return mask.mean(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# mixture blocks
# ---------------------------------------------------------------------------

class Ar2Moe:
    """Pixel-wise routed pair of receptive-field experts with residual.

    y = (1 - M) * local(x) + M * global(x) + x, M in {0,1} per pixel in the
    forward pass (mode-dependent), so y - x is exactly one expert's output
    at every pixel, never a blend.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 mode: str = "ste_hard", grid_pool: int = 1,
                 embed_dim: int = EMBED_DIM, tau: float = 1.0):
        if mode not in GATE_MODES:
            raise ContractViolation(f"unknown gate mode {mode!r}")
        self.mode = mode
        self.tau = tau
        self.local = LocalDetailExpert(channels, rng)
        self.global_ = GlobalContextExpert(channels, rng)
        self.gate = GateNetwork(channels, 1, rng, embed_dim=embed_dim,
                                grid_pool=grid_pool)

    def forward(self, x: Tensor, z_embed: Tensor,
                rng: np.random.Generator | None = None):
        logits = self.gate.logits(x, z_embed)
        g = T.sigmoid(logits)
        e_local = self.local.forward(x)
        e_global = self.global_.forward(x)

        if self.mode == "ste_hard":
            m = ste_binary(g)
        elif self.mode == "soft":
            m = g
        elif self.mode == "gumbel":
            m = gumbel_binary(logits, self.tau, rng)
        else:  # top1_no_ste
            m = binary_no_ste(g)

        y = T.add(T.add(T.mul(1.0 - m, e_local), T.mul(m, e_global)), x)
        if self.mode == "soft":
            decision = RoutingDecision("ar2", g, None,
                                       _rates_binary(g.data > 0.5))
        else:
            decision = RoutingDecision("ar2", g, m, _rates_binary(m.data))
        return y, decision

    def parameters(self):
        out = []
        for prefix, mod in (("local", self.local), ("global", self.global_),
                            ("gate", self.gate)):
            out += [(f"{prefix}.{n}", p, d) for n, p, d in mod.parameters()]
        return out


class MdrMoe:
    """Pixel-wise routed library of bi-temporal difference primitives.

    Primitive order is fixed: projected subtraction, projected channel
    concatenation, projected elementwise product. The gate reads the
    concatenated feature pair plus the shared domain code.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 mode: str = "ste_hard", grid_pool: int = 1,
                 embed_dim: int = EMBED_DIM, tau: float = 1.0):
        if mode not in GATE_MODES:
            raise ContractViolation(f"unknown gate mode {mode!r}")
        self.mode = mode
        self.tau = tau
        self.channels = channels
        c = channels
        self.proj_sub = Tensor(_he(rng, (c, c, 1, 1), c), requires_grad=True)
        self.bias_sub = Tensor(np.zeros(c), requires_grad=True)
        self.proj_cat = Tensor(_he(rng, (c, 2 * c, 1, 1), 2 * c),
                               requires_grad=True)
        self.bias_cat = Tensor(np.zeros(c), requires_grad=True)
        self.proj_mul = Tensor(_he(rng, (c, c, 1, 1), c), requires_grad=True)
        self.bias_mul = Tensor(np.zeros(c), requires_grad=True)
        self.gate = GateNetwork(2 * c, 3, rng, embed_dim=embed_dim,
                                grid_pool=grid_pool)

    def primitives(self, f1: Tensor, f2: Tensor) -> list[Tensor]:
        pair = T.concat_channels(f1, f2)
        return [
            T.conv2d_pointwise(T.sub(f1, f2), self.proj_sub, self.bias_sub),
            T.conv2d_pointwise(pair, self.proj_cat, self.bias_cat),
            T.conv2d_pointwise(T.mul(f1, f2), self.proj_mul, self.bias_mul),
        ]

    def forward(self, f1: Tensor, f2: Tensor, z_embed: Tensor,
                rng: np.random.Generator | None = None):
        if f1.shape != f2.shape:
            raise ContractViolation(
                f"feature pair shape mismatch: {f1.shape} vs {f2.shape}")
        pair = T.concat_channels(f1, f2)
        logits = self.gate.logits(pair, z_embed)
        pi = T.sigmoid(logits)
        prims = self.primitives(f1, f2)

        if self.mode == "ste_hard":
            z = ste_top1(pi)
        elif self.mode == "soft":
            total = T.tsum(pi, axis=1, keepdims=True)
            z = T.div(pi, T.clamp_min(total, 1e-12))
        elif self.mode == "gumbel":
            z = gumbel_top1(logits, self.tau, rng)
        else:  # top1_no_ste
            z = top1_no_ste(pi)

        out = None
        for k, prim in enumerate(prims):
            term = T.mul(T.slice_channels(z, k, k + 1), prim)
            out = term if out is None else T.add(out, term)

        if self.mode == "soft":
            decision = RoutingDecision("mdr", pi, None,
                                       _rates_topk(_onehot_argmax(pi.data)))
        else:
            decision = RoutingDecision("mdr", pi, z, _rates_topk(z.data))
        return out, decision

    def parameters(self):
        out = [("proj_sub", self.proj_sub, True), ("bias_sub", self.bias_sub, False),
               ("proj_cat", self.proj_cat, True), ("bias_cat", self.bias_cat, False),
               ("proj_mul", self.proj_mul, True), ("bias_mul", self.bias_mul, False)]
        out += [(f"gate.{n}", p, d) for n, p, d in self.gate.parameters()]
        return out


class StaticFusion:
    """Non-routed fusion baselines for the ablations.

    kind "concat" is the naive concat block (projection of [f1,f2], no
    routing at all); "sub"/"cat"/"mul" force one primitive statically.
    """

    def __init__(self, channels: int, rng: np.random.Generator, kind: str):
        if kind not in ("concat", "sub", "cat", "mul"):
            raise ContractViolation(f"unknown static fusion {kind!r}")
        self.kind = kind
        self.channels = channels
        c = channels
        cin = 2 * c if kind in ("concat", "cat") else c
        self.proj = Tensor(_he(rng, (c, cin, 1, 1), cin), requires_grad=True)
        self.bias = Tensor(np.zeros(c), requires_grad=True)

    def forward(self, f1: Tensor, f2: Tensor, z_embed=None, rng=None):
        if f1.shape != f2.shape:
            raise ContractViolation(
                f"feature pair shape mismatch: {f1.shape} vs {f2.shape}")
        if self.kind in ("concat", "cat"):
            raw = T.concat_channels(f1, f2)
        elif self.kind == "sub":
            raw = T.sub(f1, f2)
        else:
            raw = T.mul(f1, f2)
        return T.conv2d_pointwise(raw, self.proj, self.bias), None

    def parameters(self):
        return [("proj", self.proj, True), ("bias", self.bias, False)]


def soft_mix(probs: Tensor, expert_outputs: list[Tensor]) -> Tensor:
    """Probability-weighted sum of expert outputs (the soft-gating row).

    For K outputs the probability channels are renormalized to sum 1; for a
    single-logit binary gate the weights are (1-p, p).
    """
    k = len(expert_outputs)
    if probs.shape[1] == 1 and k == 2:
        weights = [1.0 - probs, probs]
    else:
        if probs.shape[1] != k:
            raise ContractViolation(
                f"{k} experts but {probs.shape[1]} probability channels")
        total = T.tsum(probs, axis=1, keepdims=True)
        norm = T.div(probs, T.clamp_min(total, 1e-12))
        weights = [T.slice_channels(norm, i, i + 1) for i in range(k)]
    out = None
    for w, e in zip(weights, expert_outputs):
        term = T.mul(w, e)
        out = term if out is None else T.add(out, term)
    return out
