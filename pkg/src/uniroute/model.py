"""The change-detection network and its checkpoint container.

Siamese encoder (shared weights, shared DSBN branches) over a stem and four
stride-2 stages at 16/32/64/128 channels, with a routed receptive-field
expert block at configurable stages; one difference-routing block per stage
fuses the bi-temporal feature pair; a minimal top-down decoder upsamples and
merges the fused maps into a change-logit map at input resolution.

The two temporal branches run as one batch-stacked encoder pass, so each
routing block and each normalization layer fires exactly once per forward.

Checkpoints are a versioned binary container: magic "URKT", format version,
a named-array manifest, then raw little-endian float64 blobs. Layout details
in docs/formats.md.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .experts import _he
from .normalization import DsbnLayer
from .routing import (
    Ar2Moe, DomainCodebook, GATE_MODES, MdrMoe, StaticFusion,
)
from .tensor import ContractViolation, Tensor

CHECKPOINT_MAGIC = b"URKT"
CHECKPOINT_VERSION = 1

STAGE_CHANNELS = (16, 32, 64, 128)
FUSION_MODES = ("mdr", "concat_only", "sub_only", "cat_only", "mul_only")


class UniRouteNet:
    """Bi-temporal change detector with routed experts and routed fusion."""

    def __init__(self, n_domains: int = 3, seed: int = 0,
                 ar2_stages=(2, 3, 4), gate_mode: str = "ste_hard",
                 fusion: str = "mdr", grid_pool: int = 1,
                 decoder_channels: int = 32, in_channels: int = 3,
                 embed_dim: int = 16, tau: float = 1.0):
        if gate_mode not in GATE_MODES:
            raise ContractViolation(f"unknown gate mode {gate_mode!r}")
        if fusion not in FUSION_MODES:
            raise ContractViolation(f"unknown fusion mode {fusion!r}")
        self.n_domains = n_domains
        self.seed = seed
        self.ar2_stages = tuple(sorted(ar2_stages))
        self.gate_mode = gate_mode
        self.fusion = fusion
        self.grid_pool = grid_pool
        self.decoder_channels = decoder_channels
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.tau = tau
        self.training = True

        rng = np.random.default_rng(seed)
        self.codebook = DomainCodebook(n_domains, rng, embed_dim)
        c0 = STAGE_CHANNELS[0]
        self.stem_w = Tensor(_he(rng, (c0, in_channels, 3, 3),
                                 in_channels * 9), requires_grad=True)
        self.stem_b = Tensor(np.zeros(c0), requires_grad=True)

        self.stage_convs = []
        self.stage_bns = []
        self.ar2_blocks = {}
        prev = c0
        for s, c in enumerate(STAGE_CHANNELS, start=1):
            w = Tensor(_he(rng, (c, prev, 3, 3), prev * 9), requires_grad=True)
            b = Tensor(np.zeros(c), requires_grad=True)
            self.stage_convs.append((w, b))
            self.stage_bns.append(DsbnLayer(c, n_domains))
            if s in self.ar2_stages:
                self.ar2_blocks[s] = Ar2Moe(c, rng, mode=gate_mode,
                                            grid_pool=grid_pool,
                                            embed_dim=embed_dim, tau=tau)
            prev = c

        self.fusion_blocks = []
        for c in STAGE_CHANNELS:
            if fusion == "mdr":
                self.fusion_blocks.append(MdrMoe(c, rng, mode=gate_mode,
                                                 grid_pool=grid_pool,
                                                 embed_dim=embed_dim, tau=tau))
            elif fusion == "concat_only":
                self.fusion_blocks.append(StaticFusion(c, rng, "concat"))
            else:
                self.fusion_blocks.append(
                    StaticFusion(c, rng, fusion.removesuffix("_only")))

        cd = decoder_channels
        self.adapters = []
        self.dec_bns = []
        for c in STAGE_CHANNELS:
            w = Tensor(_he(rng, (cd, c, 1, 1), c), requires_grad=True)
            b = Tensor(np.zeros(cd), requires_grad=True)
            self.adapters.append((w, b))
            self.dec_bns.append(DsbnLayer(cd, n_domains))
        # zero-initialized head: the net starts at probability 0.5 everywhere
        self.head_w = Tensor(np.zeros((1, cd, 1, 1)), requires_grad=True)
        self.head_b = Tensor(np.zeros(1), requires_grad=True)

    # -- mode -------------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    # -- forward ----------------------------------------------------------

    def forward(self, t1: Tensor, t2: Tensor, domain_id: int,
                rng: np.random.Generator | None = None):
        """Returns (logits [B,1,H,W], per-stage (f1, f2) pairs, decisions).

        Decision order: expert-routing blocks in stage order, then fusion
        blocks for stages 1..4 (fixed; the routing-map exporter indexes it).
        """
        if t1.shape != t2.shape:
            raise ContractViolation(
                f"temporal pair shape mismatch: {t1.shape} vs {t2.shape}")
        b, c, h, w = t1.shape
        if h % 16 or w % 16:
            raise ContractViolation(
                f"spatial size {(h, w)} must be divisible by 16")
        z = self.codebook.embed(domain_id)

        x = T.concat_batch(t1, t2)  # both branches share every weight
        x = T.conv2d(x, self.stem_w, self.stem_b)
        ar2_decisions = []
        pair_feats = []
        for s in range(1, 5):
            wgt, bias = self.stage_convs[s - 1]
            x = T.conv2d(x, wgt, bias, stride=2)
            x = self.stage_bns[s - 1].forward(x, domain_id, self.training)
            x = T.gelu(x)
            if s in self.ar2_blocks:
                x, dec = self.ar2_blocks[s].forward(x, z, rng)
                ar2_decisions.append(dec)
            pair_feats.append((T.slice_batch(x, 0, b),
                               T.slice_batch(x, b, 2 * b)))

        fusion_decisions = []
        fused = []
        for s in range(4):
            f1, f2 = pair_feats[s]
            out, dec = self.fusion_blocks[s].forward(f1, f2, z, rng)
            fused.append(out)
            if dec is not None:
                fusion_decisions.append(dec)

        aw, ab = self.adapters[3]
        y = T.conv2d_pointwise(fused[3], aw, ab)
        y = T.gelu(self.dec_bns[3].forward(y, domain_id, self.training))
        for s in (2, 1, 0):
            aw, ab = self.adapters[s]
            y = T.add(T.upsample_nearest2x(y),
                      T.conv2d_pointwise(fused[s], aw, ab))
            y = T.gelu(self.dec_bns[s].forward(y, domain_id, self.training))
        y = T.upsample_nearest2x(y)
        logits = T.conv2d_pointwise(y, self.head_w, self.head_b)
        return logits, pair_feats, ar2_decisions + fusion_decisions

    def predict(self, t1: Tensor, t2: Tensor, domain_id: int,
                threshold: float = 0.5) -> np.ndarray:
        """Binary change map: sigmoid(logits) > threshold."""
        with T.no_grad():
            logits, _, _ = self.forward(t1, t2, domain_id)
        return (T.sigmoid(logits).data > threshold).astype(np.float64)

    # -- parameters / state -------------------------------------------------

    def parameters(self):
        out = [("stem.w", self.stem_w, True), ("stem.b", self.stem_b, False)]
        out += [(f"codebook.{n}", p, d)
                for n, p, d in self.codebook.parameters()]
        for s in range(1, 5):
            w, b = self.stage_convs[s - 1]
            out += [(f"stage{s}.conv.w", w, True), (f"stage{s}.conv.b", b, False)]
            out += [(f"stage{s}.bn.{n}", p, d)
                    for n, p, d in self.stage_bns[s - 1].parameters()]
            if s in self.ar2_blocks:
                out += [(f"stage{s}.ar2.{n}", p, d)
                        for n, p, d in self.ar2_blocks[s].parameters()]
        for s in range(1, 5):
            out += [(f"fusion{s}.{n}", p, d)
                    for n, p, d in self.fusion_blocks[s - 1].parameters()]
        for s in range(1, 5):
            w, b = self.adapters[s - 1]
            out += [(f"decoder.adapter{s}.w", w, True),
                    (f"decoder.adapter{s}.b", b, False)]
            out += [(f"decoder.bn{s}.{n}", p, d)
                    for n, p, d in self.dec_bns[s - 1].parameters()]
        out += [("head.w", self.head_w, True), ("head.b", self.head_b, False)]
        return out

    def state_arrays(self):
        """Parameters plus normalization running statistics, by name."""
        out = [(name, p.data) for name, p, _ in self.parameters()]
        for s in range(1, 5):
            out += [(f"stage{s}.bn.{n}", a)
                    for n, a in self.stage_bns[s - 1].state_arrays()]
            out += [(f"decoder.bn{s}.{n}", a)
                    for n, a in self.dec_bns[s - 1].state_arrays()]
        return out

    def count_parameters(self) -> int:
        return sum(p.data.size for _, p, _ in self.parameters())

    def arch_meta(self) -> np.ndarray:
        ar2_mask = sum(1 << (s - 1) for s in self.ar2_stages)
        return np.array([
            self.n_domains, self.embed_dim, self.in_channels,
            self.decoder_channels, self.grid_pool, self.tau,
            GATE_MODES.index(self.gate_mode), FUSION_MODES.index(self.fusion),
            ar2_mask,
        ], dtype=np.float64)


def build_from_meta(meta: np.ndarray) -> UniRouteNet:
    ar2_mask = int(meta[8])
    return UniRouteNet(
        n_domains=int(meta[0]), embed_dim=int(meta[1]),
        in_channels=int(meta[2]), decoder_channels=int(meta[3]),
        grid_pool=int(meta[4]), tau=float(meta[5]),
        gate_mode=GATE_MODES[int(meta[6])], fusion=FUSION_MODES[int(meta[7])],
        ar2_stages=tuple(s for s in (1, 2, 3, 4) if ar2_mask & (1 << (s - 1))),
    )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_arrays(path, arrays):
    """Write named float64 arrays: URKT magic, version, manifest, blobs."""
    entries = list(arrays)
    manifest = bytearray()
    offsets = []
    # first pass with placeholder offsets to size the header
    for name, arr in entries:
        nb = name.encode("utf-8")
        manifest += struct.pack("<H", len(nb)) + nb
        manifest += struct.pack("<B", arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        offsets.append(len(manifest))
        manifest += struct.pack("<Q", 0)
    header_len = len(CHECKPOINT_MAGIC) + 8 + len(manifest)
    pos = header_len
    for (name, arr), off in zip(entries, offsets):
        manifest[off:off + 8] = struct.pack("<Q", pos)
        pos += arr.size * 8
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        fh.write(manifest)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n,
                            offset=offset).reshape(shape)
        out[name] = arr.astype(np.float64)
    return out


def save_checkpoint(net: UniRouteNet, path):
    arrays = [("meta/arch", net.arch_meta())] + net.state_arrays()
    write_arrays(path, arrays)


def load_checkpoint(path) -> UniRouteNet:
    arrays = read_arrays(path)
    if "meta/arch" not in arrays:
        raise ContractViolation(f"{path}: missing meta/arch entry")
    net = build_from_meta(arrays.pop("meta/arch"))
    named = {name: p for name, p, _ in net.parameters()}
    for s in range(1, 5):
        for n, _ in net.stage_bns[s - 1].state_arrays():
            named[f"stage{s}.bn.{n}"] = ("bn_state", net.stage_bns[s - 1], n)
        for n, _ in net.dec_bns[s - 1].state_arrays():
            named[f"decoder.bn{s}.{n}"] = ("bn_state", net.dec_bns[s - 1], n)
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ContractViolation(
            f"{path}: checkpoint/arch mismatch (missing={sorted(missing)[:3]}, "
            f"extra={sorted(extra)[:3]})")
    for name, value in arrays.items():
        target = named[name]
        if isinstance(target, tuple):
            _, layer, key = target
            layer.load_state(key, value)
        else:
            if target.data.shape != value.shape:
                raise ContractViolation(
                    f"{path}: shape mismatch for {name}: "
                    f"{target.data.shape} vs {value.shape}")
            target.data = value.copy()
    return net


def count_parameters(net: UniRouteNet) -> int:
    return net.count_parameters()
