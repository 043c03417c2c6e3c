"""Deterministic bi-temporal scene generator for three modality regimes.

Every sample is a pure function of its SceneSpec: a textured background plus
disjoint axis-aligned/rotated rectangles, a second epoch with some
rectangles added/removed (the change), the exact change mask computed before
any corruption, then a domain-specific corruption:

  OPT_OPT  independent additive Gaussian noise (sigma 0.02) on both epochs
  OPT_UAV  epoch-2 integer wrap-around translation in [-3,3]^2 plus a
           brightness gain in [0.8,1.2]; the mask stays in the epoch-1 frame
  OPT_SAR  epoch-2 collapsed to channel-replicated intensity and multiplied
           by mean-1 variance-0.3 Gamma speckle

Randomness comes from a counter-based 64-bit xorshift-multiply generator
(docs/formats.md) so samples are bit-identical across platforms and numpy
versions. Gaussians are Box-Muller, Gamma is Marsaglia-Tsang.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation

DOMAIN_NAMES = ("OPT_OPT", "OPT_UAV", "OPT_SAR")
OPT_OPT, OPT_UAV, OPT_SAR = 0, 1, 2

SPECKLE_VARIANCE = 0.3
UAV_MAX_SHIFT = 3
OPT_NOISE_SIGMA = 0.02


class GenerationError(RuntimeError):
    """The change-fraction target could not be met within the attempt budget."""


# ---------------------------------------------------------------------------
# counter-based PRNG
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


class CounterRng:
    """Stateless-mixing PRNG: output i is mix64(seed + (i+1)*golden)."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(self.seed + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self.raw(n) >> np.uint64(11)) * (2.0 ** -53)

    def uniform_range(self, lo: float, hi: float, n: int = 1) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(n)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + int(self.raw(1)[0] % np.uint64(hi - lo + 1))

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = np.maximum(self.uniform(m), 2.0 ** -53)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def gamma_mean1(self, variance: float, n: int) -> np.ndarray:
        """Mean-1 Gamma draws with the given variance (shape 1/var >= 1)."""
        shape = 1.0 / variance
        if shape < 1.0:
            raise ContractViolation("gamma shape < 1 unsupported")
        d = shape - 1.0 / 3.0
        c = 1.0 / np.sqrt(9.0 * d)
        out = np.empty(n)
        todo = np.arange(n)
        while todo.size:
            x = self.normal(todo.size)
            v = (1.0 + c * x) ** 3
            u = self.uniform(todo.size)
            ok = v > 0
            with np.errstate(divide="ignore", invalid="ignore"):
                accept = ok & (np.log(np.maximum(u, 1e-300))
                               < 0.5 * x * x + d - d * v
                               + d * np.log(np.where(ok, v, 1.0)))
            out[todo[accept]] = d * v[accept]
            todo = todo[~accept]
        return out * variance  # scale theta = variance, so mean = 1


# ---------------------------------------------------------------------------
# specs and samples
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Everything that determines one sample, bit for bit."""

    seed: int
    domain: int = OPT_OPT
    size: tuple = (64, 64)
    n_objects: tuple = (3, 8)
    change_fraction: float | None = None  # None: drawn from [0.05, 0.25]
    uav_shift: tuple | None = None  # force (dy, dx) for OPT_UAV

    def __post_init__(self):
        if self.domain not in (OPT_OPT, OPT_UAV, OPT_SAR):
            raise ContractViolation(f"unknown domain {self.domain!r}")
        if self.change_fraction is not None and self.change_fraction != 0.0:
            if not 0.05 <= self.change_fraction <= 0.25:
                raise ContractViolation(
                    f"change_fraction {self.change_fraction} outside [0.05, 0.25]")


@dataclass
class SamplePair:
    """One training/evaluation unit: the pair, its mask, and the domain."""

    t1: np.ndarray  # [3,H,W] in [0,1]
    t2: np.ndarray  # [3,H,W] in [0,1]
    gt: np.ndarray  # [1,H,W] binary
    domain_id: int


def _value_noise(rng: CounterRng, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinearly upsampled coarse random field in [0,1]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(gh * gw).reshape(gh, gw)
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = grid[y0][:, x0]
    tr = grid[y0][:, x0 + 1]
    bl = grid[y0 + 1][:, x0]
    br = grid[y0 + 1][:, x0 + 1]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


_GRID_CACHE: dict = {}


def _grids(h: int, w: int):
    if (h, w) not in _GRID_CACHE:
        _GRID_CACHE[(h, w)] = np.mgrid[0:h, 0:w].astype(np.float64)
    return _GRID_CACHE[(h, w)]


def _rect_mask(h: int, w: int, cy: float, cx: float, rh: float, rw: float,
               angle: float) -> np.ndarray:
    yy, xx = _grids(h, w)
    dy = yy - cy
    dx = xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    return (np.abs(u) <= rw / 2) & (np.abs(v) <= rh / 2)


def _place_rect(rng: CounterRng, h: int, w: int, occupied: np.ndarray,
                area_hint: float | None = None, attempts: int = 30):
    """A rectangle mask disjoint from `occupied`, or None."""
    for _ in range(attempts):
        if area_hint is None:
            rh = rng.uniform_range(8, 22)[0]
            rw = rng.uniform_range(8, 22)[0]
        else:
            aspect = rng.uniform_range(0.6, 1.6)[0]
            side = np.sqrt(max(area_hint, 64.0))
            rh = np.clip(side / aspect, 6, 26)
            rw = np.clip(side * aspect, 6, 26)
        cy = rng.uniform_range(rh / 2 + 1, h - rh / 2 - 1)[0]
        cx = rng.uniform_range(rw / 2 + 1, w - rw / 2 - 1)[0]
        angle = 0.0 if rng.uniform(1)[0] < 0.5 else rng.uniform_range(0, np.pi)[0]
        mask = _rect_mask(h, w, cy, cx, rh, rw, angle)
        if not (mask & occupied).any():
            return mask
    return None


def _object_color(rng: CounterRng) -> np.ndarray:
    if rng.uniform(1)[0] < 0.5:
        return rng.uniform_range(0.0, 0.22, 3)
    return rng.uniform_range(0.78, 1.0, 3)


def _luminance(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=0)


def generate(spec: SceneSpec, corrupt: bool = True) -> SamplePair:
    """Render one bi-temporal pair; pure function of the spec."""
    h, w = spec.size
    rng = CounterRng(_mix64(np.array([spec.seed], dtype=np.uint64)
                            + np.uint64(spec.domain + 1))[0])

    # background shared by both epochs
    coarse = _value_noise(rng, h, w, cell=16)
    fine = _value_noise(rng, h, w, cell=4)
    lum = 0.38 + 0.28 * coarse + 0.12 * fine
    tint = rng.uniform_range(0.85, 1.15, 3)
    bg = np.clip(lum[None] * tint[:, None, None], 0.0, 1.0)

    # epoch-1 objects, mutually disjoint
    n_obj = rng.randint(*spec.n_objects)
    occupied = np.zeros((h, w), dtype=bool)
    objects = []
    for _ in range(n_obj):
        mask = _place_rect(rng, h, w, occupied)
        if mask is None:
            continue
        occupied |= mask
        objects.append((mask, _object_color(rng)))

    # epoch-2 edit set hitting the change-fraction target
    if spec.change_fraction is None:
        target = rng.uniform_range(0.05, 0.25)[0]
    else:
        target = spec.change_fraction
    removed = np.zeros(len(objects), dtype=bool)
    added = []
    changed = np.zeros((h, w), dtype=bool)
    union_all = occupied.copy()
    attempts = 0
    if target > 0.0:
        while changed.mean() < target - 0.02:
            if attempts >= 100:
                raise GenerationError(
                    f"change fraction {target:.3f} unattainable for seed "
                    f"{spec.seed} (reached {changed.mean():.3f})")
            attempts += 1
            budget = (target + 0.05 - changed.mean()) * h * w
            do_remove = removed.size and not removed.all() and \
                rng.uniform(1)[0] < 0.4
            if do_remove:
                idx = rng.randint(0, len(objects) - 1)
                if removed[idx]:
                    continue
                mask = objects[idx][0]
                if (changed | mask).mean() > target + 0.05:
                    continue
                removed[idx] = True
                changed |= mask
            else:
                mask = _place_rect(rng, h, w, union_all,
                                   area_hint=min(budget, 420.0))
                if mask is None:
                    continue
                if (changed | mask).mean() > target + 0.05:
                    continue
                union_all |= mask
                added.append((mask, _object_color(rng)))
                changed |= mask

    def paint(base, items):
        img = base.copy()
        for mask, color in items:
            img[:, mask] = color[:, None]
        return img

    epoch1 = paint(bg, objects)
    epoch2 = paint(bg, [o for o, r in zip(objects, removed) if not r] + added)
    gt = changed[None].astype(np.float64)

    t1, t2 = epoch1, epoch2
    if corrupt:
        if spec.domain == OPT_OPT:
            t1 = t1 + OPT_NOISE_SIGMA * rng.normal(t1.size).reshape(t1.shape)
            t2 = t2 + OPT_NOISE_SIGMA * rng.normal(t2.size).reshape(t2.shape)
        elif spec.domain == OPT_UAV:
            if spec.uav_shift is not None:
                dy, dx = spec.uav_shift
            else:
                dy = rng.randint(-UAV_MAX_SHIFT, UAV_MAX_SHIFT)
                dx = rng.randint(-UAV_MAX_SHIFT, UAV_MAX_SHIFT)
            gain = rng.uniform_range(0.8, 1.2)[0]
            t2 = np.roll(t2, (dy, dx), axis=(1, 2)) * gain
        else:  # OPT_SAR
            intensity = _luminance(t2)
            speckle = rng.gamma_mean1(SPECKLE_VARIANCE, h * w).reshape(h, w)
            t2 = np.repeat((intensity * speckle)[None], 3, axis=0)
    t1 = np.clip(t1, 0.0, 1.0)
    t2 = np.clip(t2, 0.0, 1.0)
    return SamplePair(t1=t1, t2=t2, gt=gt, domain_id=spec.domain)


# ---------------------------------------------------------------------------
# splits, manifests, caching
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")
_SPLIT_BLOCK = 100_000
_DOMAIN_BLOCK = 1_000_000


@dataclass
class ManifestRecord:
    seed: int
    domain_id: int
    split: str


def make_split(train: int = 200, val: int = 40, test: int = 40,
               base_seed: int = 0, domains=(OPT_OPT, OPT_UAV, OPT_SAR),
               sar_train: int | None = None) -> list[ManifestRecord]:
    """Per-domain split manifest with disjoint seed ranges.

    `sar_train` overrides the OPT_SAR train count (the scarce-data regime).
    """
    counts = {"train": train, "val": val, "test": test}
    if max(counts.values()) > _SPLIT_BLOCK:
        raise ContractViolation(
            f"split count exceeds the seed block ({_SPLIT_BLOCK}); "
            "ranges would overlap")
    records = []
    for domain in domains:
        for si, split in enumerate(SPLITS):
            n = counts[split]
            if split == "train" and domain == OPT_SAR and sar_train is not None:
                n = sar_train
            start = base_seed + domain * _DOMAIN_BLOCK + si * _SPLIT_BLOCK
            for i in range(n):
                records.append(ManifestRecord(start + i, domain, split))
    seeds = [(r.seed, r.domain_id) for r in records]
    if len(seeds) != len(set(seeds)):
        raise ContractViolation("seed reuse across splits")
    return records


def write_manifest(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.seed}\t{r.domain_id}\t{r.split}\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            seed, domain, split = line.split("\t")
            records.append(ManifestRecord(int(seed), int(domain), split))
    return records


CACHE_MAGIC = b"URSD0001"


def write_sample_cache(sample: SamplePair, path):
    import struct
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", sample.domain_id))
        for arr in (sample.t1, sample.t2, sample.gt):
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_sample_cache(path) -> SamplePair:
    import struct
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CACHE_MAGIC:
        raise ContractViolation(f"{path}: bad cache magic {blob[:8]!r}")
    (domain_id,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    arrs = []
    for _ in range(3):
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        arrs.append(np.frombuffer(blob, dtype="<f8", count=n,
                                  offset=pos).reshape(shape).copy())
        pos += 8 * n
    return SamplePair(t1=arrs[0], t2=arrs[1], gt=arrs[2], domain_id=domain_id)


def correlation_peak(t1: np.ndarray, t2: np.ndarray, radius: int = 5):
    """Brute-force integer cross-correlation offset between epoch luminances."""
    l1 = _luminance(t1)
    l1 = l1 - l1.mean()
    l2 = _luminance(t2)
    l2 = l2 - l2.mean()
    best, best_score = (0, 0), -np.inf
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            score = float((l1 * np.roll(l2, (-dy, -dx), axis=(0, 1))).mean())
            if score > best_score:
                best_score, best = score, (dy, dx)
    return best
