"""Training loop, optimizer, metrics, ablation runner, and routing-map export.

Stage 1 (unified pre-training) optimizes segmentation + feature-consistency
+ gating-entropy losses over round-robin domain-homogeneous batches. Stage 2
(distillation fine-tuning) restarts from the stage-1 best-validation
checkpoint at a reduced learning rate, samples domains uniformly regardless
of dataset size, and swaps the entropy term for the two-view teacher MSE.
The best checkpoint of each stage is picked by mean validation F1 across
domains (ties keep the earlier epoch).

Everything is single-threaded and seeded: identical config + seed gives
bit-identical metrics. The metrics log is line-oriented (one record per
step, documented field order); routing maps export as binary PGM.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import casd as C
from . import tensor as T
from .config import TrainConfig
from .model import UniRouteNet, load_checkpoint, save_checkpoint
from .routing import UnknownDomainError
from .synthdata import (
    DOMAIN_NAMES, ManifestRecord, SceneSpec, generate, read_sample_cache,
    write_sample_cache,
)
from .tensor import ContractViolation, Tape, Tensor

N_DOMAINS = 3


class UsageError(ValueError):
    """Bad user-facing input (unknown variant, missing file)."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_update(theta: np.ndarray, grad: np.ndarray, m: np.ndarray,
                 v: np.ndarray, step: int, lr: float, wd: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
    """One decoupled-weight-decay adaptive-moment update, in place.

    `step` is 1-based. Weight decay multiplies the parameter directly and
    never enters the moment buffers.
    """
    if theta.shape != grad.shape:
        raise ContractViolation(
            f"param/grad shape mismatch: {theta.shape} vs {grad.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    if wd != 0.0:
        theta *= 1.0 - lr * wd
    theta -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Holds first/second moments per parameter; decays only flagged params."""

    def __init__(self, params, lr: float, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)  # (name, Tensor, decay_flag)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p, _ in self.params]
        self.v = [np.zeros_like(p.data) for _, p, _ in self.params]

    def step(self):
        self.step_count += 1
        for (name, p, decay), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                # still apply decoupled decay: the parameter took part in
                # the step even if this batch produced no gradient for it
                if decay and self.weight_decay != 0.0:
                    p.data *= 1.0 - self.lr * self.weight_decay
                continue
            adamw_update(p.data, p.grad, m, v, self.step_count, self.lr,
                         self.weight_decay if decay else 0.0,
                         self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for _, p, _ in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _safe_ratio(num: float, den: float, gt_empty: bool, pred_empty: bool):
    if den == 0:
        return 1.0 if (gt_empty and pred_empty) else 0.0
    return num / den


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def update(self, pred: np.ndarray, gt: np.ndarray):
        p = pred > 0.5
        g = gt > 0.5
        self.tp += int(np.count_nonzero(p & g))
        self.fp += int(np.count_nonzero(p & ~g))
        self.fn += int(np.count_nonzero(~p & g))
        self.tn += int(np.count_nonzero(~p & ~g))

    @property
    def _empty(self):
        return (self.tp + self.fn == 0), (self.tp + self.fp == 0)

    def f1(self):
        ge, pe = self._empty
        return _safe_ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn, ge, pe)

    def iou(self):
        ge, pe = self._empty
        return _safe_ratio(self.tp, self.tp + self.fp + self.fn, ge, pe)

    def precision(self):
        ge, pe = self._empty
        return _safe_ratio(self.tp, self.tp + self.fp, ge, pe)

    def recall(self):
        ge, pe = self._empty
        return _safe_ratio(self.tp, self.tp + self.fn, ge, pe)


@dataclass
class MetricReport:
    """Per-domain and pooled confusion metrics plus routing statistics.

    routing_rates[domain_id] is a list over decision blocks (network order)
    of per-expert selection-rate arrays.
    """

    per_domain: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    routing_rates: dict = field(default_factory=dict)

    @staticmethod
    def metric_dict(c: Confusion) -> dict:
        return {"f1": c.f1(), "iou": c.iou(), "precision": c.precision(),
                "recall": c.recall()}

    def to_tsv(self) -> str:
        lines = ["scope\tf1\tiou\tprecision\trecall\ttp\tfp\tfn\ttn"]
        for d in sorted(self.per_domain):
            m = self.per_domain[d]
            c = self.counts[d]
            lines.append(
                f"{DOMAIN_NAMES[d]}\t{m['f1']:.6f}\t{m['iou']:.6f}\t"
                f"{m['precision']:.6f}\t{m['recall']:.6f}\t"
                f"{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}")
        m = self.aggregate
        c = self.counts["all"]
        lines.append(
            f"all\t{m['f1']:.6f}\t{m['iou']:.6f}\t{m['precision']:.6f}\t"
            f"{m['recall']:.6f}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}")
        return "\n".join(lines) + "\n"

    def mean_f1(self) -> float:
        return float(np.mean([m["f1"] for m in self.per_domain.values()]))


# ---------------------------------------------------------------------------
# dataset materialization
# ---------------------------------------------------------------------------

@dataclass
class SplitArrays:
    t1: np.ndarray  # [N,3,H,W]
    t2: np.ndarray
    gt: np.ndarray  # [N,1,H,W]

    @property
    def n(self):
        return self.t1.shape[0]


def materialize(records: list[ManifestRecord], image_size: int = 64,
                cache_dir=None) -> dict:
    """Generate (or load cached) samples, stacked per (domain, split)."""
    buckets: dict = {}
    for r in records:
        if cache_dir is not None:
            path = os.path.join(cache_dir, f"{r.seed}_{r.domain_id}.ursd")
            if os.path.exists(path):
                s = read_sample_cache(path)
            else:
                s = generate(SceneSpec(seed=r.seed, domain=r.domain_id,
                                       size=(image_size, image_size)))
                write_sample_cache(s, path)
        else:
            s = generate(SceneSpec(seed=r.seed, domain=r.domain_id,
                                   size=(image_size, image_size)))
        buckets.setdefault((r.domain_id, r.split), []).append(s)
    out = {}
    for key, samples in buckets.items():
        out[key] = SplitArrays(
            t1=np.stack([s.t1 for s in samples]),
            t2=np.stack([s.t2 for s in samples]),
            gt=np.stack([s.gt for s in samples]))
    return out


def _batches_for(split: SplitArrays, order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield (Tensor(split.t1[idx]), Tensor(split.t2[idx]),
               Tensor(split.gt[idx]))


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------

def _step_losses(net: UniRouteNet, t1, t2, gt, domain, weights: C.LossWeights,
                 teacher=None, rng=None):
    logits, feats, decisions = net.forward(t1, t2, domain, rng=rng)
    seg = C.seg_loss(logits, gt)
    f1d, f2d = feats[-1]
    factor = gt.shape[2] // f1d.shape[2]
    gt_ds = Tensor(C.downsample_mask_nearest(gt.data, factor))
    cons = C.consistency_loss(f1d, f2d, gt_ds)
    ent = None
    kd = None
    if weights.stage == "pretrain":
        ent_terms = [C.entropy_loss(d.entropy_distribution())
                     for d in decisions]
        if ent_terms:
            acc = ent_terms[0]
            for term in ent_terms[1:]:
                acc = T.add(acc, term)
            ent = T.mul(acc, 1.0 / len(ent_terms))
    else:
        kd = C.kd_loss(logits, teacher)
    return C.total_loss(seg, weights, cons=cons, kd=kd, ent=ent)


_LOG_FIELD_ORDER = ("seg", "cons", "kd", "ent")


def _log_line(step, stage, epoch, domain, report) -> str:
    parts = [f"train step={step} stage={stage} epoch={epoch} domain={domain}"]
    for name in _LOG_FIELD_ORDER:
        if name in report.active_terms:
            parts.append(f"{name}={getattr(report, name):.6f}")
    parts.append(f"total={report.total:.6f}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    final_checkpoint: str
    stage1_checkpoint: str
    metrics_path: str
    best_val_f1: float
    history: list = field(default_factory=list)  # step loss records
    val_history: list = field(default_factory=list)


def _round_robin_batches(data: dict, domains, batch_size: int,
                         rng: np.random.Generator):
    """Interleave domain-homogeneous batches until every domain is drained."""
    queues = {}
    for d in domains:
        split = data[(d, "train")]
        order = rng.permutation(split.n)
        queues[d] = list(_batches_for(split, order, batch_size))
    out = []
    while any(queues.values()):
        for d in domains:
            if queues[d]:
                out.append((d, queues[d].pop(0)))
    return out


def _uniform_batches(data: dict, domains, batch_size: int, n_steps: int,
                     rng: np.random.Generator):
    """Domain drawn uniformly per step, regardless of dataset size."""
    cycles = {d: [] for d in domains}
    out = []
    for _ in range(n_steps):
        d = domains[rng.integers(len(domains))]
        if not cycles[d]:
            split = data[(d, "train")]
            order = rng.permutation(split.n)
            cycles[d] = list(_batches_for(split, order, batch_size))
        out.append((d, cycles[d].pop(0)))
    return out


def _validate(net: UniRouteNet, data: dict, domains, batch_size: int):
    net.eval()
    f1s = {}
    for d in domains:
        split = data[(d, "val")]
        conf = Confusion()
        for t1, t2, gt in _batches_for(split, np.arange(split.n), batch_size):
            pred = net.predict(t1, t2, d)
            conf.update(pred, gt.data)
        f1s[d] = conf.f1()
    net.train()
    return f1s


def train(config: TrainConfig, records: list[ManifestRecord], out_dir,
          data: dict | None = None, stages: str = "all",
          init_checkpoint=None) -> TrainResult:
    """Run the configured schedule; returns checkpoint paths and history.

    `stages` restricts the run: "1" = pre-training only, "2" = fine-tuning
    only (requires `init_checkpoint`), "all" = the full schedule.
    """
    if stages not in ("all", "1", "2"):
        raise UsageError(f"stages must be all/1/2, got {stages!r}")
    if stages == "2" and init_checkpoint is None:
        raise UsageError("fine-tuning alone needs an init checkpoint")
    os.makedirs(out_dir, exist_ok=True)
    if data is None:
        data = materialize(records, image_size=config.image_size)
    domains = sorted({r.domain_id for r in records})

    net = UniRouteNet(
        n_domains=N_DOMAINS, seed=config.seed, ar2_stages=config.ar2_stages,
        gate_mode=config.gate_mode, fusion=config.fusion,
        grid_pool=config.grid_pool, decoder_channels=config.decoder_channels,
        tau=config.tau).train()
    if init_checkpoint is not None:
        loaded = load_checkpoint(init_checkpoint)
        net.__dict__.update(loaded.__dict__)
        net.train()

    metrics_path = os.path.join(out_dir, "metrics.log")
    log_fh = open(metrics_path, "w")
    result = TrainResult(
        final_checkpoint=os.path.join(out_dir, "final.urkt"),
        stage1_checkpoint=os.path.join(out_dir, "stage1_best.urkt"),
        metrics_path=metrics_path, best_val_f1=-1.0)
    rng = np.random.default_rng([config.seed, 0xA5])
    gumbel_rng = np.random.default_rng([config.seed, 0x6B])
    step = 0

    def run_stage(stage_name, epochs, lr, weights, batches_fn, ckpt_path):
        nonlocal step
        optimizer = AdamW(net.parameters(), lr=lr,
                          weight_decay=config.weight_decay,
                          beta1=config.beta1, beta2=config.beta2,
                          eps=config.eps)
        stage_tag = 1 if weights.stage == "pretrain" else 2
        best = -1.0
        for epoch in range(epochs):
            for domain, (t1, t2, gt) in batches_fn(epoch):
                teacher = None
                if weights.stage == "finetune":
                    net.eval()
                    teacher = C.build_teacher(
                        lambda a, b, d: net.forward(a, b, d)[0], t1, t2, domain)
                    net.train()
                optimizer.zero_grad()
                with Tape() as tape:
                    total, report = _step_losses(
                        net, t1, t2, gt, domain, weights, teacher=teacher,
                        rng=gumbel_rng if config.gate_mode == "gumbel" else None)
                    tape.backward(total)
                optimizer.step()
                step += 1
                log_fh.write(_log_line(step, stage_tag, epoch, domain, report)
                             + "\n")
                result.history.append(
                    {"step": step, "stage": stage_tag, "epoch": epoch,
                     "domain": domain, "total": report.total,
                     "seg": report.seg})
            f1s = _validate(net, data, domains, config.batch_size)
            mean_f1 = float(np.mean(list(f1s.values())))
            improved = mean_f1 > best
            if improved:
                best = mean_f1
                save_checkpoint(net, ckpt_path)
            per = " ".join(f"f1_d{d}={f1s[d]:.6f}" for d in domains)
            log_fh.write(f"val stage={stage_tag} epoch={epoch} "
                         f"f1={mean_f1:.6f} {per} best={int(improved)}\n")
            result.val_history.append(
                {"stage": stage_tag, "epoch": epoch, "f1": mean_f1,
                 "per_domain": f1s})
        return best

    if config.casd:
        if stages in ("all", "1"):
            w1 = C.LossWeights(config.lambda_cons, config.lambda_kd,
                               config.lambda_ent, stage="pretrain")
            best1 = run_stage(
                "pretrain", config.stage1_epochs, config.stage1_lr, w1,
                lambda epoch: _round_robin_batches(data, domains,
                                                   config.batch_size, rng),
                result.stage1_checkpoint)
        else:
            # fine-tune-only: the provided checkpoint is the stage-1 best
            save_checkpoint(net, result.stage1_checkpoint)
            f1s = _validate(net, data, domains, config.batch_size)
            best1 = float(np.mean(list(f1s.values())))

        if stages == "1":
            loaded = load_checkpoint(result.stage1_checkpoint)
            save_checkpoint(loaded, result.final_checkpoint)
            result.best_val_f1 = best1
            log_fh.close()
            return result

        # fine-tune from the stage-1 best-validation checkpoint
        loaded = load_checkpoint(result.stage1_checkpoint)
        net.__dict__.update(loaded.__dict__)
        net.train()
        n_train = sum(data[(d, "train")].n for d in domains)
        n_steps = math.ceil(n_train / config.batch_size)
        w2 = C.LossWeights(config.lambda_cons, config.lambda_kd,
                           config.lambda_ent, stage="finetune")
        best2 = run_stage(
            "finetune", config.stage2_epochs, config.stage2_lr, w2,
            lambda epoch: _uniform_batches(data, domains, config.batch_size,
                                           n_steps, rng),
            result.final_checkpoint)
        if best2 <= best1:
            # fine-tuning never improved validation: keep the stage-1 model
            loaded = load_checkpoint(result.stage1_checkpoint)
            save_checkpoint(loaded, result.final_checkpoint)
            result.best_val_f1 = best1
        else:
            result.best_val_f1 = best2
    else:
        # standard training: one stage, segmentation loss only
        w = C.LossWeights(0.0, 0.0, 0.0, stage="pretrain")
        epochs = config.stage1_epochs + config.stage2_epochs
        best = run_stage(
            "pretrain", epochs, config.stage1_lr, w,
            lambda epoch: _round_robin_batches(data, domains,
                                               config.batch_size, rng),
            result.stage1_checkpoint)
        loaded = load_checkpoint(result.stage1_checkpoint)
        save_checkpoint(loaded, result.final_checkpoint)
        result.best_val_f1 = best

    log_fh.close()
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(net_or_path, records: list[ManifestRecord], split: str = "test",
             domain: int | None = None, data: dict | None = None,
             batch_size: int = 8, threshold: float = 0.5) -> MetricReport:
    """Confusion metrics at the given threshold plus routing statistics."""
    if isinstance(net_or_path, (str, os.PathLike)):
        if not os.path.exists(net_or_path):
            raise UsageError(f"checkpoint not found: {net_or_path}")
        net = load_checkpoint(net_or_path)
    else:
        net = net_or_path
    net.eval()

    wanted = [r for r in records if r.split == split]
    domains = sorted({r.domain_id for r in wanted})
    if domain is not None:
        if domain not in domains:
            raise UnknownDomainError(
                f"domain {domain} not present in split {split!r}")
        domains = [domain]
    if data is None:
        data = materialize([r for r in wanted if r.domain_id in domains])

    report = MetricReport()
    pooled = Confusion()
    for d in domains:
        split_arrays = data[(d, split)]
        conf = Confusion()
        rate_sums = None
        n_seen = 0
        for t1, t2, gt in _batches_for(split_arrays,
                                       np.arange(split_arrays.n), batch_size):
            with T.no_grad():
                logits, _, decisions = net.forward(t1, t2, d)
            pred = (T.sigmoid(logits).data > threshold).astype(np.float64)
            conf.update(pred, gt.data)
            nb = t1.shape[0]
            rates = [dec.selection_rate for dec in decisions]
            if rate_sums is None:
                rate_sums = [r * nb for r in rates]
            else:
                rate_sums = [acc + r * nb for acc, r in zip(rate_sums, rates)]
            n_seen += nb
        report.per_domain[d] = MetricReport.metric_dict(conf)
        report.counts[d] = conf
        report.routing_rates[d] = [r / n_seen for r in rate_sums] \
            if rate_sums else []
        pooled.tp += conf.tp
        pooled.fp += conf.fp
        pooled.fn += conf.fn
        pooled.tn += conf.tn
    report.aggregate = MetricReport.metric_dict(pooled)
    report.counts["all"] = pooled
    return report


# ---------------------------------------------------------------------------
# ablation runner
# ---------------------------------------------------------------------------

VARIANTS = {
    "baseline": {},
    "gate:ste_hard": {"gate_mode": "ste_hard"},
    "gate:soft": {"gate_mode": "soft"},
    "gate:gumbel": {"gate_mode": "gumbel"},
    "gate:top1_no_ste": {"gate_mode": "top1_no_ste"},
    "fusion:mdr": {"fusion": "mdr"},
    "fusion:concat_only": {"fusion": "concat_only"},
    "fusion:sub_only": {"fusion": "sub_only"},
    "fusion:cat_only": {"fusion": "cat_only"},
    "fusion:mul_only": {"fusion": "mul_only"},
    "casd:on": {"casd": True},
    "casd:off": {"casd": False},
}


def ablate(config: TrainConfig, variants: list[str],
           records: list[ManifestRecord], out_dir,
           data: dict | None = None) -> dict:
    """Train baseline + variants under one seed; side-by-side test metrics.

    Returns {variant_name: {"report": MetricReport, "result": TrainResult}}.
    """
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(
                f"unknown variant {v!r}; known: {sorted(VARIANTS)}")
    if data is None:
        data = materialize(records, image_size=config.image_size)
    runs = ["baseline"] + [v for v in variants if v != "baseline"]
    out = {}
    for name in runs:
        cfg = config.replace(**VARIANTS[name])
        run_dir = os.path.join(out_dir, name.replace(":", "_"))
        result = train(cfg, records, run_dir, data=data)
        report = evaluate(result.final_checkpoint, records, data=data,
                          batch_size=cfg.batch_size)
        out[name] = {"report": report, "result": result}
    return out


def ablation_table(results: dict) -> str:
    lines = ["variant\t" + "\t".join(f"f1_{n}" for n in DOMAIN_NAMES)
             + "\tf1_mean"]
    for name, entry in results.items():
        report = entry["report"]
        f1s = [report.per_domain[d]["f1"] if d in report.per_domain else
               float("nan") for d in range(N_DOMAINS)]
        lines.append(name + "\t" + "\t".join(f"{v:.6f}" for v in f1s)
                     + f"\t{np.nanmean(f1s):.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# routing-map export
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray):
    """Binary PGM (P5, maxval 255) from a uint8 2-D array."""
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5\n"):
        raise ContractViolation(f"{path}: not a binary PGM")
    rest = blob[3:]
    dims, rest = rest.split(b"\n", 1)
    w, h = (int(v) for v in dims.split())
    maxval, rest = rest.split(b"\n", 1)
    if int(maxval) != 255:
        raise ContractViolation(f"{path}: expected maxval 255, got {maxval!r}")
    return np.frombuffer(rest[:h * w], dtype=np.uint8).reshape(h, w)


MDR_LEVELS = (0, 128, 255)  # sub, cat, mul


def export_routing_map(net_or_path, sample, block_index: int, path):
    """Render one block's routing of a sample's first item as a PGM map.

    Two-expert blocks: 0 = local, 255 = global. Primitive blocks: 0/128/255
    for sub/cat/mul. Block order matches UniRouteNet.forward's decision list.
    """
    if isinstance(net_or_path, (str, os.PathLike)):
        net = load_checkpoint(net_or_path)
    else:
        net = net_or_path
    net.eval()
    t1 = Tensor(sample.t1[None])
    t2 = Tensor(sample.t2[None])
    with T.no_grad():
        _, _, decisions = net.forward(t1, t2, sample.domain_id)
    if not 0 <= block_index < len(decisions):
        raise UsageError(
            f"block index {block_index} out of range, have {len(decisions)}")
    dec = decisions[block_index]
    probs = dec.probs.data
    if dec.kind == "ar2":
        chosen = (probs[0, 0] > 0.5) if dec.hard_mask is None \
            else dec.hard_mask.data[0, 0] > 0.5
        image = np.where(chosen, 255, 0)
    else:
        chosen = probs[0].argmax(axis=0) if dec.hard_mask is None \
            else dec.hard_mask.data[0].argmax(axis=0)
        image = np.take(np.array(MDR_LEVELS), chosen)
    write_pgm(path, image.astype(np.uint8))
    return image


def parse_routing_map(path, kind: str) -> np.ndarray:
    """Recover the selection indices from an exported PGM."""
    image = read_pgm(path)
    if kind == "ar2":
        return (image == 255).astype(np.int64)
    levels = np.array(MDR_LEVELS)
    return np.argmin(np.abs(image[..., None] - levels[None, None]), axis=-1)
