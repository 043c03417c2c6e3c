"""Consistency-aware self-distillation: teacher construction, the four loss
terms, and the stage gate that activates them.

Pre-training activates {seg, cons, ent}; fine-tuning swaps the entropy
penalty for the distillation term {seg, cons, kd}. The teacher is the model's
own two-view average under an involutive spatial transform (horizontal flip
by default), detached from the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

EPS_ENTROPY = 1e-8
EPS_NORM = 1e-8
STAGES = ("pretrain", "finetune")


class SpatialTransform:
    """Invertible spatial transform for two-view teacher construction."""

    def __init__(self, name, apply_fn, invert_fn):
        self.name = name
        self.apply = apply_fn
        self.invert = invert_fn


HFLIP = SpatialTransform("hflip", T.flip_horizontal, T.flip_horizontal)


@dataclass
class LossWeights:
    """Auxiliary loss weights plus the stage that gates them.

    Requested weights are kept as-is; `effective()` applies the stage gate
    (kd forced to 0 during pretrain, ent forced to 0 during finetune).
    """

    lambda_cons: float = 0.1
    lambda_kd: float = 1.0
    lambda_ent: float = 0.01
    stage: str = "pretrain"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractViolation(f"unknown stage {self.stage!r}")

    def effective(self) -> dict:
        w = {"cons": self.lambda_cons, "kd": self.lambda_kd,
             "ent": self.lambda_ent}
        forced = []
        if self.stage == "pretrain" and w["kd"] != 0.0:
            w["kd"] = 0.0
            forced.append("kd")
        if self.stage == "finetune" and w["ent"] != 0.0:
            w["ent"] = 0.0
            forced.append("ent")
        return {"weights": w, "forced": forced}


@dataclass
class LossReport:
    """Scalar values of each term plus what was actually active."""

    seg: float
    cons: float
    kd: float
    ent: float
    total: float
    active_terms: tuple
    forced_zero: tuple = ()


def build_teacher(model_fn, t1: Tensor, t2: Tensor, domain_id: int,
                  transform: SpatialTransform = HFLIP) -> Tensor:
    """Two-view soft target: average of the plain prediction and the
    inverse-transformed prediction on jointly transformed inputs.

    `model_fn(t1, t2, domain_id) -> logits`; the caller must have put the
    model in an eval-consistent state. The result is a probability map
    detached from the tape, and is flip-equivariant by construction.
    """
    probe = transform.invert(transform.apply(Tensor(t1.data[:1, :1])))
    if not np.array_equal(probe.data, t1.data[:1, :1]):
        raise ContractViolation(
            f"transform {transform.name!r} is not invertible on this grid")
    with T.no_grad():
        plain = T.sigmoid(model_fn(t1, t2, domain_id))
        flipped = model_fn(transform.apply(t1), transform.apply(t2), domain_id)
        aligned = transform.invert(T.sigmoid(flipped))
        teacher = T.mul(T.add(plain, aligned), 0.5)
    return teacher.detach()


def kd_loss(student_logits: Tensor, teacher_probs: Tensor) -> Tensor:
    """Mean squared error between student probabilities and the teacher."""
    if student_logits.shape != teacher_probs.shape:
        raise ContractViolation(
            f"kd shape mismatch: {student_logits.shape} vs {teacher_probs.shape}")
    return T.mse(T.sigmoid(student_logits), teacher_probs.detach())


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy of a [B,K,H,W] distribution.

    Expects per-pixel vectors that sum to 1; minimized by one-hot routing.
    """
    plog = T.mul(probs, T.log(probs + EPS_ENTROPY))
    return -T.tmean(T.tsum(plog, axis=1))


def consistency_loss(f1: Tensor, f2: Tensor, gt: Tensor) -> Tensor:
    """Mean (1 - cosine similarity) over unchanged pixels.

    `gt` is a binary [B,1,h,w] map already at feature resolution (see
    `downsample_mask_nearest`); unchanged = 0. Returns 0 when no pixel is
    unchanged. Norm products are floored at 1e-8, which also makes the loss
    exactly invariant to shared positive rescaling of both feature maps.
    """
    if f1.shape != f2.shape:
        raise ContractViolation(
            f"feature shape mismatch: {f1.shape} vs {f2.shape}")
    if gt.shape[2:] != f1.shape[2:]:
        raise ContractViolation(
            f"gt resolution {gt.shape} does not match features {f1.shape}")
    unchanged = (gt.data <= 0.0)
    count = float(unchanged.sum())
    if count == 0.0:
        return Tensor(0.0)
    dot = T.tsum(T.mul(f1, f2), axis=1, keepdims=True)
    n1 = T.sqrt(T.tsum(T.mul(f1, f1), axis=1, keepdims=True))
    n2 = T.sqrt(T.tsum(T.mul(f2, f2), axis=1, keepdims=True))
    cos = T.div(dot, T.clamp_min(T.mul(n1, n2), EPS_NORM))
    weight = Tensor(unchanged.astype(np.float64) / count)
    return T.tsum(T.mul(1.0 - cos, weight))


def downsample_mask_nearest(gt: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample of a [B,1,H,W] mask by an integer factor."""
    return gt[:, :, ::factor, ::factor]


def seg_loss(logits: Tensor, gt: Tensor) -> Tensor:
    """Binary cross-entropy from logits plus soft Dice, equally weighted."""
    if logits.shape != gt.shape:
        raise ContractViolation(
            f"seg shape mismatch: {logits.shape} vs {gt.shape}")
    return T.add(T.bce_with_logits(logits, gt),
                 T.dice_from_probs(T.sigmoid(logits), gt, smooth=1.0))


def total_loss(seg: Tensor, weights: LossWeights,
               cons: Tensor | None = None, kd: Tensor | None = None,
               ent: Tensor | None = None):
    """Stage-gated weighted sum; returns (total tensor, LossReport).

    A kd term during pretrain, or a missing kd term during finetune, is a
    contract violation: the teacher only exists in the fine-tuning stage.
    """
    if weights.stage == "pretrain" and kd is not None:
        raise ContractViolation("teacher/kd term supplied during pretrain")
    if weights.stage == "finetune" and kd is None:
        raise ContractViolation("finetune stage requires a kd term")

    gate = weights.effective()
    w = gate["weights"]
    total = seg
    active = ["seg"]
    vals = {"seg": seg.item(), "cons": 0.0, "kd": 0.0, "ent": 0.0}
    for name, term in (("cons", cons), ("kd", kd), ("ent", ent)):
        if term is None:
            continue
        vals[name] = term.item()
        if w[name] != 0.0:
            total = T.add(total, T.mul(term, w[name]))
            active.append(name)
    report = LossReport(seg=vals["seg"], cons=vals["cons"], kd=vals["kd"],
                        ent=vals["ent"], total=total.item(),
                        active_terms=tuple(active),
                        forced_zero=tuple(gate["forced"]))
    return total, report
