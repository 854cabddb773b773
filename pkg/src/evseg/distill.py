"""Distillation and supervision losses for the two-branch pipeline.

Covers the implicit-token embedding distillation, the per-layer decoder
feature distillation, the dissimilarity network with its reweighted mask
loss, the categorization loss, the alternative reweighting strategies, and
the weighted total.  Teacher-side inputs are always detached here, so
gradients can only flow into event-branch components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .backbones import MaskSet, ModelConfig
from .errors import ConfigError, InvalidArgumentError, InvalidInputError, NumericError

REWEIGHT_KINDS = ("none", "cosine-similarity", "feature-difference", "dissimilarity-network")

NO_OBJECT = -1  # sentinel class index for "matches nothing"


def frobenius_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of (a - b); with a leading batch axis (ndim 3) the
    per-sample norms are averaged.

    ``torch.linalg.norm`` defines the gradient at an all-zero difference as
    zero, which keeps clone-branch fixtures exactly gradient-free.
    """
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a - b
    if diff.ndim <= 2:
        return torch.linalg.norm(diff)
    return torch.linalg.norm(diff.reshape(diff.shape[0], -1), dim=1).mean()


def embedding_distill_loss(tokens_image: torch.Tensor, tokens_event: torch.Tensor) -> torch.Tensor:
    """Frobenius distance between the two branches' implicit text tokens.

    The image-branch tokens are detached: only the event branch receives
    gradient.
    """
    return frobenius_distance(tokens_image.detach(), tokens_event)


def feature_distill_loss(trace_image, trace_event) -> torch.Tensor:
    """Average Frobenius distance between paired decoder-layer outputs.

    Pairing is positional: layer i of one branch against layer i of the other.
    """
    if len(trace_image) != len(trace_event):
        raise InvalidArgumentError(
            f"decoder trace lengths differ: {len(trace_image)} vs {len(trace_event)}")
    if not trace_image:
        raise InvalidArgumentError("decoder traces are empty")
    total = None
    for d_img, d_evt in zip(trace_image, trace_event):
        term = frobenius_distance(d_img.detach(), d_evt)
        total = term if total is None else total + term
    return total / len(trace_image)


# --------------------------------------------------------------------------
# Dissimilarity network and weight maps
# --------------------------------------------------------------------------


class DissimilarityNetwork(nn.Module):
    """Two 3x3 stride-2 convolutions producing a per-pixel trust map in (0, 1).

    The first convolution is shared between the original and reconstructed
    image; the squared difference of its rectified responses feeds the second
    convolution, followed by a logistic squashing.  The second convolution is
    initialized with strictly negative weights and bias +2, so training starts
    near full trust (M ~ 0.88) and larger discrepancies push M down.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(1, cfg.dn_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(cfg.dn_channels, 1, 3, stride=2, padding=1)
        self.to(cfg.torch_dtype)

    def seeded_init_(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            fan1 = self.conv1.weight.shape[1:].numel()
            b1 = 1.0 / math.sqrt(fan1)
            self.conv1.weight.copy_(
                torch.empty_like(self.conv1.weight).uniform_(-b1, b1, generator=gen))
            self.conv1.bias.zero_()
            fan2 = self.conv2.weight.shape[1:].numel()
            b2 = 1.0 / math.sqrt(fan2)
            mag = torch.empty_like(self.conv2.weight).uniform_(0.0, b2, generator=gen)
            self.conv2.weight.copy_(-(mag + 0.1 * b2))
            self.conv2.bias.fill_(2.0)

    def forward(self, image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
        a = torch.relu(self.conv1(image))
        b = torch.relu(self.conv1(recon))
        low = torch.sigmoid(self.conv2((a - b) ** 2))
        return F.interpolate(low, size=image.shape[2:], mode="bilinear", align_corners=False)


def _as_b1hw(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim == 2:
        return x.unsqueeze(0).unsqueeze(0), True
    if x.ndim == 4:
        return x, False
    raise InvalidArgumentError(f"expected H x W or B x 1 x H x W, got {tuple(x.shape)}")


def dissimilarity_map(dn: DissimilarityNetwork, image: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Trust map in (0, 1) at full image resolution (bilinear upsample of the
    quarter-resolution network output)."""
    img, squeezed = _as_b1hw(image)
    rec, _ = _as_b1hw(recon)
    if img.shape != rec.shape:
        raise InvalidArgumentError(
            f"geometry mismatch: {tuple(image.shape)} vs {tuple(recon.shape)}")
    out = dn(img, rec).squeeze(1)
    return out.squeeze(0) if squeezed else out


def alternative_weight_map(kind: str, image: torch.Tensor, recon: torch.Tensor,
                           f_image: torch.Tensor | None = None,
                           f_event: torch.Tensor | None = None,
                           dn: DissimilarityNetwork | None = None) -> torch.Tensor:
    """Reweighting map in [0, 1] for the configured strategy.

    "none" is all ones; "cosine-similarity" compares local 3x3 patches of the
    two images; "feature-difference" uses one minus the normalized squared
    difference of the two branches' feature maps; "dissimilarity-network"
    delegates to the learned network.  Only the learned network carries
    gradients; the other strategies are computed detached.
    """
    if kind == "none":
        img, squeezed = _as_b1hw(image)
        ones = torch.ones(img.shape[0], img.shape[2], img.shape[3], dtype=img.dtype)
        return ones.squeeze(0) if squeezed else ones
    if kind == "cosine-similarity":
        img, squeezed = _as_b1hw(image)
        rec, _ = _as_b1hw(recon)
        if img.shape != rec.shape:
            raise InvalidArgumentError("geometry mismatch between image and reconstruction")
        with torch.no_grad():
            pa = F.unfold(F.pad(img, (1, 1, 1, 1), mode="replicate"), 3)  # B, 9, HW
            pb = F.unfold(F.pad(rec, (1, 1, 1, 1), mode="replicate"), 3)
            eps = 1e-8
            cos = ((pa * pb).sum(1) + eps) / (pa.norm(dim=1) * pb.norm(dim=1) + eps)
            cos = cos.clamp(-1.0, 1.0).reshape(img.shape[0], img.shape[2], img.shape[3])
            out = 0.5 * (cos + 1.0)
        return out.squeeze(0) if squeezed else out
    if kind == "feature-difference":
        if f_image is None or f_event is None:
            raise InvalidArgumentError("feature-difference reweighting needs both feature maps")
        img, squeezed = _as_b1hw(image)
        fi = f_image if f_image.ndim == 4 else f_image.unsqueeze(0)
        fe = f_event if f_event.ndim == 4 else f_event.unsqueeze(0)
        if fi.shape != fe.shape:
            raise InvalidArgumentError("feature map shapes differ")
        with torch.no_grad():
            sq = ((fi - fe.detach()) ** 2).sum(dim=1, keepdim=True)
            peak = sq.amax(dim=(2, 3), keepdim=True)
            low = torch.where(peak > 0, 1.0 - sq / peak.clamp_min(1e-30), torch.ones_like(sq))
            out = F.interpolate(low, size=img.shape[2:], mode="bilinear",
                                align_corners=False).clamp(0.0, 1.0).squeeze(1)
        return out.squeeze(0) if squeezed else out
    if kind == "dissimilarity-network":
        if dn is None:
            raise InvalidArgumentError("dissimilarity-network reweighting needs the network")
        return dissimilarity_map(dn, image, recon)
    raise ConfigError(f"unknown reweight strategy {kind!r}; expected one of {REWEIGHT_KINDS}")


# --------------------------------------------------------------------------
# Reweighted segmentation-map distillation
# --------------------------------------------------------------------------


def normalize_mixture(mix: torch.Tensor) -> torch.Tensor:
    """Per-pixel normalization of a positive class mixture (channel axis 1 if
    4D / batched, axis -1 if H x W x C)."""
    axis = 1 if mix.ndim == 4 else -1
    return mix / mix.sum(dim=axis, keepdim=True)


class _MaskedDivergence(torch.autograd.Function):
    """Weighted soft-target divergence with a hand-written exact gradient.

    Forward value: mean over pixels of  w * sum_c  y_t,c * (log y_t,c - log y_s,c)
    where y_s is the per-pixel normalization of the positive student mixture.
    The backward pass uses the closed form  grad_S = w/N * (y_s - y_t) / S,
    which vanishes bit-exactly when the two branches produce identical maps
    (the autograd composition would leave ~1e-16 residue from renormalization).
    """

    @staticmethod
    def forward(ctx, student_mix, teacher_prob, weight):
        student_prob = normalize_mixture(student_mix)
        log_ratio = torch.log(teacher_prob.clamp_min(1e-300)) - torch.log(student_prob)
        kl = torch.where(teacher_prob > 0, teacher_prob * log_ratio,
                         torch.zeros_like(teacher_prob)).sum(dim=1)
        loss = (weight * kl).mean()
        ctx.save_for_backward(student_mix, student_prob, teacher_prob, weight, kl)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        student_mix, student_prob, teacher_prob, weight, kl = ctx.saved_tensors
        n = kl.numel()
        g_mix = grad_out * (weight.unsqueeze(1) / n) * (student_prob - teacher_prob) / student_mix
        g_weight = grad_out * kl / n
        return g_mix, None, g_weight


def masked_divergence(student_mix: torch.Tensor, teacher_prob: torch.Tensor,
                      weight: torch.Tensor) -> torch.Tensor:
    """Training-path reweighted mask loss on batched B x C x H x W tensors.

    ``student_mix`` is the unnormalized positive mixture from the event
    branch, ``teacher_prob`` the detached per-pixel distribution from the
    image branch, ``weight`` a B x H x W map.
    """
    if student_mix.shape != teacher_prob.shape:
        raise InvalidArgumentError("student and teacher map shapes differ")
    if weight.shape != (student_mix.shape[0],) + student_mix.shape[2:]:
        raise InvalidArgumentError("weight map shape does not match the segmentation maps")
    return _MaskedDivergence.apply(student_mix, teacher_prob.detach(), weight)


def reweighted_mask_loss(weight: torch.Tensor, y_image: torch.Tensor, y_event: torch.Tensor,
                         hard_targets: bool = False) -> torch.Tensor:
    """Mean over pixels of weight * divergence(teacher || student) on H x W x C maps.

    The divergence is soft-target cross-entropy measured relative to the
    teacher's own entropy, so a perfect match scores exactly zero; for one-hot
    teachers it coincides with plain cross-entropy.  ``hard_targets`` snaps
    the teacher to its per-pixel argmax first.  Teacher values receive no
    gradient.
    """
    if y_image.shape != y_event.shape:
        raise InvalidArgumentError("segmentation map shapes differ")
    if weight.shape != y_image.shape[:-1]:
        raise InvalidArgumentError("weight map shape does not match the segmentation maps")
    sums_i = y_image.sum(dim=-1)
    sums_e = y_event.sum(dim=-1)
    if not torch.allclose(sums_i, torch.ones_like(sums_i), atol=1e-5) or \
            not torch.allclose(sums_e, torch.ones_like(sums_e), atol=1e-5):
        raise InvalidInputError("per-pixel class values must sum to 1 (within 1e-5)")
    teacher = y_image.detach()
    if hard_targets:
        teacher = F.one_hot(teacher.argmax(dim=-1), y_image.shape[-1]).to(y_image.dtype)
    kl = torch.special.xlogy(teacher, teacher).sum(-1) - torch.special.xlogy(teacher, y_event).sum(-1)
    return (weight * kl).mean()


# --------------------------------------------------------------------------
# Category supervision
# --------------------------------------------------------------------------


def category_loss(head, mask_embeddings: torch.Tensor, class_matrix: torch.Tensor,
                  targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the per-query class logits (with no-object column).

    ``targets`` holds a class index per query, or NO_OBJECT (-1) for queries
    that should land in the learned no-object column.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    num_classes = class_matrix.shape[0]
    if targets.shape != mask_embeddings.shape[:-1]:
        raise InvalidArgumentError("one target per query required")
    if targets.numel() and (int(targets.min()) < NO_OBJECT or int(targets.max()) >= num_classes):
        raise InvalidArgumentError(
            f"target class index out of range [0, {num_classes}) (or -1 for no-object)")
    logits = head.class_logits(mask_embeddings, class_matrix)
    mapped = torch.where(targets == NO_OBJECT, torch.full_like(targets, num_classes), targets)
    return F.cross_entropy(logits.reshape(-1, num_classes + 1), mapped.reshape(-1))


def assign_query_targets(student_masks: MaskSet, teacher_masks: MaskSet,
                         teacher_class_logits: torch.Tensor,
                         iou_threshold: float = 0.25, positional: bool = False) -> torch.Tensor:
    """Pseudo-label each student query from the teacher's masks.

    With ``positional`` the teacher's same-index query supplies the label.
    Otherwise each student query takes the class of the teacher mask with the
    best IoU between binarized masks (probability 0.5, i.e. logit 0), or
    NO_OBJECT when the best IoU is below ``iou_threshold``.  The teacher class
    is the argmax of its per-query logits over classes plus no-object.
    """
    with torch.no_grad():
        teacher_best = teacher_class_logits.argmax(dim=-1)  # [B,]Q; C means no-object
        num_classes = teacher_class_logits.shape[-1] - 1
        teacher_cls = torch.where(teacher_best == num_classes,
                                  torch.full_like(teacher_best, NO_OBJECT), teacher_best)
        if positional:
            return teacher_cls

        s_logits, t_logits = student_masks.mask_logits, teacher_masks.mask_logits
        squeeze = s_logits.ndim == 3
        if squeeze:
            s_logits, t_logits, teacher_cls = (s_logits.unsqueeze(0), t_logits.unsqueeze(0),
                                               teacher_cls.unsqueeze(0))
        out = []
        for b in range(s_logits.shape[0]):
            s_bin = (s_logits[b] > 0).reshape(s_logits.shape[1], -1)
            t_bin = (t_logits[b] > 0).reshape(t_logits.shape[1], -1)
            inter = (s_bin.unsqueeze(1) & t_bin.unsqueeze(0)).sum(-1).double()
            union = (s_bin.unsqueeze(1) | t_bin.unsqueeze(0)).sum(-1).double()
            iou = torch.where(union > 0, inter / union.clamp_min(1.0), torch.zeros_like(inter))
            best_iou, best_idx = iou.max(dim=1)
            labels = teacher_cls[b][best_idx]
            labels = torch.where(best_iou < iou_threshold,
                                 torch.full_like(labels, NO_OBJECT), labels)
            out.append(labels)
        result = torch.stack(out)
        return result.squeeze(0) if squeeze else result


# --------------------------------------------------------------------------
# Totals
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 5.0
    lambda_c: float = 2.0
    lambda_reg: float = 0.1

    def __post_init__(self):
        for name in ("lambda_m", "lambda_c", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")


@dataclass
class LossReport:
    l_t: float
    l_f: float
    l_m: float
    l_c: float
    l_reg: float
    l_final: float
    grad_norms: dict = field(default_factory=dict)

    def validate(self, weights: LossWeights) -> "LossReport":
        expect = (self.l_t + self.l_f + weights.lambda_m * self.l_m
                  + weights.lambda_c * self.l_c + weights.lambda_reg * self.l_reg)
        if abs(expect - self.l_final) > 1e-6 * max(1.0, abs(expect)):
            raise NumericError(f"total {self.l_final} inconsistent with parts {expect}",
                               component="l_final")
        return self

    def as_dict(self) -> dict:
        out = {"l_t": self.l_t, "l_f": self.l_f, "l_m": self.l_m, "l_c": self.l_c,
               "l_reg": self.l_reg, "l_final": self.l_final}
        if self.grad_norms:
            out["grad_norms"] = dict(sorted(self.grad_norms.items()))
        return out


def combine_losses(l_t: torch.Tensor, l_f: torch.Tensor, l_m: torch.Tensor, l_c: torch.Tensor,
                   weight_map: torch.Tensor, weights: LossWeights) -> tuple[torch.Tensor, LossReport]:
    """Weighted total with the anti-collapse regularizer on the weight map.

    The regularizer (mean(M) - 1)^2 stops joint training from silencing the
    mask loss by driving the trust map to zero.
    """
    parts = {"l_t": l_t, "l_f": l_f, "l_m": l_m, "l_c": l_c}
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise NumericError("non-finite loss component", component=name)
    l_reg = (weight_map.mean() - 1.0) ** 2
    if not torch.isfinite(l_reg):
        raise NumericError("non-finite loss component", component="l_reg")
    total = (l_t + l_f + weights.lambda_m * l_m + weights.lambda_c * l_c
             + weights.lambda_reg * l_reg)
    as_float = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    report = LossReport(as_float(l_t), as_float(l_f), as_float(l_m), as_float(l_c),
                        as_float(l_reg), as_float(total)).validate(weights)
    return total, report


def total_loss(l_t: float, l_f: float, l_m: float, l_c: float,
               weights: LossWeights, weight_map: torch.Tensor) -> LossReport:
    """Scalar-in, report-out variant of :func:`combine_losses`."""
    to_t = lambda v: torch.as_tensor(float(v), dtype=torch.float64)
    _, report = combine_losses(to_t(l_t), to_t(l_f), to_t(l_m), to_t(l_c),
                               torch.as_tensor(weight_map, dtype=torch.float64), weights)
    return report
