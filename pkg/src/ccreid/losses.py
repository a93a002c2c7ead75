"""Training objectives: part matching, cross-stream consistency, identity,
and batch-hard triplet losses, plus the weighted total.

All functions take torch tensors in NCHW layout and work in whatever dtype
they are given, so unit tests can run them in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

STREAMS = ("r", "h", "b")


@dataclass
class LossConfig:
    part_weight: float = 0.01          # weight of the part matching term
    consistency_weight: float = 0.01   # weight of the consistency term
    triplet_margin: float = 0.3
    log_epsilon: float = 1e-12
    enable_part: bool = True
    enable_consistency: bool = True
    enable_identity: bool = True
    enable_triplet: bool = True
    label_smoothing: float = 0.0
    consistency_pixel_mean: bool = False  # divide the spatial sum by h*w as well
    streams: tuple = ("r", "h", "b")

    def validate(self):
        for name in ("part_weight", "consistency_weight", "triplet_margin", "label_smoothing"):
            v = getattr(self, name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")
        if self.log_epsilon <= 0:
            raise ConfigurationError("log_epsilon must be positive")
        if not self.streams or any(s not in STREAMS for s in self.streams):
            raise ConfigurationError(f"streams must be a non-empty subset of {STREAMS}")
        return self

    @property
    def part_active(self):
        return self.enable_part and self.part_weight > 0

    @property
    def consistency_active(self):
        return self.enable_consistency and self.consistency_weight > 0


@dataclass
class LossReport:
    """Scalar loss components of one step, plus their weighted total.

    The total is recomputed from the logged components in float64 so that
    `total == part_weight*part + consistency_weight*consistency +
    sum(identity[s] + triplet[s] for s in streams)` holds to rounding.
    """

    part: float = 0.0
    consistency: float = 0.0
    identity: dict = field(default_factory=dict)
    triplet: dict = field(default_factory=dict)
    total: float = 0.0

    COLUMNS = ("L_part", "L_sc", "L_id_r", "L_id_h", "L_id_b",
               "L_tri_r", "L_tri_h", "L_tri_b", "L_total")

    def as_row(self):
        return [self.part, self.consistency,
                self.identity.get("r", 0.0), self.identity.get("h", 0.0), self.identity.get("b", 0.0),
                self.triplet.get("r", 0.0), self.triplet.get("h", 0.0), self.triplet.get("b", 0.0),
                self.total]

    def recombined(self, cfg: LossConfig):
        total = cfg.part_weight * self.part + cfg.consistency_weight * self.consistency
        for s in cfg.streams:
            total += self.identity.get(s, 0.0) + self.triplet.get(s, 0.0)
        return total


def part_matching_loss(attention, part_masks, eps=1e-12):
    """Cross-entropy between attention maps and binary part masks.

    Args:
        attention: N x K x h x w softmax-normalized attention maps
        part_masks: N x K x h x w binary masks, at most one part per pixel
        eps: added inside the log for stability

    Normalized by batch size and spatial area only; background pixels
    (all-zero mask columns) contribute nothing.
    """
    if attention.shape != part_masks.shape:
        raise ValidationError(
            f"attention {tuple(attention.shape)} vs masks {tuple(part_masks.shape)} shape mismatch")
    n, _, h, w = attention.shape
    ll = part_masks * torch.log(attention + eps)
    return -ll.sum() / (n * h * w)


def select_class_cam(cam, labels):
    """Pick each sample's ground-truth-class channel from an N x I x h x w map."""
    idx = labels.view(-1, 1, 1, 1).expand(-1, 1, cam.shape[2], cam.shape[3])
    return cam.gather(1, idx).squeeze(1)


def fuse_supervision(cam_r, cam_h, cam_b):
    """Pixelwise max of the three ground-truth-class activation maps.

    The result is a constant target: no gradient flows through it back
    into the network.
    """
    return torch.maximum(torch.maximum(cam_r, cam_h), cam_b).detach()


def saliency_map(features):
    """Channel mean of an N x C x h x w feature map."""
    return features.mean(dim=1)


def semantic_consistency_loss(target, sal_r, sal_h, sal_b, pixel_mean=False):
    """Squared-error pull of all three saliency maps toward the fused target.

    The squared residuals are summed over pixels and averaged over the
    batch; with pixel_mean the spatial sum becomes a spatial mean.
    """
    if not (target.shape == sal_r.shape == sal_h.shape == sal_b.shape):
        raise ValidationError("saliency maps and target disagree in shape")
    sq = (target - sal_r) ** 2 + (target - sal_h) ** 2 + (target - sal_b) ** 2
    per_sample = sq.mean(dim=(1, 2)) if pixel_mean else sq.sum(dim=(1, 2))
    return per_sample.mean()


def identity_loss(logits, labels, label_smoothing=0.0):
    """Mean cross-entropy over identity classes."""
    num_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes}), got "
                              f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def triplet_loss(features, labels, margin=0.3):
    """Batch-hard triplet loss on unnormalized Euclidean distances.

    For each anchor the hardest positive is its farthest same-label sample
    and the hardest negative its closest different-label sample; the loss
    averages max(0, d_ap - d_an + margin) over anchors.
    """
    n = features.shape[0]
    dist = torch.cdist(features, features)
    same = labels.view(-1, 1) == labels.view(1, -1)
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not neg_mask.any():
        raise ValidationError("triplet loss needs at least two identities in the batch")
    d_ap = (dist * pos_mask).amax(dim=1)
    d_an = dist.masked_fill(~neg_mask, float("inf")).amin(dim=1)
    return F.relu(d_ap - d_an + margin).mean()


def total_loss(outputs, labels, cfg: LossConfig, part_masks=None):
    """Combine the enabled loss terms for one batch.

    Args:
        outputs: stream outputs of the forward pass (attention maps,
            pooled features, logits, and activation maps per stream)
        labels: N identity class indices
        cfg: term weights and enable flags
        part_masks: N x K x h x w supervision masks, required when the
            part matching term is active

    Returns (loss tensor for backward, LossReport of float components).
    """
    cfg.validate()
    report = LossReport()
    terms = []

    for s in cfg.streams:
        logits = getattr(outputs, f"logits_{s}", None)
        pooled = getattr(outputs, f"f_{s}", None)
        if cfg.enable_identity:
            if logits is None:
                raise ConfigurationError(f"stream {s!r} enabled for identity loss but has no logits")
            lid = identity_loss(logits, labels, cfg.label_smoothing)
            terms.append(lid)
            report.identity[s] = float(lid.detach())
        if cfg.enable_triplet:
            if pooled is None:
                raise ConfigurationError(f"stream {s!r} enabled for triplet loss but has no features")
            ltri = triplet_loss(pooled, labels, cfg.triplet_margin)
            terms.append(ltri)
            report.triplet[s] = float(ltri.detach())

    if cfg.part_active:
        if getattr(outputs, "M", None) is None:
            raise ConfigurationError("part matching loss is active but no attention maps were produced")
        if part_masks is None:
            raise ConfigurationError("part matching loss is active but no part masks were given")
        lpart = part_matching_loss(outputs.M, part_masks, cfg.log_epsilon)
        terms.append(cfg.part_weight * lpart)
        report.part = float(lpart.detach())

    if cfg.consistency_active:
        cams = [getattr(outputs, f"E_{s}", None) for s in STREAMS]
        if any(c is None for c in cams):
            raise ConfigurationError("consistency loss needs activation maps from all three streams")
        feats = [getattr(outputs, f"F_{s}") for s in STREAMS]
        target = fuse_supervision(*(select_class_cam(c, labels) for c in cams))
        lsc = semantic_consistency_loss(target, *(saliency_map(f) for f in feats),
                                        pixel_mean=cfg.consistency_pixel_mean)
        terms.append(cfg.consistency_weight * lsc)
        report.consistency = float(lsc.detach())

    loss = sum(terms) if terms else torch.zeros((), dtype=torch.float32)
    report.total = report.recombined(cfg)
    return loss, report
