"""Loss kernels for both training stages.

Every L1-style distance is an element mean, so weights do not depend on image
or feature size.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossWeights


class LossError(ValueError):
    pass


def _same_shape(a, b):
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


def invariable_content_loss(f_a, f_b) -> torch.Tensor:
    a = getattr(f_a, "map", f_a)
    b = getattr(f_b, "map", f_b)
    return l1_mean(a, b)


def reconstruction_loss(generated, target) -> torch.Tensor:
    return l1_mean(generated, target)


def identity_preserving_loss(emb_gen, emb_ref) -> torch.Tensor:
    return l1_mean(emb_gen, emb_ref)


def _mean_over_maps(values):
    return torch.cat([v.flatten() for v in values]).mean()


def reality_adversarial_loss(real_maps, fake_maps, side: str) -> torch.Tensor:
    """Binary cross-entropy on patch logits, averaged over patches and scales.

    ``side="discriminator"`` scores reals towards 1 and fakes towards 0 and
    returns the sum of the two means. ``side="generator"`` ignores
    ``real_maps`` and uses the non-saturating ``-log sigmoid(fake)``.
    """
    if isinstance(fake_maps, torch.Tensor):
        fake_maps = [fake_maps]
    if side == "generator":
        return _mean_over_maps([F.softplus(-f) for f in fake_maps])
    if side == "discriminator":
        if isinstance(real_maps, torch.Tensor):
            real_maps = [real_maps]
        return (_mean_over_maps([F.softplus(-r) for r in real_maps])
                + _mean_over_maps([F.softplus(f) for f in fake_maps]))
    raise LossError(f"unknown side {side!r}")


def degradation_ranking_loss(score_anchor, score_other, gamma, margin) -> torch.Tensor:
    """``max(0, (anchor - other) * gamma + margin)``, elementwise."""
    if margin <= 0:
        raise LossError("ranking margin must be positive")
    return torch.clamp((score_anchor - score_other) * gamma + margin, min=0)


SKIP = 0


def rank_label_from_scores(score_i, score_k):
    """-1 where ``score_i > score_k``, +1 where smaller, 0 (skip) on ties.

    Accepts floats or tensors; the result never carries gradient.
    """
    if isinstance(score_i, torch.Tensor) or isinstance(score_k, torch.Tensor):
        si = torch.as_tensor(score_i).detach()
        sk = torch.as_tensor(score_k).detach()
        return torch.sign(sk - si)
    if score_i > score_k:
        return -1
    if score_i < score_k:
        return 1
    return SKIP


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(values.dtype)
    n = mask.sum()
    if n == 0:
        return values.sum() * 0.0
    return (values * mask).sum() / n


def identification_loss(logits, label) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label)
    if logits.dim() == 1:
        logits, label = logits[None], label.reshape(1)
    if (label < 0).any() or (label >= logits.shape[-1]).any():
        raise LossError(f"label out of range for {logits.shape[-1]} identities")
    return F.cross_entropy(logits, label.long())


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    # sqrt of a clamped squared distance; exact zeros get zero gradient
    sq = (x[:, None, :] - x[None, :, :]).pow(2).sum(-1)
    pos = sq > 0
    return torch.where(pos, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


def triplet_hard_loss(embeddings, labels, margin: float) -> torch.Tensor:
    """Batch-hard triplet loss; anchors without a positive are left out of the mean."""
    labels = torch.as_tensor(labels)
    dist = pairwise_euclidean(embeddings)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.any():
        raise LossError("no anchor has both a positive and a negative in the batch")
    d_p = torch.where(pos_mask, dist, torch.full_like(dist, -math.inf)).max(1).values
    d_n = torch.where(neg_mask, dist, torch.full_like(dist, math.inf)).min(1).values
    hinge = torch.clamp(d_p[valid] - d_n[valid] + margin, min=0)
    return hinge.mean()


PHASE_TERMS = {
    "self": ("invc", "recon", "pre", "real", "deg"),
    "cross": ("id", "recon", "pre", "real", "deg"),
    "dfen": ("inv", "sen", "both"),
}


def total_objective(phase: str, terms: dict, w: LossWeights):
    if phase not in PHASE_TERMS:
        raise LossError(f"unknown phase {phase!r}")
    needed = PHASE_TERMS[phase]
    missing = [t for t in needed if t not in terms]
    extra = [t for t in terms if t not in needed]
    if missing or extra:
        raise LossError(f"{phase} objective: missing {missing}, unexpected {extra}")
    total = 0.0
    for t in needed:
        lam = getattr(w, t)
        # a disabled term contributes no graph edges, so no gradient leaks through it
        if lam != 0:
            total = total + lam * terms[t]
    return total
