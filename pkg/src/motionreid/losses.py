"""Training losses: KL feature consistency across warped same-identity
images, keypoint/Jacobian equivariance under known deformations, identity
cross-entropy and soft-margin batch-hard triplet (global and per-part), and
their weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, ContractViolation
from .motion import KeypointState, TPSDeformation, compose_affine, warp_features

KL_EPS = 1e-8


@dataclass
class LossWeights:
    """Per-term weights of the total objective."""

    id_global: float = 1.0
    triplet_global: float = 1.0
    id_part: float = 1.0
    triplet_part: float = 1.0
    equivariance: float = 10.0
    feature_consistency: float = 5.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


@dataclass
class LossBreakdown:
    id_global: Tensor
    triplet_global: Tensor
    id_part: Tensor
    triplet_part: Tensor
    equivariance: Tensor
    feature_consistency: Tensor
    total: Tensor

    def terms(self) -> dict[str, Tensor]:
        d = dict(vars(self))
        d.pop("total")
        return d

    def scalars(self) -> dict[str, float]:
        return {k: float(v) for k, v in vars(self).items()}


def total_loss(id_global: Tensor, triplet_global: Tensor, id_part: Tensor,
               triplet_part: Tensor, equivariance: Tensor,
               feature_consistency: Tensor,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted sum of the six terms, keeping the breakdown for logging."""
    w = weights or LossWeights()
    total = (w.id_global * id_global + w.triplet_global * triplet_global
             + w.id_part * id_part + w.triplet_part * triplet_part
             + w.equivariance * equivariance
             + w.feature_consistency * feature_consistency)
    return LossBreakdown(id_global=id_global, triplet_global=triplet_global,
                         id_part=id_part, triplet_part=triplet_part,
                         equivariance=equivariance,
                         feature_consistency=feature_consistency, total=total)


# -- feature consistency ------------------------------------------------------


def kl_divergence(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """sum p * log(p / q) over the last dimension, with an eps floor on q."""
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(eps))).sum(dim=-1)


def spatial_softmax(featmap: Tensor) -> Tensor:
    """Per-channel distribution over the grid: (..., C, h, w) -> (..., C, h*w)."""
    flat = featmap.reshape(*featmap.shape[:-2], -1)
    return torch.softmax(flat, dim=-1)


def feature_consistency_loss(f_a: Tensor, f_b: Tensor, f_c: Tensor, f_d: Tensor,
                             flows: tuple[Tensor, Tensor, Tensor]) -> Tensor:
    """KL agreement between reference features and warped sibling features.

    f_a..f_d: (..., C, h, w) same-identity feature maps; flows carry the
    backward fields that pull each of f_b, f_c, f_d onto f_a's grid. Each
    warped map is converted to a per-channel spatial distribution and
    compared against f_a's distribution with KL; the three divergences are
    summed (channel-averaged, batch-averaged).
    """
    p = spatial_softmax(f_a)
    loss = f_a.new_zeros(())
    for f_other, flow in zip((f_b, f_c, f_d), flows):
        warped = warp_features(f_other, flow)
        q = spatial_softmax(warped)
        loss = loss + kl_divergence(p, q).mean()
    if not torch.isfinite(loss):
        raise ContractViolation("feature consistency loss is not finite")
    return loss


# -- equivariance -------------------------------------------------------------


def equivariance_loss(kp_x: KeypointState, kp_y: KeypointState,
                      tps: TPSDeformation) -> Tensor:
    """Keypoint/Jacobian consistency under a known deformation.

    ``kp_y`` comes from the deformed image; ``tps`` maps deformed-image
    coordinates back into the original. The coordinate term is the L1 gap
    between kp_x and tps(kp_y); the Jacobian term demands that the affine
    composed from the two predictions cancel the deformation's spatial
    Jacobian at the deformed keypoints. Keypoints with a degenerate
    composition or a collapsed deformation Jacobian are excluded from the
    Jacobian term.
    """
    coord_term = (kp_x.coords - tps(kp_y.coords)).abs().mean()
    comp = compose_affine(kp_y, kp_x)
    dj = tps.jacobian(kp_y.coords)
    det = dj[..., 0, 0] * dj[..., 1, 1] - dj[..., 0, 1] * dj[..., 1, 0]
    eye = torch.eye(2, dtype=dj.dtype, device=dj.device)
    resid = (comp.linear @ dj - eye).abs().mean(dim=(-2, -1))
    valid = ~(comp.degenerate | (det.detach().abs() < 1e-6))
    if valid.any():
        jac_term = (resid * valid).sum() / valid.sum()
    else:
        jac_term = resid.new_zeros(())
    return coord_term + jac_term


# -- identity classification --------------------------------------------------


def identity_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean negative log-softmax probability of the true identity."""
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ContractViolation(
            f"labels must lie in [0, {c}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    log_probs = F.log_softmax(logits, dim=-1)
    return -log_probs[torch.arange(n), labels].mean()


def part_identity_loss(part_logits: Tensor, labels: Tensor,
                       masses: Tensor, eps: float = 1e-8) -> Tensor:
    """Visibility-weighted identity loss over part classifiers.

    part_logits: (K, N, C); masses: (N, K) foreground mass per part,
    normalized per sample so occluded parts contribute little.
    """
    k, n, c = part_logits.shape
    log_probs = F.log_softmax(part_logits, dim=-1)
    nll = -log_probs[:, torch.arange(n), labels]          # (K, N)
    weights = masses / (masses.sum(dim=-1, keepdim=True) + eps)
    return (nll.T * weights).sum(dim=-1).mean()


# -- triplet ------------------------------------------------------------------


def _squared_distances(emb: Tensor) -> Tensor:
    diff = emb[:, None, :] - emb[None, :, :]
    return (diff * diff).sum(dim=-1)


def triplet_loss(embeddings: Tensor, labels: Tensor) -> Tensor:
    """Soft-margin triplet with batch-hard mining.

    Per anchor, the hardest positive (max squared distance, same label,
    excluding self) and hardest negative (min squared distance, different
    label) enter log(1 + exp(d_pos^2 - d_neg^2)); anchors lacking either
    are skipped. Raises if no anchor is valid.
    """
    n = embeddings.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~torch.eye(n, dtype=torch.bool, device=same.device)
    neg_mask = ~same
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not valid.any():
        counts = torch.bincount(labels).tolist()
        raise ContractViolation(
            f"no valid triplet in batch (per-identity counts: {counts})")
    d2 = _squared_distances(embeddings)
    big = torch.finfo(d2.dtype).max / 4
    hardest_pos = torch.where(pos_mask, d2, -big).max(dim=1).values
    hardest_neg = torch.where(neg_mask, d2, big).min(dim=1).values
    per_anchor = F.softplus(hardest_pos - hardest_neg)
    return per_anchor[valid].mean()


def part_triplet_loss(part_vecs: Tensor, labels: Tensor, masses: Tensor,
                      eps: float = 1e-8) -> Tensor:
    """Triplet loss per part, weighted by batch-mean part visibility.

    part_vecs: (N, K, d); masses: (N, K). Each part's batch-hard triplet is
    averaged with weights proportional to that part's mean foreground mass.
    """
    k = part_vecs.shape[1]
    mean_mass = masses.mean(dim=0)
    weights = mean_mass / (mean_mass.sum() + eps)
    loss = part_vecs.new_zeros(())
    for i in range(k):
        loss = loss + weights[i] * triplet_loss(part_vecs[:, i], labels)
    return loss
