"""Training objective: batch-all triplet loss plus per-part cross-entropy.

The triplet term enumerates every (anchor, positive, negative) with
y_a = y_p != y_n and a != p, applies the hinge max(m + d(a,p) - d(a,n), 0),
and divides the sum of nonzero hinges by their count N_valid; parts are
averaged afterwards. Cross-entropy is computed per part on the BNNeck logits
and averaged over batch and parts. The total is the plain, unweighted sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ArgumentError, NumericError
from .network import PartEmbeddingSet

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.2

# Count of batches that contained no valid triplet at all; the training loop
# logs it so silent label-collapse is visible.
degenerate_batch_count = 0


@dataclass
class LossBreakdown:
    triplet: float
    ce: float
    total: float
    n_valid_per_part: list[int]

    def __post_init__(self) -> None:
        if self.total != self.triplet + self.ce:
            raise ArgumentError("total must equal triplet + ce exactly")


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with exact zeros for coincident rows.

    The usual sqrt(x^2 - 2xy + y^2) form has undefined gradient at 0; masking
    the epsilon back out keeps duplicate embeddings at distance exactly 0 with
    zero gradient instead of eps-sized noise.
    """
    if x.ndim != 2:
        raise ArgumentError(f"expected [N, d] embeddings, got {tuple(x.shape)}")
    prod = x @ x.t()
    sq = prod.diagonal()
    d2 = (sq.unsqueeze(0) - 2.0 * prod + sq.unsqueeze(1)).clamp(min=0)
    zero = d2 == 0
    return torch.sqrt(d2 + zero * 1e-12) * ~zero


def triplet_loss(
    metric: torch.Tensor, labels: torch.Tensor, margin: float = DEFAULT_MARGIN
) -> tuple[torch.Tensor, list[int]]:
    """Batch-all triplet loss over [N, parts, d] embeddings.

    Returns (scalar loss, per-part N_valid). A part with no active triplet
    contributes 0; a batch with no valid triplet at all returns 0 and bumps
    ``degenerate_batch_count``.
    """
    global degenerate_batch_count
    if metric.ndim != 3:
        raise ArgumentError(f"expected [N, parts, d] metric, got {tuple(metric.shape)}")
    if labels.shape != metric.shape[:1]:
        raise ArgumentError("labels must be one id per batch element")
    if margin <= 0:
        raise ArgumentError("margin must be positive")

    n, n_parts, _ = metric.shape
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(n, dtype=torch.bool, device=metric.device)
    # valid[a, p, q]: y_a = y_p (a != p) and y_a != y_q
    valid = (same & ~eye).unsqueeze(2) & (~same).unsqueeze(1)

    if not bool(valid.any()):
        degenerate_batch_count += 1
        logger.warning("batch has no valid triplet (all labels equal or all distinct)")
        return metric.new_zeros(()), [0] * n_parts

    part_losses = []
    n_valid: list[int] = []
    for part in range(n_parts):
        dist = pairwise_distances(metric[:, part])
        hinge = (margin + dist.unsqueeze(2) - dist.unsqueeze(1)).clamp(min=0) * valid
        active = hinge > 0
        count = int(active.sum())
        n_valid.append(count)
        if count > 0:
            part_losses.append(hinge.sum() / count)
        else:
            part_losses.append(metric.new_zeros(()))
    return torch.stack(part_losses).mean(), n_valid


def ce_loss(logits: torch.Tensor, class_labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per part, averaged over batch and parts."""
    if logits.ndim != 3:
        raise ArgumentError(f"expected [N, parts, classes] logits, got {tuple(logits.shape)}")
    if class_labels.shape != logits.shape[:1]:
        raise ArgumentError("class_labels must be one label per batch element")
    n, n_parts, n_classes = logits.shape
    if int(class_labels.min()) < 0 or int(class_labels.max()) >= n_classes:
        raise ArgumentError(f"class labels must lie in [0, {n_classes})")
    flat = logits.reshape(n * n_parts, n_classes)
    repeated = class_labels.repeat_interleave(n_parts)
    return F.cross_entropy(flat, repeated)


def total_loss(
    output: PartEmbeddingSet,
    triplet_labels: torch.Tensor,
    class_labels: torch.Tensor,
    margin: float = DEFAULT_MARGIN,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Unweighted sum of the two terms, plus a float breakdown for logging."""
    tri, n_valid = triplet_loss(output.metric, triplet_labels, margin)
    ce = ce_loss(output.logits, class_labels)
    total = tri + ce
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss: triplet={tri.detach().item()!r} ce={ce.detach().item()!r}"
        )
    tri_f, ce_f = tri.detach().item(), ce.detach().item()
    return total, LossBreakdown(tri_f, ce_f, tri_f + ce_f, n_valid)
