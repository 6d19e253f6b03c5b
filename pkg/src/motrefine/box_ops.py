"""Tensor variants of the box operations, for batched loss computation.

Edge boxes are tensors of shape (..., 6) laid out as
(cx, cy, ad_tp, ad_lf, ad_bt, ad_rt); corner boxes are (..., 4) xyxy.
Coordinates are usually normalized to [0, 1] on the model side.
"""

from __future__ import annotations

import torch


def edge_to_corner_t(b: torch.Tensor) -> torch.Tensor:
    cx, cy, tp, lf, bt, rt = b.unbind(-1)
    return torch.stack([cx - lf, cy - tp, cx + rt, cy + bt], dim=-1)


def corner_to_edge_t(c: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = c.unbind(-1)
    cx = 0.5 * (x1 + x2)
    cy = 0.5 * (y1 + y2)
    return torch.stack([cx, cy, cy - y1, cx - x1, y2 - cy, x2 - cx], dim=-1)


def clamp_edges(b: torch.Tensor) -> torch.Tensor:
    """Clamp the four edge distances at 0, leaving the center untouched."""
    center, dists = b[..., :2], b[..., 2:]
    return torch.cat([center, dists.clamp(min=0)], dim=-1)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between corner-box sets a: (N, 4) and b: (M, 4)."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def pairwise_giou_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise 1 - GIoU between corner-box sets; shape (N, M)."""
    i = pairwise_iou(a, b)
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    elt = torch.min(a[:, None, :2], b[None, :, :2])
    erb = torch.max(a[:, None, 2:], b[None, :, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    giou = i - torch.where(
        enclose > 0,
        (enclose - union) / enclose.clamp(min=1e-12),
        torch.zeros_like(enclose),
    )
    return 1.0 - giou


def elementwise_giou_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - GIoU for aligned corner-box tensors a, b of shape (N, 4)."""
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[:, 0] * wh[:, 1]
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    union = area_a + area_b - inter
    i = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))
    elt = torch.min(a[:, :2], b[:, :2])
    erb = torch.max(a[:, 2:], b[:, 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[:, 0] * ewh[:, 1]
    giou = i - torch.where(
        enclose > 0,
        (enclose - union) / enclose.clamp(min=1e-12),
        torch.zeros_like(enclose),
    )
    return 1.0 - giou
