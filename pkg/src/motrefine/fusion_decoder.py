"""Fusion decoder over query pairs.

A stack of layers, each of which: enriches the detection/association
queries with ROIAligned features at their current reference boxes, runs
masked self-attention over the concatenated pair (fusion attention),
cross-attends each stream to its own frame's features, and emits class
logits plus additive box corrections and backward motions. References
propagate additively layer to layer:

    boxes_det  = ref_prev + delta_box
    boxes_asso = ref_prev + motion

with edge distances clamped at zero before becoming the next layer's
references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .box_ops import clamp_edges
from .nn_core import FeatureMap, MultiHeadAttention, SamplingCrossAttention, roi_align_many
from .box_ops import edge_to_corner_t

NEG_INF = float("-inf")


def build_fusion_mask(n: int, beta: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive 2n x 2n mask over concatenated query pairs.

    Intra-half interaction is fully blocked (-inf); the paired
    cross-half entry (same index mod n) is open (0); every other
    cross-half entry gets the finite penalty beta (which may be -inf,
    degenerating to pure pairwise exchange).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = torch.arange(2 * n)
    center = (2 * n - 1) / 2.0
    same_half = (idx[:, None] - center) * (idx[None, :] - center) > 0
    diagonal = idx[:, None] == idx[None, :]
    paired = (idx[:, None] % n) == (idx[None, :] % n)
    mask = torch.full((2 * n, 2 * n), beta, dtype=dtype)
    mask[~same_half & paired] = 0.0
    mask[same_half | diagonal] = NEG_INF
    return mask


@dataclass
class LayerOutput:
    """Per-layer decoder emission for N query pairs."""

    cls_logits: torch.Tensor        # (N,)
    delta_box: torch.Tensor         # (N, 6)
    motion: torch.Tensor            # (N, 6)
    boxes_det: torch.Tensor         # (N, 6), edge distances clamped at 0
    boxes_asso: torch.Tensor        # (N, 6), clamped
    boxes_det_raw: torch.Tensor     # (N, 6), pre-clamp ref_prev + delta_box
    boxes_asso_raw: torch.Tensor    # (N, 6), pre-clamp ref_prev + motion
    ref_prev: torch.Tensor          # (N, 6) references entering this layer
    fusion_weights: torch.Tensor | None = None  # (heads, 2N, 2N)


@dataclass
class DecoderState:
    """Mutable carrier threaded through the decoder layers."""

    q_det: torch.Tensor
    q_asso: torch.Tensor
    ref_det: torch.Tensor
    ref_asso: torch.Tensor
    layer: int = 0
    frozen_targets: list | None = None


class FusionAttention(nn.Module):
    """Masked self-attention over the concatenated query pair, with
    post-norm residual, split back into the two streams."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)

    def forward(self, q_det, q_asso, mask, return_weights=False):
        n = q_det.shape[0]
        fused = torch.cat([q_det, q_asso], dim=0)
        out, weights = self.attn(fused, fused, fused, mask, return_weights=return_weights)
        fused = self.norm(fused + out)
        return fused[:n], fused[n:], weights


class _FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x + self.net(x))


class _BoxHead(nn.Module):
    """Small MLP; final layer zero-initialized so predictions start at
    the incoming reference boxes."""

    def __init__(self, dim: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, out)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class DualDecoderLayer(nn.Module):
    """One fusion decoder layer: ROIAlign enrichment, fusion attention,
    per-stream sampling cross-attention + FFN, prediction heads."""

    def __init__(
        self,
        dim: int,
        heads: int,
        channels: int,
        points: int = 4,
        roi_size: int = 4,
        motion_form: str = "center+box",
        ffn_hidden: int | None = None,
    ):
        super().__init__()
        self.roi_size = roi_size
        self.motion_form = motion_form
        hidden = ffn_hidden or 2 * dim
        self.enrich_det = nn.Linear(channels, dim)
        self.enrich_asso = nn.Linear(channels, dim)
        self.fusion = FusionAttention(dim, heads)
        self.cross_det = SamplingCrossAttention(dim, channels, points)
        self.cross_asso = SamplingCrossAttention(dim, channels, points)
        self.norm_cross_det = nn.LayerNorm(dim)
        self.norm_cross_asso = nn.LayerNorm(dim)
        self.ffn_det = _FFN(dim, hidden)
        self.ffn_asso = _FFN(dim, hidden)
        self.cls_head = nn.Linear(dim, 1)
        nn.init.constant_(self.cls_head.bias, -2.0)
        self.box_head = _BoxHead(dim, 6)
        motion_dof = {"center+box": 6, "center": 2, "none": 0}[motion_form]
        self.motion_head = _BoxHead(dim, motion_dof) if motion_dof else None

    @staticmethod
    def _denorm(refs: torch.Tensor, fmap: FeatureMap) -> torch.Tensor:
        scale = refs.new_tensor(
            [fmap.pixel_width, fmap.pixel_height,
             fmap.pixel_height, fmap.pixel_width,
             fmap.pixel_height, fmap.pixel_width]
        )
        return refs * scale

    def forward(
        self,
        state: DecoderState,
        f_t: FeatureMap,
        f_prev: FeatureMap,
        mask: torch.Tensor,
        return_weights: bool = False,
    ) -> tuple[DecoderState, LayerOutput]:
        ref_prev = state.ref_det
        ref_det_px = self._denorm(state.ref_det, f_t)
        ref_asso_px = self._denorm(state.ref_asso, f_prev)

        # 1. query enrichment from ROIAligned features at the references
        det_feats = roi_align_many(
            f_t, edge_to_corner_t(ref_det_px), self.roi_size, self.roi_size
        ).mean(dim=(2, 3))
        asso_feats = roi_align_many(
            f_prev, edge_to_corner_t(ref_asso_px), self.roi_size, self.roi_size
        ).mean(dim=(2, 3))
        q_det = state.q_det + self.enrich_det(det_feats)
        q_asso = state.q_asso + self.enrich_asso(asso_feats)

        # 2. fusion attention across the concatenated pair
        q_det, q_asso, weights = self.fusion(q_det, q_asso, mask, return_weights)

        # 3. per-stream cross attention into each frame's features, then FFN
        q_det = self.norm_cross_det(q_det + self.cross_det(q_det, ref_det_px, f_t))
        q_asso = self.norm_cross_asso(q_asso + self.cross_asso(q_asso, ref_asso_px, f_prev))
        q_det = self.ffn_det(q_det)
        q_asso = self.ffn_asso(q_asso)

        # 4. heads
        cls_logits = self.cls_head(q_det).squeeze(-1)
        delta_box = self.box_head(q_det)
        n = q_det.shape[0]
        if self.motion_head is None:
            motion = delta_box.new_zeros(n, 6)
        else:
            m = self.motion_head(q_asso)
            if self.motion_form == "center":
                motion = torch.cat([m, m.new_zeros(n, 4)], dim=-1)
            else:
                motion = m

        # 5. additive reference update
        boxes_det_raw = ref_prev + delta_box
        boxes_asso_raw = ref_prev + motion
        boxes_det = clamp_edges(boxes_det_raw)
        boxes_asso = clamp_edges(boxes_asso_raw)

        out = LayerOutput(
            cls_logits=cls_logits,
            delta_box=delta_box,
            motion=motion,
            boxes_det=boxes_det,
            boxes_asso=boxes_asso,
            boxes_det_raw=boxes_det_raw,
            boxes_asso_raw=boxes_asso_raw,
            ref_prev=ref_prev,
            fusion_weights=weights,
        )
        next_state = DecoderState(
            q_det=q_det,
            q_asso=q_asso,
            ref_det=boxes_det.detach() if self.training else boxes_det,
            ref_asso=boxes_asso.detach() if self.training else boxes_asso,
            layer=state.layer + 1,
            frozen_targets=state.frozen_targets,
        )
        return next_state, out


class FusionDecoder(nn.Module):
    """Stack of dual-decoder layers sharing one fusion mask."""

    def __init__(
        self,
        dim: int,
        heads: int,
        channels: int,
        layers: int,
        beta: float = -10.0,
        points: int = 4,
        roi_size: int = 4,
        motion_form: str = "center+box",
    ):
        super().__init__()
        if layers < 1:
            raise ValueError("layers must be >= 1")
        self.beta = beta
        self.layers = nn.ModuleList(
            DualDecoderLayer(dim, heads, channels, points, roi_size, motion_form)
            for _ in range(layers)
        )

    def forward(
        self,
        init: DecoderState,
        f_t: FeatureMap,
        f_prev: FeatureMap,
        return_weights: bool = False,
    ) -> list[LayerOutput]:
        n = init.q_det.shape[0]
        mask = build_fusion_mask(n, self.beta, dtype=init.q_det.dtype)
        state = init
        outputs = []
        for layer in self.layers:
            state, out = layer(state, f_t, f_prev, mask, return_weights)
            outputs.append(out)
        return outputs
