"""Decoder initialization from original-tracker output and the
assignment machinery: denoise/rematch split, repeat-and-clip query
seeding, constrained Hungarian matching with a deterministic tie-break,
ground-truth pre-assignment for confident predictions, and the weighted
Hungarian loss over a decoder layer's emissions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .box_ops import edge_to_corner_t, elementwise_giou_loss, pairwise_giou_loss, pairwise_iou
from .config import RefineConfig
from .fusion_decoder import LayerOutput
from .geometry import EdgeBox, Motion, apply_motion

DENOISE = "denoise"
REMATCH = "rematch"

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class TrackerOutput:
    """One original-tracker prediction: objectness score, box (pixels),
    optional backward motion clue."""

    score: float
    box: EdgeBox
    assoc: Motion | None = None


@dataclass
class InitPlan:
    """Per-query initialization for one frame pair."""

    source_idx: list[int]                 # index into the prediction pool; -1 = fallback grid
    labels: list[str]                     # DENOISE or REMATCH per query
    init_ref_det: torch.Tensor            # (N, 6) normalized edge boxes
    init_ref_asso: torch.Tensor           # (N, 6) normalized edge boxes
    frozen_targets: list = field(default_factory=list)  # gt index or None, per query


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]
    cost: float


def split_outputs(preds: list[TrackerOutput], thr_out: float) -> tuple[list[int], list[int]]:
    """Stable partition of prediction indices into decent (score >=
    thr_out) and poor."""
    decent = [i for i, p in enumerate(preds) if p.score >= thr_out]
    poor = [i for i, p in enumerate(preds) if p.score < thr_out]
    return decent, poor


def build_init_sequence(decent: list[int], poor: list[int], n: int) -> list[int]:
    """Decent entries followed by ceil((n - K_d) / K_r) repetitions of the
    poor entries, clipped to length n. With no poor entries the decent
    ones repeat cyclically."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not decent and not poor:
        raise ValueError("no predictions to build an init sequence from")
    seq = list(decent)
    if len(seq) < n:
        if poor:
            repeats = math.ceil((n - len(decent)) / len(poor))
            seq += poor * repeats
        else:
            i = 0
            while len(seq) < n:
                seq.append(decent[i % len(decent)])
                i += 1
    return seq[:n]


def _normalize_edgebox(b: EdgeBox, img_w: float, img_h: float) -> list[float]:
    return [b.cx / img_w, b.cy / img_h, b.ad_tp / img_h, b.ad_lf / img_w,
            b.ad_bt / img_h, b.ad_rt / img_w]


def _fallback_grid(n: int) -> torch.Tensor:
    """Default reference boxes when the tracker produced nothing: a
    regular grid of mid-sized boxes covering the unit square."""
    side = math.ceil(math.sqrt(n))
    boxes = []
    for i in range(n):
        r, c = divmod(i, side)
        cx = (c + 0.5) / side
        cy = (r + 0.5) / side
        boxes.append([cx, cy, 0.1, 0.1, 0.1, 0.1])
    return torch.tensor(boxes, dtype=torch.float32)


def _noised(box: EdgeBox, rng: np.random.Generator, noise_scale: float) -> EdgeBox:
    w = box.ad_lf + box.ad_rt
    h = box.ad_tp + box.ad_bt
    s = 0.1 * noise_scale
    return EdgeBox(
        box.cx + rng.uniform(-s * w, s * w),
        box.cy + rng.uniform(-s * h, s * h),
        max(box.ad_tp + rng.uniform(-s * h, s * h), 0.0),
        max(box.ad_lf + rng.uniform(-s * w, s * w), 0.0),
        max(box.ad_bt + rng.uniform(-s * h, s * h), 0.0),
        max(box.ad_rt + rng.uniform(-s * w, s * w), 0.0),
    )


def make_init_plan(
    preds: list[TrackerOutput],
    gt_boxes: list[EdgeBox] | None,
    cfg: RefineConfig,
    n: int,
    img_w: float,
    img_h: float,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> InitPlan:
    """Build the per-query initialization for one frame pair.

    During training the source boxes are disturbed with uniform noise
    (scaled by cfg.noise_scale) and confident predictions are pre-bound
    to ground-truth targets. With back_refer the association references
    are shifted by the tracker's motion clues.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if training and gt_boxes is None:
        raise ValueError("training requires ground-truth boxes")
    if not preds:
        refs = _fallback_grid(n)
        return InitPlan(
            source_idx=[-1] * n,
            labels=[REMATCH] * n,
            init_ref_det=refs,
            init_ref_asso=refs.clone(),
            frozen_targets=[None] * n,
        )

    decent, poor = split_outputs(preds, cfg.thr_out)
    if not cfg.dr_split:
        decent, poor = [], decent + poor
    seq = build_init_sequence(decent, poor, n)
    decent_set = set(decent)

    frozen_by_source: dict[int, int] = {}
    if training and cfg.dr_split and decent:
        targets = pre_assign([preds[i] for i in decent], gt_boxes, cfg.thr_match, cfg, img_w, img_h)
        for src, tgt in zip(decent, targets):
            if tgt is not None:
                frozen_by_source[src] = tgt

    if training and rng is None:
        rng = np.random.default_rng(0)

    det_rows, asso_rows, labels, frozen = [], [], [], []
    seen_sources: set[int] = set()
    for src in seq:
        box = preds[src].box
        if training and cfg.noise_scale > 0:
            box = _noised(box, rng, cfg.noise_scale)
        det_rows.append(_normalize_edgebox(box, img_w, img_h))
        if cfg.back_refer:
            if preds[src].assoc is None:
                raise ValueError("back_refer requested but prediction has no motion clue")
            asso_rows.append(_normalize_edgebox(apply_motion(box, preds[src].assoc), img_w, img_h))
        else:
            asso_rows.append(det_rows[-1])
        labels.append(DENOISE if src in decent_set else REMATCH)
        # duplicated sources keep the frozen target only on first occurrence
        if src in decent_set and src not in seen_sources:
            frozen.append(frozen_by_source.get(src))
        else:
            frozen.append(None)
        seen_sources.add(src)

    return InitPlan(
        source_idx=seq,
        labels=labels,
        init_ref_det=torch.tensor(det_rows, dtype=torch.float32),
        init_ref_asso=torch.tensor(asso_rows, dtype=torch.float32),
        frozen_targets=frozen,
    )


def _lsap_cost(cost: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not rows or not cols:
        return 0.0
    sub = cost[np.ix_(rows, cols)]
    ri, ci = linear_sum_assignment(sub)
    return float(sub[ri, ci].sum())


def hungarian(cost, frozen: list[tuple[int, int]] = ()) -> Assignment:
    """Minimum-cost bipartite assignment containing all frozen pairs.

    Tie-break among equally optimal assignments: rows in ascending order
    each take the lowest-index column consistent with optimality.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    R, C = cost.shape

    frozen = list(frozen)
    fr = [r for r, _ in frozen]
    fc = [c for _, c in frozen]
    if len(set(fr)) != len(fr) or len(set(fc)) != len(fc):
        raise ValueError("conflicting frozen pairs")
    for r, c in frozen:
        if not (0 <= r < R and 0 <= c < C):
            raise ValueError(f"frozen pair {(r, c)} out of range")

    pairs = dict(frozen)
    fixed = sum(cost[r, c] for r, c in frozen)
    rows = [r for r in range(R) if r not in pairs]
    cols = [c for c in range(C) if c not in set(fc)]

    target = fixed + _lsap_cost(cost, rows, cols)
    tol = 1e-9 * max(1.0, abs(target))

    # Lexicographic refinement: fix rows one by one to the lowest column
    # that keeps the total optimal.
    acc = fixed
    for r in list(rows):
        rows_rest = [x for x in rows if x != r]
        chosen = None
        for c in cols:
            rest = _lsap_cost(cost, rows_rest, [x for x in cols if x != c])
            if acc + cost[r, c] + rest <= target + tol:
                chosen = c
                break
        if chosen is None:
            rows.remove(r)  # r is unmatched in every optimal assignment
            continue
        pairs[r] = chosen
        acc += cost[r, chosen]
        rows.remove(r)
        cols.remove(chosen)

    pair_list = sorted(pairs.items())
    matched_rows = set(pairs)
    matched_cols = set(pairs.values())
    return Assignment(
        pairs=pair_list,
        unmatched_rows=[r for r in range(R) if r not in matched_rows],
        unmatched_cols=[c for c in range(C) if c not in matched_cols],
        cost=float(sum(cost[r, c] for r, c in pair_list)),
    )


def focal_cls_cost(probs: torch.Tensor, cfg: RefineConfig) -> torch.Tensor:
    """Per-prediction cost of claiming the foreground class."""
    p = probs.clamp(1e-8, 1 - 1e-8)
    if cfg.focal_cls:
        pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * (-torch.log(p))
        neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-torch.log(1 - p))
        return pos - neg
    return -torch.log(p)


def match_cost(cls_c: float, l1: float, giou_l: float, cfg: RefineConfig,
               association: bool = False) -> float:
    """Weighted matching cost from its three components. The association
    branch drops the class term and divides the box coefficients."""
    if association:
        return (cfg.lambda_l1 / cfg.assoc_divisor) * l1 \
            + (cfg.lambda_iou / cfg.assoc_divisor) * giou_l
    return cfg.lambda_cls * cls_c + cfg.lambda_l1 * l1 + cfg.lambda_iou * giou_l


def pairwise_match_cost(
    probs: torch.Tensor, boxes_e: torch.Tensor, gt_e: torch.Tensor, cfg: RefineConfig
) -> torch.Tensor:
    """Detection-branch cost matrix (N, M) in normalized coordinates."""
    l1 = torch.cdist(boxes_e, gt_e, p=1)
    gl = pairwise_giou_loss(edge_to_corner_t(boxes_e), edge_to_corner_t(gt_e))
    cls_c = focal_cls_cost(probs, cfg)[:, None]
    return cfg.lambda_cls * cls_c + cfg.lambda_l1 * l1 + cfg.lambda_iou * gl


def pre_assign(
    decent_preds: list[TrackerOutput],
    gt_boxes: list[EdgeBox],
    thr_match: float,
    cfg: RefineConfig,
    img_w: float,
    img_h: float,
) -> list:
    """Hungarian-match confident predictions to ground truth; keep a pair
    only when its IoU strictly exceeds thr_match. Returns a gt index or
    None per prediction."""
    if not decent_preds or not gt_boxes:
        return [None] * len(decent_preds)
    probs = torch.tensor([p.score for p in decent_preds], dtype=torch.float64)
    boxes = torch.tensor(
        [_normalize_edgebox(p.box, img_w, img_h) for p in decent_preds], dtype=torch.float64
    )
    gt = torch.tensor(
        [_normalize_edgebox(b, img_w, img_h) for b in gt_boxes], dtype=torch.float64
    )
    cost = pairwise_match_cost(probs, boxes, gt, cfg).numpy()
    assign = hungarian(cost)
    ious = pairwise_iou(edge_to_corner_t(boxes), edge_to_corner_t(gt))
    out: list = [None] * len(decent_preds)
    for r, c in assign.pairs:
        if float(ious[r, c]) > thr_match:
            out[r] = c
    return out


def sigmoid_focal_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="none"
    )
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = FOCAL_ALPHA * targets + (1 - FOCAL_ALPHA) * (1 - targets)
    return alpha_t * (1 - p_t) ** FOCAL_GAMMA * ce


def layer_loss(
    out: LayerOutput,
    gt_t: torch.Tensor,
    gt_prev: torch.Tensor | None,
    prev_mask: torch.Tensor | None,
    plan: InitPlan,
    cfg: RefineConfig,
) -> torch.Tensor:
    """Supervision for one decoder layer.

    gt_t: (M, 6) normalized edge boxes for frame t. gt_prev: (M, 6)
    same-identity boxes in frame t-1, with prev_mask marking which rows
    exist there (new objects contribute no association term). Queries
    with frozen targets keep them; the rest are Hungarian-matched to the
    remaining targets each layer; unmatched queries are supervised as
    background.
    """
    n = out.cls_logits.shape[0]
    m = gt_t.shape[0]
    device_dtype = dict(dtype=out.cls_logits.dtype)

    matched: dict[int, int] = {}
    for q, tgt in enumerate(plan.frozen_targets):
        if tgt is not None and tgt < m:
            matched[q] = tgt

    free_q = [q for q in range(n) if q not in matched]
    taken = set(matched.values())
    free_t = [t for t in range(m) if t not in taken]
    if free_q and free_t:
        probs = torch.sigmoid(out.cls_logits.detach())[free_q]
        cost = pairwise_match_cost(
            probs, out.boxes_det.detach()[free_q], gt_t[free_t], cfg
        ).numpy()
        assign = hungarian(cost)
        for r, c in assign.pairs:
            matched[free_q[r]] = free_t[c]

    num_boxes = max(m, 1)
    targets = torch.zeros(n, **device_dtype)
    for q in matched:
        targets[q] = 1.0
    cls = sigmoid_focal_loss(out.cls_logits, targets).sum() / num_boxes
    loss = cfg.lambda_cls * cls

    if matched:
        q_idx = torch.tensor(sorted(matched))
        t_idx = torch.tensor([matched[int(q)] for q in q_idx])
        pred_det = out.boxes_det[q_idx]
        tgt_det = gt_t[t_idx]
        l1 = (pred_det - tgt_det).abs().sum() / num_boxes
        gl = elementwise_giou_loss(
            edge_to_corner_t(pred_det), edge_to_corner_t(tgt_det)
        ).sum() / num_boxes
        loss = loss + cfg.lambda_l1 * l1 + cfg.lambda_iou * gl

        if gt_prev is not None and prev_mask is not None and cfg.motion_form != "none":
            keep = prev_mask[t_idx]
            if keep.any():
                pred_asso = out.boxes_asso[q_idx[keep]]
                tgt_asso = gt_prev[t_idx[keep]]
                l1a = (pred_asso - tgt_asso).abs().sum() / num_boxes
                gla = elementwise_giou_loss(
                    edge_to_corner_t(pred_asso), edge_to_corner_t(tgt_asso)
                ).sum() / num_boxes
                loss = loss + (cfg.lambda_l1 / cfg.assoc_divisor) * l1a \
                    + (cfg.lambda_iou / cfg.assoc_divisor) * gla
    return loss
