"""CLEAR tracking metrics (MOTA, FP, FN, IDsw) and IDF1.

The CLEAR matcher works frame by frame: it first keeps every previous
(gt id, pred id) pairing whose boxes still overlap at or above the IoU
gate, then Hungarian-matches the remaining boxes on 1 - IoU (pairs below
the gate are discarded). Unmatched predictions count as FP, unmatched
ground truth as FN, and a matched ground-truth track whose prediction id
differs from its last matched id counts one identity switch.

IDF1 uses a single whole-sequence bipartite matching between gt ids and
prediction ids maximizing identity-consistent detections (IDTP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import CornerBox, iou

FramesOf = dict[int, list[tuple[int, CornerBox]]]


@dataclass
class FrameCounts:
    frame: int
    fp: int
    fn: int
    idsw: int
    matches: int


@dataclass
class EvalReport:
    mota: float
    idf1: float
    fp: int
    fn: int
    idsw: int
    gt_count: int
    per_frame: list[FrameCounts] = field(default_factory=list)

    def as_kv(self) -> str:
        return (
            f"mota = {self.mota:.4f}\n"
            f"idf1 = {self.idf1:.4f}\n"
            f"fp = {self.fp}\nfn = {self.fn}\nidsw = {self.idsw}\n"
            f"gt = {self.gt_count}\n"
        )

    def as_table(self) -> str:
        head = f"{'MOTA':>8} {'IDF1':>8} {'FP':>6} {'FN':>6} {'IDsw':>6} {'GT':>6}"
        row = (
            f"{self.mota:8.4f} {self.idf1:8.4f} {self.fp:6d} "
            f"{self.fn:6d} {self.idsw:6d} {self.gt_count:6d}"
        )
        return head + "\n" + row


class EmptyGroundTruthError(ValueError):
    pass


def _frame_match(
    gt_items: list[tuple[int, CornerBox]],
    pred_items: list[tuple[int, CornerBox]],
    last_match: dict[int, int],
    gate: float,
) -> dict[int, int]:
    """One frame of CLEAR matching; returns gt index -> pred index."""
    matches: dict[int, int] = {}
    used_pred: set[int] = set()
    pred_by_id = {pid: j for j, (pid, _) in enumerate(pred_items)}
    # continuation preference
    for i, (gid, gbox) in enumerate(gt_items):
        pid = last_match.get(gid)
        if pid is None or pid not in pred_by_id:
            continue
        j = pred_by_id[pid]
        if j not in used_pred and iou(gbox, pred_items[j][1]) >= gate:
            matches[i] = j
            used_pred.add(j)
    rem_gt = [i for i in range(len(gt_items)) if i not in matches]
    rem_pred = [j for j in range(len(pred_items)) if j not in used_pred]
    if rem_gt and rem_pred:
        cost = np.array(
            [[1.0 - iou(gt_items[i][1], pred_items[j][1]) for j in rem_pred] for i in rem_gt]
        )
        ri, ci = linear_sum_assignment(cost)
        for a, b in zip(ri, ci):
            if cost[a, b] <= 1.0 - gate:
                matches[rem_gt[a]] = rem_pred[b]
    return matches


def clear_metrics(gt: FramesOf, pred: FramesOf, iou_gate: float = 0.5) -> EvalReport:
    """CLEAR counts and MOTA; idf1 field left at 0 (see evaluate)."""
    gt_count = sum(len(v) for v in gt.values())
    if gt_count == 0:
        raise EmptyGroundTruthError("MOTA undefined for empty ground truth")
    fp = fn = idsw = 0
    per_frame: list[FrameCounts] = []
    last_match: dict[int, int] = {}
    for frame in sorted(set(gt) | set(pred)):
        gt_items = gt.get(frame, [])
        pred_items = pred.get(frame, [])
        matches = _frame_match(gt_items, pred_items, last_match, iou_gate)
        f_fp = len(pred_items) - len(matches)
        f_fn = len(gt_items) - len(matches)
        f_idsw = 0
        for i, j in matches.items():
            gid = gt_items[i][0]
            pid = pred_items[j][0]
            if gid in last_match and last_match[gid] != pid:
                f_idsw += 1
            last_match[gid] = pid
        fp += f_fp
        fn += f_fn
        idsw += f_idsw
        per_frame.append(FrameCounts(frame, f_fp, f_fn, f_idsw, len(matches)))
    mota = 1.0 - (fp + fn + idsw) / gt_count
    return EvalReport(mota, 0.0, fp, fn, idsw, gt_count, per_frame)


def idf1(gt: FramesOf, pred: FramesOf, iou_gate: float = 0.5) -> float:
    """Identity F1 under a global gt-id / pred-id matching."""
    gt_total = sum(len(v) for v in gt.values())
    if gt_total == 0:
        raise EmptyGroundTruthError("IDF1 undefined for empty ground truth")
    pred_total = sum(len(v) for v in pred.values())
    gt_ids = sorted({gid for v in gt.values() for gid, _ in v})
    pred_ids = sorted({pid for v in pred.values() for pid, _ in v})
    if not pred_ids:
        return 0.0
    overlap = np.zeros((len(gt_ids), len(pred_ids)))
    g_index = {g: i for i, g in enumerate(gt_ids)}
    p_index = {p: j for j, p in enumerate(pred_ids)}
    for frame in set(gt) & set(pred):
        for gid, gbox in gt[frame]:
            for pid, pbox in pred[frame]:
                if iou(gbox, pbox) >= iou_gate:
                    overlap[g_index[gid], p_index[pid]] += 1
    ri, ci = linear_sum_assignment(overlap, maximize=True)
    idtp = int(overlap[ri, ci].sum())
    idfp = pred_total - idtp
    idfn = gt_total - idtp
    denom = 2 * idtp + idfp + idfn
    return 2 * idtp / denom if denom else 0.0


def evaluate(gt: FramesOf, pred: FramesOf, iou_gate: float = 0.5) -> EvalReport:
    report = clear_metrics(gt, pred, iou_gate)
    report.idf1 = idf1(gt, pred, iou_gate)
    return report


def compare(baseline: EvalReport, refined: EvalReport) -> dict[str, float]:
    """Signed metric deltas, refined minus baseline."""
    return {
        "mota": refined.mota - baseline.mota,
        "idf1": refined.idf1 - baseline.idf1,
        "fp": refined.fp - baseline.fp,
        "fn": refined.fn - baseline.fn,
        "idsw": refined.idsw - baseline.idsw,
    }


def format_compare(baseline: EvalReport, refined: EvalReport) -> str:
    delta = compare(baseline, refined)
    rows = [
        ("metric", "baseline", "refined", "delta"),
        ("MOTA", f"{baseline.mota:.4f}", f"{refined.mota:.4f}", f"{delta['mota']:+.4f}"),
        ("IDF1", f"{baseline.idf1:.4f}", f"{refined.idf1:.4f}", f"{delta['idf1']:+.4f}"),
        ("FP", str(baseline.fp), str(refined.fp), f"{delta['fp']:+.0f}"),
        ("FN", str(baseline.fn), str(refined.fn), f"{delta['fn']:+.0f}"),
        ("IDsw", str(baseline.idsw), str(refined.idsw), f"{delta['idsw']:+.0f}"),
    ]
    return "\n".join(f"{a:>8} {b:>10} {c:>10} {d:>10}" for a, b, c, d in rows)
