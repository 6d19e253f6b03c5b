"""MOT-challenge text I/O, portable graymap frames, the synthetic
sequence generator, and a noisy original-tracker simulator.

MOT lines are ``frame,id,left,top,width,height,conf,x,y,z``. Detection
lines (id -1) may carry six extra columns holding the tracker's backward
motion clue (dcx,dcy,dtp,dlf,dbt,drt); standard parsers ignore them.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .geometry import CornerBox, EdgeBox, Motion, corner_to_edge, edge_to_corner

GT_KEEP_CLASSES = (1, 2, 7)  # pedestrian-family class ids kept when reading gt


@dataclass(frozen=True)
class TrackRecord:
    """One refined (or baseline) output box with its track identity."""

    frame: int
    track_id: int
    box: CornerBox
    score: float


@dataclass
class MotRecord:
    frame: int
    id: int
    box: CornerBox
    conf: float
    motion: Motion | None = None


@dataclass
class SynthScenario:
    """Fully seeded description of a synthetic sequence."""

    frames: int = 50
    image_size: int = 64
    objects: int = 8
    crossings: int = 2
    min_box: int = 8
    max_box: int = 14
    max_speed: float = 1.2
    seed: int = 0


@dataclass
class NoiseProfile:
    """Noise model standing in for the original tracker."""

    fn_rate: float = 0.25
    fp_rate: float = 0.10
    loc_sigma: float = 2.0
    score_decent_lo: float = 0.55
    score_decent_hi: float = 0.95
    score_poor_lo: float = 0.05
    score_poor_hi: float = 0.35
    idswitch_rate: float = 0.05
    nearmiss_prob: float = 0.5


class MotParseError(ValueError):
    pass


def read_mot(source, kind: str = "gt") -> dict[int, list[MotRecord]]:
    """Parse MOT lines grouped by frame, order preserved.

    kind 'gt' drops lines whose flag column is 0 or whose class is not a
    pedestrian class. kind 'det' parses trailing motion columns when
    present. Malformed lines raise with their line number.
    """
    if kind not in ("gt", "det", "result"):
        raise ValueError(f"unknown kind {kind!r}")
    if hasattr(source, "read"):
        text = source.read()
        name = "<stream>"
    else:
        name = str(source)
        with open(source) as fh:
            text = fh.read()
    out: dict[int, list[MotRecord]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            frame = int(parts[0])
            obj_id = int(parts[1])
            left, top, w, h = (float(x) for x in parts[2:6])
            conf = float(parts[6]) if len(parts) > 6 else 1.0
        except (ValueError, IndexError):
            raise MotParseError(f"{name}:{lineno}: malformed MOT line {line!r}") from None
        if frame < 1:
            raise MotParseError(f"{name}:{lineno}: frame index must be >= 1")
        if kind == "gt":
            if conf == 0:
                continue
            if len(parts) > 7:
                try:
                    cls = int(float(parts[7]))
                except ValueError:
                    raise MotParseError(f"{name}:{lineno}: bad class column") from None
                if cls not in GT_KEEP_CLASSES:
                    continue
        motion = None
        if kind == "det" and len(parts) >= 16:
            try:
                motion = Motion(*(float(x) for x in parts[10:16]))
            except ValueError:
                raise MotParseError(f"{name}:{lineno}: bad motion columns") from None
        rec = MotRecord(frame, obj_id, CornerBox(left, top, left + w, top + h), conf, motion)
        out.setdefault(frame, []).append(rec)
    return out


def write_mot(records: list[TrackRecord]) -> str:
    """Serialize records in (frame, id) order with 2-decimal boxes.
    Byte-stable: writing twice yields identical text."""
    lines = []
    for r in sorted(records, key=lambda r: (r.frame, r.track_id)):
        b = r.box
        lines.append(
            f"{r.frame},{r.track_id},{b.x1:.2f},{b.y1:.2f},"
            f"{b.width:.2f},{b.height:.2f},{r.score:.2f},-1,-1,-1"
        )
    return "".join(line + "\n" for line in lines)


def write_detections(dets: dict[int, list]) -> str:
    """Serialize per-frame TrackerOutput pools as det lines (id -1),
    4-decimal scores, with motion clue columns appended."""
    lines = []
    for frame in sorted(dets):
        for d in dets[frame]:
            c = edge_to_corner(d.box)
            m = d.assoc or Motion(0, 0, 0, 0, 0, 0)
            lines.append(
                f"{frame},-1,{c.x1:.2f},{c.y1:.2f},{c.width:.2f},{c.height:.2f},"
                f"{d.score:.4f},-1,-1,-1,"
                f"{m.dcx:.2f},{m.dcy:.2f},{m.d_ad_tp:.2f},{m.d_ad_lf:.2f},"
                f"{m.d_ad_bt:.2f},{m.d_ad_rt:.2f}"
            )
    return "".join(line + "\n" for line in lines)


def gt_to_mot(gt: dict[int, list[tuple[int, CornerBox]]]) -> str:
    lines = []
    for frame in sorted(gt):
        for obj_id, box in gt[frame]:
            lines.append(
                f"{frame},{obj_id},{box.x1:.2f},{box.y1:.2f},"
                f"{box.width:.2f},{box.height:.2f},1,1,1.0"
            )
    return "".join(line + "\n" for line in lines)


def records_to_frames(recs: dict[int, list[MotRecord]]) -> dict[int, list[tuple[int, CornerBox]]]:
    return {f: [(r.id, r.box) for r in rl] for f, rl in recs.items()}


# ---------------------------------------------------------------------------
# synthetic world


def _bounce_path(start: float, vel: float, frames: int, lo: float, hi: float) -> list[float]:
    """Constant-speed 1-D path reflecting off [lo, hi]."""
    pos = []
    p, v = start, vel
    for _ in range(frames):
        pos.append(p)
        p += v
        if p < lo:
            p = 2 * lo - p
            v = -v
        elif p > hi:
            p = 2 * hi - p
            v = -v
    return pos


def generate_scenario(s: SynthScenario):
    """Render a seeded sequence of moving rectangles.

    Returns (frames, gt): frames is a (T, H, W) float32 array in [0, 1];
    gt maps 1-based frame index to [(object id, CornerBox)] whose boxes
    exactly match the rendered integer extents. Crossing pairs follow
    time-reversed copies of each other, overlapping heavily at the
    middle frame.
    """
    rng = np.random.default_rng(s.seed)
    S, T = s.image_size, s.frames
    lo, hi = 0.12 * S, 0.88 * S

    sizes = []
    paths = []  # per object: (xs, ys)
    n_cross_pairs = min(s.crossings, s.objects // 2)
    free = s.objects - 2 * n_cross_pairs

    def new_track():
        w = rng.uniform(s.min_box, s.max_box)
        h = rng.uniform(s.min_box, s.max_box)
        vx = rng.uniform(-s.max_speed, s.max_speed)
        vy = rng.uniform(-s.max_speed, s.max_speed)
        x0 = rng.uniform(lo, hi)
        y0 = rng.uniform(lo, hi)
        return (w, h), (_bounce_path(x0, vx, T, lo, hi), _bounce_path(y0, vy, T, lo, hi))

    for _ in range(n_cross_pairs):
        size, (xs, ys) = new_track()
        sizes.append(size)
        paths.append((xs, ys))
        sizes.append(size)
        paths.append((xs[::-1], ys[::-1]))  # time-reversed twin: coincide mid-sequence
    for _ in range(free):
        size, path = new_track()
        sizes.append(size)
        paths.append(path)

    # textured background: smooth low-frequency noise
    coarse = rng.uniform(0.05, 0.35, size=(S // 8 + 1, S // 8 + 1))
    yy, xx = np.mgrid[0:S, 0:S]
    background = coarse[yy // 8, xx // 8].astype(np.float32)

    frames = np.empty((T, S, S), dtype=np.float32)
    gt: dict[int, list[tuple[int, CornerBox]]] = {}
    intensities = [0.55 + 0.4 * i / max(s.objects - 1, 1) for i in range(s.objects)]
    for t in range(T):
        img = background.copy()
        recs = []
        for obj in range(s.objects):
            w, h = sizes[obj]
            cx = paths[obj][0][t]
            cy = paths[obj][1][t]
            x1 = int(round(cx - w / 2))
            y1 = int(round(cy - h / 2))
            x2 = int(round(cx + w / 2))
            y2 = int(round(cy + h / 2))
            img[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = intensities[obj]
            recs.append((obj + 1, CornerBox(float(x1), float(y1), float(x2), float(y2))))
        frames[t] = img
        gt[t + 1] = recs
    return frames, gt


def simulate_tracker(
    gt: dict[int, list[tuple[int, CornerBox]]],
    noise: NoiseProfile,
    seed: int,
    image_size: float | None = None,
):
    """Simulate the original tracker over ground truth.

    Returns (dets, baseline): dets maps frame -> TrackerOutput pool
    (jittered survivors with decent scores, near-miss reappearances of
    dropped boxes with poor scores, spurious boxes); baseline is the
    noisy track stream the tracker would have emitted, with identity
    switches injected.
    """
    from .init_matching import TrackerOutput  # local import to avoid a cycle

    rng = np.random.default_rng(seed)
    if image_size is None:
        extents = [max(b.x2, b.y2) for recs in gt.values() for _, b in recs]
        image_size = max(extents) if extents else 64.0
    dets: dict[int, list] = {}
    baseline: list[TrackRecord] = []
    id_map: dict[int, int] = {}
    next_out_id = 1

    frames_sorted = sorted(gt)
    prev_boxes: dict[int, CornerBox] = {}
    for frame in frames_sorted:
        pool: list = []
        cur_boxes = {obj_id: box for obj_id, box in gt[frame]}
        for obj_id, box in gt[frame]:
            eb = corner_to_edge(box)
            prev = prev_boxes.get(obj_id)
            if prev is not None:
                pe = corner_to_edge(prev)
                back = Motion(
                    pe.cx - eb.cx, pe.cy - eb.cy,
                    pe.ad_tp - eb.ad_tp, pe.ad_lf - eb.ad_lf,
                    pe.ad_bt - eb.ad_bt, pe.ad_rt - eb.ad_rt,
                )
            else:
                back = Motion(0, 0, 0, 0, 0, 0)
            if rng.random() < noise.fn_rate:
                if rng.random() < noise.nearmiss_prob:
                    jit = _jitter(eb, rng, 2.0 * noise.loc_sigma)
                    score = rng.uniform(noise.score_poor_lo, noise.score_poor_hi)
                    pool.append(TrackerOutput(score, jit, back))
                continue
            jit = _jitter(eb, rng, noise.loc_sigma)
            score = rng.uniform(noise.score_decent_lo, noise.score_decent_hi)
            pool.append(TrackerOutput(score, jit, back))
            if obj_id not in id_map:
                id_map[obj_id] = next_out_id
                next_out_id += 1
            elif rng.random() < noise.idswitch_rate:
                id_map[obj_id] = next_out_id
                next_out_id += 1
            baseline.append(
                TrackRecord(frame, id_map[obj_id], edge_to_corner(jit), round(score, 2))
            )
        for _, box in gt[frame]:
            if rng.random() < noise.fp_rate:
                cx = rng.uniform(0.1, 0.9) * image_size
                cy = rng.uniform(0.1, 0.9) * image_size
                half = rng.uniform(0.3, 0.6) * (box.width + box.height) / 2
                fp_box = EdgeBox(cx, cy, half, half, half, half)
                score = rng.uniform(noise.score_decent_lo, noise.score_decent_hi)
                pool.append(TrackerOutput(score, fp_box, Motion(0, 0, 0, 0, 0, 0)))
                baseline.append(
                    TrackRecord(frame, next_out_id, edge_to_corner(fp_box), round(score, 2))
                )
                next_out_id += 1
        dets[frame] = pool
        prev_boxes = cur_boxes
    return dets, baseline


def _jitter(b: EdgeBox, rng: np.random.Generator, sigma: float) -> EdgeBox:
    if sigma <= 0:
        return b
    return EdgeBox(
        b.cx + rng.normal(0, sigma),
        b.cy + rng.normal(0, sigma),
        max(b.ad_tp + rng.normal(0, 0.5 * sigma), 0.0),
        max(b.ad_lf + rng.normal(0, 0.5 * sigma), 0.0),
        max(b.ad_bt + rng.normal(0, 0.5 * sigma), 0.0),
        max(b.ad_rt + rng.normal(0, 0.5 * sigma), 0.0),
    )


# ---------------------------------------------------------------------------
# portable graymap frames


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as binary PGM (P5, maxval 255)."""
    data = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        fields.append(raw[i:j])
        i = j
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=i + 1)
    return data.reshape(h, w).astype(np.float32) / float(maxval)
