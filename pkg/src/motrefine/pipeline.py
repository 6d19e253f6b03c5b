"""End-to-end refinement: shared tiny encoder over both frames, decoder
invocation, identity resolution from predicted backward motions, and the
training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from scipy.optimize import linear_sum_assignment

from .box_ops import edge_to_corner_t
from .config import RefineConfig
from .data_io import TrackRecord
from .fusion_decoder import DecoderState, FusionDecoder, LayerOutput
from .geometry import CornerBox, EdgeBox, corner_to_edge
from .init_matching import (
    DENOISE,
    InitPlan,
    TrackerOutput,
    _normalize_edgebox,
    layer_loss,
    make_init_plan,
)
from .metrics import iou as _iou
from .nn_core import FeatureMap, MultiHeadAttention, load_checkpoint, save_checkpoint


def sinusoidal_2d(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine positional embedding, shape (h*w, dim)."""
    half = dim // 2
    div = torch.exp(torch.arange(0, half, 2, dtype=torch.float32) * (-math.log(1e4) / half))
    ys = torch.arange(h, dtype=torch.float32)[:, None] * div[None, :]
    xs = torch.arange(w, dtype=torch.float32)[:, None] * div[None, :]
    pe_y = torch.cat([ys.sin(), ys.cos()], dim=-1)  # (h, 2*len(div))
    pe_x = torch.cat([xs.sin(), xs.cos()], dim=-1)  # (w, 2*len(div))
    out = torch.zeros(h, w, dim)
    out[..., : pe_y.shape[-1]] = pe_y[:, None, :]
    out[..., half : half + pe_x.shape[-1]] = pe_x[None, :, :]
    return out.view(h * w, dim)


class FrameEncoder(nn.Module):
    """Tiny shared encoder: stride-4 conv stack plus one self-attention
    layer over the flattened map. The same parameters serve both frames
    of a pair."""

    STRIDE = 4

    def __init__(self, width: int, dim: int, heads: int = 4):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.Conv2d(width, dim, 3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.ReLU(), nn.Linear(2 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, image: torch.Tensor) -> FeatureMap:
        if min(image.shape[-2:]) < 16:
            raise ValueError("image too small: need at least 16 px per side")
        x = self.conv(image.view(1, 1, *image.shape[-2:]))[0]  # (dim, H/4, W/4)
        c, h, w = x.shape
        tokens = x.permute(1, 2, 0).reshape(h * w, c)
        pos = sinusoidal_2d(h, w, c).to(tokens.dtype)
        attn_out, _ = self.attn(tokens + pos, tokens + pos, tokens)
        tokens = self.norm1(tokens + attn_out)
        tokens = self.norm2(tokens + self.ffn(tokens))
        return FeatureMap(tokens.view(h, w, c).permute(2, 0, 1), float(self.STRIDE))


class Refiner(nn.Module):
    """Full refinement model: encoder, query/label embeddings, fusion
    decoder."""

    def __init__(self, cfg: RefineConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = FrameEncoder(cfg.encoder_width, cfg.dim, cfg.heads)
        self.q_det = nn.Embedding(cfg.num_queries, cfg.dim)
        self.q_asso = nn.Embedding(cfg.num_queries, cfg.dim)
        self.label_embed = nn.Embedding(2, cfg.dim)  # 0 = denoise, 1 = rematch
        self.decoder = FusionDecoder(
            cfg.dim, cfg.heads, channels=cfg.dim, layers=cfg.layers, beta=cfg.beta,
            points=cfg.points, roi_size=cfg.roi_size, motion_form=cfg.motion_form,
        )

    def forward_pair(
        self,
        image_t: torch.Tensor,
        image_prev: torch.Tensor,
        plan: InitPlan,
        return_weights: bool = False,
    ) -> list[LayerOutput]:
        f_t = self.encoder(image_t)
        f_prev = self.encoder(image_prev)
        q_det = self.q_det.weight
        q_asso = self.q_asso.weight
        if self.cfg.dr_embeddings:
            labels = torch.tensor(
                [0 if lab == DENOISE else 1 for lab in plan.labels], dtype=torch.long
            )
            lab = self.label_embed(labels)
            q_det = q_det + lab
            q_asso = q_asso + lab
        dtype = q_det.dtype
        state = DecoderState(
            q_det=q_det,
            q_asso=q_asso,
            ref_det=plan.init_ref_det.to(dtype),
            ref_asso=plan.init_ref_asso.to(dtype),
            layer=0,
            frozen_targets=plan.frozen_targets,
        )
        return self.decoder(state, f_t, f_prev, return_weights)


def refine_pair(
    model: Refiner,
    image_t: torch.Tensor,
    image_prev: torch.Tensor,
    preds: list[TrackerOutput],
    cfg: RefineConfig,
) -> tuple[LayerOutput, InitPlan]:
    """Inference on one frame pair; returns the last layer's output."""
    h, w = image_t.shape[-2:]
    plan = make_init_plan(preds, None, cfg, cfg.num_queries, float(w), float(h))
    model.eval()
    with torch.no_grad():
        outs = model.forward_pair(image_t, image_prev, plan)
    return outs[-1], plan


def _denorm_corners(boxes_e: torch.Tensor, img_w: float, img_h: float) -> list[CornerBox]:
    scale = boxes_e.new_tensor([img_w, img_h, img_h, img_w, img_h, img_w])
    corners = edge_to_corner_t(boxes_e * scale)
    return [CornerBox(*(float(v) for v in row)) for row in corners]


def resolve_identities(
    curr: LayerOutput,
    prev_tracks: list[TrackRecord],
    cfg: RefineConfig,
    frame: int,
    img_w: float,
    img_h: float,
    next_id: int,
) -> tuple[list[TrackRecord], int]:
    """Turn the final layer output into identified track records.

    Emitted detections (score >= emit threshold, no NMS) are matched to
    the previous frame's tracks by Hungarian assignment on the IoU of
    their association boxes, gated at cfg.assoc_iou_gate; matches
    inherit ids, the rest get fresh ones.
    """
    scores = torch.sigmoid(curr.cls_logits)
    keep = [i for i in range(scores.shape[0]) if float(scores[i]) >= cfg.emit_threshold]
    det_boxes = _denorm_corners(curr.boxes_det, img_w, img_h)
    asso_boxes = _denorm_corners(curr.boxes_asso, img_w, img_h)

    assigned: dict[int, int] = {}
    if keep and prev_tracks:
        cost = np.array(
            [[1.0 - _iou(asso_boxes[i], t.box) for t in prev_tracks] for i in keep]
        )
        ri, ci = linear_sum_assignment(cost)
        for a, b in zip(ri, ci):
            if cost[a, b] <= 1.0 - cfg.assoc_iou_gate:
                assigned[keep[a]] = prev_tracks[b].track_id

    records = []
    for i in keep:
        tid = assigned.get(i)
        if tid is None:
            tid = next_id
            next_id += 1
        records.append(TrackRecord(frame, tid, det_boxes[i], round(float(scores[i]), 2)))
    return records, next_id


def refine_sequence(
    model: Refiner,
    frames: np.ndarray,
    all_preds: dict[int, list[TrackerOutput]],
    cfg: RefineConfig,
) -> list[TrackRecord]:
    """Fold refine_pair and resolve_identities over an ordered sequence.

    Frame 1 pairs with itself and associates against empty history. A
    track missed in one frame stays eligible for up to cfg.max_coast
    extra frames (at its last seen box) before its id retires.
    """
    records: list[TrackRecord] = []
    active: dict[int, tuple[int, TrackRecord]] = {}  # id -> (last frame, record)
    next_id = 1
    T, h, w = frames.shape
    for t in range(1, T + 1):
        img_t = torch.from_numpy(frames[t - 1]).float()
        img_prev = torch.from_numpy(frames[max(t - 2, 0)]).float()
        out, _ = refine_pair(model, img_t, img_prev, all_preds.get(t, []), cfg)
        prev_tracks = [rec for last, rec in active.values() if last >= t - 1 - cfg.max_coast]
        frame_records, next_id = resolve_identities(
            out, prev_tracks, cfg, t, float(w), float(h), next_id
        )
        records.extend(frame_records)
        for rec in frame_records:
            active[rec.track_id] = (t, rec)
    return sorted(records, key=lambda r: (r.frame, r.track_id))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSample:
    image_t: torch.Tensor
    image_prev: torch.Tensor
    preds: list[TrackerOutput]
    gt_t: torch.Tensor            # (M, 6) normalized
    gt_prev: torch.Tensor         # (M, 6) normalized, identity-aligned with gt_t
    prev_mask: torch.Tensor       # (M,) bool, False for objects new in frame t
    gt_boxes_px: list[EdgeBox]    # pixel-space gt for pre-assignment


def build_training_samples(
    frames: np.ndarray,
    gt: dict[int, list[tuple[int, CornerBox]]],
    dets: dict[int, list[TrackerOutput]],
) -> list[TrainSample]:
    """One sample per frame; frame 1 pairs with itself (zero motion)."""
    T, h, w = frames.shape
    samples = []
    for t in range(1, T + 1):
        cur = gt.get(t, [])
        prev = {obj_id: box for obj_id, box in gt.get(max(t - 1, 1), [])}
        if not cur:
            continue
        gt_rows, prev_rows, mask, px = [], [], [], []
        for obj_id, box in cur:
            eb = corner_to_edge(box)
            px.append(eb)
            gt_rows.append(_normalize_edgebox(eb, w, h))
            if obj_id in prev:
                prev_rows.append(_normalize_edgebox(corner_to_edge(prev[obj_id]), w, h))
                mask.append(True)
            else:
                prev_rows.append([0.0] * 6)
                mask.append(False)
        samples.append(
            TrainSample(
                image_t=torch.from_numpy(frames[t - 1]).float(),
                image_prev=torch.from_numpy(frames[max(t - 2, 0)]).float(),
                preds=dets.get(t, []),
                gt_t=torch.tensor(gt_rows, dtype=torch.float32),
                gt_prev=torch.tensor(prev_rows, dtype=torch.float32),
                prev_mask=torch.tensor(mask, dtype=torch.bool),
                gt_boxes_px=px,
            )
        )
    return samples


class DivergenceError(RuntimeError):
    pass


def train(
    model: Refiner,
    samples: list[TrainSample],
    cfg: RefineConfig,
    epochs: int,
    seed: int,
    img_w: float,
    img_h: float,
    log_every: int = 0,
) -> list[tuple[int, float]]:
    """Gradient training with AdamW; deterministic given the seed.

    The learning rate drops by 10x at 80% of the epochs. Returns the
    (epoch, mean loss) curve; a NaN loss aborts with DivergenceError.
    """
    if not samples:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_at = max(int(epochs * 0.8), 1)
    curve = []
    model.train()
    for epoch in range(1, epochs + 1):
        if epoch == drop_at + 1:
            for g in opt.param_groups:
                g["lr"] = cfg.lr * 0.1
        order = rng.permutation(len(samples))
        total = 0.0
        for idx in order:
            s = samples[idx]
            plan = make_init_plan(
                s.preds, s.gt_boxes_px, cfg, cfg.num_queries, img_w, img_h,
                training=True, rng=rng,
            )
            outs = model.forward_pair(s.image_t, s.image_prev, plan)
            loss = sum(
                layer_loss(o, s.gt_t, s.gt_prev, s.prev_mask, plan, cfg) for o in outs
            )
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            total += float(loss.detach())
        curve.append((epoch, total / len(samples)))
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: loss {curve[-1][1]:.4f}")
    return curve


# checkpoint metadata keys stored as 0-d tensors alongside parameters
_META_FIELDS = (
    "num_queries", "layers", "dim", "heads", "beta", "points", "roi_size",
    "encoder_width", "image_size",
)
_META_MOTION = {"center+box": 0, "center": 1, "none": 2}


def save_model(path, model: Refiner) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for f in _META_FIELDS:
        tensors[f"meta/{f}"] = torch.tensor(float(getattr(model.cfg, f)))
    tensors["meta/motion_form"] = torch.tensor(float(_META_MOTION[model.cfg.motion_form]))
    tensors["meta/dr_embeddings"] = torch.tensor(1.0 if model.cfg.dr_embeddings else 0.0)
    save_checkpoint(path, tensors)


def load_model(path, cfg: RefineConfig | None = None) -> Refiner:
    """Rebuild a Refiner from a checkpoint; architecture fields come from
    the stored metadata, runtime thresholds from cfg when given."""
    tensors = load_checkpoint(path)
    base = cfg or RefineConfig()
    arch = {}
    for f in _META_FIELDS:
        v = float(tensors[f"meta/{f}"])
        arch[f] = int(v) if f != "beta" else v
    inv_motion = {v: k for k, v in _META_MOTION.items()}
    arch["motion_form"] = inv_motion[int(float(tensors["meta/motion_form"]))]
    arch["dr_embeddings"] = bool(float(tensors["meta/dr_embeddings"]))
    model = Refiner(base.replace(**arch))
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model
