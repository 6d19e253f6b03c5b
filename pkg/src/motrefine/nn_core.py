"""Differentiable numerical kernel for the refiner.

Masked softmax, multi-head attention, reference-guided sampling
attention, ROIAlign over encoded feature maps, and a versioned binary
checkpoint format for named parameter tensors. All ops run on CPU
tensors; gradients come from reverse-mode autodiff.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import torch
from torch import nn

CHECKPOINT_MAGIC = b"TFKW"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureMap:
    """Encoded image features: (channels, height, width) plus the input
    stride (input pixels per feature cell). Cell (i, j) is centered at
    pixel ((j + 0.5) * stride, (i + 0.5) * stride)."""

    data: torch.Tensor
    stride: float

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def pixel_height(self) -> float:
        return self.height * self.stride

    @property
    def pixel_width(self) -> float:
        return self.width * self.stride


class FullyMaskedRowError(ValueError):
    """Raised when a softmax row has every entry masked to -inf."""


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last dim with an additive mask.

    Entries masked to -inf get exactly zero weight (and zero gradient);
    finite mask values are added to the logits before normalization.
    A fully masked row is an error, not a silent NaN.
    """
    if mask is None:
        return torch.softmax(scores, dim=-1)
    logits = scores + mask
    if torch.isinf(logits).all(dim=-1).any():
        raise FullyMaskedRowError("softmax row has all entries masked to -inf")
    out = torch.softmax(logits, dim=-1)
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite attention weights")
    return out


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a shared additive mask.

    Operates on unbatched (length, dim) tensors; the mask broadcasts
    over heads.
    """

    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=bias)
        self.k_proj = nn.Linear(dim, dim, bias=bias)
        self.v_proj = nn.Linear(dim, dim, bias=bias)
        self.out_proj = nn.Linear(dim, dim, bias=bias)

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        mask: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        L, S = q.shape[0], k.shape[0]
        qh = self.q_proj(q).view(L, self.heads, self.head_dim).transpose(0, 1)
        kh = self.k_proj(k).view(S, self.heads, self.head_dim).transpose(0, 1)
        vh = self.v_proj(v).view(S, self.heads, self.head_dim).transpose(0, 1)
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = masked_softmax(scores, mask)
        out = (weights @ vh).transpose(0, 1).reshape(L, self.dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out, None


def bilinear_sample(data: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Bilinear samples of a (C, H, W) map at continuous cell coordinates.

    Integer coordinate (y, x) = (i, j) hits the center of cell (i, j);
    samples outside the map read as zero. Returns (M, C).
    Differentiable w.r.t. xs and ys.
    """
    C, H, W = data.shape
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    wx = xs - x0
    wy = ys - y0

    out = None
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        w = (wx if dx else (1 - wx)) * (wy if dy else (1 - wy))
        inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc = xi.clamp(0, W - 1).long()
        yc = yi.clamp(0, H - 1).long()
        vals = data[:, yc, xc].transpose(0, 1)  # (M, C)
        term = vals * (w * inside.to(data.dtype)).unsqueeze(-1)
        out = term if out is None else out + term
    return out


def _pixel_to_cell(px: torch.Tensor, stride: float) -> torch.Tensor:
    return px / stride - 0.5


def roi_align(fmap: FeatureMap, box_xyxy, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear samples of the map at the cell centers of a pixel-space box.

    Returns (channels, out_h, out_w). A zero-extent box collapses to the
    center point replicated; a box fully outside the map reads all zeros.
    """
    x1, y1, x2, y2 = (float(v) for v in box_xyxy)
    boxes = torch.tensor([[x1, y1, x2, y2]], dtype=fmap.data.dtype)
    return roi_align_many(fmap, boxes, out_h, out_w)[0]


def roi_align_many(fmap: FeatureMap, boxes_xyxy: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Vectorized roi_align for boxes (N, 4); returns (N, channels, out_h, out_w)."""
    N = boxes_xyxy.shape[0]
    x1, y1, x2, y2 = boxes_xyxy.unbind(-1)
    jj = torch.arange(out_w, dtype=fmap.data.dtype)
    ii = torch.arange(out_h, dtype=fmap.data.dtype)
    # Cell centers of the box grid, in input pixels.
    xs = x1[:, None] + (jj + 0.5)[None, :] * ((x2 - x1) / out_w)[:, None]  # (N, W)
    ys = y1[:, None] + (ii + 0.5)[None, :] * ((y2 - y1) / out_h)[:, None]  # (N, H)
    grid_x = xs[:, None, :].expand(N, out_h, out_w).reshape(-1)
    grid_y = ys[:, :, None].expand(N, out_h, out_w).reshape(-1)
    samples = bilinear_sample(
        fmap.data, _pixel_to_cell(grid_x, fmap.stride), _pixel_to_cell(grid_y, fmap.stride)
    )
    return samples.view(N, out_h, out_w, fmap.channels).permute(0, 3, 1, 2)


class SamplingCrossAttention(nn.Module):
    """Reference-guided single-scale sampling attention.

    Each query predicts `points` offsets around its reference-box center
    (scaled by the box half-extent), bilinearly samples the feature map
    there, and combines the samples with a learned softmax over points.
    """

    def __init__(self, dim: int, channels: int, points: int = 4):
        super().__init__()
        self.points = points
        self.offset_proj = nn.Linear(dim, points * 2)
        self.weight_proj = nn.Linear(dim, points)
        self.value_proj = nn.Linear(channels, dim)
        nn.init.zeros_(self.offset_proj.weight)
        nn.init.zeros_(self.offset_proj.bias)

    def forward(self, queries: torch.Tensor, refs_px: torch.Tensor, fmap: FeatureMap) -> torch.Tensor:
        """queries: (N, dim); refs_px: (N, 6) pixel-space edge boxes."""
        if fmap.height < 1 or fmap.width < 1:
            raise ValueError("empty feature map")
        N = queries.shape[0]
        offsets = self.offset_proj(queries).view(N, self.points, 2)
        weights = torch.softmax(self.weight_proj(queries), dim=-1)  # (N, points)
        cx, cy, tp, lf, bt, rt = refs_px.unbind(-1)
        half_w = 0.5 * (lf + rt)
        half_h = 0.5 * (tp + bt)
        xs = (cx[:, None] + offsets[..., 0] * half_w[:, None]).reshape(-1)
        ys = (cy[:, None] + offsets[..., 1] * half_h[:, None]).reshape(-1)
        samples = bilinear_sample(
            fmap.data, _pixel_to_cell(xs, fmap.stride), _pixel_to_cell(ys, fmap.stride)
        ).view(N, self.points, fmap.channels)
        pooled = (samples * weights.unsqueeze(-1)).sum(dim=1)  # (N, channels)
        return self.value_proj(pooled)


class CheckpointError(ValueError):
    """Raised on a malformed or incompatible checkpoint file."""


def save_checkpoint(path, tensors: dict[str, torch.Tensor]) -> None:
    """Write named tensors as little-endian float32 records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            shape = tuple(t.shape)
            f.write(struct.pack("<B", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(t.detach().to(torch.float32).contiguous().numpy().tobytes())


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    """Read a checkpoint written by save_checkpoint; bit-exact round trip."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path!s}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} in {path!s}"
            )
        tensors: dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            numel = 1
            for d in shape:
                numel *= d
            buf = f.read(numel * 4)
            if len(buf) != numel * 4:
                raise CheckpointError(f"truncated checkpoint {path!s}")
            t = torch.frombuffer(bytearray(buf), dtype=torch.float32).view(shape).clone()
            tensors[name] = t
    return tensors
