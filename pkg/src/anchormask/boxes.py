"""Axis-aligned box algebra: anchors, IoU, delta coding, smooth L1, NMS.

Boxes are corner coordinates ``(x1, y1, x2, y2)`` in pixels of the resized
224x224 frame.  Vectorised helpers take ``(n, 4)`` float arrays; the scalar
API uses :class:`Box`.  Deltas are stored in the order ``(tx, ty, tw, th)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

IMAGE_SIZE = 224
DELTA_CLAMP = 10.0


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def validate(self) -> "Box":
        if not all(math.isfinite(v) for v in self):
            raise ValueError(f"non-finite box {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {self}")
        return self

    def fmt(self) -> str:
        return ",".join(f"{v:.2f}" for v in self)


class BoxDeltas(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float
    anchor_index: int


@dataclass(frozen=True)
class AnchorGrid:
    feat_h: int
    feat_w: int
    stride: int
    scales: tuple
    ratios: tuple
    boxes: np.ndarray  # (feat_h * feat_w * k, 4)

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def num_points(self) -> int:
        return self.feat_h * self.feat_w

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def point_of(self, anchor_index):
        """Anchor-point (row, col) hosting an anchor index."""
        p = np.asarray(anchor_index) // self.k
        return p // self.feat_w, p % self.feat_w


def gen_anchors(feat_h: int = 14, feat_w: int = 14, stride: int = 16,
                scales=(32, 64, 128), ratios=(0.5, 1, 2)) -> AnchorGrid:
    """Anchors ordered point-major (row, col), then scale-major within a point.

    A ratio ``r`` is height/width and keeps the area at ``scale**2``.
    """
    if feat_h < 1 or feat_w < 1 or stride < 1:
        raise ValueError("feature extents and stride must be positive")
    if not len(scales) or not len(ratios):
        raise ValueError("scales and ratios must be non-empty")
    if min(scales) <= 0 or min(ratios) <= 0:
        raise ValueError("scales and ratios must be positive")
    shapes = np.array([(s / math.sqrt(r), s * math.sqrt(r)) for s in scales for r in ratios])
    ii, jj = np.meshgrid(np.arange(feat_h), np.arange(feat_w), indexing="ij")
    cx = (jj.ravel() * stride + stride / 2)[:, None]
    cy = (ii.ravel() * stride + stride / 2)[:, None]
    w, h = shapes[:, 0][None, :], shapes[:, 1][None, :]
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1).reshape(-1, 4)
    return AnchorGrid(feat_h, feat_w, stride, tuple(scales), tuple(ratios), boxes)


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(inter > 0) & (union > 0))
    return out


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    w, h = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    if (wa <= 0).any() or (ha <= 0).any():
        raise ValueError("anchor with non-positive width or height")
    if (w <= 0).any() or (h <= 0).any():
        raise ValueError("ground-truth box with zero width or height")
    cxa, cya = anchors[:, 0] + wa / 2, anchors[:, 1] + ha / 2
    cx, cy = gt[:, 0] + w / 2, gt[:, 1] + h / 2
    return np.stack([(cx - cxa) / wa, (cy - cya) / ha, np.log(w / wa), np.log(h / ha)], axis=-1)


def decode_array(deltas: np.ndarray, anchors: np.ndarray, extent: float | None = IMAGE_SIZE) -> np.ndarray:
    """Apply ``(tx, ty, tw, th)`` to anchors; ``extent=None`` skips clipping."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    cxa, cya = anchors[:, 0] + wa / 2, anchors[:, 1] + ha / 2
    cx, cy = cxa + d[:, 0] * wa, cya + d[:, 1] * ha
    w = wa * np.exp(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ha * np.exp(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    if extent is not None:
        np.clip(out, 0.0, float(extent), out=out)
    return out


def encode(gt: Box, anchor: Box) -> BoxDeltas:
    return BoxDeltas(*encode_array(np.asarray(gt), np.asarray(anchor))[0].tolist())


def decode(deltas: BoxDeltas, anchor: Box, extent: float | None = IMAGE_SIZE) -> Box:
    return Box(*decode_array(np.asarray(deltas), np.asarray(anchor), extent)[0].tolist())


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; scalar or elementwise."""
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * ax * ax, ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, keep: int,
                order_key: np.ndarray | None = None) -> np.ndarray:
    """Greedy NMS over arrays; returns positions into ``boxes`` of survivors.

    Candidates are visited by descending score, ties by ascending ``order_key``
    (defaults to the position itself).
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    if keep < 1:
        raise ValueError(f"keep must be >= 1, got {keep}")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    key = np.arange(n) if order_key is None else np.asarray(order_key)
    order = np.lexsort((key, -np.asarray(scores)))
    boxes = np.asarray(boxes, dtype=np.float64)
    alive = np.ones(n, dtype=bool)
    kept = []
    for pos in order:
        if not alive[pos]:
            continue
        kept.append(pos)
        if len(kept) == keep:
            break
        alive[pos] = False
        overlaps = iou_matrix(boxes[pos], boxes)[0]
        alive &= ~(overlaps > iou_threshold)
    return np.asarray(kept, dtype=np.int64)


def nms(proposals: list, iou_threshold: float = 0.7, keep: int = 5) -> list:
    if not proposals:
        if not 0 < iou_threshold <= 1 or keep < 1:
            raise ValueError("invalid NMS parameters")
        return []
    boxes = np.array([p.box for p in proposals], dtype=np.float64)
    scores = np.array([p.score for p in proposals])
    idx = np.array([p.anchor_index for p in proposals])
    return [proposals[i] for i in nms_indices(boxes, scores, iou_threshold, keep, order_key=idx)]
