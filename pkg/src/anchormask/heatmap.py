"""IoU heat maps over anchor points, binary anchor masks, and feature gating."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import AnchorGrid, iou_matrix


def build_heatmap(boxes, grid: AnchorGrid, threshold: float = 0.3) -> np.ndarray:
    """Per anchor point, the best IoU of any of its anchors with any box.

    Values under ``threshold`` are set to exactly 0.  Returns a
    ``(feat_h, feat_w)`` float array.
    """
    if not 0 <= threshold < 1:
        raise ValueError(f"heat-map threshold must lie in [0, 1), got {threshold}")
    if grid.boxes.shape[0] != grid.num_points * grid.k:
        raise ValueError("anchor grid size does not match its extents")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((grid.feat_h, grid.feat_w))
    best = iou_matrix(grid.boxes, boxes).max(axis=1)
    hm = best.reshape(grid.feat_h, grid.feat_w, grid.k).max(axis=-1)
    hm[hm < threshold] = 0.0
    return hm


def binarize(heatmap: np.ndarray) -> np.ndarray:
    return (np.asarray(heatmap) > 0).astype(np.float64)


def threshold_probs(probs: np.ndarray, p0: float = 0.5) -> np.ndarray:
    """Binary mask with 1 wherever ``probs >= p0`` (inclusive boundary)."""
    if not 0 < p0 < 1:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    return (np.asarray(probs) >= p0).astype(np.float64)


def _check_extent(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"{what}: extent mismatch {a.shape[-2:]} vs {b.shape[-2:]}")


def fuse_with_last(predicted: np.ndarray, last: np.ndarray) -> np.ndarray:
    """OR the predicted mask with the support of the previous heat map."""
    predicted, last = np.asarray(predicted), np.asarray(last)
    _check_extent(predicted, last, "fuse_with_last")
    return np.maximum(predicted, binarize(last))


def apply_mask(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Multiply every channel of ``features`` (..., C, H, W) by ``mask`` (H, W)."""
    mask = np.asarray(mask, dtype=np.float64)
    _check_extent(features, mask, "apply_mask")
    return features * mask


@dataclass
class HeatMapHistory:
    """Most recent heat maps (oldest first) with their frame indices."""

    maxlen: int = 3
    maps: deque = field(default_factory=deque)
    frames: deque = field(default_factory=deque)

    def push(self, frame: int, heatmap: np.ndarray) -> None:
        if self.frames and frame <= self.frames[-1]:
            raise ValueError(f"frame index {frame} not after {self.frames[-1]}")
        if self.maps and heatmap.shape != self.maps[0].shape:
            raise ValueError("heat-map extent changed within a history")
        self.maps.append(np.asarray(heatmap, dtype=np.float64))
        self.frames.append(frame)
        while len(self.maps) > self.maxlen:
            self.maps.popleft()
            self.frames.popleft()

    @property
    def last(self) -> np.ndarray | None:
        return self.maps[-1] if self.maps else None

    def copy(self) -> "HeatMapHistory":
        return HeatMapHistory(self.maxlen, deque(m.copy() for m in self.maps), deque(self.frames))

    def __len__(self) -> int:
        return len(self.maps)


def pad_history(maps, extent=None, length: int = 3) -> np.ndarray:
    """Stack up to ``length`` maps into a ``(length, H, W)`` array.

    Short histories repeat their oldest map at the front; an empty history
    becomes ``length`` all-ones maps of ``extent``.
    """
    maps = list(maps)
    if len(maps) > length:
        raise ValueError(f"history longer than {length}")
    if not maps:
        if extent is None:
            raise ValueError("empty history needs an extent")
        return np.ones((length,) + tuple(extent))
    maps = [maps[0]] * (length - len(maps)) + maps
    return np.stack(maps).astype(np.float64)


def write_pgm(path, values: np.ndarray, vmax: float = 1.0) -> None:
    """ASCII (P2) PGM with values scaled from [0, vmax] onto 0..255."""
    v = np.clip(np.rint(np.asarray(values, dtype=np.float64) / vmax * 255), 0, 255).astype(int)
    h, w = v.shape
    rows = "\n".join(" ".join(str(x) for x in row) for row in v)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")
