"""Region proposal head: per-anchor objectness and box deltas.

Score channels are ordered (background, foreground) per anchor.  Anchors are
flattened in the :class:`~anchormask.boxes.AnchorGrid` order, i.e. anchor
point (row-major) first, then anchor index within the point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import AnchorGrid, Box, Proposal, decode_array, encode_array, iou_matrix, nms_indices, smooth_l1, smooth_l1_grad
from .tensor import Conv2d, named_grads, named_params, pixel_softmax, relu, relu_backward

PROB_FLOOR = 1e-12


@dataclass
class RpnOutput:
    logits: np.ndarray  # (..., A, 2)
    scores: np.ndarray  # (..., A) foreground probability
    deltas: np.ndarray  # (..., A, 4) as (tx, ty, tw, th)

    def __getitem__(self, i) -> "RpnOutput":
        return RpnOutput(self.logits[i], self.scores[i], self.deltas[i])


@dataclass
class AnchorLabels:
    labels: np.ndarray  # (A,) int8 in {1, 0, -1}
    target_deltas: np.ndarray  # (A, 4); rows of non-positive anchors are zero
    n_valid: int

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


class RpnHead:
    """Shared 3x3 conv + ReLU feeding parallel 1x1 score and delta convs."""

    def __init__(self, channels: int, k: int, rng: np.random.Generator):
        self.k = k
        self.channels = channels
        self.layers = {
            "shared": Conv2d.init(channels, channels, 3, rng),
            "score": Conv2d.init(channels, 2 * k, 1, rng),
            "delta": Conv2d.init(channels, 4 * k, 1, rng),
        }
        self._hidden = None

    def params(self) -> dict:
        return named_params(self.layers)

    def grads(self) -> dict:
        return named_grads(self.layers)

    def forward(self, features: np.ndarray) -> RpnOutput:
        single = features.ndim == 3
        x = features[None] if single else features
        n, _, h, w = x.shape
        pre = self.layers["shared"].forward(x)
        hidden = relu(pre)
        self._hidden = pre
        k = self.k
        s = self.layers["score"].forward(hidden).reshape(n, k, 2, h, w)
        d = self.layers["delta"].forward(hidden).reshape(n, k, 4, h, w)
        probs = pixel_softmax(s)
        logits = s.transpose(0, 3, 4, 1, 2).reshape(n, h * w * k, 2)
        scores = probs[:, :, 1].transpose(0, 2, 3, 1).reshape(n, h * w * k)
        deltas = d.transpose(0, 3, 4, 1, 2).reshape(n, h * w * k, 4)
        out = RpnOutput(logits, scores, deltas)
        return out[0] if single else out

    def backward(self, grad_logits: np.ndarray, grad_deltas: np.ndarray, input_grad: bool = True):
        """Backpropagate gradients w.r.t. logits (N,A,2) and deltas (N,A,4)."""
        if self._hidden is None:
            raise RuntimeError("RpnHead.backward called before forward")
        pre = self._hidden
        single = grad_logits.ndim == 2
        if single:
            grad_logits, grad_deltas = grad_logits[None], grad_deltas[None]
        n, _, h, w = pre.shape
        k = self.k
        gs = grad_logits.reshape(n, h, w, k, 2).transpose(0, 3, 4, 1, 2).reshape(n, 2 * k, h, w)
        gd = grad_deltas.reshape(n, h, w, k, 4).transpose(0, 3, 4, 1, 2).reshape(n, 4 * k, h, w)
        gh = self.layers["score"].backward(np.ascontiguousarray(gs)) + self.layers["delta"].backward(np.ascontiguousarray(gd))
        gx = self.layers["shared"].backward(relu_backward(gh, pre), input_grad=input_grad)
        if gx is not None and single:
            gx = gx[0]
        return gx


def rpn_forward(features: np.ndarray, head: RpnHead, grid: AnchorGrid) -> RpnOutput:
    if features.shape[-2:] != (grid.feat_h, grid.feat_w):
        raise ValueError(f"feature extent {features.shape[-2:]} does not match anchor grid {(grid.feat_h, grid.feat_w)}")
    if head.k != grid.k:
        raise ValueError(f"head predicts {head.k} anchors per point, grid has {grid.k}")
    return head.forward(features)


def label_anchors(grid: AnchorGrid, gt: Box, pos_iou: float = 0.7, neg_iou: float = 0.3,
                  neg_ratio: int = 3, seed=None, overlaps: np.ndarray | None = None) -> AnchorLabels:
    """Positive / negative / invalid labels with seeded negative subsampling.

    ``seed`` may be an int or a ``numpy.random.Generator``.  ``overlaps`` lets
    callers reuse a precomputed anchor-vs-gt IoU vector.
    """
    if not 0 <= neg_iou < pos_iou <= 1:
        raise ValueError(f"need 0 <= neg_iou < pos_iou <= 1, got {neg_iou}, {pos_iou}")
    if neg_ratio < 1:
        raise ValueError("neg_ratio must be >= 1")
    gt = np.asarray(gt, dtype=np.float64)
    if not np.isfinite(gt).all() or gt[2] <= gt[0] or gt[3] <= gt[1]:
        raise ValueError(f"degenerate ground-truth box {tuple(gt)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ov = iou_matrix(grid.boxes, gt)[:, 0] if overlaps is None else overlaps
    labels = np.full(len(ov), -1, dtype=np.int8)
    pos = ov >= pos_iou
    pos[int(np.argmax(ov))] = True
    labels[pos] = 1
    candidates = np.flatnonzero((ov < neg_iou) & ~pos)
    n_neg = min(neg_ratio * int(pos.sum()), len(candidates))
    labels[rng.choice(candidates, size=n_neg, replace=False)] = 0
    targets = np.zeros((len(ov), 4))
    targets[pos] = encode_array(np.broadcast_to(gt, (int(pos.sum()), 4)), grid.boxes[pos])
    return AnchorLabels(labels, targets, int((labels != -1).sum()))


def _true_class_log_probs(out: RpnOutput, labels: AnchorLabels):
    valid = np.flatnonzero(labels.labels != -1)
    y = labels.labels[valid].astype(int)
    p = np.where(y == 1, out.scores[valid], 1.0 - out.scores[valid])
    return valid, y, np.log(np.maximum(p, PROB_FLOOR))


def loss_rpn_scores(out: RpnOutput, labels: AnchorLabels) -> float:
    """Mean negative log-likelihood of the true class over valid anchors."""
    if labels.n_valid < 1:
        raise ValueError("no valid anchors to score")
    _, _, logp = _true_class_log_probs(out, labels)
    return float(-logp.sum() / labels.n_valid)


def _reg_divisor(labels: AnchorLabels, normalizer: str) -> int:
    if normalizer == "valid":
        return labels.n_valid
    if normalizer == "positive":
        return max(len(labels.positives), 1)
    raise ValueError(f"unknown regression normaliser {normalizer!r}")


def loss_rpn_reg(out: RpnOutput, labels: AnchorLabels, normalizer: str = "valid") -> float:
    """Smooth-L1 over the deltas of positive anchors, divided by ``n_valid``.

    ``normalizer="positive"`` divides by the positive count instead.
    """
    if labels.n_valid < 1:
        raise ValueError("no valid anchors")
    pos = labels.positives
    diff = out.deltas[pos] - labels.target_deltas[pos]
    return float(smooth_l1(diff).sum() / _reg_divisor(labels, normalizer))


def loss_rpn_total(scores_loss: float, reg_loss: float) -> float:
    return scores_loss + reg_loss


def rpn_loss_and_grads(out: RpnOutput, labels: AnchorLabels, normalizer: str = "valid"):
    """Total loss plus gradients w.r.t. ``out.logits`` and ``out.deltas`` (single image)."""
    score_loss = loss_rpn_scores(out, labels)
    reg_loss = loss_rpn_reg(out, labels, normalizer)
    g_logits = np.zeros_like(out.logits)
    valid = np.flatnonzero(labels.labels != -1)
    y = labels.labels[valid].astype(int)
    probs = np.stack([1.0 - out.scores[valid], out.scores[valid]], axis=-1)
    probs[np.arange(len(valid)), y] -= 1.0
    g_logits[valid] = probs / labels.n_valid
    g_deltas = np.zeros_like(out.deltas)
    pos = labels.positives
    g_deltas[pos] = smooth_l1_grad(out.deltas[pos] - labels.target_deltas[pos]) / _reg_divisor(labels, normalizer)
    return loss_rpn_total(score_loss, reg_loss), score_loss, reg_loss, g_logits, g_deltas


def propose(out: RpnOutput, grid: AnchorGrid, iou_threshold: float = 0.7, keep: int = 5,
            allowed: np.ndarray | None = None, extent: float = 224) -> list:
    """Decode, score and NMS the anchors; ``allowed`` restricts to a boolean subset."""
    idx = np.arange(len(grid)) if allowed is None else np.flatnonzero(allowed)
    if len(idx) == 0:
        return []
    boxes = decode_array(out.deltas[idx], grid.boxes[idx], extent)
    scores = out.scores[idx]
    kept = nms_indices(boxes, scores, iou_threshold, keep, order_key=idx)
    return [Proposal(Box(*boxes[i].tolist()), float(scores[i]), int(idx[i])) for i in kept]


def allowed_anchors(mask: np.ndarray, k: int) -> np.ndarray:
    """Expand an anchor-point mask (H, W) to a per-anchor boolean vector."""
    return np.repeat(np.asarray(mask).ravel() > 0, k)
