"""Two-stage per-frame loop, training loops and masked-vs-plain evaluation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .boxes import AnchorGrid, Box, Proposal, gen_anchors, iou, iou_matrix
from .config import RunConfig
from .heatmap import HeatMapHistory, apply_mask, binarize, build_heatmap
from .masknet import MaskNet, loss_mask_grad, predict_mask
from .rpn import RpnHead, allowed_anchors, label_anchors, propose, rpn_forward, rpn_loss_and_grads
from .tensor import (Conv2d, conv2d_forward, load_checkpoint, maxpool2_backward, maxpool2_forward, named_grads, named_params,
                     relu, relu_backward, save_checkpoint, sgd_step)


class NumericError(FloatingPointError):
    """A training loss became non-finite."""


# --------------------------------------------------------------------------
# networks


class Backbone:
    """Stride-16 feature extractor: four blocks of 3x3 conv, ReLU and 2x2 max-pool."""

    def __init__(self, widths=(8, 16, 32, 32), rng=None, frozen_blocks: int = 0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.blocks = []
        cin = 1
        for c in widths:
            self.blocks.append(Conv2d.init(cin, c, 3, rng))
            cin = c
        self.channels = cin
        self.frozen_blocks = frozen_blocks
        self._acts = []

    @property
    def stride(self) -> int:
        return 2 ** len(self.blocks)

    def trainable_layers(self) -> dict:
        return {f"block{i}": b for i, b in enumerate(self.blocks) if i >= self.frozen_blocks}

    def all_layers(self) -> dict:
        return {f"block{i}": b for i, b in enumerate(self.blocks)}

    def forward_range(self, x: np.ndarray, start: int = 0, stop: int | None = None, record: bool = False):
        stop = len(self.blocks) if stop is None else stop
        if record:
            self._acts = []
        for i in range(start, stop):
            pre = self.blocks[i].forward(x) if record else _conv(self.blocks[i], x)
            act = relu(pre)
            x = maxpool2_forward(act)
            if record:
                self._acts.append((i, pre, act, x))
        return x

    def forward(self, images: np.ndarray) -> np.ndarray:
        """``images``: (H,W) / (N,H,W) float in [0,1]; returns (N?,C,H/16,W/16)."""
        x = images[..., None, :, :]
        return self.forward_range(x)

    def backward(self, gout: np.ndarray) -> None:
        """Backpropagate through the blocks recorded by ``forward_range(record=True)``."""
        if not self._acts:
            raise RuntimeError("Backbone.backward called without a recorded forward")
        first = self._acts[0][0]
        for i, pre, act, out in reversed(self._acts):
            g = relu_backward(maxpool2_backward(gout, act, out), pre)
            gout = self.blocks[i].backward(g, input_grad=i > first)


def _conv(layer: Conv2d, x):
    return conv2d_forward(x, layer.weight, layer.bias, layer.stride, layer.pad)


def to_input(frame) -> np.ndarray:
    return np.asarray(frame, dtype=np.float64) / 255.0


@dataclass
class Nets:
    """Everything a sequence run needs: backbone, RPN head, anchor grid, mask net."""

    backbone: Backbone
    head: RpnHead
    grid: AnchorGrid
    masknet: MaskNet | None = None

    @classmethod
    def build(cls, cfg: RunConfig, seed: int | None = None) -> "Nets":
        seed = cfg.seed if seed is None else seed
        a = cfg.anchors
        grid = gen_anchors(a.feat_h, a.feat_w, a.stride, a.scales, a.ratios)
        rng = np.random.default_rng(seed)
        frozen = cfg.backbone.frozen_blocks if cfg.backbone.trainable else len(cfg.backbone.widths)
        backbone = Backbone(cfg.backbone.widths, rng, frozen)
        if backbone.stride != a.stride:
            raise ValueError(f"backbone stride {backbone.stride} != anchor stride {a.stride}")
        head = RpnHead(backbone.channels, grid.k, rng)
        return cls(backbone, head, grid, build_masknet(cfg, seed + 1))

    def detector_params(self) -> dict:
        out = {f"backbone.{k}": v for k, v in named_params(self.backbone.all_layers()).items()}
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def save(self, path) -> None:
        arrays = self.detector_params()
        if self.masknet is not None:
            arrays.update({f"masknet.{k}": v for k, v in self.masknet.params().items()})
        save_checkpoint(path, arrays)

    def load(self, path) -> "Nets":
        arrays = load_checkpoint(path)
        own = self.detector_params()
        if self.masknet is not None:
            own.update({f"masknet.{k}": v for k, v in self.masknet.params().items()})
        for name, arr in arrays.items():
            if name not in own:
                raise KeyError(f"checkpoint has unexpected parameter {name!r}")
            if own[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {own[name].shape}")
            own[name][...] = arr
        return self


def build_masknet(cfg: RunConfig, seed: int) -> MaskNet:
    m = cfg.masknet
    return MaskNet(np.random.default_rng(seed), m.conv3d_channels, m.temporal_kernel, m.conv2d_channels,
                   m.fc_channels, m.fc_kernel, cfg.mask.history_len)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    losses: list  # every iteration
    trace: list  # (iteration, loss) every ``record_every`` iterations

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows(self.trace)


def _frames_index(sequences) -> list:
    return [(s, t) for s, seq in enumerate(sequences) for t in range(len(seq))]


def train_rpn(sequences, cfg: RunConfig, nets: Nets | None = None,
              progress: Callable[[int, float], None] | None = None) -> tuple[Nets, TrainResult]:
    """Seeded SGD on the RPN loss over random frame batches, without any anchor mask."""
    if not sequences or not any(len(s) for s in sequences):
        raise ValueError("empty training set")
    tc, lab = cfg.train_rpn, cfg.labels
    nets = nets or Nets.build(cfg)
    bb, head, grid = nets.backbone, nets.head, nets.grid
    index = _frames_index(sequences)
    rng = np.random.default_rng(tc.seed)

    # the frozen prefix never changes, so its output is computed once per frame
    split = bb.frozen_blocks
    cache = np.concatenate([
        bb.forward_range(to_input(np.stack([sequences[s].frames[t] for s, t in index[i:i + 32]]))[:, None], 0, split)
        for i in range(0, len(index), 32)
    ])
    gts = np.array([sequences[s].gt[t] for s, t in index])
    overlaps = iou_matrix(grid.boxes, gts)  # (A, frames)

    layers = {f"backbone.{k}": v for k, v in bb.trainable_layers().items()}
    params = {f"backbone.{k}": v for k, v in named_params(bb.trainable_layers()).items()}
    params.update({f"head.{k}": v for k, v in head.params().items()})

    losses, trace = [], []
    for it in range(tc.iterations):
        batch = rng.choice(len(index), size=tc.batch_size, replace=len(index) < tc.batch_size)
        feats = bb.forward_range(cache[batch], split, record=bool(layers))
        out = rpn_forward(feats, head, grid)
        g_logits = np.zeros_like(out.logits)
        g_deltas = np.zeros_like(out.deltas)
        total = 0.0
        for b, f in enumerate(batch):
            labels = label_anchors(grid, Box(*gts[f]), lab.pos_iou, lab.neg_iou, lab.neg_ratio, rng, overlaps[:, f])
            loss, _, _, gl, gd = rpn_loss_and_grads(out[b], labels, lab.reg_normalizer)
            total += loss
            g_logits[b], g_deltas[b] = gl, gd
        n = len(batch)
        loss = total / n
        if not math.isfinite(loss):
            raise NumericError(f"non-finite RPN loss at iteration {it}")
        gfeat = head.backward(g_logits / n, g_deltas / n, input_grad=bool(layers))
        grads = {f"head.{k}": v for k, v in head.grads().items()}
        if layers:
            bb.backward(gfeat)
            grads.update({f"backbone.{k}": v for k, v in named_grads(bb.trainable_layers()).items()})
        sgd_step(params, grads, tc.lr)
        losses.append(loss)
        if it % tc.record_every == 0:
            trace.append((it, loss))
            if progress:
                progress(it, loss)
    return nets, TrainResult(losses, trace)


def gt_heatmaps(seq, grid: AnchorGrid, threshold: float) -> np.ndarray:
    return np.stack([build_heatmap(seq.gt[t:t + 1], grid, threshold) for t in range(len(seq))])


def train_masknet(sequences, cfg: RunConfig, nets: Nets | None = None,
                  progress: Callable[[int, float], None] | None = None) -> tuple[Nets, TrainResult]:
    """Fit the mask net on (ground-truth heat-map history -> next-frame mask) pairs."""
    usable = [s for s in sequences if len(s) >= 2]
    if not usable:
        raise ValueError("mask-net training needs sequences with at least two frames")
    tc, mc = cfg.train_mask, cfg.mask
    nets = nets or Nets.build(cfg)
    net, grid = nets.masknet, nets.grid
    hms = [gt_heatmaps(s, grid, mc.heatmap_threshold) for s in usable]
    pairs = [(s, t) for s, seq in enumerate(usable) for t in range(1, len(seq))]
    rng = np.random.default_rng(tc.seed)
    L = mc.history_len
    params = net.params()
    losses, trace = [], []
    for it in range(tc.iterations):
        batch = rng.choice(len(pairs), size=tc.batch_size, replace=len(pairs) < tc.batch_size)
        stacks, labels = [], []
        for p in batch:
            s, t = pairs[p]
            hist = hms[s][max(0, t - L):t]
            stacks.append(np.concatenate([np.repeat(hist[:1], L - len(hist), axis=0), hist]))
            labels.append(binarize(hms[s][t]))
        probs = net.forward(np.stack(stacks))
        loss, grad = loss_mask_grad(probs, np.stack(labels))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite mask loss at iteration {it}")
        net.backward(grad)
        sgd_step(params, net.grads(), tc.lr)
        losses.append(loss)
        if it % tc.record_every == 0:
            trace.append((it, loss))
            if progress:
                progress(it, loss)
    return nets, TrainResult(losses, trace)


# --------------------------------------------------------------------------
# inference


@dataclass
class FrameResult:
    frame: int
    detection: Proposal | None
    proposals: list
    mask: np.ndarray | None
    heatmap: np.ndarray
    iou_vs_gt: float | None = None

    @property
    def lost(self) -> bool:
        return self.detection is None


def run_frame(frame, history: HeatMapHistory, nets: Nets, cfg: RunConfig, frame_index: int,
              gt: Box | None = None, features: np.ndarray | None = None,
              predicted_mask: np.ndarray | None = None, mask_enabled: bool | None = None,
              fusion: bool | None = None) -> tuple[FrameResult, HeatMapHistory]:
    """One step of the two-stage loop; ``history`` is updated in place and returned.

    ``predicted_mask`` overrides the mask net's output for this frame (fusion
    is still applied when enabled).  ``features`` skips the backbone.
    """
    mask_enabled = cfg.mask.enabled if mask_enabled is None else mask_enabled
    fusion = cfg.mask.fusion if fusion is None else fusion
    grid = nets.grid
    if features is None:
        features = nets.backbone.forward(to_input(frame))
    extent = (grid.feat_h, grid.feat_w)
    mask = None
    if mask_enabled:
        mask = predict_mask(history, nets.masknet, fusion, None, cfg.mask.p0, extent, predicted_mask)
        features = apply_mask(features, mask)
    out = rpn_forward(features, nets.head, grid)
    allowed = None if mask is None else allowed_anchors(mask, grid.k)
    proposals = propose(out, grid, cfg.nms.iou_threshold, cfg.nms.keep, allowed, cfg.anchors.image_size)
    heat = build_heatmap(np.array([p.box for p in proposals]).reshape(-1, 4), grid, cfg.mask.heatmap_threshold)
    history.push(frame_index, heat)
    detection = proposals[0] if proposals else None
    score = None
    if gt is not None:
        score = iou(detection.box, gt) if detection is not None else 0.0
    return FrameResult(frame_index, detection, proposals, mask, heat, score), history


@dataclass(frozen=True)
class Variant:
    name: str
    mask: bool
    fusion: bool = False
    force_ones: bool = False


DEFAULT_VARIANTS = (Variant("plain", False), Variant("masked", True), Variant("masked+fusion", True, True))


def sequence_features(seq, nets: Nets, chunk: int = 16) -> np.ndarray:
    frames = to_input(np.stack(seq.frames))
    return np.concatenate([nets.backbone.forward(frames[i:i + chunk]) for i in range(0, len(frames), chunk)])


def run_sequence(seq, nets: Nets, cfg: RunConfig, variant: Variant, features: np.ndarray | None = None,
                 inject: dict | None = None) -> list:
    """Run a variant over a sequence; ``inject`` maps frame -> forced predicted mask."""
    feats = sequence_features(seq, nets) if features is None else features
    history = HeatMapHistory(cfg.mask.history_len)
    start = 0
    if cfg.eval.init_from_gt and len(seq) > 1:
        history.push(0, build_heatmap(seq.gt[:1], nets.grid, cfg.mask.heatmap_threshold))
        start = 1
    ones = np.ones((nets.grid.feat_h, nets.grid.feat_w))
    results = []
    for t in range(start, len(seq)):
        forced = ones if variant.force_ones else (inject or {}).get(t)
        res, history = run_frame(None, history, nets, cfg, t, seq.box(t), feats[t], forced,
                                 variant.mask or variant.force_ones, variant.fusion)
        results.append(res)
    return results


@dataclass
class Report:
    rows: list = field(default_factory=list)  # dicts: sequence, frame, variant, iou, score, box
    sequences: list = field(default_factory=list)

    def variant_names(self) -> list:
        return list(dict.fromkeys(r["variant"] for r in self.rows))

    def mean_iou(self, variant: str) -> float:
        vals = [r["iou"] for r in self.rows if r["variant"] == variant]
        return float(np.mean(vals)) if vals else float("nan")

    def per_sequence(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault(r["sequence"], {}).setdefault(r["variant"], []).append(r["iou"])
        return {s: {v: float(np.mean(x)) for v, x in d.items()} for s, d in out.items()}

    def paired_deltas(self) -> dict:
        names = self.variant_names()
        return {f"{a}-{b}": self.mean_iou(a) - self.mean_iou(b) for a in names for b in names if a != b}

    def summary(self) -> dict:
        return {
            "sequences": self.sequences,
            "mean_iou": {v: self.mean_iou(v) for v in self.variant_names()},
            "per_sequence": self.per_sequence(),
            "paired_deltas": self.paired_deltas(),
            "frames": len(self.rows),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "variant", "iou", "score", "x1", "y1", "x2", "y2"])
            for r in self.rows:
                box = r["box"] or (float("nan"),) * 4
                w.writerow([f"{r['sequence']}/{r['frame']}", r["variant"], f"{r['iou']:.6f}",
                            f"{r['score']:.6f}", *(f"{v:.2f}" for v in box)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def load_features(path, seq, nets: Nets) -> np.ndarray:
    """Precomputed (T,C,H,W) feature maps from a ``.npy`` file, checked against the sequence and head."""
    feats = np.load(path)
    want = (len(seq), nets.head.channels, nets.grid.feat_h, nets.grid.feat_w)
    if feats.shape != want:
        raise ValueError(f"{path}: features have shape {feats.shape}, expected {want}")
    return feats.astype(np.float64)


def evaluate(sequences, nets: Nets, cfg: RunConfig, variants=DEFAULT_VARIANTS, features: dict | None = None) -> Report:
    """Per-frame IoU of each variant's top detection against the ground truth.

    ``features`` optionally maps sequence name to precomputed feature maps.
    """
    report = Report(sequences=[s.name for s in sequences])
    for seq in sequences:
        feats = (features or {}).get(seq.name)
        if feats is None:
            feats = sequence_features(seq, nets)
        for v in variants:
            for res in run_sequence(seq, nets, cfg, v, feats):
                det = res.detection
                report.rows.append({
                    "sequence": seq.name, "frame": res.frame, "variant": v.name, "iou": res.iou_vs_gt,
                    "score": det.score if det else 0.0, "box": tuple(det.box) if det else None,
                })
    return report
