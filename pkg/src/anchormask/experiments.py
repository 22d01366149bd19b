"""Desk-scale experiments shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SuiteSpec, synthetic_suite
from .pipeline import Nets, Report, Variant, evaluate, run_sequence, sequence_features, train_masknet, train_rpn

DESK_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "desk.json"

# Distractors are 1-10% dimmer than the target and target brightness varies
# widely between sequences, so absolute brightness does not say which blob is the target.
DESK_SUITE = SuiteSpec()
TRAIN_SEED, HELDOUT_SEED = 1, 2


def desk_config() -> RunConfig:
    return RunConfig.load(DESK_CONFIG) if DESK_CONFIG.exists() else RunConfig()


def train_set(count: int = 20):
    return synthetic_suite(TRAIN_SEED, count, DESK_SUITE)


def heldout_set(count: int = 50):
    return synthetic_suite(HELDOUT_SEED, count, DESK_SUITE)


@dataclass
class Trained:
    nets: Nets
    rpn_losses: list
    mask_losses: list


def train_both(sequences, cfg: RunConfig, progress=None) -> Trained:
    """RPN first, then the mask net on ground-truth heat maps; the two never share a gradient."""
    nets, rpn = train_rpn(sequences, cfg, progress=progress)
    nets, mask = train_masknet(sequences, cfg, nets, progress=progress)
    return Trained(nets, rpn.losses, mask.losses)


def drop_ratio(losses, head: int = 10, tail: int = 100) -> float:
    """Mean of the last ``tail`` losses over the mean of the first ``head``."""
    return float(np.mean(losses[-tail:]) / np.mean(losses[:head]))


def masked_vs_plain(sequences, nets: Nets, cfg: RunConfig) -> Report:
    return evaluate(sequences, nets, cfg)


@dataclass
class Recovery:
    sequence: str
    frame: int
    reference: list  # per-frame IoU of the unperturbed run, frames frame..frame+window
    fused: list
    unfused_lost: bool

    @property
    def recovered(self) -> bool:
        return any(f >= 0.9 * r for f, r in zip(self.fused, self.reference))


def fusion_recovery(seq, nets: Nets, cfg: RunConfig, frame: int | None = None, window: int = 2) -> Recovery:
    """Force an all-zero predicted mask at ``frame`` and follow the next ``window`` frames.

    The reference is the unperturbed fused run; "unfused_lost" reports whether
    the run without fusion produced no detection at the perturbed frame.
    """
    frame = len(seq) // 2 if frame is None else frame
    feats = sequence_features(seq, nets)
    zero = {frame: np.zeros((nets.grid.feat_h, nets.grid.feat_w))}
    fused = Variant("masked+fusion", True, True)
    ref = {r.frame: r.iou_vs_gt for r in run_sequence(seq, nets, cfg, fused, feats)}
    hit = {r.frame: r.iou_vs_gt for r in run_sequence(seq, nets, cfg, fused, feats, inject=zero)}
    unfused = {r.frame: r for r in run_sequence(seq, nets, cfg, Variant("masked", True), feats, inject=zero)}
    frames = [t for t in range(frame, frame + window + 1) if t in ref]
    return Recovery(seq.name, frame, [ref[t] for t in frames], [hit[t] for t in frames], unfused[frame].lost)
