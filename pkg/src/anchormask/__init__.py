"""RPN with a learned temporal anchor mask for single-target video detection."""

from .boxes import AnchorGrid, Box, BoxDeltas, Proposal, decode, encode, gen_anchors, iou, nms
from .config import RunConfig
from .heatmap import HeatMapHistory, apply_mask, binarize, build_heatmap, fuse_with_last, pad_history, threshold_probs
from .masknet import MaskNet, loss_mask, masknet_forward, predict_mask
from .pipeline import Nets, evaluate, run_frame, run_sequence, train_masknet, train_rpn
from .rpn import RpnHead, label_anchors, loss_rpn_reg, loss_rpn_scores, loss_rpn_total, propose, rpn_forward

__version__ = "0.1.0"
