"""Stage-1 mask predictor: heat-map history -> per-anchor-point foreground probability.

Two temporal convolutions squeeze the 3-frame history down to one time step,
followed by two 3x3 convs, two pixel-wise ("fully convolutional") layers and
a two-way softmax.  Channel 0 is background, channel 1 foreground.
"""
from __future__ import annotations

import numpy as np

from .heatmap import fuse_with_last, pad_history, threshold_probs
from .tensor import Conv2d, Conv3d, named_grads, named_params, pixel_softmax, pixel_softmax_backward, relu, relu_backward

PROB_FLOOR = 1e-12


class MaskNet:
    def __init__(self, rng: np.random.Generator, conv3d_channels=(8, 16), temporal_kernel: int = 2,
                 conv2d_channels: int = 16, fc_channels: int = 16, fc_kernel: int = 1, history_len: int = 3):
        c1, c2 = conv3d_channels
        self.history_len = history_len
        self.layers = {
            "conv3d_1": Conv3d.init(1, c1, temporal_kernel, 3, rng),
            "conv3d_2": Conv3d.init(c1, c2, temporal_kernel, 3, rng),
            "conv2d_1": Conv2d.init(c2, conv2d_channels, 3, rng),
            "conv2d_2": Conv2d.init(conv2d_channels, conv2d_channels, 3, rng),
            "fc_conv_1": Conv2d.init(conv2d_channels, fc_channels, fc_kernel, rng),
            "fc_conv_2": Conv2d.init(fc_channels, 2, fc_kernel, rng),
        }
        t_out = history_len - 2 * (temporal_kernel - 1)
        if t_out != 1:
            raise ValueError(f"temporal kernels must reduce {history_len} frames to 1, got {t_out}")
        self._pre = {}
        self._probs = None

    def params(self) -> dict:
        return named_params(self.layers)

    def grads(self) -> dict:
        return named_grads(self.layers)

    def forward(self, stack: np.ndarray) -> np.ndarray:
        """``stack`` is (T,H,W) or (N,T,H,W); returns probabilities (N?,2,H,W)."""
        single = stack.ndim == 3
        x = (stack[None] if single else stack)[:, :, None]  # N,T,1,H,W
        pre = self._pre = {}
        h = x
        for name in ("conv3d_1", "conv3d_2"):
            pre[name] = self.layers[name].forward(h)
            h = relu(pre[name])
        self.temporal_out = h.shape[1]
        h = h[:, 0]
        for name in ("conv2d_1", "conv2d_2", "fc_conv_1"):
            pre[name] = self.layers[name].forward(h)
            h = relu(pre[name])
        logits = self.layers["fc_conv_2"].forward(h)
        self._probs = pixel_softmax(logits)
        return self._probs[0] if single else self._probs

    def backward(self, grad_probs: np.ndarray) -> None:
        """Backpropagate a gradient w.r.t. the softmax output."""
        if self._probs is None:
            raise RuntimeError("MaskNet.backward called before forward")
        g = grad_probs[None] if grad_probs.ndim == 3 else grad_probs
        g = pixel_softmax_backward(g, self._probs)
        g = self.layers["fc_conv_2"].backward(g)
        for name in ("fc_conv_1", "conv2d_2", "conv2d_1"):
            g = self.layers[name].backward(relu_backward(g, self._pre[name]))
        g = g[:, None]
        g = self.layers["conv3d_2"].backward(relu_backward(g, self._pre["conv3d_2"]))
        self.layers["conv3d_1"].backward(relu_backward(g, self._pre["conv3d_1"]), input_grad=False)


def masknet_forward(history, net: MaskNet, extent=None) -> np.ndarray:
    """Foreground probability map for the frame after ``history``."""
    maps = list(getattr(history, "maps", history))
    if maps and extent is not None and maps[0].shape != tuple(extent):
        raise ValueError("history extent does not match the feature map")
    stack = pad_history(maps, extent, net.history_len)
    return net.forward(stack)[1]


def loss_mask(probs: np.ndarray, label: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class over all anchor points.

    ``probs`` is the foreground probability map, ``label`` the binary mask.
    """
    probs, label = np.asarray(probs), np.asarray(label)
    if probs.shape != label.shape:
        raise ValueError(f"extent mismatch {probs.shape} vs {label.shape}")
    p = np.where(label > 0, probs, 1.0 - probs)
    return float(-np.log(np.maximum(p, PROB_FLOOR)).sum() / label.size)


def loss_mask_grad(probs2: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean mask loss and its gradient w.r.t. the (N,2,H,W) softmax output."""
    n = probs2.shape[0]
    m = labels[0].size
    onehot = np.stack([1.0 - labels, labels], axis=1)
    p_true = np.maximum((probs2 * onehot).sum(axis=1), PROB_FLOOR)
    loss = float(-np.log(p_true).sum() / (m * n))
    grad = -onehot / p_true[:, None] / (m * n)
    return loss, grad


def predict_mask(history, net: MaskNet, fusion: bool = False, last=None, p0: float = 0.5,
                 extent=None, predicted=None) -> np.ndarray:
    """Binary anchor mask for the next frame.

    With an empty history every anchor point is enabled.  ``predicted``
    replaces the network output (used for fault injection); fusion still
    applies afterwards.
    """
    maps = list(getattr(history, "maps", history))
    if predicted is None:
        if not maps:
            if extent is None:
                raise ValueError("empty history needs an extent")
            return np.ones(tuple(extent))
        predicted = threshold_probs(masknet_forward(maps, net, extent), p0)
    if last is None and maps:
        last = maps[-1]
    if fusion and last is not None:
        return fuse_with_last(predicted, last)
    return np.asarray(predicted, dtype=np.float64)
