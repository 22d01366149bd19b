"""Independent reference implementations used only by the tests."""
import numpy as np


def naive_conv2d(x, w, b, stride=1, pad=0):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[oc, ic, u, v] * xp[ic, i * stride + u, j * stride + v]
                out[oc, i, j] = acc
    return out


def naive_conv3d(x, w, b, pad=0, tpad=0):
    t, c, h, wd = x.shape
    o, _, kt, kh, kw = w.shape
    xp = np.pad(x, ((tpad, tpad), (0, 0), (pad, pad), (pad, pad)))
    to, ho, wo = t + 2 * tpad - kt + 1, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((to, o, ho, wo))
    for s in range(to):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    out[s, oc, i, j] = b[oc] + np.sum(w[oc] * xp[s:s + kt, :, i:i + kh, j:j + kw].transpose(1, 0, 2, 3))
    return out


def central_diff(f, arr, h=1e-3, indices=None, signs=None):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place).

    ``signs``, if given, returns the ReLU sign pattern left by the latest ``f()``.
    Entries whose +h/-h stencil flips any sign straddle a kink, where the
    difference quotient does not estimate the derivative; they are omitted.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    if signs is not None:
        f()
        base = signs()
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        smooth = signs is None or np.array_equal(signs(), base)
        flat[i] = old - h
        fm = f()
        smooth = smooth and (signs is None or np.array_equal(signs(), base))
        flat[i] = old
        if smooth:
            out[i] = (fp - fm) / (2 * h)
    return out


def _preactivations(model):
    if hasattr(model, "_pre") and isinstance(model._pre, dict):
        return list(model._pre.values())
    return [model._hidden]


def min_abs_preactivation(model):
    """Distance of the closest cached ReLU input to its kink."""
    return min(float(np.abs(v).min()) for v in _preactivations(model))


def relu_signs(model):
    """Sign pattern of every cached ReLU pre-activation of an RpnHead, MaskNet or Backbone."""
    return np.concatenate([(v > 0).ravel() for v in _preactivations(model)])


def max_rel_error(analytic, numeric: dict, floor=1e-8):
    """Largest relative error over entries whose analytic magnitude exceeds ``floor``."""
    flat = np.asarray(analytic).reshape(-1)
    worst = 0.0
    for i, num in numeric.items():
        a = flat[i]
        if abs(a) > floor:
            worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst


def raster_iou(a, b):
    """IoU of integer-corner boxes by counting unit cells."""
    lo = int(min(a[0], a[1], b[0], b[1]))
    hi = int(max(a[2], a[3], b[2], b[3])) + 1
    ys, xs = np.mgrid[lo:hi, lo:hi]
    cx, cy = xs + 0.5, ys + 0.5
    ina = (cx > a[0]) & (cx < a[2]) & (cy > a[1]) & (cy < a[3])
    inb = (cx > b[0]) & (cx < b[2]) & (cy > b[1]) & (cy < b[3])
    union = (ina | inb).sum()
    return (ina & inb).sum() / union if union else 0.0


def reference_nms(boxes, scores, keys, thr, keep):
    """Plain O(n^2) greedy suppression over python lists."""

    def ov(a, b):
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        if iw <= 0 or ih <= 0:
            return 0.0
        inter = iw * ih
        u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
        return inter / u if u > 0 else 0.0

    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], keys[i]))
    kept = []
    for i in order:
        if all(ov(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
        if len(kept) == keep:
            break
    return kept


def brute_heatmap(boxes, grid, thr):
    hm = np.zeros((grid.feat_h, grid.feat_w))
    for i in range(grid.feat_h):
        for j in range(grid.feat_w):
            best = 0.0
            for a in range(grid.k):
                anchor = grid.boxes[(i * grid.feat_w + j) * grid.k + a]
                for b in boxes:
                    best = max(best, raster_free_iou(anchor, b))
            hm[i, j] = best if best >= thr else 0.0
    return hm


def raster_free_iou(a, b):
    """Scalar continuous IoU written independently of the package."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)
