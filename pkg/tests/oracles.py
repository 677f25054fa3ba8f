"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately slow and simple: explicit Python loops and
64-bit arithmetic, no shared code with the package internals. Shared
*conventions* (boundary definition, percentile rule, empty-mask penalty) are
restated here from first principles.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# Loss references
# ---------------------------------------------------------------------------

def ref_log_softmax(values):
    m = max(values)
    lse = m + math.log(sum(math.exp(v - m) for v in values))
    return [v - lse for v in values]


def ref_partial_ce(logits, labels, unknown):
    """Mean of -log p[label] over annotated pixels; 0 when none annotated."""
    C, H, W = logits.shape
    terms = []
    for i in range(H):
        for j in range(W):
            lab = int(labels[i, j])
            if lab == unknown:
                continue
            logp = ref_log_softmax([float(logits[c, i, j]) for c in range(C)])
            terms.append(-logp[lab])
    return sum(terms) / len(terms) if terms else 0.0


def ref_dice_loss(probs, target, eps=1e-5):
    """Mean over classes of 1 - (2*sum(p*g)+eps)/(sum p + sum g + eps)."""
    C, H, W = probs.shape
    vals = []
    for c in range(C):
        inter = 0.0
        p_sum = 0.0
        g_sum = 0.0
        for i in range(H):
            for j in range(W):
                p = float(probs[c, i, j])
                g = float(target[c, i, j])
                inter += p * g
                p_sum += p
                g_sum += g
        vals.append(1.0 - (2.0 * inter + eps) / (p_sum + g_sum + eps))
    return sum(vals) / C


def ref_mse(pred, gt):
    diff = (np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)).ravel()
    return float(sum(d * d for d in diff) / diff.size)


def ref_mix_label(y1, y2, alpha):
    C, H, W = y1.shape
    out = np.zeros((H, W), dtype=np.int64)
    for i in range(H):
        for j in range(W):
            best, best_v = 0, -math.inf
            for c in range(C):
                v = alpha * float(y1[c, i, j]) + (1 - alpha) * float(y2[c, i, j])
                if v > best_v:
                    best, best_v = c, v
            out[i, j] = best
    return out


def ref_one_hot(labels, num_classes):
    H, W = labels.shape
    out = np.zeros((num_classes, H, W), dtype=np.float64)
    for i in range(H):
        for j in range(W):
            out[int(labels[i, j]), i, j] = 1.0
    return out


def ref_psl_loss(y1, y2, alpha, eps=1e-5):
    target = ref_one_hot(ref_mix_label(y1, y2, alpha), y1.shape[0])
    return 0.5 * (ref_dice_loss(y1, target, eps) + ref_dice_loss(y2, target, eps))


def ref_ssl_loss(labels, l1, l2, unknown):
    return 0.5 * (ref_partial_ce(l1, labels, unknown)
                  + ref_partial_ce(l2, labels, unknown))


# ---------------------------------------------------------------------------
# Metric references
# ---------------------------------------------------------------------------

def ref_boundary(mask):
    """Mask pixels with a 4-neighbor outside the mask (image edge counts as
    outside). Returns a list of (row, col) tuples."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    out = []
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < H and 0 <= nj < W) or not mask[ni, nj]:
                    out.append((i, j))
                    break
    return out


def ref_dsc(pred, gt, cls):
    H, W = np.asarray(pred).shape
    inter = a_count = b_count = 0
    for i in range(H):
        for j in range(W):
            a = pred[i, j] == cls
            b = gt[i, j] == cls
            inter += int(a and b)
            a_count += int(a)
            b_count += int(b)
    if a_count + b_count == 0:
        return 1.0
    return 2.0 * inter / (a_count + b_count)


def ref_hd95(pred, gt, cls, spacing=(1.0, 1.0)):
    """Directed 95th percentiles of boundary distances, max of the two.

    Conventions restated: coordinates are scaled by spacing before
    subtraction; the percentile is numpy's linear-interpolated one; both
    boundaries empty -> 0, exactly one empty -> image diagonal in mm.
    """
    sy, sx = float(spacing[0]), float(spacing[1])
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    ba = ref_boundary(pred == cls)
    bb = ref_boundary(gt == cls)
    if not ba and not bb:
        return 0.0
    if not ba or not bb:
        H, W = pred.shape
        return math.sqrt((H * sy) ** 2 + (W * sx) ** 2)
    pa = [(i * sy, j * sx) for i, j in ba]
    pb = [(i * sy, j * sx) for i, j in bb]

    def directed(src, dst):
        mins = []
        for (ay, ax) in src:
            best = math.inf
            for (by, bx) in dst:
                dy = ay - by
                dx = ax - bx
                d = math.sqrt(dy * dy + dx * dx)
                if d < best:
                    best = d
            mins.append(best)
        return np.percentile(np.array(mins), 95)

    return float(max(directed(pa, pb), directed(pb, pa)))


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_diff(fn, x, index, eps=1e-6):
    """Central finite difference of scalar fn at one coordinate of array x."""
    xp = x.copy()
    xm = x.copy()
    xp[index] += eps
    xm[index] -= eps
    return (fn(xp) - fn(xm)) / (2 * eps)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
