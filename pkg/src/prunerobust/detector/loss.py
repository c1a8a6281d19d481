"""Multi-task detection loss: weighted sigmoid cross-entropy, objectness BCE, smooth-L1 boxes."""
from dataclasses import dataclass, field

import numpy as np

from .layers import sigmoid, softplus


class NumericFault(FloatingPointError):
    """Non-finite values found in a named tensor."""


def check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {name}")


def smooth_l1(x):
    """``0.5 x**2`` where ``|x| < 1``, else ``|x| - 0.5``."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return out if out.ndim else float(out)


def smooth_l1_grad(x):
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


@dataclass
class GridTargets:
    """Per-cell training targets for a batch.

    ``cls`` holds the class index of the assigned box or -1, ``box`` the
    regression targets ``(tx, ty, tw, th)`` in the same parameterization as the
    head's deltas (``tx, ty`` in [0, 1), ``tw, th`` log-ratios to the cell size).
    """

    cls: np.ndarray
    box: np.ndarray

    @property
    def positive(self):
        return self.cls >= 0


def build_targets(boxes_per_image, grid_size, cell_size):
    """Assign each ground-truth box to the cell holding its centre.

    ``boxes_per_image`` is a sequence of (M, 5) arrays ``[class, x1, y1, x2, y2]``.
    When several boxes share a cell the largest one wins.
    """
    n = len(boxes_per_image)
    cls = np.full((n, grid_size, grid_size), -1, dtype=np.int64)
    box = np.zeros((n, grid_size, grid_size, 4))
    best_area = np.zeros((n, grid_size, grid_size))
    for i, gts in enumerate(boxes_per_image):
        for c, x1, y1, x2, y2 in np.asarray(gts, dtype=np.float64).reshape(-1, 5):
            w, h = x2 - x1, y2 - y1
            cx, cy = (x1 + x2) / 2 / cell_size, (y1 + y2) / 2 / cell_size
            col = min(int(np.floor(cx)), grid_size - 1)
            row = min(int(np.floor(cy)), grid_size - 1)
            area = w * h
            if cls[i, row, col] >= 0 and area <= best_area[i, row, col]:
                continue
            best_area[i, row, col] = area
            cls[i, row, col] = int(c)
            box[i, row, col] = (cx - col, cy - row, np.log(w / cell_size), np.log(h / cell_size))
    return GridTargets(cls, box)


@dataclass
class LossResult:
    total: float
    terms: dict = field(default_factory=dict)
    grad: np.ndarray = None


def detection_loss(raw, targets, num_classes, class_weights=None, box_weight=1.0):
    """Total loss, per-term breakdown and d(loss)/d(raw).

    Parameters
    ----------
    raw : ndarray, shape (N, S, S, C + 5)
        Head output: class logits, objectness logit, box deltas.
    targets : GridTargets
    class_weights : array-like of length C, optional
        Foreground class weights; each positive cell's class cross-entropy is
        scaled by the weight of its true class. Background cells only enter
        the objectness term, with weight 1.
    box_weight : float
        Multiplier on the box regression term.

    All terms are summed over cells and divided by the batch size.
    """
    check_finite("predictions", raw)
    n = raw.shape[0]
    C = num_classes
    w = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (C,):
        raise ValueError(f"expected {C} class weights, got shape {w.shape}")
    grad = np.zeros_like(raw)
    pos = targets.positive
    logits = raw[..., :C][pos]
    labels = np.zeros_like(logits)
    labels[np.arange(len(logits)), targets.cls[pos]] = 1.0
    sample_w = w[targets.cls[pos]][:, None]
    cls_loss = float(np.sum(sample_w * (softplus(logits) - labels * logits))) / n
    grad[..., :C][pos] = sample_w * (sigmoid(logits) - labels) / n

    obj = raw[..., C]
    obj_t = pos.astype(np.float64)
    obj_loss = float(np.sum(softplus(obj) - obj_t * obj)) / n
    grad[..., C] = (sigmoid(obj) - obj_t) / n

    box_loss = 0.0
    if pos.any():
        d = raw[..., C + 1:][pos]
        t = targets.box[pos]
        sxy = sigmoid(d[:, :2])
        diff = np.concatenate([sxy - t[:, :2], d[:, 2:] - t[:, 2:]], axis=1)
        box_loss = box_weight * float(np.sum(smooth_l1(diff))) / n
        g = smooth_l1_grad(diff) * box_weight / n
        g[:, :2] *= sxy * (1.0 - sxy)
        grad[..., C + 1:][pos] = g

    total = cls_loss + obj_loss + box_loss
    return LossResult(total, {"cls": cls_loss, "obj": obj_loss, "box": box_loss}, grad)
