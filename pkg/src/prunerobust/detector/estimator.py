"""sklearn-style estimator wrapping the grid detector, its training loop and hooks."""
from __future__ import annotations

import math
import zlib

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..corrupt import augment_train
from ..imbalance import sample_epoch
from ..pruning import ELEMENT, FILTER, GradualPruner, SparsitySchedule, apply_masks
from .decode import decode_detections
from .loss import build_targets, check_finite, detection_loss
from .model import DetectorModel


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) & 0xFFFFFFFF for p in parts]
    return int(np.random.default_rng(words).integers(0, 2**31 - 1))


def check_images(X, input_size):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (input_size, input_size, 3):
        raise ValueError(f"expected images of shape (N, {input_size}, {input_size}, 3), got {X.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_targets(y, n):
    if len(y) != n:
        raise ValueError(f"got {len(y)} target arrays for {n} images")
    out = []
    for t in y:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
        if np.any(t[:, 3] <= t[:, 1]) or np.any(t[:, 4] <= t[:, 2]):
            raise ValueError("ground-truth boxes need x1 < x2 and y1 < y2")
        out.append(t)
    return out


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """``w <- w - lr * g`` (with optional heavy-ball momentum), then re-apply masks."""
    for p in params:
        g = grads[p.name]
        if g.shape != p.values.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.values.shape}")
        if velocity is not None and momentum:
            v = velocity.setdefault(p.name, np.zeros_like(p.values))
            v *= momentum
            v += g
            v *= p.mask
            step = v
        else:
            step = g
        p.values -= lr * step
    apply_masks(params)


class GridDetector(BaseEstimator):
    """Small one-stage detector trained with optional gradual pruning.

    Parameters
    ----------
    num_classes : int
    input_size : int
    widths, kernels : tuple of int
        Trunk architecture (stride-2 convolutions).
    grid_size : int or None
    epochs : int
    lr : float
        Initial learning rate.
    lr_step : float
        Fraction of ``epochs`` after which the rate is divided by ``lr_divisor``.
    lr_divisor : float
    momentum : float
    batch_size : int
    box_weight : float
        Multiplier on the box regression term.
    pruning : {"none", "unstructured", "structured"}
    sparsity : float
        Final sparsity (fraction of weights or of filters).
    prune_start, prune_end : int or None
        Pruning window in epochs; by default from epoch 1 to ``ceil(0.875 * epochs)``.
    prune_exclude : tuple of str or None
        Tensors left dense. ``None`` keeps the prediction head dense under
        structured pruning, where dropping a head filter deletes an output.
    class_weights : array-like or None
        Foreground class weights for the classification loss.
    repeat_factors : dict or None
        ``image_id -> r_i`` for repeat-factor sampling.
    augment : bool
        Apply the naturalistic augmentation pipeline to training images.
    score_threshold, nms_iou : float
        Decoding settings used by :meth:`predict`.
    seed : int
    """

    def __init__(self, num_classes=6, input_size=64, widths=(16, 32, 48), kernels=(3, 3, 5),
                 grid_size=None, epochs=80, lr=0.01, lr_step=0.75, lr_divisor=10.0,
                 momentum=0.9, batch_size=16, box_weight=1.0, pruning="none", sparsity=0.0,
                 prune_start=None, prune_end=None, prune_exclude=None, class_weights=None,
                 repeat_factors=None, augment=False, score_threshold=0.01, nms_iou=0.5, seed=0):
        self.num_classes = num_classes
        self.input_size = input_size
        self.widths = widths
        self.kernels = kernels
        self.grid_size = grid_size
        self.epochs = epochs
        self.lr = lr
        self.lr_step = lr_step
        self.lr_divisor = lr_divisor
        self.momentum = momentum
        self.batch_size = batch_size
        self.box_weight = box_weight
        self.pruning = pruning
        self.sparsity = sparsity
        self.prune_start = prune_start
        self.prune_end = prune_end
        self.prune_exclude = prune_exclude
        self.class_weights = class_weights
        self.repeat_factors = repeat_factors
        self.augment = augment
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.seed = seed

    # -- configuration helpers ---------------------------------------------

    def _validate_params(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.lr_divisor > 1:
            raise ValueError("lr_divisor must exceed 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.pruning not in ("none", "unstructured", "structured"):
            raise ValueError(f"unknown pruning method {self.pruning!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must be in [0, 1)")

    def lr_at(self, epoch):
        """Learning rate for a 1-based epoch."""
        step_epoch = int(round(self.lr_step * self.epochs))
        return self.lr / self.lr_divisor if epoch > step_epoch else self.lr

    def pruning_window(self):
        start = 1 if self.prune_start is None else self.prune_start
        end = math.ceil(0.875 * self.epochs) if self.prune_end is None else self.prune_end
        return start, max(end, start + 1)

    def make_pruner(self):
        if self.pruning == "none" or self.sparsity == 0.0:
            return None
        start, end = self.pruning_window()
        sched = SparsitySchedule.over_window(
            self.sparsity, start, end, FILTER if self.pruning == "structured" else ELEMENT
        )
        sched.check_fits(self.epochs)
        exclude = self.prune_exclude
        if exclude is None:
            exclude = ("head.weight",) if self.pruning == "structured" else ()
        return GradualPruner(sched, exclude)

    def build_model(self):
        return DetectorModel(self.num_classes, self.input_size, self.widths, self.kernels,
                             self.grid_size)

    # -- training ----------------------------------------------------------

    def _epoch_order(self, image_ids, epoch):
        seed = derive_seed(self.seed, "epoch", epoch)
        if self.repeat_factors is not None:
            factors = {i: float(self.repeat_factors.get(i, 1.0)) for i in image_ids}
            return sample_epoch(factors, seed)
        perm = np.random.default_rng(seed).permutation(len(image_ids))
        return [image_ids[k] for k in perm]

    def fit(self, X, y, image_ids=None, callback=None):
        """Train on images ``X`` (N, H, W, 3) and per-image ``[class, x1, y1, x2, y2]`` arrays ``y``.

        ``callback(epoch, self)`` runs after every epoch.
        """
        self._validate_params()
        X = check_images(X, self.input_size)
        y = check_targets(y, len(X))
        ids = list(range(len(X))) if image_ids is None else [int(i) for i in image_ids]
        index = {i: k for k, i in enumerate(ids)}

        self.model_ = self.build_model()
        self.model_.init_params(np.random.default_rng(derive_seed(self.seed, "init")))
        self.pruner_ = self.make_pruner()
        weights = None if self.class_weights is None else np.asarray(self.class_weights, float)
        m = self.model_
        targets_all = build_targets(y, m.grid_size, m.cell_size)
        velocity = {}
        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            if self.pruner_ is not None:
                self.pruner_.step(m.params, epoch)
            lr = self.lr_at(epoch)
            order = self._epoch_order(ids, epoch)
            totals = np.zeros(4)
            for b0 in range(0, len(order), self.batch_size):
                batch_ids = order[b0:b0 + self.batch_size]
                rows = [index[i] for i in batch_ids]
                xb = X[rows]
                if self.augment:
                    xb = np.stack([
                        augment_train(xb[k], derive_seed(self.seed, "aug", epoch, b0 + k), i)
                        for k, i in enumerate(batch_ids)
                    ])
                tb = type(targets_all)(targets_all.cls[rows], targets_all.box[rows])
                out, cache = m.forward(xb)
                res = detection_loss(out.raw, tb, m.num_classes, weights, self.box_weight)
                grads = m.backward(res.grad, cache)
                for name, g in grads.items():
                    check_finite(f"grad:{name}", g)
                sgd_step(m.params, grads, lr, self.momentum, velocity)
                totals += len(rows) * np.array([res.total, res.terms["cls"], res.terms["obj"],
                                                res.terms["box"]])
            totals /= max(len(order), 1)
            self.history_.append({"epoch": epoch, "lr": lr, "loss": totals[0], "cls": totals[1],
                                  "obj": totals[2], "box": totals[3]})
            if callback is not None:
                callback(epoch, self)
        return self

    # -- inference ---------------------------------------------------------

    def predict_grid(self, X, batch_size=64):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size)
        outs = [self.model_.forward(X[k:k + batch_size])[0] for k in range(0, len(X), batch_size)]
        raw = np.concatenate([o.raw for o in outs]) if outs else np.zeros((0,))
        return type(outs[0])(raw, self.num_classes, self.model_.cell_size)

    def predict(self, X, image_ids=None):
        """Per-image lists of :class:`~prunerobust.evaluation.Detection`."""
        out = self.predict_grid(X)
        ids = list(range(len(out.raw))) if image_ids is None else list(image_ids)
        return decode_detections(out, self.score_threshold, self.nms_iou, ids, self.input_size)

    def sparsity_report(self):
        check_is_fitted(self, "model_")
        return {p.name: {"element": p.sparsity(),
                         "filter": p.channel_sparsity() if p.layer_kind != "bias" else None}
                for p in self.model_.params}
