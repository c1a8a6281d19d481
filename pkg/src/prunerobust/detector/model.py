"""One-stage grid detector: a stride-2 convolutional trunk and a per-cell dense head.

Each grid cell predicts ``C`` class logits, one objectness logit and four box
deltas ``(tx, ty, tw, th)``. The box centre is ``(col + sigmoid(tx), row +
sigmoid(ty))`` in cell units and the size is ``exp(tw), exp(th)`` cells.
"""
from dataclasses import dataclass

import numpy as np

from ..pruning import BIAS, CONV, DENSE, ParameterTensor, apply_masks
from . import layers


class InputShapeError(ValueError):
    pass


@dataclass
class GridOutput:
    """Raw head output of shape (N, S, S, C + 5) plus decoding helpers."""

    raw: np.ndarray
    num_classes: int
    cell_size: float

    @property
    def class_logits(self):
        return self.raw[..., :self.num_classes]

    @property
    def class_probs(self):
        return layers.sigmoid(self.class_logits)

    @property
    def objectness(self):
        return layers.sigmoid(self.raw[..., self.num_classes])

    @property
    def box_deltas(self):
        return self.raw[..., self.num_classes + 1:]

    def boxes(self):
        """Absolute (x1, y1, x2, y2) pixel boxes per cell, shape (N, S, S, 4)."""
        d = self.box_deltas
        s = self.raw.shape[1]
        cols, rows = np.meshgrid(np.arange(s), np.arange(s))
        cx = (cols + layers.sigmoid(d[..., 0])) * self.cell_size
        cy = (rows + layers.sigmoid(d[..., 1])) * self.cell_size
        w = np.exp(np.clip(d[..., 2], -10, 10)) * self.cell_size
        h = np.exp(np.clip(d[..., 3], -10, 10)) * self.cell_size
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


class DetectorModel:
    """Parameters and forward/backward passes of the grid detector.

    Parameters
    ----------
    num_classes : int
    input_size : int
        Side of the square input image in pixels.
    widths : tuple of int
        Output channels of the stride-2 convolutions.
    kernels : tuple of int
        Kernel size of each convolution (odd).
    grid_size : int, optional
        Cells per side. Defaults to the trunk's output resolution; smaller
        values average-pool the features first.
    """

    def __init__(self, num_classes, input_size=64, widths=(8, 16, 32), kernels=(3, 3, 5),
                 grid_size=None):
        if len(widths) != len(kernels):
            raise ValueError("widths and kernels must have the same length")
        self.num_classes = int(num_classes)
        self.input_size = int(input_size)
        self.widths = tuple(int(w) for w in widths)
        self.kernels = tuple(int(k) for k in kernels)
        feat = self.input_size
        for k in self.kernels:
            feat = layers.conv_out_size(feat, k, 2)
        self.feature_size = feat
        self.grid_size = int(grid_size or feat)
        if self.feature_size % self.grid_size:
            raise ValueError(f"grid {self.grid_size} does not divide feature map {feat}")
        self.pool = self.feature_size // self.grid_size
        self.cell_size = self.input_size / self.grid_size
        self.params = self._build_params()

    @property
    def n_outputs(self):
        return self.num_classes + 5

    def _build_params(self):
        params = []
        c_in = 3
        for i, (w, k) in enumerate(zip(self.widths, self.kernels)):
            name = f"conv{i + 1}"
            params.append(ParameterTensor(f"{name}.weight", np.zeros((w, c_in, k, k)), CONV))
            params.append(ParameterTensor(f"{name}.bias", np.zeros(w), BIAS,
                                          paired_with=f"{name}.weight"))
            c_in = w
        params.append(ParameterTensor("head.weight", np.zeros((self.n_outputs, c_in)), DENSE))
        params.append(ParameterTensor("head.bias", np.zeros(self.n_outputs), BIAS,
                                      paired_with="head.weight"))
        return params

    def init_params(self, rng):
        """He-style scaled uniform weights, zero biases, objectness bias tilted negative."""
        for p in self.params:
            if p.layer_kind == BIAS:
                p.values[...] = 0.0
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                if p.name == "head.weight":
                    bound *= 0.1
                p.values[...] = rng.uniform(-bound, bound, size=p.shape)
        # few cells hold objects; start the objectness prior near 1/S^2
        self.param("head.bias").values[self.num_classes] = -np.log(self.grid_size ** 2)
        apply_masks(self.params)
        return self

    def param(self, name):
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def n_parameters(self):
        return sum(p.size for p in self.params)

    def check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (self.input_size, self.input_size, 3):
            raise InputShapeError(
                f"expected images of shape (N, {self.input_size}, {self.input_size}, 3), "
                f"got {x.shape}"
            )
        return x

    def forward(self, x):
        """Run the network on a (N, H, W, 3) batch; returns ``(GridOutput, cache)``."""
        x = self.check_input(x)
        cache = []
        h = x - 0.5
        for i in range(len(self.widths)):
            w = self.param(f"conv{i + 1}.weight").values
            b = self.param(f"conv{i + 1}.bias").values
            z, conv_cache = layers.conv_forward(h, w, b, stride=2)
            cache.append((conv_cache, z))
            h = layers.relu(z)
        pooled = layers.avg_pool(h, self.pool)
        hw = self.param("head.weight").values
        raw = pooled @ hw.T + self.param("head.bias").values
        cache.append(pooled)
        return GridOutput(raw, self.num_classes, self.cell_size), cache

    def backward(self, draw, cache):
        """Gradients of the loss w.r.t. every parameter, given d(loss)/d(raw output)."""
        grads = {}
        pooled = cache[-1]
        hw = self.param("head.weight").values
        d2 = draw.reshape(-1, draw.shape[-1])
        grads["head.weight"] = d2.T @ pooled.reshape(-1, pooled.shape[-1])
        grads["head.bias"] = d2.sum(axis=0)
        dh = layers.avg_pool_backward(draw @ hw, self.pool)
        for i in reversed(range(len(self.widths))):
            conv_cache, z = cache[i]
            dz = layers.relu_backward(dh, z)
            w = self.param(f"conv{i + 1}.weight").values
            dh, dw, db = layers.conv_backward(dz, w, conv_cache, stride=2, need_dx=i > 0)
            grads[f"conv{i + 1}.weight"] = dw
            grads[f"conv{i + 1}.bias"] = db
        return grads
