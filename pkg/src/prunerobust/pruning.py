"""Gradual magnitude pruning: cubic sparsity schedule and L1 masking.

Masks live on :class:`ParameterTensor` objects and only ever grow. Sparsity is
targeted per tensor, either element-wise (smallest ``|w|`` first) or filter-wise
(output channels with the smallest L1 norm first). Ties are broken by the lower
flat or channel index so that runs are reproducible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ELEMENT = "element"
FILTER = "filter"

CONV = "conv"
DENSE = "dense"
BIAS = "bias"


class NotAPruningEpoch(ValueError):
    """Raised when the schedule is queried at an epoch where no pruning happens."""


class MaskMonotonicityError(ValueError):
    """Raised when a pruning target would unmask weights that are already masked."""


class MaskShapeError(ValueError):
    pass


@dataclass(frozen=True)
class SparsitySchedule:
    """Parameters of the cubic gradual pruning ramp.

    Parameters
    ----------
    initial_sparsity, final_sparsity : float
        Sparsity at the first and last pruning epoch.
    start_epoch : int
        First pruning epoch.
    frequency : int
        Number of epochs between pruning steps.
    n_steps : int
        Number of pruning steps; the ramp ends at ``start_epoch + n_steps * frequency``.
    granularity : {"element", "filter"}
    """

    initial_sparsity: float = 0.0
    final_sparsity: float = 0.5
    start_epoch: int = 0
    frequency: int = 1
    n_steps: int = 10
    granularity: str = ELEMENT

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity < 1.0:
            raise ValueError(f"initial_sparsity must be in [0, 1), got {self.initial_sparsity}")
        if not 0.0 <= self.final_sparsity <= 1.0:
            raise ValueError(f"final_sparsity must be in [0, 1], got {self.final_sparsity}")
        if self.initial_sparsity > self.final_sparsity:
            raise ValueError("initial_sparsity must not exceed final_sparsity")
        if self.start_epoch < 0 or self.frequency < 1 or self.n_steps < 1:
            raise ValueError("need start_epoch >= 0, frequency >= 1, n_steps >= 1")
        if self.granularity not in (ELEMENT, FILTER):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def end_epoch(self) -> int:
        return self.start_epoch + self.n_steps * self.frequency

    def pruning_epochs(self) -> list[int]:
        return list(range(self.start_epoch, self.end_epoch + 1, self.frequency))

    def check_fits(self, total_epochs: int) -> None:
        if self.end_epoch > total_epochs:
            raise ValueError(
                f"pruning ends at epoch {self.end_epoch}, past the {total_epochs} training epochs"
            )

    @classmethod
    def over_window(cls, final_sparsity, start_epoch, end_epoch, granularity=ELEMENT,
                    initial_sparsity=0.0):
        """Schedule with one pruning step per epoch from ``start_epoch`` to ``end_epoch``."""
        return cls(
            initial_sparsity=initial_sparsity,
            final_sparsity=final_sparsity,
            start_epoch=start_epoch,
            frequency=1,
            n_steps=max(1, end_epoch - start_epoch),
            granularity=granularity,
        )


def schedule_sparsity(sched: SparsitySchedule, t: int) -> float:
    """Target sparsity at epoch ``t``.

    ``s_f + (s_i - s_f) * (1 - (t - t_0) / (n * dt))**3``, clamped to
    ``[s_i, s_f]``. Raises :class:`NotAPruningEpoch` when ``t`` is not one of
    ``t_0, t_0 + dt, ..., t_0 + n * dt``.
    """
    offset = t - sched.start_epoch
    if offset < 0 or offset % sched.frequency or t > sched.end_epoch:
        raise NotAPruningEpoch(f"epoch {t} is not a pruning epoch")
    if offset == 0:
        return float(sched.initial_sparsity)
    if t == sched.end_epoch:
        return float(sched.final_sparsity)
    span = sched.n_steps * sched.frequency
    s = sched.final_sparsity + (sched.initial_sparsity - sched.final_sparsity) * (1.0 - offset / span) ** 3
    return float(min(max(s, sched.initial_sparsity), sched.final_sparsity))


@dataclass
class ParameterTensor:
    """A named weight array with its pruning mask.

    ``layer_kind`` is one of ``"conv"`` (out, in, kh, kw), ``"dense"`` (out, in)
    or ``"bias"`` (n,). A bias names the weight tensor whose output channels it
    follows through ``paired_with``.
    """

    name: str
    values: np.ndarray
    layer_kind: str
    mask: np.ndarray | None = None
    paired_with: str | None = None
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=np.uint8)
        else:
            mask = np.asarray(self.mask)
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"{self.name}: mask entries must be 0 or 1")
            self.mask = mask.astype(np.uint8).reshape(self.values.shape)
        if self.layer_kind not in (CONV, DENSE, BIAS):
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if self.layer_kind == CONV and self.values.ndim != 4:
            raise MaskShapeError(f"{self.name}: conv tensor must be 4-d")
        if self.layer_kind == DENSE and self.values.ndim != 2:
            raise MaskShapeError(f"{self.name}: dense tensor must be 2-d")
        if self.layer_kind == BIAS and self.values.ndim != 1:
            raise MaskShapeError(f"{self.name}: bias tensor must be 1-d")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def out_channels(self) -> int:
        return self.values.shape[0]

    def sparsity(self) -> float:
        return float(np.count_nonzero(self.mask == 0)) / self.size

    def channel_sparsity(self) -> float:
        """Fraction of output channels whose weights are entirely masked."""
        flat = self.mask.reshape(self.out_channels, -1)
        return float(np.count_nonzero(~flat.any(axis=1))) / self.out_channels

    def masked_channels(self) -> np.ndarray:
        flat = self.mask.reshape(self.out_channels, -1)
        return np.flatnonzero(~flat.any(axis=1))


def _check_target(tensor: ParameterTensor, target: float, current: float) -> None:
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target sparsity must be in [0, 1], got {target}")
    if target + 1e-12 < current:
        raise MaskMonotonicityError(
            f"{tensor.name}: target sparsity {target} below current {current}"
        )


def prune_unstructured(tensor: ParameterTensor, target_sparsity: float) -> np.ndarray:
    """Mask the ``floor(target * size)`` smallest-magnitude entries.

    Already-masked entries (value 0) sort first, so the mask only grows. Returns
    the updated mask; values under the mask are zeroed in place.
    """
    _check_target(tensor, target_sparsity, tensor.sparsity())
    n_mask = math.floor(target_sparsity * tensor.size + 1e-9)
    if n_mask == 0:
        return tensor.mask
    flat_mask = tensor.mask.ravel()
    # masked entries sort ahead of genuine zeros; stable sort breaks ties by flat index
    keys = np.where(flat_mask == 0, -1.0, np.abs(tensor.values.ravel()))
    order = np.argsort(keys, kind="stable")
    mask = flat_mask.copy()
    mask[order[:n_mask]] = 0
    tensor.mask = mask.reshape(tensor.shape)
    tensor.values *= tensor.mask
    return tensor.mask


def filter_norms(tensor: ParameterTensor) -> np.ndarray:
    """Per-output-channel L1 norm of the (masked) weights."""
    return np.abs(tensor.values * tensor.mask).reshape(tensor.out_channels, -1).sum(axis=1)


def prune_structured(tensor: ParameterTensor, target_sparsity: float) -> np.ndarray:
    """Mask whole output channels, smallest L1 norm first.

    ``floor(target * out_channels)`` channels end up masked, with at least one
    channel kept alive whenever ``target < 1``.
    """
    if tensor.layer_kind == BIAS:
        raise ValueError(f"{tensor.name}: bias tensors follow their paired channel, prune the weight")
    n_out = tensor.out_channels
    _check_target(tensor, target_sparsity, tensor.channel_sparsity())
    n_mask = math.floor(target_sparsity * n_out + 1e-9)
    if target_sparsity < 1.0:
        n_mask = min(n_mask, n_out - 1)
    if n_mask == 0:
        return tensor.mask
    norms = filter_norms(tensor)
    # previously masked channels have norm 0 and are re-selected first
    already = np.zeros(n_out, dtype=bool)
    already[tensor.masked_channels()] = True
    keys = np.where(already, -1.0, norms)
    order = np.argsort(keys, kind="stable")
    chan_mask = np.ones(n_out, dtype=np.uint8)
    chan_mask[order[:n_mask]] = 0
    chan_mask[already] = 0
    mask = tensor.mask.reshape(n_out, -1) * chan_mask[:, None]
    tensor.mask = mask.reshape(tensor.shape).astype(np.uint8)
    tensor.values *= tensor.mask
    return tensor.mask


def apply_masks(tensors: Iterable[ParameterTensor]) -> None:
    """Zero every value whose mask entry is 0. Idempotent."""
    for t in tensors:
        if t.mask.shape != t.values.shape:
            raise MaskShapeError(
                f"{t.name}: mask shape {t.mask.shape} != values shape {t.values.shape}"
            )
        t.values *= t.mask


def sync_bias_masks(tensors: Sequence[ParameterTensor]) -> None:
    """Mask bias entries whose paired output channel is fully masked."""
    by_name = {t.name: t for t in tensors}
    for t in tensors:
        if t.layer_kind != BIAS or t.paired_with is None:
            continue
        weight = by_name[t.paired_with]
        dead = weight.masked_channels()
        t.mask[dead] = 0
        t.values *= t.mask


class GradualPruner:
    """Drive a :class:`SparsitySchedule` over a model's parameter tensors.

    Parameters
    ----------
    schedule : SparsitySchedule
    exclude : sequence of str
        Tensor names that are never pruned.
    """

    def __init__(self, schedule: SparsitySchedule, exclude: Sequence[str] = ()):
        self.schedule = schedule
        self.exclude = tuple(exclude)
        self.trace: list[dict] = []

    def prunable(self, tensors: Sequence[ParameterTensor]) -> list[ParameterTensor]:
        return [t for t in tensors if t.layer_kind != BIAS and t.name not in self.exclude]

    def step(self, tensors: Sequence[ParameterTensor], epoch: int) -> float | None:
        """Prune to the scheduled target; returns it, or ``None`` off-schedule."""
        try:
            target = schedule_sparsity(self.schedule, epoch)
        except NotAPruningEpoch:
            return None
        for t in self.prunable(tensors):
            if self.schedule.granularity == FILTER:
                prune_structured(t, target)
                observed = t.channel_sparsity()
            else:
                prune_unstructured(t, target)
                observed = t.sparsity()
            self.trace.append(
                {"epoch": epoch, "tensor": t.name, "target_sparsity": target,
                 "observed_sparsity": observed}
            )
        if self.schedule.granularity == FILTER:
            sync_bias_masks(tensors)
        return target

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "tensor", "target_sparsity", "observed_sparsity"]
            )
            writer.writeheader()
            for row in self.trace:
                writer.writerow({**row, "target_sparsity": repr(row["target_sparsity"]),
                                 "observed_sparsity": repr(row["observed_sparsity"])})
