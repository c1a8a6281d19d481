"""Class-imbalance remedies: repeat-factor sampling and class-weight tables.

Weight tables cover foreground classes only; the background weight is always 1.
"""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator

METHODS = ("none", "rfs", "inv", "inv_cap", "ens")
BACKGROUND_WEIGHT = 1.0


class UndefinedFrequencyError(ValueError):
    """A class has zero frequency, so frequency-based factors are undefined."""


@dataclass
class ClassStatistics:
    """Image- and instance-level class counts.

    Attributes
    ----------
    num_images : int
    image_classes : dict
        ``image_id -> frozenset`` of classes present in the image.
    instance_counts : dict
        ``class_id -> N_c``.
    class_names : dict
    """

    num_images: int
    image_classes: dict
    instance_counts: dict
    class_names: dict = field(default_factory=dict)

    @classmethod
    def from_annotations(cls, annotations, image_ids, class_ids=None, class_names=None):
        """Count classes over ``image_ids`` (images without boxes still count)."""
        keep = set(image_ids)
        image_classes = {i: set() for i in image_ids}
        counts = {c: 0 for c in (class_ids or [])}
        for a in annotations:
            if a.image_id not in keep:
                continue
            image_classes[a.image_id].add(a.class_id)
            counts[a.class_id] = counts.get(a.class_id, 0) + 1
        return cls(len(keep), {i: frozenset(s) for i, s in image_classes.items()},
                   dict(sorted(counts.items())), dict(class_names or {}))

    @property
    def class_ids(self):
        return sorted(self.instance_counts)

    def image_count(self, c) -> int:
        return sum(1 for s in self.image_classes.values() if c in s)

    def frequency(self, c) -> float:
        """``f_c``: fraction of images with at least one instance of ``c``."""
        return self.image_count(c) / self.num_images if self.num_images else 0.0

    def frequencies(self) -> dict:
        return {c: self.frequency(c) for c in self.class_ids}

    def total_instances(self) -> int:
        return sum(self.instance_counts.values())

    def present_classes(self):
        return [c for c in self.class_ids if self.instance_counts[c] > 0]

    def absent_classes(self):
        return [c for c in self.class_ids if self.instance_counts[c] == 0]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "name", "image_count", "f_c", "N_c"])
            for c in self.class_ids:
                writer.writerow([c, self.class_names.get(c, str(c)), self.image_count(c),
                                 repr(self.frequency(c)), self.instance_counts[c]])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            return [
                {"class_id": int(r["class_id"]), "name": r["name"],
                 "image_count": int(r["image_count"]), "f_c": float(r["f_c"]),
                 "N_c": int(r["N_c"])}
                for r in csv.DictReader(fh)
            ]


@dataclass(frozen=True)
class ClassWeightTable:
    """Foreground class weights plus provenance."""

    weights: Mapping
    method: str
    params: Mapping = field(default_factory=dict)
    excluded: tuple = ()

    def __post_init__(self):
        bad = {c: w for c, w in self.weights.items() if not w > 0}
        if bad:
            raise ValueError(f"class weights must be positive, got {bad}")

    @property
    def background(self) -> float:
        return BACKGROUND_WEIGHT

    def __getitem__(self, c):
        return self.weights[c]

    def as_vector(self, num_classes, fill=1.0) -> np.ndarray:
        """Dense weight vector for classes ``0..num_classes-1``; missing classes get ``fill``."""
        return np.array([float(self.weights.get(c, fill)) for c in range(num_classes)])

    def write_csv(self, path, stats: ClassStatistics | None = None):
        _write_factor_csv(path, self.weights, self.method, self.params, stats)


def _write_factor_csv(path, values, method, params, stats):
    ptxt = ";".join(f"{k}={v}" for k, v in params.items())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "name", "f_c", "N_c", "value", "method", "parameters"])
        for c in sorted(values):
            name = stats.class_names.get(c, str(c)) if stats else str(c)
            f_c = repr(stats.frequency(c)) if stats else ""
            n_c = stats.instance_counts.get(c, 0) if stats else ""
            writer.writerow([c, name, f_c, n_c, repr(float(values[c])), method, ptxt])


def _check_threshold(t):
    if not 0.0 < t <= 1.0:
        raise ValueError(f"threshold t must be in (0, 1], got {t}")


def _frequencies(stats, classes=None):
    freqs = {c: stats.frequency(c) for c in (classes if classes is not None else stats.class_ids)}
    zero = [c for c, f in freqs.items() if f <= 0]
    if zero:
        raise UndefinedFrequencyError(f"classes {zero} have zero image frequency")
    return freqs


def class_repeat_factors(stats: ClassStatistics, t: float) -> dict:
    """``r_c = max(1, sqrt(t / f_c))`` for every class in ``stats``."""
    _check_threshold(t)
    return {c: max(1.0, math.sqrt(t / f)) for c, f in _frequencies(stats).items()}


def repeat_factors(stats: ClassStatistics, t: float) -> dict:
    """Image-level repeat factors: the largest ``r_c`` over the classes in each image.

    Images without annotated classes get 1.
    """
    r_c = class_repeat_factors(stats, t)
    return {i: max((r_c[c] for c in cs), default=1.0) for i, cs in stats.image_classes.items()}


def _epoch_rng(seed, image_id):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(image_id) & 0xFFFFFFFF,
                                  zlib.crc32(b"rfs")])


def sample_epoch(factors: Mapping, seed: int) -> list:
    """Image ids for one epoch under repeat-factor sampling.

    Image ``i`` appears ``floor(r_i)`` times plus once more with probability
    ``frac(r_i)``, then the whole list is shuffled. Pass a different ``seed`` per epoch.
    """
    ids = []
    for image_id in sorted(factors):
        r = float(factors[image_id])
        if r < 1.0:
            raise ValueError(f"repeat factor for image {image_id} below 1: {r}")
        whole = math.floor(r)
        frac = r - whole
        extra = frac > 0 and _epoch_rng(seed, image_id).random() < frac
        ids.extend([image_id] * (whole + int(extra)))
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(b"shuffle")]).permutation(len(ids))
    return [ids[k] for k in order]


def inverse_freq_weights(stats: ClassStatistics, t: float, capped: bool = True) -> ClassWeightTable:
    """``w_c = sqrt(t / f_c)``, floored at 1 when ``capped``."""
    _check_threshold(t)
    w = {}
    for c, f in _frequencies(stats).items():
        v = math.sqrt(t / f)
        w[c] = max(1.0, v) if capped else v
    return ClassWeightTable(w, "inv_cap" if capped else "inv", {"t": t})


def effective_number(n, beta: float) -> float:
    """``(1 - beta**n) / (1 - beta)``."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if beta == 0.0:
        return 1.0
    return -math.expm1(n * math.log(beta)) / (1.0 - beta)


def effective_number_weights(stats: ClassStatistics, beta: float) -> ClassWeightTable:
    """Inverse effective number of samples, normalised to a mean foreground weight of 1."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    counts = {c: n for c, n in stats.instance_counts.items()}
    zero = [c for c, n in counts.items() if n < 1]
    if zero:
        raise UndefinedFrequencyError(f"classes {zero} have no instances")
    raw = {c: 1.0 / effective_number(n, beta) for c, n in counts.items()}
    scale = len(raw) / sum(raw.values())
    return ClassWeightTable({c: v * scale for c, v in raw.items()}, "ens", {"beta": beta})


class LambdaTooAggressiveError(ValueError):
    """Scaling would push a class weight to zero or below."""


def scale_weights(table: ClassWeightTable, lam: float) -> ClassWeightTable:
    """Scale each weight's deviation from 1: ``w <- 1 + lam * (w - 1)``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    w = {c: 1.0 + lam * (v - 1.0) for c, v in table.weights.items()}
    bad = [c for c, v in w.items() if v <= 0]
    if bad:
        raise LambdaTooAggressiveError(f"lambda {lam} drives weights of classes {bad} to <= 0")
    return ClassWeightTable(w, table.method, {**table.params, "lambda": lam}, table.excluded)


def restrict(stats: ClassStatistics, classes) -> ClassStatistics:
    keep = set(classes)
    return ClassStatistics(
        stats.num_images,
        {i: frozenset(c for c in cs if c in keep) for i, cs in stats.image_classes.items()},
        {c: n for c, n in stats.instance_counts.items() if c in keep},
        stats.class_names,
    )


class ClassBalancer(BaseEstimator):
    """Fit one imbalance remedy to training statistics.

    Parameters
    ----------
    method : {"none", "rfs", "inv", "inv_cap", "ens"}
    t : float
        Frequency threshold for ``rfs``, ``inv`` and ``inv_cap``.
    beta : float
        Smoothing for ``ens``.
    lam : float
        Deviation scale applied to weight tables.

    After ``fit``, ``weight_table_`` holds a :class:`ClassWeightTable` (or
    ``None``), ``repeat_factors_`` the per-image factors (or ``None``) and
    ``excluded_`` the classes left out for having no instances.
    """

    def __init__(self, method="none", t=0.3, beta=0.99, lam=1.0):
        self.method = method
        self.t = t
        self.beta = beta
        self.lam = lam

    def fit(self, stats: ClassStatistics, y=None):
        if self.method not in METHODS:
            raise ValueError(f"unknown imbalance method {self.method!r}")
        self.excluded_ = tuple(stats.absent_classes())
        present = restrict(stats, stats.present_classes())
        self.weight_table_ = None
        self.repeat_factors_ = None
        if self.method == "rfs":
            self.repeat_factors_ = repeat_factors(present, self.t)
        elif self.method in ("inv", "inv_cap"):
            table = inverse_freq_weights(present, self.t, capped=self.method == "inv_cap")
            self.weight_table_ = scale_weights(table, self.lam)
        elif self.method == "ens":
            self.weight_table_ = scale_weights(effective_number_weights(present, self.beta), self.lam)
        if self.weight_table_ is not None:
            self.weight_table_ = ClassWeightTable(self.weight_table_.weights, self.weight_table_.method,
                                                  self.weight_table_.params, self.excluded_)
        return self

    def class_weight_vector(self, num_classes):
        if getattr(self, "weight_table_", None) is None:
            return None
        return self.weight_table_.as_vector(num_classes)
