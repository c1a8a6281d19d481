"""Deterministic shapes-on-texture detection datasets with a power-law class histogram."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corrupt import dequantize, plasma, quantize, read_png, write_png
from .evaluation import GroundTruthBox, GroundTruthSet, read_ground_truth_json, write_ground_truth_json
from .imbalance import ClassStatistics

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross", "frame", "wedge")
PALETTE = (
    (0.85, 0.20, 0.20),
    (0.20, 0.35, 0.85),
    (0.20, 0.75, 0.25),
    (0.90, 0.80, 0.15),
    (0.80, 0.25, 0.80),
    (0.15, 0.80, 0.80),
    (0.95, 0.55, 0.10),
    (0.55, 0.30, 0.10),
)


@dataclass
class DatasetSpec:
    """Parameters of a synthetic dataset.

    Class ``k`` (0-based) is drawn for each object with probability
    proportional to ``1 / (k + 1) ** alpha``. Each class is a distinct shape
    with a home colour; ``color_consistency`` is the chance an object keeps
    its class colour instead of a random palette colour.
    """

    num_images: int = 300
    image_size: int = 64
    num_classes: int = 6
    alpha: float = 1.2
    objects_per_image: tuple = (1, 4)
    object_size: tuple = (10, 22)
    max_overlap_iou: float = 0.3
    color_consistency: float = 0.5
    texture_amplitude: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.object_size = tuple(int(v) for v in self.object_size)
        if not 2 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [2, {len(SHAPES)}]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        lo, hi = self.object_size
        if lo < 3 or hi < lo:
            raise ValueError(f"bad object size range {self.object_size}")
        if hi > self.image_size:
            raise ValueError("objects larger than the image")
        olo, ohi = self.objects_per_image
        if olo < 0 or ohi < olo:
            raise ValueError(f"bad objects-per-image range {self.objects_per_image}")
        if self.num_images < 1:
            raise ValueError("num_images must be positive")

    def class_probabilities(self) -> np.ndarray:
        p = 1.0 / np.arange(1, self.num_classes + 1) ** self.alpha
        return p / p.sum()

    def class_names(self) -> list[str]:
        return [SHAPES[k] for k in range(self.num_classes)]

    def to_dict(self):
        return asdict(self)


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Binary (h, w) mask of ``shape`` sampled at pixel centres of its box."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "circle":
        m = u * u + v * v <= 1.0
    elif shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "triangle":
        m = np.abs(u) <= (v + 1) / 2
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "ring":
        r = u * u + v * v
        m = (r <= 1.0) & (r >= 0.36)
    elif shape == "cross":
        m = (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    elif shape == "frame":
        m = (np.abs(u) >= 0.5) | (np.abs(v) >= 0.5)
    elif shape == "wedge":
        m = np.abs(u) <= (1 - v) / 2
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _box_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _rng(spec, image_id):
    return np.random.default_rng([spec.seed & 0xFFFFFFFF, image_id, 0x5EED])


def render_image(spec: DatasetSpec, image_id: int):
    """Render one image; returns ``(pixels, objects)`` with objects as ``(class, box, mask)``."""
    rng = _rng(spec, image_id)
    n = spec.image_size
    base = rng.uniform(0.3, 0.7, size=3)
    tex = plasma(n, n, rng) - 0.5
    img = np.clip(base + spec.texture_amplitude * tex[..., None], 0, 1)
    probs = spec.class_probabilities()
    n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    objects = []
    for _ in range(n_obj):
        c = int(rng.choice(spec.num_classes, p=probs))
        for _attempt in range(50):
            s = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            aspect = rng.uniform(0.8, 1.25)
            w = max(3, min(n, int(round(s * np.sqrt(aspect)))))
            h = max(3, min(n, int(round(s / np.sqrt(aspect)))))
            x0 = int(rng.integers(0, n - w + 1))
            y0 = int(rng.integers(0, n - h + 1))
            mask = shape_mask(SHAPES[c], w, h)
            ys, xs = np.nonzero(mask)
            box = (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
            if all(_box_iou(box, o[1]) <= spec.max_overlap_iou for o in objects):
                break
        else:
            continue
        if rng.random() < spec.color_consistency:
            color = np.array(PALETTE[c])
        else:
            color = np.array(PALETTE[int(rng.integers(len(PALETTE)))])
        color = np.clip(color + rng.normal(0, 0.05, 3), 0, 1)
        region = img[y0:y0 + h, x0:x0 + w]
        region[mask] = color
        full = np.zeros((n, n), dtype=bool)
        full[y0:y0 + h, x0:x0 + w] = mask
        objects.append((c, tuple(float(v) for v in box), full))
    return dequantize(quantize(img)), objects


@dataclass
class SyntheticDataset:
    """Images in memory plus their ground truth; ``root`` is set when on disk."""

    images: np.ndarray
    image_ids: list
    ground_truth: GroundTruthSet
    stats: ClassStatistics
    spec: DatasetSpec | None = None
    root: Path | None = None

    def __len__(self):
        return len(self.image_ids)

    def index_of(self, image_id):
        return self.image_ids.index(image_id)

    def subset(self, ids):
        pos = {i: k for k, i in enumerate(self.image_ids)}
        ids = list(ids)
        anns = [a for a in self.ground_truth.annotations if a.image_id in set(ids)]
        gt = GroundTruthSet([im for im in self.ground_truth.images if im["id"] in set(ids)],
                            anns, self.ground_truth.classes)
        stats = ClassStatistics.from_annotations(anns, ids, self.ground_truth.class_ids,
                                                 self.ground_truth.class_names)
        return SyntheticDataset(self.images[[pos[i] for i in ids]], ids, gt, stats, self.spec,
                                self.root)

    def boxes_array(self, image_id) -> np.ndarray:
        """(M, 5) array ``[class, x1, y1, x2, y2]`` for one image."""
        rows = [(a.class_id, *a.box) for a in self.ground_truth.annotations if a.image_id == image_id]
        return np.array(rows, dtype=np.float64).reshape(-1, 5)

    def targets(self):
        by = {i: [] for i in self.image_ids}
        for a in self.ground_truth.annotations:
            if a.image_id in by:
                by[a.image_id].append((a.class_id, *a.box))
        return [np.array(by[i], dtype=np.float64).reshape(-1, 5) for i in self.image_ids]


def generate(spec: DatasetSpec, out_dir=None) -> SyntheticDataset:
    """Render the dataset; with ``out_dir`` also write ``images/{id}.png``,
    ``ground_truth.json``, ``class_stats.csv`` and ``dataset_spec.json``."""
    n = spec.image_size
    images, anns, image_meta = [], [], []
    for image_id in range(spec.num_images):
        img, objects = render_image(spec, image_id)
        images.append(img)
        image_meta.append({"id": image_id, "width": n, "height": n})
        for c, box, _ in objects:
            anns.append(GroundTruthBox(image_id, c, box))
    classes = [{"id": k, "name": name} for k, name in enumerate(spec.class_names())]
    gt = GroundTruthSet(image_meta, anns, classes)
    ids = list(range(spec.num_images))
    stats = ClassStatistics.from_annotations(anns, ids, gt.class_ids, gt.class_names)
    ds = SyntheticDataset(np.stack(images), ids, gt, stats, spec)
    if out_dir is not None:
        root = Path(out_dir)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for image_id, img in zip(ids, images):
            write_png(root / "images" / f"{image_id}.png", img)
        write_ground_truth_json(gt, root / "ground_truth.json")
        stats.write_csv(root / "class_stats.csv")
        with open(root / "dataset_spec.json", "w") as fh:
            json.dump(spec.to_dict(), fh, indent=1)
        ds.root = root
    return ds


def load(root) -> SyntheticDataset:
    """Load a dataset written by :func:`generate` (or any det-eval ground truth + PNGs)."""
    root = Path(root)
    gt = read_ground_truth_json(root / "ground_truth.json")
    ids = [int(im["id"]) for im in gt.images]
    images = np.stack([read_png(root / "images" / f"{i}.png") for i in ids])
    stats = ClassStatistics.from_annotations(gt.annotations, ids, gt.class_ids, gt.class_names)
    spec = None
    if (root / "dataset_spec.json").exists():
        with open(root / "dataset_spec.json") as fh:
            spec = DatasetSpec(**json.load(fh))
    return SyntheticDataset(images, ids, gt, stats, spec, root)


def _target_sizes(n, fractions):
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    if abs(sum(fractions) - 1.0) < 1e-9:
        rema = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
        for k in rema[: n - sum(sizes)]:
            sizes[k] += 1
    return sizes


def split(dataset: SyntheticDataset, fractions, seed: int = 0) -> list[list]:
    """Disjoint, shuffled, stratified id lists, one per fraction.

    Images are grouped by the rarest class they contain. Groups are handled
    rarest first and every group with at least as many images as splits puts
    one image in each split before the rest are dealt by remaining capacity.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ValueError(f"fractions must be positive and sum to <= 1, got {fractions}")
    stats = dataset.stats
    n = len(dataset.image_ids)
    sizes = _target_sizes(n, fractions)
    freq = {c: stats.image_count(c) for c in stats.class_ids}
    groups = {}
    for i in dataset.image_ids:
        cs = stats.image_classes.get(i, frozenset())
        key = min(cs, key=lambda c: (freq[c], c)) if cs else -1
        groups.setdefault(key, []).append(i)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5B117])
    order = sorted(groups, key=lambda k: (freq.get(k, n + 1), k))
    out = [[] for _ in fractions]

    def room(k):
        return sizes[k] - len(out[k])

    for key in order:
        members = list(groups[key])
        rng.shuffle(members)
        if len(members) >= len(fractions):
            for k in sorted(range(len(fractions)), key=lambda k: (fractions[k], k)):
                if room(k) > 0:
                    out[k].append(members.pop())
        for m in members:
            open_k = [k for k in range(len(fractions)) if room(k) > 0]
            if not open_k:
                break
            k = max(open_k, key=lambda k: (room(k) / sizes[k], -k))
            out[k].append(m)
    for c in stats.class_ids:
        holders = [k for k, ids in enumerate(out) if any(c in stats.image_classes[i] for i in ids)]
        if stats.image_count(c) >= 2 and len(holders) < len(fractions):
            warnings.warn(f"class {c} is missing from some splits")
    return [sorted(ids) for ids in out]
