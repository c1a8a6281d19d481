"""Seeded image augmentation for training and a 15-kind corruption suite for evaluation.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
transform is a pure function of its inputs: randomness comes from a generator
seeded by ``(seed, image_id, ...)``, and every output is clipped back to [0, 1].

The random field used by a corruption (noise draws, blur direction, displacement
field) does not depend on severity; severity only scales it. Higher severities
are therefore never closer to the clean image than lower ones on a given input.
"""
from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage
from scipy.stats import poisson
from sklearn.base import BaseEstimator, TransformerMixin

NOISE, BLUR, WEATHER, DIGITAL = "Noise", "Blur", "Weather", "Digital"

KIND_GROUPS = {
    "gaussian_noise": NOISE,
    "shot_noise": NOISE,
    "impulse_noise": NOISE,
    "salt_pepper": NOISE,
    "defocus": BLUR,
    "glass": BLUR,
    "motion": BLUR,
    "zoom": BLUR,
    "snow": WEATHER,
    "fog": WEATHER,
    "brightness": WEATHER,
    "contrast": WEATHER,
    "elastic": DIGITAL,
    "pixelate": DIGITAL,
    "jpeg": DIGITAL,
}
KINDS = tuple(KIND_GROUPS)
GROUPS = (NOISE, BLUR, WEATHER, DIGITAL)
DEFAULT_SEVERITY = 3

# One row per kind, one entry per severity 1..5.
SEVERITY_TABLE = {
    "gaussian_noise": {"sigma": (0.04, 0.06, 0.08, 0.11, 0.15)},
    "shot_noise": {"photons": (100, 60, 35, 20, 12)},
    "impulse_noise": {"amount": (0.03, 0.06, 0.09, 0.14, 0.20)},
    "salt_pepper": {"amount": (0.02, 0.04, 0.07, 0.11, 0.16)},
    "defocus": {"radius": (0.75, 1.0, 1.5, 2.0, 2.5)},
    "glass": {"sigma": (0.4, 0.5, 0.6, 0.7, 0.9), "max_shift": (1, 1, 1, 2, 2),
              "iterations": (1, 2, 2, 2, 3)},
    "motion": {"length": (3, 5, 7, 9, 11)},
    "zoom": {"max_zoom": (1.06, 1.11, 1.16, 1.21, 1.26)},
    "snow": {"density": (0.02, 0.04, 0.06, 0.08, 0.11), "streak": (3, 3, 5, 5, 7),
             "whiten": (0.10, 0.15, 0.20, 0.25, 0.30)},
    "fog": {"density": (0.15, 0.25, 0.35, 0.45, 0.60)},
    "brightness": {"shift": (0.1, 0.2, 0.3, 0.4, 0.5)},
    "contrast": {"factor": (0.6, 0.5, 0.4, 0.3, 0.2)},
    "elastic": {"magnitude": (0.5, 1.0, 1.5, 2.0, 2.5), "smoothing": (3.0, 3.0, 3.0, 3.0, 3.0)},
    "pixelate": {"block": (2, 3, 4, 5, 6)},
    "jpeg": {"quality": (30, 20, 15, 10, 7)},
}

LUMA = np.array([0.299, 0.587, 0.114])


class CorruptionConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = DEFAULT_SEVERITY

    def __post_init__(self):
        if self.kind not in KIND_GROUPS:
            raise CorruptionConfigError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise CorruptionConfigError(f"severity must be 1..5, got {self.severity}")

    @property
    def group(self) -> str:
        return KIND_GROUPS[self.kind]

    def params(self) -> dict:
        return {k: v[self.severity - 1] for k, v in SEVERITY_TABLE[self.kind].items()}


def _rng(*key) -> np.random.Generator:
    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF for k in key]
    return np.random.default_rng(words)


def _clip(x):
    return np.clip(x, 0.0, 1.0)


def _per_channel(fn, img):
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def to_gray(img):
    """Luma grayscale replicated over three channels."""
    g = img @ LUMA
    return np.repeat(g[..., None], 3, axis=-1)


# --- colour primitives (shared by augmentation and the weather group) -------

def adjust_brightness(img, factor):
    return _clip(img * factor)


def adjust_contrast(img, factor):
    mean = float(np.mean(img @ LUMA))
    return _clip((img - mean) * factor + mean)


def adjust_saturation(img, factor):
    gray = to_gray(img)
    return _clip(gray + (img - gray) * factor)


def adjust_hue(img, shift):
    hsv = rgb_to_hsv(_clip(img))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return _clip(hsv_to_rgb(hsv))


def gaussian_blur(img, sigma):
    return _clip(_per_channel(lambda ch: ndimage.gaussian_filter(ch, sigma, mode="reflect"), img))


# --- corruption kinds -------------------------------------------------------

def _gaussian_noise(img, rng, sigma):
    return img + sigma * rng.standard_normal(img.shape)


def _shot_noise(img, rng, photons):
    # one uniform field drives every severity so stronger settings stay farther from clean
    u = rng.random(img.shape)
    counts = poisson.ppf(u, np.maximum(img * photons, 1e-12))
    return counts / photons


def _impulse_noise(img, rng, amount):
    hit = rng.random(img.shape)
    vals = rng.random(img.shape)
    return np.where(hit < amount, vals, img)


def _salt_pepper(img, rng, amount):
    hit = rng.random(img.shape[:2])[..., None]
    salt = (rng.random(img.shape[:2]) < 0.5)[..., None]
    return np.where(hit < amount, salt.astype(np.float64), img)


def disk_kernel(radius):
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k = (x * x + y * y <= radius * radius + 1e-9).astype(np.float64)
    return k / k.sum()


def _defocus(img, rng, radius):
    k = disk_kernel(radius)
    out = _per_channel(lambda ch: ndimage.convolve(ch, k, mode="reflect"), img)
    return gaussian_blur(out, 0.5)


def _glass(img, rng, sigma, max_shift, iterations):
    out = gaussian_blur(img, sigma)
    h, w = img.shape[:2]
    # the shift field is drawn for the largest setting and truncated per severity
    draws = rng.integers(-2, 3, size=(3, h, w, 2))
    for it in range(iterations):
        d = np.clip(draws[it], -max_shift, max_shift)
        rows = np.clip(np.arange(h)[:, None] + d[..., 0], 0, h - 1)
        cols = np.clip(np.arange(w)[None, :] + d[..., 1], 0, w - 1)
        out = out[rows, cols]
    return gaussian_blur(out, sigma)


def motion_kernel(length, angle):
    size = int(length) | 1
    k = np.zeros((size, size))
    c = size // 2
    t = np.linspace(-c, c, 4 * size)
    rr = np.round(c + t * np.sin(angle)).astype(int)
    cc = np.round(c + t * np.cos(angle)).astype(int)
    k[rr, cc] = 1.0
    return k / k.sum()


def _motion(img, rng, length):
    k = motion_kernel(length, rng.uniform(0, np.pi))
    return _per_channel(lambda ch: ndimage.convolve(ch, k, mode="nearest"), img)


def _center_zoom(ch, factor):
    h, w = ch.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return ndimage.map_coordinates(ch, [cy + (yy - cy) / factor, cx + (xx - cx) / factor],
                                   order=1, mode="nearest")


def _zoom(img, rng, max_zoom):
    factors = np.linspace(1.0, max_zoom, 6)[1:]
    acc = img.copy()
    for f in factors:
        acc += _per_channel(lambda ch: _center_zoom(ch, f), img)
    return acc / (len(factors) + 1)


def _snow(img, rng, density, streak, whiten):
    h, w = img.shape[:2]
    u = rng.random((h, w))
    angle = rng.uniform(np.pi / 3, 2 * np.pi / 3)
    flakes = (u < density).astype(np.float64)
    flakes = ndimage.convolve(flakes, motion_kernel(streak, angle), mode="constant")
    flakes = np.clip(flakes * 2.5, 0.0, 1.0)[..., None]
    base = img * (1 - whiten) + whiten * np.maximum(img, to_gray(img) * 1.5 + 0.5)
    return np.maximum(base, flakes)


def plasma(h, w, rng, decay=2.0):
    """Multi-octave value noise in [0, 1]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    size = 2
    while size <= max(h, w):
        grid = rng.random((size + 1, size + 1))
        out += amp * ndimage.zoom(grid, ((h + 1) / (size + 1), (w + 1) / (size + 1)),
                                  order=1)[:h, :w]
        total += amp
        amp /= decay
        size *= 2
    out /= total
    return (out - out.min()) / max(out.max() - out.min(), 1e-12)


def _fog(img, rng, density):
    field = plasma(img.shape[0], img.shape[1], rng)[..., None]
    peak = img.max()
    out = img + density * field
    return out * peak / (peak + density)


def _brightness(img, rng, shift):
    hsv = rgb_to_hsv(_clip(img))
    hsv[..., 2] = np.clip(hsv[..., 2] + shift, 0.0, 1.0)
    return hsv_to_rgb(hsv)


def _contrast(img, rng, factor):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * factor + mean


def _elastic(img, rng, magnitude, smoothing):
    h, w = img.shape[:2]
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), smoothing, mode="reflect")
        fields.append(f / max(np.abs(f).max(), 1e-12) * magnitude)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [yy + fields[0], xx + fields[1]]
    return _per_channel(lambda ch: ndimage.map_coordinates(ch, coords, order=1, mode="nearest"),
                        img)


def pixelate(img, block):
    """Replace each ``block`` x ``block`` tile by its mean (edge tiles may be smaller)."""
    h, w = img.shape[:2]
    out = np.empty_like(img)
    for r in range(0, h, block):
        for c in range(0, w, block):
            tile = img[r:r + block, c:c + block]
            out[r:r + block, c:c + block] = tile.mean(axis=(0, 1))
    return out


def _pixelate(img, rng, block):
    return pixelate(img, block)


def jpeg_roundtrip(img, quality):
    buf = io.BytesIO()
    Image.fromarray(quantize(img)).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return dequantize(np.asarray(Image.open(buf).convert("RGB")))


def _jpeg(img, rng, quality):
    return jpeg_roundtrip(img, quality)


_KIND_FN = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "salt_pepper": _salt_pepper,
    "defocus": _defocus,
    "glass": _glass,
    "motion": _motion,
    "zoom": _zoom,
    "snow": _snow,
    "fog": _fog,
    "brightness": _brightness,
    "contrast": _contrast,
    "elastic": _elastic,
    "pixelate": _pixelate,
    "jpeg": _jpeg,
}


def check_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


def corrupt_eval(image, spec: CorruptionSpec | str, seed: int = 0, image_id: int = 0):
    """Apply one corruption at the severity's row of :data:`SEVERITY_TABLE`."""
    if isinstance(spec, str):
        spec = CorruptionSpec(spec)
    return apply_kind(image, spec.kind, spec.params(), seed, image_id)


def apply_kind(image, kind: str, params: dict, seed: int = 0, image_id: int = 0):
    """Apply ``kind`` with explicit parameters instead of a severity row."""
    if kind not in _KIND_FN:
        raise CorruptionConfigError(f"unknown corruption kind {kind!r}")
    img = check_image(image)
    rng = _rng(seed, image_id, kind)
    return _clip(_KIND_FN[kind](img, rng, **params))


def synthetic_night(image, seed: int = 0, image_id: int = 0):
    """Darken to a quarter of the brightness and add sigma 0.05 gaussian noise.

    A synthetic stand-in for a day-to-night shift, not a model of real night imagery.
    """
    img = check_image(image)
    rng = _rng(seed, image_id, "synthetic_night")
    return _clip(img * 0.25 + 0.05 * rng.standard_normal(img.shape))


@dataclass
class SuiteItem:
    index: int
    image_id: int
    spec: CorruptionSpec
    image: np.ndarray | None
    error: str | None = None


def corruption_suite(dataset: Iterable, severities=(DEFAULT_SEVERITY,), seed: int = 0,
                     kinds=KINDS) -> Iterator[SuiteItem]:
    """Yield every (image, kind, severity) combination, image-major.

    ``dataset`` yields ``(image_id, image)`` pairs where ``image`` is an array
    or a path to a PNG. Items whose image cannot be read carry ``error`` and
    ``image=None``; the stream continues.
    """
    index = 0
    for image_id, source in dataset:
        img, err = None, None
        try:
            img = read_png(source) if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__") \
                else check_image(source)
        except (OSError, ValueError) as exc:
            err = f"{type(exc).__name__}: {exc}"
        for kind in kinds:
            for sev in severities:
                spec = CorruptionSpec(kind, int(sev))
                out = None if img is None else corrupt_eval(img, spec, seed, image_id)
                yield SuiteItem(index, int(image_id), spec, out, err)
                index += 1


# --- training-time augmentation ---------------------------------------------

AUGMENT_PROBS = {"color_distortion": 0.5, "color_drop": 0.2, "blur": 0.5, "noise": 0.5}
JITTER_STRENGTH = {"brightness": 0.8, "contrast": 0.8, "saturation": 0.8, "hue": 0.2}
BLUR_SIGMA_RANGE = (0.1, 2.0)
NOISE_SIGMA_RANGE = (0.01, 0.1)


def augmentation_decisions(seed: int, image_id: int) -> dict:
    """Which of the four augmentations fire for this ``(seed, image_id)``."""
    coins = _rng(seed, image_id, "augment").random(4)
    return {name: bool(c < p) for c, (name, p) in zip(coins, AUGMENT_PROBS.items())}


def color_distortion(img, rng):
    ops = [
        lambda x: adjust_brightness(x, rng.uniform(1 - JITTER_STRENGTH["brightness"],
                                                   1 + JITTER_STRENGTH["brightness"])),
        lambda x: adjust_contrast(x, rng.uniform(1 - JITTER_STRENGTH["contrast"],
                                                 1 + JITTER_STRENGTH["contrast"])),
        lambda x: adjust_saturation(x, rng.uniform(1 - JITTER_STRENGTH["saturation"],
                                                   1 + JITTER_STRENGTH["saturation"])),
        lambda x: adjust_hue(x, rng.uniform(-JITTER_STRENGTH["hue"], JITTER_STRENGTH["hue"])),
    ]
    for i in rng.permutation(len(ops)):
        img = ops[i](img)
    return img


def augment_train(image, seed: int, image_id: int = 0):
    """Colour distortion (p=0.5), colour drop (0.2), gaussian blur (0.5), gaussian noise (0.5).

    Applied independently in that order.
    """
    img = check_image(image)
    fire = augmentation_decisions(seed, image_id)
    rng = _rng(seed, image_id, "augment-params")
    if fire["color_distortion"]:
        img = color_distortion(img, rng)
    if fire["color_drop"]:
        img = to_gray(img)
    if fire["blur"]:
        img = gaussian_blur(img, rng.uniform(*BLUR_SIGMA_RANGE))
    if fire["noise"]:
        img = img + rng.uniform(*NOISE_SIGMA_RANGE) * rng.standard_normal(img.shape)
    return _clip(img)


# --- sklearn-style wrappers -------------------------------------------------

class Corruptor(BaseEstimator, TransformerMixin):
    """Apply one corruption kind at a fixed severity to a batch of images."""

    def __init__(self, kind="gaussian_noise", severity=DEFAULT_SEVERITY, seed=0):
        self.kind = kind
        self.severity = severity
        self.seed = seed

    def fit(self, X=None, y=None):
        CorruptionSpec(self.kind, self.severity)
        return self

    def transform(self, X, image_ids=None):
        spec = CorruptionSpec(self.kind, self.severity)
        X = np.asarray(X, dtype=np.float64)
        ids = range(len(X)) if image_ids is None else image_ids
        return np.stack([corrupt_eval(x, spec, self.seed, i) for x, i in zip(X, ids)])


class NaturalisticAugmenter(BaseEstimator, TransformerMixin):
    """Batch version of :func:`augment_train`."""

    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X, image_ids=None):
        X = np.asarray(X, dtype=np.float64)
        ids = range(len(X)) if image_ids is None else image_ids
        return np.stack([augment_train(x, self.seed, i) for x, i in zip(X, ids)])


# --- files ------------------------------------------------------------------

def quantize(img):
    return np.round(_clip(np.asarray(img, dtype=np.float64)) * 255.0).astype(np.uint8)


def dequantize(arr):
    return np.asarray(arr, dtype=np.float64) / 255.0


def write_png(path, img):
    Image.fromarray(quantize(img)).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return dequantize(np.asarray(im.convert("RGB")))


def write_severity_table(path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "group", "parameter", "s1", "s2", "s3", "s4", "s5"])
        for kind, params in SEVERITY_TABLE.items():
            for name, vals in params.items():
                writer.writerow([kind, KIND_GROUPS[kind], name, *vals])
