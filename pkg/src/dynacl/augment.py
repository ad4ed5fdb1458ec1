"""Strength-parameterised augmentation family with replayable draws.

A policy at strength ``s`` interpolates between flip-only (``s = 0``) and the
usual contrastive stack (``s = 1``): random resized crop with area fraction in
``[1 - 0.9 s, 1]``, horizontal flip at p = 0.5, colour jitter with magnitudes
``(0.4 s, 0.4 s, 0.4 s, 0.1 s)`` applied with p = ``0.8 s``, and grayscale with
p = ``0.2 s``.

Sampling and application are split so a draw can be recorded and replayed:
``sample_params`` consumes randomness, ``apply`` is a pure function.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import kernels
from .errors import ContractError

LUMA = (0.299, 0.587, 0.114)
JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass
class ImageBatch:
    """N x C x H x W float32 images in [0, 1], optionally labelled."""

    data: np.ndarray
    labels: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ContractError(f"expected N x C x H x W images, got shape {self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.data),):
                raise ContractError("labels must be a vector aligned with the images")
            if self.num_classes is None and len(self.labels):
                self.num_classes = int(self.labels.max()) + 1
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.data)

    @property
    def image_shape(self):
        return tuple(self.data.shape[1:])

    def subset(self, index) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[index]
        return ImageBatch(self.data[index], labels, self.num_classes)


@dataclass(frozen=True)
class AugmentationPolicy:
    strength: float
    output_size: tuple[int, int] = (32, 32)
    flip_probability: float = 0.5
    ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ContractError(f"strength must lie in [0, 1], got {self.strength}")

    @property
    def scale(self) -> tuple[float, float]:
        return (1.0 - 0.9 * self.strength, 1.0)

    @property
    def jitter_magnitudes(self) -> tuple[float, float, float, float]:
        s = self.strength
        return (0.4 * s, 0.4 * s, 0.4 * s, 0.1 * s)

    @property
    def jitter_probability(self) -> float:
        return 0.8 * self.strength

    @property
    def grayscale_probability(self) -> float:
        return 0.2 * self.strength


@dataclass(frozen=True)
class TransformParams:
    source_shape: tuple[int, int, int]
    output_size: tuple[int, int]
    top: int
    left: int
    height: int
    width: int
    flip: bool = False
    jitter: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    jitter_order: tuple[int, ...] = field(default=(0, 1, 2, 3))
    grayscale: bool = False

    @classmethod
    def identity(cls, source_shape, output_size=None):
        c, h, w = source_shape
        return cls(tuple(source_shape), tuple(output_size or (h, w)), 0, 0, h, w)


def _sample_crop(rng, h, w, scale, ratio):
    area = h * w
    lo, hi = scale
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and lo <= cw * ch / area <= hi:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: centred crop, as large as the aspect bounds allow
    in_ratio = w / h
    if in_ratio < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def sample_params(policy: AugmentationPolicy, rng: np.random.Generator, source_shape) -> TransformParams:
    """Draw one concrete transform for an image of ``source_shape`` (C, H, W)."""
    c, h, w = source_shape
    if h < 1 or w < 1:
        raise ContractError("source image must be at least 1x1")
    top, left, ch, cw = _sample_crop(rng, h, w, policy.scale, policy.ratio)
    flip = bool(rng.random() < policy.flip_probability)

    jitter = bool(rng.random() < policy.jitter_probability)
    b = cn = sat = 1.0
    hue = 0.0
    order = (0, 1, 2, 3)
    if jitter:
        mb, mc, ms, mh = policy.jitter_magnitudes
        b = float(rng.uniform(max(0.0, 1 - mb), 1 + mb))
        cn = float(rng.uniform(max(0.0, 1 - mc), 1 + mc))
        sat = float(rng.uniform(max(0.0, 1 - ms), 1 + ms))
        hue = float(rng.uniform(-mh, mh))
        order = tuple(int(i) for i in rng.permutation(4))
    gray = bool(rng.random() < policy.grayscale_probability)
    return TransformParams(
        source_shape=tuple(int(v) for v in source_shape),
        output_size=tuple(int(v) for v in policy.output_size),
        top=top, left=left, height=ch, width=cw,
        flip=flip, jitter=jitter, brightness=b, contrast=cn, saturation=sat, hue=hue,
        jitter_order=order, grayscale=gray,
    )


def _gray(img):
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def _blend(a, b, ratio):
    return np.clip(ratio * a + (1.0 - ratio) * b, 0.0, 1.0)


def apply(image: np.ndarray, params: TransformParams) -> np.ndarray:
    """Replay ``params`` on a single C x H x W image: crop+resize, flip, jitter, grayscale."""
    image = np.asarray(image, dtype=np.float32)
    if tuple(image.shape) != tuple(params.source_shape):
        raise ContractError(f"image shape {image.shape} does not match sampled shape {params.source_shape}")
    out_h, out_w = params.output_size
    out = kernels.crop_resize(np.ascontiguousarray(image), params.top, params.left,
                              params.height, params.width, out_h, out_w)
    if params.flip:
        out = out[:, :, ::-1]
    if params.jitter:
        rgb = out.shape[0] == 3
        for op in params.jitter_order:
            name = JITTER_OPS[op]
            if name == "brightness":
                out = np.clip(out * params.brightness, 0.0, 1.0)
            elif name == "contrast":
                mean = _gray(out).mean() if rgb else out.mean()
                out = _blend(out, mean, params.contrast)
            elif name == "saturation" and rgb:
                out = _blend(out, _gray(out)[None], params.saturation)
            elif name == "hue" and rgb and params.hue != 0.0:
                out = kernels.hue_shift(np.ascontiguousarray(out), params.hue)
    if params.grayscale and out.shape[0] == 3:
        g = _gray(out)
        out = np.stack([g, g, g])
    return np.ascontiguousarray(out, dtype=np.float32)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream for one source sample, stable under any worker schedule."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def augment_batch(batch: ImageBatch, policy: AugmentationPolicy,
                  rng: Union[np.random.Generator, int], *, epoch: int = 0,
                  indices=None) -> ImageBatch:
    """One augmented view per image (used by the diagnostics)."""
    views = _augment(batch, policy, rng, epoch, indices, n_views=1)
    return views[0]


def augment_views(batch: ImageBatch, policy: AugmentationPolicy,
                  rng: Union[np.random.Generator, int], *, epoch: int = 0,
                  indices=None) -> tuple[ImageBatch, ImageBatch]:
    """Two independently augmented views per image, order-aligned with ``batch``.

    ``rng`` is either a Generator (consumed sequentially) or an integer seed,
    in which case sample ``i`` draws from ``sample_rng(seed, epoch, indices[i])``.
    """
    v1, v2 = _augment(batch, policy, rng, epoch, indices, n_views=2)
    return v1, v2


def _augment(batch, policy, rng, epoch, indices, n_views):
    n = len(batch)
    shape = batch.image_shape
    out = [np.empty((n, shape[0], *policy.output_size), dtype=np.float32) for _ in range(n_views)]
    if indices is None:
        indices = np.arange(n)
    per_sample = not isinstance(rng, np.random.Generator)
    for i in range(n):
        g = sample_rng(rng, epoch, indices[i]) if per_sample else rng
        for v in range(n_views):
            out[v][i] = apply(batch.data[i], sample_params(policy, g, shape))
    return [ImageBatch(o, batch.labels, batch.num_classes) for o in out]
