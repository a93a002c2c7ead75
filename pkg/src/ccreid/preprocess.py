"""Clothing erasure, part-mask supervision targets, and paired augmentation.

Everything here is a pure function of its inputs plus an explicit numpy
Generator, so the data pipeline stays reproducible sample by sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .datamodel import ImageSample, LabelVocabulary
from .errors import ConfigurationError, ValidationError


@dataclass
class PartMaskSet:
    """Binary part masks at feature resolution, one channel per body part."""

    masks: np.ndarray  # K x h x w, values in {0, 1}

    def validate(self):
        if self.masks.ndim != 3:
            raise ValidationError(f"masks must be K x h x w, got shape {self.masks.shape}")
        per_pixel = self.masks.sum(axis=0)
        if not np.isin(per_pixel, (0, 1)).all():
            raise ValidationError("a pixel belongs to more than one part")
        return self


@dataclass
class AugmentConfig:
    target_height: int = 384
    target_width: int = 192
    flip_probability: float = 0.5
    crop_padding: int = 10
    erase_probability: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.2)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)

    def validate(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ConfigurationError("target dimensions must be positive")
        for name in ("flip_probability", "erase_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        if self.crop_padding < 0:
            raise ConfigurationError("crop_padding must be non-negative")
        return self


def erase_clothing(sample: ImageSample, vocab: LabelVocabulary) -> np.ndarray:
    """Zero out every pixel whose parsing label is a clothing label.

    Returns a new image; non-clothing pixels are bit-identical to the input.
    """
    if not vocab.clothes_labels:
        raise ValidationError("vocabulary has no clothes labels")
    clothes = np.isin(sample.parsing, sorted(vocab.clothes_labels))
    out = sample.image.copy()
    out[clothes] = 0.0
    return out


def build_part_masks(parsing: np.ndarray, vocab: LabelVocabulary, h: int, w: int) -> PartMaskSet:
    """Downsample a parsing map to K binary part masks at feature resolution.

    Each output cell covers a proportional block of the input; the cell's
    part is decided by majority vote over its pixels. Ties between parts go
    to the lower part index, and background loses ties to any part.
    """
    if h <= 0 or w <= 0:
        raise ConfigurationError("feature resolution must be positive")
    src_h, src_w = parsing.shape
    num_parts = vocab.num_parts
    lut = vocab.part_of_label()
    part_map = lut[parsing]  # H x W with values in {-1, 0..K-1}

    row_edges = (np.arange(h + 1) * src_h) // h
    col_edges = (np.arange(w + 1) * src_w) // w
    masks = np.zeros((num_parts, h, w), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            cell = part_map[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            counts = np.bincount(cell.ravel() + 1, minlength=num_parts + 1)
            part_counts = counts[1:]
            best = int(np.argmax(part_counts))  # argmax takes the lowest index on ties
            if part_counts[best] > 0 and part_counts[best] >= counts[0]:
                masks[best, i, j] = 1.0
    return PartMaskSet(masks).validate()


def _resize(image, height, width, nearest=False):
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(image, (width, height), interpolation=interp)


def resize_sample(image, parsing, height, width):
    """Resize an image (bilinear) and its parsing map (nearest) together."""
    out_img = _resize(image, height, width)
    out_parse = None
    if parsing is not None:
        out_parse = _resize(parsing.astype(np.int32), height, width, nearest=True).astype(parsing.dtype)
    return out_img, out_parse


def augment(image_pair, parsing, cfg: AugmentConfig, rng: np.random.Generator,
            background_label: int = 0):
    """Apply one augmentation draw identically to a raw/erased image pair.

    The same resize, pad-and-crop, and flip are applied to both images and
    the parsing map so spatial correspondence is preserved. Random erasing
    zeroes an identical rectangle in both image views and relabels it as
    background in the parsing view, so erased pixels are never supervised
    toward a body part.

    Returns (raw view, erased view, parsing view).
    """
    raw, black = image_pair
    if raw.shape != black.shape:
        raise ValidationError(f"paired images disagree in shape: {raw.shape} vs {black.shape}")
    th, tw = cfg.target_height, cfg.target_width

    raw, parsing = resize_sample(raw, parsing, th, tw)
    black, _ = resize_sample(black, None, th, tw)

    pad = cfg.crop_padding
    if pad > 0:
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        raw = np.pad(raw, ((pad, pad), (pad, pad), (0, 0)))[top:top + th, left:left + tw]
        black = np.pad(black, ((pad, pad), (pad, pad), (0, 0)))[top:top + th, left:left + tw]
        parsing = np.pad(parsing, pad, constant_values=background_label)[top:top + th, left:left + tw]

    if rng.random() < cfg.flip_probability:
        raw = raw[:, ::-1]
        black = black[:, ::-1]
        parsing = parsing[:, ::-1]

    if rng.random() < cfg.erase_probability:
        rect = _sample_erase_rect(th, tw, cfg, rng)
        if rect is not None:
            y, x, eh, ew = rect
            raw = raw.copy()
            black = black.copy()
            parsing = parsing.copy()
            raw[y:y + eh, x:x + ew] = 0.0
            black[y:y + eh, x:x + ew] = 0.0
            parsing[y:y + eh, x:x + ew] = background_label

    return np.ascontiguousarray(raw), np.ascontiguousarray(black), np.ascontiguousarray(parsing)


def _sample_erase_rect(height, width, cfg, rng, attempts=10):
    area = height * width
    for _ in range(attempts):
        target_area = rng.uniform(*cfg.erase_area_range) * area
        aspect = rng.uniform(*cfg.erase_aspect_range)
        eh = int(round(np.sqrt(target_area * aspect)))
        ew = int(round(np.sqrt(target_area / aspect)))
        if 0 < eh < height and 0 < ew < width:
            y = int(rng.integers(0, height - eh + 1))
            x = int(rng.integers(0, width - ew + 1))
            return y, x, eh, ew
    return None
