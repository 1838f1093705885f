"""Two-view augmentation pipeline: random resized crop, horizontal flip,
and lung masking.

All functions are pure: they never mutate their inputs and draw randomness
only from a caller-supplied ``numpy.random.Generator``, so fixed seeds give
identical outputs and images can be processed in parallel with per-image
generator streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import InputError, check_image, check_mask, check_probability

_CROP_RETRIES = 10


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for building a positive pair.

    ``mask_prob`` defaults to 0.5: lung masking is applied to each view
    independently with that probability, before crop/flip so the masked
    region stays geometrically consistent with the view. ``paired_mask``
    switches to the deterministic variant where exactly the first view of
    the pair is masked.
    """

    crop_scale: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    mask_prob: float = 0.5
    out_size: tuple[int, int] = (64, 64)
    paired_mask: bool = False

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise InputError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        check_probability(self.flip_prob, "flip_prob")
        check_probability(self.mask_prob, "mask_prob")
        if self.out_size[0] < 1 or self.out_size[1] < 1:
            raise InputError(f"out_size must be positive, got {self.out_size}")


def resize_bilinear(img: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping."""
    h, w = img.shape
    oh, ow = out_size
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0)


def random_resized_crop(img: np.ndarray, cfg: AugmentConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a window with area fraction drawn from ``cfg.crop_scale``
    (aspect ratio preserved), then bilinear-resize to ``cfg.out_size``.

    Draw order: area fraction, top, left. Windows that would collapse below
    2x2 are resampled a bounded number of times before raising.
    """
    img = check_image(img)
    h, w = img.shape
    lo, hi = cfg.crop_scale
    for _ in range(_CROP_RETRIES):
        area = rng.uniform(lo, hi)
        side = np.sqrt(area)
        ch = int(round(h * side))
        cw = int(round(w * side))
        if ch < 2 or cw < 2:
            continue
        ch, cw = min(ch, h), min(cw, w)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        window = img[top:top + ch, left:left + cw]
        if (ch, cw) == tuple(cfg.out_size):
            return window.copy()
        return resize_bilinear(window, cfg.out_size)
    raise InputError(
        f"random_resized_crop: window below 2x2 after {_CROP_RETRIES} retries "
        f"(crop_scale={cfg.crop_scale}, image {h}x{w})")


def horizontal_flip(img: np.ndarray) -> np.ndarray:
    """Mirror columns: pixel (r, c) -> (r, W-1-c)."""
    return np.ascontiguousarray(np.asarray(img)[:, ::-1])


def apply_lung_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out non-lung pixels (elementwise product with a binary mask)."""
    img = check_image(img)
    mask = check_mask(mask, image=img)
    return img * mask


def threshold_segmenter(img: np.ndarray, threshold: float = 0.4) -> np.ndarray:
    """Stand-in lung segmenter: bright pixels (above threshold) become lung.

    Synthetic images render lung interiors brighter than everything else, so
    a plain threshold recovers the lung field.
    """
    img = check_image(img)
    if not 0.0 < threshold < 1.0:
        raise InputError(f"threshold must be in (0, 1), got {threshold}")
    return (img > threshold).astype(img.dtype)


def _augment_view(img: np.ndarray, mask: np.ndarray | None, do_mask: bool,
                  cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    view = apply_lung_mask(img, mask) if do_mask else img
    view = random_resized_crop(view, cfg, rng)
    if cfg.flip_prob > 0 and rng.uniform() < cfg.flip_prob:
        view = horizontal_flip(view)
    return view


def make_positive_pair(img: np.ndarray, mask: np.ndarray | None,
                       cfg: AugmentConfig,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Produce two independently augmented views of one image.

    Per view the draw order is: mask decision, crop draws, flip decision.
    With ``paired_mask`` the first view is always masked and the second
    never is.
    """
    img = check_image(img)
    if mask is not None:
        mask = check_mask(mask, image=img)

    def decide(first: bool) -> bool:
        if mask is None:
            return False
        if cfg.paired_mask:
            return first
        if cfg.mask_prob <= 0:
            return False
        return bool(rng.uniform() < cfg.mask_prob)

    v1 = _augment_view(img, mask, decide(True), cfg, rng)
    v2 = _augment_view(img, mask, decide(False), cfg, rng)
    return v1, v2
