"""Iris-centred square crops and training-time augmentation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image, ImageEnhance

from .errors import MissingAnnotationError

MODEL_SIDES = (224, 299)

Circle = Sequence[float]


class IrisDetector(Protocol):
    """Locates the iris outer boundary; returns ``(cx, cy, r)`` in pixels."""

    def __call__(self, image: np.ndarray) -> Circle: ...


@dataclass(frozen=True)
class CropSpec:
    target_side: int = 224
    margin_factor: float = 1.1

    def __post_init__(self) -> None:
        if self.target_side not in MODEL_SIDES:
            raise ValueError(f"target_side must be one of {MODEL_SIDES}, got {self.target_side}")
        if self.margin_factor < 1:
            raise ValueError(f"margin_factor must be >= 1, got {self.margin_factor}")


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    rotation_range: float = 30.0
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    sharpness_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must lie in [0, 1]")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be >= 0")
        for name in ("brightness_jitter", "contrast_jitter", "sharpness_jitter"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, seed)


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def load_image(path: str | Path, band: str) -> np.ndarray:
    """Read an image as uint8: ``(H, W)`` for NIR, ``(H, W, 3)`` for RGB."""
    with Image.open(path) as im:
        im = im.convert("L" if band == "NIR" else "RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def save_png(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8))


def resize_square(image: np.ndarray, side: int) -> np.ndarray:
    if image.shape[0] == side and image.shape[1] == side:
        return image.copy()
    out = _to_pil(image).resize((side, side), resample=Image.BILINEAR)
    return np.asarray(out, dtype=np.uint8)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------


def crop_window(image: np.ndarray, circle: Circle, margin_factor: float = 1.1) -> np.ndarray:
    """Square window of side ``margin_factor * 2r`` centred on the iris.

    Parts of the window outside the image replicate the nearest edge pixel.
    """
    cx, cy, r = (float(v) for v in circle)
    if not r > 0:
        raise ValueError(f"iris radius must be > 0, got {r}")
    height, width = image.shape[:2]
    if not (0 <= cx < width and 0 <= cy < height):
        raise ValueError(f"iris centre ({cx}, {cy}) outside {width}x{height} image")

    side = max(1, int(round(margin_factor * 2 * r)))
    x0 = int(math.floor(cx - side / 2 + 0.5))
    y0 = int(math.floor(cy - side / 2 + 0.5))
    x1, y1 = x0 + side, y0 + side

    pad_left, pad_top = max(0, -x0), max(0, -y0)
    pad_right, pad_bottom = max(0, x1 - width), max(0, y1 - height)
    window = image[max(0, y0) : min(height, y1), max(0, x0) : min(width, x1)]
    if pad_left or pad_top or pad_right or pad_bottom:
        pad = [(pad_top, pad_bottom), (pad_left, pad_right)] + [(0, 0)] * (image.ndim - 2)
        window = np.pad(window, pad, mode="edge")
    return window


def crop_iris(
    image: np.ndarray,
    circle: Circle | None,
    spec: CropSpec = CropSpec(),
    detector: IrisDetector | None = None,
) -> np.ndarray:
    """Crop around the iris outer boundary and resize to the model input side."""
    if circle is None:
        if detector is None:
            raise MissingAnnotationError(
                "no iris circle for this image: add iris_cx/iris_cy/iris_r to the "
                "manifest or pass an iris detector"
            )
        circle = detector(image)
    window = crop_window(image, circle, spec.margin_factor)
    return resize_square(window, spec.target_side)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def sample_rng(global_seed: int, sample_key: str, epoch: int) -> np.random.Generator:
    """Per-sample RNG so parallel loaders reproduce single-process results."""
    digest = hashlib.sha256(f"{global_seed}|{sample_key}|{epoch}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _rotate_edge(image: np.ndarray, angle: float) -> np.ndarray:
    height, width = image.shape[:2]
    # enough border that no rotated corner samples outside the padded image
    pad = int(math.ceil(0.5 * math.hypot(height, width) - 0.5 * min(height, width))) + 2
    spec = [(pad, pad), (pad, pad)] + [(0, 0)] * (image.ndim - 2)
    padded = np.pad(image, spec, mode="edge")
    rotated = _to_pil(padded).rotate(angle, resample=Image.BILINEAR)
    return np.asarray(rotated, dtype=np.uint8)[pad : pad + height, pad : pad + width]


def augment(image: np.ndarray, policy: AugmentPolicy, draw: np.random.Generator) -> np.ndarray:
    """Random flip, rotation and brightness/contrast/sharpness jitter.

    The same number of values is drawn from ``draw`` regardless of the policy,
    so two policies consume RNG streams identically.
    """
    u_flip, u_rot, u_bri, u_con, u_sha = draw.uniform(size=5)

    out = np.asarray(image, dtype=np.uint8)
    if u_flip < policy.hflip_prob:
        out = out[:, ::-1]

    angle = (2 * u_rot - 1) * policy.rotation_range
    if angle != 0:
        out = _rotate_edge(out, angle)

    factors = [
        (ImageEnhance.Brightness, 1 + (2 * u_bri - 1) * policy.brightness_jitter),
        (ImageEnhance.Contrast, 1 + (2 * u_con - 1) * policy.contrast_jitter),
        (ImageEnhance.Sharpness, 1 + (2 * u_sha - 1) * policy.sharpness_jitter),
    ]
    if any(f != 1.0 for _, f in factors):
        pil = _to_pil(out)
        for enhancer, factor in factors:
            if factor != 1.0:
                pil = enhancer(pil).enhance(factor)
        out = np.asarray(pil, dtype=np.uint8)
    return np.ascontiguousarray(out)
