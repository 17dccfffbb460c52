"""The black-box photo-finishing pipeline: nine sliders, six operators.

Parameter vectors are flat arrays in the order of ``PARAM_NAMES``; every
slider lives in ``[-1, 1]`` and zero is the neutral setting.  Each operator
receives the slider already mapped to its physical range (stops, deltas).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image import luminance

__all__ = [
    "PARAM_NAMES",
    "N_PARAMS",
    "OperatorSpec",
    "OPERATORS",
    "CountingPipeline",
    "as_params",
    "physical_values",
    "apply_pipeline",
    "apply_exposure",
    "apply_color_balance",
    "apply_saturation",
    "apply_contrast",
    "apply_tone_mapping",
    "apply_texture",
    "gauss_blur",
    "smoothstep",
]

PARAM_NAMES = (
    "exposure",
    "wb_r",
    "wb_g",
    "wb_b",
    "saturation",
    "contrast",
    "highlights",
    "shadows",
    "texture",
)
N_PARAMS = len(PARAM_NAMES)

TEXTURE_SIGMA = 2.0


@dataclass(frozen=True)
class OperatorSpec:
    name: str
    param_slice: tuple
    scale: tuple  # slider -> physical value multiplier, one per slider

    def physical(self, params: np.ndarray) -> np.ndarray:
        return params[list(self.param_slice)] * np.asarray(self.scale)


OPERATORS = (
    OperatorSpec("exposure", (0,), (2.0,)),
    OperatorSpec("color_balance", (1, 2, 3), (0.75, 0.75, 0.75)),
    OperatorSpec("saturation", (4,), (1.0,)),
    OperatorSpec("contrast", (5,), (0.6,)),
    OperatorSpec("tone_mapping", (6, 7), (1.0, 1.0)),
    OperatorSpec("texture", (8,), (1.0,)),
)


def as_params(params) -> np.ndarray:
    """Validate a 9-slider vector and clamp it into ``[-1, 1]``.

    Non-finite entries raise instead of being clamped.
    """
    p = np.asarray(params, dtype=np.float64).reshape(-1)
    if p.shape != (N_PARAMS,):
        raise ValueError(f"expected {N_PARAMS} parameters, got {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite pipeline parameter: {p.tolist()}")
    return np.clip(p, -1.0, 1.0)


def physical_values(params) -> dict:
    p = as_params(params)
    return {op.name: op.physical(p) for op in OPERATORS}


def smoothstep(edge0: float, edge1: float, x):
    t = np.clip((np.asarray(x) - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def gauss_blur(img, sigma: float = TEXTURE_SIGMA) -> np.ndarray:
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma=(sigma, sigma, 0), mode="reflect")


# Every operator returns the input unchanged for a zero-strength argument so
# that the neutral parameter vector is a bit-exact identity.


def apply_exposure(img, e: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if e == 0:
        return img.copy()
    return np.clip(img * 2.0**e, 0.0, 1.0)


def apply_color_balance(img, gains) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)
    if not np.any(gains):
        return img.copy()
    return np.clip(img * 2.0**gains, 0.0, 1.0)


def apply_saturation(img, s: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if s == 0:
        return img.copy()
    y = luminance(img)[..., None]
    return np.clip(y + (img - y) * (1.0 + s), 0.0, 1.0)


def apply_contrast(img, c: float) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if c == 0:
        return img.copy()
    return np.clip(0.5 + (img - 0.5) * (1.0 + c), 0.0, 1.0)


def apply_tone_mapping(img, h: float, d: float) -> np.ndarray:
    """Highlight/shadow recovery on the luma plane, with RGB rescaled to match."""
    img = np.asarray(img, dtype=np.float64)
    if h == 0 and d == 0:
        return img.copy()
    y = luminance(img)
    m_hi = smoothstep(0.5, 1.0, y)
    m_sh = smoothstep(0.5, 1.0, 1.0 - y)
    y_new = y + 0.5 * h * m_hi * (1.0 - y) + 0.5 * d * m_sh * y
    ratio = y_new / np.maximum(y, 1e-6)
    return np.clip(img * ratio[..., None], 0.0, 1.0)


def apply_texture(img, x: float, sigma: float = TEXTURE_SIGMA) -> np.ndarray:
    """Unsharp masking for ``x > 0``; ``x = -1`` yields the blurred image."""
    img = np.asarray(img, dtype=np.float64)
    if x == 0:
        return img.copy()
    blur = gauss_blur(img, sigma)
    if x == -1:
        return np.clip(blur, 0.0, 1.0)
    return np.clip(img + x * (img - blur), 0.0, 1.0)


def apply_pipeline(img, params) -> np.ndarray:
    """Render ``img`` through all six operators in their fixed order."""
    p = as_params(params)
    out = np.asarray(img, dtype=np.float64)
    for op in OPERATORS:
        out = _APPLY[op.name](out, *op.physical(p))
    return out


_APPLY = {
    "exposure": apply_exposure,
    "color_balance": lambda img, r, g, b: apply_color_balance(img, (r, g, b)),
    "saturation": apply_saturation,
    "contrast": apply_contrast,
    "tone_mapping": apply_tone_mapping,
    "texture": apply_texture,
}


class CountingPipeline:
    """Wraps a pipeline callable and counts every query made through it."""

    def __init__(self, fn=apply_pipeline):
        self.fn = fn
        self.calls = 0

    def __call__(self, img, params):
        self.calls += 1
        return self.fn(img, params)

    def reset(self) -> None:
        self.calls = 0
