"""Preprocessing chain from raw CSI amplitude to a fixed-size image.

Pipeline order is fixed and enforced by the single public entry point:

    flatten -> (temporal warp, training only) -> fix length -> resize -> standardize

The evaluation-mode pipeline is a pure function: identical inputs yield
bit-identical images.  Temporal warping is the only stochastic element and
is driven exclusively by a caller-supplied numpy Generator, so concurrent
use is safe as long as each invocation owns its generator.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .data import CSI_GRID_SHAPE, NUM_CHANNELS, CsiSample

INTERPOLATIONS = ("bicubic", "bilinear")

DEFAULT_TARGET_LENGTH = 3000
DEFAULT_RESOLUTION = 270
DEFAULT_WARP_PROBABILITY = 0.5
DEFAULT_WARP_SCALE_RANGE = (0.95, 1.05)


def flatten_spatial(amplitude: np.ndarray) -> np.ndarray:
    """Flatten the antenna-pair and subcarrier axes into 270 columns.

    Column order is row-major over (tx, rx, subcarrier), subcarrier fastest:
    out[t, 30*(3*tx + rx) + sc] = amplitude[t, tx, rx, sc].
    """
    amplitude = np.asarray(amplitude)
    if amplitude.ndim != 4 or amplitude.shape[1:] != CSI_GRID_SHAPE:
        raise ValueError(
            f"expected amplitude of shape (T, 3, 3, 30), got {amplitude.shape}"
        )
    if not np.isfinite(amplitude).all():
        raise ValueError("amplitude contains non-finite values")
    return amplitude.reshape(amplitude.shape[0], NUM_CHANNELS)


def temporal_warp(
    matrix: np.ndarray,
    rng: np.random.Generator,
    probability: float = DEFAULT_WARP_PROBABILITY,
    scale_range: tuple[float, float] = DEFAULT_WARP_SCALE_RANGE,
    enabled: bool = True,
) -> np.ndarray:
    """Training-time augmentation: resample the time axis by a random factor.

    With `probability`, draws a scale s uniformly from `scale_range` and
    resamples to round(T*s) rows via per-column linear interpolation;
    otherwise the input passes through unchanged.  The outcome is fully
    determined by the generator state.
    """
    if not enabled:
        raise ValueError("temporal_warp called with warping disabled (eval mode)")
    if scale_range[0] <= 0:
        raise ValueError(f"warp scale range must be positive, got {scale_range}")
    if rng.random() >= probability:
        return matrix
    scale = rng.uniform(*scale_range)
    return _resample_rows(matrix, int(round(matrix.shape[0] * scale)))


def _resample_rows(matrix: np.ndarray, new_rows: int) -> np.ndarray:
    rows = matrix.shape[0]
    if new_rows == rows:
        return matrix
    positions = np.linspace(0.0, rows - 1, max(new_rows, 1))
    lower = np.floor(positions).astype(np.int64)
    upper = np.minimum(lower + 1, rows - 1)
    frac = (positions - lower)[:, None]
    out = matrix[lower] * (1.0 - frac) + matrix[upper] * frac
    return out.astype(matrix.dtype, copy=False)


def fix_length(matrix: np.ndarray, target_length: int) -> np.ndarray:
    """Truncate or reflect-pad the time axis to exactly `target_length` rows.

    Padding reflects about the final row without repeating it (numpy's
    "reflect" convention), so a matrix ending ... a, b, c continues c-1 rows
    as b, a, ...
    """
    if target_length < 1:
        raise ValueError("target_length must be >= 1")
    rows = matrix.shape[0]
    if rows == 0:
        raise ValueError("cannot fix the length of an empty matrix")
    if rows >= target_length:
        return matrix[:target_length]
    return np.pad(matrix, ((0, target_length - rows), (0, 0)), mode="reflect")


def spatial_resize(
    matrix: np.ndarray,
    resolution: int = DEFAULT_RESOLUTION,
    interpolation: str = "bicubic",
) -> np.ndarray:
    """Resize a time-feature matrix to resolution x resolution.

    Anti-aliasing is enabled so downscaling does not fold high temporal
    frequencies back into the image.
    """
    out = batch_resize(matrix[None], resolution, interpolation)
    return out[0]


def batch_resize(
    matrices: np.ndarray,
    resolution: int = DEFAULT_RESOLUTION,
    interpolation: str = "bicubic",
) -> np.ndarray:
    """Resize a stack of equally-sized matrices in one call, shape (n, R, R)."""
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    arr = np.ascontiguousarray(matrices, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected (n, T, C) input, got shape {arr.shape}")
    with torch.no_grad():
        tensor = torch.from_numpy(arr)[:, None]
        resized = F.interpolate(
            tensor,
            size=(resolution, resolution),
            mode=interpolation,
            align_corners=False,
            antialias=True,
        )
    return resized[:, 0].numpy()


def standardize_image(image: np.ndarray) -> np.ndarray:
    """Per-sample zero mean, unit variance; a (near-)constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float32)
    mean = image.mean()
    var = image.var()
    if var < 1e-12:
        return np.zeros_like(image)
    return (image - mean) / np.sqrt(var)


class CsiImageTransformer(BaseEstimator, TransformerMixin):
    """CSI amplitude -> single-channel image, as a scikit-learn transformer.

    `transform` runs the deterministic evaluation pipeline (no warping,
    regardless of `warp_enabled`).  The training loop uses
    `transform_training`, which applies temporal warping when enabled and
    draws from the generator it is handed.

    Parameters
    ----------
    target_length : packet count every sample is truncated/reflect-padded to.
    resolution : output image side length (square).
    interpolation : "bicubic" or "bilinear".
    warp_probability, warp_scale_range, warp_enabled : training-time
        temporal-warp augmentation controls.
    standardize : per-sample zero-mean unit-variance normalisation.
    """

    def __init__(
        self,
        target_length: int = DEFAULT_TARGET_LENGTH,
        resolution: int = DEFAULT_RESOLUTION,
        interpolation: str = "bicubic",
        warp_probability: float = DEFAULT_WARP_PROBABILITY,
        warp_scale_range: tuple[float, float] = DEFAULT_WARP_SCALE_RANGE,
        warp_enabled: bool = True,
        standardize: bool = True,
    ):
        self.target_length = target_length
        self.resolution = resolution
        self.interpolation = interpolation
        self.warp_probability = warp_probability
        self.warp_scale_range = warp_scale_range
        self.warp_enabled = warp_enabled
        self.standardize = standardize

    def fit(self, X=None, y=None):
        """Stateless; present for pipeline compatibility."""
        self._check_params()
        return self

    def _check_params(self) -> None:
        if self.target_length < 1:
            raise ValueError("target_length must be >= 1")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if self.interpolation not in INTERPOLATIONS:
            raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
        lo, hi = self.warp_scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"invalid warp_scale_range {self.warp_scale_range}")
        if not 0.0 <= self.warp_probability <= 1.0:
            raise ValueError("warp_probability must lie in [0, 1]")

    @staticmethod
    def _amplitude_of(x) -> np.ndarray:
        return x.amplitude if isinstance(x, CsiSample) else np.asarray(x)

    def _finish(self, flats: list[np.ndarray]) -> np.ndarray:
        fixed = np.stack([fix_length(f, self.target_length) for f in flats])
        images = batch_resize(fixed, self.resolution, self.interpolation)
        if self.standardize:
            images = np.stack([standardize_image(img) for img in images])
        return images

    def transform(self, X) -> np.ndarray:
        """Evaluation pipeline for a sequence of samples; returns (n, R, R) float32."""
        self._check_params()
        flats = [flatten_spatial(self._amplitude_of(x)) for x in X]
        return self._finish(flats)

    def transform_training(self, X, rng: np.random.Generator) -> np.ndarray:
        """Training pipeline: identical to `transform` plus temporal warping."""
        self._check_params()
        flats = []
        for x in X:
            flat = flatten_spatial(self._amplitude_of(x))
            if self.warp_enabled:
                flat = temporal_warp(
                    flat, rng, self.warp_probability, self.warp_scale_range
                )
            flats.append(flat)
        return self._finish(flats)

    def transform_one(self, x) -> np.ndarray:
        """Evaluation pipeline for a single sample; returns (R, R) float32."""
        return self.transform([x])[0]
