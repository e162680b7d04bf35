"""Quantify the three characteristic image distortions and their distributions.

The measurands are: Tenenbaum's gradient focus measure (blur), the standard
deviation of background intensities after plane removal (noise), and a
1-1-polynomial plane fit of the background intensities (nonuniform
illumination). Corpus-level estimates are kept as empirical sample sets and
resampled uniformly when synthesizing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, SingularFitError
from .raster import BinaryMask, GrayImage, erode, gaussian_blur, sobel_gradients


@dataclass
class IlluminationParams:
    """Plane p00 + p10*x + p01*y over pixel coordinates (x = column, y = row)."""

    p00: float
    p10: float
    p01: float

    def evaluate(self, width: int, height: int, clip: bool = False) -> np.ndarray:
        x = np.arange(width, dtype=np.float64)
        y = np.arange(height, dtype=np.float64)
        plane = self.p00 + self.p10 * x[None, :] + self.p01 * y[:, None]
        if not np.all(np.isfinite(plane)):
            raise ValueError("illumination plane is not finite over the image")
        if clip:
            plane = np.clip(plane, 0.0, 1.0)
        return plane

    def as_list(self) -> list[float]:
        return [self.p00, self.p10, self.p01]


@dataclass
class DistortionDistributions:
    """Empirical samples of the distortion parameters, resampled uniformly."""

    blur_sigma: np.ndarray
    noise_sigma: np.ndarray
    illum: np.ndarray  # (m, 3) rows of (p00, p10, p01)

    def __post_init__(self):
        self.blur_sigma = np.atleast_1d(np.asarray(self.blur_sigma, dtype=np.float64))
        self.noise_sigma = np.atleast_1d(np.asarray(self.noise_sigma, dtype=np.float64))
        self.illum = np.asarray(self.illum, dtype=np.float64).reshape(-1, 3)
        if self.blur_sigma.size == 0 or self.noise_sigma.size == 0 or self.illum.shape[0] == 0:
            raise ValueError("distortion distributions need at least one sample each")
        if np.any(self.blur_sigma < 0) or np.any(self.noise_sigma < 0):
            raise ValueError("sampled sigmas must be >= 0")

    def sample(self, rng: np.random.Generator) -> tuple[float, float, IlluminationParams]:
        b = float(self.blur_sigma[rng.integers(self.blur_sigma.size)])
        n = float(self.noise_sigma[rng.integers(self.noise_sigma.size)])
        row = self.illum[rng.integers(self.illum.shape[0])]
        return b, n, IlluminationParams(float(row[0]), float(row[1]), float(row[2]))

    def to_json(self) -> str:
        doc = {
            "blur_sigma": self.blur_sigma.tolist(),
            "noise_sigma": self.noise_sigma.tolist(),
            "illum": self.illum.tolist(),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DistortionDistributions":
        doc = json.loads(text)
        return cls(
            np.asarray(doc["blur_sigma"]),
            np.asarray(doc["noise_sigma"]),
            np.asarray(doc["illum"]),
        )

    @classmethod
    def default(cls) -> "DistortionDistributions":
        """Mild, documented defaults for use without a corpus analysis."""
        blur = np.linspace(0.4, 2.0, 33)
        noise = np.linspace(0.004, 0.03, 27)
        slopes = (-2e-4, -1e-4, 0.0, 1e-4, 2e-4)
        rows = []
        for i, p00 in enumerate(np.linspace(0.90, 1.0, 25)):
            rows.append((p00, slopes[i % 5], slopes[(i // 5) % 5]))
        return cls(blur, noise, np.asarray(rows))


def tenenbaum_focus(img: GrayImage) -> float:
    """Mean over pixels of gx^2 + gy^2 from the Sobel gradients."""
    gx, gy = sobel_gradients(img)
    return float(np.mean(gx * gx + gy * gy))


def _plane_design(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.column_stack((np.ones(xs.size), xs.astype(np.float64), ys.astype(np.float64)))


def _plane_lstsq(xs, ys, values):
    a = _plane_design(xs, ys)
    coef, _, rank, _ = np.linalg.lstsq(a, values, rcond=None)
    return coef, rank, a


def noise_std(img: GrayImage, background_mask: BinaryMask) -> float:
    """Sample std of the selected pixels after removing the fitted plane.

    With fewer than 3 non-collinear pixels only the mean is removed.
    """
    if background_mask.bits.shape != img.pixels.shape:
        raise ValueError("mask dimensions must match the image")
    ys, xs = np.nonzero(background_mask.bits)
    if xs.size < 2:
        raise ValueError("mask must select at least 2 pixels")
    values = img.pixels[ys, xs]
    coef, rank, a = _plane_lstsq(xs, ys, values)
    if rank == 3:
        residuals = values - a @ coef
    else:
        residuals = values - values.mean()
    return float(np.std(residuals, ddof=1))


def illumination_fit(img: GrayImage, background_mask: BinaryMask) -> IlluminationParams:
    """Least-squares plane over the selected pixels."""
    if background_mask.bits.shape != img.pixels.shape:
        raise ValueError("mask dimensions must match the image")
    ys, xs = np.nonzero(background_mask.bits)
    if xs.size < 3:
        raise ValueError("mask must select at least 3 pixels")
    values = img.pixels[ys, xs]
    coef, rank, _ = _plane_lstsq(xs, ys, values)
    if rank < 3:
        raise SingularFitError("selected pixels are collinear; plane fit is singular")
    return IlluminationParams(float(coef[0]), float(coef[1]), float(coef[2]))


@dataclass
class BlurCalibration:
    """Monotone map between the focus measure and the blur sigma.

    Built by blurring a designated sharp reference image over a sigma grid;
    inverted by linear interpolation, clamped at the grid ends.
    """

    sigmas: np.ndarray
    focus: np.ndarray

    def invert(self, focus_value: float) -> float:
        # focus decreases with sigma; interpolate on the reversed axes
        xp = self.focus[::-1]
        fp = self.sigmas[::-1]
        return float(np.interp(focus_value, xp, fp))

    def to_json(self) -> str:
        return json.dumps(
            {"sigmas": self.sigmas.tolist(), "focus": self.focus.tolist()},
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BlurCalibration":
        doc = json.loads(text)
        return cls(np.asarray(doc["sigmas"], dtype=np.float64),
                   np.asarray(doc["focus"], dtype=np.float64))


def build_blur_calibration(reference: GrayImage, sigmas) -> BlurCalibration:
    sig = np.asarray(sigmas, dtype=np.float64)
    if sig.size < 2:
        raise ValueError("sigma grid needs at least 2 points")
    if np.any(np.diff(sig) <= 0):
        raise ValueError("sigma grid must be strictly increasing")
    if sig[0] < 0:
        raise ValueError("sigmas must be >= 0")
    focus = np.array([tenenbaum_focus(gaussian_blur(reference, s)) for s in sig])
    if np.any(np.diff(focus) >= 0):
        raise CalibrationError("focus measure is not strictly decreasing over the grid")
    return BlurCalibration(sig, focus)


def background_mask_from_segmentation(mask: BinaryMask) -> BinaryMask:
    """Complement of the segmentation mask, eroded by 2 px to drop halos."""
    bg = BinaryMask(~mask.bits)
    return erode(erode(bg, "cross"), "cross")


def estimate_distortion_distributions(
    corpus: list[GrayImage],
    masks: list[BinaryMask],
    calibration: BlurCalibration,
) -> DistortionDistributions:
    """Collect per-image measurands over a corpus.

    ``masks`` are foreground segmentation masks; the background used for the
    noise and illumination measurands is their eroded complement.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must not be empty")
    if len(corpus) != len(masks):
        raise ValueError("corpus and masks must have the same length")
    blurs, noises, planes = [], [], []
    for img, mask in zip(corpus, masks):
        bg = background_mask_from_segmentation(mask)
        blurs.append(calibration.invert(tenenbaum_focus(img)))
        noises.append(noise_std(img, bg))
        planes.append(illumination_fit(img, bg).as_list())
    return DistortionDistributions(np.asarray(blurs), np.asarray(noises), np.asarray(planes))
