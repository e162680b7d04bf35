"""Synthesis of TEM-like agglomerate images with exact ground truth.

The pipeline per image: build a 3-d arrangement of tangent spheres, project
each sphere to a radially shaded footprint via the transmission model,
optionally deform each footprint while preserving its projected area, compose
transmittances multiplicatively, then apply blur, nonuniform illumination and
Gaussian noise drawn from the configured distortion distributions.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .distortions import DistortionDistributions, IlluminationParams
from .errors import (
    DeformationFailedError,
    PackingFailedError,
    RenderOverflowError,
)
from .raster import BinaryMask, GrayImage, connected_components, gaussian_blur
from . import image_io

# transmittance below this marks a pixel as belonging to a footprint
FOREGROUND_TRANSMITTANCE = 0.995
RENDER_MARGIN = 5  # required free pixels around the projection
_CONTACT_EPS = 1e-6
_HARMONICS = (2, 3, 4, 5)
_AMP_LOW, _AMP_HIGH = 0.05, 0.15


def transmission_ratio(radius: float, r: float, c_t: float) -> float:
    """Transmission through a sphere of radius R at projected radius r.

    exp(-2 * c_T * sqrt(R^2 - r^2)): the chord length through the sphere is
    2*sqrt(R^2 - r^2) and attenuation is exponential in path length.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if r < 0 or r > radius:
        raise ValueError("projected radius must satisfy 0 <= r <= R")
    if c_t < 0:
        raise ValueError("transmission coefficient must be >= 0")
    return float(np.exp(-2.0 * c_t * math.sqrt(radius * radius - r * r)))


@dataclass
class SphereSpec:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be > 0")
        self.center = tuple(float(c) for c in self.center)


@dataclass
class AgglomerateSpec:
    spheres: list[SphereSpec]
    c_t: float
    deformation_degree: float

    def __post_init__(self):
        if not self.spheres:
            raise ValueError("an agglomerate needs at least one sphere")
        if self.c_t < 0:
            raise ValueError("transmission coefficient must be >= 0")
        if not 0.0 <= self.deformation_degree <= 1.0:
            raise ValueError("deformation degree must be in [0, 1]")
        centers = np.array([s.center for s in self.spheres])
        radii = np.array([s.radius for s in self.spheres])
        for i in range(1, len(self.spheres)):
            d = np.linalg.norm(centers[:i] - centers[i], axis=1)
            if np.any(d < radii[:i] + radii[i] - _CONTACT_EPS):
                raise ValueError(f"spheres overlap (sphere {i})")
            if not np.any(d <= radii[:i] + radii[i] + _CONTACT_EPS):
                raise ValueError(f"sphere {i} does not touch any earlier sphere")


@dataclass
class DiskFootprint:
    """Projected footprint of a sphere: a disk, optionally deformed.

    The rim radius is rho(theta) = rho0 * (1 + degree * sum_k a_k*cos(k*theta
    + phi_k)) for harmonics k = 2..5. The chord model treats rho0 as the
    sphere radius, so the transmittance at relative radius u = d / rho(theta)
    is exp(-2 * c_T * rho0 * sqrt(1 - u^2)).
    """

    cx: float
    cy: float
    rho0: float
    degree: float = 0.0
    amps: np.ndarray = field(default_factory=lambda: np.zeros(len(_HARMONICS)))
    phases: np.ndarray = field(default_factory=lambda: np.zeros(len(_HARMONICS)))

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)

    @property
    def max_radius(self) -> float:
        return self.rho0 * (1.0 + self.degree * float(np.abs(self.amps).sum()))

    def rim_radius(self, theta: np.ndarray) -> np.ndarray:
        if self.degree == 0.0 or not self.amps.any():
            return np.full_like(np.asarray(theta, dtype=np.float64), self.rho0)
        mod = np.zeros_like(theta)
        for k, a, ph in zip(_HARMONICS, self.amps, self.phases):
            mod += a * np.cos(k * theta + ph)
        return self.rho0 * (1.0 + self.degree * mod)

    def transmittance_patch(self, xs: np.ndarray, ys: np.ndarray, c_t: float):
        """Transmittance over the pixel grid xs (columns) x ys (rows)."""
        dx = xs[None, :] - self.cx
        dy = ys[:, None] - self.cy
        d = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        rim = self.rim_radius(theta)
        u = d / rim
        inside = u < 1.0
        chord = np.zeros_like(u)
        chord[inside] = 2.0 * self.rho0 * np.sqrt(1.0 - u[inside] ** 2)
        return np.exp(-c_t * chord), inside

    def pixel_area(self) -> int:
        """Foreground pixel count on the integer grid around the center."""
        m = int(math.ceil(self.max_radius)) + 2
        xs = np.arange(math.floor(self.cx) - m, math.ceil(self.cx) + m + 1, dtype=np.float64)
        ys = np.arange(math.floor(self.cy) - m, math.ceil(self.cy) + m + 1, dtype=np.float64)
        dx = xs[None, :] - self.cx
        dy = ys[:, None] - self.cy
        d = np.hypot(dx, dy)
        theta = np.arctan2(dy, dx)
        return int(np.count_nonzero(d < self.rim_radius(theta)))


def deform_projection(footprint: DiskFootprint, degree: float,
                      rng: np.random.Generator) -> DiskFootprint:
    """Deform a circular footprint, preserving its pixel area within 2 percent.

    Harmonic amplitudes are drawn in +-[0.05, 0.15] and the base radius is
    rescaled (analytically, then iteratively against the pixel count) until
    the deformed area matches the undeformed one. Raises
    DeformationFailedError after 20 rescale iterations; the caller resamples.
    """
    if not 0.0 <= degree <= 1.0:
        raise ValueError("degree must be in [0, 1]")
    if degree == 0.0:
        return replace(footprint, degree=0.0,
                       amps=np.zeros(len(_HARMONICS)), phases=np.zeros(len(_HARMONICS)))
    signs = rng.choice((-1.0, 1.0), size=len(_HARMONICS))
    amps = signs * rng.uniform(_AMP_LOW, _AMP_HIGH, size=len(_HARMONICS))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(_HARMONICS))
    target = replace(footprint, degree=0.0, amps=np.zeros(len(_HARMONICS)),
                     phases=np.zeros(len(_HARMONICS))).pixel_area()
    # first-order area correction: the harmonic modulation inflates the
    # continuous area by a factor 1 + degree^2 * sum(a_k^2) / 2
    scale = 1.0 / math.sqrt(1.0 + degree * degree * float(np.sum(amps * amps)) / 2.0)
    for _ in range(20):
        candidate = replace(footprint, rho0=footprint.rho0 * scale,
                            degree=degree, amps=amps, phases=phases)
        area = candidate.pixel_area()
        if abs(area - target) / target <= 0.02:
            return candidate
        scale *= math.sqrt(target / area)
    raise DeformationFailedError("area-preserving rescale did not converge")


def build_agglomerate(
    n_primaries: int,
    radii,
    rng: np.random.Generator,
    c_t: float = 0.1,
    deformation_degree: float = 0.0,
    max_rejections: int = 1000,
) -> AgglomerateSpec:
    """Join spheres at random surface points, avoiding overlaps.

    The first sphere sits at the origin; each subsequent sphere is placed
    tangent to a uniformly chosen existing sphere in a uniformly chosen
    direction, redrawing on overlap. Raises PackingFailedError once a single
    sphere accumulates ``max_rejections`` rejections.
    """
    radii = np.asarray(radii, dtype=np.float64)
    if not 1 <= n_primaries <= 10:
        raise ValueError("n_primaries must be in 1..10")
    if radii.size != n_primaries:
        raise ValueError("need exactly one radius per primary")
    if np.any(radii <= 0):
        raise ValueError("radii must be > 0")
    centers = np.zeros((n_primaries, 3))
    for i in range(1, n_primaries):
        placed = False
        for _ in range(max_rejections):
            j = int(rng.integers(i))
            direction = rng.normal(size=3)
            norm = np.linalg.norm(direction)
            if norm < 1e-12:
                continue
            direction /= norm
            candidate = centers[j] + (radii[j] + radii[i]) * direction
            d = np.linalg.norm(centers[:i] - candidate, axis=1)
            if np.all(d >= radii[:i] + radii[i] - _CONTACT_EPS):
                centers[i] = candidate
                placed = True
                break
        if not placed:
            raise PackingFailedError(f"sphere {i} exceeded the rejection budget")
    spheres = [SphereSpec(tuple(centers[i]), float(radii[i])) for i in range(n_primaries)]
    return AgglomerateSpec(spheres, c_t, deformation_degree)


@dataclass
class RenderConfig:
    width: int = 256
    height: int = 256
    area_range: tuple[float, float] = (500.0, 6500.0)
    distortions: DistortionDistributions = field(
        default_factory=DistortionDistributions.default
    )
    background: float = 1.0
    ct_range: tuple[float, float] = (0.02, 0.2)

    def __post_init__(self):
        a_min, a_max = self.area_range
        if not (0 < a_min < a_max):
            raise ValueError("area range must satisfy 0 < A_min < A_max")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background intensity must be in [0, 1]")


@dataclass
class RenderResult:
    image: GrayImage
    areas: list[float]
    mask: BinaryMask  # clean foreground before distortions


def _make_footprints(spec: AgglomerateSpec, rng: np.random.Generator | None):
    footprints = []
    for sphere in spec.spheres:
        fp = DiskFootprint(sphere.center[0], sphere.center[1], sphere.radius)
        if spec.deformation_degree > 0.0:
            if rng is None:
                raise ValueError("deformation requires an rng")
            fp = deform_projection(fp, spec.deformation_degree, rng)
        footprints.append(fp)
    return footprints


def render_full(spec: AgglomerateSpec, cfg: RenderConfig,
                rng: np.random.Generator | None = None) -> RenderResult:
    """Clean render plus the per-primary ground-truth areas and mask."""
    footprints = _make_footprints(spec, rng)
    lo_x = min(fp.cx - fp.max_radius for fp in footprints)
    hi_x = max(fp.cx + fp.max_radius for fp in footprints)
    lo_y = min(fp.cy - fp.max_radius for fp in footprints)
    hi_y = max(fp.cy + fp.max_radius for fp in footprints)
    # integer shift keeps each footprint's sub-pixel phase, so canvas pixel
    # counts match the areas measured during deformation exactly
    shift_x = round((cfg.width - 1) / 2.0 - (lo_x + hi_x) / 2.0)
    shift_y = round((cfg.height - 1) / 2.0 - (lo_y + hi_y) / 2.0)
    if (lo_x + shift_x < RENDER_MARGIN or hi_x + shift_x > cfg.width - 1 - RENDER_MARGIN
            or lo_y + shift_y < RENDER_MARGIN or hi_y + shift_y > cfg.height - 1 - RENDER_MARGIN):
        raise RenderOverflowError(
            f"projection spans {hi_x - lo_x:.0f}x{hi_y - lo_y:.0f} px; "
            f"canvas is {cfg.width}x{cfg.height} with margin {RENDER_MARGIN}"
        )
    total = np.ones((cfg.height, cfg.width))
    areas = []
    for fp in footprints:
        moved = replace(fp, cx=fp.cx + shift_x, cy=fp.cy + shift_y)
        m = moved.max_radius + 2.0
        x0 = max(0, int(math.floor(moved.cx - m)))
        x1 = min(cfg.width - 1, int(math.ceil(moved.cx + m)))
        y0 = max(0, int(math.floor(moved.cy - m)))
        y1 = min(cfg.height - 1, int(math.ceil(moved.cy + m)))
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        t, _ = moved.transmittance_patch(xs, ys, spec.c_t)
        areas.append(int(np.count_nonzero(t < FOREGROUND_TRANSMITTANCE)))
        total[y0 : y1 + 1, x0 : x1 + 1] *= t
    image = GrayImage(cfg.background * total)
    mask = BinaryMask(total < FOREGROUND_TRANSMITTANCE)
    return RenderResult(image, [float(a) for a in areas], mask)


def render_agglomerate(spec: AgglomerateSpec, cfg: RenderConfig,
                       rng: np.random.Generator | None = None):
    """Render to a clean image; returns (image, per-primary areas in px^2)."""
    result = render_full(spec, cfg, rng)
    return result.image, result.areas


def apply_distortions(
    img: GrayImage,
    blur_sigma: float,
    illum: IlluminationParams,
    noise_sigma: float,
    rng: np.random.Generator,
) -> GrayImage:
    """Blur, multiply by the clamped illumination plane, add noise, clamp."""
    if blur_sigma < 0 or noise_sigma < 0:
        raise ValueError("sigmas must be >= 0")
    out = gaussian_blur(img, blur_sigma).pixels
    out = out * illum.evaluate(img.width, img.height, clip=True)
    if noise_sigma > 0:
        out = out + noise_sigma * rng.standard_normal(out.shape)
    return GrayImage(np.clip(out, 0.0, 1.0))


@dataclass
class SynthLabel:
    klass: int
    primary_areas: list[float]
    c_t: float
    deform: float
    blur_sigma: float
    noise_sigma: float
    illum: IlluminationParams
    seed: int

    def to_record(self, file: str) -> dict:
        return {
            "file": file,
            "class": self.klass,
            "areas_px2": list(self.primary_areas),
            "c_T": self.c_t,
            "deform": self.deform,
            "blur_sigma": self.blur_sigma,
            "noise_sigma": self.noise_sigma,
            "illum": self.illum.as_list(),
            "seed": self.seed,
        }


class SynthSkippedError(Exception):
    """Internal: all retries for one image failed."""


def image_seed(master_seed: int, index: int) -> int:
    """Stable per-image seed derived from (master_seed, image index)."""
    return int(np.random.SeedSequence((int(master_seed), int(index))).generate_state(1, np.uint64)[0])


_AREA_TOLERANCE = 0.03  # rasterization + deformation slack on the area range


def generate_image(cfg: RenderConfig, klass: int, seed: int,
                   max_attempts: int = 10) -> tuple[GrayImage, SynthLabel]:
    """Generate one labeled image deterministically from its seed.

    Target areas, transmission coefficient, deformation degree and the
    distortion draw come from a parameter stream kept fixed across retries;
    geometry and deformation harmonics are redrawn per attempt. Raises
    SynthSkippedError when every attempt fails packing, canvas fit,
    connectivity or the area-range check.
    """
    if klass not in range(1, 7):
        raise ValueError("class must be in 1..6")
    rng_params = np.random.default_rng([seed, 0])
    n = klass if klass <= 5 else int(rng_params.integers(6, 11))
    a_min, a_max = cfg.area_range
    target_areas = rng_params.uniform(a_min, a_max, size=n)
    radii = np.sqrt(target_areas / np.pi)
    c_t = float(rng_params.uniform(*cfg.ct_range))
    degree = float(rng_params.uniform(0.0, 1.0))
    blur_sigma, noise_sigma, illum = cfg.distortions.sample(rng_params)

    for attempt in range(max_attempts):
        rng_geom = np.random.default_rng([seed, 1, attempt])
        try:
            spec = build_agglomerate(n, radii, rng_geom, c_t, degree)
            result = render_full(spec, cfg, rng_geom)
        except (PackingFailedError, RenderOverflowError, DeformationFailedError):
            continue
        labels = connected_components(result.mask)
        if labels.n_labels != 1:
            continue
        if klass <= 5:
            lo = a_min * (1.0 - _AREA_TOLERANCE)
            hi = a_max * (1.0 + _AREA_TOLERANCE)
            if any(a < lo or a > hi for a in result.areas):
                continue
        distorted = apply_distortions(
            result.image, blur_sigma, illum, noise_sigma,
            np.random.default_rng([seed, 2]),
        )
        label = SynthLabel(klass, result.areas, c_t, degree,
                           blur_sigma, noise_sigma, illum, seed)
        return distorted, label
    raise SynthSkippedError(f"image generation failed after {max_attempts} attempts")


def class_sequence(counts: dict[int, int]) -> list[int]:
    """Deterministic image index -> class assignment."""
    seq = []
    for klass in sorted(counts):
        if klass not in range(1, 7):
            raise ValueError("class ids must be in 1..6")
        if counts[klass] < 0:
            raise ValueError("counts must be >= 0")
        seq.extend([klass] * counts[klass])
    return seq


def _generate_chunk(args):
    cfg, master_seed, items, out_dir = args
    records = []
    for index, klass in items:
        seed = image_seed(master_seed, index)
        name = f"images/{index:07d}.png"
        try:
            img, label = generate_image(cfg, klass, seed)
        except SynthSkippedError:
            records.append((index, None))
            continue
        if out_dir is not None:
            image_io.write_png(img, os.path.join(out_dir, name))
        records.append((index, label.to_record(name)))
    return records


def synthesize_dataset(
    cfg: RenderConfig,
    counts: dict[int, int],
    master_seed: int,
    out_dir,
    workers: int = 1,
) -> dict:
    """Write images/NNNNNNN.png plus labels.jsonl; returns summary info.

    Output bytes are a pure function of (cfg, counts, master_seed): every
    image is seeded from (master_seed, index), so generation order and the
    worker count do not matter.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    seq = class_sequence(counts)
    items = list(enumerate(seq))
    chunk = 64
    tasks = [
        (cfg, master_seed, items[i : i + chunk], out_dir)
        for i in range(0, len(items), chunk)
    ]
    results = []
    if workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.Pool(workers) as pool:
            for part in pool.imap(_generate_chunk, tasks):
                results.extend(part)
    else:
        for task in tasks:
            results.extend(_generate_chunk(task))
    results.sort(key=lambda item: item[0])
    skipped = [index for index, rec in results if rec is None]
    with open(os.path.join(out_dir, "labels.jsonl"), "w") as fh:
        for _, rec in results:
            if rec is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return {
        "requested": len(items),
        "written": len(items) - len(skipped),
        "skipped": skipped,
        "master_seed": int(master_seed),
        "counts": {str(k): int(v) for k, v in sorted(counts.items())},
    }
