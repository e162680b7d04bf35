"""Segmentation and the 13 per-agglomerate region descriptors.

Segmentation: Otsu threshold (foreground = darker than the threshold),
morphological opening with a 3x3 cross, hole filling into a filled-mask
variant, 8-connected labeling, border-touching regions flagged. Features are
computed per region and min-max normalized over a training corpus before they
reach the networks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as _ndi

from .raster import (
    BinaryMask,
    GrayImage,
    LabelMap,
    connected_components,
    fill_holes,
    opening,
    otsu_threshold,
)

FEATURE_NAMES = (
    "area",
    "convex_area",
    "eccentricity",
    "equivalent_diameter",
    "extent",
    "filled_area",
    "major_axis_length",
    "minor_axis_length",
    "perimeter",
    "solidity",
    "min_intensity",
    "max_intensity",
    "mean_intensity",
)

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class RegionFeatures:
    area: float
    convex_area: float
    eccentricity: float
    equivalent_diameter: float
    extent: float
    filled_area: float
    major_axis_length: float
    minor_axis_length: float
    perimeter: float
    solidity: float
    min_intensity: float
    max_intensity: float
    mean_intensity: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES])


@dataclass
class SegmentResult:
    mask: BinaryMask
    labels: LabelMap
    filled_mask: BinaryMask
    border_labels: frozenset


def segment(img: GrayImage) -> SegmentResult:
    """Isolate dark foreground regions; empty foreground gives zero regions."""
    t = otsu_threshold(img)
    fg = BinaryMask(img.pixels < t)
    opened = opening(fg, "cross")
    labels = connected_components(opened)
    filled = fill_holes(opened)
    lab = labels.labels
    border = np.unique(np.concatenate((lab[0, :], lab[-1, :], lab[:, 0], lab[:, -1])))
    return SegmentResult(opened, labels, filled, frozenset(int(b) for b in border if b > 0))


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull of (x, y) points, counter-clockwise."""
    pts = np.unique(points, axis=0)
    if pts.shape[0] <= 2:
        return pts.astype(np.float64)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order].astype(np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def _convex_pixel_count(hull: np.ndarray) -> int:
    """Pixels whose centers lie inside the hull, counted by row scanline."""
    if hull.shape[0] == 1:
        return 1
    eps = 1e-7
    y_lo = int(math.ceil(hull[:, 1].min() - eps))
    y_hi = int(math.floor(hull[:, 1].max() + eps))
    edges = list(zip(hull, np.roll(hull, -1, axis=0)))
    count = 0
    for y in range(y_lo, y_hi + 1):
        xmin, xmax = np.inf, -np.inf
        for p, q in edges:
            py, qy = p[1], q[1]
            if (py - y) * (qy - y) > 0 and min(py, qy) != y:
                continue
            if py == qy:
                if py == y:
                    xmin = min(xmin, p[0], q[0])
                    xmax = max(xmax, p[0], q[0])
                continue
            if min(py, qy) - eps <= y <= max(py, qy) + eps:
                x = p[0] + (q[0] - p[0]) * (y - py) / (qy - py)
                xmin = min(xmin, x)
                xmax = max(xmax, x)
        if xmin <= xmax:
            count += int(math.floor(xmax + eps)) - int(math.ceil(xmin - eps)) + 1
    return count


# clockwise Moore neighborhood starting west; ring neighbors are 8-adjacent
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_MOORE_INDEX = {off: i for i, off in enumerate(_MOORE)}


def _trace_perimeter(mask: np.ndarray) -> float:
    """Length of the outer 8-connected boundary chain, sqrt(2) on diagonals.

    Moore-neighbor tracing; the walk stops once the move chosen from the
    start pixel repeats the first move (Jacob's criterion). A single-pixel
    region has chain length 0.
    """
    padded = np.pad(mask, 1)
    ys, xs = np.nonzero(padded)
    start = (int(ys[0]), int(xs[0]))  # topmost, then leftmost: W/NW/N/NE are background
    if not any(padded[start[0] + dy, start[1] + dx] for dy, dx in _MOORE):
        return 0.0
    length = 0.0
    p = start
    backtrack = (start[0], start[1] - 1)
    d_first = None
    limit = 8 * int(padded.sum()) + 16
    for _ in range(limit):
        start_dir = _MOORE_INDEX[(backtrack[0] - p[0], backtrack[1] - p[1])]
        d = None
        for i in range(1, 9):
            cand = (start_dir + i) % 8
            dy, dx = _MOORE[cand]
            if padded[p[0] + dy, p[1] + dx]:
                d = cand
                break
        if p == start:
            if d_first is None:
                d_first = d
            elif d == d_first:
                break
        dy, dx = _MOORE[d]
        length += math.sqrt(2.0) if dy != 0 and dx != 0 else 1.0
        # the ring predecessor of the move is background and adjacent to both
        # the old and the new pixel, so it seeds the next clockwise scan
        pdy, pdx = _MOORE[(d - 1) % 8]
        backtrack = (p[0] + pdy, p[1] + pdx)
        p = (p[0] + dy, p[1] + dx)
    return length


def _filled_pixel_count(region: np.ndarray) -> int:
    padded = np.pad(region, 1)
    bg = ~padded
    labels, n = _ndi.label(bg, structure=_FOUR_CONN)
    if n == 0:
        return int(region.sum())
    outside = labels[0, 0]
    holes = bg & (labels != outside)
    return int(region.sum() + holes.sum())


def extract_features(img: GrayImage, labels: LabelMap, label: int) -> RegionFeatures:
    """Compute the 13 descriptors for one region of a LabelMap."""
    region = labels.labels == label
    n = int(region.sum())
    if n == 0:
        raise ValueError(f"region {label} is empty")
    ys, xs = np.nonzero(region)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    bbox_area = (y1 - y0 + 1) * (x1 - x0 + 1)
    crop = region[y0 : y1 + 1, x0 : x1 + 1]

    values = img.pixels[ys, xs]
    filled = _filled_pixel_count(crop)

    # hull over the 4-boundary pixels (contains all extreme points)
    boundary = crop & ~_ndi.binary_erosion(crop, structure=_FOUR_CONN, border_value=0)
    bys, bxs = np.nonzero(boundary)
    hull = _convex_hull(np.column_stack((bxs, bys)))
    convex = max(_convex_pixel_count(hull), filled)

    # ellipse from normalized second central moments (+1/12 pixel variance)
    xf = xs.astype(np.float64)
    yf = ys.astype(np.float64)
    mx, my = xf.mean(), yf.mean()
    mu20 = np.mean((xf - mx) ** 2) + 1.0 / 12.0
    mu02 = np.mean((yf - my) ** 2) + 1.0 / 12.0
    mu11 = np.mean((xf - mx) * (yf - my))
    common = math.sqrt(((mu20 - mu02) / 2.0) ** 2 + mu11 * mu11)
    lam1 = (mu20 + mu02) / 2.0 + common
    lam2 = (mu20 + mu02) / 2.0 - common
    major = 4.0 * math.sqrt(lam1)
    minor = 4.0 * math.sqrt(max(lam2, 0.0))
    ecc = math.sqrt(max(0.0, 1.0 - lam2 / lam1))

    return RegionFeatures(
        area=float(n),
        convex_area=float(convex),
        eccentricity=ecc,
        equivalent_diameter=math.sqrt(4.0 * n / math.pi),
        extent=n / bbox_area,
        filled_area=float(filled),
        major_axis_length=major,
        minor_axis_length=minor,
        perimeter=_trace_perimeter(crop),
        solidity=n / convex,
        min_intensity=float(values.min()),
        max_intensity=float(values.max()),
        mean_intensity=float(values.mean()),
    )


@dataclass
class FeatureRanges:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if self.mins.shape != (len(FEATURE_NAMES),) or self.maxs.shape != self.mins.shape:
            raise ValueError("ranges must cover exactly the 13 features")
        if np.any(self.maxs < self.mins):
            raise ValueError("max must be >= min for every feature")

    @property
    def constant(self) -> np.ndarray:
        return self.maxs == self.mins

    def to_json(self) -> str:
        return json.dumps(
            {"names": list(FEATURE_NAMES),
             "mins": self.mins.tolist(),
             "maxs": self.maxs.tolist()},
            indent=1, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "FeatureRanges":
        doc = json.loads(text)
        return cls(np.asarray(doc["mins"]), np.asarray(doc["maxs"]))


def _rows_to_matrix(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        mat = np.asarray(rows, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != len(FEATURE_NAMES):
            raise ValueError("feature matrix must be (n, 13)")
        return mat
    return np.asarray([r.as_vector() for r in rows], dtype=np.float64)


def fit_normalizer(rows) -> FeatureRanges:
    """Per-feature min/max over a corpus; needs at least 2 rows."""
    mat = _rows_to_matrix(rows)
    if mat.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit ranges")
    return FeatureRanges(mat.min(axis=0), mat.max(axis=0))


def normalize_matrix(rows, ranges: FeatureRanges) -> np.ndarray:
    """(v - min) / (max - min), clamped to [-0.5, 1.5]; constant features -> 0.5."""
    mat = _rows_to_matrix(rows)
    span = ranges.maxs - ranges.mins
    safe = np.where(ranges.constant, 1.0, span)
    out = (mat - ranges.mins) / safe
    out = np.where(ranges.constant, 0.5, out)
    return np.clip(out, -0.5, 1.5)


def normalize(features: RegionFeatures, ranges: FeatureRanges) -> np.ndarray:
    return normalize_matrix(features.as_vector()[None, :], ranges)[0]


def write_features_csv(path, rows) -> None:
    """Fixed 13-column CSV in the canonical feature order."""
    mat = _rows_to_matrix(rows)
    header = ",".join(FEATURE_NAMES)
    lines = [header]
    for row in mat:
        lines.append(",".join(repr(float(v)) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
