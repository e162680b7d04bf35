"""Established automated comparison methods: WST, UE and circular HT.

All three are deterministic and expose the tunable sensitivity parameters.
Watershed floods the negated distance field from suppressed regional maxima;
ultimate erosion takes the regional maxima of the distance transform as
markers and grows areas geodesically; the circular Hough transform votes
along the intensity gradient into a (cx, cy, r) accumulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import BinaryMask, GrayImage, connected_components, distance_transform, sobel_gradients

_BIG = np.int32(2**31 - 1)


@dataclass
class HoughParams:
    r_min: int = 10
    r_max: int = 48
    sensitivity: float = 0.25
    edge_threshold: float = 0.12

    def __post_init__(self):
        if self.r_min >= self.r_max:
            raise ValueError("r_min must be < r_max")
        if self.sensitivity <= 0 or self.edge_threshold <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class BaselineParams:
    wst: float = 0.5  # h-maxima suppression depth, px of distance
    ue: float = 2.0  # minimum marker size, px^2
    ht: HoughParams = field(default_factory=HoughParams)


@dataclass
class DetectedPrimaries:
    count: int
    areas: list[float]

    def __post_init__(self):
        if self.count != len(self.areas):
            raise ValueError("count must equal the number of area entries")


def count_to_class(count: int) -> int:
    """Map a detected primary count onto the six agglomerate classes."""
    if count <= 1:
        return 1
    return count if count <= 5 else 6


def _neighbor_stack(arr: np.ndarray) -> np.ndarray:
    """(8, h, w) stack of the 8-neighbors; the outside is the array minimum."""
    pad_value = arr.min()
    p = np.pad(arr, 1, mode="constant", constant_values=pad_value)
    return np.stack([
        p[0:-2, 0:-2], p[0:-2, 1:-1], p[0:-2, 2:],
        p[1:-1, 0:-2], p[1:-1, 2:],
        p[2:, 0:-2], p[2:, 1:-1], p[2:, 2:],
    ])


def _grayscale_reconstruct(marker: np.ndarray, mask_img: np.ndarray) -> np.ndarray:
    """Reconstruction by dilation: grow marker under mask_img to a fixpoint."""
    rec = np.minimum(marker, mask_img)
    while True:
        grown = np.maximum(rec, _neighbor_stack(rec).max(axis=0))
        grown = np.minimum(grown, mask_img)
        if np.array_equal(grown, rec):
            return rec
        rec = grown


def _h_maxima(f: np.ndarray, h: float) -> np.ndarray:
    if h <= 0:
        return f
    return _grayscale_reconstruct(f - h, f)


_REGMAX_EPS = 1.0 / 6.0  # below the 1/3 px quantum of the chamfer transform


def _regional_maxima(f: np.ndarray) -> np.ndarray:
    """Boolean regional-maxima mask of a non-negative field (foreground f > 0)."""
    rec = _grayscale_reconstruct(f - _REGMAX_EPS, f)
    return (f - rec) > 1e-9


def _flood_descending(priority: np.ndarray, markers: np.ndarray,
                      mask: np.ndarray) -> np.ndarray:
    """Assign every foreground pixel a marker label by descending-priority flood.

    Emulates a bucket priority queue: foreground pixels are visited level by
    level (descending priority); within a level, labels spread breadth-first
    from already-labeled neighbors, ties resolved toward the smaller label.
    Pixels without a labeled neighbor at their own level stay pending and are
    assigned at the first lower level that reaches them.
    """
    h, w = mask.shape
    wp = w + 2
    labels = np.zeros((h + 2, w + 2), dtype=np.int32)
    labels[1:-1, 1:-1] = markers
    fg = np.zeros((h + 2, w + 2), dtype=bool)
    fg[1:-1, 1:-1] = mask
    flat_labels = labels.ravel()
    flat_fg = fg.ravel()
    prio = np.full((h + 2, w + 2), -np.inf)
    prio[1:-1, 1:-1] = np.where(mask, priority, -np.inf)
    flat_prio = prio.ravel()
    offsets = np.array([-wp - 1, -wp, -wp + 1, -1, 1, wp - 1, wp, wp + 1])

    todo = np.nonzero(flat_fg & (flat_labels == 0))[0]
    if todo.size == 0:
        return labels[1:-1, 1:-1]
    order = np.argsort(-flat_prio[todo], kind="stable")
    todo = todo[order]
    _, starts = np.unique(-flat_prio[todo], return_index=True)
    boundaries = list(starts) + [todo.size]

    def assign(cand: np.ndarray) -> np.ndarray:
        while cand.size:
            nbr = flat_labels[cand[:, None] + offsets]
            nbr = np.where(nbr > 0, nbr, _BIG)
            best = nbr.min(axis=1)
            ready = best != _BIG
            if not ready.any():
                break
            flat_labels[cand[ready]] = best[ready]
            cand = cand[~ready]
        return cand

    pending = np.empty(0, dtype=todo.dtype)
    for bi in range(len(boundaries) - 1):
        pending = assign(np.concatenate((pending, todo[boundaries[bi]: boundaries[bi + 1]])))
    if pending.size:  # unreachable for masks whose components all carry markers
        assign(pending)
    return labels[1:-1, 1:-1]


def _label_areas(labels: np.ndarray, n: int) -> list[float]:
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    return [float(c) for c in counts[1 : n + 1]]


def _marker_components(marker_mask: np.ndarray):
    lab = connected_components(BinaryMask(marker_mask))
    return lab.labels, lab.n_labels


def _crop_to_content(bits: np.ndarray) -> np.ndarray:
    """Foreground bounding box with a 1 px background frame."""
    ys, xs = np.nonzero(bits)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    return np.pad(bits[y0 : y1 + 1, x0 : x1 + 1], 1)


def watershed_primaries(mask: BinaryMask, params: BaselineParams) -> DetectedPrimaries:
    """Markers from h-suppressed distance maxima; flood partitions the mask."""
    if not mask.bits.any():
        return DetectedPrimaries(0, [])
    bits = _crop_to_content(mask.bits)
    dt = distance_transform(BinaryMask(bits))
    suppressed = _h_maxima(dt, params.wst)
    markers, n = _marker_components(_regional_maxima(suppressed) & bits)
    if n == 0:
        return DetectedPrimaries(0, [])
    labels = _flood_descending(dt, markers, bits)
    return DetectedPrimaries(n, _label_areas(labels, n))


def ultimate_erosion_primaries(mask: BinaryMask, params: BaselineParams) -> DetectedPrimaries:
    """Markers are the regional maxima of the distance transform.

    Marker components smaller than ``params.ue`` px^2 are merged into the
    nearest surviving marker (centroid distance); areas come from a geodesic
    nearest-marker growth over the foreground.
    """
    if not mask.bits.any():
        return DetectedPrimaries(0, [])
    bits = _crop_to_content(mask.bits)
    dt = distance_transform(BinaryMask(bits))
    markers, n = _marker_components(_regional_maxima(dt) & bits)
    if n == 0:
        return DetectedPrimaries(0, [])
    sizes = np.bincount(markers.ravel(), minlength=n + 1)[1:]
    ys, xs = np.nonzero(markers)
    ids = markers[ys, xs]
    centroids = np.zeros((n, 2))
    for k in range(1, n + 1):
        sel = ids == k
        centroids[k - 1] = (ys[sel].mean(), xs[sel].mean())
    keep = np.nonzero(sizes >= params.ue)[0] + 1
    if keep.size == 0:
        # no component meets the size bar: nothing to merge into, keep all
        keep = np.arange(1, n + 1)
    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, k in enumerate(keep, start=1):
        remap[k] = new_id
    for k in range(1, n + 1):
        if remap[k] == 0:
            d = np.linalg.norm(centroids[keep - 1] - centroids[k - 1], axis=1)
            remap[k] = int(np.argmin(d)) + 1
    merged = remap[markers]
    labels = _flood_descending(np.zeros_like(dt), merged, bits)
    return DetectedPrimaries(len(keep), _label_areas(labels, len(keep)))


def hough_circle_primaries(img: GrayImage, params: HoughParams) -> DetectedPrimaries:
    """Circular Hough transform with gradient-direction voting.

    Edge pixels (Sobel magnitude above the edge threshold) vote for a center
    at distance r against the gradient (dark object on bright background),
    one vote per radius. Accumulator slices are box-gathered, normalized by
    the circumference, thresholded by ``sensitivity`` and reduced by
    non-maximum suppression with minimum center distance ``r_min``.
    """
    if params.r_min < 3:
        raise ValueError("r_min must be >= 3")
    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx, gy)
    edges = mag > params.edge_threshold
    # thin the edge band to the local gradient maximum so votes concentrate
    # at the true rim radius
    h_img, w_img = mag.shape
    ey, ex = np.nonzero(edges)
    if ey.size:
        m = mag[ey, ex]
        sy = np.rint(gy[ey, ex] / m).astype(np.int64)
        sx = np.rint(gx[ey, ex] / m).astype(np.int64)
        fy = np.clip(ey + sy, 0, h_img - 1)
        fx = np.clip(ex + sx, 0, w_img - 1)
        by = np.clip(ey - sy, 0, h_img - 1)
        bx = np.clip(ex - sx, 0, w_img - 1)
        keep = (m >= mag[fy, fx]) & (m >= mag[by, bx])
        thinned = np.zeros_like(edges)
        thinned[ey[keep], ex[keep]] = True
        edges = thinned
    eys, exs = np.nonzero(edges)
    if eys.size == 0:
        return DetectedPrimaries(0, [])
    h, w = img.pixels.shape
    m = mag[eys, exs]
    ux = gx[eys, exs] / m
    uy = gy[eys, exs] / m
    radii = np.arange(params.r_min, params.r_max + 1)
    candidates = []  # (score, r, y, x)
    for r in radii:
        cx = np.rint(exs - r * ux).astype(np.int64)
        cy = np.rint(eys - r * uy).astype(np.int64)
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        acc = np.zeros((h, w), dtype=np.float64)
        np.add.at(acc, (cy[ok], cx[ok]), 1.0)
        gathered = _neighbor_stack(acc).sum(axis=0) + acc
        score = gathered / (2.0 * math.pi * r)
        pys, pxs = np.nonzero(score >= params.sensitivity)
        for y, x in zip(pys, pxs):
            candidates.append((float(score[y, x]), int(r), int(y), int(x)))
    if not candidates:
        return DetectedPrimaries(0, [])
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    accepted = []
    min_d2 = float(params.r_min) ** 2
    for score, r, y, x in candidates:
        if all((y - ay) ** 2 + (x - ax) ** 2 >= min_d2 for _, ay, ax in accepted):
            accepted.append((r, y, x))
    areas = [math.pi * r * r for r, _, _ in accepted]
    return DetectedPrimaries(len(accepted), areas)


def tune_parameters(
    samples,
    wst_grid=(0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0),
    ue_grid=(1.0, 2.0, 4.0, 9.0, 16.0, 25.0),
    ht_sensitivity_grid=(0.15, 0.2, 0.25, 0.3, 0.35, 0.45),
    ht_edge_grid=(0.05, 0.08, 0.12, 0.2, 0.35),
) -> tuple[BaselineParams, dict]:
    """Grid search each method's parameters on (img, mask, true_class) samples.

    Maximizes the macro-averaged classification accuracy of the count each
    method reports. Returns the best parameter set and the full score table.
    """

    def macro_accuracy(pairs):
        per_class: dict[int, list[int]] = {}
        for truth, pred in pairs:
            per_class.setdefault(truth, []).append(int(pred == truth))
        return float(np.mean([np.mean(v) for v in per_class.values()]))

    table: dict = {"wst": {}, "ue": {}, "ht": {}}
    best_wst, best_wst_acc = None, -1.0
    for hval in wst_grid:
        params = BaselineParams(wst=hval)
        pairs = [(truth, count_to_class(watershed_primaries(mask, params).count))
                 for _, mask, truth in samples]
        acc = macro_accuracy(pairs)
        table["wst"][hval] = acc
        if acc > best_wst_acc:
            best_wst, best_wst_acc = hval, acc
    best_ue, best_ue_acc = None, -1.0
    for uval in ue_grid:
        params = BaselineParams(ue=uval)
        pairs = [(truth, count_to_class(ultimate_erosion_primaries(mask, params).count))
                 for _, mask, truth in samples]
        acc = macro_accuracy(pairs)
        table["ue"][uval] = acc
        if acc > best_ue_acc:
            best_ue, best_ue_acc = uval, acc
    best_ht, best_ht_acc = None, -1.0
    for sens in ht_sensitivity_grid:
        for edge in ht_edge_grid:
            hp = HoughParams(sensitivity=sens, edge_threshold=edge)
            pairs = [(truth, count_to_class(hough_circle_primaries(img, hp).count))
                     for img, _, truth in samples]
            acc = macro_accuracy(pairs)
            table["ht"][(sens, edge)] = acc
            if acc > best_ht_acc:
                best_ht, best_ht_acc = hp, acc
    return BaselineParams(wst=best_wst, ue=best_ue, ht=best_ht), table
