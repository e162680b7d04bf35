"""Measurement route and evaluation: classify the primary count, regress the
per-class areas, aggregate size statistics, plus the two structural sweeps
and the rational-function fit used to pick hidden layer sizes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ExcludedClassError, FitFailedError, TrainingDivergedError
from .features import (
    FEATURE_NAMES,
    FeatureRanges,
    extract_features,
    fit_normalizer,
    normalize_matrix,
    segment,
)
from .ffnn import (
    DataSplit,
    Network,
    Topology,
    init_weights,
    load_model,
    save_model,
    scg_train,
    split_data,
)
from .raster import GrayImage

NUMBER_NET_TOPOLOGY = Topology(13, (39,), 6, "tanh", "softmax")
AREA_NET_HIDDEN = {1: 11, 2: 124, 3: 104, 4: 29, 5: 19}
EXCLUDED_CLASS = 6


def area_net_topology(k: int) -> Topology:
    if k not in AREA_NET_HIDDEN:
        raise ValueError("area nets exist for classes 1..5 only")
    return Topology(13, (AREA_NET_HIDDEN[k],), k, "tanh", "identity")


def _check_number_net(net: Network) -> None:
    top = net.topology()
    want = NUMBER_NET_TOPOLOGY
    if (top.n_input, top.hidden, top.n_output) != (want.n_input, want.hidden, want.n_output):
        raise ValueError(f"classifier must be 13-39-6, got {top.n_input}-{top.hidden}-{top.n_output}")
    if net.layers[-1].activation != "softmax":
        raise ValueError("classifier output layer must be softmax")


def _check_area_net(net: Network, k: int) -> None:
    top = net.topology()
    want = area_net_topology(k)
    if (top.n_input, top.hidden, top.n_output) != (want.n_input, want.hidden, want.n_output):
        raise ValueError(
            f"area net {k} must be 13-{AREA_NET_HIDDEN[k]}-{k}, "
            f"got {top.n_input}-{top.hidden}-{top.n_output}"
        )
    if net.layers[-1].activation != "identity":
        raise ValueError("area net output layer must be identity")


@dataclass
class ModelBundle:
    """Persisted model set: normalizer, classifier, per-class regressors."""

    ranges: FeatureRanges
    number_net: Network | None = None
    area_nets: dict[int, Network] = field(default_factory=dict)
    area_scale: float = 6500.0

    def __post_init__(self):
        if self.number_net is not None:
            _check_number_net(self.number_net)
        for k, net in self.area_nets.items():
            _check_area_net(net, k)
        if self.area_scale <= 0:
            raise ValueError("area scale must be positive")

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "normalizer.json"), "w") as fh:
            fh.write(self.ranges.to_json())
        if self.number_net is not None:
            save_model(self.number_net, os.path.join(out_dir, "number_net.json"))
        for k, net in self.area_nets.items():
            save_model(net, os.path.join(out_dir, f"area_net_{k}.json"))
        meta = {"area_scale": self.area_scale,
                "nets": sorted(["number"] * (self.number_net is not None)
                               + [f"area:{k}" for k in self.area_nets])}
        with open(os.path.join(out_dir, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, bundle_dir) -> "ModelBundle":
        ranges_path = os.path.join(bundle_dir, "normalizer.json")
        with open(ranges_path) as fh:
            ranges = FeatureRanges.from_json(fh.read())
        number_path = os.path.join(bundle_dir, "number_net.json")
        number_net = load_model(number_path) if os.path.exists(number_path) else None
        area_nets = {}
        for k in range(1, 6):
            path = os.path.join(bundle_dir, f"area_net_{k}.json")
            if os.path.exists(path):
                area_nets[k] = load_model(path)
        area_scale = 6500.0
        meta_path = os.path.join(bundle_dir, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                area_scale = float(json.load(fh).get("area_scale", area_scale))
        return cls(ranges, number_net, area_nets, area_scale)


def classify_count(bundle: ModelBundle, features: np.ndarray) -> tuple[int, np.ndarray]:
    """Class 1..6 by softmax argmax; ties go to the smaller class index."""
    if bundle.number_net is None:
        raise RuntimeError("bundle has no classifier loaded")
    probs = bundle.number_net.forward(np.asarray(features, dtype=np.float64))
    return int(np.argmax(probs)) + 1, probs


def regress_areas(bundle: ModelBundle, features: np.ndarray, k: int) -> np.ndarray:
    """Predicted areas for a class-k agglomerate, sorted descending, >= 1 px^2."""
    if k == EXCLUDED_CLASS:
        raise ExcludedClassError("class 6 agglomerates are excluded from the analysis")
    if k not in AREA_NET_HIDDEN:
        raise ValueError("k must be in 1..5")
    net = bundle.area_nets.get(k)
    if net is None:
        raise RuntimeError(f"bundle has no area net for class {k}")
    out = net.forward(np.asarray(features, dtype=np.float64))
    areas = np.maximum(np.atleast_1d(out) * bundle.area_scale, 1.0)
    return np.sort(areas)[::-1]


@dataclass
class MeasureResult:
    areas: list[float]
    records: list[dict]
    included: int
    excluded: int
    errored: int


def measure_sample(bundle: ModelBundle, images) -> MeasureResult:
    """Run the measurement route over an iterable of images.

    ``images`` yields GrayImage objects or (name, GrayImage) pairs. Regions
    touching the image border and regions classified into class 6 are
    excluded but audited. Per-image failures are recorded and processing
    continues.
    """
    areas: list[float] = []
    records: list[dict] = []
    included = excluded = errored = 0
    for i, item in enumerate(images):
        name, img = item if isinstance(item, tuple) else (f"#{i}", item)
        record: dict = {"file": name, "regions": []}
        try:
            seg = segment(img)
            got_area = False
            for label in range(1, seg.labels.n_labels + 1):
                if label in seg.border_labels:
                    record["regions"].append({"label": label, "excluded": "border"})
                    continue
                feats = extract_features(img, seg.labels, label)
                vec = normalize_matrix(feats.as_vector()[None, :], bundle.ranges)[0]
                klass, probs = classify_count(bundle, vec)
                region_rec = {"label": label, "class": klass,
                              "prob": float(probs[klass - 1])}
                if klass == EXCLUDED_CLASS:
                    region_rec["excluded"] = "class6"
                else:
                    predicted = regress_areas(bundle, vec, klass)
                    region_rec["areas_px2"] = [float(a) for a in predicted]
                    areas.extend(float(a) for a in predicted)
                    got_area = True
                record["regions"].append(region_rec)
            if got_area:
                included += 1
            else:
                excluded += 1
                record["excluded"] = True
        except Exception as exc:  # audit and continue
            errored += 1
            record["error"] = f"{type(exc).__name__}: {exc}"
        records.append(record)
    return MeasureResult(areas, records, included, excluded, errored)


@dataclass
class PsdStats:
    d_g: float
    sigma_g: float
    n: int


@dataclass
class RelErrors:
    e_dg: float
    e_sigma_g: float


def psd_stats(areas) -> PsdStats:
    """Geometric mean diameter and geometric standard deviation.

    Diameters are equivalent-circle diameters d = sqrt(4A/pi); d_g is the
    exponential of the mean log diameter and sigma_g the exponential of the
    (n-1)-denominator standard deviation of the log diameters (1 for n = 1).
    """
    a = np.asarray(list(areas), dtype=np.float64)
    if a.size == 0:
        raise ValueError("need at least one area")
    if np.any(a <= 0):
        raise ValueError("areas must be positive")
    log_d = np.log(np.sqrt(4.0 * a / np.pi))
    d_g = float(np.exp(log_d.mean()))
    sigma_g = float(np.exp(np.std(log_d, ddof=1))) if a.size >= 2 else 1.0
    return PsdStats(d_g, sigma_g, int(a.size))


def relative_errors(output: PsdStats, target: PsdStats) -> RelErrors:
    if target.d_g <= 0 or target.sigma_g <= 0:
        raise ValueError("target statistics must be positive")
    return RelErrors(
        (output.d_g - target.d_g) / target.d_g,
        (output.sigma_g - target.sigma_g) / target.sigma_g,
    )


@dataclass
class ClassificationMetrics:
    per_class: dict[int, float]
    macro: float
    micro: float
    n: int


def classification_metrics(predicted, truth) -> ClassificationMetrics:
    """Per-class accuracies plus their unweighted (macro) mean.

    The micro average (plain fraction correct) is also reported since the
    class supports may be unbalanced.
    """
    pred = np.asarray(list(predicted), dtype=np.int64)
    true = np.asarray(list(truth), dtype=np.int64)
    if pred.size == 0 or pred.size != true.size:
        raise ValueError("predicted and true class lists must be equal-length and non-empty")
    per_class = {}
    for klass in np.unique(true):
        sel = true == klass
        per_class[int(klass)] = float(np.mean(pred[sel] == klass))
    macro = float(np.mean(list(per_class.values())))
    micro = float(np.mean(pred == true))
    return ClassificationMetrics(per_class, macro, micro, int(pred.size))


def one_hot(classes, n_classes: int = 6) -> np.ndarray:
    idx = np.asarray(classes, dtype=np.int64) - 1
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise ValueError("class ids out of range")
    out = np.zeros((idx.size, n_classes))
    out[np.arange(idx.size), idx] = 1.0
    return out


def train_number_net(
    features_raw: np.ndarray,
    classes: np.ndarray,
    seed: int,
    epochs: int = 200,
    patience: int | None = 6,
) -> tuple[FeatureRanges, Network, dict, DataSplit]:
    """Fit the normalizer on the training split and train the classifier."""
    x = np.asarray(features_raw, dtype=np.float64)
    split = split_data(x.shape[0], np.random.default_rng([seed, 0]))
    ranges = fit_normalizer(x[split.train])
    xn = normalize_matrix(x, ranges)
    targets = one_hot(classes)
    net = init_weights(NUMBER_NET_TOPOLOGY, np.random.default_rng([seed, 1]))
    net.meta["seed"] = int(seed)
    net.meta["cost"] = "ce"
    trained, history = scg_train(net, xn, targets, split, "ce", epochs, patience)
    return ranges, trained, history, split


def train_area_net(
    k: int,
    features_raw: np.ndarray,
    areas: np.ndarray,
    ranges: FeatureRanges,
    seed: int,
    area_scale: float = 6500.0,
    epochs: int = 200,
    patience: int | None = 6,
) -> tuple[Network, dict, DataSplit]:
    """Train the class-k area regressor on normalized targets (area/scale).

    Targets are sorted descending per sample, matching the fixed output
    ordering used at inference.
    """
    x = np.asarray(features_raw, dtype=np.float64)
    a = np.atleast_2d(np.asarray(areas, dtype=np.float64))
    if a.shape != (x.shape[0], k):
        raise ValueError(f"areas must be (n, {k})")
    targets = -np.sort(-a, axis=1) / area_scale
    split = split_data(x.shape[0], np.random.default_rng([seed, 0, k]))
    xn = normalize_matrix(x, ranges)
    net = init_weights(area_net_topology(k), np.random.default_rng([seed, 1, k]))
    net.meta["seed"] = int(seed)
    net.meta["cost"] = "mse"
    trained, history = scg_train(net, xn, targets, split, "mse", epochs, patience)
    return trained, history, split


def rule_of_thumb_bounds(n_input: int, n_output: int) -> tuple[int, int, int]:
    """Hidden-size guidance: N_o <= N_h < 2*N_i and N_h ~ 2/3*N_i + N_o."""
    return n_output, 2 * n_input, round(2.0 * n_input / 3.0 + n_output)


def _train_cell(x, targets, split, topology, cost, seed, epochs):
    net = init_weights(topology, np.random.default_rng([seed]))
    try:
        _, history = scg_train(net, x, targets, split, cost, epochs, patience=None)
    except TrainingDivergedError:
        return None
    tests = [c for c in history["test"] if np.isfinite(c)]
    return min(tests) if tests else None


def sweep_sample_count(
    features: np.ndarray,
    classes: np.ndarray,
    counts_grid,
    topology: Topology | None = None,
    seeds=tuple(range(10)),
    epochs: int = 200,
    master_seed: int = 0,
    holdout: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[dict]:
    """Minimum test cross-entropy versus the number of samples per class.

    For each count the first ``count`` rows of every class are used, split
    70/15/15 once (seeded by the master seed); each listed seed retrains from
    a fresh random initialization. Diverged cells are flagged and excluded
    from the mean.

    When ``holdout`` (features, classes) is given, the reported test cost is
    evaluated on that common set for every count. A per-count test split
    shrinks with the count, and the minimum over epochs of a small-sample
    estimate is optimistically biased, which can mask the real trend.
    """
    grid = list(counts_grid)
    if not grid:
        raise ValueError("counts grid must not be empty")
    if topology is None:
        topology = Topology(13, (25, 25), 6, "tanh", "softmax")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(classes, dtype=np.int64)
    rows = []
    for count in grid:
        take = []
        for klass in np.unique(y):
            idx = np.nonzero(y == klass)[0]
            if idx.size < count:
                raise ValueError(f"not enough class-{klass} samples for count {count}")
            take.append(idx[:count])
        sel = np.concatenate(take)
        xs = x[sel]
        targets = one_hot(y[sel])
        split = split_data(xs.shape[0], np.random.default_rng([master_seed, int(count)]))
        if holdout is not None:
            hx = np.asarray(holdout[0], dtype=np.float64)
            ht = one_hot(np.asarray(holdout[1], dtype=np.int64))
            xs = np.vstack((xs[split.train], xs[split.validation], hx))
            targets = np.vstack((targets[split.train], targets[split.validation], ht))
            n_tr, n_val = split.train.size, split.validation.size
            split = DataSplit(
                np.arange(n_tr),
                np.arange(n_tr, n_tr + n_val),
                np.arange(n_tr + n_val, n_tr + n_val + hx.shape[0]),
            )
        cell_costs, diverged = [], 0
        for seed in seeds:
            best = _train_cell(xs, targets, split, topology, "ce", int(seed), epochs)
            if best is None:
                diverged += 1
            else:
                cell_costs.append(best)
        rows.append({
            "count": int(count),
            "mean": float(np.mean(cell_costs)) if cell_costs else float("nan"),
            "std": float(np.std(cell_costs)) if cell_costs else float("nan"),
            "diverged": diverged,
        })
    return rows


def sweep_hidden_neurons(
    features: np.ndarray,
    targets: np.ndarray,
    neuron_grid,
    n_output: int,
    cost: str,
    output_activation: str,
    seeds=tuple(range(10)),
    epochs: int = 200,
    master_seed: int = 0,
) -> dict:
    """Normalized minimum cost versus the hidden layer size.

    The grid must include 1: costs are normalized by the mean of the
    single-hidden-neuron nets. Also reports the rule-of-thumb bounds for the
    network kind under study.
    """
    grid = sorted(set(int(g) for g in neuron_grid))
    if 1 not in grid:
        raise ValueError("neuron grid must include the normalization anchor N_h = 1")
    x = np.asarray(features, dtype=np.float64)
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    split = split_data(x.shape[0], np.random.default_rng([master_seed, 17]))
    means = {}
    rows = []
    for n_h in grid:
        topology = Topology(x.shape[1], (n_h,), n_output, "tanh", output_activation)
        cell_costs, diverged = [], 0
        for seed in seeds:
            best = _train_cell(x, t, split, topology, cost, int(seed), epochs)
            if best is None:
                diverged += 1
            else:
                cell_costs.append(best)
        mean = float(np.mean(cell_costs)) if cell_costs else float("nan")
        means[n_h] = mean
        rows.append({"n_hidden": n_h, "mean": mean,
                     "std": float(np.std(cell_costs)) if cell_costs else float("nan"),
                     "diverged": diverged})
    anchor = means[1]
    for row in rows:
        row["normalized"] = row["mean"] / anchor
    lo, hi, approx = rule_of_thumb_bounds(x.shape[1], n_output)
    return {"rows": rows, "bounds": {"lower": lo, "upper_exclusive": hi, "approx": approx}}


@dataclass
class RationalFitParams:
    """f(x) = (a*x^3 + b*x^2 + c*x + d) / (x + e) with its located minimum."""

    a: float
    b: float
    c: float
    d: float
    e: float
    argmin_x: float
    residual: float

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (self.a * x**3 + self.b * x**2 + self.c * x + self.d) / (x + self.e)


def _rational_solve(xs: np.ndarray, ys: np.ndarray, e: float):
    denom = xs + e
    design = np.column_stack((xs**3, xs**2, xs, np.ones_like(xs))) / denom[:, None]
    coef, _, rank, _ = np.linalg.lstsq(design, ys, rcond=None)
    if rank < 4:
        return None, np.inf
    residual = float(np.sqrt(np.mean((design @ coef - ys) ** 2)))
    return coef, residual


def rational_fit(xs, ys) -> RationalFitParams:
    """Least-squares fit of the rational function over a pole grid.

    For each candidate pole position e the fit in (a, b, c, d) is linear; the
    best e is refined by golden-section search and the argmin is located by
    dense evaluation over [min(xs), max(xs)].
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 6:
        raise ValueError("need at least 6 points")
    if np.any(x <= 0):
        raise ValueError("xs must be positive")
    e_lo = -x.min() + 1e-3 * x.min()
    e_hi = 10.0 * x.max()
    grid = np.linspace(e_lo, e_hi, 400)
    best_e, best_res = None, np.inf
    for e in grid:
        _, res = _rational_solve(x, y, e)
        if res < best_res:
            best_e, best_res = e, res
    if best_e is None or not np.isfinite(best_res):
        raise FitFailedError("rational fit failed for every pole position")
    i = int(np.nonzero(grid == best_e)[0][0])
    lo = grid[max(0, i - 1)]
    hi = grid[min(grid.size - 1, i + 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a_, b_ = lo, hi
    c_ = b_ - phi * (b_ - a_)
    d_ = a_ + phi * (b_ - a_)
    fc = _rational_solve(x, y, c_)[1]
    fd = _rational_solve(x, y, d_)[1]
    for _ in range(200):
        if abs(b_ - a_) < 1e-12 * max(1.0, abs(b_)):
            break
        if fc < fd:
            b_, d_, fd = d_, c_, fc
            c_ = b_ - phi * (b_ - a_)
            fc = _rational_solve(x, y, c_)[1]
        else:
            a_, c_, fc = c_, d_, fd
            d_ = a_ + phi * (b_ - a_)
            fd = _rational_solve(x, y, d_)[1]
    e_best = (a_ + b_) / 2.0
    coef, res = _rational_solve(x, y, e_best)
    if coef is None or res > best_res:
        coef, res = _rational_solve(x, y, best_e)
        e_best = best_e
    if coef is None:
        raise FitFailedError("rational fit is singular at the selected pole")
    params = RationalFitParams(float(coef[0]), float(coef[1]), float(coef[2]),
                               float(coef[3]), float(e_best), 0.0, res)
    dense = np.linspace(x.min(), x.max(), max(2001, 20 * x.size))
    values = params.evaluate(dense)
    params.argmin_x = float(dense[int(np.argmin(values))])
    return params
