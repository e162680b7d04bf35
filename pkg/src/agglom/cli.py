"""Command line entry point wiring synthesis, analysis, training, measurement,
baselines, evaluation and the structural sweeps.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every artifact
directory receives a manifest.json sufficient to re-run the producing command
bit-identically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, baselines, image_io, report
from .config import (
    config_hash,
    load_config,
    make_baseline_params,
    make_render_config,
    write_manifest,
)
from .distortions import build_blur_calibration, estimate_distortion_distributions
from .errors import AgglomError
from .features import (
    FeatureRanges,
    extract_features,
    fit_normalizer,
    normalize_matrix,
    segment,
    write_features_csv,
)
from .ffnn import save_model
from .pipeline import (
    MeasureResult,
    ModelBundle,
    measure_sample,
    one_hot,
    psd_stats,
    relative_errors,
    classification_metrics,
    sweep_hidden_neurons,
    sweep_sample_count,
    train_area_net,
    train_number_net,
)
from .synth import build_agglomerate, render_agglomerate, synthesize_dataset

log = logging.getLogger("agglom")


def _setup_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("AGGLOM_LOG", "").lower(), logging.WARNING
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def parse_counts(text: str) -> dict[int, int]:
    counts = {}
    for part in text.split(","):
        k, _, v = part.partition(":")
        counts[int(k)] = int(v)
    return counts


def parse_net(text: str):
    if text == "number":
        return ("number", None)
    if text.startswith("area:"):
        k = int(text.split(":", 1)[1])
        if k not in range(1, 6):
            raise ValueError("area net class must be 1..5")
        return ("area", k)
    raise ValueError("--net must be 'number' or 'area:K' with K in 1..5")


def _image_dir(path: str) -> str:
    sub = os.path.join(path, "images")
    return sub if os.path.isdir(sub) else path


def _list_images(path: str) -> list[str]:
    d = _image_dir(path)
    names = sorted(
        f for f in os.listdir(d) if f.lower().endswith((".png", ".pgm"))
    )
    return [os.path.join(d, f) for f in names]


def _read_labels(dataset: str) -> list[dict]:
    with open(os.path.join(dataset, "labels.jsonl")) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _largest_region_features(img):
    seg = segment(img)
    best, best_area = None, -1
    for label in range(1, seg.labels.n_labels + 1):
        if label in seg.border_labels:
            continue
        area = int(np.count_nonzero(seg.labels.labels == label))
        if area > best_area:
            best, best_area = label, area
    if best is None:
        return None
    return extract_features(img, seg.labels, best)


def _feature_chunk(args):
    dataset, records = args
    out = []
    for idx, rec in records:
        img = image_io.read_image(os.path.join(dataset, rec["file"]))
        feats = _largest_region_features(img)
        out.append((idx, None if feats is None else feats.as_vector()))
    return out


def _extract_dataset_features(dataset: str, records: list[dict], workers: int):
    items = list(enumerate(records))
    chunk = 64
    tasks = [(dataset, items[i : i + chunk]) for i in range(0, len(items), chunk)]
    rows: list = [None] * len(items)
    if workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.Pool(workers) as pool:
            for part in pool.imap(_feature_chunk, tasks):
                for idx, vec in part:
                    rows[idx] = vec
    else:
        for task in tasks:
            for idx, vec in _feature_chunk(task):
                rows[idx] = vec
    keep = [i for i, r in enumerate(rows) if r is not None]
    return np.asarray([rows[i] for i in keep]), keep


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    render_cfg = make_render_config(cfg)
    counts = parse_counts(args.counts)
    info = synthesize_dataset(render_cfg, counts, args.seed, args.out, workers=args.workers)
    log.info("synthesized %d images (%d skipped)", info["written"], len(info["skipped"]))
    write_manifest(args.out, "synth",
                   {"counts": info["counts"], "skipped": info["skipped"],
                    "written": info["written"]},
                   args.seed, cfg)
    return 0


def _sharp_reference(render_cfg):
    rng = np.random.default_rng(12345)
    spec = build_agglomerate(3, [30.0, 25.0, 20.0], rng, c_t=0.08)
    img, _ = render_agglomerate(spec, render_cfg)
    return img


def cmd_analyze_distortions(args) -> int:
    cfg = load_config(args.config)
    render_cfg = make_render_config(cfg)
    paths = _list_images(args.images)
    if not paths:
        raise AgglomError(f"no images found under {args.images}")
    corpus = [image_io.read_image(p) for p in paths]
    masks = [segment(img).mask for img in corpus]
    calibration = build_blur_calibration(
        _sharp_reference(render_cfg), cfg["distortions"]["calibration_sigmas"]
    )
    dists = estimate_distortion_distributions(corpus, masks, calibration)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "distortions.json"), "w") as fh:
        fh.write(dists.to_json())
    with open(os.path.join(args.out, "calibration.json"), "w") as fh:
        fh.write(calibration.to_json())
    write_manifest(args.out, "analyze-distortions",
                   {"images": sorted(os.path.basename(p) for p in paths)},
                   None, cfg)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    kind, k = parse_net(args.net)
    epochs = args.epochs if args.epochs is not None else cfg["train"]["epochs"]
    patience = args.patience if args.patience is not None else cfg["train"]["patience"]
    records = _read_labels(args.dataset)
    if kind == "area":
        records = [r for r in records if r["class"] == k]
    rows, keep = _extract_dataset_features(args.dataset, records, args.workers)
    if rows.shape[0] < 3:
        raise AgglomError("not enough usable training images")
    kept = [records[i] for i in keep]
    os.makedirs(args.out, exist_ok=True)
    norm_path = os.path.join(args.out, "normalizer.json")
    if kind == "number":
        classes = np.asarray([r["class"] for r in kept])
        ranges, net, history, _ = train_number_net(
            rows, classes, args.seed, epochs=epochs, patience=patience
        )
        with open(norm_path, "w") as fh:
            fh.write(ranges.to_json())
        save_model(net, os.path.join(args.out, "number_net.json"))
        net_name = "number"
    else:
        if os.path.exists(norm_path):
            with open(norm_path) as fh:
                ranges = FeatureRanges.from_json(fh.read())
        else:
            ranges = fit_normalizer(rows)
            with open(norm_path, "w") as fh:
                fh.write(ranges.to_json())
        areas = np.asarray([r["areas_px2"] for r in kept])
        net, history, _ = train_area_net(
            k, rows, areas, ranges, args.seed,
            area_scale=float(cfg["train"]["area_scale"]),
            epochs=epochs, patience=patience,
        )
        save_model(net, os.path.join(args.out, f"area_net_{k}.json"))
        net_name = f"area:{k}"
    write_features_csv(os.path.join(args.out, f"features_{net_name.replace(':', '')}.csv"), rows)
    meta_path = os.path.join(args.out, "meta.json")
    meta = {"area_scale": float(cfg["train"]["area_scale"]), "nets": {}}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        meta.setdefault("nets", {})
    meta["nets"][net_name] = {
        "seed": int(args.seed),
        "epochs_run": history["stopped_epoch"],
        "best_epoch": history["best_epoch"],
        "best_val": history["val"][history["best_epoch"] - 1] if history["best_epoch"] else None,
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    write_manifest(args.out, "train",
                   {"dataset": args.dataset, "net": args.net,
                    "epochs": epochs, "patience": patience},
                   args.seed, cfg)
    return 0


def _measure_chunk(args):
    bundle, paths = args
    items = [(os.path.basename(p), image_io.read_image(p)) for p in paths]
    result = measure_sample(bundle, items)
    return result


def cmd_measure(args) -> int:
    cfg = load_config(args.config)
    bundle = ModelBundle.load(args.bundle)
    paths = _list_images(args.images)
    if not paths:
        raise AgglomError(f"no images found under {args.images}")
    chunk = 64
    tasks = [(bundle, paths[i : i + chunk]) for i in range(0, len(paths), chunk)]
    partials = []
    if args.workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.Pool(args.workers) as pool:
            partials = list(pool.imap(_measure_chunk, tasks))
    else:
        partials = [_measure_chunk(t) for t in tasks]
    merged = MeasureResult(
        areas=[a for p in partials for a in p.areas],
        records=[r for p in partials for r in p.records],
        included=sum(p.included for p in partials),
        excluded=sum(p.excluded for p in partials),
        errored=sum(p.errored for p in partials),
    )
    summary = report.write_psd_report(args.out, merged)
    log.info("measured %d primaries over %d images", summary["n"], len(paths))
    write_manifest(args.out, "measure",
                   {"bundle": args.bundle, "images": args.images, "n_images": len(paths)},
                   None, cfg)
    return 0


def _baseline_chunk(args):
    method, params, paths = args
    out = []
    for p in paths:
        img = image_io.read_image(p)
        if method == "ht":
            det = baselines.hough_circle_primaries(img, params.ht)
        else:
            mask = segment(img).mask
            if method == "wst":
                det = baselines.watershed_primaries(mask, params)
            else:
                det = baselines.ultimate_erosion_primaries(mask, params)
        out.append({"file": os.path.basename(p), "count": det.count,
                    "areas_px2": det.areas})
    return out


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    if args.params:
        cfg = load_config(args.params)
    params = make_baseline_params(cfg)
    paths = _list_images(args.images)
    if not paths:
        raise AgglomError(f"no images found under {args.images}")
    if args.out.endswith(".jsonl"):
        out_dir = os.path.dirname(args.out) or "."
        results_path = args.out
    else:
        out_dir = args.out
        results_path = os.path.join(args.out, "results.jsonl")
    os.makedirs(out_dir, exist_ok=True)
    chunk = 64
    tasks = [(args.method, params, paths[i : i + chunk]) for i in range(0, len(paths), chunk)]
    rows = []
    if args.workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.Pool(args.workers) as pool:
            for part in pool.imap(_baseline_chunk, tasks):
                rows.extend(part)
    else:
        for t in tasks:
            rows.extend(_baseline_chunk(t))
    with open(results_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_manifest(out_dir, "baseline",
                   {"method": args.method, "images": args.images,
                    "n_images": len(paths)},
                   None, cfg)
    return 0


def _load_predictions(pred_path: str) -> dict[str, dict]:
    """Predictions by basename from a measure dir, baseline dir, or jsonl file."""
    if os.path.isdir(pred_path):
        for candidate in ("audit.jsonl", "results.jsonl"):
            p = os.path.join(pred_path, candidate)
            if os.path.exists(p):
                pred_path = p
                break
        else:
            raise AgglomError(f"no audit.jsonl or results.jsonl under {pred_path}")
    out = {}
    with open(pred_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            name = os.path.basename(rec["file"])
            if "count" in rec:  # baseline record
                out[name] = {
                    "class": baselines.count_to_class(rec["count"]),
                    "areas": list(rec.get("areas_px2", [])),
                }
            else:  # measurement audit record
                klass, areas = None, []
                for region in rec.get("regions", []):
                    if "class" in region and klass is None:
                        klass = region["class"]
                    areas.extend(region.get("areas_px2", []))
                out[name] = {"class": klass, "areas": areas}
    return out


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    preds = _load_predictions(args.pred)
    truth = {}
    with open(args.truth) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                truth[os.path.basename(rec["file"])] = rec
    matched = sorted(set(preds) & set(truth))
    if not matched:
        raise AgglomError("no overlapping files between predictions and truth")
    pairs = [(truth[m]["class"], preds[m]["class"]) for m in matched
             if preds[m]["class"] is not None]
    metrics = classification_metrics([p for _, p in pairs], [t for t, _ in pairs]) \
        if pairs else None
    pred_areas = [a for m in matched for a in preds[m]["areas"]]
    true_areas = [a for m in matched for a in truth[m]["areas_px2"]]
    rep: dict = {
        "n_matched": len(matched),
        "n_with_prediction": len(pairs),
        "mean_classification_accuracy": metrics.macro if metrics else None,
        "micro_accuracy": metrics.micro if metrics else None,
        "per_class_accuracy": metrics.per_class if metrics else None,
        "E_dg": None,
        "E_sigma_g": None,
    }
    if pred_areas and true_areas:
        errs = relative_errors(psd_stats(pred_areas), psd_stats(true_areas))
        rep["E_dg"] = errs.e_dg
        rep["E_sigma_g"] = errs.e_sigma_g
    text = json.dumps(rep, indent=1, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text)
        write_manifest(args.out, "evaluate",
                       {"pred": args.pred, "truth": args.truth}, None, cfg)
    else:
        print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    records = _read_labels(args.dataset)
    kind, k = parse_net(args.net)
    seeds = tuple(range(int(cfg["sweep"]["seeds"])))
    epochs = args.epochs if args.epochs is not None else int(cfg["sweep"]["epochs"])
    os.makedirs(args.out, exist_ok=True)
    if kind == "area":
        records = [r for r in records if r["class"] == k]
    rows, keep = _extract_dataset_features(args.dataset, records, args.workers)
    kept = [records[i] for i in keep]
    ranges = fit_normalizer(rows)
    xn = normalize_matrix(rows, ranges)
    if args.kind == "samples":
        if kind != "number":
            raise AgglomError("the sample-count sweep runs on the classifier data")
        classes = np.asarray([r["class"] for r in kept])
        table = sweep_sample_count(
            xn, classes, cfg["sweep"]["sample_counts"],
            seeds=seeds, epochs=epochs, master_seed=args.seed,
        )
        report.write_sweep_csv(os.path.join(args.out, "sweep.csv"), table, "count")
        report.svg_line(os.path.join(args.out, "sweep.svg"),
                        [r["count"] for r in table], [r["mean"] for r in table],
                        title="min test cost vs samples per class", log_x=True)
    else:
        if kind == "number":
            targets = one_hot(np.asarray([r["class"] for r in kept]))
            result = sweep_hidden_neurons(
                xn, targets, cfg["sweep"]["neuron_grid"], 6, "ce", "softmax",
                seeds=seeds, epochs=epochs, master_seed=args.seed,
            )
        else:
            areas = np.asarray([r["areas_px2"] for r in kept])
            targets = -np.sort(-areas, axis=1) / float(cfg["train"]["area_scale"])
            result = sweep_hidden_neurons(
                xn, targets, cfg["sweep"]["neuron_grid"], k, "mse", "identity",
                seeds=seeds, epochs=epochs, master_seed=args.seed,
            )
        report.write_sweep_csv(os.path.join(args.out, "sweep.csv"),
                               result["rows"], "n_hidden")
        with open(os.path.join(args.out, "bounds.json"), "w") as fh:
            json.dump(result["bounds"], fh, indent=1, sort_keys=True)
        report.svg_line(os.path.join(args.out, "sweep.svg"),
                        [r["n_hidden"] for r in result["rows"]],
                        [r["normalized"] for r in result["rows"]],
                        title="normalized min cost vs hidden neurons")
    write_manifest(args.out, "sweep",
                   {"kind": args.kind, "net": args.net, "dataset": args.dataset,
                    "epochs": epochs},
                   args.seed, cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agglom", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a labeled dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--counts", required=True, help="per-class counts, e.g. 1:100,2:100")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze-distortions", help="estimate distortion distributions")
    p.add_argument("--images", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_distortions)

    p = sub.add_parser("train", help="train the classifier or an area regressor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--net", required=True, help="number or area:K")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("measure", help="measure primary areas with a model bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("baseline", help="run an established comparison method")
    p.add_argument("--method", required=True, choices=("wst", "ue", "ht"))
    p.add_argument("--params", default=None, help="TOML with a [baselines] table")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="directory or results.jsonl path")
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="compare predictions against truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="structural optimization sweeps")
    p.add_argument("--kind", required=True, choices=("samples", "neurons"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--net", default="number")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (AgglomError, OSError, ValueError) as exc:
        print(f"agglom: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
