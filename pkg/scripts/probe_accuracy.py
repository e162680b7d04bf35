"""Dev probe: classifier accuracy at 1000 samples/class vs the baselines."""

import multiprocessing as mp
import sys
import time

import numpy as np

from agglom.baselines import (
    BaselineParams,
    count_to_class,
    hough_circle_primaries,
    ultimate_erosion_primaries,
    watershed_primaries,
)
from agglom.features import extract_features, segment
from agglom.pipeline import classification_metrics, train_number_net
from agglom.synth import RenderConfig, SynthSkippedError, generate_image, image_seed

MASTER = 424242
PER_CLASS = 1000


def featurize(args):
    cfg, klass, seed = args
    try:
        img, lab = generate_image(cfg, klass, seed)
    except SynthSkippedError:
        return None
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
    return klass, extract_features(img, seg.labels, best).as_vector(), seed


def run_baselines(args):
    cfg, klass, seed = args
    try:
        img, _ = generate_image(cfg, klass, seed)
    except SynthSkippedError:
        return None
    params = BaselineParams()
    mask = segment(img).mask
    return (
        klass,
        count_to_class(watershed_primaries(mask, params).count),
        count_to_class(ultimate_erosion_primaries(mask, params).count),
        count_to_class(hough_circle_primaries(img, params.ht).count),
    )


def main():
    cfg = RenderConfig()
    tasks = []
    idx = 0
    for klass in range(1, 7):
        for _ in range(PER_CLASS):
            tasks.append((cfg, klass, image_seed(MASTER, idx)))
            idx += 1
    t0 = time.time()
    with mp.Pool(2) as pool:
        rows = [r for r in pool.map(featurize, tasks, chunksize=64) if r is not None]
    print(f"featurized {len(rows)} in {time.time()-t0:.0f}s", flush=True)

    x = np.array([r[1] for r in rows])
    y = np.array([r[0] for r in rows])
    t0 = time.time()
    ranges, net, hist, split = train_number_net(x, y, seed=1, epochs=200, patience=6)
    print(f"trained in {time.time()-t0:.0f}s, epochs={hist['stopped_epoch']} "
          f"best={hist['best_epoch']}", flush=True)

    from agglom.features import normalize_matrix

    xt = normalize_matrix(x[split.test], ranges)
    pred = np.argmax(net.forward(xt), axis=1) + 1
    m = classification_metrics(pred, y[split.test])
    print(f"ANN macro={m.macro:.3f} micro={m.micro:.3f} per-class={m.per_class}", flush=True)

    # baselines on a 600-image subset of the test distribution
    sub = [tasks[i] for i in range(0, len(tasks), len(tasks) // 600)][:600]
    t0 = time.time()
    with mp.Pool(2) as pool:
        res = [r for r in pool.map(run_baselines, sub, chunksize=16) if r is not None]
    print(f"baselines on {len(res)} in {time.time()-t0:.0f}s", flush=True)
    truths = [r[0] for r in res]
    for i, name in ((1, "wst"), (2, "ue"), (3, "ht")):
        mm = classification_metrics([r[i] for r in res], truths)
        print(f"{name} macro={mm.macro:.3f} micro={mm.micro:.3f}", flush=True)


if __name__ == "__main__":
    sys.exit(main())
