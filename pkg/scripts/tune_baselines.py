"""Dev-time grid search for the baseline parameter defaults.

Builds a seeded synthetic tuning set, scores every grid point per method by
macro classification accuracy, and prints the winners. The winning values are
frozen into config.DEFAULT_CONFIG["baselines"]; the searched grids are
recorded there too.
"""

import multiprocessing as mp
import sys
import time

import numpy as np

from agglom.baselines import (
    BaselineParams,
    HoughParams,
    count_to_class,
    hough_circle_primaries,
    ultimate_erosion_primaries,
    watershed_primaries,
)
from agglom.features import segment
from agglom.synth import RenderConfig, SynthSkippedError, generate_image, image_seed

MASTER = 20250808
PER_CLASS = 60

WST_GRID = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
UE_GRID = (1.0, 2.0, 4.0, 9.0, 16.0, 25.0)
HT_SENS = (0.15, 0.2, 0.25, 0.3, 0.35, 0.45)
HT_EDGE = (0.05, 0.08, 0.12, 0.2, 0.35)


def make_sample(args):
    cfg, klass, seed = args
    try:
        img, lab = generate_image(cfg, klass, seed)
    except SynthSkippedError:
        return None
    return img, segment(img).mask, klass


def macro(pairs):
    per = {}
    for truth, pred in pairs:
        per.setdefault(truth, []).append(int(pred == truth))
    return float(np.mean([np.mean(v) for v in per.values()]))


def wst_case(args):
    mask, truth, grid = args
    return truth, [count_to_class(watershed_primaries(mask, BaselineParams(wst=h)).count)
                   for h in grid]


def ue_case(args):
    mask, truth, grid = args
    return truth, [count_to_class(ultimate_erosion_primaries(mask, BaselineParams(ue=u)).count)
                   for u in grid]


def ht_case(args):
    img, truth, combos = args
    return truth, [count_to_class(hough_circle_primaries(img, HoughParams(
        sensitivity=s, edge_threshold=e)).count) for s, e in combos]


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
        samples = [s for s in pool.map(make_sample, tasks) if s is not None]
    print(f"tuning set: {len(samples)} images in {time.time()-t0:.0f}s", flush=True)

    with mp.Pool(2) as pool:
        t0 = time.time()
        res = pool.map(wst_case, [(m, t, WST_GRID) for _, m, t in samples])
        for i, h in enumerate(WST_GRID):
            print(f"wst h={h}: {macro([(t, preds[i]) for t, preds in res]):.4f}", flush=True)
        print(f"wst grid took {time.time()-t0:.0f}s", flush=True)

        t0 = time.time()
        res = pool.map(ue_case, [(m, t, UE_GRID) for _, m, t in samples])
        for i, u in enumerate(UE_GRID):
            print(f"ue min_size={u}: {macro([(t, preds[i]) for t, preds in res]):.4f}", flush=True)
        print(f"ue grid took {time.time()-t0:.0f}s", flush=True)

        combos = [(s, e) for s in HT_SENS for e in HT_EDGE]
        t0 = time.time()
        res = pool.map(ht_case, [(img, t, combos) for img, _, t in samples])
        for i, (s, e) in enumerate(combos):
            print(f"ht sens={s} edge={e}: {macro([(t, preds[i]) for t, preds in res]):.4f}",
                  flush=True)
        print(f"ht grid took {time.time()-t0:.0f}s", flush=True)


if __name__ == "__main__":
    sys.exit(main())
