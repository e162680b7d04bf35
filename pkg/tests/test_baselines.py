import math

import numpy as np
import pytest

from agglom.baselines import (
    BaselineParams,
    DetectedPrimaries,
    HoughParams,
    count_to_class,
    hough_circle_primaries,
    tune_parameters,
    ultimate_erosion_primaries,
    watershed_primaries,
)
from agglom.features import segment
from agglom.raster import BinaryMask, GrayImage
from agglom.synth import (
    AgglomerateSpec,
    DiskFootprint,
    RenderConfig,
    SphereSpec,
    render_agglomerate,
)
from conftest import disk_mask


@pytest.fixture
def params():
    return BaselineParams()


class TestWatershed:
    def test_empty_mask(self, params):
        det = watershed_primaries(BinaryMask(np.zeros((20, 20), bool)), params)
        assert det.count == 0 and det.areas == []

    def test_single_disk(self, params):
        mask = BinaryMask(disk_mask((90, 90), 45, 45, 28))
        det = watershed_primaries(mask, params)
        assert det.count == 1
        assert det.areas[0] == mask.count()

    def test_tangent_disks_split_exactly(self, params, dumbbell_mask):
        det = watershed_primaries(dumbbell_mask, params)
        assert det.count == 2
        assert sum(det.areas) == dumbbell_mask.count()
        for a in det.areas:
            assert abs(a - math.pi * 900) / (math.pi * 900) < 0.10

    def test_partition_property_random_blobs(self, params, rng):
        for _ in range(5):
            mask = np.zeros((70, 70), bool)
            for _ in range(3):
                cy, cx = rng.integers(15, 55, 2)
                mask |= disk_mask((70, 70), cy, cx, int(rng.integers(6, 14)))
            det = watershed_primaries(BinaryMask(mask), params)
            assert sum(det.areas) == int(mask.sum())

    def test_deterministic(self, params, dumbbell_mask):
        a = watershed_primaries(dumbbell_mask, params)
        b = watershed_primaries(dumbbell_mask, params)
        assert a.count == b.count and a.areas == b.areas


class TestUltimateErosion:
    def test_single_disk_one_marker(self, params):
        det = ultimate_erosion_primaries(BinaryMask(disk_mask((80, 80), 40, 40, 25)), params)
        assert det.count == 1

    def test_dumbbell_two_markers(self, params, dumbbell_mask):
        det = ultimate_erosion_primaries(dumbbell_mask, params)
        assert det.count == 2

    def test_areas_partition_foreground(self, params, dumbbell_mask):
        det = ultimate_erosion_primaries(dumbbell_mask, params)
        assert sum(det.areas) == dumbbell_mask.count()

    def test_marker_count_never_exceeds_watershed(self, rng):
        zero_h = BaselineParams(wst=0.0, ue=2.0)
        for _ in range(8):
            mask = np.zeros((60, 60), bool)
            for _ in range(int(rng.integers(1, 4))):
                cy, cx = rng.integers(14, 46, 2)
                mask |= disk_mask((60, 60), cy, cx, int(rng.integers(5, 12)))
            wst = watershed_primaries(BinaryMask(mask), zero_h)
            ue = ultimate_erosion_primaries(BinaryMask(mask), zero_h)
            assert ue.count <= wst.count

    def test_empty_mask(self, params):
        det = ultimate_erosion_primaries(BinaryMask(np.zeros((8, 8), bool)), params)
        assert det.count == 0


class TestHough:
    def test_blank_image_zero(self, params):
        det = hough_circle_primaries(GrayImage(np.full((100, 100), 0.9)), params.ht)
        assert det.count == 0

    def test_single_circle_radius_recovered(self, params):
        cfg = RenderConfig()
        spec = AgglomerateSpec([SphereSpec((0, 0, 0), 40.0)], 0.08, 0.0)
        img, _ = render_agglomerate(spec, cfg)
        det = hough_circle_primaries(img, params.ht)
        assert det.count == 1
        r = math.sqrt(det.areas[0] / math.pi)
        assert abs(r - 40.0) <= 2.0

    def test_two_disjoint_circles(self, params):
        total = np.ones((256, 256))
        xs = np.arange(256, dtype=float)
        ys = np.arange(256, dtype=float)
        for fp in (DiskFootprint(70.0, 128.0, 25.0), DiskFootprint(180.0, 128.0, 40.0)):
            t, _ = fp.transmittance_patch(xs, ys, 0.08)
            total *= t
        det = hough_circle_primaries(GrayImage(total), params.ht)
        assert det.count == 2
        radii = sorted(math.sqrt(a / math.pi) for a in det.areas)
        assert abs(radii[0] - 25.0) <= 2.0
        assert abs(radii[1] - 40.0) <= 2.0

    def test_r_min_validated(self):
        with pytest.raises(ValueError):
            hough_circle_primaries(GrayImage(np.full((50, 50), 0.5)),
                                   HoughParams(r_min=2, r_max=10))

    def test_deterministic(self, params):
        cfg = RenderConfig()
        spec = AgglomerateSpec([SphereSpec((0, 0, 0), 30.0)], 0.1, 0.0)
        img, _ = render_agglomerate(spec, cfg)
        a = hough_circle_primaries(img, params.ht)
        b = hough_circle_primaries(img, params.ht)
        assert a.count == b.count and a.areas == b.areas


class TestSingleParticleSuite:
    def _run_suite(self, params, n):
        cfg = RenderConfig()
        rng = np.random.default_rng(777)
        for _ in range(n):
            radius = rng.uniform(13.0, 45.0)
            spec = AgglomerateSpec(
                [SphereSpec((rng.uniform(-2, 2), rng.uniform(-2, 2), 0.0), radius)],
                rng.uniform(0.02, 0.2), 0.0,
            )
            img, _ = render_agglomerate(spec, cfg)
            mask = segment(img).mask
            assert watershed_primaries(mask, params).count == 1
            assert ultimate_erosion_primaries(mask, params).count == 1
            assert hough_circle_primaries(img, params.ht).count == 1

    def test_all_methods_count_one_on_isolated_particles(self, params):
        self._run_suite(params, 25)

    @pytest.mark.slow
    def test_full_hundred_render_suite(self, params):
        self._run_suite(params, 100)


class TestSharedBits:
    def test_count_to_class(self):
        assert count_to_class(0) == 1
        assert count_to_class(1) == 1
        assert count_to_class(5) == 5
        assert count_to_class(6) == 6
        assert count_to_class(12) == 6

    def test_detected_primaries_validated(self):
        with pytest.raises(ValueError):
            DetectedPrimaries(2, [100.0])

    def test_params_validated(self):
        with pytest.raises(ValueError):
            HoughParams(r_min=30, r_max=20)
        with pytest.raises(ValueError):
            HoughParams(sensitivity=0.0)

    def test_tune_parameters_tiny_grid(self, params):
        cfg = RenderConfig()
        rng = np.random.default_rng(5)
        samples = []
        for klass in (1, 2):
            for _ in range(3):
                radius = rng.uniform(15, 40)
                if klass == 1:
                    spec = AgglomerateSpec([SphereSpec((0, 0, 0), radius)], 0.1, 0.0)
                else:
                    from agglom.synth import build_agglomerate

                    spec = build_agglomerate(2, [radius, radius * 0.8], rng, 0.1, 0.0)
                img, _ = render_agglomerate(spec, cfg)
                samples.append((img, segment(img).mask, klass))
        best, table = tune_parameters(
            samples, wst_grid=(0.5, 2.0), ue_grid=(2.0,),
            ht_sensitivity_grid=(0.25,), ht_edge_grid=(0.12,),
        )
        assert best.wst in (0.5, 2.0)
        assert set(table) == {"wst", "ue", "ht"}
        assert all(0.0 <= v <= 1.0 for v in table["wst"].values())
