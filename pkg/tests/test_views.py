import numpy as np
import pytest

from ssldet.geometry import Box
from ssldet.views import (
    ViewTriple,
    _project_to_crop,
    make_views,
    photometric,
    resample,
)


@pytest.fixture
def image():
    return np.random.default_rng(0).random((180, 240, 3))


@pytest.fixture
def proposals():
    return [Box(20, 20, 120, 100), Box(60, 30, 200, 160), Box(10, 90, 110, 170)]


class TestResample:
    def test_same_size_identity(self):
        img = np.random.default_rng(1).random((32, 48, 3))
        assert np.array_equal(resample(img, (32, 48)), img)

    def test_constant_preserved(self):
        img = np.full((20, 20, 3), 0.4)
        out = resample(img, (13, 29))
        assert np.abs(out - 0.4).max() < 1e-12

    def test_downsample_2x_averages(self):
        img = np.zeros((4, 4))
        img[0, 0] = img[0, 1] = img[1, 0] = img[1, 1] = 1.0
        out = resample(img, (2, 2))
        assert out[0, 0] == 1.0 and out[1, 1] == 0.0


class TestBoxProjection:
    def test_identity_crop(self):
        boxes = np.array([[56.0, 56.0, 168.0, 168.0], [10.0, 10.0, 30.0, 40.0]])
        out, valid = _project_to_crop(boxes, (0.0, 0.0, 224.0, 224.0))
        assert np.array_equal(out, boxes) and valid.all()

    def test_affine_example(self):
        out, valid = _project_to_crop(np.array([[56.0, 56.0, 168.0, 168.0]]), (56.0, 56.0, 168.0, 168.0))
        assert valid[0] and np.allclose(out[0], [0.0, 0.0, 224.0, 224.0])

    def test_outside_flagged_invalid(self):
        out, valid = _project_to_crop(np.array([[0.0, 0.0, 40.0, 40.0]]), (56.0, 56.0, 168.0, 168.0))
        assert not valid[0]

    def test_half_area_rule(self):
        # box [0,0,20,20]: crop starting at x=10 keeps exactly half the area
        out, valid = _project_to_crop(np.array([[0.0, 0.0, 20.0, 20.0]]), (10.0, 0.0, 122.0, 112.0))
        assert valid[0]
        out, valid = _project_to_crop(np.array([[0.0, 0.0, 20.0, 20.0]]), (10.1, 0.0, 122.1, 112.0))
        assert not valid[0]


class TestMakeViews:
    def test_shapes_and_v3_halving(self, image, proposals):
        vt = make_views(image, proposals, seed=42)
        assert vt.v1.shape == (224, 224, 3)
        assert vt.v2.shape == (224, 224, 3)
        assert vt.v3.shape == (112, 112, 3)
        assert np.array_equal(vt.boxes_v3, vt.boxes_v2 * 0.5)

    def test_v1_box_scaling(self, image, proposals):
        vt = make_views(image, proposals, seed=0)
        sx, sy = 224 / image.shape[1], 224 / image.shape[0]
        want = np.array([[b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy] for b in proposals])
        assert np.allclose(vt.boxes_v1, want)

    def test_deterministic(self, image, proposals):
        a = make_views(image, proposals, seed=7)
        b = make_views(image, proposals, seed=7)
        assert np.array_equal(a.v1, b.v1)
        assert np.array_equal(a.v2, b.v2)
        assert np.array_equal(a.v3, b.v3)
        assert np.array_equal(a.boxes_v2, b.boxes_v2)
        assert a.crop == b.crop

    def test_crop_record_within_v1(self, image, proposals):
        for seed in range(10):
            vt = make_views(image, proposals, seed=seed)
            cx1, cy1, cx2, cy2 = vt.crop
            assert 0 <= cx1 < cx2 <= 224 and 0 <= cy1 < cy2 <= 224
            side = cx2 - cx1
            assert side == pytest.approx(cy2 - cy1)
            assert 0.5 <= (side / 224) ** 2 <= 1.0 + 1e-12

    def test_composition_v1_to_v3_direct(self, image, proposals):
        vt = make_views(image, proposals, seed=3)
        cx1, cy1, cx2, cy2 = vt.crop
        scale = 112 / (cx2 - cx1)
        direct = (vt.boxes_v1[vt.valid] - np.array([cx1, cy1, cx1, cy1])) * scale
        chained = vt.boxes_v3[vt.valid]
        unclipped = ~(
            (vt.boxes_v1[vt.valid, 0] < cx1)
            | (vt.boxes_v1[vt.valid, 1] < cy1)
            | (vt.boxes_v1[vt.valid, 2] > cx2)
            | (vt.boxes_v1[vt.valid, 3] > cy2)
        )
        assert np.array_equal(direct[unclipped], chained[unclipped])

    def test_area_ordering_preserved(self, image):
        rng = np.random.default_rng(11)
        boxes = []
        for _ in range(6):
            x1, y1 = rng.uniform(0, 100, 2)
            boxes.append(Box(x1, y1, x1 + rng.uniform(20, 70), y1 + rng.uniform(20, 70)))
        for seed in range(8):
            vt = make_views(image, boxes, seed=seed)
            v1a = (vt.boxes_v1[:, 2] - vt.boxes_v1[:, 0]) * (vt.boxes_v1[:, 3] - vt.boxes_v1[:, 1])
            v2a = (vt.boxes_v2[:, 2] - vt.boxes_v2[:, 0]) * (vt.boxes_v2[:, 3] - vt.boxes_v2[:, 1])
            idx = np.flatnonzero(vt.valid)
            for i in idx:
                for j in idx:
                    # larger V1 area implies larger-or-equal V2 area
                    unclipped = all(
                        vt.boxes_v1[k, 0] >= vt.crop[0]
                        and vt.boxes_v1[k, 1] >= vt.crop[1]
                        and vt.boxes_v1[k, 2] <= vt.crop[2]
                        and vt.boxes_v1[k, 3] <= vt.crop[3]
                        for k in (i, j)
                    )
                    if unclipped and v1a[i] > v1a[j]:
                        assert v2a[i] >= v2a[j]

    def test_project_extra_boxes_matches_primary(self, image, proposals):
        vt = make_views(image, proposals, seed=5)
        v1, v2, v3, valid = vt.project_boxes(vt.boxes_v1)
        assert np.array_equal(v1, vt.boxes_v1)
        assert np.array_equal(v2, vt.boxes_v2)
        assert np.array_equal(v3, vt.boxes_v3)
        assert np.array_equal(valid, vt.valid)


class TestPhotometric:
    def test_deterministic(self, image):
        assert np.array_equal(photometric(image, 9), photometric(image, 9))

    def test_bounds(self, image):
        for seed in range(12):
            out = photometric(image, seed)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_noop_seed_identity(self, image):
        for seed in range(400):
            rng = np.random.default_rng(seed)
            if all(not (rng.random() < 0.5) for _ in range(4)):
                assert np.array_equal(photometric(image, seed), image)
                return
        pytest.fail("no all-skip seed found in 400 tries")

    def test_blur_of_constant_is_constant(self):
        grey = np.full((24, 24, 3), 0.5)
        for seed in range(400):
            rng = np.random.default_rng(seed)
            flags = [rng.random() < 0.5 for _ in range(4)]
            if flags == [False, False, False, True]:
                out = photometric(grey, seed)
                assert np.abs(out - grey).max() < 1e-12
                return
        pytest.fail("no blur-only seed found in 400 tries")
