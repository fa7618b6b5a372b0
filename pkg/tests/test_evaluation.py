import numpy as np
import pytest

from ssldet.evaluation import (
    ErrorReport,
    average_precision,
    mean_best_iou,
    proposal_recall,
    read_detections_file,
    stratify_errors,
    write_detections_file,
    write_pr_curve_svg,
)
from ssldet.geometry import Box


def det(x1, y1, x2, y2, score, cls=0):
    return Box(x1, y1, x2, y2, score, cls)


def gt(x1, y1, x2, y2, cls=0):
    return Box(x1, y1, x2, y2, 1.0, cls)


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = {"a": [gt(0, 0, 10, 10), gt(20, 20, 40, 45)]}
        dets = {"a": [b.with_score(1.0) for b in gts["a"]]}
        assert average_precision(dets, gts) == 1.0

    def test_no_detections(self):
        assert average_precision({"a": []}, {"a": [gt(0, 0, 10, 10)]}) == 0.0

    def test_correct_then_disjoint_gives_full_ap(self):
        # hand-computed PR oracle: tp at rank 1 -> recall 1, precision 1;
        # the rank-2 false positive only lowers precision past full recall,
        # so the all-point interpolated area stays 1.0
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.8)]}
        assert average_precision(dets, gts) == 1.0

    def test_half_recall_oracle(self):
        # 2 gt, 1 perfect detection: PR curve is a single point (r=0.5, p=1);
        # all-point area = 0.5
        gts = {"a": [gt(0, 0, 10, 10), gt(30, 30, 40, 40)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9)]}
        assert average_precision(dets, gts) == 0.5

    def test_fp_before_tp_oracle(self):
        # rank 1 disjoint FP, rank 2 perfect TP: precision at full recall is
        # 1/2 and the envelope is flat, so AP = 0.5
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.8)]}
        assert average_precision(dets, gts) == 0.5

    def test_monotone_score_rescaling_invariant(self):
        rng = np.random.default_rng(0)
        gts = {"a": [gt(0, 0, 10, 10), gt(30, 30, 50, 60)], "b": [gt(5, 5, 25, 25)]}
        dets = {
            "a": [det(1, 0, 10, 10, 0.7), det(28, 31, 52, 58, 0.4), det(80, 80, 90, 90, 0.6)],
            "b": [det(5, 6, 24, 26, 0.5)],
        }
        base = average_precision(dets, gts)
        remapped = {
            img: [b.with_score(0.1 + 0.5 * b.score**3) for b in boxes]
            for img, boxes in dets.items()
        }
        assert average_precision(remapped, gts) == base

    def test_classes_scored_independently(self):
        gts = {"a": [gt(0, 0, 10, 10, cls=0), gt(30, 30, 40, 40, cls=1)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9, cls=0)]}
        # class 0 AP = 1, class 1 AP = 0 -> mean 0.5
        assert average_precision(dets, gts) == 0.5

    def test_duplicate_detection_is_fp(self):
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]}
        assert average_precision(dets, gts) == 1.0  # dup only trails the curve


class TestProposalRecall:
    def test_superset_full_recall(self):
        gts = {"a": [gt(0, 0, 10, 10)]}
        props = {"a": [Box(0, 0, 10, 10), Box(50, 50, 60, 60)]}
        assert proposal_recall(props, gts) == 1.0

    def test_disjoint_zero(self):
        gts = {"a": [gt(0, 0, 10, 10)]}
        assert proposal_recall({"a": [Box(80, 80, 90, 90)]}, gts) == 0.0

    def test_half_covered(self):
        gts = {"a": [gt(0, 0, 10, 10)], "b": [gt(0, 0, 10, 10)]}
        props = {"a": [Box(0, 0, 10, 10)], "b": []}
        assert proposal_recall(props, gts) == 0.5

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError):
            proposal_recall({"a": []}, {"a": []})


class TestMeanBestIoU:
    def test_perfect(self):
        refs = {"a": [Box(0, 0, 10, 10)]}
        assert mean_best_iou({"a": [Box(0, 0, 10, 10)]}, refs) == 1.0

    def test_mixed(self):
        refs = {"a": [Box(0, 0, 10, 10)]}
        props = {"a": [Box(0, 0, 10, 10), Box(50, 50, 60, 60)]}
        assert mean_best_iou(props, refs) == 0.5


class TestStratifyErrors:
    def test_perfect_zero_report(self):
        gts = {"a": [gt(0, 0, 10, 10), gt(30, 30, 50, 60)]}
        dets = {"a": [b.with_score(0.9) for b in gts["a"]]}
        rep = stratify_errors(dets, gts)
        assert rep.base_map == 1.0
        assert all(v == 0.0 for v in rep.columns().values())

    def test_loc_error_two_pass_oracle(self):
        # one gt, one same-class detection at IoU ~0.4: base mAP 0; the Loc
        # fix snaps the box onto the gt, so fixed mAP is 1 and dLoc = 1
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(4, 0, 14, 10, 0.9)]}  # IoU = 6/14 ~ 0.43
        rep = stratify_errors(dets, gts)
        assert rep.base_map == 0.0
        assert rep.d_loc == 1.0
        assert rep.counts["Loc"] == 1
        assert rep.d_bkg == 0.0 and rep.d_dupe == 0.0

    def test_bkg_error_two_pass_oracle(self):
        # a perfect match plus a background detection at lower score: base
        # mAP 1 already (FP trails), so removing it cannot help; put the FP
        # first by score to make it cost headroom
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(70, 70, 90, 90, 0.95), det(0, 0, 10, 10, 0.9)]}
        rep = stratify_errors(dets, gts)
        assert rep.counts["Bkg"] == 1
        assert rep.base_map == 0.5
        assert rep.d_bkg == pytest.approx(0.5)

    def test_dupe_error(self):
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]}
        rep = stratify_errors(dets, gts)
        assert rep.counts["Dupe"] == 1

    def test_cls_error(self):
        gts = {"a": [gt(0, 0, 10, 10, cls=1)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9, cls=0)]}
        rep = stratify_errors(dets, gts)
        assert rep.counts["Cls"] == 1
        # fixing the class turns it into a perfect detection of class 1
        assert rep.d_cls == 1.0

    def test_miss_and_false_neg(self):
        gts = {"a": [gt(0, 0, 10, 10), gt(40, 40, 60, 60)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9)]}
        rep = stratify_errors(dets, gts)
        assert rep.counts["Miss"] == 1
        assert rep.d_miss == pytest.approx(0.5)  # dropping missed gt: recall -> 1
        assert rep.d_false_neg == pytest.approx(0.5)  # adding it as a det

    def test_partition_each_fp_one_category(self):
        rng = np.random.default_rng(1)
        gts = {}
        dets = {}
        for i in range(6):
            img = f"im{i}"
            gts[img] = [gt(10, 10, 60, 60, cls=int(rng.integers(0, 2)))]
            dets[img] = [
                det(
                    float(rng.uniform(0, 40)), float(rng.uniform(0, 40)),
                    float(rng.uniform(45, 90)), float(rng.uniform(45, 90)),
                    round(float(rng.random()), 3), int(rng.integers(0, 2)),
                )
                for _ in range(3)
            ]
        rep = stratify_errors(dets, gts)
        n_fp_classified = sum(rep.counts[c] for c in ("Cls", "Loc", "Dupe", "Bkg"))
        assert n_fp_classified == rep.counts["FalsePos"]

    def test_all_deltas_nonnegative_random(self):
        rng = np.random.default_rng(2)
        for trial in range(15):
            gts, dets = {}, {}
            for i in range(4):
                img = f"im{i}"
                gts[img] = []
                for _ in range(int(rng.integers(1, 4))):
                    x1, y1 = rng.uniform(0, 60, 2)
                    gts[img].append(
                        gt(float(x1), float(y1), float(x1 + rng.uniform(8, 30)), float(y1 + rng.uniform(8, 30)),
                           cls=int(rng.integers(0, 2)))
                    )
                dets[img] = []
                for _ in range(int(rng.integers(0, 5))):
                    x1, y1 = rng.uniform(0, 70, 2)
                    dets[img].append(
                        det(float(x1), float(y1), float(x1 + rng.uniform(5, 35)), float(y1 + rng.uniform(5, 35)),
                            round(float(rng.random()), 3), int(rng.integers(0, 2)))
                    )
            rep = stratify_errors(dets, gts)
            for name, val in rep.columns().items():
                assert val >= -1e-12, (trial, name, val)

    def test_report_has_all_seven_columns(self):
        rep = ErrorReport(base_map=0.5)
        assert list(rep.columns()) == ["Cls", "Loc", "Dupe", "Bkg", "Miss", "FalsePos", "FalseNeg"]
        table = rep.to_table()
        for col in rep.columns():
            assert col in table


class TestDetectionsFile:
    def test_roundtrip(self, tmp_path):
        dets = {
            "img1": [det(1.5, 2.0, 10.25, 12.0, 0.75, 0)],
            "img2": [det(0.0, 0.0, 5.5, 5.5, 0.5, 1), det(3.0, 3.0, 9.0, 9.0, 0.25, 0)],
        }
        path = tmp_path / "dets.txt"
        write_detections_file(path, dets)
        back = read_detections_file(path)
        assert back == dets

    def test_svg_written(self, tmp_path):
        gts = {"a": [gt(0, 0, 10, 10)]}
        dets = {"a": [det(0, 0, 10, 10, 0.9)]}
        out = tmp_path / "pr.svg"
        write_pr_curve_svg(out, dets, gts)
        text = out.read_text()
        assert text.startswith("<svg") and "polyline" in text
