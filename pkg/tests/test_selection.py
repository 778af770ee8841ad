import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudolab.datasets import ORIGIN_PSEUDO
from pseudolab.errors import ConfigError, DatasetFormatError
from pseudolab.geometry import BBox
from pseudolab.selection import (
    Detection,
    PseudoLabelSelector,
    SelectionCriterion,
    accept_one,
    load_detections,
    save_detections,
    select_ugt,
    sweep_thresholds,
)

from conftest import make_image, manual
from pseudolab.datasets import DatasetSnapshot


def det(image_id="a", x=70.0, y=70.0, w=10.0, h=10.0, c=1, score=0.9):
    return Detection(image_id=image_id, box=BBox(x, y, w, h), category=c, score=score)


class TestDetection:
    def test_score_open_interval(self):
        with pytest.raises(ValueError):
            det(score=0.0)
        with pytest.raises(ValueError):
            det(score=1.0)
        assert det(score=1e-9).score == 1e-9

    def test_empty_image_id(self):
        with pytest.raises(ValueError):
            det(image_id="")

    def test_category_checked(self):
        with pytest.raises(ValueError):
            det(c=5)


class TestCriterion:
    def test_defaults(self):
        crit = SelectionCriterion()
        assert crit.p_threshold == 0.3
        assert crit.lgt_iou_ceiling == 0.05
        assert crit.dedup_iou == 0.5
        assert crit.category_specific is True

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            SelectionCriterion(p_threshold=1.0)
        SelectionCriterion(p_threshold=0.0)

    def test_ceiling_open(self):
        with pytest.raises(ValueError):
            SelectionCriterion(lgt_iou_ceiling=0.0)


class TestAcceptOne:
    def test_both_clauses_required(self):
        crit = SelectionCriterion(p_threshold=0.3, lgt_iou_ceiling=0.05)
        existing = [manual(10, 10, 20, 20)]
        far_high = det(x=70, y=70, score=0.9)
        assert accept_one(far_high, existing, crit)
        near_high = det(x=12, y=12, w=20, h=20, score=0.9)
        assert not accept_one(near_high, existing, crit)
        far_low = det(x=70, y=70, score=0.2)
        assert not accept_one(far_low, existing, crit)

    def test_score_strictly_above(self):
        crit = SelectionCriterion(p_threshold=0.5)
        assert not accept_one(det(score=0.5), [], crit)
        assert accept_one(det(score=0.5000001), [], crit)

    def test_iou_strictly_below(self):
        # overlap tuned to exactly the ceiling: 10x10 boxes offset so
        # iou = 50/150 with ceiling 1/3 must be rejected
        crit = SelectionCriterion(lgt_iou_ceiling=1 / 3)
        existing = [manual(0, 0, 10, 10)]
        d = det(x=0, y=5, w=10, h=10, score=0.9)
        assert not accept_one(d, existing, crit)
        crit_looser = SelectionCriterion(lgt_iou_ceiling=1 / 3 + 1e-9)
        assert accept_one(d, existing, crit_looser)

    def test_exclusion_ignores_category(self):
        # spatial exclusion applies across categories
        crit = SelectionCriterion()
        existing = [manual(70, 70, 10, 10, c=1)]
        assert not accept_one(det(c=2, score=0.9), existing, crit)


class TestSelectUgt:
    def snapshot(self):
        return DatasetSnapshot(images=(
            make_image("a", annotations=[manual(10, 10, 20, 20, c=1)]),
            make_image("b"),
        ), round_index=0)

    def test_selects_qualifying(self):
        out = select_ugt([det()], self.snapshot(), SelectionCriterion())
        assert len(out) == 1
        lbl = out[0]
        assert lbl.image_id == "a"
        assert lbl.annotation.origin == ORIGIN_PSEUDO
        assert lbl.annotation.confidence == 0.9
        assert lbl.annotation.round_index == 1

    def test_round_index_defaults_to_next(self):
        snap = DatasetSnapshot(images=self.snapshot().images, round_index=3)
        out = select_ugt([det()], snap, SelectionCriterion())
        assert out[0].annotation.round_index == 4

    def test_threshold_filters(self):
        out = select_ugt([det(score=0.25)], self.snapshot(),
                         SelectionCriterion(p_threshold=0.3))
        assert out == []

    def test_overlap_with_manual_rejected(self):
        out = select_ugt([det(x=12, y=12, w=20, h=20)], self.snapshot(),
                         SelectionCriterion())
        assert out == []

    def test_empty_image_accepts(self):
        out = select_ugt([det(image_id="b", x=5, y=5)], self.snapshot(),
                         SelectionCriterion())
        assert len(out) == 1

    def test_unknown_image_rejected(self):
        with pytest.raises(DatasetFormatError):
            select_ugt([det(image_id="nope")], self.snapshot(), SelectionCriterion())

    def test_dedup_same_category(self):
        first = det(image_id="b", x=5, y=5, score=0.95)
        second = det(image_id="b", x=6, y=5, score=0.90)
        out = select_ugt([second, first], self.snapshot(), SelectionCriterion())
        # higher score wins the overlap, lower one deduped
        assert len(out) == 1
        assert out[0].annotation.confidence == 0.95

    def test_dedup_cross_category_kept_when_specific(self):
        first = det(image_id="b", x=5, y=5, c=1, score=0.95)
        second = det(image_id="b", x=5, y=5, c=2, score=0.90)
        out = select_ugt([first, second], self.snapshot(), SelectionCriterion())
        assert len(out) == 2

    def test_dedup_cross_category_dropped_when_not_specific(self):
        first = det(image_id="b", x=5, y=5, c=1, score=0.95)
        second = det(image_id="b", x=5, y=5, c=2, score=0.90)
        crit = SelectionCriterion(category_specific=False)
        out = select_ugt([first, second], self.snapshot(), crit)
        assert len(out) == 1

    def test_accepted_do_not_block_spatially(self):
        # acceptance dedup uses dedup_iou, not the exclusion ceiling:
        # two same-category boxes with iou 0.2 both pass
        first = det(image_id="b", x=0, y=0, w=10, h=10, score=0.95)
        second = det(image_id="b", x=0, y=6.6667, w=10, h=10, score=0.90)
        out = select_ugt([first, second], self.snapshot(), SelectionCriterion())
        assert len(out) == 2

    def test_monotone_in_threshold(self):
        import random
        rng = random.Random(0)
        dets = [det(image_id="b", x=rng.uniform(0, 80), y=rng.uniform(0, 80),
                    w=5, h=5, c=rng.choice([1, 2, 3, 4]),
                    score=rng.uniform(0.01, 0.99)) for _ in range(300)]
        snap = self.snapshot()
        prev = None
        for i in range(10):
            p = i / 10
            picked = {(l.image_id, l.annotation.box, l.annotation.category)
                      for l in select_ugt(dets, snap, SelectionCriterion(p_threshold=p))}
            if prev is not None:
                assert picked <= prev
            prev = picked

    @given(scores=st.lists(st.floats(0.01, 0.99), min_size=1, max_size=30),
           p=st.floats(0.0, 0.95))
    @settings(max_examples=50, deadline=None)
    def test_all_selected_scores_above_threshold(self, scores, p):
        dets = [det(image_id="b", x=3 * i % 80, y=(7 * i) % 80, w=2, h=2,
                    score=s) for i, s in enumerate(scores)]
        out = select_ugt(dets, self.snapshot(), SelectionCriterion(
            p_threshold=p, dedup_iou=1.0))
        for lbl in out:
            assert lbl.annotation.confidence > p


class TestSweep:
    def snapshot(self):
        return DatasetSnapshot(images=(make_image("b"),), round_index=0)

    def test_counts_non_increasing(self):
        import random
        rng = random.Random(1)
        dets = [det(image_id="b", x=rng.uniform(0, 90), y=rng.uniform(0, 90),
                    w=4, h=4, c=rng.choice([1, 2, 3, 4]),
                    score=rng.uniform(0.01, 0.99)) for _ in range(400)]
        grid = [i / 10 for i in range(10)]
        rows = sweep_thresholds(dets, self.snapshot(), grid)
        assert [p for p, _ in rows] == grid
        for c in (1, 2, 3, 4):
            col = [counts[c] for _, counts in rows]
            assert all(b <= a for a, b in zip(col, col[1:]))

    def test_rejects_unsorted_grid(self):
        with pytest.raises(ConfigError):
            sweep_thresholds([], self.snapshot(), [0.3, 0.1])

    def test_rejects_empty_grid(self):
        with pytest.raises(ConfigError):
            sweep_thresholds([], self.snapshot(), [])

    def test_all_categories_reported(self):
        rows = sweep_thresholds([det(image_id="b")], self.snapshot(), [0.0])
        assert set(rows[0][1]) == {1, 2, 3, 4}


class TestEstimator:
    def test_fit_transform(self):
        snap = DatasetSnapshot(images=(make_image("b"),), round_index=0)
        sel = PseudoLabelSelector(p_threshold=0.5)
        out = sel.fit(snap).transform([det(image_id="b", score=0.9),
                                       det(image_id="b", x=30, y=30, score=0.4)])
        assert len(out) == 1

    def test_unfitted_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            PseudoLabelSelector().transform([])

    def test_get_params_roundtrip(self):
        sel = PseudoLabelSelector(p_threshold=0.7)
        params = sel.get_params()
        assert params["p_threshold"] == 0.7
        sel2 = PseudoLabelSelector(**params)
        assert sel2.get_params() == params


class TestDetectionIo:
    def test_roundtrip(self, tmp_path):
        dets = [det(), det(image_id="b", x=1.5, y=2.25, c=3, score=0.123)]
        path = tmp_path / "d.jsonl"
        save_detections(dets, path)
        assert load_detections(path) == dets

    def test_jsonl_shape(self, tmp_path):
        path = tmp_path / "d.jsonl"
        save_detections([det()], path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        row = json.loads(lines[0])
        assert set(row) == {"image_id", "x", "y", "w", "h", "c", "score"}

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"image_id": "a", "x": 1, "y": 1, "w": 2, "h": 2, '
                        '"c": 1, "score": 0.5}\nnot json\n')
        with pytest.raises(DatasetFormatError) as exc:
            load_detections(path)
        assert ":2:" in str(exc.value)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"image_id": "a", "x": 1, "y": 1, "w": 2, "h": 2, "c": 1}\n')
        with pytest.raises(DatasetFormatError):
            load_detections(path)

    def test_blank_lines_ok(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('\n{"image_id": "a", "x": 1, "y": 1, "w": 2, "h": 2, '
                        '"c": 1, "score": 0.5}\n\n')
        assert len(load_detections(path)) == 1
