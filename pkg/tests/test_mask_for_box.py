import numpy as np
import pytest

from crosstask.geometry import Box, ScoredBox, SemanticMask, union_box
from crosstask.mask_for_box import (
    Origin,
    RefinedBox,
    RefinementParams,
    extract_reference_boxes,
    origin_counts,
    refine,
    refine_from_mask,
)
from naive_m4b import naive_refine
from synth import random_mask, random_predictions

P = RefinementParams()


def pred(box, scores, cat=None):
    scores = tuple(scores)
    cat = cat or int(np.argmax(scores)) + 1
    return ScoredBox(Box(*box), cat, scores, max(scores))


class TestParams:
    def test_defaults(self):
        assert (P.split_conf, P.split_iou, P.split_bonus) == (0.4, 0.6, 0.1)
        assert (P.merge_conf, P.merge_bonus, P.conf_cap) == (0.1, 0.4, 0.9)
        assert (P.add_conf, P.add_iou, P.nms_iou, P.touch_tol) == (0.5, 0.8, 0.4, 0.1)
        assert P.max_powerset_members == 16

    @pytest.mark.parametrize("kw", [{"split_conf": 1.2}, {"nms_iou": -0.1}, {"max_powerset_members": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RefinementParams(**kw)


class TestExtract:
    def test_background(self):
        assert extract_reference_boxes(SemanticMask.zeros(5, 5)) == []

    def test_rectangle(self):
        labels = np.zeros((30, 40), np.uint8)
        labels[4:20, 7:33] = 5
        assert extract_reference_boxes(SemanticMask(labels)) == [(Box(7, 4, 33, 20), 5)]

    def test_two_dogs_one_component(self):
        # two animals joined by a thin strip form a single multi-instance reference
        labels = np.zeros((40, 100), np.uint8)
        labels[5:35, 0:45] = 2
        labels[5:35, 55:100] = 2
        labels[20:22, 45:55] = 2
        refs = extract_reference_boxes(SemanticMask(labels))
        assert refs == [(Box(0, 5, 100, 35), 2)]


class TestHandTraced:
    def test_leftover_only(self):
        out = refine([(Box(10, 10, 50, 50), 2)], [], P)
        assert out == [RefinedBox(Box(10, 10, 50, 50), 2, 1.0, Origin.LEFTOVER)]

    def test_two_way_split(self):
        refs = [(Box(0, 0, 100, 40), 1)]
        preds = [pred((0, 0, 48, 40), [0.8]), pred((52, 0, 100, 40), [0.7])]
        out = refine(refs, preds, P)
        assert [(r.box, r.origin) for r in out] == [
            (Box(0, 0, 48, 40), Origin.SPLIT),
            (Box(52, 0, 100, 40), Origin.SPLIT),
        ]
        assert out[0].confidence == pytest.approx(0.9, abs=1e-9)
        assert out[1].confidence == pytest.approx(0.8, abs=1e-9)
        assert all(not r.train_classification for r in out)

    def test_merge(self):
        refs = [(Box(0, 0, 30, 40), 4), (Box(35, 0, 80, 40), 4)]
        preds = [pred((0, 0, 80, 40), [0, 0, 0, 0.3])]
        out = refine(refs, preds, P)
        assert len(out) == 1
        assert out[0].box == Box(0, 0, 80, 40)
        assert out[0].origin is Origin.MERGE
        assert out[0].confidence == pytest.approx(0.7, abs=1e-9)


class TestScenarios:
    def test_two_dog_mask_splits(self):
        labels = np.zeros((40, 100), np.uint8)
        labels[5:35, 0:45] = 2
        labels[5:35, 55:100] = 2
        labels[20:22, 45:55] = 2
        preds = [pred((1, 5, 46, 35), [0.1, 0.75]), pred((54, 6, 100, 35), [0.0, 0.65])]
        out = refine_from_mask(SemanticMask(labels), preds, P)
        assert {r.origin for r in out} == {Origin.SPLIT}
        assert sorted(r.box.as_tuple() for r in out) == [(0, 5, 46, 35), (54, 5, 100, 35)]

    def test_single_component_confident_prediction_is_added(self):
        labels = np.zeros((50, 50), np.uint8)
        labels[10:40, 10:40] = 1
        out = refine_from_mask(SemanticMask(labels), [pred((11, 10, 40, 39), [0.95])], P)
        # the split copy is capped at 0.9, so the raw 0.95 add copy wins NMS
        assert out == [RefinedBox(Box(10, 10, 40, 40), 1, 0.95, Origin.ADD)]

    def test_moderate_confidence_keeps_split_copy(self):
        labels = np.zeros((50, 50), np.uint8)
        labels[10:40, 10:40] = 1
        out = refine_from_mask(SemanticMask(labels), [pred((11, 10, 40, 39), [0.55])], P)
        assert [(r.box, r.origin) for r in out] == [(Box(10, 10, 40, 40), Origin.SPLIT)]
        assert out[0].confidence == pytest.approx(0.65)

    def test_add_and_merge_in_one_image(self):
        # a fragmented object (merge) next to a well-predicted one (add)
        labels = np.zeros((60, 120), np.uint8)
        labels[10:50, 5:25] = 3
        labels[10:50, 30:50] = 3
        labels[10:50, 70:110] = 1
        preds = [
            pred((5, 10, 50, 50), [0.0, 0.0, 0.35]),
            pred((70, 11, 110, 50), [0.97, 0.0, 0.0]),
        ]
        out = refine_from_mask(SemanticMask(labels), preds, P)
        got = {(r.origin, r.box.as_tuple()) for r in out}
        assert got == {(Origin.MERGE, (5, 10, 50, 50)), (Origin.ADD, (70, 10, 110, 50))}
        assert origin_counts(out) == {"split": 0, "merge": 1, "add": 1, "leftover": 0}

    def test_unmatched_fragment_stays_leftover(self):
        refs = [(Box(0, 0, 10, 10), 1), (Box(50, 50, 60, 60), 1)]
        preds = [pred((200, 200, 210, 210), [0.9])]
        out = refine(refs, preds, P)
        assert [r.origin for r in out] == [Origin.LEFTOVER, Origin.LEFTOVER]

    def test_low_merge_score_not_merged(self):
        refs = [(Box(0, 0, 30, 40), 4), (Box(35, 0, 80, 40), 4)]
        preds = [pred((0, 0, 80, 40), [0.9, 0, 0, 0.05])]
        out = refine(refs, preds, P)
        assert [r.origin for r in out] == [Origin.LEFTOVER, Origin.LEFTOVER]

    def test_category_out_of_range(self):
        with pytest.raises(ValueError):
            refine([(Box(0, 0, 5, 5), 3)], [pred((0, 0, 5, 5), [0.5])], P)

    def test_greedy_fallback_matches_naive(self):
        # 6 fragments of one class with a tiny powerset guard
        refs = [(Box(10 * i, 0, 10 * i + 8, 20), 1) for i in range(6)]
        preds = [pred((0, 0, 28, 20), [0.3]), pred((30, 0, 58, 20), [0.2])]
        params = RefinementParams(max_powerset_members=3)
        out = refine(refs, preds, params)
        assert out == naive_refine(refs, preds, params)
        assert any(r.origin is Origin.MERGE for r in out)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(150))
    def test_against_naive_and_invariants(self, seed):
        rng = np.random.default_rng(seed)
        mask = random_mask(rng, max_side=64)
        preds = random_predictions(rng, mask)
        refs = extract_reference_boxes(mask)
        out = refine(refs, preds, P)
        assert out == naive_refine(refs, preds, P)

        shuffled = list(preds)
        rng.shuffle(shuffled)
        assert refine(refs, shuffled, P) == out

        for r in out:
            if r.origin in (Origin.SPLIT, Origin.MERGE):
                assert r.confidence <= P.conf_cap
            if r.origin is Origin.ADD:
                assert any(r.confidence == p.scores[r.category - 1] for p in preds)
            if r.origin is Origin.LEFTOVER:
                assert (r.box, r.category) in refs
        leftovers = [r for r in out if r.origin is Origin.LEFTOVER]
        assert len(leftovers) == len({(r.box, r.category) for r in leftovers})
        if refs:
            bound = union_box([b for b, _ in refs] + [p.box for p in preds])
            for r in out:
                assert bound.x_min <= r.box.x_min and r.box.x_max <= bound.x_max
                assert bound.y_min <= r.box.y_min and r.box.y_max <= bound.y_max

    @pytest.mark.parametrize("seed", range(20))
    def test_no_predictions_is_identity(self, seed):
        mask = random_mask(np.random.default_rng(seed), max_side=64)
        refs = extract_reference_boxes(mask)
        out = refine(refs, [], P)
        assert [(r.box, r.category) for r in out] == refs
        assert all(r.confidence == 1.0 and r.origin is Origin.LEFTOVER for r in out)
