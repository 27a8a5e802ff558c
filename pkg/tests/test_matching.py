import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mv3d.matching import (DEFAULT_LAMBDAS, Assignment, MatchCostConfig,
                           brute_force_min_cost, focal_loss, giou_loss, giou_np,
                           global_cost_matrix, hungarian, joint_loss, mask_losses,
                           pairwise_cost)
from mv3d.nn.gradcheck import grad_check
from mv3d.nn.tensor import Tensor
from mv3d.rng import Stream

CFG = MatchCostConfig()


class TestPairwiseCost:
    def test_perfect_prediction_costs_minus_wcls(self):
        box = np.array([0.2, 0.2, 0.6, 0.7])
        p = np.array([0.1, 0.2, 0.3])
        cost = pairwise_cost(box, 1.0, p, box, p, CFG)
        assert np.isclose(cost, -CFG.w_cls)

    def test_moving_box_away_increases_cost(self):
        box = np.array([0.2, 0.2, 0.6, 0.7])
        p = np.array([0.1, 0.2, 0.3])
        base = pairwise_cost(box, 0.7, p, box, p, CFG)
        moved = pairwise_cost(box + 0.1, 0.7, p, box, p, CFG)
        assert moved > base

    def test_matches_independent_formula(self):
        s = Stream(1)
        pb = np.sort(s.uniform(4), kind="stable")
        tb = np.sort(s.uniform(4), kind="stable")
        prob = float(s.uniform())
        pp, tp = s.normal(3), s.normal(3)
        got = pairwise_cost(pb, prob, pp, tb, tp, CFG)
        ref = (CFG.w_cls * (-prob) + CFG.w_box * np.abs(pb - tb).sum()
               + CFG.w_giou * (1.0 - giou_np(pb, tb)[0])
               + CFG.w_3d * np.abs(pp - tp).sum())
        assert abs(got - ref) < 1e-12


class TestGlobalCost:
    def _fake(self, vis):
        from mv3d.scene import SceneTruth

        v, k = vis.shape
        return SceneTruth(
            instance_ids=np.arange(k), class_ids=np.ones(k, dtype=int),
            boxes=np.tile(np.array([0.2, 0.2, 0.5, 0.5]), (v, k, 1)),
            masks=np.ones((v, k, 4, 4), dtype=bool), vis=vis,
            centroids=np.zeros((k, 3)), view_centroids=np.zeros((v, k, 3)),
            dense_points=np.zeros((k, 8, 3)), p_ee=np.zeros(3))

    def test_two_views_average(self):
        from mv3d.instance import ProbeOutputs

        truth = self._fake(np.array([[True], [True]]))
        boxes = np.zeros((2, 1, 4))
        boxes[0, 0] = [0.2, 0.2, 0.5, 0.5]   # perfect in view 0
        boxes[1, 0] = [0.3, 0.3, 0.6, 0.6]   # shifted in view 1
        out = ProbeOutputs(
            class_logits=Tensor(np.array([100.0])), boxes=Tensor(boxes),
            mask_logits=Tensor(np.zeros((2, 1, 4, 4))),
            points=Tensor(np.zeros((1, 3))), semantics=Tensor(np.zeros((1, 4))),
            gates=Tensor(np.ones((2, 1))))
        cost = global_cost_matrix(out, truth, CFG)
        c0 = pairwise_cost(boxes[0, 0], 1.0, np.zeros(3),
                           truth.boxes[0, 0], np.zeros(3), CFG)
        c1 = pairwise_cost(boxes[1, 0], 1.0, np.zeros(3),
                           truth.boxes[1, 0], np.zeros(3), CFG)
        assert np.isclose(cost[0, 0], 0.5 * (c0 + c1), atol=1e-6)

    def test_single_view_returns_it(self):
        from mv3d.instance import ProbeOutputs

        truth = self._fake(np.array([[True], [False]]))
        boxes = np.tile(np.array([0.2, 0.2, 0.5, 0.5]), (2, 1, 1))
        out = ProbeOutputs(
            class_logits=Tensor(np.array([100.0])), boxes=Tensor(boxes),
            mask_logits=Tensor(np.zeros((2, 1, 4, 4))),
            points=Tensor(np.zeros((1, 3))), semantics=Tensor(np.zeros((1, 4))),
            gates=Tensor(np.ones((2, 1))))
        cost = global_cost_matrix(out, truth, CFG)
        assert np.isclose(cost[0, 0], -CFG.w_cls, atol=1e-6)

    def test_no_valid_views_zero_cost(self):
        from mv3d.instance import ProbeOutputs

        truth = self._fake(np.array([[False], [False]]))
        out = ProbeOutputs(
            class_logits=Tensor(np.array([0.0])),
            boxes=Tensor(np.zeros((2, 1, 4))),
            mask_logits=Tensor(np.zeros((2, 1, 4, 4))),
            points=Tensor(np.zeros((1, 3))), semantics=Tensor(np.zeros((1, 4))),
            gates=Tensor(np.ones((2, 1))))
        cost = global_cost_matrix(out, truth, CFG)
        assert cost[0, 0] == 0.0


class TestHungarian:
    def test_zero_diagonal_identity(self):
        cost = np.ones((3, 3)) - np.eye(3)
        asn = hungarian(cost)
        assert np.array_equal(asn.probe_idx, [0, 1, 2])
        assert np.array_equal(asn.target_idx, [0, 1, 2])

    def test_two_by_two(self):
        asn = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        total = 1.0 + 1.0
        got = sum(np.array([[1.0, 2.0], [2.0, 1.0]])[p, t]
                  for p, t in zip(asn.probe_idx, asn.target_idx))
        assert got == total

    def test_three_by_three_enumerated(self):
        cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
        asn = hungarian(cost)
        total = sum(cost[p, t] for p, t in zip(asn.probe_idx, asn.target_idx))
        assert total == 5.0
        assert brute_force_min_cost(cost) == 5.0

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.array([[np.inf, 1.0], [1.0, 2.0]]))

    def test_more_targets_than_probes_rejected(self):
        with pytest.raises(ValueError):
            hungarian(np.zeros((2, 3)))

    def test_row_constant_invariance(self):
        s = Stream(5)
        cost = s.uniform((5, 4))
        base = hungarian(cost)
        shifted = cost.copy()
        shifted[2] += 7.0
        after = hungarian(shifted)
        t0 = sum(cost[p, t] for p, t in zip(base.probe_idx, base.target_idx))
        t1 = sum(cost[p, t] for p, t in zip(after.probe_idx, after.target_idx))
        assert np.isclose(t0, t1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        s = Stream(seed)
        m = int(s.integers(1, 6))
        n = int(s.integers(m, 6))
        cost = s.uniform((n, m), 0.0, 10.0)
        asn = hungarian(cost)
        total = float(cost[asn.probe_idx, asn.target_idx].sum())
        assert abs(total - brute_force_min_cost(cost)) < 1e-9


class TestFocalLoss:
    def test_perfect_confidence_zero(self):
        logits = Tensor(np.array([1000.0, -1000.0]))
        out = focal_loss(logits, np.array([1.0, 0.0]))
        assert float(out.data) < 1e-12

    def test_reduces_to_cross_entropy(self):
        logits = Tensor(np.array([0.0]))
        out = focal_loss(logits, np.array([1.0]), gamma=0.0, alpha=1.0)
        assert np.isclose(float(out.data), np.log(2.0))

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros(2)), np.array([0.5, 1.0]))

    def test_gradcheck(self):
        logits = Tensor(Stream(7).normal(6), requires_grad=True)
        labels = (Stream(8).uniform(6) < 0.4).astype(float)
        rep = grad_check(lambda: focal_loss(logits, labels), {"l": logits})
        assert rep.passed


class TestGiouLoss:
    def test_identical_boxes_zero(self):
        b = Tensor(np.array([[0.1, 0.1, 0.4, 0.5]]))
        assert float(giou_loss(b, b).data) < 1e-12

    def test_disjoint_units(self):
        a = Tensor(np.array([[0.0, 0.0, 1.0, 1.0]]))
        b = Tensor(np.array([[2.0, 2.0, 3.0, 3.0]]))
        assert np.isclose(float(giou_loss(a, b).data), 16.0 / 9.0)

    def test_range_bounded_10k(self):
        s = Stream(9)
        a = np.sort(s.uniform((10000, 2, 2)), axis=1).reshape(10000, 4)[:, [0, 2, 1, 3]]
        b = np.sort(s.uniform((10000, 2, 2)), axis=1).reshape(10000, 4)[:, [0, 2, 1, 3]]
        # build valid corner boxes (x1<x2, y1<y2)
        a = np.stack([np.minimum(a[:, 0], a[:, 2]), np.minimum(a[:, 1], a[:, 3]),
                      np.maximum(a[:, 0], a[:, 2]) + 1e-3,
                      np.maximum(a[:, 1], a[:, 3]) + 1e-3], axis=-1)
        b = np.stack([np.minimum(b[:, 0], b[:, 2]), np.minimum(b[:, 1], b[:, 3]),
                      np.maximum(b[:, 0], b[:, 2]) + 1e-3,
                      np.maximum(b[:, 1], b[:, 3]) + 1e-3], axis=-1)
        vals = 1.0 - giou_np(a, b)
        assert vals.min() >= 0.0 and vals.max() <= 2.0

    def test_degenerate_box_defined(self):
        a = Tensor(np.array([[0.5, 0.5, 0.5, 0.5]]))
        b = Tensor(np.array([[0.0, 0.0, 1.0, 1.0]]))
        out = float(giou_loss(a, b).data)
        assert np.isfinite(out)

    def test_gradcheck(self):
        s = Stream(10)
        a = Tensor(np.array([[0.1, 0.2, 0.5, 0.6], [0.3, 0.1, 0.9, 0.5]]),
                   requires_grad=True)
        b = Tensor(np.array([[0.2, 0.2, 0.6, 0.7], [0.1, 0.3, 0.5, 0.8]]))
        rep = grad_check(lambda: giou_loss(a, b), {"a": a})
        assert rep.passed


class TestMaskLosses:
    def test_perfect_saturated_mask(self):
        target = (Stream(11).uniform((6, 6)) < 0.5).astype(float)
        logits = Tensor(np.where(target > 0, 1000.0, -1000.0))
        ce, dice = mask_losses(logits, target)
        assert float(ce.data) < 1e-9
        assert float(dice.data) < 1e-3

    def test_smoothing_arithmetic(self):
        logits = Tensor(np.full((2, 2), -1000.0))  # probability ~ 0
        target = np.ones((2, 2))
        _, dice = mask_losses(logits, target, smooth=1.0)
        assert np.isclose(float(dice.data), 0.8)

    def test_dice_symmetry(self):
        s = Stream(12)
        p = s.uniform((4, 4))
        q = s.uniform((4, 4))
        logit_p = np.log(p / (1 - p))
        logit_q = np.log(q / (1 - q))
        _, d1 = mask_losses(Tensor(logit_p), q)
        _, d2 = mask_losses(Tensor(logit_q), p)
        assert np.isclose(float(d1.data), float(d2.data), atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_losses(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))

    def test_gradcheck(self):
        ml = Tensor(Stream(13).normal((4, 4)), requires_grad=True)
        tgt = (Stream(14).uniform((4, 4)) < 0.5).astype(float)
        rep = grad_check(lambda: mask_losses(ml, tgt)[0]
                         + 2.0 * mask_losses(ml, tgt)[1], {"ml": ml})
        assert rep.passed


def perfect_outputs_for(truth, nq):
    """Probe outputs reproducing the truth exactly (high-confidence)."""
    from mv3d.instance import ProbeOutputs

    v, k = truth.vis.shape
    boxes = np.tile(np.array([0.4, 0.4, 0.6, 0.6]), (v, nq, 1))
    masks = np.full((v, nq, *truth.masks.shape[2:]), -1000.0)
    logits = np.full(nq, -1000.0)
    pts = np.zeros((nq, 3))
    pseudo = truth.pseudo_centroids()
    for t in range(k):
        boxes[:, t] = truth.boxes[:, t]
        masks[:, t] = np.where(truth.masks[:, t], 1000.0, -1000.0)
        logits[t] = 1000.0
        pts[t] = pseudo[t]
    return ProbeOutputs(
        class_logits=Tensor(logits), boxes=Tensor(boxes),
        mask_logits=Tensor(masks), points=Tensor(pts),
        semantics=Tensor(np.zeros((nq, 4))), gates=Tensor(np.ones((v, nq))))


class TestJointLoss:
    def _truth(self):
        from mv3d.scene import SceneSpec, generate_scene

        return generate_scene(2, SceneSpec(num_objects=2, num_views=2,
                                           feat_hw=32)).truth

    def test_perfect_predictions_leave_only_cls(self):
        truth = self._truth()
        out = perfect_outputs_for(truth, nq=4)
        cost = global_cost_matrix(out, truth, CFG)
        asn = hungarian(cost)
        rep = joint_loss(out, truth, asn)
        for term in ("box", "giou", "mask", "l1_3d"):
            assert rep.terms[term] < 1e-9, term
        assert rep.terms["dice"] < 1e-3
        assert rep.terms["cls"] < 1e-9
        assert rep.total < 1e-2

    def test_default_lambdas_used_when_omitted(self):
        truth = self._truth()
        out = perfect_outputs_for(truth, nq=4)
        asn = hungarian(global_cost_matrix(out, truth, CFG))
        rep = joint_loss(out, truth, asn)
        assert rep.lambdas == DEFAULT_LAMBDAS
        assert rep.lambdas["cls"] == 2.0 and rep.lambdas["box"] == 5.0
        assert rep.lambdas["dice"] == 5.0 and rep.lambdas["l1_3d"] == 5.0

    def test_total_recomposes_exactly(self):
        truth = self._truth()
        s = Stream(15)
        from mv3d.instance import ProbeOutputs

        v = 2
        nq = 6
        out = ProbeOutputs(
            class_logits=Tensor(s.normal(nq)),
            boxes=Tensor(np.sort(s.uniform((v, nq, 2, 2)), axis=2)
                         .transpose(0, 1, 3, 2).reshape(v, nq, 4)),
            mask_logits=Tensor(s.normal((v, nq, *truth.masks.shape[2:]))),
            points=Tensor(s.normal((nq, 3)) * 0.2),
            semantics=Tensor(s.normal((nq, 4))), gates=Tensor(np.ones((v, nq))))
        asn = hungarian(global_cost_matrix(out, truth, CFG))
        rep = joint_loss(out, truth, asn)
        recomposed = sum(rep.lambdas[k] * rep.terms[k] for k in rep.terms)
        assert abs(recomposed - rep.total) < 1e-12
        assert all(v >= 0 for v in rep.terms.values())

    def test_full_gradient_through_all_terms(self):
        truth = self._truth()
        s = Stream(16)
        from mv3d.instance import ProbeOutputs

        v, nq = 2, 3
        logits = Tensor(s.normal(nq), requires_grad=True)
        raw_boxes = Tensor(s.normal((v, nq, 4)) * 0.1, requires_grad=True)
        masks = Tensor(s.normal((v, nq, *truth.masks.shape[2:])),
                       requires_grad=True)
        pts = Tensor(s.normal((nq, 3)) * 0.2, requires_grad=True)

        def outputs():
            half = raw_boxes.sigmoid() * 0.5
            corners = __import__("mv3d.nn.tensor", fromlist=["concat"]).concat(
                [half[..., :2] * 0.5, half[..., :2] * 0.5 + half[..., 2:] + 0.01],
                axis=-1)
            return ProbeOutputs(class_logits=logits, boxes=corners,
                                mask_logits=masks, points=pts,
                                semantics=Tensor(np.zeros((nq, 4))),
                                gates=Tensor(np.ones((v, nq))))

        asn = hungarian(global_cost_matrix(outputs(), truth, CFG))

        def loss():
            return joint_loss(outputs(), truth, asn).total_tensor()

        rep = grad_check(loss, {"logits": logits, "boxes": raw_boxes,
                                "masks": masks, "pts": pts},
                         max_elements=20, stream=Stream(17))
        assert rep.passed, rep.per_param

    def test_empty_scene_classification_only(self):
        from mv3d.scene import SceneSpec, generate_scene

        truth = generate_scene(0, SceneSpec(num_objects=0, num_views=2,
                                            feat_hw=32)).truth
        out = perfect_outputs_for(truth, nq=4)
        asn = Assignment(probe_idx=np.array([], dtype=int),
                         target_idx=np.array([], dtype=int), num_probes=4)
        rep = joint_loss(out, truth, asn)
        for term in ("box", "giou", "mask", "dice", "l1_3d"):
            assert rep.terms[term] == 0.0
