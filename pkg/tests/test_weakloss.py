import json
import math

import numpy as np
import pytest

from capdet.scorenet import MidScores, ScoreGrads, ScoreTensor
from capdet.textgraph import LabelSet
from capdet.weakloss import (
    LossWeights,
    entanglement_loss,
    mid_loss,
    object_mil_loss,
    total_loss,
)

CATS = {"color": ("red", "brown"), "size": ("small", "large")}


def labels_for(objects, pairs=None):
    return LabelSet(objects=set(objects), attribute_pairs={k: set(v) for k, v in (pairs or {}).items()})


class TestObjectMilLoss:
    def test_two_region_example(self):
        # class column (0.25, 0.5): best region is 1, loss -log(0.5)
        scores = np.array([[0.25, 0.75], [0.5, 0.5]])
        value, grad, chosen = object_mil_loss(scores, {0})
        assert value == pytest.approx(0.6931471805599453, abs=1e-12)
        assert chosen == {0: 1}
        assert grad[1, 0] == pytest.approx(-2.0)  # -1 / 0.5
        assert grad[0, 0] == 0.0
        assert not np.any(grad[:, 1])

    def test_empty_objects_short_circuits(self):
        scores = np.array([[0.25, 0.75]])
        value, grad, chosen = object_mil_loss(scores, set())
        assert value == 0.0
        assert not np.any(grad)
        assert chosen == {}

    def test_normalized_by_class_count(self):
        scores = np.array([[0.5, 0.25, 0.25], [0.1, 0.5, 0.4]])
        value, grad, _ = object_mil_loss(scores, {0, 1})
        assert value == pytest.approx(-(math.log(0.5) + math.log(0.5)) / 2)
        assert grad[0, 0] == pytest.approx(-1.0)  # -1/(2 * 0.5)
        assert grad[1, 1] == pytest.approx(-1.0)

    def test_tie_goes_to_lowest_region(self):
        scores = np.array([[0.4, 0.6], [0.4, 0.6]])
        _, _, chosen = object_mil_loss(scores, {0})
        assert chosen == {0: 0}

    def test_background_column_never_selected(self):
        # class index equal to the background column is rejected
        scores = np.array([[0.3, 0.7]])
        with pytest.raises(ValueError):
            object_mil_loss(scores, {1})

    def test_zero_score_is_clamped(self):
        scores = np.array([[0.0, 1.0]])
        value, grad, _ = object_mil_loss(scores, {0})
        assert np.isfinite(value)
        assert np.isfinite(grad).all()

    def test_finite_difference(self):
        rng = np.random.default_rng(31)
        raw = rng.uniform(0.05, 1.0, size=(5, 4))
        scores = raw / raw.sum(axis=1, keepdims=True)
        objects = {0, 2}
        _, grad, _ = object_mil_loss(scores, objects)
        h = 1e-7
        for i in range(5):
            for c in range(4):
                bumped = scores.copy()
                bumped[i, c] += h
                up, _, _ = object_mil_loss(bumped, objects)
                bumped[i, c] -= 2 * h
                down, _, _ = object_mil_loss(bumped, objects)
                numeric = (up - down) / (2 * h)
                assert grad[i, c] == pytest.approx(numeric, abs=1e-5)


class TestEntanglementLoss:
    def example(self):
        # object column for "cat" and color column for "brown"; the
        # coupled choice (region 1, product 0.40) differs from the
        # object-only argmax (region 0)
        obj = np.array([[0.9, 0.1], [0.5, 0.5]])
        attr = {
            "color": np.array([[0.1, 0.9], [0.8, 0.2]]),
            "size": np.array([[0.5, 0.5], [0.5, 0.5]]),
        }
        cats = {"color": ("brown", "red"), "size": ("small", "large")}
        labels = labels_for({0}, {0: {("color", "brown")}})
        return obj, attr, cats, labels

    def test_reference_example(self):
        obj, attr, cats, labels = self.example()
        value, grad_obj, grad_attr, chosen = entanglement_loss(obj, attr, labels, cats)
        assert chosen == {(0, "color", "brown"): 1}
        assert value == pytest.approx(0.916290731874155, abs=1e-12)
        assert grad_obj[1, 0] == pytest.approx(-2.0)  # -1 / 0.5
        assert grad_attr["color"][1, 0] == pytest.approx(-1.25)  # -1 / 0.8
        assert grad_obj[0, 0] == 0.0
        assert not np.any(grad_attr["size"])

    def test_coupled_argmax_differs_from_object_argmax(self):
        obj, attr, cats, labels = self.example()
        _, _, object_chosen = object_mil_loss(obj, labels.objects)
        _, _, _, coupled_chosen = entanglement_loss(obj, attr, labels, cats)
        assert object_chosen[0] == 0
        assert coupled_chosen[(0, "color", "brown")] == 1

    def test_no_pairs_short_circuits(self):
        obj, attr, cats, _ = self.example()
        value, g_obj, g_attr, chosen = entanglement_loss(obj, attr, labels_for({0}), cats)
        assert value == 0.0
        assert not np.any(g_obj)
        assert chosen == {}

    def test_object_normalization_default(self):
        obj, attr, cats, _ = self.example()
        labels = labels_for({0}, {0: {("color", "brown"), ("size", "small")}})
        value_obj, *_ = entanglement_loss(obj, attr, labels, cats)
        value_pair, *_ = entanglement_loss(obj, attr, labels, cats, per_pair_normalization=True)
        # one object, two pairs: per-pair halves the value
        assert value_pair == pytest.approx(value_obj / 2.0)

    def test_dominance_over_decoupled_selection(self):
        # the coupled choice maximizes the product, so its loss never
        # exceeds the loss at the object-only argmax
        rng = np.random.default_rng(37)
        strict = 0
        trials = 300
        for _ in range(trials):
            m = int(rng.integers(2, 8))
            obj = rng.uniform(0.01, 1.0, size=(m, 3))
            obj /= obj.sum(axis=1, keepdims=True)
            color = rng.uniform(0.01, 1.0, size=(m, 2))
            color /= color.sum(axis=1, keepdims=True)
            labels = labels_for({0}, {0: {("color", "red")}})
            cats = {"color": ("red", "brown")}
            value, *_ = entanglement_loss(obj, {"color": color}, labels, cats)
            i_obj = int(np.argmax(obj[:, 0]))
            decoupled = -(math.log(obj[i_obj, 0]) + math.log(color[i_obj, 0]))
            assert value <= decoupled + 1e-12
            if value < decoupled - 1e-12:
                strict += 1
        assert strict > 0

    def test_unknown_category_rejected(self):
        obj, attr, cats, _ = self.example()
        labels = labels_for({0}, {0: {("texture", "rough")}})
        with pytest.raises(ValueError):
            entanglement_loss(obj, attr, labels, cats)

    def test_unknown_value_rejected(self):
        obj, attr, cats, _ = self.example()
        labels = labels_for({0}, {0: {("color", "purple")}})
        with pytest.raises(ValueError):
            entanglement_loss(obj, attr, labels, cats)

    def test_finite_difference(self):
        rng = np.random.default_rng(41)
        m = 5
        obj = rng.uniform(0.05, 1.0, size=(m, 3))
        obj /= obj.sum(axis=1, keepdims=True)
        attr = {"color": rng.uniform(0.05, 1.0, size=(m, 2))}
        attr["color"] /= attr["color"].sum(axis=1, keepdims=True)
        cats = {"color": ("red", "brown")}
        labels = labels_for({0, 1}, {0: {("color", "red")}, 1: {("color", "brown")}})
        _, grad_obj, grad_attr, _ = entanglement_loss(obj, attr, labels, cats)
        h = 1e-7

        def value_at(o, a):
            v, *_ = entanglement_loss(o, {"color": a}, labels, cats)
            return v

        for i in range(m):
            for c in range(3):
                bumped = obj.copy()
                bumped[i, c] += h
                up = value_at(bumped, attr["color"])
                bumped[i, c] -= 2 * h
                down = value_at(bumped, attr["color"])
                assert grad_obj[i, c] == pytest.approx((up - down) / (2 * h), abs=1e-5)
            for v in range(2):
                bumped = attr["color"].copy()
                bumped[i, v] += h
                up = value_at(obj, bumped)
                bumped[i, v] -= 2 * h
                down = value_at(obj, bumped)
                assert grad_attr["color"][i, v] == pytest.approx((up - down) / (2 * h), abs=1e-5)


class TestMidLoss:
    def test_two_class_example(self):
        # evidence sums 0.7 and 0.2 pass through the sigmoid; class 0 is
        # mentioned, class 1 is not
        y = 1.0 / (1.0 + np.exp(-np.array([0.7, 0.2])))
        mid = MidScores(per_region=np.zeros((3, 2)), image_level=y)
        value, grad = mid_loss(mid, {0}, num_classes=2)
        assert value == pytest.approx(1.2013249182670498, abs=1e-12)
        assert grad[0] == pytest.approx(-1.0 / y[0])
        assert grad[1] == pytest.approx(1.0 / (1.0 - y[1]))

    def test_no_mentions_all_negative(self):
        # a single unmentioned class at image score sigmoid(0.25)
        y = np.array([0.5621765008857981])
        mid = MidScores(per_region=np.zeros((1, 1)), image_level=y)
        value, grad = mid_loss(mid, set(), num_classes=1)
        assert value == pytest.approx(0.8259394198788435, abs=1e-12)
        assert grad[0] == pytest.approx(1.0 / (1.0 - y[0]))

    def test_all_mentioned(self):
        y = np.array([0.9, 0.8])
        mid = MidScores(per_region=np.zeros((1, 2)), image_level=y)
        value, grad = mid_loss(mid, {0, 1}, num_classes=2)
        assert value == pytest.approx(-(math.log(0.9) + math.log(0.8)))
        assert (grad < 0).all()

    def test_out_of_range_class(self):
        mid = MidScores(per_region=np.zeros((1, 2)), image_level=np.array([0.6, 0.6]))
        with pytest.raises(ValueError):
            mid_loss(mid, {2}, num_classes=2)

    def test_shape_mismatch(self):
        mid = MidScores(per_region=np.zeros((1, 2)), image_level=np.array([0.6, 0.6]))
        with pytest.raises(ValueError):
            mid_loss(mid, {0}, num_classes=3)

    def test_saturated_scores_finite(self):
        mid = MidScores(per_region=np.zeros((1, 2)), image_level=np.array([1.0, 0.0]))
        value, grad = mid_loss(mid, {1}, num_classes=2)
        assert np.isfinite(value)
        assert np.isfinite(grad).all()


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert w.lambda1 == 0.5
        assert w.lambda2 == 0.01

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossWeights(lambda2=-1.0)


def exact_component_setup():
    """Scores engineered so each component is an exact round number.

    Object best score exp(-0.4) gives a MIL term of 0.4; the coupled pair
    adds exp(-1.6) so its term is 2.0; image level exp(-1) gives an
    evidence term of 1.0.
    """
    obj = np.array([[math.exp(-0.4), 1.0 - math.exp(-0.4)]])
    attr = {"color": np.array([[math.exp(-1.6), 1.0 - math.exp(-1.6)]])}
    scores = ScoreTensor(objects=[obj], attributes=[attr])
    mid = MidScores(per_region=np.zeros((1, 1)), image_level=np.array([math.exp(-1.0)]))
    labels = labels_for({0}, {0: {("color", "red")}})
    cats = {"color": ("red", "green")}
    return scores, mid, labels, cats


class TestTotalLoss:
    def test_mixing_arithmetic(self):
        scores, mid, labels, cats = exact_component_setup()
        report = total_loss(scores, mid, labels, LossWeights(lambda1=0.5, lambda2=0.01), cats)
        assert report.l_mid == pytest.approx(1.0, abs=1e-12)
        assert report.l_obj == pytest.approx(0.4, abs=1e-12)
        assert report.l_entang == pytest.approx(2.0, abs=1e-12)
        assert report.l_total == pytest.approx(1.22, abs=1e-12)

    def test_refinement_values_added_unweighted(self):
        scores, mid, labels, cats = exact_component_setup()
        report = total_loss(
            scores, mid, labels, LossWeights(), cats, oicr_values=(0.1, 0.2, 0.3),
        )
        assert report.l_oicr == (0.1, 0.2, 0.3)
        assert report.l_total == pytest.approx(1.22 + 0.6, abs=1e-12)

    def test_lambda2_zero_skips_coupled_term(self):
        scores, mid, labels, cats = exact_component_setup()
        report = total_loss(scores, mid, labels, LossWeights(lambda2=0.0), cats)
        assert report.l_entang == 0.0
        assert report.argmax_pairs == {}
        for head in report.grad.attributes:
            for arr in head.values():
                assert not np.any(arr)
        assert report.l_total == pytest.approx(1.0 + 0.5 * 0.4, abs=1e-12)

    def test_gradients_scaled_by_weights(self):
        scores, mid, labels, cats = exact_component_setup()
        heavy = total_loss(scores, mid, labels, LossWeights(lambda1=1.0, lambda2=0.0), cats)
        light = total_loss(scores, mid, labels, LossWeights(lambda1=0.5, lambda2=0.0), cats)
        # evidence gradient identical, object gradient scales with lambda1
        assert np.allclose(heavy.grad.mid_image, light.grad.mid_image)
        assert np.allclose(heavy.grad.objects[0], 2.0 * light.grad.objects[0])

    def test_oicr_grads_added(self):
        scores, mid, labels, cats = exact_component_setup()
        base = total_loss(scores, mid, labels, LossWeights(), cats)
        extra = ScoreGrads.zeros_like(scores, mid)
        extra.objects[0][0, 0] = 5.0
        with_extra = total_loss(scores, mid, labels, LossWeights(), cats, oicr_grads=extra)
        assert with_extra.grad.objects[0][0, 0] == pytest.approx(base.grad.objects[0][0, 0] + 5.0)

    def test_report_is_json_serializable(self):
        scores, mid, labels, cats = exact_component_setup()
        report = total_loss(scores, mid, labels, LossWeights(), cats)
        record = report.to_record()
        text = json.dumps(record)
        assert "l_total" in json.loads(text)
