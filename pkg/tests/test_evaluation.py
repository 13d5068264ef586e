import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import miou_set_oracle
from regionseg.common import IGNORE_LABEL, ConfigurationError
from regionseg.data import build_synthetic_dataset
from regionseg.evaluation import (EnsembleConfig, ensemble_predict, evaluate,
                                  evaluate_both, miou, new_confusion,
                                  per_class_iou, pixel_accuracy, update_confusion)
from regionseg.models import build_branch


class TestEnsemble:
    def test_degenerate_weight_selects_branch1(self):
        p1 = torch.softmax(torch.rand(1, 3, 4, 4), dim=1)
        p2 = torch.softmax(torch.rand(1, 3, 4, 4), dim=1)
        _, r = ensemble_predict(p1, p2, EnsembleConfig(w1=1.0, w2=0.0))
        assert torch.equal(r, p1.argmax(dim=1))

    def test_hand_average(self):
        p1 = torch.tensor([0.6, 0.4]).view(1, 2, 1, 1)
        p2 = torch.tensor([0.2, 0.8]).view(1, 2, 1, 1)
        avg, r = ensemble_predict(p1, p2, EnsembleConfig(0.5, 0.5))
        assert torch.allclose(avg.flatten(), torch.tensor([0.4, 0.6]))
        assert int(r) == 1

    def test_identical_maps_idempotent(self):
        p = torch.softmax(torch.rand(2, 3, 8, 8), dim=1)
        _, r = ensemble_predict(p, p.clone(), EnsembleConfig())
        assert torch.equal(r, p.argmax(dim=1))

    def test_bad_weights_rejected(self):
        with pytest.raises(ConfigurationError):
            ensemble_predict(torch.rand(1, 2, 2, 2), torch.rand(1, 2, 2, 2),
                             EnsembleConfig(w1=0.7, w2=0.5))

    def test_scaling_invariance_of_argmax(self):
        p1 = torch.softmax(torch.rand(1, 3, 4, 4), dim=1)
        p2 = torch.softmax(torch.rand(1, 3, 4, 4), dim=1)
        _, r = ensemble_predict(p1, p2, EnsembleConfig())
        scaled = (3.7 * p1) * 0.5 + (3.7 * p2) * 0.5
        assert torch.equal(r, scaled.argmax(dim=1))


class TestConfusion:
    def test_perfect_prediction_diagonal(self):
        cm = new_confusion(3)
        gt = np.array([0, 1, 2, 2])
        update_confusion(cm, gt, gt)
        assert np.array_equal(cm, np.diag([1, 1, 2]))

    def test_all_ignore_unchanged(self):
        cm = new_confusion(2)
        gt = np.full(5, IGNORE_LABEL)
        update_confusion(cm, np.zeros(5, dtype=int), gt)
        assert cm.sum() == 0

    def test_hand_tally(self):
        cm = new_confusion(2)
        update_confusion(cm, np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
        assert np.array_equal(cm, np.array([[1, 1], [0, 2]]))

    def test_out_of_range_rejected(self):
        cm = new_confusion(2)
        with pytest.raises(ValueError):
            update_confusion(cm, np.array([5]), np.array([0]))

    def test_total_count_excludes_ignore(self):
        cm = new_confusion(2)
        gt = np.array([0, 1, IGNORE_LABEL])
        update_confusion(cm, np.array([0, 0, 1]), gt)
        assert cm.sum() == 2


class TestMiou:
    def test_diagonal_is_one(self):
        assert miou(np.diag([5, 3, 7])) == 1.0

    def test_hand_value(self):
        cm = new_confusion(2)
        update_confusion(cm, np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
        # class 0: 1/2, class 1: 2/3
        assert abs(miou(cm) - (0.5 + 2 / 3) / 2) < 1e-12

    def test_disjoint_predictions_zero(self):
        cm = new_confusion(2)
        update_confusion(cm, np.array([1, 1]), np.array([0, 0]))
        assert miou(cm) == 0.0

    def test_zero_union_classes_excluded(self):
        cm = new_confusion(3)
        update_confusion(cm, np.array([0, 0]), np.array([0, 0]))
        assert len(per_class_iou(cm)) == 1
        assert miou(cm) == 1.0

    def test_all_zero_union_errors(self):
        with pytest.raises(ValueError):
            miou(new_confusion(3))

    def test_pixel_accuracy(self):
        cm = new_confusion(2)
        update_confusion(cm, np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
        assert pixel_accuracy(cm) == 0.75

    @given(seed=st.integers(0, 99999), c=st.integers(2, 3))
    @settings(max_examples=60, deadline=None)
    def test_matches_set_oracle(self, seed, c):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, c, size=(8, 8))
        gt = rng.integers(0, c, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE_LABEL
        cm = new_confusion(c)
        update_confusion(cm, pred, gt)
        assert miou(cm) == miou_set_oracle(pred, gt, c)

    @given(seed=st.integers(0, 9999))
    @settings(max_examples=30, deadline=None)
    def test_joint_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.integers(0, 3, size=64)
        gt = rng.integers(0, 3, size=64)
        perm = rng.permutation(64)
        cm_a, cm_b = new_confusion(3), new_confusion(3)
        update_confusion(cm_a, pred, gt)
        update_confusion(cm_b, pred[perm], gt[perm])
        assert miou(cm_a) == miou(cm_b)

    @given(seed=st.integers(0, 9999))
    @settings(max_examples=30, deadline=None)
    def test_iou_bounds(self, seed):
        rng = np.random.default_rng(seed)
        cm = new_confusion(3)
        update_confusion(cm, rng.integers(0, 3, 50), rng.integers(0, 3, 50))
        assert all(0.0 <= v <= 1.0 for v in per_class_iou(cm).values())


class TestEvaluate:
    def _setup(self):
        samples = build_synthetic_dataset(4, (32, 32), 3, seed=0, prefix="val")
        b1 = build_branch(1, 3, base_channels=8)
        b2 = build_branch(2, 3, base_channels=8)
        return b1, b2, samples

    def test_identical_branches_eni_equals_single(self):
        b1, _, samples = self._setup()
        a = evaluate(b1, b1, samples, 3, eni=True)
        b = evaluate(b1, b1, samples, 3, eni=False)
        assert a["miou"] == b["miou"]

    def test_per_class_iou_only_nonzero_union(self):
        b1, b2, samples = self._setup()
        result = evaluate(b1, b2, samples, 3, eni=False)
        assert set(result["per_class_iou"]) <= {0, 1, 2}
        assert 0.0 <= result["miou"] <= 1.0

    def test_perfect_oracle_branch_scores_one(self):
        samples = build_synthetic_dataset(2, (32, 32), 3, seed=1, prefix="val")

        class Oracle(torch.nn.Module):
            def __init__(self, samples):
                super().__init__()
                self.lookup = {tuple(s.image.shape): None for s in samples}
                self.samples = samples
                self.training = False

            def forward(self, images):
                # emit one-hot logits matching the stored label of each item
                out = []
                for img in images:
                    match = next(s for s in self.samples
                                 if np.allclose(s.image.transpose(2, 0, 1), img.numpy()))
                    onehot = np.eye(3)[match.label] * 30.0
                    out.append(torch.from_numpy(onehot.transpose(2, 0, 1)).float())
                return torch.stack(out)

        oracle = Oracle(samples)
        result = evaluate(oracle, oracle, samples, 3, eni=True)
        assert result["miou"] == 1.0

    def test_empty_dataset_rejected(self):
        b1, b2, _ = self._setup()
        with pytest.raises(ConfigurationError):
            evaluate(b1, b2, [], 3, eni=False)

    def test_evaluate_both_consistent_with_evaluate(self):
        b1, b2, samples = self._setup()
        both = evaluate_both(b1, b2, samples, 3)
        assert both["eni_off"]["miou"] == evaluate(b1, b2, samples, 3, eni=False)["miou"]
        assert both["eni_on"]["miou"] == evaluate(b1, b2, samples, 3, eni=True)["miou"]
