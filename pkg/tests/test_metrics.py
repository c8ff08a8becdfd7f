import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cbalab.metrics import (
    accuracy,
    compute_ACC,
    compute_ACC_AUC,
    compute_FM,
    confusion_and_task_distribution,
    evaluate_model,
    gradient_alignment,
    new_accuracy_matrix,
)
from cbalab.methods import MethodConfig, TrainBatch

from conftest import make_batch, small_params


def _oracle_fm(a):
    T = len(a)
    total = 0.0
    for t in range(T):
        best = a[t][t]
        for j in range(t, T):
            if a[t][j] > best:
                best = a[t][j]
        total += best - a[t][T - 1]
    return total / T


class TestACC:
    def test_zero(self):
        assert compute_ACC(np.zeros((3, 3))) == 0.0

    def test_table_er_cba_row(self):
        a = new_accuracy_matrix(5)
        a[:, -1] = [44.29, 30.40, 37.41, 48.74, 66.23]
        assert compute_ACC(a) == pytest.approx(45.414, abs=1e-9)

    def test_unset_rejected(self):
        with pytest.raises(ValueError, match="unset"):
            compute_ACC(new_accuracy_matrix(3))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            compute_ACC(np.zeros((2, 3)))


class TestFM:
    def test_constant_rows(self):
        assert compute_FM(np.full((4, 4), 70.0)) == 0.0

    def test_single_task_peak(self):
        a = np.array([[80.0, 60.0], [0.0, 60.0]])
        assert compute_FM(a) == pytest.approx(10.0)

    def test_lower_triangle_ignored(self):
        a = np.triu(np.full((3, 3), 50.0))
        a[2, 0] = np.nan
        assert compute_FM(a) == 0.0

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])),
                  elements=st.floats(0, 100)))
    def test_matches_brute_force(self, a):
        assert compute_FM(a) == _oracle_fm(a.tolist())

    def test_nonnegative(self, rng):
        for _ in range(20):
            assert compute_FM(rng.uniform(0, 100, size=(5, 5))) >= 0


class TestAUC:
    def test_constant_normalizes_to_value(self):
        raw, norm = compute_ACC_AUC([5, 10, 15, 20], [70.0] * 4, 5)
        assert raw == 1400.0 and norm == 70.0

    def test_single_sample(self):
        assert compute_ACC_AUC([5], [40.0], 5) == (200.0, 40.0)

    def test_hand_sum(self):
        raw, norm = compute_ACC_AUC([3, 6, 9], [10.0, 20.0, 60.0], 3)
        assert raw == 270.0 and norm == 30.0

    def test_irregular_rejected(self):
        with pytest.raises(ValueError, match="evenly"):
            compute_ACC_AUC([5, 10, 20], [1.0, 2.0, 3.0], 5)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_ACC_AUC([], [], 5)


class TestEvaluate:
    def _perfect(self, C=4):
        # linear head reading one-hot inputs directly
        p = small_params(dim=C, classes=C, widths=(C,))
        return p.replace({"backbone.0.W": np.eye(C), "backbone.0.b": np.zeros(C),
                          "head.W": np.eye(C), "head.b": np.zeros(C)})

    def test_perfect_predictor(self):
        p = self._perfect()
        X, y = np.eye(4), np.arange(4)
        assert accuracy(p, X, y) == 100.0
        conf, mass = confusion_and_task_distribution(p, [(X[:2], y[:2]), (X[2:], y[2:])], [(0, 1), (2, 3)], 4)
        np.testing.assert_array_equal(conf, np.eye(4))
        np.testing.assert_array_equal(mass, [0.5, 0.5])

    def test_constant_predictor_mass(self):
        p = self._perfect()
        p = p.replace({"head.b": np.array([100.0, 0, 0, 0])})
        _, mass = confusion_and_task_distribution(p, [(np.eye(4), np.arange(4))], [(0, 1), (2, 3)], 4)
        np.testing.assert_array_equal(mass, [1.0, 0.0])

    def test_mass_sums_to_one(self, rng):
        for s in range(5):
            p = small_params(seed=s)
            sets = [(rng.normal(size=(10, 5)), rng.integers(0, 4, 10)) for _ in range(2)]
            _, mass = confusion_and_task_distribution(p, sets, [(0, 1), (2, 3)], 4)
            assert abs(mass.sum() - 1.0) <= 1e-12

    def test_untrained_symmetric_two_class_near_half(self):
        rng = np.random.default_rng(0)
        p = small_params(dim=2, classes=2, widths=(4,), perturb_omega=False)
        p = p.replace({"head.W": np.zeros((2, 4)), "head.b": np.zeros(2)})
        X, y = rng.normal(size=(400, 2)), np.repeat([0, 1], 200)
        assert accuracy(p, X, y) == 50.0  # ties go to class 0

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate_model(small_params(), [(np.zeros((0, 5)), np.zeros(0, dtype=int))])


class TestAlignment:
    def test_matches_manual_inner_product(self, rng):
        from cbalab import autodiff as ad
        from cbalab.autodiff import Tape
        from cbalab.methods import er_loss
        from cbalab.nn import classifier_forward

        p = small_params()
        trn = TrainBatch(make_batch(rng, 5, 5, 4), make_batch(rng, 5, 5, 4))
        buf = make_batch(rng, 5, 5, 4)
        rec = gradient_alignment(p, trn, buf, MethodConfig())

        def flat_grad(loss_fn):
            with Tape():
                th = p.tensors(p.theta_names, tracked=True)
                g = ad.grad_values(ad.backward(loss_fn(th), th))
            return np.concatenate([g[k].ravel() for k in p.theta_names])

        om = p.group(p.omega_names)
        gt = flat_grad(lambda th: er_loss({**th, **om}, trn, with_cba=True))
        gb = flat_grad(lambda th: ad.cross_entropy(classifier_forward(th, buf.x), buf.y))
        assert rec.inner_product == pytest.approx(float(gb @ gt), rel=1e-12)
        assert rec.trn_grad_sq == pytest.approx(float(gt @ gt), rel=1e-12) and rec.trn_grad_sq >= 0

    def test_empty_buffer_rejected(self, rng):
        from cbalab.buffer import Batch
        with pytest.raises(ValueError):
            gradient_alignment(small_params(), TrainBatch(make_batch(rng, 2, 5, 4), Batch.empty(5)),
                               Batch.empty(5), MethodConfig())
