import numpy as np
import pytest

from cbalab import autodiff as ad
from cbalab.autodiff import Tape
from cbalab.buffer import Batch
from cbalab.methods import (
    MethodConfig,
    TrainBatch,
    TrainingError,
    baseline_train_step,
    derpp_loss,
    er_loss,
)
from cbalab.nn import classifier_forward

from conftest import make_batch, small_params


def _np_ce(Z, y):
    Z = Z - Z.max(1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


class TestERLoss:
    def test_equals_ce_on_concatenation(self, rng):
        p = small_params()
        new, buf = make_batch(rng, 4, 5, 4), make_batch(rng, 3, 5, 4)
        with ad.no_record():
            got = er_loss(p, TrainBatch(new, buf)).item()
            Z = classifier_forward(p, np.concatenate([new.x, buf.x])).value
        assert got == pytest.approx(_np_ce(Z, np.concatenate([new.y, buf.y])), rel=1e-12)

    def test_empty_buffer_uses_new_only(self, rng):
        p = small_params()
        new = make_batch(rng, 4, 5, 4)
        with ad.no_record():
            a = er_loss(p, TrainBatch(new, Batch.empty(5))).item()
            Z = classifier_forward(p, new.x).value
        assert a == pytest.approx(_np_ce(Z, new.y), rel=1e-12)

    def test_both_empty_rejected(self):
        with pytest.raises(ValueError):
            er_loss(small_params(), TrainBatch(Batch.empty(5), Batch.empty(5)))

    def test_zero_cba_is_bit_identical(self, rng):
        p = small_params(perturb_omega=False)
        trn = TrainBatch(make_batch(rng, 4, 5, 4), make_batch(rng, 4, 5, 4))
        with ad.no_record():
            assert er_loss(p, trn, with_cba=True).item() == er_loss(p, trn).item()


class TestDERpp:
    def test_components(self, rng):
        p = small_params()
        cfg = MethodConfig("derpp", derpp_distill_weight=0.5, derpp_replay_weight=0.5)
        new, buf, second = make_batch(rng, 4, 5, 4), make_batch(rng, 3, 5, 4), make_batch(rng, 3, 5, 4, logits=True)
        with ad.no_record():
            got = derpp_loss(p, TrainBatch(new, buf), second, False, cfg).item()
            ce_new = _np_ce(classifier_forward(p, new.x).value, new.y)
            ce_buf = _np_ce(classifier_forward(p, buf.x).value, buf.y)
            mse = np.mean((classifier_forward(p, second.x).value - second.logits) ** 2)
        assert got == pytest.approx(ce_new + 0.5 * ce_buf + 0.5 * mse, rel=1e-12)

    def test_missing_logits_rejected(self, rng):
        cfg = MethodConfig("derpp")
        with pytest.raises(ValueError, match="logits"):
            derpp_loss(small_params(), TrainBatch(make_batch(rng, 2, 5, 4), Batch.empty(5)),
                       make_batch(rng, 2, 5, 4), False, cfg)

    def test_empty_new_rejected(self, rng):
        with pytest.raises(ValueError):
            derpp_loss(small_params(), TrainBatch(Batch.empty(5), make_batch(rng, 2, 5, 4)), None, False,
                       MethodConfig("derpp"))


class TestBaselineStep:
    def test_gradients_match_fd(self, rng):
        p = small_params()
        trn = TrainBatch(make_batch(rng, 5, 5, 4), make_batch(rng, 5, 5, 4))
        with Tape():
            theta = p.tensors(p.theta_names, tracked=True)
            g = ad.grad_values(ad.backward(er_loss(theta, trn), theta))

        def f(vals):
            with ad.no_record():
                return er_loss(vals, trn).item()

        assert ad.relative_error(g, ad.finite_difference_gradient(f, p.group(p.theta_names))) < 1e-6

    def test_sgd_moves_theta_only(self, rng):
        p = small_params()
        trn = TrainBatch(make_batch(rng, 5, 5, 4), make_batch(rng, 5, 5, 4))
        q, loss = baseline_train_step(p, trn, MethodConfig(alpha=0.1))
        for k in p.omega_names:
            np.testing.assert_array_equal(q[k], p[k])
        assert not np.array_equal(q["head.W"], p["head.W"])
        assert np.isfinite(loss)

    def test_nan_input_raises_training_error(self, rng):
        bad = make_batch(rng, 3, 5, 4)
        bad.x[:] = np.nan
        with pytest.raises(TrainingError, match="step 7"):
            baseline_train_step(small_params(), TrainBatch(bad, Batch.empty(5)), MethodConfig(), step=7)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(method="ewc"), dict(alpha=-1.0), dict(beta=-0.1),
                                    dict(derpp_distill_weight=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MethodConfig(**kw)
