import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixcaps import kernels
from mixcaps import tensor as T
from mixcaps.capsule import (
    CapsuleExpert,
    ExpertConfig,
    margin_loss,
    one_hot,
    predict_parents,
    route,
    squash,
)
from mixcaps.errors import ContractError, DimensionError

from conftest import check_op_gradients, numeric_grad, rel_err
from oracles import literal_routing


class TestSquash:
    def test_zero_maps_to_zero(self):
        out = squash(np.zeros(3)).data
        assert np.array_equal(out, np.zeros(3))

    def test_three_four(self):
        out = squash(np.array([3.0, 4.0])).data
        assert np.linalg.norm(out) == pytest.approx(25 / 26, abs=1e-12)
        np.testing.assert_allclose(out / np.linalg.norm(out), [0.6, 0.8], atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
    def test_length_below_one_and_direction_kept(self, vals):
        s = np.array(vals)
        v = squash(s).data
        n = np.linalg.norm(v)
        assert 0.0 <= n < 1.0
        ns = np.linalg.norm(s)
        if ns > 1e-3:
            assert np.abs(v / n - s / ns).max() < 1e-9

    def test_zero_gradient_finite(self):
        p = T.parameter(np.zeros(4))
        with T.GradientTape() as tape:
            loss = T.sum_(squash(p))
        g = tape.backward(loss, [p])[p]
        assert np.isfinite(g).all()


class TestRouting:
    def test_one_round_is_uniform(self, rng):
        st_ = route(rng.normal(size=(5, 3, 4)), iterations=1)
        np.testing.assert_array_equal(st_.c, np.full((5, 3), 1 / 3))
        assert st_.rounds == 1

    def test_initial_logits_zero(self, rng):
        st_ = route(rng.normal(size=(4, 2, 3)), iterations=3)
        assert not st_.history_b[0].any()

    @pytest.mark.parametrize("backend", sorted(kernels.implementations()))
    def test_matches_literal_oracle(self, rng, backend):
        impl = kernels.implementations()[backend]["route"]
        for _ in range(20):
            ni, nj, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 6)
            u = rng.normal(size=(ni, nj, d)) * rng.uniform(0.1, 3)
            c_ref, v_ref = literal_routing(u, 3)
            _, c, _, _, v = impl(u[None], 3, kernels.SQUASH_EPS)
            assert np.abs(c[:, 0] - c_ref).max() < 1e-12
            assert np.abs(v[:, 0] - v_ref).max() < 1e-12

    def test_backends_agree(self, rng):
        impls = kernels.implementations()
        u = rng.normal(size=(3, 7, 4, 5))
        outs = [impls[k]["route"](u, 3, kernels.SQUASH_EPS) for k in sorted(impls)]
        for a, b in zip(outs[0], outs[-1]):
            assert np.abs(a - b).max() < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_couplings_normalised_every_round(self, ni, nj, d, rounds, seed):
        u = np.random.default_rng(seed).normal(size=(ni, nj, d)) * 3
        st_ = route(u, iterations=rounds)
        assert np.abs(st_.history_c.sum(axis=-1) - 1).max() < 1e-9

    def test_batched_matches_single(self, rng):
        u = rng.normal(size=(3, 6, 2, 4))
        batch = route(u, 3)
        for n in range(3):
            one = route(u[n], 3)
            np.testing.assert_allclose(batch.c[n], one.c, atol=1e-15)
            np.testing.assert_allclose(batch.parents[n], one.parents, atol=1e-15)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            route(np.ones((2, 2, 2)), iterations=0)


class TestPredictParents:
    def test_matches_loop(self, rng):
        u, W = rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 2, 3, 4))
        out = predict_parents(u, W).data
        for n in range(2):
            for i in range(5):
                for j in range(2):
                    assert np.abs(out[n, i, j] - W[i, j].T @ u[n, i]).max() < 1e-12

    def test_gradients(self, rng):
        errs = check_op_gradients(predict_parents, [rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 2, 3, 4))])
        assert max(errs) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            predict_parents(np.ones((5, 3)), np.ones((4, 2, 3, 4)))


class TestMarginLoss:
    def test_worked_example(self):
        # target class 0: (0.9 - 0.2)^2 + 0.5 * (0.8 - 0.1)^2
        loss = margin_loss(np.array([0.2, 0.8]), np.array([1.0, 0.0]))
        assert loss.item() == pytest.approx(0.49 + 0.5 * 0.49, abs=1e-12)

    def test_perfect_output_zero_loss(self):
        assert margin_loss(np.array([0.95, 0.05]), np.array([1.0, 0.0])).item() == 0.0

    def test_batch_is_mean(self, rng):
        o = rng.uniform(size=(4, 2))
        t = one_hot([0, 1, 1, 0])
        per = [margin_loss(o[k], t[k]).item() for k in range(4)]
        assert margin_loss(o, t).item() == pytest.approx(np.mean(per), abs=1e-14)

    def test_rejects_non_one_hot(self):
        with pytest.raises(ContractError):
            margin_loss(np.array([0.5, 0.5]), np.array([0.5, 0.5]))

    def test_rejects_bad_margins(self):
        with pytest.raises(ContractError):
            margin_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), m_plus=0.1, m_minus=0.9)

    def test_gradients(self, rng):
        t = one_hot([0, 1, 1])
        errs = check_op_gradients(lambda o: margin_loss(o, t), [rng.uniform(0.05, 0.95, size=(3, 2))])
        assert max(errs) < 1e-4


class TestExpert:
    def tiny(self, **kw):
        base = dict(patch_size=12, conv1_filters=4, conv2_filters=8, kernel=3, strides=(1, 2),
                    primary_capsule_dim=4, class_capsule_dim=4)
        base.update(kw)
        return ExpertConfig(**base)

    def test_config_invariants(self):
        with pytest.raises(Exception):
            ExpertConfig(conv2_filters=10, primary_capsule_dim=8)
        with pytest.raises(Exception):
            ExpertConfig(routing_iterations=0)

    def test_output_lengths_in_unit_interval(self, rng):
        e = CapsuleExpert(self.tiny(), rng)
        out = e.forward(rng.uniform(size=(3, 12, 12, 3)))
        assert out.o.shape == (3, 2)
        assert np.all((out.o.data >= 0) & (out.o.data < 1))
        assert np.abs(out.routing.c.sum(-1) - 1).max() < 1e-9

    def test_single_patch(self, rng):
        e = CapsuleExpert(self.tiny(), rng)
        x = rng.uniform(size=(12, 12, 3))
        np.testing.assert_allclose(e.forward(x).o.data, e.forward(x[None]).o.data[0], atol=1e-15)

    def test_wrong_patch_shape(self, rng):
        with pytest.raises(DimensionError):
            CapsuleExpert(self.tiny(), rng).forward(np.zeros((10, 10, 3)))

    def test_side_features_required_iff_configured(self, rng):
        e = CapsuleExpert(self.tiny(side_feature_len=2), rng)
        with pytest.raises(ContractError):
            e.forward(np.zeros((1, 12, 12, 3)))
        out = e.forward(rng.uniform(size=(2, 12, 12, 3)), rng.uniform(size=(2, 2)))
        assert out.o.shape == (2, 2)

    def test_full_gradient_with_frozen_couplings(self, rng):
        e = CapsuleExpert(self.tiny(side_feature_len=2), rng)
        x, side = rng.uniform(size=(2, 12, 12, 3)), rng.uniform(size=(2, 2))
        t = one_hot([0, 1])
        frozen = e.forward(x, side).routing.c
        params = e.parameters()

        def loss_val():
            return margin_loss(e.forward(x, side, frozen_couplings=frozen).o, t).item()

        with T.GradientTape() as tape:
            loss = margin_loss(e.forward(x, side, frozen_couplings=frozen).o, t)
        grads = tape.backward(loss, list(params.values()))
        for name, p in params.items():
            assert rel_err(grads[p], numeric_grad(loss_val, p.data)) < 1e-4, name
