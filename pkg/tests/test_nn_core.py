import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedbe import nn_core as nc
from fedbe.datagen import LabeledDataset, gen_task, task_pair
from fedbe.errors import ConfigurationError, InputError
from fedbe.nn_core import ModelSpec


def _params_equal(a, b):
    pa, pb = a.parameters(), b.parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)


class TestInit:
    def test_same_seed_bit_identical(self):
        spec = ModelSpec()
        assert _params_equal(nc.init_model(spec, 7), nc.init_model(spec, 7))

    def test_different_seeds_differ(self):
        spec = ModelSpec()
        assert not _params_equal(nc.init_model(spec, 7), nc.init_model(spec, 8))

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(d=32, heads=5)

    @pytest.mark.parametrize("kw", [{"L": 0}, {"V": 1}, {"K": 1}, {"d_ff": 0}, {"heads": 0}])
    def test_invalid_specs(self, kw):
        with pytest.raises(ConfigurationError):
            ModelSpec(**kw)

    def test_scale_and_layer_norm(self):
        spec = ModelSpec()
        m = nc.init_model(spec, 1)
        s = 1 / math.sqrt(spec.d)
        for name, arr in m.params.items():
            if "ln" in name:
                expected = 1.0 if name.endswith("_g") else 0.0
                assert np.all(arr == expected), name
            else:
                assert np.abs(arr).max() <= s, name

    def test_block_param_count(self):
        # 4*(32*32+32) + (32*128+128) + (128*32+32) + 2*(32+32)
        assert nc.block_param_count(ModelSpec(d=32, d_ff=128)) == 12704


class TestForward:
    def test_logit_shape(self):
        spec = ModelSpec(T_max=8, K=4)
        logits, _ = nc.forward(nc.init_model(spec, 0), np.zeros((2, 8), dtype=int), "D")
        assert logits.shape == (2, 4)

    def test_zero_head_weight_gives_bias(self, small_model, small_batch):
        b = np.array([0.1, -2.0, 3.5, 0.0])
        m = small_model.with_parameters({"heads.D.W": np.zeros_like(small_model.params["heads.D.W"]),
                                         "heads.D.b": b})
        logits, _ = nc.forward(m, small_batch[0], "D")
        assert np.array_equal(logits, np.tile(b, (len(logits), 1)))

    def test_shorter_sequences_allowed(self, small_model):
        logits, _ = nc.forward(small_model, np.ones((3, 4), dtype=int), "G")
        assert logits.shape == (3, 4)

    def test_token_out_of_range(self, small_model, small_spec):
        with pytest.raises(InputError):
            nc.forward(small_model, np.full((1, 4), small_spec.V), "D")

    def test_sequence_too_long(self, small_model, small_spec):
        with pytest.raises(InputError):
            nc.forward(small_model, np.zeros((1, small_spec.T_max + 1), dtype=int), "D")

    def test_unknown_task(self, small_model, small_batch):
        with pytest.raises(ConfigurationError):
            nc.forward(small_model, small_batch[0], "X")

    def test_batch_split_matches_whole(self, small_model, small_batch):
        whole, _ = nc.forward(small_model, small_batch[0], "D")
        parts = np.concatenate([nc.forward(small_model, small_batch[0][i:i + 1], "D")[0]
                                for i in range(len(small_batch[0]))])
        np.testing.assert_allclose(parts, whole, rtol=0, atol=1e-12)


class TestSoftmaxAndLoss:
    def test_equal_logits_uniform(self):
        np.testing.assert_array_equal(nc.softmax(np.zeros((3, 4))), np.full((3, 4), 0.25))

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 7)),
                  elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, z):
        np.testing.assert_allclose(nc.softmax(z.copy()).sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_uniform_logits_loss_is_ln_k(self, small_model, small_batch):
        m = small_model.with_parameters({"heads.D.W": np.zeros_like(small_model.params["heads.D.W"]),
                                         "heads.D.b": np.zeros(4)})
        loss, _ = nc.loss_and_backward(m, *small_batch, "D")
        assert abs(loss - math.log(4)) < 1e-12

    def test_label_out_of_range(self, small_model, small_batch):
        with pytest.raises(InputError):
            nc.loss_and_backward(small_model, small_batch[0], np.full(5, 4), "D")

    def test_saturated_example_has_vanishing_loss_and_gradient(self, small_model, small_batch):
        tokens, _ = small_batch
        b = np.array([0.0, 0.0, 60.0, 0.0])
        m = small_model.with_parameters({"heads.D.W": np.zeros_like(small_model.params["heads.D.W"]),
                                         "heads.D.b": b})
        loss, grads = nc.loss_and_backward(m, tokens[:1], np.array([2]), "D")
        assert loss < 1e-20
        assert max(np.abs(g).max() for g in grads.values()) < 1e-20


class TestGradients:
    def test_two_block_d16_matches_finite_differences(self, small_model, small_batch):
        assert nc.finite_diff_oracle(small_model, *small_batch, "D", eps=1e-5) < 1e-6

    def test_default_spec_matches_finite_differences(self):
        spec = ModelSpec()
        rng = np.random.default_rng(0)
        m = nc.init_model(spec, 4)
        err = nc.finite_diff_oracle(m, rng.integers(0, spec.V, (3, spec.T_max)),
                                    rng.integers(0, spec.K, 3), "G")
        assert err < 1e-6

    def test_oracle_deterministic(self, small_model, small_batch):
        a = nc.finite_diff_oracle(small_model, *small_batch, "D", seed=5)
        assert a == nc.finite_diff_oracle(small_model, *small_batch, "D", seed=5)

    @pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
    def test_oracle_rejects_bad_eps(self, small_model, small_batch, eps):
        with pytest.raises(InputError):
            nc.finite_diff_oracle(small_model, *small_batch, "D", eps=eps)

    def test_gradient_congruent_with_parameters(self, small_model, small_batch):
        _, grads = nc.loss_and_backward(small_model, *small_batch, "D")
        params = small_model.parameters()
        assert grads.keys() == params.keys()
        assert all(grads[k].shape == params[k].shape for k in params)
        # the G head does not touch the D loss
        assert not np.any(grads["heads.G.W"])

    def test_wrt_subset_matches_full(self, small_model, small_batch):
        _, full = nc.loss_and_backward(small_model, *small_batch, "D")
        wrt = ["blocks.1.W2", "heads.D.b"]
        _, part = nc.loss_and_backward(small_model, *small_batch, "D", wrt=wrt)
        assert set(part) == set(wrt)
        for k in wrt:
            np.testing.assert_array_equal(part[k], full[k])


class TestSGD:
    def test_all_frozen_mask_is_identity(self, small_model, small_batch):
        _, grads = nc.loss_and_backward(small_model, *small_batch, "D")
        assert _params_equal(nc.apply_sgd(small_model, grads, 0.1, frozenset()), small_model)

    def test_scalar_update(self, small_model):
        params = small_model.parameters()
        m = small_model.with_parameters({"heads.D.b": np.array([1.0, 0.0, 0.0, 0.0])})
        grads = {"heads.D.b": np.array([0.5, 0.0, 0.0, 0.0])}
        out = nc.apply_sgd(m, grads, 0.1, {"heads.D.b"})
        assert out.params["heads.D.b"][0] == 0.95
        assert out.params["tok_emb"] is params["tok_emb"]

    def test_zero_lr_unchanged(self, small_model, small_batch):
        _, grads = nc.loss_and_backward(small_model, *small_batch, "D")
        assert _params_equal(nc.apply_sgd(small_model, grads, 0.0, nc.full_mask(small_model)), small_model)

    def test_negative_lr_rejected(self, small_model):
        with pytest.raises(InputError):
            nc.apply_sgd(small_model, {}, -0.1, set())

    @given(st.sets(st.sampled_from(["tok_emb", "pos_emb", "blocks.0.Wq", "blocks.1.W2",
                                    "blocks.1.ln2_g", "heads.D.W", "heads.D.b"])),
           st.integers(1, 4))
    def test_frozen_parameters_bitwise_unchanged(self, small_model, small_batch, mask, steps):
        before = {k: v.copy() for k, v in small_model.parameters().items()}
        m = small_model
        for _ in range(steps):
            m, _, _ = nc.sgd_step(m, *small_batch, "D", 0.05, mask)
        after = m.parameters()
        for k in before:
            if k not in mask:
                assert np.array_equal(after[k], before[k]), k

    def test_overfit_one_batch(self):
        spec = ModelSpec()
        rng = np.random.default_rng(2)
        tokens, labels = rng.integers(0, spec.V, (8, spec.T_max)), rng.integers(0, spec.K, 8)
        m = nc.init_model(spec, 2)
        mask = nc.full_mask(m)
        for _ in range(200):
            m, _, _ = nc.sgd_step(m, tokens, labels, "D", 0.05, mask)
        assert nc.loss(m, tokens, labels, "D") < 0.05

    def test_training_deterministic(self, small_model, small_batch):
        def train():
            m = small_model
            for _ in range(5):
                m, _, _ = nc.sgd_step(m, *small_batch, "D", 0.05, nc.full_mask(m))
            return m
        assert _params_equal(train(), train())


class TestBlockGradNorms:
    def test_zero(self, small_model):
        grads = {k: np.zeros_like(v) for k, v in small_model.parameters().items()}
        assert nc.block_grad_norms(grads, 2) == [0.0, 0.0]

    def test_three_four_five(self):
        grads = {"blocks.0.bq": np.array([0.0]), "blocks.1.bq": np.array([3.0]),
                 "blocks.1.b1": np.array([4.0]), "tok_emb": np.array([100.0])}
        assert nc.block_grad_norms(grads) == [0.0, 5.0]

    def test_length_is_L(self, small_model, small_batch):
        _, grads = nc.loss_and_backward(small_model, *small_batch, "D")
        norms = nc.block_grad_norms(grads, 2)
        assert len(norms) == 2 and all(v > 0 for v in norms)


class TestEvaluate:
    def test_memorised_set(self):
        spec = ModelSpec()
        rng = np.random.default_rng(1)
        data = LabeledDataset(rng.integers(0, spec.V, (4, spec.T_max)), np.array([0, 1, 2, 3]), 4)
        m = nc.init_model(spec, 1)
        for _ in range(150):
            m, _, _ = nc.sgd_step(m, data.tokens, data.labels, "D", 0.05, nc.full_mask(m))
        assert nc.evaluate(m, data, "D") == 1.0

    def test_fresh_model_near_chance(self):
        # a single random network's predictions correlate with marker counts, so
        # one draw can sit off chance; by label symmetry the mean over draws cannot
        spec = ModelSpec()
        _, d = task_pair(spec.V, spec.T_max, spec.K)
        test = gen_task(d, 10000, seed=0).test
        assert len(test) == 2000
        accs = [nc.evaluate(nc.init_model(spec, s), test, "D") for s in range(20)]
        assert abs(np.mean(accs) - 0.25) <= 0.05

    def test_half_right(self, small_model):
        # zero head weight + bias favouring class 1: every prediction is 1
        m = small_model.with_parameters({"heads.D.W": np.zeros_like(small_model.params["heads.D.W"]),
                                         "heads.D.b": np.array([0.0, 1.0, 0.0, 0.0])})
        data = LabeledDataset(np.zeros((2, 4), dtype=int), np.array([1, 3]), 4)
        assert nc.evaluate(m, data, "D") == 0.5

    def test_ties_go_to_lowest_class(self, small_model):
        m = small_model.with_parameters({"heads.D.W": np.zeros_like(small_model.params["heads.D.W"]),
                                         "heads.D.b": np.array([0.0, 2.0, 2.0, 2.0])})
        assert np.all(nc.predict(m, np.zeros((3, 4), dtype=int), "D") == 1)

    def test_empty_dataset(self, small_model):
        with pytest.raises(InputError):
            nc.evaluate(small_model, LabeledDataset(np.zeros((0, 4), dtype=int), np.zeros(0, dtype=int), 4), "D")


class TestExpandedResidual:
    def test_scalar_caricature(self):
        out = nc.expanded_residual(np.array(1.0), np.array(2.0), lambda b: b * 0.25)
        assert out == 3.5

    def test_post_residual_input(self):
        seen = []
        nc.expanded_residual(np.array(1.0), np.array(2.0), lambda b: seen.append(float(b)) or 0.0,
                             expand_input="post-residual")
        assert seen == [3.0]
