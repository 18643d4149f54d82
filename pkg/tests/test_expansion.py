import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedbe import nn_core as nc
from fedbe.datagen import sample, task_pair
from fedbe.errors import ConfigurationError, DegenerateProfileError, InputError
from fedbe.expansion import (
    BudgetSpec,
    ExpansionPlan,
    choose_k,
    expand,
    expanded_param_count,
    flops_estimate,
    forward_expanded,
    proxy_gradient_profile,
    select_expansion_layers,
    trainable_mask,
    uniform_positions,
)
from fedbe.nn_core import BLOCK_PARAMS, ModelSpec

SPEC = ModelSpec(L=4, d=32, heads=4, d_ff=128, V=64, T_max=16, K=4)
P_BLOCK = 12704
POLICIES = ("output-proj", "all-linear")
INPUTS = ("branch", "post-residual")


def reexecute_algorithm(G, k, lam):
    """Step-by-step restatement: score every candidate, keep the first maximum."""
    L = len(G)
    top = max(G)
    picked = []
    while len(picked) < k:
        table = []
        for l in range(1, L + 1):
            if l in picked:
                continue
            pen = 0.0 if not picked else min(abs(l - q) for q in picked) / L
            table.append((G[l - 1] / top + lam * pen, l))
        best = max(s for s, _ in table)
        picked.append(min(l for s, l in table if s == best))
    return picked


class TestFlopsAndBudget:
    def test_closed_form_value(self):
        # (8192 + 2048 + 16384) * 16
        assert flops_estimate(SPEC, 1, 16) == (8 * 1024 + 4 * 32 * 16 + 4 * 32 * 128) * 16 == 425984

    def test_zero_blocks(self):
        assert flops_estimate(SPEC, 0, 16) == 0

    @given(st.integers(0, 20), st.integers(1, 64))
    def test_linear_in_blocks(self, k, T):
        assert flops_estimate(SPEC, 2 * k, T) == 2 * flops_estimate(SPEC, k, T)

    def test_negative_blocks(self):
        with pytest.raises(InputError):
            flops_estimate(SPEC, -1, 16)

    def test_zero_parameter_budget(self):
        assert choose_k(SPEC, BudgetSpec(delta_p_max=0)) == 0

    def test_parameter_budget_40000(self):
        assert nc.block_param_count(SPEC) == P_BLOCK
        assert choose_k(SPEC, BudgetSpec(delta_p_max=40000)) == 3

    def test_capped_at_depth(self):
        big = BudgetSpec(delta_p_max=10 * P_BLOCK, delta_flops_max=1e12)
        assert choose_k(SPEC, big) == SPEC.L

    def test_flops_budget_binds(self):
        per_token = flops_estimate(SPEC, 1, SPEC.T_max) / SPEC.T_max
        assert choose_k(SPEC, BudgetSpec(delta_flops_max=2.5 * per_token)) == 2

    @given(st.floats(0, 1e5), st.floats(0, 1e5), st.floats(0, 1e5), st.floats(0, 1e6))
    def test_monotone_in_both_budgets(self, p1, dp, f1, df):
        lo = choose_k(SPEC, BudgetSpec(p1, f1 * 10))
        assert choose_k(SPEC, BudgetSpec(p1 + dp, f1 * 10)) >= lo
        assert choose_k(SPEC, BudgetSpec(p1, f1 * 10 + df)) >= lo

    def test_negative_budget_rejected(self):
        with pytest.raises(ConfigurationError):
            BudgetSpec(delta_p_max=-1)


class TestSelection:
    def test_hand_trace(self):
        assert select_expansion_layers([0.5, 1.0, 0.25, 0.75], 2, 0.5) == [2, 4]

    @pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 1.0])
    def test_matches_reexecution_exhaustively(self, lam):
        rng = np.random.default_rng(int(lam * 100))
        for L in range(1, 9):
            for _ in range(100):
                G = rng.random(L).tolist()
                if rng.random() < 0.2:  # exercise ties
                    G = np.round(np.array(G) * 2) / 2 + 0.5
                    G = G.tolist()
                for k in range(1, L + 1):
                    assert select_expansion_layers(G, k, lam) == reexecute_algorithm(G, k, lam)

    @given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8), st.data())
    def test_lambda_zero_is_top_k(self, G, data):
        k = data.draw(st.integers(1, len(G)))
        expected = sorted(range(1, len(G) + 1), key=lambda l: (-G[l - 1], l))[:k]
        assert select_expansion_layers(G, k, 0.0) == expected

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.sampled_from([0.0, 0.5, 1.0]))
    def test_full_selection(self, G, lam):
        if max(G) <= 0:
            G = [g + 1 for g in G]
        assert sorted(select_expansion_layers(G, len(G), lam)) == list(range(1, len(G) + 1))

    @pytest.mark.parametrize("L", range(2, 9))
    @pytest.mark.parametrize("lam", [0.25, 0.5, 1.0])
    def test_lambda_spread_on_constant_profile(self, L, lam):
        # first pick is layer 1 (tie); the second maximises distance from it
        assert select_expansion_layers([1.0] * L, 2, lam) == [1, L]

    def test_degenerate_profile(self):
        with pytest.raises(DegenerateProfileError):
            select_expansion_layers([0.0, 0.0, 0.0], 1, 0.5)

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(InputError):
            select_expansion_layers([1, 2, 3, 4], k, 0.5)

    def test_lambda_out_of_range(self):
        with pytest.raises(InputError):
            select_expansion_layers([1, 2], 1, 1.5)

    def test_plan_json(self):
        plan = ExpansionPlan(2, (2, 4), 0.5)
        assert plan.to_json() == {"k": 2, "positions": [2, 4], "lambda": 0.5}
        with pytest.raises(ConfigurationError):
            ExpansionPlan(2, (2, 2), 0.5)

    @pytest.mark.parametrize("L,k,expected", [(4, 2, [2, 4]), (4, 1, [4]), (4, 4, [1, 2, 3, 4]),
                                              (12, 3, [4, 8, 12]), (5, 2, [3, 5])])
    def test_uniform_positions(self, L, k, expected):
        assert uniform_positions(L, k) == expected


@pytest.fixture(scope="module")
def base():
    return nc.init_model(SPEC, 5)


class TestExpand:
    @pytest.mark.parametrize("policy", POLICIES)
    @pytest.mark.parametrize("mode", INPUTS)
    def test_identity_at_init(self, base, policy, mode):
        m = expand(base, [1, 3, 4], policy, mode)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            tokens = rng.integers(0, SPEC.V, size=(int(rng.integers(1, 5)), int(rng.integers(1, 17))))
            ref, _ = nc.forward(base, tokens, "D")
            assert np.array_equal(forward_expanded(m, tokens, "D"), ref)

    def test_output_paths_zeroed(self, base):
        m = expand(base, [2], "output-proj")
        blk = m.expanded[2]
        for name in ("Wo", "bo", "W2", "b2"):
            assert not np.any(blk[name])
        for name in ("Wq", "Wk", "Wv", "W1", "ln1_g"):
            assert np.array_equal(blk[name], base.params[f"blocks.1.{name}"])
            assert blk[name] is not base.params[f"blocks.1.{name}"]

    def test_all_linear_zeroes_every_linear(self, base):
        blk = expand(base, [2], "all-linear").expanded[2]
        for name in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "W1", "b1", "W2", "b2"):
            assert not np.any(blk[name])
        assert np.array_equal(blk["ln2_g"], base.params["blocks.1.ln2_g"])

    def test_parameter_count(self, base):
        m = expand(base, [1, 4])
        assert expanded_param_count(m) == sum(a.size for a in base.params.values()) + 2 * P_BLOCK

    @pytest.mark.parametrize("pos", [[0], [5]])
    def test_position_out_of_range(self, base, pos):
        with pytest.raises(InputError):
            expand(base, pos)

    def test_unknown_policy(self, base):
        with pytest.raises(ConfigurationError):
            expand(base, [1], "none")

    def test_inactive_expansions_are_bypassed(self, base):
        m = expand(base, [2, 3])
        rng = np.random.default_rng(0)
        m = m.with_parameters({n: rng.normal(size=a.shape) for n, a in m.parameters().items()
                               if n.startswith("expanded.")})
        tokens = rng.integers(0, SPEC.V, (3, 16))
        ref, _ = nc.forward(base, tokens, "D")
        assert np.array_equal(forward_expanded(m, tokens, "D", active=()), ref)
        assert not np.allclose(forward_expanded(m, tokens, "D"), ref)

    def test_active_position_must_exist(self, base):
        with pytest.raises(InputError):
            forward_expanded(expand(base, [2]), np.zeros((1, 4), dtype=int), "D", active=[3])

    def test_expanded_gradients_match_finite_differences(self, base):
        m = expand(base, [1, 4])
        rng = np.random.default_rng(1)
        m = m.with_parameters({n: a + rng.uniform(-0.1, 0.1, a.shape)
                               for n, a in m.parameters().items() if n.startswith("expanded.")})
        tokens, labels = rng.integers(0, SPEC.V, (3, 16)), rng.integers(0, 4, 3)
        assert nc.finite_diff_oracle(m, tokens, labels, "D") < 1e-6


class TestTrainableMask:
    def test_single_position(self, base):
        m = expand(base, [2, 4])
        mask = trainable_mask(m, {2})
        assert mask == frozenset([f"expanded.2.{p}" for p in BLOCK_PARAMS] + ["heads.D.W", "heads.D.b"])

    def test_empty_is_head_only(self, base):
        assert trainable_mask(expand(base, [2, 4]), set()) == {"heads.D.W", "heads.D.b"}

    def test_all_positions_keep_base_frozen(self, base):
        m = expand(base, [1, 2, 3, 4])
        mask = trainable_mask(m, {1, 2, 3, 4})
        assert not any(n in mask for n in base.params if n not in ("heads.D.W", "heads.D.b"))

    def test_unknown_position(self, base):
        with pytest.raises(InputError):
            trainable_mask(expand(base, [2]), {3})

    def test_freeze_integrity_and_confinement(self, base):
        m = expand(base, [1, 3])
        snapshot = {k: v.copy() for k, v in base.params.items()}
        rng = np.random.default_rng(0)
        mask = trainable_mask(m, {1, 3})
        for step in range(25):
            tokens, labels = rng.integers(0, SPEC.V, (8, 16)), rng.integers(0, 4, 8)
            m, _, grads = nc.sgd_step(m, tokens, labels, "D", 0.05, mask)
            assert set(grads) == set(mask)
        for name, arr in m.base.params.items():
            if name.startswith("heads.D."):
                continue
            assert np.array_equal(arr, snapshot[name]), name
        assert np.any(m.expanded[1]["W2"])


@pytest.fixture(scope="module")
def proxy():
    _, d = task_pair(SPEC.V, SPEC.T_max, SPEC.K)
    return sample(d, 64, seed=0)


class TestProxyProfile:
    def test_single_step_equals_block_norms(self, base, proxy):
        G = proxy_gradient_profile(base, proxy, steps=1, lr=0.05, seed=3, batch_size=16)
        idx = next(nc.minibatches(len(proxy), 16, np.random.default_rng(3)))
        mask = frozenset(n for n in base.params if not n.startswith("heads.G"))
        _, grads = nc.loss_and_backward(base, proxy.tokens[idx], proxy.labels[idx], "D", wrt=mask)
        assert G == nc.block_grad_norms(grads, SPEC.L)

    def test_deterministic_and_non_negative(self, base, proxy):
        before = {k: v.copy() for k, v in base.params.items()}
        a = proxy_gradient_profile(base, proxy, steps=5, lr=0.05, seed=1)
        b = proxy_gradient_profile(base, proxy, steps=5, lr=0.05, seed=1)
        assert a == b and len(a) == SPEC.L and min(a) >= 0
        assert all(np.array_equal(base.params[k], before[k]) for k in before)

    def test_empty_proxy(self, base, proxy):
        with pytest.raises(InputError):
            proxy_gradient_profile(base, proxy.subset([]), steps=1, lr=0.05, seed=0)
