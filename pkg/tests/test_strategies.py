import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedtrade.model import (
    ParamSet,
    param_axpy,
    param_norm_sq,
    params_allclose,
    params_equal,
    partition_filter,
)
from fedtrade.strategies import (
    FINETUNE_EPOCH_BASE,
    GLOBAL_EVAL_KINDS,
    LOCAL_TAGS,
    STRATEGY_KINDS,
    Contribution,
    StrategyKind,
    aggregate_round,
    client_round,
    client_update_ditto,
    client_update_fedavg,
    client_update_fedprox,
    client_update_pfedme,
    eval_params,
    fedadam_server_step,
    finalize_strategy,
    init_strategy_state,
    layerwise_merge,
    local_finetune,
    run_local_epochs,
    scaffold_client_round,
    server_aggregate_fedavg,
)


class QuadProblem:
    """f(theta) = (theta - a)^2, one full batch per epoch."""

    def __init__(self, a):
        self.a = float(a)

    def batches(self, epoch_idx):
        return [epoch_idx]

    def loss_and_grad(self, theta, batch):
        diff = theta["theta"] - self.a
        return float(np.sum(diff * diff)), ParamSet({"theta": 2.0 * diff}, {"theta": "head"})

    def loss(self, theta):
        return self.loss_and_grad(theta, None)[0]


class SplitProblem:
    """Separable quadratic over a body entry and a head entry."""

    def __init__(self, u, v):
        self.u, self.v = float(u), float(v)

    def batches(self, epoch_idx):
        return [epoch_idx]

    def loss_and_grad(self, theta, batch):
        db = theta["body.p"] - self.u
        dh = theta["head.p"] - self.v
        loss = float(np.sum(db * db) + np.sum(dh * dh))
        return loss, ParamSet({"body.p": 2.0 * db, "head.p": 2.0 * dh},
                              {"body.p": "body", "head.p": "head"})


def scalar_theta(x=0.0):
    return ParamSet({"theta": np.array([float(x)])}, {"theta": "head"})


def split_theta(b=0.0, h=0.0):
    return ParamSet({"body.p": np.array([float(b)]), "head.p": np.array([float(h)])},
                    {"body.p": "body", "head.p": "head"})


class TestStrategyKind:
    def test_inventory(self):
        assert set(GLOBAL_EVAL_KINDS) < set(STRATEGY_KINDS)
        assert set(LOCAL_TAGS) < set(STRATEGY_KINDS)

    def test_validation(self):
        with pytest.raises(ValueError, match="unknown strategy"):
            StrategyKind("fedsgd")
        with pytest.raises(ValueError):
            StrategyKind("fedprox", mu=-1.0)
        with pytest.raises(ValueError):
            StrategyKind("fedadam", eta=0.0)
        with pytest.raises(ValueError):
            StrategyKind("fedadam", beta1=1.0)
        with pytest.raises(ValueError):
            StrategyKind("pfedme", inner_steps=0)
        with pytest.raises(ValueError, match="inner_lr"):
            StrategyKind("pfedme", inner_lr=0.0)


class TestAggregate:
    def test_equal_weight_hand_value(self):
        a = ParamSet({"w": np.array([1.0, 3.0])}, {"w": "head"})
        b = ParamSet({"w": np.array([3.0, 5.0])}, {"w": "head"})
        out = server_aggregate_fedavg([(0, 0.5, a), (1, 0.5, b)])
        np.testing.assert_array_equal(out["w"], [2.0, 4.0])

    def test_four_client_sample_size_weights(self):
        sizes = (250, 49, 95, 153)
        total = sum(sizes)
        rng = np.random.default_rng(0)
        params = [ParamSet({"w": rng.normal(size=3)}, {"w": "head"}) for _ in sizes]
        out = server_aggregate_fedavg(
            [(i, n / total, p) for i, (n, p) in enumerate(zip(sizes, params))])
        manual = sum((n / total) * p["w"] for n, p in zip(sizes, params))
        np.testing.assert_allclose(out["w"], manual, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(4))))
    def test_order_invariant(self, order):
        rng = np.random.default_rng(7)
        params = [ParamSet({"w": rng.normal(size=2)}, {"w": "head"}) for _ in range(4)]
        triples = [(i, 0.25, params[i]) for i in range(4)]
        base = server_aggregate_fedavg(triples)
        shuffled = server_aggregate_fedavg([triples[i] for i in order])
        assert params_equal(base, shuffled)

    def test_weight_sum_violation(self):
        p = scalar_theta(1.0)
        with pytest.raises(ValueError, match="sum to"):
            server_aggregate_fedavg([(0, 0.6, p), (1, 0.6, p)])

    def test_negative_weight(self):
        p = scalar_theta(1.0)
        with pytest.raises(ValueError, match="non-negative"):
            server_aggregate_fedavg([(0, 1.5, p), (1, -0.5, p)])

    def test_duplicate_ids(self):
        p = scalar_theta(1.0)
        with pytest.raises(ValueError, match="duplicate"):
            server_aggregate_fedavg([(0, 0.5, p), (0, 0.5, p)])

    def test_name_mismatch(self):
        with pytest.raises(ValueError, match="mismatched parameter names"):
            server_aggregate_fedavg([(0, 0.5, scalar_theta(1.0)),
                                     (1, 0.5, split_theta())])

    def test_empty(self):
        with pytest.raises(ValueError, match="no contributions"):
            server_aggregate_fedavg([])


class TestFedProx:
    def test_mu_zero_is_fedavg_bitwise(self):
        prob = QuadProblem(2.0)
        avg = client_update_fedavg(prob, scalar_theta(0.0), 0, 3, 0.1)
        prox = client_update_fedprox(prob, scalar_theta(0.0), 0, 3, 0.1, 0.0)
        assert params_equal(avg, prox)

    def test_large_mu_pins_to_broadcast(self):
        prob = QuadProblem(10.0)
        anchor = scalar_theta(1.0)
        out = client_update_fedprox(prob, anchor, 0, 5, 1e-7, 1e6)
        assert abs(out["theta"][0] - 1.0) < 1e-3

    def test_prox_gradient_vanishes_at_anchor(self):
        # the first step from the anchor is identical with and without mu
        prob = QuadProblem(3.0)
        anchor = scalar_theta(0.5)
        plain, _ = run_local_epochs(prob, anchor, [0], 0.1)
        prox = client_update_fedprox(prob, anchor, 0, 1, 0.1, 7.0)
        # single epoch, single batch: exactly one step each
        assert plain["theta"][0] == pytest.approx(0.5 - 0.1 * 2.0 * (0.5 - 3.0), abs=1e-15)
        assert prox["theta"][0] == plain["theta"][0]

    def test_negative_mu_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            client_update_fedprox(QuadProblem(0.0), scalar_theta(), 0, 1, 0.1, -0.5)


class TestScaffold:
    def test_first_round_matches_fedavg_bitwise(self):
        problems = {0: QuadProblem(-1.0), 1: QuadProblem(2.0)}
        weights = {0: 0.5, 1: 0.5}
        sc = init_strategy_state(StrategyKind("scaffold"), scalar_theta(0.0), [0, 1])
        fa = init_strategy_state(StrategyKind("fedavg"), scalar_theta(0.0), [0, 1])
        for state in (sc, fa):
            contribs = [client_round(state, problems[c], c, 0, 2, 0.05) for c in (0, 1)]
            aggregate_round(state, contribs, weights)
        assert params_equal(sc.global_params, fa.global_params)

    def test_control_update_hand_value(self):
        # one step from theta = 0 on (theta - a)^2: c_k' = -2a exactly
        theta, c_new, delta_c = scaffold_client_round(
            QuadProblem(3.0), scalar_theta(0.0), scalar_theta(0.0), scalar_theta(0.0),
            0, 1, 0.05)
        assert theta["theta"][0] == pytest.approx(0.3, abs=1e-15)
        assert c_new["theta"][0] == pytest.approx(-6.0, abs=1e-12)
        assert delta_c["theta"][0] == pytest.approx(-6.0, abs=1e-12)

    def test_single_client_control_equals_global(self):
        state = init_strategy_state(StrategyKind("scaffold"), scalar_theta(0.0), [0])
        prob = QuadProblem(1.5)
        for r in range(3):
            contribs = [client_round(state, prob, 0, r, 2, 0.1)]
            aggregate_round(state, contribs, {0: 1.0})
            assert params_allclose(state.control_global, state.control_clients[0], atol=1e-12)

    def test_weighted_control_invariant(self):
        # sum_k p_k c_k stays equal to c across rounds
        problems = {0: QuadProblem(-1.0), 1: QuadProblem(0.5), 2: QuadProblem(2.0)}
        weights = {0: 0.5, 1: 0.3, 2: 0.2}
        state = init_strategy_state(StrategyKind("scaffold"), scalar_theta(0.0), [0, 1, 2])
        for r in range(3):
            contribs = [client_round(state, problems[c], c, r, 2, 0.1) for c in (0, 1, 2)]
            aggregate_round(state, contribs, weights)
            mix = math.fsum(weights[c] * state.control_clients[c]["theta"][0] for c in (0, 1, 2))
            assert mix == pytest.approx(state.control_global["theta"][0], abs=1e-9)

    def test_zero_lr_rejected(self):
        with pytest.raises(ValueError, match="steps \\* lr"):
            scaffold_client_round(QuadProblem(1.0), scalar_theta(), scalar_theta(0.0),
                                  scalar_theta(0.0), 0, 1, 0.0)

    def test_corrections_steer_toward_weighted_optimum(self):
        # multiple local steps per round; plain fedavg has a client-drift
        # fixed point, scaffold removes it
        problems = {0: QuadProblem(-2.0), 1: QuadProblem(4.0)}
        weights = {0: 0.7, 1: 0.3}
        target = 0.7 * -2.0 + 0.3 * 4.0
        state = init_strategy_state(StrategyKind("scaffold"), scalar_theta(0.0), [0, 1])
        for r in range(80):
            contribs = [client_round(state, problems[c], c, r, 3, 0.1) for c in (0, 1)]
            aggregate_round(state, contribs, weights)
        assert state.global_params["theta"][0] == pytest.approx(target, abs=1e-6)


class TestFedAdam:
    def test_unit_delta_hand_value(self):
        theta = scalar_theta(0.0)
        contribs = [(0, 1.0, scalar_theta(1.0))]
        m = ParamSet({"theta": np.zeros(1)}, {"theta": "head"})
        v = ParamSet({"theta": np.zeros(1)}, {"theta": "head"})
        out, m1, v1 = fedadam_server_step(theta, contribs, m, v,
                                          eta=0.1, beta1=0.9, beta2=0.99, tau=1e-3)
        assert m1["theta"][0] == pytest.approx(0.1, abs=1e-15)
        assert v1["theta"][0] == pytest.approx(0.01, abs=1e-15)
        assert out["theta"][0] == pytest.approx(0.09901, abs=1e-5)
        assert out["theta"][0] == pytest.approx(0.1 * 0.1 / (math.sqrt(0.01) + 1e-3), abs=1e-15)

    def test_zero_delta_decays_moments(self):
        theta = scalar_theta(2.0)
        m = ParamSet({"theta": np.array([0.4])}, {"theta": "head"})
        v = ParamSet({"theta": np.array([0.16])}, {"theta": "head"})
        out, m1, v1 = fedadam_server_step(theta, [(0, 1.0, scalar_theta(2.0))], m, v,
                                          eta=0.1, beta1=0.9, beta2=0.99, tau=1e-3)
        assert m1["theta"][0] == pytest.approx(0.36, abs=1e-15)
        assert v1["theta"][0] == pytest.approx(0.1584, abs=1e-15)
        # momentum keeps the server moving even with no fresh drift
        want = 2.0 + 0.1 * 0.36 / (math.sqrt(0.1584) + 1e-3)
        assert out["theta"][0] == pytest.approx(want, abs=1e-12)

    def test_norm_stats_averaged_plainly(self):
        def with_stats(w, mu):
            return ParamSet({"w": np.array([w]), "bn.mean": np.array([mu])},
                            {"w": "head", "bn.mean": "norm_stats"})
        theta = with_stats(0.0, 0.0)
        m = ParamSet({"w": np.zeros(1)}, {"w": "head"})
        v = ParamSet({"w": np.zeros(1)}, {"w": "head"})
        out, _, _ = fedadam_server_step(
            theta, [(0, 0.25, with_stats(1.0, 4.0)), (1, 0.75, with_stats(1.0, 8.0))],
            m, v, eta=0.1, beta1=0.9, beta2=0.99, tau=1e-3)
        assert out["bn.mean"][0] == pytest.approx(7.0, abs=1e-12)
        # gradient-bearing entry takes the adam step, not the plain average
        assert out["w"][0] != pytest.approx(1.0, abs=1e-3)


class TestPfedme:
    def test_lam_zero_freezes_w(self):
        w0 = scalar_theta(1.0)
        tilde, w1 = client_update_pfedme(QuadProblem(5.0), w0, 0, 2,
                                         lam=0.0, inner_steps=3, inner_lr=0.1, outer_lr=0.1)
        assert params_equal(w0, w1)
        assert tilde["theta"][0] != w0["theta"][0]

    def test_inner_loop_reaches_proximal_point(self):
        # argmin (t - a)^2 + lam/2 (t - w)^2 = (2a + lam w) / (2 + lam)
        a, w0, lam = 3.0, 1.0, 1.0
        tilde, w1 = client_update_pfedme(QuadProblem(a), scalar_theta(w0), 0, 1,
                                         lam=lam, inner_steps=400, inner_lr=0.1, outer_lr=0.5)
        prox = (2.0 * a + lam * w0) / (2.0 + lam)
        assert tilde["theta"][0] == pytest.approx(prox, abs=1e-8)
        assert w1["theta"][0] == pytest.approx(w0 - 0.5 * lam * (w0 - prox), abs=1e-8)

    def test_outer_iterate_moves_toward_personal(self):
        w0 = scalar_theta(0.0)
        _, w1 = client_update_pfedme(QuadProblem(4.0), w0, 0, 3,
                                     lam=1.0, inner_steps=5, inner_lr=0.1, outer_lr=0.1)
        assert 0.0 < w1["theta"][0] < 4.0


class TestDitto:
    def test_lam_zero_personal_is_local_training(self):
        prob = QuadProblem(2.0)
        theta_g = scalar_theta(0.0)
        _, personal = client_update_ditto(prob, theta_g, None, 0, 3, 0.1, 0.0)
        local, _ = run_local_epochs(prob, theta_g, range(0, 3), 0.1)
        assert params_equal(personal, local)

    def test_lam_zero_chained_rounds_match_uninterrupted_local(self):
        prob = QuadProblem(2.0)
        theta_g = scalar_theta(0.0)
        personal = None
        for r in range(3):
            _, personal = client_update_ditto(prob, theta_g, personal, r, 2, 0.1, 0.0)
        local, _ = run_local_epochs(prob, theta_g, range(0, 6), 0.1)
        assert params_equal(personal, local)

    def test_large_lam_pins_personal_to_broadcast(self):
        prob = QuadProblem(10.0)
        theta_g = scalar_theta(1.0)
        start = scalar_theta(2.0)
        _, personal = client_update_ditto(prob, theta_g, start, 0, 1, 1e-6, 1e6)
        assert abs(personal["theta"][0] - 1.0) < 1e-3

    def test_global_track_independent_of_lam(self):
        prob = QuadProblem(-3.0)
        theta_g = scalar_theta(0.5)
        g0, _ = client_update_ditto(prob, theta_g, None, 0, 2, 0.1, 0.0)
        g1, _ = client_update_ditto(prob, theta_g, None, 0, 2, 0.1, 5.0)
        assert params_equal(g0, g1)


class TestLayerwise:
    def test_merge_takes_local_tags(self):
        g = split_theta(b=1.0, h=1.0)
        l = split_theta(b=9.0, h=9.0)
        merged = layerwise_merge("fedper", g, l)
        assert merged["body.p"][0] == 1.0 and merged["head.p"][0] == 9.0

    def test_fedbn_requires_norm_parameters(self):
        g = split_theta()
        with pytest.raises(ValueError, match="fedbn needs"):
            layerwise_merge("fedbn", g, g)
        with pytest.raises(ValueError, match="fedbn needs"):
            init_strategy_state(StrategyKind("fedbn"), g, [0])

    def test_unknown_kind(self):
        g = split_theta()
        with pytest.raises(ValueError, match="layerwise_merge supports"):
            layerwise_merge("fedavg", g, g)

    def test_fedper_head_never_aggregated(self):
        problems = {0: SplitProblem(0.0, -4.0), 1: SplitProblem(2.0, 4.0)}
        weights = {0: 0.5, 1: 0.5}
        theta0 = split_theta(b=0.5, h=0.5)
        state = init_strategy_state(StrategyKind("fedper"), theta0, [0, 1])
        for r in range(2):
            contribs = [client_round(state, problems[c], c, r, 1, 0.1) for c in (0, 1)]
            aggregate_round(state, contribs, weights)
        # global head frozen at init; bodies averaged; personal heads split
        assert state.global_params["head.p"][0] == theta0["head.p"][0]
        assert state.global_params["body.p"][0] != theta0["body.p"][0]
        assert state.personal[0]["head.p"][0] < 0 < state.personal[1]["head.p"][0]

    def test_fedper_eval_uses_personal_head(self):
        state = init_strategy_state(StrategyKind("fedper"), split_theta(b=1.0, h=0.0), [0])
        state.personal[0] = split_theta(b=7.0, h=5.0)
        out = eval_params(state, 0)
        assert out["body.p"][0] == 1.0 and out["head.p"][0] == 5.0
        # a client never seen keeps the global model
        assert params_equal(eval_params(state, 9), state.global_params)

    def test_fedrep_phases_are_single_coordinate_steps(self):
        # separable loss: head phase then body phase, each one exact SGD step
        prob = SplitProblem(u=2.0, v=-2.0)
        state = init_strategy_state(StrategyKind("fedrep", head_epochs=1),
                                    split_theta(0.0, 0.0), [0])
        contrib = client_round(state, prob, 0, 0, 1, 0.1)
        want_head = 0.0 - 0.1 * 2.0 * (0.0 - -2.0)
        want_body = 0.0 - 0.1 * 2.0 * (0.0 - 2.0)
        assert contrib.params["head.p"][0] == pytest.approx(want_head, abs=1e-15)
        assert contrib.params["body.p"][0] == pytest.approx(want_body, abs=1e-15)

    def test_fedrep_head_epochs_multiply_head_steps(self):
        prob = SplitProblem(u=2.0, v=-2.0)
        one = client_round(init_strategy_state(StrategyKind("fedrep", head_epochs=1),
                                               split_theta(), [0]), prob, 0, 0, 1, 0.1)
        two = client_round(init_strategy_state(StrategyKind("fedrep", head_epochs=2),
                                               split_theta(), [0]), prob, 0, 0, 1, 0.1)
        assert abs(two.params["head.p"][0] + 2.0) < abs(one.params["head.p"][0] + 2.0)
        assert two.params["body.p"][0] == one.params["body.p"][0]


class TestFinetune:
    def test_zero_post_epochs_is_identity(self):
        prob = QuadProblem(1.0)
        theta = scalar_theta(0.3)
        out = local_finetune(prob, theta, 0, 0.1)
        assert params_equal(out, theta)

    def test_finalize_trains_personal_copies(self):
        problems = {0: QuadProblem(-1.0), 1: QuadProblem(3.0)}
        state = init_strategy_state(StrategyKind("finetune", post_epochs=4),
                                    scalar_theta(1.0), [0, 1])
        finalize_strategy(state, problems, 0.1)
        for cid, prob in problems.items():
            before = prob.loss(state.global_params)
            after = prob.loss(state.personal[cid])
            assert after < before
        assert params_equal(eval_params(state, 0), state.personal[0])

    def test_finetune_epoch_streams_are_separate(self):
        # finetune pulls batches from its own epoch range, not round epochs
        seen = []

        class Recording(QuadProblem):
            def batches(self, epoch_idx):
                seen.append(epoch_idx)
                return [epoch_idx]

        local_finetune(Recording(0.0), scalar_theta(1.0), 2, 0.1)
        assert seen == [FINETUNE_EPOCH_BASE, FINETUNE_EPOCH_BASE + 1]


class TestFedAvgConvergence:
    def test_two_client_quadratic_reaches_weighted_optimum(self):
        problems = {0: QuadProblem(-2.0), 1: QuadProblem(4.0)}
        weights = {0: 0.25, 1: 0.75}
        target = 0.25 * -2.0 + 0.75 * 4.0
        state = init_strategy_state(StrategyKind("fedavg"), scalar_theta(0.0), [0, 1])
        for r in range(200):
            contribs = [client_round(state, problems[c], c, r, 1, 0.1) for c in (0, 1)]
            aggregate_round(state, contribs, weights)
        assert state.global_params["theta"][0] == pytest.approx(target, abs=1e-9)
