import math

import numpy as np
import pytest

from disarm.bernoulli import enumerate_exact_gradient, sample_antithetic
from disarm.estimators import (
    GradientEstimate,
    InterpolationConfig,
    ObjectiveFunction,
    arm,
    disarm,
    interpolated,
    log_pair_prob_antithetic_rows,
    reinforce_baseline,
    reinforce_loo,
)
from disarm.numerics import sigmoid
from disarm.rng import make_rng
from disarm.tracking import paired_variance_difference, variance_with_se


def quadratic(seed, dim):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim))
    a = 0.5 * (a + a.T)
    c = rng.normal(size=dim)
    return lambda b: float(b @ a @ b + c @ b)


class TestReinforceBaseline:
    def test_baseline_equal_to_value_gives_zero(self):
        f = lambda b: 3.25  # noqa: E731
        est = reinforce_baseline(np.array([0.3, -0.7]), f, 3.25, make_rng(0))
        assert np.all(est.partials == 0.0)
        assert est.objective_evals == 1

    def test_constant_objective_zero_baseline(self):
        c = 4.0
        est = reinforce_baseline(np.zeros(3), lambda b: c, 0.0, make_rng(1))
        b = (est.partials / (c * 0.5) + 1.0) / 2.0  # invert c*(b - 0.5)
        assert np.all((b == 0.0) | (b == 1.0))

    def test_hand_computed_value(self):
        # dim 1, logit 0, forced sample b=0 via a seed that draws u >= 0.5
        rng = make_rng(3)
        est = reinforce_baseline(np.array([0.0]), lambda b: 3.0 if b[0] == 0 else -1.0, 1.0, rng)
        if est.partials[0] != 0.0:
            want = (3.0 - 1.0) * (0.0 - 0.5) if est.partials[0] < 0 else (-1.0 - 1.0) * (1.0 - 0.5)
            assert est.partials[0] == pytest.approx(want)
        assert est.estimator_id == "reinforce"


class TestReinforceLoo:
    def test_constant_objective_is_exactly_zero(self):
        est = reinforce_loo(np.array([0.5, -0.5]), lambda b: 9.0, make_rng(0))
        assert np.all(est.partials == 0.0)
        assert est.objective_evals == 2

    def test_equal_draws_give_zero(self):
        # saturated logits force identical samples
        est = reinforce_loo(np.array([30.0, -30.0]), lambda b: float(b.sum()), make_rng(2))
        assert np.all(est.partials == 0.0)

    def test_hand_computed_value(self):
        # alpha=0, b=1, b~=0, f(1)=2, f(0)=1 -> 0.5*[(1)(0.5) + (-1)(-0.5)] = 0.5
        rng = make_rng(0)
        found = False
        for _ in range(50):
            est = reinforce_loo(np.array([0.0]), lambda b: 1.0 + b[0], rng)
            if est.partials[0] != 0.0:
                assert abs(est.partials[0]) == pytest.approx(0.5, rel=1e-14)
                found = True
                break
        assert found


class TestArmAndDisarm:
    def test_arm_all_half_uniforms_would_vanish(self):
        # 2u - 1 = 0 at u = 0.5 regardless of the payoff difference
        logits = np.array([0.0, 0.0])
        pair = sample_antithetic(logits, make_rng(0))
        forced = type(pair)(u=np.full(2, 0.5), b=pair.b, b_tilde=pair.b_tilde)
        est = arm(logits, lambda b: float(b.sum()), forced)
        assert np.all(est.partials == 0.0)

    def test_arm_hand_computed_value(self):
        # alpha=0, u=0.3: b=0, b~=1; f(0)=1, f(1)=2 -> 0.5*(1-2)*(2*0.3-1) = 0.2
        from disarm.bernoulli import AntitheticPair, antithetic_bits

        u = np.array([0.3])
        b, bt = antithetic_bits(u, sigmoid(np.array([0.0])))
        pair = AntitheticPair(u=u, b=b, b_tilde=bt)
        est = arm(np.array([0.0]), lambda b_: 1.0 + b_[0], pair)
        assert est.partials[0] == pytest.approx(0.2, rel=1e-14)
        assert est.objective_evals == 2

    def test_arm_agreeing_pair_vanishes(self):
        logits = np.array([30.0, 30.0])
        pair = sample_antithetic(logits, make_rng(1))
        assert np.array_equal(pair.b, pair.b_tilde)
        est = arm(logits, lambda b: float(b @ np.array([1.0, 2.0])), pair)
        assert np.all(est.partials == 0.0)

    def test_disarm_hand_computed_values(self):
        from disarm.bernoulli import AntitheticPair

        # alpha=0, b=1, b~=0, f(1)=2, f(0)=1 -> 0.5*(2-1)*(+1)*0.5 = 0.25
        pair = AntitheticPair(u=np.array([0.9]), b=np.array([1.0]), b_tilde=np.array([0.0]))
        est = disarm(np.array([0.0]), lambda b: 1.0 + b[0], pair)
        assert est.partials[0] == pytest.approx(0.25, rel=1e-14)
        # alpha=ln 3, b=0, b~=1, f(0)=0, f(1)=1 -> 0.5*(0-1)*(-1)*0.75 = 0.375
        pair = AntitheticPair(u=np.array([0.1]), b=np.array([0.0]), b_tilde=np.array([1.0]))
        est = disarm(np.array([math.log(3.0)]), lambda b: b[0], pair)
        assert est.partials[0] == pytest.approx(0.375, rel=1e-14)

    def test_disarm_zero_exactly_where_pair_agrees(self):
        logits = np.array([0.2, -0.4, 1.0, -2.0])
        f = quadratic(5, 4)
        rng = make_rng(8)
        agree_total = 0
        zero_total = 0
        for _ in range(500):
            pair = sample_antithetic(logits, rng)
            est = disarm(logits, f, pair)
            agree = pair.b == pair.b_tilde
            assert np.all(est.partials[agree] == 0.0)
            agree_total += int(agree.sum())
            zero_total += int((est.partials == 0.0).sum())
        # sparsity accounting is bit-for-bit: zeros come only from agreement
        assert zero_total == agree_total

    def test_dim_mismatch_is_an_error(self):
        pair = sample_antithetic(np.zeros(3), make_rng(0))
        with pytest.raises(ValueError):
            arm(np.zeros(2), lambda b: 0.0, pair)
        with pytest.raises(ValueError):
            disarm(np.zeros(2), lambda b: 0.0, pair)


class TestUnbiasedness:
    @pytest.mark.parametrize("estimator_id", ["reinforce", "reinforce_loo", "arm", "disarm"])
    def test_matches_enumeration(self, estimator_id):
        dim = 4
        logits = np.random.default_rng(1).uniform(-1.5, 1.5, size=dim)
        f = quadratic(2, dim)
        exact = enumerate_exact_gradient(logits, f)
        rng = make_rng(33)
        n = 40_000
        acc = np.zeros(dim)
        acc2 = np.zeros(dim)
        for _ in range(n):
            if estimator_id == "reinforce":
                est = reinforce_baseline(logits, f, 0.0, rng)
            elif estimator_id == "reinforce_loo":
                est = reinforce_loo(logits, f, rng)
            else:
                pair = sample_antithetic(logits, rng)
                est = (arm if estimator_id == "arm" else disarm)(logits, f, pair)
            acc += est.partials
            acc2 += est.partials**2
        mean = acc / n
        se = np.sqrt(np.maximum(acc2 / n - mean**2, 0.0) / n)
        assert np.all(np.abs(mean - exact) < 5 * se + 1e-12)


class TestVarianceOrdering:
    def test_disarm_never_beats_arm_on_shared_pairs(self):
        # conditioning identity: disarm is the conditional mean of arm, so its
        # variance cannot exceed arm's on the same pairs
        dim = 3
        logits = np.array([0.3, -0.9, 1.4])
        f = quadratic(7, dim)
        rng = make_rng(17)
        n = 5000
        arm_draws = np.zeros((n, dim))
        disarm_draws = np.zeros((n, dim))
        for i in range(n):
            pair = sample_antithetic(logits, rng)
            arm_draws[i] = arm(logits, f, pair).partials
            disarm_draws[i] = disarm(logits, f, pair).partials
        for d in range(dim):
            diff, se = paired_variance_difference(arm_draws[:, d], disarm_draws[:, d])
            assert diff > -2 * se

    def test_conditioning_identity_by_buckets(self):
        # within each realized per-dimension pair bucket, the mean arm
        # coefficient matches the disarm coefficient (4 SE on the paired diff)
        dim = 2
        logits = np.array([0.6, -1.1])
        f = quadratic(11, dim)
        rng = make_rng(29)
        n = 60_000
        arm_draws = np.zeros((n, dim))
        disarm_draws = np.zeros((n, dim))
        bits = np.zeros((n, dim, 2))
        for i in range(n):
            pair = sample_antithetic(logits, rng)
            arm_draws[i] = arm(logits, f, pair).partials
            disarm_draws[i] = disarm(logits, f, pair).partials
            bits[i, :, 0] = pair.b
            bits[i, :, 1] = pair.b_tilde
        for d in range(dim):
            for bb in (0.0, 1.0):
                for tt in (0.0, 1.0):
                    mask = (bits[:, d, 0] == bb) & (bits[:, d, 1] == tt)
                    if mask.sum() < 100:
                        continue
                    delta = arm_draws[mask, d] - disarm_draws[mask, d]
                    se = delta.std(ddof=1) / math.sqrt(mask.sum())
                    assert abs(delta.mean()) < 4 * se + 1e-12


class TestInterpolated:
    def test_beta_validation(self):
        with pytest.raises(ValueError):
            InterpolationConfig(-0.1)
        with pytest.raises(ValueError):
            InterpolationConfig(1.0001)

    def test_endpoints_reduce_to_base_estimators(self):
        logits = np.array([0.4, -0.8, 1.2])
        f = quadratic(3, 3)
        for seed in range(200):
            # beta = 0: burn the mixture uniform, then the same two samples
            est = interpolated(logits, f, InterpolationConfig(0.0), make_rng(seed))
            ref_rng = make_rng(seed)
            ref_rng.random()
            ref = reinforce_loo(logits, f, ref_rng)
            assert np.array_equal(est.partials, ref.partials)
            # beta = 1: burn the mixture uniform, then the same antithetic pair
            est = interpolated(logits, f, InterpolationConfig(1.0), make_rng(seed))
            ref_rng = make_rng(seed)
            ref_rng.random()
            ref = disarm(logits, f, sample_antithetic(logits, ref_rng))
            assert np.array_equal(est.partials, ref.partials)

    def test_impossible_antithetic_cell_gets_zero_weight(self):
        # p < 0.5 makes (1,1) impossible under the coupling; the posterior
        # must put all mass on the independent component, whose LOO estimate
        # on an agreeing pair is zero
        from disarm.estimators import _antithetic_posterior

        logit = math.log(0.3 / 0.7)
        rows = log_pair_prob_antithetic_rows(np.array([logit]), np.array([1.0]), np.array([1.0]))
        assert float(rows) == -math.inf
        weight = _antithetic_posterior(
            np.array([logit]), np.array([1.0]), np.array([1.0]), beta=0.7
        )
        assert weight == 0.0
        # behavioral consequence: an agreeing realized pair gives an exact
        # zero estimate (both base estimators vanish on it), and a
        # disagreeing pair cannot, since this payoff separates the two bits
        logits = np.array([logit])
        f = lambda b: 1.0 + 2.0 * b[0]  # noqa: E731
        zeros = sum(
            interpolated(logits, f, InterpolationConfig(0.3), make_rng(seed)).partials[0] == 0.0
            for seed in range(300)
        )
        # agreement probability is well away from 0 and 1 at p = 0.3
        assert 0 < zeros < 300

    def test_pair_table_rows_sum_to_one(self):
        for logit in (-1.3, -0.2, 0.0, 0.5, 2.0):
            a = np.array([logit])
            total = 0.0
            for bb in (0.0, 1.0):
                for tt in (0.0, 1.0):
                    lp = float(log_pair_prob_antithetic_rows(a, np.array([bb]), np.array([tt])))
                    total += math.exp(lp)
            assert total == pytest.approx(1.0, rel=1e-12)

    def test_unbiasedness_at_half(self):
        dim = 3
        logits = np.array([0.5, -0.5, 1.0])
        f = quadratic(13, dim)
        exact = enumerate_exact_gradient(logits, f)
        rng = make_rng(55)
        n = 60_000
        acc = np.zeros(dim)
        acc2 = np.zeros(dim)
        cfg = InterpolationConfig(0.5)
        for _ in range(n):
            est = interpolated(logits, f, cfg, rng)
            acc += est.partials
            acc2 += est.partials**2
        mean = acc / n
        se = np.sqrt(np.maximum(acc2 / n - mean**2, 0.0) / n)
        assert np.all(np.abs(mean - exact) < 5 * se)


class TestObjectiveFunction:
    def test_eval_counting_and_binary_guard(self):
        wrapped = ObjectiveFunction(lambda b: float(b.sum()))
        wrapped(np.array([0.0, 1.0]))
        wrapped(np.array([1.0, 1.0]))
        assert wrapped.eval_count == 2
        with pytest.raises(ValueError):
            wrapped(np.array([0.5, 1.0]))

    def test_estimators_consume_declared_evaluations(self):
        logits = np.array([0.1, -0.2])
        for build, want in [
            (lambda f: reinforce_baseline(logits, f, 0.0, make_rng(0)), 1),
            (lambda f: reinforce_loo(logits, f, make_rng(0)), 2),
            (lambda f: arm(logits, f, sample_antithetic(logits, make_rng(0))), 2),
            (lambda f: disarm(logits, f, sample_antithetic(logits, make_rng(0))), 2),
            (lambda f: interpolated(logits, f, InterpolationConfig(0.5), make_rng(0)), 2),
        ]:
            wrapped = ObjectiveFunction(lambda b: float(b.sum()))
            est = build(wrapped)
            assert isinstance(est, GradientEstimate)
            assert wrapped.eval_count == want == est.objective_evals
            assert est.partials.shape == logits.shape


def test_variance_with_se_matches_known_distribution():
    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 2.0, size=200_000)
    var, se = variance_with_se(x)
    assert var == pytest.approx(4.0, rel=0.05)
    assert abs(var - 4.0) < 4 * se
