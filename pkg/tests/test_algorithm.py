import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from invset.algorithm import (
    CollapseError,
    RbfOptions,
    evaluate_map,
    partition,
    run,
    verify_k_step,
)
from invset.ellipsoid import Ellipsoid
from invset.hybrid import IntegrationOptions, PoincareMap
from invset.rbf import RBFSet
from invset.systems import (
    COMPASS_GAIT_SECTION_SEED,
    CecParams,
    cec_poincare_map,
    cec_true_invariant_set,
    compass_gait_system,
    nec_poincare_map,
)


def _identity(y):
    return y


def _push_away(y):
    return y + 100.0


IDENTITY_MAP = PoincareMap.from_function(_identity, 2)


class TestPartition:
    def test_all_at_center(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        inputs = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 2))
        outputs = np.zeros_like(inputs)
        batch = partition(E, inputs, outputs)
        assert batch.violations == 0
        assert np.array_equal(batch.retained_inputs, inputs)
        assert batch.escaped_outputs.shape[0] == 0

    def test_all_outside(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        inputs = np.zeros((15, 2))
        outputs = np.full((15, 2), 5.0)
        batch = partition(E, inputs, outputs)
        assert batch.violations == 15
        assert batch.retained_inputs.shape[0] == 0

    def test_set_cardinalities_are_consistent(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        rng = np.random.default_rng(1)
        inputs = rng.uniform(-2, 2, size=(40, 2))
        outputs = rng.uniform(-2, 2, size=(40, 2))
        batch = partition(E, inputs, outputs)
        assert batch.retained_inputs.shape == batch.retained_outputs.shape
        assert batch.escaped_inputs.shape == batch.escaped_outputs.shape
        assert batch.retained_inputs.shape[0] + batch.escaped_inputs.shape[0] == 40
        assert E.contains_batch(batch.retained_outputs).all()
        assert not E.contains_batch(batch.escaped_outputs).any()

    def test_failure_rows_escape(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        inputs = np.zeros((3, 2))
        outputs = np.array([[0.0, 0.0], [np.nan, np.nan], [0.1, 0.1]])
        batch = partition(E, inputs, outputs)
        assert batch.violations == 1
        assert not batch.flags[1]

    def test_cec_true_set_has_no_violations(self):
        E = cec_true_invariant_set(CecParams())
        pts = E.sample(1000, seed=3)
        outputs, ok = evaluate_map(cec_poincare_map(), pts)
        batch = partition(E, pts, outputs, ok)
        assert batch.violations == 0


class TestRun:
    def test_identity_terminates_immediately(self):
        E0 = Ellipsoid.ball(2.0, [0.3, -0.4])
        res = run(IDENTITY_MAP, E0, 1000, 0.03, 1e-9, 10, seed=4)
        assert res.history.termination == "certified"
        assert res.history.iterations == 1
        assert res.certificate.violations == 0
        closed_form = 1.0 - 1e-9 ** (1.0 / 1000)
        assert abs(res.certificate.epsilon_star - closed_form) < 1e-9
        assert res.invariant_set.volume() == E0.volume()

    def test_certificate_freshness(self):
        # the certified iterate must equal the candidate its samples scored,
        # not a refit of them
        pm = cec_poincare_map()
        res = run(pm, Ellipsoid.ball(math.sqrt(10), [0, 0]), 1000, 0.03, 1e-9, 50, seed=1)
        last = res.history.records[-1]
        assert last.candidate is res.invariant_set
        assert last.violations == res.certificate.violations
        assert last.epsilon_star == res.certificate.epsilon_star

    def test_epsilon_star_matches_inversion(self):
        from invset.pac import binomial_tail_inversion

        pm = cec_poincare_map()
        res = run(pm, Ellipsoid.ball(math.sqrt(10), [0, 0]), 500, 0.05, 1e-6, 40, seed=2)
        for rec in res.history.records:
            assert rec.epsilon_star == binomial_tail_inversion(rec.violations, 500, 1e-6)

    def test_volumes_non_increasing_on_benchmarks(self):
        for pm in (cec_poincare_map(), nec_poincare_map()):
            res = run(pm, Ellipsoid.ball(math.sqrt(10), [0, 0]), 800, 0.08, 1e-6, 60, seed=5)
            vols = [rec.volume for rec in res.history.records]
            assert all(b <= a * (1 + 1e-6) for a, b in zip(vols, vols[1:]))

    def test_deterministic_given_seed(self):
        pm = cec_poincare_map()
        E0 = Ellipsoid.ball(math.sqrt(10), [0, 0])
        r1 = run(pm, E0, 400, 0.03, 1e-9, 30, seed=6)
        r2 = run(pm, E0, 400, 0.03, 1e-9, 30, seed=6)
        assert r1.history.iterations == r2.history.iterations
        assert np.array_equal(r1.invariant_set.A, r2.invariant_set.A)
        for a, b in zip(r1.history.records, r2.history.records):
            assert a.violations == b.violations
            assert a.volume == b.volume
            assert np.array_equal(a.batch.inputs, b.batch.inputs)
            assert np.array_equal(a.batch.outputs, b.batch.outputs)

    def test_collapse_error_carries_diagnostics(self):
        pm = PoincareMap.from_function(_push_away, 2)
        with pytest.raises(CollapseError, match="contraction factor r"):
            run(pm, Ellipsoid.ball(1.0, [0, 0]), 100, 0.01, 1e-6, 10, seed=7)

    def test_budget_returns_best_iterate(self):
        pm = nec_poincare_map()
        res = run(pm, Ellipsoid.ball(math.sqrt(10), [0, 0]), 300, 0.001, 1e-9, 8, seed=8)
        assert res.history.termination == "budget"
        best = min(res.history.records, key=lambda r: r.epsilon_star)
        assert res.certificate.epsilon_star == best.epsilon_star
        assert res.history.final_iteration == best.iteration
        assert res.invariant_set is best.candidate

    def test_parameter_validation(self):
        E0 = Ellipsoid.ball(1.0, [0, 0])
        with pytest.raises(ValueError):
            run(IDENTITY_MAP, E0, 1000, 1.5, 1e-9, 10, seed=0)
        with pytest.raises(ValueError):
            run(IDENTITY_MAP, E0, 1000, 0.03, 0.0, 10, seed=0)
        with pytest.raises(ValueError):
            run(IDENTITY_MAP, E0, 2, 0.03, 1e-9, 10, seed=0)

    def test_rbf_representation_pipeline(self):
        pm = nec_poincare_map()
        res = run(
            pm,
            Ellipsoid.ball(math.sqrt(10), [0, 0]),
            600,
            0.08,
            1e-6,
            40,
            seed=9,
            representation="rbf",
            rbf_options=RbfOptions(m=2, gamma=0.25),
        )
        assert isinstance(res.invariant_set, (RBFSet, Ellipsoid))
        if res.history.termination == "certified":
            assert res.certificate.epsilon_star <= 0.08


class TestEvaluateMap:
    def test_process_pool_matches_inline(self):
        system = compass_gait_system()
        opts = IntegrationOptions(rel_tol=1e-6, abs_tol=1e-8, max_flow_time=3.0)
        pmap = PoincareMap.from_hybrid_system(system, opts)  # no batch evaluator
        rng = np.random.default_rng(10)
        points = COMPASS_GAIT_SECTION_SEED + 0.01 * rng.standard_normal((24, 3))
        inline_out, inline_ok = evaluate_map(pmap, points)
        with ProcessPoolExecutor(max_workers=2) as pool:
            pooled_out, pooled_ok = evaluate_map(pmap, points, executor=pool)
        assert np.array_equal(inline_ok, pooled_ok)
        assert np.array_equal(
            inline_out[inline_ok], pooled_out[pooled_ok]
        )

    def test_k_steps_compose(self):
        pm = cec_poincare_map()
        pts = cec_true_invariant_set(CecParams()).sample(50, seed=11)
        two_step, ok = evaluate_map(pm, pts, k=2)
        assert ok.all()
        one, _ = evaluate_map(pm, pts, k=1)
        again, _ = evaluate_map(pm, one, k=1)
        assert np.allclose(two_step, again, atol=1e-14)

    def test_failures_latch_across_steps(self):
        pm = PoincareMap.from_function(_push_away, 2)
        out, ok = evaluate_map(pm, np.zeros((4, 2)), k=3)
        assert ok.all()  # pure drift never fails, but check magnitudes
        assert np.allclose(out, 300.0)


class TestVerifyKStep:
    def test_identity_is_constant(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        records = verify_k_step(IDENTITY_MAP, E, 500, 10, 1e-9, seed=12)
        closed_form = 1.0 - 1e-9 ** (1.0 / 500)
        for rec in records:
            assert rec.violations == 0
            assert abs(rec.epsilon_star - closed_form) < 1e-9

    def test_fresh_samples_per_step_count(self):
        E = Ellipsoid.ball(1.0, [0.0, 0.0])
        records = verify_k_step(IDENTITY_MAP, E, 100, 5, 1e-6, seed=13)
        assert [rec.steps for rec in records] == [1, 2, 3, 4, 5]
