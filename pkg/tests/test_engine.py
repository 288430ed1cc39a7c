import numpy as np
import pytest

from fedsim import counterexample as ce
from fedsim import datasets, engine
from fedsim.engine import LrSchedule, RunConfig
from fedsim.errors import DivergenceError, ScheduleError
from fedsim.objectives import GlobalObjective, LogisticObjective, QuadraticObjective
from fedsim.sampling import Scheme


def small_logistic_problem(N=4, seed=0, sizes=None):
    ds = datasets.generate_synthetic(0.5, 0.5, N, sizes or [15] * N, seed=seed, n_features=6, n_classes=3)
    return ds.objective(1e-3)


class TestSchedule:
    def test_values(self):
        assert LrSchedule.constant(0.1).etas(5, 3).tolist() == [0.1] * 3
        np.testing.assert_allclose(LrSchedule.inverse(1.0).etas(0, 3), [1, 1 / 2, 1 / 3])
        np.testing.assert_allclose(LrSchedule.inverse(1.0, period=2).etas(0, 5), [1, 1, 1 / 2, 1 / 2, 1 / 3])
        np.testing.assert_allclose(LrSchedule.rational(0.2, 5, 0.1).etas(10, 1), [0.2 / 6])

    def test_theoretical_gamma(self):
        app = LrSchedule.theoretical(1.0, 4.0, 8)
        main = LrSchedule.theoretical(1.0, 4.0, 8, variant="standard")
        assert app.gamma == 31 and main.gamma == 32
        assert main.eta(0) == pytest.approx(2 / 33)
        assert app.eta(0) == pytest.approx(2 / 32)
        assert LrSchedule.theoretical(1.0, 1.0, 20).gamma == 19

    @pytest.mark.parametrize("build", [
        lambda: LrSchedule.constant(0.0),
        lambda: LrSchedule.inverse(1.0, period=0),
        lambda: LrSchedule.theoretical(0.0, 1.0, 2),
        lambda: LrSchedule.theoretical(2.0, 1.0, 2),
        lambda: LrSchedule("cosine", 1.0),
    ])
    def test_invalid(self, build):
        with pytest.raises(ScheduleError):
            build()

    def test_gamma_only_for_theoretical(self):
        with pytest.raises(ScheduleError):
            LrSchedule.constant(0.1).gamma


class TestValidateSchedule:
    def test_theoretical_passes(self):
        rep = engine.validate_schedule(LrSchedule.theoretical(1.0, 4.0, 8), 4.0, 8, 10_000)
        assert rep.passed and rep.non_increasing and rep.doubling and rep.first_step

    def test_main_variant_also_passes_example(self):
        rep = engine.validate_schedule(LrSchedule.theoretical(1.0, 4.0, 8, "standard"), 4.0, 8, 10_000)
        assert rep.passed and rep.first_eta == pytest.approx(2 / 33)

    def test_constant_too_large_flagged(self):
        assert not engine.validate_schedule(LrSchedule.constant(0.3), 1.0, 4, 100).first_step
        rep = engine.validate_schedule(LrSchedule.constant(0.25), 1.0, 4, 100)
        assert rep.passed

    @pytest.mark.parametrize("E", [1, 2, 5, 9])
    def test_inverse_doubling_fails_only_early(self, E):
        rep = engine.validate_schedule(LrSchedule.inverse(0.01), 1.0, E, 200)
        assert rep.doubling_violations == list(range(E - 1))
        assert rep.non_increasing


class TestLocalUpdate:
    def test_single_step_is_gradient_step(self):
        obj = QuadraticObjective(np.diag([1.0, 3.0]), np.array([1.0, -1.0]), mu=0.5)
        w0 = np.array([0.3, -0.2])
        w = engine.local_update(obj, w0, 1, LrSchedule.constant(0.1))
        np.testing.assert_allclose(w, w0 - 0.1 * obj.grad(w0), atol=1e-15)

    def test_affine_recursion_oracle(self, ridge):
        prob, _ = ridge
        F = prob.objective()
        sched = LrSchedule.rational(0.2, 5, 0.5)
        w0 = np.random.default_rng(0).normal(size=prob.dim)
        H = prob.shifted_parts()[0]
        etas = sched.etas(7, 4)
        expected = w0.copy()
        for eta in etas:
            expected = (np.eye(prob.dim) - eta * H) @ expected + eta * prob.b
        np.testing.assert_allclose(engine.local_update(F.locals[0], w0, 4, sched, t0=7), expected, atol=1e-13)

    def test_minimizer_is_fixed(self):
        obj = LogisticObjective(np.random.default_rng(0).normal(size=(20, 3)), np.arange(20) % 2, 2, 1e-2)
        m = obj.local_minimum()
        w = engine.local_update(obj, m.w, 5, LrSchedule.constant(0.5))
        np.testing.assert_allclose(w, m.w, atol=1e-9)


class TestRunFedavg:
    def test_single_device_is_gradient_descent(self):
        obj = QuadraticObjective(np.diag([1.0, 2.0, 3.0]), np.ones(3), mu=0.1)
        F = GlobalObjective([obj], [1.0])
        res = engine.run_fedavg(F, RunConfig(Scheme.FULL, 3, 30, LrSchedule.inverse(0.2)))
        w = np.zeros(3)
        for s in range(30):
            w = w - 0.2 / (1 + s) * obj.grad(w)
        np.testing.assert_allclose(res.w, w, atol=1e-14)
        assert [r.step for r in res.records] == list(range(3, 31, 3))

    def test_round_map_agreement(self, ridge):
        prob, w_star = ridge
        res = engine.run_fedavg(prob.objective(), RunConfig(Scheme.FULL, 4, 40, LrSchedule.constant(0.05)))
        w = np.zeros(prob.dim)
        for _ in range(10):
            w = ce.round_map(prob, w, 0.05, 4)
        np.testing.assert_allclose(res.w, w, atol=1e-12)

    def test_converges_to_fixed_point(self, ridge):
        prob, w_star = ridge
        res = engine.run_fedavg(prob.objective(), RunConfig(Scheme.FULL, 2, 40_000, LrSchedule.constant(0.2)),
                                w_star=w_star)
        np.testing.assert_allclose(res.w, ce.fedavg_fixed_point(prob, 0.2, 2), atol=1e-8)
        assert res.records[-1].dist_opt == pytest.approx(np.linalg.norm(res.w - w_star))

    def test_scheme_two_with_everyone_equals_full(self):
        F = small_logistic_problem()
        kw = dict(E=3, T=30, schedule=LrSchedule.constant(0.1), batch_size=4, seed=9)
        full = engine.run_fedavg(F, RunConfig(Scheme.FULL, **kw))
        two = engine.run_fedavg(F, RunConfig(Scheme.SCHEME_II, K=4, **kw))
        np.testing.assert_array_equal(full.w, two.w)

    def test_identical_devices_full_batch_is_centralised_gd(self):
        rng = np.random.default_rng(0)
        obj = LogisticObjective(rng.normal(size=(25, 4)), rng.integers(0, 3, 25), 3, 1e-3)
        F = GlobalObjective([obj] * 3, np.full(3, 1 / 3))
        res = engine.run_fedavg(F, RunConfig(Scheme.FULL, 5, 50, LrSchedule.constant(0.3)))
        w = np.zeros(obj.shape.size)
        for _ in range(50):
            w = w - 0.3 * obj.grad(w)
        np.testing.assert_allclose(res.w, w, atol=1e-12)

    def test_identical_devices_one_step_is_large_batch_sgd(self):
        rng = np.random.default_rng(1)
        obj = LogisticObjective(rng.normal(size=(25, 4)), rng.integers(0, 3, 25), 3, 1e-3)
        F = GlobalObjective([obj] * 2, [0.5, 0.5])
        cfg = RunConfig(Scheme.FULL, 1, 6, LrSchedule.constant(0.3), batch_size=5, seed=4)
        res = engine.run_fedavg(F, cfg)
        w = np.zeros(obj.shape.size)
        for rnd in range(1, 7):
            idx = [obj.draw_batches(engine._device_rng(4, rnd, k), 1, 5)[0] for k in range(2)]
            w = w - 0.3 * obj.batch_grad(w, np.concatenate(idx))
        np.testing.assert_allclose(res.w, w, atol=1e-12)

    def test_deterministic_and_csv_bytes(self, tmp_path):
        F = small_logistic_problem(sizes=[5, 10, 20, 40])
        cfg = RunConfig(Scheme.SCHEME_I, 2, 20, LrSchedule.inverse(0.5, 2), K=3, batch_size=3, seed=2)
        a, b = engine.run_fedavg(F, cfg), engine.run_fedavg(F, cfg)
        engine.write_trajectory(a.records, tmp_path / "a.csv")
        engine.write_trajectory(b.records, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert all(len(r.selected) == 3 for r in a.records)

    def test_same_devices_selected_across_schemes(self):
        F = small_logistic_problem()
        kw = dict(E=2, T=20, K=2, schedule=LrSchedule.constant(0.1), batch_size=2, seed=5)
        sel = [r.selected for r in engine.run_fedavg(F, RunConfig(Scheme.SCHEME_II, **kw)).records]
        sel_orig = [r.selected for r in engine.run_fedavg(F, RunConfig(Scheme.ORIGINAL, **kw)).records]
        assert sel == sel_orig

    def test_divergence_reports_first_bad_step(self):
        obj = QuadraticObjective(np.eye(2), np.ones(2))
        F = GlobalObjective([obj], [1.0])
        # eta = 3 multiplies the error by -2 each step, so the squared gradient norm overflows first
        with pytest.raises(DivergenceError) as info:
            engine.run_fedavg(F, RunConfig(Scheme.FULL, 50, 5000, LrSchedule.constant(3.0)))
        w, bad = np.zeros(2), 0
        with np.errstate(over="ignore", invalid="ignore"):
            while True:
                g = w - 1.0
                w = w - 3.0 * g
                if not (np.isfinite(g @ g) and np.all(np.isfinite(w))):
                    break
                bad += 1
        assert info.value.step == bad
        assert len(info.value.records) == bad // 50

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RunConfig(Scheme.FULL, 3, 10, LrSchedule.constant(0.1))
        with pytest.raises(ValueError):
            RunConfig(Scheme.SCHEME_I, 2, 10, LrSchedule.constant(0.1))
        with pytest.raises(ValueError):
            RunConfig(Scheme.SCHEME_I, 2, 10, LrSchedule.constant(0.1), K=2, record_divergence=True)
        F = small_logistic_problem()
        with pytest.raises(ValueError):
            engine.run_fedavg(F, RunConfig(Scheme.SCHEME_II, 1, 2, LrSchedule.constant(0.1), K=5))


class TestDivergenceStat:
    def test_zero_at_synchronisation(self, ridge):
        prob, _ = ridge
        res = engine.run_fedavg(prob.objective(), RunConfig(Scheme.FULL, 4, 400, LrSchedule.constant(0.1),
                                                            record_divergence=True))
        stat, bound = engine.divergence_stat(res)
        assert np.all(stat[::4] == 0.0) and np.all(stat[1::4] > 0)
        assert np.all(stat <= bound)

    def test_one_local_step_has_no_spread(self, ridge):
        prob, _ = ridge
        res = engine.run_fedavg(prob.objective(), RunConfig(Scheme.FULL, 1, 50, LrSchedule.constant(0.1),
                                                            record_divergence=True))
        stat, bound = engine.divergence_stat(res)
        assert not stat.any() and not bound.any()

    def test_lockstep_matches_lazy_path(self):
        F = small_logistic_problem()
        cfg = dict(E=3, T=30, schedule=LrSchedule.constant(0.2), batch_size=4, seed=1)
        lazy = engine.run_fedavg(F, RunConfig(Scheme.FULL, **cfg))
        lock = engine.run_fedavg(F, RunConfig(Scheme.FULL, record_divergence=True, **cfg))
        np.testing.assert_allclose(lazy.w, lock.w, atol=1e-12)
        assert lazy.max_grad_norm == pytest.approx(lock.max_grad_norm, rel=1e-12)

    def test_stochastic_average_respects_bound(self):
        F = small_logistic_problem(sizes=[10, 20, 30, 40])
        diffs = []
        for seed in range(10):
            cfg = RunConfig(Scheme.FULL, 5, 100, LrSchedule.inverse(0.5, 5), batch_size=3, seed=seed,
                            record_divergence=True)
            stat, bound = engine.divergence_stat(engine.run_fedavg(F, cfg))
            diffs.append(stat - bound)
        diffs = np.array(diffs)
        se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
        assert np.all(diffs.mean(axis=0) <= 2 * se)

    def test_requires_recording(self, ridge):
        prob, _ = ridge
        res = engine.run_fedavg(prob.objective(), RunConfig(Scheme.FULL, 2, 4, LrSchedule.constant(0.1)))
        with pytest.raises(ValueError):
            engine.divergence_stat(res)


class TestTransform:
    def test_constants_example(self):
        objs = [QuadraticObjective(np.eye(2) * (k + 1), np.ones(2)) for k in range(4)]
        F = GlobalObjective(objs, [0.4, 0.3, 0.2, 0.1])
        scaled, nu, vs = engine.transform_problem(F)
        assert nu == pytest.approx(1.6) and vs == pytest.approx(0.4)
        np.testing.assert_allclose(scaled.weights, 0.25)
        w = np.random.default_rng(0).normal(size=2)
        assert scaled.loss(w) == pytest.approx(F.loss(w), abs=1e-12)

    def test_balanced_is_unchanged(self):
        F = small_logistic_problem()
        scaled, nu, vs = engine.transform_problem(F)
        assert nu == pytest.approx(1.0) and vs == pytest.approx(1.0)
        w = np.random.default_rng(1).normal(size=F.shape.size)
        assert scaled.locals[2].loss(w) == pytest.approx(F.locals[2].loss(w), rel=1e-14)

    def test_transformed_scheme_runs_and_reports_original_loss(self):
        F = small_logistic_problem(sizes=[5, 10, 20, 40])
        res = engine.run_fedavg(F, RunConfig(Scheme.SCHEME_II_TRANSFORMED, 2, 20, LrSchedule.constant(0.05), K=2,
                                             batch_size=3))
        assert res.records[-1].loss == pytest.approx(F.loss(res.w))


def test_trajectory_csv_format(tmp_path):
    recs = [engine.RoundRecord(1, 4, 0.1, 1 / 3, None, (0, 2)), engine.RoundRecord(2, 8, 0.05, 0.25, 2.0, (1,))]
    path = tmp_path / "t.csv"
    engine.write_trajectory(recs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,step,eta,loss,dist_opt,selected"
    assert lines[1] == "1,4,0.10000000000000001,0.33333333333333331,,0;2"
    back = engine.read_trajectory(path)
    assert back[0]["loss"] == 1 / 3 and back[0]["dist_opt"] is None and back[1]["selected"] == (1,)
