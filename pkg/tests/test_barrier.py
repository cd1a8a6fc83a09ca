"""Region-of-safety pipeline: seeds, initialization, expansion, one-shot
verification, and Monte-Carlo validation.

A one-dimensional closed loop with known exact region of safety exercises
every stage cheaply; the reduced grid-coupled loops then run through the
same pipeline at low degree with a reduced disturbance range so the suite
stays fast.
"""

import numpy as np
import pytest

from roskit import barrier as bar
from roskit.plant import MODE_GAINS, assemble_closed_loop
from roskit.polyalg import Polynomial, Scaling, SemialgebraicSet


def toy_scenario(limit=0.75, d_max=0.15, schedule=(2, 4)):
    """dx/dt = -x + d on [-1, 1]: the true region of safety is |x| < limit
    since trajectories decay monotonically toward d <= d_max < limit."""
    z = ("z",)
    zd = ("z", "d")
    scaling = Scaling.from_box(z, (-1.0,), (1.0,))
    f = [Polynomial(zd, {(1, 0): -1.0, (0, 1): 1.0})]
    g_X = [Polynomial(z, {(0,): 1.0, (2,): -1.0})]
    g_U = [Polynomial(z, {(2,): 1.0, (0,): -limit ** 2})]
    d = Polynomial.variable(zd, "d")
    g_D = [d * (d_max - d)]
    return bar.SafetyScenario(0, np.array([[-1.0]]), np.array([1.0]),
                              scaling, f, g_X, g_U, g_D, d_max, limit,
                              True, 1e-3, tuple(schedule))


@pytest.fixture(scope="module")
def toy():
    return toy_scenario()


@pytest.fixture(scope="module")
def toy_grid():
    return bar.ProbeGrid.build(1, 512)


@pytest.fixture(scope="module")
def toy_estimate(toy, toy_grid):
    # a deliberately small valid certificate (|z| <= 0.2) so that the
    # alternation has room to grow it toward the true region |z| < 0.75
    B0 = Polynomial(("z",), {(2,): 1.0, (0,): -0.04})
    assert bar.pointwise_soundness(toy, B0)["ok"]
    return B0, bar.expand(toy, B0, toy_grid, max_iters=8)


class TestScenario:
    def test_probe_grid_deterministic(self):
        a = bar.ProbeGrid.build(3, 128, seed=7).points
        b = bar.ProbeGrid.build(3, 128, seed=7).points
        assert np.array_equal(a, b)
        assert np.abs(a).max() <= 1.0

    def test_make_scenario_shape_checked(self, sfr, red):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[1])
        bad = type("M", (), {"A": np.eye(2), "E": np.ones(2)})
        with pytest.raises(ValueError):
            bar.make_scenario(bad)
        scen = bar.make_scenario(model)
        assert scen.n == 4 and len(scen.f) == 4
        assert scen.x_vars == bar.STATE_VARS

    def test_nonpositive_disturbance_rejected(self):
        with pytest.raises(ValueError):
            toy_scenario(d_max=0.0)

    def test_content_hash_distinguishes(self, sfr, red):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[2])
        a = bar.make_scenario(model, 2)
        b = bar.make_scenario(model, 2, d_max=0.10)
        assert a.content_hash() != b.content_hash()
        assert a.content_hash() == bar.make_scenario(model, 2).content_hash()

    def test_scaled_field_matches_physical(self, sfr, red, rng):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[3])
        scen = bar.make_scenario(model, 3)
        z = rng.uniform(-1.0, 1.0, size=(50, 4))
        d = rng.uniform(0.0, scen.d_max, size=(50, 1))
        zd = np.hstack([z, d])
        phys = scen.scaling.to_physical(z)
        half = np.asarray(scen.scaling.half_width)
        ref = (phys @ scen.A.T + d * scen.E) / half
        got = np.column_stack([fi.evaluate_many(zd) for fi in scen.f])
        assert np.allclose(got, ref, atol=1e-10)


class TestSeeds:
    def test_origin_comes_first(self, toy, toy_grid):
        seeds = bar.find_safe_seeds(toy, 3, toy_grid)
        assert seeds.shape == (3, 1)
        assert abs(seeds[0, 0]) < 1e-12

    def test_seeds_are_simulation_safe(self, toy, toy_grid):
        seeds = bar.find_safe_seeds(toy, 4, toy_grid)
        phys = toy.scaling.to_physical(seeds)
        peaks = bar.simulate_many(toy, phys, toy.d_max)
        assert peaks.max() < toy.limit - bar.SEED_MARGIN + 1e-9

    def test_no_safe_point_raises(self, toy_grid):
        # the disturbance alone exceeds the limit, so nothing is safe
        hopeless = toy_scenario(limit=0.05)
        with pytest.raises(bar.NoneFoundError):
            bar.find_safe_seeds(hopeless, 1, toy_grid)

    def test_seed_count_validated(self, toy, toy_grid):
        with pytest.raises(ValueError):
            bar.find_safe_seeds(toy, 0, toy_grid)


class TestInitialize:
    def test_radius_validated(self, toy):
        with pytest.raises(ValueError):
            bar.initialize(toy, np.zeros((1, 1)), r=0.0)

    def test_initial_barrier_certifies_seeds(self, toy, toy_grid):
        seeds = bar.find_safe_seeds(toy, 2, toy_grid)
        B0 = bar.initialize(toy, seeds, r=1.0)
        vals = B0.evaluate_many(seeds)
        assert vals.max() <= 1e-6
        snd = bar.pointwise_soundness(toy, B0)
        assert snd["ok"], snd

    def test_hopeless_problem_infeasible(self, toy_grid):
        hopeless = toy_scenario(limit=0.05, schedule=(2, 4))
        with pytest.raises(bar.InfeasibleInitError):
            bar.initialize(hopeless, np.zeros((1, 1)))


class TestExpand:
    def test_growth_monotone(self, toy_estimate):
        _, est = toy_estimate
        g = np.asarray(est.growth_history)
        assert est.iterations >= 1
        assert np.all(np.diff(g) >= -1e-3)
        assert g[-1] > g[0]

    def test_containment_of_previous_set(self, toy_estimate, rng):
        B0, est = toy_estimate
        pts = rng.uniform(-1.0, 1.0, size=(10_000, 1))
        inside0 = B0.evaluate_many(pts) <= 0.0
        assert est.barrier.evaluate_many(pts)[inside0].max() <= 1e-6

    def test_estimate_covers_reference_interval(self, toy_estimate):
        _, est = toy_estimate
        ref = np.array([[-0.5], [0.0], [0.7]])
        assert est.barrier.evaluate_many(ref).max() <= 0.0

    def test_estimate_inside_true_region(self, toy_estimate, rng):
        _, est = toy_estimate
        pts = rng.uniform(-1.0, 1.0, size=(10_000, 1))
        inside = est.barrier.evaluate_many(pts) <= 0.0
        assert np.abs(pts[inside, 0]).max() < est.scenario.limit

    def test_final_iterate_sound(self, toy_estimate):
        _, est = toy_estimate
        snd = bar.pointwise_soundness(est.scenario, est.barrier)
        assert snd["ok"], snd

    def test_literal_containment_variant_runs(self, toy, toy_grid):
        seeds = bar.find_safe_seeds(toy, 1, toy_grid)
        B0 = bar.initialize(toy, seeds, r=1.0)
        est = bar.expand(toy, B0, toy_grid, max_iters=2,
                         literal_containment=True)
        assert isinstance(est, bar.RosEstimate)


class TestValidation:
    def test_no_violations_inside_estimate(self, toy_estimate):
        _, est = toy_estimate
        rep = bar.sample_validate(est, 500, seed=3)
        assert rep.trials == 500
        assert rep.ok and rep.violations == 0
        assert rep.worst_peak < est.scenario.limit

    def test_inflated_estimate_caught(self, toy, toy_estimate):
        _, est = toy_estimate
        # widen the sublevel set past the safety limit; the validator must
        # now see violating trajectories
        bogus = bar.RosEstimate(
            Polynomial(("z",), {(2,): 1.0, (0,): -0.96}), toy, 0, 2, [1.0])
        rep = bar.sample_validate(bogus, 500, seed=3)
        assert rep.violations > 0 and not rep.ok

    def test_empty_sublevel_reported(self, toy):
        empty = bar.RosEstimate(Polynomial.constant(("z",), 1.0),
                                toy, 0, 0, [0.0])
        rep = bar.sample_validate(empty, 100)
        assert rep.no_samples and rep.trials == 0

    def test_trial_count_validated(self, toy_estimate):
        _, est = toy_estimate
        with pytest.raises(ValueError):
            bar.sample_validate(est, 0)


class TestPersistence:
    def test_round_trip(self, toy_estimate, tmp_path):
        _, est = toy_estimate
        path = tmp_path / "guard.json"
        est.save(path)
        back = bar.RosEstimate.load(path, est.scenario)
        assert back.degree == est.degree
        assert back.iterations == est.iterations
        pts = np.linspace(-1, 1, 101)[:, None]
        assert np.allclose(back.barrier.evaluate_many(pts),
                           est.barrier.evaluate_many(pts))

    def test_hash_mismatch_rejected(self, toy_estimate, tmp_path):
        _, est = toy_estimate
        path = tmp_path / "guard.json"
        est.save(path)
        other = toy_scenario(d_max=0.10)
        with pytest.raises(ValueError):
            bar.RosEstimate.load(path, other)


class TestVerifySafety:
    def ball(self, scen, center, rho):
        z = Polynomial.variable(scen.x_vars, scen.x_vars[0])
        g = rho ** 2 - (z - center) * (z - center)
        return SemialgebraicSet([g], scen.x_vars, scen.scaling)

    def test_safe_initial_set_certified(self, toy):
        cert = bar.verify_safety(toy, self.ball(toy, 0.0, 0.1))
        assert cert is not None
        assert cert.barrier.evaluate([0.0]) <= 1e-9
        snd = bar.pointwise_soundness(toy, cert.barrier)
        assert snd["ok"], snd

    def test_unsafe_overlap_unverified(self, toy):
        cert = bar.verify_safety(toy, self.ball(toy, 0.73, 0.05))
        assert cert is None

    def test_initial_set_outside_domain_rejected(self, toy):
        with pytest.raises(ValueError):
            bar.verify_safety(toy, self.ball(toy, 0.99, 0.2))


class TestReducedLoops:
    """The grid-coupled loops at low degree and reduced disturbance range."""

    def scenario(self, sfr, red, mode, d_max):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[mode])
        return bar.make_scenario(model, mode, d_max=d_max,
                                 degree_schedule=(4,))

    def test_origin_not_verifiable_without_support(self, sfr, red):
        # the unsupported loop overshoots the limit from rest under the full
        # disturbance range, so no certificate around the origin can exist
        scen = self.scenario(sfr, red, 1, 0.15)
        ball = SemialgebraicSet(
            [Polynomial(scen.x_vars,
                        {(0, 0, 0, 0): 1e-4, (2, 0, 0, 0): -1.0,
                         (0, 2, 0, 0): -1.0, (0, 0, 2, 0): -1.0,
                         (0, 0, 0, 2): -1.0})],
            scen.x_vars, scen.scaling)
        assert bar.verify_safety(scen, ball) is None

    def test_supported_pipeline_end_to_end(self, sfr, red):
        # with the rate loop active and a reduced step range, the whole
        # pipeline closes at degree four
        scen = self.scenario(sfr, red, 2, 0.05)
        seeds = np.array([scen.scaling.to_scaled(np.zeros(4))])
        B0 = bar.initialize(scen, seeds, r=1.0)
        est = bar.RosEstimate(B0, scen, 0, 4, [0.0])
        rep = bar.sample_validate(est, 200, seed=5)
        assert rep.trials > 0 and rep.ok
        snd = bar.pointwise_soundness(scen, est.barrier)
        assert snd["ok"], snd
