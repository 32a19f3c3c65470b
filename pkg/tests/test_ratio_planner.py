import warnings

import numpy as np
import pytest

from prune3d.errors import DomainError, InfeasiblePlanError, UsageError
from prune3d.flops_report import c3d_profile
from prune3d.network import build_toy_net
from prune3d.ratio_planner import (
    K_GRID,
    ErrorCurve,
    PruningPlan,
    alpha_from_pca,
    beta_from_gflops,
    combine,
    component_count,
    error_curve,
    plan_for_network,
    read_error_curves_csv,
    reconstruction_error,
    solve_plan,
    solve_scale,
    uniform_plan,
    write_error_curves_csv,
)
from prune3d.tensor_core import svd_components


def curve_with_mean(name, mean):
    errs = np.full(len(K_GRID), mean)
    errs[0], errs[-1] = 1.0, 0.0
    return ErrorCurve(name, K_GRID.copy(), errs)


class TestReconstructionError:
    def test_full_rank_kept(self):
        m = np.random.default_rng(0).normal(size=(4, 9))
        assert reconstruction_error(m, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_nothing_kept(self):
        m = np.random.default_rng(0).normal(size=(4, 9))
        assert reconstruction_error(m, 0.0) == 1.0

    def test_identity_half(self):
        assert reconstruction_error(np.eye(2), 0.5) == pytest.approx(0.5)

    def test_zero_matrix(self):
        with pytest.raises(DomainError):
            reconstruction_error(np.zeros((3, 3)), 0.5)

    def test_component_count_rounds_half_up(self):
        assert component_count(0.5, 3, 5) == 2
        assert component_count(0.05, 8, 100) == 0
        assert component_count(0.25, 2, 10) == 1


class TestErrorCurve:
    def test_rank_one(self):
        rng = np.random.default_rng(1)
        w = np.einsum("n,k->nk", rng.normal(size=4), rng.normal(size=54)).reshape(4, 2, 3, 3, 3)
        c = error_curve(w)
        first = np.argmax(K_GRID >= 1 / 4 - 1e-12)
        assert np.all(c.errors[first:] < 1e-12)

    def test_duplicated_filters(self):
        row = np.random.default_rng(2).normal(size=(1, 3, 3, 3, 3))
        c = error_curve(np.repeat(row, 5, axis=0))
        k = 1 / 5
        assert np.all(c.errors[K_GRID >= k - 1e-12] < 1e-12)

    def test_random_layers_monotone_with_endpoints(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n, c = rng.integers(1, 16, size=2)
            w = rng.normal(size=(n, c, 3, 3, 3))
            curve = error_curve(w)
            assert abs(curve.errors[0] - 1.0) < 1e-9 and abs(curve.errors[-1]) < 1e-9
            assert np.all(np.diff(curve.errors) <= 1e-12)

    def test_matches_spectral_energy(self):
        w = np.random.default_rng(4).normal(size=(6, 2, 3, 3, 3))
        s, _ = svd_components(w.reshape(6, -1))
        e = s ** 2
        curve = error_curve(w)
        for k, err in zip(K_GRID, curve.errors):
            m = component_count(k, 6, 54)
            assert err == pytest.approx(1 - e[:m].sum() / e.sum(), abs=1e-9)

    def test_csv_round_trip(self, tmp_path):
        curves = [error_curve(np.random.default_rng(i).normal(size=(4, 2, 3, 3, 3)), f"conv{i}") for i in range(3)]
        write_error_curves_csv(curves, tmp_path / "e.csv")
        back = read_error_curves_csv(tmp_path / "e.csv")
        for a, b in zip(curves, back):
            assert a.layer == b.layer
            np.testing.assert_array_equal(a.errors, b.errors)


class TestProportions:
    def test_alpha_symmetry(self):
        np.testing.assert_allclose(alpha_from_pca([curve_with_mean("a", 0.3), curve_with_mean("b", 0.3)]), [0.5, 0.5])

    def test_alpha_two_layers(self):
        np.testing.assert_allclose(alpha_from_pca([curve_with_mean("a", 0.1), curve_with_mean("b", 0.3)]),
                                   [0.75, 0.25])

    def test_alpha_three_layers(self):
        curves = [curve_with_mean("a", 0.2), curve_with_mean("b", 0.2), curve_with_mean("c", 0.1)]
        np.testing.assert_allclose(alpha_from_pca(curves), [0.25, 0.25, 0.5])

    def test_alpha_floor_warns(self):
        with pytest.warns(UserWarning, match="floored"):
            a = alpha_from_pca([curve_with_mean("a", 0.0), curve_with_mean("b", 0.5)])
        assert np.isfinite(a).all() and a.sum() == pytest.approx(1.0)

    def test_beta(self):
        np.testing.assert_allclose(beta_from_gflops([2.0, 2.0, 2.0]), [1 / 3] * 3)
        np.testing.assert_allclose(beta_from_gflops([3.0, 1.0]), [0.75, 0.25])
        with pytest.raises(UsageError):
            beta_from_gflops([1.0, 0.0])

    def test_beta_c3d_against_mac_table(self):
        # N * C * 27 * positions for each C3D conv layer, computed by hand
        macs = np.array([
            64 * 3 * 27 * 16 * 112 * 112,
            128 * 64 * 27 * 16 * 56 * 56,
            256 * 128 * 27 * 8 * 28 * 28,
            256 * 256 * 27 * 8 * 28 * 28,
            512 * 256 * 27 * 4 * 14 * 14,
            512 * 512 * 27 * 4 * 14 * 14,
            512 * 512 * 27 * 2 * 7 * 7,
            512 * 512 * 27 * 2 * 7 * 7,
        ])
        profile = c3d_profile()
        assert [l.macs for l in profile.layers] == macs.tolist()
        np.testing.assert_allclose(beta_from_gflops(list(profile.gflops().values())), macs / macs.sum(), rtol=1e-12)

    def test_combine(self):
        a, b = np.array([0.6, 0.4]), np.array([0.2, 0.8])
        np.testing.assert_allclose(combine(a, b, 0.0), a)
        np.testing.assert_allclose(combine(a, b, 1.0), b)
        np.testing.assert_allclose(combine(a, b, 0.8), [0.28, 0.72])
        with pytest.raises(UsageError):
            combine(a, b, 1.5)


class TestSolvePlan:
    def test_even_split(self):
        plan = solve_plan(np.array([0.5, 0.5]), np.array([1.0, 1.0]), 0.5)
        assert plan.v == pytest.approx(1.0)
        np.testing.assert_allclose(plan.ratio_array(), [0.5, 0.5])

    def test_clamp_and_resolve(self):
        g = np.array([3.0, 1.0])
        plan = solve_plan(np.array([0.25, 0.75]), g, 0.5)
        np.testing.assert_allclose(plan.ratio_array(), [0.35, 0.95])
        assert np.dot(g, plan.ratio_array()) == pytest.approx(0.5 * g.sum(), rel=1e-12)

    def test_doubling_budget_scales_by_one_and_a_half(self):
        gamma, g = np.array([0.3, 0.3, 0.4]), np.array([2.0, 1.0, 1.5])
        half = solve_plan(gamma, g, 0.5).ratio_array()
        three_quarters = solve_plan(gamma, g, 0.75).ratio_array()
        np.testing.assert_allclose(three_quarters / half, 1.5)

    def test_infeasible(self):
        with pytest.raises(InfeasiblePlanError) as info:
            solve_scale(np.array([0.5, 0.5]), np.array([1.0, 1.0]), 0.97)
        assert info.value.max_achievable_pr == pytest.approx(0.95)

    def test_pr_bounds(self):
        with pytest.raises(UsageError):
            solve_scale(np.array([1.0]), np.array([1.0]), 0.0)

    def test_random_instances_satisfy_budget_identity(self):
        rng = np.random.default_rng(0)
        clamped = 0
        for _ in range(500):
            n = int(rng.integers(2, 10))
            g = rng.uniform(0.01, 10, size=n)
            gamma = rng.dirichlet(np.ones(n) * 0.5)
            pr = rng.uniform(0.05, 0.9)
            try:
                v, ratios = solve_scale(gamma, g, pr)
            except InfeasiblePlanError:
                continue
            clamped += np.any(ratios == 0.95)
            assert np.all(ratios <= 0.95 + 1e-12)
            assert abs(np.dot(g, ratios) - pr * g.sum()) <= 1e-6 * pr * g.sum()
        assert clamped > 0

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        g = rng.uniform(1, 5, size=4)
        gamma = combine(rng.dirichlet(np.ones(4)), beta_from_gflops(g), 0.8)
        a = solve_plan(gamma, g, 0.5)
        b = solve_plan(gamma, g * 1000.0, 0.5)
        np.testing.assert_allclose(a.ratio_array(), b.ratio_array(), rtol=1e-12)
        np.testing.assert_allclose(beta_from_gflops(g), beta_from_gflops(g * 1000.0), rtol=1e-12)


class TestNetworkPlans:
    def test_spr_is_uniform(self):
        plan = uniform_plan(["a", "b", "c"], [1.0, 2.0, 3.0], 0.5)
        np.testing.assert_array_equal(plan.ratio_array(), [0.5, 0.5, 0.5])
        assert plan.planned_fraction() == pytest.approx(0.5, abs=1e-15)

    def test_dpr_and_spr_share_planned_reduction(self):
        net = build_toy_net(seed=0)
        dpr, curves = plan_for_network(net, 0.5, "dpr")
        spr, _ = plan_for_network(net, 0.5, "spr")
        assert dpr.planned_fraction() == pytest.approx(spr.planned_fraction(), rel=1e-9)
        assert len(curves) == 3
        for key in ("alpha", "beta", "gamma"):
            assert sum(getattr(l, key) for l in dpr.layers) == pytest.approx(1.0, abs=1e-9)

    def test_dpr_warnings_are_recorded_not_raised(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            plan_for_network(build_toy_net(seed=0), 0.5, "dpr")

    def test_unknown_mode(self):
        with pytest.raises(UsageError):
            plan_for_network(build_toy_net(seed=0), 0.5, "xyz")

    def test_json_round_trip(self, tmp_path):
        plan, _ = plan_for_network(build_toy_net(seed=0), 0.5, "dpr")
        plan.save(tmp_path / "p.json")
        back = PruningPlan.load(tmp_path / "p.json")
        assert back.to_dict() == plan.to_dict()

    def test_target_counts_round_half_up(self):
        plan = uniform_plan(["a"], [1.0], 0.5)
        assert plan.target_counts({"a": 5}) == {"a": 3}
