import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import patchkit as pk
from patchkit.errors import (
    BudgetExceededError,
    ContractViolationError,
    EmptyCohortError,
    InvalidArgumentError,
)
from patchkit.shapley import T_STAT_SENTINEL

from conftest import (
    CountingPredictor,
    InteractionProbe,
    LogisticRegionProbe,
    RegionMeanProbe,
    volume_with_region_means,
)


class ConstantPredictor:
    supports_concurrency = True

    def __init__(self, p1=0.7):
        self.p1 = p1

    def predict(self, v):
        return np.array([1.0 - self.p1, self.p1])


def three_region_setup():
    dims = (4, 4, 4)
    grid = pk.make_grid(dims, 2)
    regions = [grid.regions[0], grid.regions[1], grid.regions[2]]
    v = volume_with_region_means(dims, regions, [1.0, 1.0, 0.5])
    return v, regions


class TestExactShapley:
    def test_constant_predictor_is_null_everywhere(self):
        v, regions = three_region_setup()
        values = pk.exact_shapley(ConstantPredictor(), v, regions)
        assert np.all(values == 0.0)

    def test_additive_probe_matches_analytic_marginals(self):
        # Analytic oracle: for f = sum w_i * mean_i with zero baseline,
        # S_i = w_i * mean_i.
        v, regions = three_region_setup()
        probe = RegionMeanProbe(regions, [0.2, -0.1, 0.4])
        values = pk.exact_shapley(probe, v, regions)
        assert np.allclose(values, [0.2, -0.1, 0.2], atol=1e-6)

    def test_efficiency_axiom_n8(self):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        regions = list(grid.regions)
        rng = np.random.default_rng(11)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = LogisticRegionProbe(regions, rng.normal(0, 0.5, 8), bias=0.2)
        values = pk.exact_shapley(probe, v, regions)
        full = probe.predict(v)[1]
        empty = probe.predict(pk.perturb_zero(v, regions))[1]
        assert abs(values.sum() - (full - empty)) < 1e-6

    def test_region_cap(self):
        dims = (32, 4, 4)
        regions = [pk.Region((i, 0, 0), (1, 4, 4)) for i in range(21)]
        v = pk.Volume(dims, np.ones(512, dtype=np.float32))
        with pytest.raises(BudgetExceededError):
            pk.exact_shapley(ConstantPredictor(), v, regions)

    def test_contract_violations(self):
        v, regions = three_region_setup()

        class BadSum:
            def predict(self, _):
                return np.array([0.5, 0.6])

        class BadLen:
            def predict(self, _):
                return np.array([1.0])

        class BadFinite:
            def predict(self, _):
                return np.array([np.nan, 1.0 - np.nan])

        for bad in (BadSum(), BadLen(), BadFinite()):
            with pytest.raises(ContractViolationError):
                pk.exact_shapley(bad, v, regions)

    def test_thread_count_does_not_change_bits(self):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(5)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = LogisticRegionProbe(list(grid.regions), rng.normal(0, 0.4, 8))
        a = pk.exact_shapley(probe, v, list(grid.regions), threads=1)
        b = pk.exact_shapley(probe, v, list(grid.regions), threads=4)
        assert np.array_equal(a, b)


class TestAxioms:
    def test_null_player_is_exactly_zero(self):
        v, regions = three_region_setup()
        probe = RegionMeanProbe(regions, [0.3, 0.0, 0.25])
        values = pk.exact_shapley(probe, v, regions)
        assert values[1] == 0.0

    def test_symmetry(self):
        dims = (4, 4, 4)
        grid = pk.make_grid(dims, 2)
        regions = [grid.regions[0], grid.regions[3], grid.regions[5]]
        v = pk.Volume(dims, np.full(64, 0.8, dtype=np.float32))
        probe = LogisticRegionProbe(regions, [0.4, 0.4, -0.2], bias=0.1)
        values = pk.exact_shapley(probe, v, regions)
        assert abs(values[0] - values[1]) < 1e-6

    def test_linearity(self):
        v, regions = three_region_setup()
        f = InteractionProbe(regions, [0.2, -0.1, 0.3], pair=(0, 2), pair_weight=0.4)
        g = LogisticRegionProbe(regions, [0.5, 0.2, -0.3])
        alpha, beta = 0.7, -0.4

        class Combined:
            supports_concurrency = True

            def predict(self, vol):
                h = alpha * f.predict(vol)[1] + beta * g.predict(vol)[1]
                return np.array([1.0 - h, h])

        s_f = pk.exact_shapley(f, v, regions)
        s_g = pk.exact_shapley(g, v, regions)
        s_c = pk.exact_shapley(Combined(), v, regions)
        assert np.allclose(s_c, alpha * s_f + beta * s_g, atol=1e-6)


class TestSiblingShapley:
    def test_empty_context_equals_exact(self):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(2)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = LogisticRegionProbe(list(grid.regions), rng.normal(0, 0.3, 8))
        exact = pk.exact_shapley(probe, v, list(grid.regions))
        sib = pk.sibling_shapley(probe, v, list(grid.regions))
        assert np.array_equal(exact, sib)

    def test_single_sibling_is_plain_marginal(self):
        dims = (4, 4, 4)
        grid = pk.make_grid(dims, 2)
        rng = np.random.default_rng(8)
        v = pk.Volume(dims, rng.random(64, dtype=np.float32))
        probe = LogisticRegionProbe(list(grid.regions), rng.normal(0, 0.5, 8))
        target = grid.regions[3]
        context = [grid.regions[0], grid.regions[6]]
        (value,) = pk.sibling_shapley(probe, v, [target], context=context)
        with_target = probe.predict(pk.perturb_zero(v, context))[1]
        without = probe.predict(pk.perturb_zero(v, [target] + context))[1]
        assert abs(value - (with_target - without)) < 1e-12

    def test_additive_values_are_context_free(self):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(4)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = RegionMeanProbe(list(grid.regions), rng.normal(0, 0.2, 8))
        siblings = [grid.regions[i] for i in (1, 2, 3)]
        no_ctx = pk.sibling_shapley(probe, v, siblings)
        with_ctx = pk.sibling_shapley(probe, v, siblings, context=[grid.regions[6]])
        assert np.allclose(no_ctx, with_ctx, atol=1e-9)

    def test_sibling_count_capped_at_8(self):
        dims = (16, 4, 4)
        regions = [pk.Region((i, 0, 0), (1, 4, 4)) for i in range(9)]
        v = pk.Volume(dims, np.ones(256, dtype=np.float32))
        with pytest.raises(InvalidArgumentError):
            pk.sibling_shapley(ConstantPredictor(), v, regions)


class TestRecursiveAttribution:
    def test_constant_predictor_all_zero_with_full_refinement(self):
        dims = (16, 16, 16)
        v = pk.Volume(dims, np.full(4096, 0.5, dtype=np.float32))
        counting = CountingPredictor(ConstantPredictor())
        amap = pk.recursive_attribution(
            counting, v, leaf_edge=4, tau=1.0, rule="refine_below"
        )
        # All node values are 0 < tau, so everything refines to the leaves.
        assert np.all(amap.values == 0.0)
        assert np.all(amap.refined_mask)
        assert amap.evaluations == counting.calls == 9 * 256

    def test_full_refinement_matches_additive_marginals(self):
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(21)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        weights = rng.normal(0, 0.1, len(grid))
        probe = pk.additive_probe(weights, 0.0, grid)
        amap = pk.recursive_attribution(
            probe, v, leaf_edge=4, tau=-math.inf, rule="refine_at_or_above"
        )
        expected = weights * pk.patch_means(v, grid)
        assert np.allclose(amap.values, expected, atol=1e-5)
        assert amap.evaluations == (1 + 8) * 256
        assert amap.levels == 2

    def test_no_refinement_inherits_coarse_values(self):
        dims = (16, 16, 16)
        rng = np.random.default_rng(3)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        grid = pk.make_grid(dims, 4)
        probe = pk.additive_probe(rng.normal(0, 0.1, len(grid)), 0.0, grid)
        amap = pk.recursive_attribution(
            probe, v, leaf_edge=4, tau=-math.inf, rule="refine_below"
        )
        # refine_below never fires at tau=-inf: only the level-1 game runs.
        assert amap.evaluations == 256
        assert not np.any(amap.refined_mask)
        assert len(np.unique(amap.values)) <= 8
        # Each octant's leaves share one inherited value.
        octant = pk.octree_children(v.bounding_region())[0]
        leaf_ids = [i for i, r in enumerate(grid.regions) if octant.contains(r)]
        assert len(set(amap.values[leaf_ids])) == 1

    def test_rules_refine_opposite_sides_of_tau(self):
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(17)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        probe = pk.additive_probe(rng.normal(0, 0.2, len(grid)), 0.0, grid)
        below = pk.recursive_attribution(probe, v, 4, tau=0.0, rule="refine_below")
        above = pk.recursive_attribution(probe, v, 4, tau=0.0, rule="refine_at_or_above")
        assert below.evaluations + above.evaluations == 256 + (1 + 8) * 256
        assert not np.any(below.refined_mask & above.refined_mask)

    def test_max_depth_limits_refinement(self):
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 4)
        v = pk.Volume(dims, np.full(4096, 0.5, dtype=np.float32))
        amap = pk.recursive_attribution(
            ConstantPredictor(), v, leaf_edge=4, tau=1.0, rule="refine_below", max_depth=1
        )
        assert amap.evaluations == 256
        assert amap.levels == 1

    def test_budget_guard(self):
        dims = (16, 16, 16)
        v = pk.Volume(dims, np.full(4096, 0.5, dtype=np.float32))
        with pytest.raises(BudgetExceededError):
            pk.recursive_attribution(
                ConstantPredictor(), v, leaf_edge=4, tau=1.0, rule="refine_below", budget=1000
            )

    def test_nan_tau_rejected(self):
        v = pk.Volume((8, 8, 8), np.zeros(512, dtype=np.float32))
        with pytest.raises(InvalidArgumentError):
            pk.recursive_attribution(ConstantPredictor(), v, 4, tau=math.nan)

    def test_threads_do_not_change_bits(self):
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(29)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        probe = pk.additive_probe(rng.normal(0, 0.2, len(grid)), 0.1, grid)
        a = pk.recursive_attribution(probe, v, 4, tau=0.0, rule="refine_below", threads=1)
        b = pk.recursive_attribution(probe, v, 4, tau=0.0, rule="refine_below", threads=4)
        assert np.array_equal(a.values, b.values)
        assert a.evaluations == b.evaluations

    def test_level1_only_grid_equals_exact_shapley(self):
        # When the octree halves coincide with the leaf grid, the recursive
        # estimator reduces to one exact game over the leaves.
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 8)  # 8 leaves == the level-1 octants
        rng = np.random.default_rng(41)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        probe = LogisticRegionProbe(list(grid.regions), rng.normal(0, 0.5, 8), bias=-0.1)
        amap = pk.recursive_attribution(probe, v, leaf_edge=8, tau=1.0)
        exact = pk.exact_shapley(probe, v, list(grid.regions))
        assert np.array_equal(amap.values, exact)
        assert amap.evaluations == 256
        assert np.all(amap.refined_mask)

    def test_full_refinement_reproduces_sibling_exact_leaf_values(self):
        # Holds for any predictor, not just additive ones: each leaf value is
        # the exact Shapley value of its sibling game.
        dims = (16, 16, 16)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(31)
        v = pk.Volume(dims, rng.random(4096, dtype=np.float32))
        probe = LogisticRegionProbe(list(grid.regions)[:8], rng.normal(0, 0.6, 8), bias=0.2)
        amap = pk.recursive_attribution(
            probe, v, leaf_edge=4, tau=math.inf, rule="refine_below"
        )
        parent = pk.octree_children(v.bounding_region())[3]
        children = pk.octree_children(parent)
        direct = pk.sibling_shapley(probe, v, children)
        for child, expected in zip(children, direct):
            leaf_ids = [i for i, r in enumerate(grid.regions) if r == child]
            assert len(leaf_ids) == 1
            assert amap.values[leaf_ids[0]] == expected

    def test_infinite_tau_survives_json_round_trip(self, tmp_path):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(37)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = pk.additive_probe(rng.normal(0, 0.2, len(grid)), 0.0, grid)
        amap = pk.recursive_attribution(probe, v, 4, tau=-math.inf, rule="refine_at_or_above")
        amap.save(tmp_path / "inf.json")
        back = pk.AttributionMap.load(tmp_path / "inf.json")
        assert back.tau == -math.inf
        assert np.array_equal(back.values, amap.values)

    def test_json_round_trip(self, tmp_path):
        dims = (8, 8, 8)
        grid = pk.make_grid(dims, 4)
        rng = np.random.default_rng(1)
        v = pk.Volume(dims, rng.random(512, dtype=np.float32))
        probe = pk.additive_probe(rng.normal(0, 0.2, len(grid)), 0.0, grid)
        amap = pk.recursive_attribution(probe, v, 4, tau=0.0)
        path = tmp_path / "map.json"
        amap.save(path)
        back = pk.AttributionMap.load(path)
        assert np.array_equal(back.values, amap.values)
        assert np.array_equal(back.refined_mask, amap.refined_mask)
        assert back.evaluations == amap.evaluations
        assert back.tau == amap.tau and back.rule == amap.rule


class TestCohortAverage:
    def _map(self, values, grid, evals=10):
        return pk.AttributionMap(
            grid=grid,
            values=np.asarray(values, dtype=np.float64),
            evaluations=evals,
            refined_mask=np.ones(len(grid), dtype=bool),
            tau=0.0,
            rule="refine_below",
        )

    def test_single_map_identity(self):
        grid = pk.make_grid((4, 4, 4), 2)
        m = self._map(np.arange(8), grid)
        avg = pk.cohort_average([m])
        assert np.array_equal(avg.values, m.values)
        assert avg.evaluations == 10

    def test_opposite_maps_cancel(self):
        grid = pk.make_grid((4, 4, 4), 2)
        x = np.linspace(-1, 1, 8)
        avg = pk.cohort_average([self._map(x, grid), self._map(-x, grid)])
        assert np.all(avg.values == 0.0)
        assert avg.evaluations == 20

    def test_mask_filters_and_empty_raises(self):
        grid = pk.make_grid((4, 4, 4), 2)
        maps = [self._map(np.full(8, 1.0), grid), self._map(np.full(8, 3.0), grid)]
        avg = pk.cohort_average(maps, include=[False, True])
        assert np.all(avg.values == 3.0)
        with pytest.raises(EmptyCohortError):
            pk.cohort_average(maps, include=[False, False])

    def test_grid_mismatch_rejected(self):
        a = self._map(np.zeros(8), pk.make_grid((4, 4, 4), 2))
        b = self._map(np.zeros(8), pk.make_grid((8, 8, 8), 4))
        with pytest.raises(InvalidArgumentError):
            pk.cohort_average([a, b])


class TestSelectTop:
    def _map(self, values):
        grid = pk.make_grid((8, 8, 2), 2)  # 16 leaves
        return pk.AttributionMap(
            grid=grid,
            values=np.asarray(values, dtype=np.float64),
            evaluations=0,
            refined_mask=np.zeros(len(grid), dtype=bool),
            tau=0.0,
            rule="refine_below",
        )

    def test_increasing_values_select_last_indices(self):
        sel = pk.select_top(self._map(np.arange(16)), 4)
        assert sel.chosen == [15, 14, 13, 12]

    def test_ties_break_by_ascending_index(self):
        sel = pk.select_top(self._map(np.ones(16)), 16)
        assert sel.chosen == list(range(16))

    def test_magnitude_vs_raw_key(self):
        values = np.zeros(16)
        values[3] = -5.0
        values[7] = 2.0
        by_mag = pk.select_top(self._map(values), 1)
        by_raw = pk.select_top(self._map(values), 1, key="value")
        assert by_mag.chosen == [3]
        assert by_raw.chosen == [7]

    def test_non_square_m_rejected(self):
        with pytest.raises(InvalidArgumentError, match="perfect square"):
            pk.select_top(self._map(np.arange(16)), 5)

    def test_m_larger_than_leaves_rejected(self):
        with pytest.raises(InvalidArgumentError):
            pk.select_top(self._map(np.arange(16)), 25)

    @settings(max_examples=40, deadline=None)
    @given(perm=st.permutations(list(range(16))))
    def test_permutation_equivariance(self, perm):
        values = np.array([5.0, 4.0, 3.0, 2.0] + [0.0] * 12)
        base = pk.select_top(self._map(values), 4)
        # Leaf perm[i] of the permuted map holds old leaf i's value.
        permuted_values = np.empty_like(values)
        permuted_values[list(perm)] = values
        permuted = pk.select_top(self._map(permuted_values), 4)
        assert set(permuted.chosen) == {perm[i] for i in base.chosen}


class TestTTestSelect:
    def test_noise_free_phantom_selects_lesion_patches(self, tmp_path):
        spec = pk.PhantomSpec(
            dims=(16, 16, 16), n_per_class=4,
            lesion_regions=(pk.Region((4, 4, 4), (6, 6, 6)),),
            lesion_delta=0.4, noise_sigma=0.0, smooth_radius=0, seed=5,
        )
        manifest = pk.generate(spec, tmp_path)
        grid = pk.make_grid(spec.dims, 4)
        lesion = set(grid.indices_intersecting(spec.lesion_regions[0]))
        sel = pk.ttest_select(manifest, grid, 4)
        assert set(sel.chosen) <= lesion
        assert sel.method == "ttest"

    def test_zero_variance_nonzero_diff_saturates(self, small_phantom, tmp_path):
        # Two samples per class with constant patch means {1,1} vs {0.5,0.5}:
        # pooled variance is 0 and the statistic saturates at the sentinel.
        dims = (4, 4, 4)
        grid = pk.make_grid(dims, 4)
        paths = []
        for i, value in enumerate([1.0, 1.0, 0.5, 0.5]):
            v = pk.Volume(dims, np.full(64, value, dtype=np.float32))
            p = tmp_path / f"v{i}.vol"
            pk.write_vol(p, v)
            paths.append(p.name)
        spec = pk.PhantomSpec(
            dims=dims, n_per_class=2, lesion_regions=(pk.Region((0, 0, 0), (4, 4, 4)),),
            lesion_delta=0.5, noise_sigma=0.0, smooth_radius=0, seed=1,
        )
        manifest = pk.DatasetManifest(
            spec=spec, ground_truth=spec.lesion_regions,
            entries=[(paths[0], 0), (paths[1], 0), (paths[2], 1), (paths[3], 1)],
            root=tmp_path,
        )
        sel = pk.ttest_select(manifest, grid, 1)
        assert sel.scores[0] == T_STAT_SENTINEL

    def test_zero_variance_zero_diff_is_uninformative(self, tmp_path):
        dims = (4, 4, 4)
        grid = pk.make_grid(dims, 4)
        for i in range(4):
            pk.write_vol(tmp_path / f"v{i}.vol", pk.Volume(dims, np.full(64, 0.5, np.float32)))
        spec = pk.PhantomSpec(
            dims=dims, n_per_class=2, lesion_regions=(pk.Region((0, 0, 0), (4, 4, 4)),),
            lesion_delta=0.5, noise_sigma=0.0, smooth_radius=0, seed=1,
        )
        manifest = pk.DatasetManifest(
            spec=spec, ground_truth=spec.lesion_regions,
            entries=[(f"v{i}.vol", i // 2) for i in range(4)], root=tmp_path,
        )
        sel = pk.ttest_select(manifest, grid, 1)
        assert sel.scores[0] == 0.0

    def test_identical_distributions_give_small_statistics(self, tmp_path):
        spec = pk.PhantomSpec(
            dims=(16, 16, 16), n_per_class=100,
            lesion_regions=(pk.Region((4, 4, 4), (6, 6, 6)),),
            lesion_delta=0.4, noise_sigma=0.05, smooth_radius=0, seed=31,
        )
        manifest = pk.generate(spec, tmp_path)
        rng = np.random.default_rng(13)
        shuffled = pk.DatasetManifest(
            spec=spec, ground_truth=manifest.ground_truth,
            entries=[
                (path, int(lab))
                for (path, _), lab in zip(manifest.entries, rng.permutation(manifest.labels()))
            ],
            root=manifest.root,
        )
        grid = pk.make_grid(spec.dims, 4)  # 64 patches, a perfect square
        sel = pk.ttest_select(shuffled, grid, len(grid))
        assert float(np.median(sel.scores)) < 2.0

    def test_requires_two_samples_per_class(self, tmp_path):
        spec = pk.PhantomSpec(
            dims=(8, 8, 8), n_per_class=1,
            lesion_regions=(pk.Region((2, 2, 2), (4, 4, 4)),),
            lesion_delta=0.4, noise_sigma=0.0, smooth_radius=0, seed=2,
        )
        manifest = pk.generate(spec, tmp_path)
        with pytest.raises(InvalidArgumentError):
            pk.ttest_select(manifest, pk.make_grid((8, 8, 8), 4), 1)

    def test_non_square_m_rejected(self, small_phantom):
        grid = pk.make_grid(small_phantom.spec.dims, 4)
        with pytest.raises(InvalidArgumentError, match="perfect square"):
            pk.ttest_select(small_phantom, grid, 5)


class TestSelectionResult:
    def test_square_and_unique_invariants(self):
        with pytest.raises(InvalidArgumentError):
            pk.SelectionResult(chosen=[0, 1, 2], method="shap", scores=np.zeros(3))
        with pytest.raises(InvalidArgumentError):
            pk.SelectionResult(chosen=[0, 0, 1, 2], method="shap", scores=np.zeros(4))

    def test_round_trip(self, tmp_path):
        sel = pk.SelectionResult(chosen=[3, 1, 0, 2], method="shap", scores=np.arange(4.0))
        sel.save(tmp_path / "sel.json")
        back = pk.SelectionResult.load(tmp_path / "sel.json")
        assert back.chosen == sel.chosen
        assert back.method == sel.method
        assert np.array_equal(back.scores, sel.scores)
