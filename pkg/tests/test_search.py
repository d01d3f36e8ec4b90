import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from worstdep.copulas import PairCopula
from worstdep.margins import Margin
from worstdep.models import Model
from worstdep.search import (MAX_GRID, Problem, SearchError, SearchSpace, estimate_cost, grid_search_min,
                             greedy_search, make_grid, permuted_restarts, tau_curve)
from worstdep.vine import build_vine_from_pairs

NORMAL = Margin("normal", {"mean": 0.0, "std": 1.0})
UNIT = Margin("uniform", {"lower": 0.0, "upper": 1.0})


def neg_sum(d=2):
    return Model({"kind": "builtin", "name": "weighted_sum", "weights": [1.0] * d}, d)


def problem(model, margins, alpha=0.05, n=2000, seed=0, **kw):
    return Problem(model=model, margins=margins, alpha=alpha, n=n, seed=seed, replicates=100, **kw)


# --- grids ---------------------------------------------------------------------

def test_regular_grid_five_levels():
    g = make_grid(SearchSpace(pairs=[(1, 2)]), [(1, 2)], 5)
    np.testing.assert_allclose(g[:, 0], [-1, -0.5, 0, 0.5, 1])


def test_vertex_grid_corners():
    g = make_grid(SearchSpace(pairs=[(1, 2), (1, 3)], strategy="vertices"), [(1, 2), (1, 3)], 1)
    assert sorted(map(tuple, g)) == [(-1, -1), (-1, 1), (1, -1), (1, 1)]


def test_lhs_grid_is_stratified():
    space = SearchSpace(pairs=[(1, 2), (1, 3), (2, 3)], strategy="lhs")
    g = make_grid(space, space.pairs, 100, np.random.default_rng(0))
    assert g.shape == (100, 3)
    for col in g.T:
        assert len(np.unique(col)) == 100
        strata = np.floor((col + 1) / 2 * 100).astype(int)
        assert sorted(strata) == list(range(100))


def test_lhs_grid_is_seeded():
    space = SearchSpace(pairs=[(1, 2), (1, 3)], strategy="lhs")
    a = make_grid(space, space.pairs, 20, np.random.default_rng(5))
    b = make_grid(space, space.pairs, 20, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_regular_grid_respects_bounds_and_overshoots():
    space = SearchSpace(pairs=[(1, 2), (2, 3)], bounds={(1, 2): (0.0, 0.5)})
    g = make_grid(space, space.pairs, 10)
    assert len(g) == 16
    assert g[:, 0].min() == 0.0 and g[:, 0].max() == 0.5
    assert g[:, 1].min() == -1.0 and g[:, 1].max() == 1.0


def test_grid_size_guard():
    pairs = [(1, k) for k in range(2, 10)]
    with pytest.raises(ValueError, match="exceeds"):
        make_grid(SearchSpace(pairs=pairs), pairs, MAX_GRID + 1)


@pytest.mark.parametrize("kw", [dict(strategy="fancy"), dict(grid_size=0), dict(families=[]),
                                dict(bounds={(1, 2): (0.5, 0.5)}), dict(bounds={(1, 2): (-2, 0)}),
                                dict(fixed={(1, 2): PairCopula("gaussian", 0.3)})])
def test_search_space_invariants(kw):
    with pytest.raises(ValueError):
        SearchSpace(pairs=[(1, 2)], **kw)


# --- grid search -----------------------------------------------------------------

def test_independence_only_grid_matches_plain_estimate():
    from worstdep.estimation import empirical_quantile
    from worstdep.vine import apply_margins
    p = problem(neg_sum(), [NORMAL, NORMAL], n=5000)
    space = SearchSpace(pairs=[(1, 2)])
    res = grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), space, grid=[[0.0]])
    y = neg_sum()(apply_margins(p.margins, p.uniforms()))
    assert res.best.quantile == empirical_quantile(y, 0.05)
    assert len(res.records) == 1


def test_grid_minimum_below_every_point():
    p = problem(neg_sum(), [NORMAL, NORMAL])
    space = SearchSpace(pairs=[(1, 2)], grid_size=11, families=["gaussian", "clayton"])
    res = grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), space)
    assert len(res.records) == 22
    assert all(res.best.quantile <= r.quantile for r in res.records)
    assert res.best in res.records


def test_boundary_argmin_for_monotone_sum():
    p = problem(neg_sum(), [NORMAL, NORMAL], n=20_000)
    for fam in ["gaussian", "clayton", "gumbel", "joe"]:
        space = SearchSpace(pairs=[(1, 2)], grid_size=11, families=[fam])
        res = grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), space)
        assert res.best.taus[(1, 2)] in (-1.0, 1.0), fam


def test_grid_search_requires_enough_samples():
    p = problem(neg_sum(), [NORMAL, NORMAL], n=99)
    with pytest.raises(ValueError):
        grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), SearchSpace(pairs=[(1, 2)]))


def test_model_failure_carries_point():
    m = Model({"kind": "expression", "expression": "sqrt(x1)"}, 2)
    p = problem(m, [NORMAL, NORMAL], n=200)
    with pytest.raises(SearchError) as ei:
        grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), SearchSpace(pairs=[(1, 2)]), grid=[[0.5]])
    assert ei.value.taus == {"1-2": 0.5}
    assert len(ei.value.row) == 2 and ei.value.row[0] < 0


def test_fixed_pairs_appear_in_every_record():
    fixed = {(1, 2): PairCopula("clayton", 2.0)}
    p = problem(neg_sum(3), [NORMAL] * 3, n=500)
    space = SearchSpace(pairs=[(2, 3)], grid_size=5, fixed=fixed)
    res = grid_search_min(p, build_vine_from_pairs([(1, 2), (2, 3)], 3), space)
    for r in res.records:
        assert r.copulas[(1, 2)] == fixed[(1, 2)]
    g = greedy_search(p, SearchSpace(pairs=[(1, 3), (2, 3)], schedule=[3], fixed=fixed), k_max=1)
    for r in g.records:
        assert r.copulas[(1, 2)] == fixed[(1, 2)]
        assert r.structure.tree_of((1, 2)) == 1


def test_thread_count_does_not_change_results():
    p1 = problem(neg_sum(3), [NORMAL] * 3, n=1000, threads=1)
    p8 = problem(neg_sum(3), [NORMAL] * 3, n=1000, threads=8)
    space = SearchSpace(pairs=[(1, 2), (1, 3)], grid_size=9, families=["gaussian", "gumbel"])
    s = build_vine_from_pairs(space.pairs, 3)
    a = grid_search_min(p1, s, space)
    b = grid_search_min(p8, s, space)
    assert [(r.quantile, r.ci_lo, r.ci_hi) for r in a.records] == [(r.quantile, r.ci_lo, r.ci_hi) for r in b.records]


def test_events_are_emitted_per_point():
    events = []
    p = problem(neg_sum(), [NORMAL, NORMAL], n=300, on_event=events.append)
    grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), SearchSpace(pairs=[(1, 2)], grid_size=3))
    kinds = [e["event"] for e in events]
    assert kinds == ["point"] * 3 + ["grid-done"]
    assert events[0]["record"]["taus"] == {"1-2": -1.0}


def test_constant_curve_is_flat():
    m = Model({"kind": "expression", "expression": "0*x1 + 4.5"}, 2)
    res = tau_curve(problem(m, [NORMAL, NORMAL], n=300), (1, 2), ["gaussian", "joe"], np.linspace(-1, 1, 5))
    assert {r.quantile for r in res.records} == {4.5}
    assert {(r.ci_lo, r.ci_hi) for r in res.records} == {(4.5, 4.5)}


# --- greedy ----------------------------------------------------------------------

def test_constant_model_stops_at_zero():
    m = Model({"kind": "expression", "expression": "0*x1 + 0*x2 + 0*x3 + 7"}, 3)
    res = greedy_search(problem(m, [UNIT] * 3, n=300), SearchSpace(pairs=[], schedule=[3]))
    assert res.stop_reason == "no-improvement"
    assert res.trace == [] and res.extra["selected"] == []
    assert res.quantile == 7.0


def test_greedy_bivariate_equals_grid_search():
    p = problem(neg_sum(), [NORMAL, NORMAL], n=3000)
    space = SearchSpace(pairs=[(1, 2)], schedule=[25])
    g = greedy_search(p, space)
    grid = grid_search_min(p, build_vine_from_pairs([(1, 2)], 2), SearchSpace(pairs=[(1, 2)], grid_size=25))
    assert g.extra["selected"] == [(1, 2)]
    assert g.quantile == grid.best.quantile
    assert g.best.taus == grid.best.taus
    assert g.stop_reason == "k-max"


def additive(n=20_000, **kw):
    m = Model({"kind": "builtin", "name": "weighted_sum", "weights": [30.0, 0.0, 10.0, 100.0], "sign": 1}, 4)
    c = Margin("uniform", {"lower": -0.5, "upper": 0.5})
    return problem(m, [c] * 4, alpha=0.1, n=n, **kw)


def test_greedy_trace_strictly_decreasing_and_in_records():
    res = greedy_search(additive(), SearchSpace(pairs=[], strategy="vertices"))
    q = [t["quantile"] for t in res.trace]
    assert all(a > b for a, b in zip(q, q[1:]))
    assert q[0] < res.extra["baseline"]
    assert res.extra["selected"][0] == (1, 4)
    assert res.best.quantile == q[-1]
    assert res.best in res.records
    assert res.records[0].iteration == -1


def test_greedy_budget_stop():
    res = greedy_search(additive(n=1000), SearchSpace(pairs=[], strategy="vertices"), budget=1000 + 6 * 2 * 1000)
    assert res.stop_reason == "budget"
    assert res.evaluations <= 1000 + 12 * 1000


def test_greedy_k_max_and_candidates():
    res = greedy_search(additive(n=2000), SearchSpace(pairs=[], strategy="vertices"), k_max=1,
                        candidates=[(2, 4), (1, 4)])
    assert res.stop_reason == "k-max"
    assert res.extra["selected"] == [(1, 4)]
    assert {r.candidate for r in res.records[1:]} == {(1, 4), (2, 4)}


def test_greedy_prune_runs():
    res = greedy_search(additive(n=2000), SearchSpace(pairs=[], strategy="vertices"), prune=True)
    q = [t["quantile"] for t in res.trace]
    assert all(a > b for a, b in zip(q, q[1:]))


def test_greedy_regular_and_lhs_strategies():
    for strategy in ("regular", "lhs"):
        res = greedy_search(additive(n=2000), SearchSpace(pairs=[], strategy=strategy, schedule=[5, 9]), k_max=2)
        assert res.extra["selected"][0] == (1, 4), strategy
        assert len(res.trace) >= 1


# --- permutations ----------------------------------------------------------------

def test_single_restart_equals_plain_grid_search():
    p = problem(neg_sum(3), [NORMAL] * 3, n=800)
    space = SearchSpace(pairs=[(1, 2), (2, 3)], grid_size=9)
    a = permuted_restarts(p, space, 1)
    b = grid_search_min(p, build_vine_from_pairs(space.pairs, 3), space)
    assert [r.quantile for r in a.records] == [r.quantile for r in b.records]
    assert a.extra["permutation"] == [1, 2, 3]


def test_bivariate_restarts_agree():
    p = problem(neg_sum(), [NORMAL, NORMAL], n=2000)
    res = permuted_restarts(p, SearchSpace(pairs=[(1, 2)], grid_size=5), 3)
    by_restart = {}
    for r in res.records:
        by_restart.setdefault(r.restart, []).append(r)
    mins = [min(rs, key=lambda r: r.quantile) for rs in by_restart.values()]
    assert max(m.ci_lo for m in mins) <= min(m.ci_hi for m in mins)


def test_restarts_never_worse_than_one():
    p = additive(n=2000)
    space = SearchSpace(pairs=[(1, 4), (3, 4)], grid_size=9)
    one = permuted_restarts(p, space, 1)
    five = permuted_restarts(p, space, 5)
    assert five.best.quantile <= one.best.quantile
    assert len(five.extra["permutations"]) == 5
    with pytest.raises(ValueError):
        permuted_restarts(p, space, 0)


# --- cost ------------------------------------------------------------------------

def test_cost_examples():
    assert estimate_cost(1, 2, [1], 0, 4) == 12
    assert estimate_cost(2, 2, [1], 0, 4) == 24
    assert estimate_cost(3, 1000, [50], 0, 2) == 3 * 1000 * 50
    assert estimate_cost(1, 2, None, 1, 3) == 25 * 6 + 100 * 4
    with pytest.raises(ValueError):
        estimate_cost(1, 2, [1], 7, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.integers(1, 10**6), st.integers(2, 8), st.data())
def test_cost_is_linear_in_family_count(b, n, d, data):
    K = data.draw(st.integers(0, d * (d - 1) // 2))
    schedule = data.draw(st.lists(st.integers(1, 500), min_size=1, max_size=4))
    one = estimate_cost(1, n, schedule, K, d)
    assert estimate_cost(b, n, schedule, K, d) == b * one
    expected = sum((schedule[k] if k < len(schedule) else schedule[-1]) * (d * (d - 1) - 2 * k)
                   for k in range(K + 1)) * n
    assert 2 * one == expected
