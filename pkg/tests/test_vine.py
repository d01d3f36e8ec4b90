import itertools
import math
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import kendalltau, multivariate_normal, norm

from worstdep.copulas import PairCopula, tau_to_theta
from worstdep.margins import Margin
from worstdep.vine import (DependenceModel, Edge, StructureError, VineStructure, build_vine_from_pairs,
                           complete_union, conditioned_and_conditioning, cvine, dvine, fill_vine,
                           find_conditioning_set, is_valid_rvine, sample_vine, transform_uniforms,
                           vine_density)


def five_dim_rvine():
    """The five-variable R-vine with c13 c24 c34 c35 / c14|3 c23|4 c45|3 / c15|34 c25|34 / c12|345."""
    return VineStructure.from_constraints(5, [
        [((1, 3), ()), ((2, 4), ()), ((3, 4), ()), ((3, 5), ())],
        [((1, 4), {3}), ((2, 3), {4}), ((4, 5), {3})],
        [((1, 5), {3, 4}), ((2, 5), {3, 4})],
        [((1, 2), {3, 4, 5})],
    ])


def labels(s):
    return [[e.label() for e in t] for t in s.trees]


def conditioned_pairs(s):
    return {frozenset(e.conditioned) for e in s.edges}


# --- structure queries ---------------------------------------------------------

def test_five_dim_rvine_is_valid():
    assert is_valid_rvine(five_dim_rvine()) == (True, "")


def test_complete_union():
    s = five_dim_rvine()
    assert complete_union(s, s.edge_for((2, 4))) == {2, 4}
    assert complete_union(s, s.edge_for((4, 5))) == {3, 4, 5}
    assert complete_union(s, s.edge_for((1, 5))) == {1, 3, 4, 5}


def test_conditioned_and_conditioning():
    s = five_dim_rvine()
    assert conditioned_and_conditioning(s, s.edge_for((2, 4))) == ((2, 4), frozenset())
    pair, D = conditioned_and_conditioning(s, s.edge_for((4, 5)))
    assert set(pair) == {4, 5} and D == {3}
    d5 = dvine([1, 2, 3, 4, 5])
    pair, D = conditioned_and_conditioning(d5, d5.trees[-1][0])
    assert set(pair) == {1, 5} and D == {2, 3, 4}


def test_non_singleton_conditioned_parts_raise():
    trees = [
        [Edge(1, (1, 2), (1, 2), frozenset()), Edge(1, (3, 4), (3, 4), frozenset()),
         Edge(1, (2, 3), (2, 3), frozenset())],
        [Edge(2, (0, 1), (1, 4), frozenset())],
    ]
    s = VineStructure(4, trees)
    with pytest.raises(StructureError):
        conditioned_and_conditioning(s, s.trees[1][0])
    ok, msg = is_valid_rvine(s)
    assert not ok


def test_dvine_and_cvine_valid():
    assert is_valid_rvine(dvine([1, 2, 3, 4, 5]))[0]
    assert is_valid_rvine(cvine([1, 2, 3, 4, 5]))[0]
    assert labels(dvine([1, 2, 3, 4])) == [["1,2", "2,3", "3,4"], ["1,3|2", "2,4|3"], ["1,4|2,3"]]
    assert labels(cvine([1, 2, 3, 4]))[0] == ["1,2", "1,3", "1,4"]


def test_disconnected_first_tree_invalid():
    t1 = [Edge(1, p, p, frozenset()) for p in [(1, 2), (1, 3), (2, 3), (4, 5)]]
    ok, msg = is_valid_rvine(VineStructure(5, [t1, [], [], []]))
    assert not ok
    ok, msg = is_valid_rvine(VineStructure(5, [t1]))
    assert not ok and "trees" in msg


def test_find_conditioning_set():
    s = five_dim_rvine()
    t1, t2, t3 = s.trees[0], s.trees[1], s.trees[2]
    assert find_conditioning_set((4, 5), [Edge(1, (a, a), (a, a), frozenset()) for a in range(1, 6)]) == set()
    assert find_conditioning_set((1, 5), t2) == {3, 4}
    assert find_conditioning_set((1, 2), t3) == {3, 4, 5}
    assert find_conditioning_set((1, 2), t1) == set()


# --- construction ------------------------------------------------------------

def test_fill_path_gives_dvine_base():
    b, pending = fill_vine(None, [(1, 2), (2, 3), (3, 4), (4, 5)], 5)
    assert not pending
    assert [e.conditioned for e in b.trees[0]] == [(1, 2), (2, 3), (3, 4), (4, 5)]


def test_fill_fails_on_cycle_in_first_tree():
    assert fill_vine(None, [(1, 2), (1, 3), (2, 3), (4, 5), (2, 4), (1, 5)], 5) is None


def test_candidate_goes_to_next_tree_when_first_is_full():
    s = build_vine_from_pairs([(1, 4), (3, 4), (1, 3)], 4)
    e = s.edge_for((1, 3))
    assert e.tree == 2 and e.conditioning == {4}
    assert s.tree_of((1, 4)) == 1 and s.tree_of((3, 4)) == 1


def test_cyclic_prefix_is_deferred_to_the_next_tree():
    # (2, 3) would close a cycle in the first tree, so it waits for the second
    ranked = [(1, 2), (1, 3), (2, 3), (4, 5), (2, 4), (1, 5)]
    s = build_vine_from_pairs(ranked, 5)
    assert is_valid_rvine(s)[0]
    assert s.ranked == tuple(ranked)
    assert labels(s) == [["1,2", "1,3", "4,5", "2,4"], ["2,3|1", "1,4|2", "2,5|4"], ["1,5|2,4", "3,4|1,2"],
                         ["3,5|1,2,4"]]
    for p in ranked:
        assert frozenset(p) in conditioned_pairs(s)


def test_empty_list_gives_default_dvine():
    assert build_vine_from_pairs([], 4) == dvine([1, 2, 3, 4])


def test_single_pair_in_first_tree():
    s = build_vine_from_pairs([(1, 4)], 4)
    assert is_valid_rvine(s)[0] and s.tree_of((1, 4)) == 1


@pytest.mark.parametrize("bad", [[(1, 1)], [(1, 6)], [(1, 2), (2, 1)]])
def test_invalid_ranked_lists(bad):
    with pytest.raises(StructureError):
        build_vine_from_pairs(bad, 5)


def test_random_ranked_lists_always_valid():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for _ in range(1000):
        d = int(rng.integers(3, 8))
        allp = list(itertools.combinations(range(1, d + 1), 2))
        k = int(rng.integers(0, len(allp) + 1))
        ranked = [allp[i] for i in rng.permutation(len(allp))[:k]]
        ranked = [p if rng.random() < 0.5 else p[::-1] for p in ranked]
        s = build_vine_from_pairs(ranked, d)
        ok, msg = is_valid_rvine(s)
        assert ok, (ranked, msg)
        got = conditioned_pairs(s)
        assert len(got) == len(allp)
        assert all(frozenset(p) in got for p in ranked)
    assert time.perf_counter() - t0 < 60


def test_matrix_and_dict_round_trip():
    for s in (five_dim_rvine(), dvine([2, 4, 1, 3]), cvine([3, 1, 2, 4, 5])):
        M = s.matrix()
        d = s.d
        assert sorted(np.diag(M)) == list(range(1, d + 1))
        assert np.all(np.triu(M, 1) == 0)
        again = VineStructure.from_dict(s.to_dict())
        assert conditioned_pairs(again) == conditioned_pairs(s)
        assert {(e.pair, e.conditioning) for e in again.edges} == {(e.pair, e.conditioning) for e in s.edges}


# --- sampling and density ----------------------------------------------------

def test_independent_vine_sample():
    s = dvine([1, 2, 3, 4])
    x = sample_vine(DependenceModel(s), None, 100_000, np.random.default_rng(1))
    for i, j in itertools.combinations(range(4), 2):
        assert abs(kendalltau(x[:, i], x[:, j]).statistic) < 0.02


def test_two_dim_vine_matches_pair_sampler():
    c = PairCopula("gaussian", 0.5)
    m = [Margin("normal", {"mean": 1.0, "std": 2.0}), Margin("uniform", {"lower": 0.0, "upper": 3.0})]
    model = DependenceModel(build_vine_from_pairs([(1, 2)], 2), {(1, 2): c})
    a = sample_vine(model, m, 1000, np.random.default_rng(5))
    u = c.sample(1000, np.random.default_rng(5))
    b = np.column_stack([m[0].quantile(u[:, 0]), m[1].quantile(u[:, 1])])
    assert np.array_equal(a, b)


def _gauss3(t12, t23, t13_2):
    # partial correlation vine -> correlation matrix
    r12, r23, p13 = (math.sin(math.pi * t / 2) for t in (t12, t23, t13_2))
    r13 = p13 * math.sqrt((1 - r12 ** 2) * (1 - r23 ** 2)) + r12 * r23
    R = np.array([[1, r12, r13], [r12, 1, r23], [r13, r23, 1]])
    model = DependenceModel(dvine([1, 2, 3]), {(1, 2): tau_to_theta("gaussian", t12),
                                              (2, 3): tau_to_theta("gaussian", t23),
                                              (1, 3): tau_to_theta("gaussian", t13_2)})
    return model, R


def test_three_dim_gaussian_vine_cdf_matches_normal_oracle():
    model, R = _gauss3(0.5, -0.3, 0.4)
    n = 100_000
    u = transform_uniforms(model, np.random.default_rng(11).random((n, 3)))
    probes = list(itertools.product((0.3, 0.7), repeat=3))
    for p in probes:
        emp = np.mean(np.all(u <= p, axis=1))
        ref = multivariate_normal(mean=np.zeros(3), cov=R).cdf(norm.ppf(p))
        se = math.sqrt(ref * (1 - ref) / n)
        assert abs(emp - ref) < 3 * se, (p, emp, ref)


def test_three_dim_gaussian_vine_density_matches_normal_oracle():
    model, R = _gauss3(0.5, -0.3, 0.4)
    m = [Margin("normal", {"mean": 0.0, "std": 1.0})] * 3
    x = np.random.default_rng(2).normal(size=(50, 3))
    ref = multivariate_normal(mean=np.zeros(3), cov=R).pdf(x)
    np.testing.assert_allclose(vine_density(model, m, x), ref, rtol=1e-6, atol=1e-12)


def test_independent_vine_density_is_one():
    m = [Margin("uniform", {"lower": 0.0, "upper": 1.0})] * 4
    x = np.random.default_rng(0).random((20, 4))
    np.testing.assert_allclose(vine_density(DependenceModel(dvine([1, 2, 3, 4])), m, x), 1.0)


def test_two_dim_vine_density_integrates_to_one():
    model = DependenceModel(build_vine_from_pairs([(1, 2)], 2), {(1, 2): PairCopula("clayton", 2.0)})
    m = [Margin("uniform", {"lower": 0.0, "upper": 1.0})] * 2
    f = lambda v, u: float(vine_density(model, m, [u, v]))
    val, _ = integrate.dblquad(f, 0, 1, 0, 1, epsabs=1e-7)
    assert val == pytest.approx(1.0, abs=1e-4)


def test_density_rejects_bound_copulas():
    model = DependenceModel(build_vine_from_pairs([(1, 2)], 2), {(1, 2): PairCopula("comonotone")})
    with pytest.raises(Exception):
        vine_density(model, None, [[0.3, 0.4]])


def test_margins_uniform_before_mapping():
    model = DependenceModel(five_dim_rvine(), {(1, 3): tau_to_theta("clayton", 0.6),
                                              (4, 5): tau_to_theta("gumbel", -0.4),
                                              (1, 2): tau_to_theta("joe", 0.5),
                                              (2, 4): PairCopula("comonotone")})
    n = 100_000
    u = transform_uniforms(model, np.random.default_rng(8).random((n, 5)))
    for k in range(5):
        x = np.sort(u[:, k])
        ks = np.max(np.abs(np.arange(1, n + 1) / n - x))
        assert ks < 1.63 / math.sqrt(n)


@pytest.mark.parametrize("family,tau", [("clayton", 0.6), ("gumbel", -0.5), ("joe", 0.3), ("gaussian", -0.7)])
def test_first_tree_edge_tau_recovery(family, tau):
    s = build_vine_from_pairs([(2, 4)], 4)
    model = DependenceModel(s, {(2, 4): tau_to_theta(family, tau)})
    u = transform_uniforms(model, np.random.default_rng(3).random((100_000, 4)))
    assert kendalltau(u[:, 1], u[:, 3]).statistic == pytest.approx(tau, abs=0.02)


def test_model_orientation_is_transposed_when_needed():
    s = build_vine_from_pairs([(1, 2)], 2)
    c = PairCopula("clayton", 3.0, 90)
    m1 = DependenceModel(s, {(1, 2): c})
    m2 = DependenceModel(s, {(2, 1): c.transposed()})
    w = np.random.default_rng(0).random((100, 2))
    np.testing.assert_array_equal(transform_uniforms(m1, w), transform_uniforms(m2, w))
