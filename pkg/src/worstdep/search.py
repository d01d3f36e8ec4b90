"""Quantile minimization over vine dependence structures.

Two optimizers are provided: an exhaustive search over a grid of Kendall
tau vectors for a fixed vine, and a greedy procedure that adds one
dependent pair per iteration and rebuilds the vine around the selected
pairs. Every grid point within a run reuses the same underlying uniforms
(common random numbers), and each point's bootstrap draws come from a stream
keyed by the point index, so results do not depend on the thread count.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import qmc

from .copulas import PairCopula, tau_to_theta
from .estimation import estimate_quantile
from .models import ModelEvaluationError
from .vine import DependenceModel, apply_margins, build_vine_from_pairs, transform_uniforms

log = logging.getLogger(__name__)

MAX_GRID = 10_000_000
_CRN_STREAM = 0
_BOOT_STREAM = 1
_GRID_STREAM = 2


class SearchError(RuntimeError):
    """Failure during a search; carries the offending point when known."""

    def __init__(self, message, taus=None, row=None):
        super().__init__(message)
        self.taus = taus
        self.row = row


def _norm(pair):
    i, j = int(pair[0]), int(pair[1])
    if i == j:
        raise ValueError(f"pair {pair} repeats a variable")
    return (i, j) if i < j else (j, i)


@dataclass
class SearchSpace:
    """Where to look for the worst dependence.

    Parameters
    ----------
    pairs : list of (int, int)
        Free pairs, in ranking order for the grid search vine.
    bounds : dict, optional
        Per-pair Kendall bounds ``(lo, hi)``; default ``(-1, 1)``.
    strategy : str
        ``regular``, ``lhs`` or ``vertices``.
    grid_size : int
        Grid size for grid search.
    schedule : list of int, optional
        Greedy grid sizes per iteration; default ``25 * (k + 1) ** 2``.
    families : list of str
        Candidate copula families.
    fixed : dict
        Pairs with a known copula, held constant.
    """

    pairs: list
    bounds: dict = field(default_factory=dict)
    strategy: str = "regular"
    grid_size: int = 21
    schedule: list | None = None
    families: list = field(default_factory=lambda: ["gaussian"])
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = [_norm(p) for p in self.pairs]
        self.bounds = {_norm(p): (float(b[0]), float(b[1])) for p, b in self.bounds.items()}
        self.fixed = {_norm(p): c for p, c in self.fixed.items()}
        if self.strategy not in ("regular", "lhs", "vertices"):
            raise ValueError(f"unknown grid strategy {self.strategy!r}")
        if int(self.grid_size) < 1:
            raise ValueError("grid size must be at least 1")
        if not self.families:
            raise ValueError("at least one candidate family is required")
        for p, (lo, hi) in self.bounds.items():
            if not -1.0 <= lo < hi <= 1.0:
                raise ValueError(f"bounds for pair {p} must satisfy -1 <= lo < hi <= 1")
        clash = set(self.pairs) & set(self.fixed)
        if clash:
            raise ValueError(f"pairs {sorted(clash)} are both free and fixed")

    def bounds_for(self, pair):
        return self.bounds.get(_norm(pair), (-1.0, 1.0))

    def grid_size_at(self, k):
        if self.schedule is not None:
            return int(self.schedule[k]) if k < len(self.schedule) else int(self.schedule[-1])
        return 25 * (k + 1) ** 2


@dataclass
class Problem:
    """Model, margins and estimation settings shared by every evaluation."""

    model: object
    margins: list
    alpha: float
    n: int
    seed: int = 0
    replicates: int = 500
    level: float = 0.95
    threads: int = 1
    on_event: object = None

    @property
    def d(self):
        return len(self.margins)

    def uniforms(self):
        rng = np.random.default_rng([self.seed, _CRN_STREAM])
        return rng.random((self.n, self.d))

    def emit(self, event):
        if self.on_event is not None:
            self.on_event(event)


@dataclass
class Record:
    """One evaluated dependence model."""

    index: int
    structure: object
    copulas: dict
    taus: dict
    family: str
    quantile: float
    ci_lo: float
    ci_hi: float
    evaluations: int
    iteration: int | None = None
    candidate: tuple | None = None
    restart: int | None = None

    @property
    def half_width(self):
        return 0.5 * (self.ci_hi - self.ci_lo)

    def model(self):
        return DependenceModel(self.structure, self.copulas)


@dataclass
class RunResult:
    """Records of a search and its selected minimum."""

    records: list
    best: Record
    algorithm: str
    evaluations: int
    trace: list = field(default_factory=list)
    stop_reason: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def quantile(self):
        return self.best.quantile


# --------------------------------------------------------------------------
# grids


def _levels(lo, hi, m):
    if m == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, m)


def _axis_count(N, p):
    m = 1
    while m ** p < N:
        m += 1
    return m


def maximin_lhs(n, p, rng, candidates=100):
    """Best of ``candidates`` random Latin hypercubes by minimum pairwise distance."""
    best, best_d = None, -1.0
    for _ in range(candidates):
        seed = int(rng.integers(2**63 - 1))
        pts = qmc.LatinHypercube(d=p, seed=seed).random(n)
        dist = pdist(pts).min() if n > 1 else 0.0
        if dist > best_d:
            best, best_d = pts, dist
    return best


def make_grid(space, dims, N, rng=None):
    """Kendall tau vectors over ``dims`` (a list of pairs).

    Returns
    -------
    ndarray of shape (m, len(dims))
    """
    dims = [_norm(p) for p in dims]
    if not dims:
        raise ValueError("grid needs at least one dimension")
    N = int(N)
    if N < 1:
        raise ValueError("grid size must be at least 1")
    p = len(dims)
    bounds = [space.bounds_for(q) for q in dims]
    if space.strategy == "vertices":
        if 2 ** p > MAX_GRID:
            raise ValueError(f"vertex grid of 2^{p} points is too large")
        return np.array(list(itertools.product(*[(lo, hi) for lo, hi in bounds])), dtype=float)
    if space.strategy == "regular":
        m = _axis_count(N, p)
        if m ** p > MAX_GRID:
            raise ValueError(f"regular grid of {m}^{p} points exceeds the limit of {MAX_GRID}")
        axes = [_levels(lo, hi, m) for lo, hi in bounds]
        return np.array(list(itertools.product(*axes)), dtype=float)
    rng = np.random.default_rng() if rng is None else rng
    unit = maximin_lhs(N, p, rng)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return lo + unit * (hi - lo)


# --------------------------------------------------------------------------
# evaluation


def _assign(pairs, taus, families, fixed):
    cops = dict(fixed)
    for pair, tau, fam in zip(pairs, taus, families):
        cops[pair] = tau_to_theta(fam, float(tau))
    return cops


def _evaluate(problem, w, structure, cops, index):
    model = DependenceModel(structure, cops)
    u = transform_uniforms(model, w)
    x = apply_margins(problem.margins, u)
    try:
        y = problem.model(x)
    except ModelEvaluationError as exc:
        raise SearchError(f"model evaluation failed: {exc}", row=exc.row) from exc
    rng = np.random.default_rng([problem.seed, _BOOT_STREAM, index])
    return estimate_quantile(y, problem.alpha, problem.level, problem.replicates, rng)


class _Runner:
    """Evaluates batches of points in order, optionally on a thread pool."""

    def __init__(self, problem):
        self.problem = problem
        self.w = problem.uniforms()
        self.records = []
        self.evaluations = 0

    def run(self, jobs):
        """``jobs`` is a list of ``(structure, cops, taus, family, meta)``."""
        start = len(self.records)
        p = self.problem

        def one(k_job):
            k, (structure, cops, taus, family, meta) = k_job
            try:
                return _evaluate(p, self.w, structure, cops, start + k)
            except SearchError as exc:
                exc.taus = {f"{a}-{b}": t for (a, b), t in taus.items()}
                raise SearchError(f"{exc} (taus {exc.taus})", exc.taus, exc.row) from exc

        items = list(enumerate(jobs))
        if p.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=p.threads) as ex:
                results = list(ex.map(one, items))
        else:
            results = [one(it) for it in items]
        out = []
        for (k, (structure, cops, taus, family, meta)), est in zip(items, results):
            self.evaluations += p.n
            rec = Record(index=start + k, structure=structure, copulas=cops, taus=dict(taus), family=family,
                         quantile=est.value, ci_lo=est.ci[0] if est.ci else est.value,
                         ci_hi=est.ci[1] if est.ci else est.value, evaluations=self.evaluations, **meta)
            self.records.append(rec)
            out.append(rec)
            p.emit({"event": "point", "record": record_row(rec)})
        return out


def pair_label(pair):
    return f"{pair[0]}-{pair[1]}"


def record_row(rec):
    """Flat, JSON-friendly view of a record."""
    return {
        "index": rec.index,
        "restart": rec.restart,
        "iteration": rec.iteration,
        "candidate": pair_label(rec.candidate) if rec.candidate else None,
        "family": rec.family,
        "taus": {pair_label(q): rec.taus[q] if q in rec.taus else c.tau for q, c in sorted(rec.copulas.items())},
        "thetas": {pair_label(q): c.theta for q, c in sorted(rec.copulas.items())},
        "quantile": rec.quantile,
        "ci_lo": rec.ci_lo,
        "ci_hi": rec.ci_hi,
        "evaluations": rec.evaluations,
    }


def _tau_key(rec, order):
    return tuple(rec.taus.get(q, 0.0) for q in order)


def _argmin(records, order):
    return min(records, key=lambda r: (r.quantile, _tau_key(r, order)))


def grid_search_min(problem, structure, space, grid=None, families=None, runner=None, meta=None):
    """Minimize the output quantile over a grid of Kendall tau vectors.

    Parameters
    ----------
    problem : Problem
    structure : VineStructure
        Vine holding the free and fixed pairs.
    space : SearchSpace
    grid : ndarray, optional
        Points over ``space.pairs``; built from the space when omitted.
    families : list of str, optional
        Families to scan, one grid each; default ``space.families``.

    Returns
    -------
    RunResult
    """
    runner = runner or _Runner(problem)
    families = families or space.families
    if grid is None:
        grid = make_grid(space, space.pairs, space.grid_size, np.random.default_rng([problem.seed, _GRID_STREAM]))
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("grid is empty")
    if problem.n < 100:
        raise ValueError("at least 100 samples per grid point are required")
    recs = []
    for fam in families:
        jobs = []
        for pt in grid:
            taus = dict(zip(space.pairs, (float(t) for t in pt)))
            cops = _assign(space.pairs, pt, [fam] * len(space.pairs), space.fixed)
            jobs.append((structure, cops, taus, fam, dict(meta or {})))
        recs.extend(runner.run(jobs))
    best = _argmin(recs, space.pairs)
    problem.emit({"event": "grid-done", "best": best.quantile})
    return RunResult(records=runner.records, best=best, algorithm="grid", evaluations=runner.evaluations)


def permuted_restarts(problem, space, restarts, rng=None):
    """Grid search repeated under random relabelings of the variables.

    The first restart keeps the identity labelling. Each labelling changes the
    default D-vine that completes the structure.
    """
    if restarts < 1:
        raise ValueError("at least one restart is required")
    rng = np.random.default_rng([problem.seed, 3]) if rng is None else rng
    d = problem.d
    grid = make_grid(space, space.pairs, space.grid_size, np.random.default_rng([problem.seed, _GRID_STREAM]))
    runner = _Runner(problem)
    ranked = list(space.fixed) + list(space.pairs)
    perms = [list(range(1, d + 1))]
    for _ in range(restarts - 1):
        perms.append([int(v) + 1 for v in rng.permutation(d)])
    best, best_perm = None, None
    for r, perm in enumerate(perms):
        structure = build_vine_from_pairs(ranked, d, order=perm)
        res = grid_search_min(problem, structure, space, grid, runner=runner, meta={"restart": r})
        cur = _argmin([rr for rr in runner.records if rr.restart == r], space.pairs)
        if best is None or cur.quantile < best.quantile:
            best, best_perm = cur, perm
    return RunResult(records=runner.records, best=best, algorithm="permuted-grid", evaluations=runner.evaluations,
                     extra={"permutation": best_perm, "permutations": perms})


# --------------------------------------------------------------------------
# greedy pair selection


def _odd(m):
    return m if m % 2 == 1 else m + 1


def _candidate_grid(space, selected, incumbent, cand, N, k, rng):
    """Grid over the selected pairs and one candidate pair.

    Selected pairs get a local axis of ``ceil(N ** (1 / (k + 1)))`` levels
    around their incumbent tau; the candidate axis gets the rest of the budget.
    """
    dims = list(selected) + [cand]
    if space.strategy == "vertices":
        return make_grid(space, dims, N)
    if k == 0:
        return make_grid(space, [cand], N, rng)
    m = _axis_count(N, k + 1)
    local = _odd(m)
    boxes = []
    for q in selected:
        lo, hi = space.bounds_for(q)
        w = (hi - lo) / m
        c = incumbent[q]
        boxes.append((max(lo, c - w), min(hi, c + w), c))
    if space.strategy == "regular":
        axes = []
        for lo, hi, c in boxes:
            ax = np.unique(np.clip(c + (hi - lo) / 2 * np.linspace(-1, 1, local), lo, hi) if hi > lo else [c])
            ax = np.unique(np.concatenate([ax, [c]]))
            axes.append(ax)
        rest = max(2, math.ceil(N / math.prod(len(a) for a in axes)))
        lo, hi = space.bounds_for(cand)
        axes.append(_levels(lo, hi, rest))
        total = math.prod(len(a) for a in axes)
        if total > MAX_GRID:
            raise ValueError(f"candidate grid of {total} points exceeds the limit of {MAX_GRID}")
        return np.array(list(itertools.product(*axes)), dtype=float)
    unit = maximin_lhs(N, k + 1, rng)
    lo = np.array([b[0] for b in boxes] + [space.bounds_for(cand)[0]])
    hi = np.array([b[1] for b in boxes] + [space.bounds_for(cand)[1]])
    return lo + unit * (hi - lo)


def greedy_search(problem, space, k_max=None, budget=None, prune=False, candidates=None):
    """Iteratively select the pairs whose dependence lowers the quantile most.

    At iteration ``k`` every remaining candidate pair and family is tried: a
    vine is built with the selected pairs ranked first and the candidate
    last, and the quantile is minimized on a ``k + 1`` dimensional grid. The
    best candidate is kept if it lowers the quantile, otherwise the search
    stops.

    Parameters
    ----------
    problem : Problem
    space : SearchSpace
    k_max : int, optional
        Maximum number of selected pairs.
    budget : int, optional
        Maximum number of model evaluations.
    prune : bool
        Drop candidates that trail the incumbent by more than the interval
        half-width in two consecutive iterations.
    candidates : list of pairs, optional
        Pairs eligible for selection; default every non-fixed pair.

    Returns
    -------
    RunResult
        ``trace`` lists the accepted iterations; ``stop_reason`` is one of
        ``no-improvement``, ``k-max``, ``exhausted`` or ``budget``.
    """
    d = problem.d
    fixed = space.fixed
    if candidates is None:
        candidates = space.pairs or [p for p in itertools.combinations(range(1, d + 1), 2) if p not in fixed]
    pool = sorted(_norm(p) for p in candidates)
    p_total = len(pool)
    k_max = p_total if k_max is None else min(int(k_max), p_total)
    runner = _Runner(problem)
    grid_rng = np.random.default_rng([problem.seed, _GRID_STREAM])

    base_struct = build_vine_from_pairs(list(fixed), d)
    base = runner.run([(base_struct, dict(fixed), {}, "independence", {"iteration": -1})])[0]
    incumbent_rec = base
    q_prev = base.quantile
    selected, sel_fam, incumbent = [], [], {}
    trace = []
    strikes = {}
    stop = None
    k = 0
    while True:
        if len(selected) >= k_max:
            stop = "k-max"
            break
        remaining = [c for c in pool if c not in selected and strikes.get(c, 0) < 2]
        if not remaining:
            stop = "exhausted"
            break
        N = space.grid_size_at(k)
        best_per_cand = {}
        over_budget = False
        for cand in remaining:
            ranked = list(fixed) + selected + [cand]
            structure = build_vine_from_pairs(ranked, d)
            grid = _candidate_grid(space, selected, incumbent, cand, N, k, grid_rng)
            dims = selected + [cand]
            for fam in space.families:
                if budget is not None and runner.evaluations + len(grid) * problem.n > budget:
                    over_budget = True
                    break
                jobs = []
                for pt in grid:
                    taus = dict(zip(dims, (float(t) for t in pt)))
                    cops = _assign(dims, pt, sel_fam + [fam], fixed)
                    jobs.append((structure, cops, taus, fam, {"iteration": k, "candidate": cand}))
                recs = runner.run(jobs)
                b = _argmin(recs, dims)
                if cand not in best_per_cand or b.quantile < best_per_cand[cand].quantile:
                    best_per_cand[cand] = b
            if over_budget:
                break
        if best_per_cand:
            win = min(best_per_cand.values(), key=lambda r: (r.quantile, _tau_key(r, selected + [r.candidate]), r.candidate))
            problem.emit({"event": "iteration", "iteration": k, "pair": list(win.candidate),
                          "family": win.family, "quantile": win.quantile})
            if prune:
                for cand, r in best_per_cand.items():
                    if r.quantile > q_prev + r.half_width:
                        strikes[cand] = strikes.get(cand, 0) + 1
                    else:
                        strikes[cand] = 0
            if win.quantile < q_prev:
                selected.append(win.candidate)
                sel_fam.append(win.family)
                incumbent = {q: win.taus[q] for q in selected}
                q_prev = win.quantile
                incumbent_rec = win
                trace.append({"iteration": k, "pair": win.candidate, "family": win.family,
                              "quantile": win.quantile, "ci_lo": win.ci_lo, "ci_hi": win.ci_hi,
                              "taus": dict(incumbent)})
            elif not over_budget:
                stop = "no-improvement"
                break
        if over_budget:
            stop = "budget"
            break
        k += 1
    return RunResult(records=runner.records, best=incumbent_rec, algorithm="greedy", evaluations=runner.evaluations,
                     trace=trace, stop_reason=stop,
                     extra={"selected": selected, "families": sel_fam, "baseline": base.quantile})


# --------------------------------------------------------------------------


def tau_curve(problem, pair, families, taus, fixed=None, structure=None):
    """Quantile estimate along a single pair's Kendall tau for each family."""
    pair = _norm(pair)
    fixed = {_norm(p): c for p, c in (fixed or {}).items()}
    d = problem.d
    structure = structure or build_vine_from_pairs(list(fixed) + [pair], d)
    runner = _Runner(problem)
    space = SearchSpace(pairs=[pair], families=list(families), fixed=fixed)
    grid = np.asarray(taus, dtype=float).reshape(-1, 1)
    return grid_search_min(problem, structure, space, grid, runner=runner)


def estimate_cost(n_families, n, schedule, K, d):
    """Model evaluations of the greedy search through iteration ``K``.

    ``n_families * (n / 2) * sum_k N_k * (d * (d - 1) - 2 * k)``. ``schedule``
    is a sequence of grid sizes or ``None`` for ``25 * (k + 1) ** 2``.
    """
    p = d * (d - 1) // 2
    if not 0 <= K <= p:
        raise ValueError(f"K must lie in [0, {p}]")
    total = Fraction(0)
    for k in range(K + 1):
        if schedule is None:
            Nk = 25 * (k + 1) ** 2
        else:
            Nk = schedule[k] if k < len(schedule) else schedule[-1]
        total += Fraction(Nk) * (d * (d - 1) - 2 * k)
    out = Fraction(n_families) * Fraction(n) / 2 * total
    return int(out) if out.denominator == 1 else out


def fixed_copulas(items):
    """Fixed pairs from ``[{"pair": [i, j], "family": ..., "theta"|"tau": ...}]``."""
    out = {}
    for it in items:
        pair = _norm(it["pair"])
        if "tau" in it:
            out[pair] = tau_to_theta(it["family"], it["tau"], it.get("rotation"))
        else:
            out[pair] = PairCopula(it["family"], it.get("theta"), it.get("rotation", 0))
    return out
