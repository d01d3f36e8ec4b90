"""Regular vine structures, their construction from ranked pairs, and sampling.

Variables are labelled ``1..d``. A tree at level ``l`` stores its edges in
insertion order; for ``l >= 2`` an edge's two nodes are indices into the edge
list of level ``l - 1`` and for ``l = 1`` they are variable labels.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

import numpy as np

from .copulas import PairCopula

EPS = 1e-13


class StructureError(ValueError):
    """Malformed vine structure or failed construction."""


@dataclass(frozen=True)
class Edge:
    """One edge of a vine tree.

    Attributes
    ----------
    tree : int
        Tree level, starting at 1.
    nodes : tuple
        Pair of node identifiers (variable labels at level 1, edge indices of
        the previous level otherwise).
    conditioned : tuple
        Ordered conditioned pair ``(i, j)``.
    conditioning : frozenset
        Conditioning variables.
    """

    tree: int
    nodes: tuple
    conditioned: tuple
    conditioning: frozenset

    @property
    def union(self):
        return frozenset(self.conditioned) | self.conditioning

    @property
    def pair(self):
        return frozenset(self.conditioned)

    def label(self):
        i, j = self.conditioned
        if not self.conditioning:
            return f"{i},{j}"
        return f"{i},{j}|" + ",".join(str(k) for k in sorted(self.conditioning))


def _pair_key(pair):
    return frozenset(pair)


class VineStructure:
    """Sequence of trees ``T_1 .. T_{d-1}``.

    Parameters
    ----------
    d : int
        Number of variables.
    trees : sequence of sequence of Edge
        Edges per tree level. May be shorter than ``d - 1`` for partial
        structures, which are reported as invalid by ``is_valid_rvine``.
    """

    def __init__(self, d, trees, ranked=None):
        self.d = int(d)
        self.trees = tuple(tuple(t) for t in trees)
        self.ranked = tuple(tuple(p) for p in ranked) if ranked is not None else None
        self._by_pair = {e.pair: e for t in self.trees for e in t}
        self._by_union = {}
        for t in self.trees:
            for e in t:
                self._by_union.setdefault(e.union, []).append(e)
        self._matrix = None

    def __repr__(self):
        body = " / ".join(" ".join(e.label() for e in t) for t in self.trees)
        return f"VineStructure(d={self.d}: {body})"

    def __eq__(self, other):
        return isinstance(other, VineStructure) and self.d == other.d and self.trees == other.trees

    def __hash__(self):
        return hash((self.d, self.trees))

    @property
    def edges(self):
        return [e for t in self.trees for e in t]

    def edge_for(self, pair):
        """Edge whose conditioned set is ``pair``."""
        try:
            return self._by_pair[_pair_key(pair)]
        except KeyError:
            raise StructureError(f"no edge with conditioned pair {tuple(pair)}") from None

    def tree_of(self, pair):
        return self.edge_for(pair).tree

    @classmethod
    def from_constraints(cls, d, levels):
        """Build from conditioned/conditioning labels per tree.

        ``levels`` is a list of trees, each a list of ``((i, j), conditioning)``.
        Nodes are inferred from complete unions.
        """
        trees = []
        for l, items in enumerate(levels, start=1):
            tree = []
            for (i, j), cond in items:
                cond = frozenset(cond)
                if l == 1:
                    nodes = (i, j)
                else:
                    prev = trees[-1]
                    ua, ub = frozenset(cond | {i}), frozenset(cond | {j})
                    try:
                        a = next(k for k, e in enumerate(prev) if e.union == ua)
                        b = next(k for k, e in enumerate(prev) if e.union == ub)
                    except StopIteration:
                        raise StructureError(f"edge {i},{j}|{sorted(cond)} has no supporting nodes in tree {l - 1}") from None
                    nodes = (a, b)
                tree.append(Edge(l, nodes, (i, j), cond))
            trees.append(tree)
        return cls(d, trees)

    # ------------------------------------------------------------------
    def matrix(self):
        """Lower-triangular vine array (0 above the diagonal).

        Column ``k`` holds variable ``M[k, k]`` on the diagonal; row ``r > k``
        holds the partner of the level ``d - r`` edge whose conditioning set
        is ``M[r+1:, k]``.
        """
        if self._matrix is not None:
            return self._matrix
        ok, msg = is_valid_rvine(self)
        if not ok:
            raise StructureError(f"cannot encode an invalid vine: {msg}")
        d = self.d
        M = np.zeros((d, d), dtype=int)
        remaining = list(self.edges)
        for k in range(d - 1):
            top = d - 1 - k
            top_edges = [e for e in remaining if e.tree == top]
            x = top_edges[0].conditioned[1]
            M[k, k] = x
            allowed = None
            for level in range(top, 0, -1):
                cand = [e for e in remaining if e.tree == level and x in e.conditioned
                        and (allowed is None or e.union == allowed)]
                if len(cand) != 1:
                    raise StructureError("vine array construction failed")
                e = cand[0]
                remaining.remove(e)
                i, j = e.conditioned
                M[d - level, k] = i if j == x else j
                allowed = e.conditioning | {x}
        left = set(range(1, d + 1)) - set(int(M[k, k]) for k in range(d - 1))
        M[d - 1, d - 1] = left.pop()
        self._matrix = M
        return M

    def sampling_plan(self):
        """Per variable, in sampling order: ``(var, [(edge, partner, conditioning), ...])``.

        The inner list runs from the highest tree down to the first.
        """
        M = self.matrix()
        d = self.d
        plan = []
        for k in range(d - 1, -1, -1):
            x = int(M[k, k])
            steps = []
            for r in range(k + 1, d):
                partner = int(M[r, k])
                cond = frozenset(int(v) for v in M[r + 1:, k])
                e = self.edge_for((x, partner))
                if e.conditioning != cond:
                    raise StructureError("vine array inconsistent with edges")
                steps.append((e, partner, cond))
            plan.append((x, steps))
        return plan

    def to_dict(self, copulas=None):
        edges = []
        for e in self.edges:
            item = {"tree": e.tree, "conditioned": list(e.conditioned),
                    "conditioning": sorted(e.conditioning)}
            c = copulas.get(e) if copulas is not None else None
            c = c or PairCopula("independence")
            item.update(c.to_dict())
            edges.append(item)
        out = {"d": self.d, "edges": edges}
        if is_valid_rvine(self)[0]:
            out["matrix"] = self.matrix().tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        d = data["d"]
        levels = [[] for _ in range(d - 1)]
        for e in data["edges"]:
            levels[e["tree"] - 1].append((tuple(e["conditioned"]), frozenset(e["conditioning"])))
        return cls.from_constraints(d, levels)


# --------------------------------------------------------------------------
# structural queries


def complete_union(structure, edge):
    """Variables reachable through the edge's membership chain."""
    if edge.tree == 1:
        return frozenset(edge.nodes)
    prev = structure.trees[edge.tree - 2]
    a, b = edge.nodes
    return complete_union(structure, prev[a]) | complete_union(structure, prev[b])


def conditioned_and_conditioning(structure, edge):
    """Conditioned pair and conditioning set computed from the node unions."""
    if edge.tree == 1:
        return tuple(edge.nodes), frozenset()
    prev = structure.trees[edge.tree - 2]
    ua = complete_union(structure, prev[edge.nodes[0]])
    ub = complete_union(structure, prev[edge.nodes[1]])
    D = ua & ub
    ca, cb = ua - D, ub - D
    if len(ca) != 1 or len(cb) != 1:
        raise StructureError(f"edge at tree {edge.tree} has non-singleton conditioned parts {sorted(ca)}, {sorted(cb)}")
    return (next(iter(ca)), next(iter(cb))), D


def _is_tree(nodes, edges):
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra == rb:
            return "cycle"
        parent[ra] = rb
    roots = {find(n) for n in nodes}
    return None if len(roots) == 1 else "disconnected"


def is_valid_rvine(structure):
    """Check the regular-vine conditions.

    Returns
    -------
    (bool, str)
        Validity and a description of the first violated condition.
    """
    d = structure.d
    if len(structure.trees) != d - 1:
        return False, f"expected {d - 1} trees, found {len(structure.trees)}"
    variables = list(range(1, d + 1))
    seen = set()
    for l, tree in enumerate(structure.trees, start=1):
        if len(tree) != d - l:
            return False, f"tree {l} has {len(tree)} edges, expected {d - l}"
        nodes = variables if l == 1 else list(range(len(structure.trees[l - 2])))
        for k, e in enumerate(tree):
            if e.tree != l:
                return False, f"edge {k} of tree {l} reports level {e.tree}"
            a, b = e.nodes
            if a not in nodes or b not in nodes or a == b:
                return False, f"tree {l} edge {e.label()} joins unknown nodes {e.nodes}"
        status = _is_tree(nodes, [e.nodes for e in tree])
        if status:
            return False, f"tree {l} is not a spanning tree ({status})"
        if l >= 2:
            prev = structure.trees[l - 2]
            for e in tree:
                shared = set(prev[e.nodes[0]].nodes) & set(prev[e.nodes[1]].nodes)
                if len(shared) != 1:
                    return False, f"proximity condition violated by tree {l} edge {e.label()}"
        for e in tree:
            try:
                pair, D = conditioned_and_conditioning(structure, e)
            except StructureError as exc:
                return False, str(exc)
            if frozenset(pair) != e.pair or D != e.conditioning:
                return False, f"tree {l} edge {e.label()} disagrees with its node unions"
            if e.pair in seen:
                return False, f"conditioned pair {sorted(e.pair)} appears twice"
            seen.add(e.pair)
    if len(seen) != d * (d - 1) // 2:
        return False, "conditioned pairs do not cover every variable pair"
    return True, ""


def find_conditioning_set(pair, prev_nodes, adjacent_only=False):
    """Conditioning set for ``pair`` given the nodes of the tree being filled.

    Iterates ordered node pairs ``(a, b)`` in insertion order and returns
    ``A_a & A_b`` for the first one with ``i`` in ``A_a``, ``j`` in ``A_b``,
    ``j`` not in ``A_a`` and ``i`` not in ``A_b``. Returns an empty set when
    there is none. With ``adjacent_only`` the two nodes must also share a node
    of their own tree.
    """
    m = _match(pair, prev_nodes, adjacent_only)
    return frozenset() if m is None else m[2]


def _match(pair, prev_nodes, adjacent_only, blocked=None):
    i, j = pair
    for ka, a in enumerate(prev_nodes):
        ua = a.union
        if i not in ua or j in ua:
            continue
        for kb, b in enumerate(prev_nodes):
            if kb == ka:
                continue
            ub = b.union
            if j not in ub or i in ub:
                continue
            if adjacent_only and len(set(a.nodes) & set(b.nodes)) != 1:
                continue
            if blocked is not None and blocked(ka, kb):
                continue
            return ka, kb, ua & ub
    return None


# --------------------------------------------------------------------------
# construction


class _Builder:
    """Mutable partial vine filled tree by tree."""

    def __init__(self, d):
        self.d = d
        self.trees = [[] for _ in range(d - 1)]
        self.parents = [dict() for _ in range(d - 1)]
        self.placed = set()

    def copy(self):
        b = _Builder.__new__(_Builder)
        b.d = self.d
        b.trees = [list(t) for t in self.trees]
        b.parents = [dict(p) for p in self.parents]
        b.placed = set(self.placed)
        return b

    @property
    def level(self):
        for l in range(1, self.d):
            if len(self.trees[l - 1]) < self.d - l:
                return l
        return self.d

    @property
    def complete(self):
        return self.level == self.d

    def key(self):
        return frozenset(self.placed)

    def _find(self, l, x):
        par = self.parents[l - 1]
        while par.get(x, x) != x:
            x = par[x]
        return x

    def candidate(self, pair, l):
        """Edge for ``pair`` at level ``l`` or ``None`` when infeasible."""
        i, j = pair
        if l == 1:
            if self._find(1, i) == self._find(1, j):
                return None
            return Edge(1, (i, j), (i, j), frozenset())
        prev = self.trees[l - 2]
        m = _match(pair, prev, True, blocked=lambda a, b: self._find(l, a) == self._find(l, b))
        if m is None:
            return None
        ka, kb, D = m
        return Edge(l, (ka, kb), (i, j), D)

    def add(self, e):
        l = e.tree
        a, b = e.nodes
        ra, rb = self._find(l, a), self._find(l, b)
        self.parents[l - 1][ra] = rb
        self.trees[l - 1].append(e)
        self.placed.add(frozenset(e.conditioned))

    def structure(self, ranked=None):
        return VineStructure(self.d, self.trees, ranked)


def fill_vine(partial, pairs, d, defer=False):
    """Append ``pairs`` in order to a partial vine.

    Each pair goes into the lowest incomplete tree. When that is impossible
    (a cycle in the tree, or no conditioning set) the fill fails, unless
    ``defer`` is set, in which case the pair waits and is retried first as
    soon as the next tree opens.

    Parameters
    ----------
    partial : _Builder or None
        Partial vine; ``None`` starts from scratch.
    pairs : sequence of (int, int)
    d : int
    defer : bool

    Returns
    -------
    (builder, pending) or None
        The filled builder with the pairs still waiting, or ``None`` on failure.
    """
    b = _Builder(d) if partial is None else partial.copy()
    pending = []
    for pair in pairs:
        pair = tuple(pair)
        l = b.level
        if l == d:
            return None
        e = b.candidate(pair, l)
        if e is None:
            if not defer:
                return None
            pending.append(pair)
            continue
        b.add(e)
        if b.level != l:
            pending = _flush(b, pending)
    return b, pending


def _flush(b, pending):
    # retry waiting pairs, in rank order, whenever a new tree opens
    while pending:
        l = b.level
        if l == b.d:
            return pending
        for k, pair in enumerate(pending):
            e = b.candidate(pair, l)
            if e is not None:
                b.add(e)
                pending = pending[:k] + pending[k + 1:]
                break
        else:
            return pending
    return pending


def default_order(pairs, order):
    """Sort pairs as in a D-vine over ``order``: by lag, then by position."""
    pos = {v: k for k, v in enumerate(order)}

    def norm(p):
        i, j = p
        return (i, j) if pos[i] < pos[j] else (j, i)

    pairs = [norm(p) for p in pairs]
    return sorted(pairs, key=lambda p: (pos[p[1]] - pos[p[0]], pos[p[0]]))


class _Budget(Exception):
    pass


def _complete(builder, ranked, rest, cap, forced=True):
    """Depth-first completion of a partial vine.

    ``ranked`` pairs take priority; when ``forced`` a feasible ranked pair must
    be placed before anything else. ``rest`` is tried in the given order.
    """
    failed = set()
    counter = [0]

    def rec(b):
        if b.complete:
            return b
        key = b.key()
        if key in failed:
            return None
        counter[0] += 1
        if counter[0] > cap:
            raise _Budget
        l = b.level
        for pair in ranked:
            if frozenset(pair) in b.placed:
                continue
            e = b.candidate(pair, l)
            if e is None:
                continue
            nb = b.copy()
            nb.add(e)
            out = rec(nb)
            if out is not None:
                return out
            if forced:
                failed.add(key)
                return None
        for pair in rest:
            if frozenset(pair) in b.placed:
                continue
            e = b.candidate(pair, l)
            if e is None:
                continue
            nb = b.copy()
            nb.add(e)
            out = rec(nb)
            if out is not None:
                return out
        failed.add(key)
        return None

    try:
        return rec(builder)
    except _Budget:
        return None


def _by_disturbance(items, limit):
    """Orderings of ``items`` reached by adjacent swaps, fewest swaps first."""
    start = tuple(items)
    seen = {start}
    queue = deque([start])
    count = 0
    while queue and count < limit:
        cur = queue.popleft()
        yield cur
        count += 1
        for k in range(len(cur) - 1):
            nxt = cur[:k] + (cur[k + 1], cur[k]) + cur[k + 2:]
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)


def build_vine_from_pairs(ranked, d, order=None, cap=10_000, max_reorderings=200):
    """Regular vine containing ``ranked`` pairs as early as possible.

    The ranked pairs are placed first, each in the lowest tree that can hold
    it, waiting for a later tree when needed. The remaining pairs are then
    searched depth first in D-vine order over ``order`` (default ``1..d``).
    If no completion exists, the ranked list is reordered by adjacent swaps,
    fewest first, and the whole procedure retried.

    Parameters
    ----------
    ranked : sequence of (int, int)
    d : int
    order : sequence of int, optional
        Variable order defining the default D-vine.

    Returns
    -------
    VineStructure
        ``structure.ranked`` records the ranked order actually used.
    """
    ranked = [tuple(int(v) for v in p) for p in ranked]
    if d < 2:
        raise StructureError("a vine needs at least two variables")
    keys = [frozenset(p) for p in ranked]
    if len(set(keys)) != len(keys):
        raise StructureError("ranked pairs contain duplicates")
    for p in ranked:
        if len(set(p)) != 2 or not all(1 <= v <= d for v in p):
            raise StructureError(f"invalid pair {p} for d={d}")
    order = list(order) if order is not None else list(range(1, d + 1))
    if sorted(order) != list(range(1, d + 1)):
        raise StructureError("order must be a permutation of 1..d")
    allpairs = [p for p in itertools.combinations(range(1, d + 1), 2) if frozenset(p) not in set(keys)]
    rest = default_order(allpairs, order)

    for attempt in _by_disturbance(ranked, max_reorderings):
        filled = fill_vine(None, attempt, d, defer=True)
        if filled is None:
            continue
        b, pending = filled
        done = _complete(b, pending, rest, cap, forced=True)
        if done is not None:
            return done.structure(ranked=attempt)
    done = _complete(_Builder(d), ranked, rest, cap * 100, forced=False)
    if done is None:
        raise StructureError(f"no regular vine found for ranked pairs {ranked}")
    order_used = [p for p in ranked]
    return done.structure(ranked=order_used)


def dvine(order):
    """D-vine along the given variable order."""
    return build_vine_from_pairs([], len(order), order=order)


def cvine(order):
    """C-vine with roots taken in the given order."""
    d = len(order)
    levels = []
    for l in range(1, d):
        root = order[l - 1]
        cond = frozenset(order[:l - 1])
        levels.append([((root, v), cond) for v in order[l:]])
    return VineStructure.from_constraints(d, levels)


# --------------------------------------------------------------------------
# dependence model, sampling and density


class DependenceModel:
    """A vine structure with a copula on every edge.

    Parameters
    ----------
    structure : VineStructure
    copulas : dict
        Maps a pair ``(i, j)`` to the copula of ``(U_i, U_j)`` given the
        edge's conditioning set. Missing pairs are independent.
    """

    def __init__(self, structure, copulas=None):
        self.structure = structure
        self._edge_cop = {}
        for (i, j), c in (copulas or {}).items():
            e = structure.edge_for((i, j))
            self._edge_cop[e] = c if e.conditioned == (i, j) else c.transposed()

    def copula(self, edge):
        return self._edge_cop.get(edge, _INDEP)

    @property
    def copulas(self):
        return dict(self._edge_cop)

    def pair_copula(self, pair):
        """Copula of ``pair`` in the given orientation."""
        e = self.structure.edge_for(pair)
        c = self.copula(e)
        return c if e.conditioned == tuple(pair) else c.transposed()

    @property
    def theta(self):
        return [self._edge_cop[e].theta for e in self.structure.edges
                if e in self._edge_cop and not self._edge_cop[e].is_independence]

    def to_dict(self):
        return self.structure.to_dict(self._edge_cop)


_INDEP = PairCopula("independence")


def _clip(x):
    return np.clip(x, EPS, 1.0 - EPS)


class _Conditionals:
    """Memoized conditional distribution values ``F(v | B)``."""

    def __init__(self, model, u=None):
        self.model = model
        self.cache = {}
        if u is not None:
            for k in range(model.structure.d):
                self.cache[(k + 1, frozenset())] = u[:, k]

    def get(self, var, given):
        key = (var, given)
        if key in self.cache:
            return self.cache[key]
        s = self.model.structure
        target = given | {var}
        edge = next((e for e in s._by_union.get(target, ()) if var in e.conditioned), None)
        if edge is None:
            raise StructureError(f"conditional of {var} given {sorted(given)} is not available in this vine")
        i, j = edge.conditioned
        other = j if var == i else i
        base = given - {other}
        x = self.get(var, base)
        y = self.get(other, base)
        c = self.model.copula(edge)
        out = c.h(x, y) if var == i else c.h_first(x, y)
        out = _clip(out) if not c.is_independence else x
        self.cache[key] = out
        return out


def transform_uniforms(model, w):
    """Map independent uniforms to the vine copula (inverse Rosenblatt).

    Column ``k`` of ``w`` is the innovation of variable ``k + 1``.
    """
    w = np.asarray(w, dtype=float)
    d = model.structure.d
    if w.ndim != 2 or w.shape[1] != d:
        raise ValueError(f"expected an (n, {d}) array of uniforms")
    cond = _Conditionals(model)
    out = np.empty_like(w)
    for var, steps in model.structure.sampling_plan():
        u = w[:, var - 1]
        for e, partner, D in steps:
            c = model.copula(e)
            if c.is_independence:
                cond.cache.setdefault((var, D), u)
                continue
            v = cond.get(partner, D)
            u = c.hinv(u, v) if e.conditioned[0] == var else c.hinv_first(u, v)
            u = _clip(u)
            cond.cache.setdefault((var, D), u)
        cond.cache[(var, frozenset())] = u
        out[:, var - 1] = u
    return out


def sample_vine(model, margins, n, rng):
    """Draw ``n`` input vectors from the vine model with the given margins."""
    w = rng.random((n, model.structure.d))
    return apply_margins(margins, transform_uniforms(model, w))


def apply_margins(margins, u):
    if margins is None:
        return u
    return np.column_stack([m.quantile(u[:, k]) for k, m in enumerate(margins)])


def vine_density(model, margins, x):
    """Joint density of the vine model at ``x`` (shape ``(d,)`` or ``(n, d)``)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = model.structure.d
    if margins is None:
        u = x.copy()
        logf = np.zeros(x.shape[0])
    else:
        u = np.column_stack([m.cdf(x[:, k]) for k, m in enumerate(margins)])
        with np.errstate(divide="ignore"):
            logf = sum(np.log(m.density(x[:, k])) for k, m in enumerate(margins))
    inside = np.all((u > 0) & (u < 1), axis=1)
    cond = _Conditionals(model, _clip(u))
    for e in model.structure.edges:
        c = model.copula(e)
        if c.is_independence:
            continue
        if c.is_degenerate:
            raise StructureError(f"edge {e.label()} carries a {c.family} copula, which has no density")
        i, j = e.conditioned
        logf = logf + np.log(c.pdf(cond.get(i, e.conditioning), cond.get(j, e.conditioning)))
    out = np.where(inside, np.exp(logf), 0.0)
    return out if out.size > 1 else float(out[0])
