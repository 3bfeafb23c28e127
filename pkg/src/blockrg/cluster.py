"""Cluster expansion engine for ultralocal product measures.

Pipeline: group exponentiated local terms into Mayer amplitudes indexed by
connected cube unions, integrate site-by-site (the measure factorizes), and
resum the resulting hard-core polymer gas into connected amplitudes via the
alternating connected-graph sum rho_T.  Everything is finite and exact up to
a reported series truncation; a brute-force log-partition oracle with
inclusion-exclusion recovery is included so the expansion can be checked
end to end on micro instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product as iproduct

import numpy as np

from blockrg._kernels import tensor_partition
from blockrg.polymer import CubeTorus, Polymer, tree_distance

SERIES_NODE_CAP = 5_000_000
RHO_T_PUBLIC_CAP = 9
BRUTE_GRID_CAP = 50_000_000


class ClusterCapError(RuntimeError):
    """A brute-force or enumeration cap would be exceeded."""


# ===== measures =====


@dataclass(frozen=True)
class UltralocalMeasure:
    """Per-site 1-D probability measure as an atom list (point, weight)."""

    points: tuple
    weights: tuple

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        wts = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        if len(pts) != len(wts) or not pts:
            raise ValueError("points and weights must be matching nonempty lists")
        if any(w <= 0 for w in wts):
            raise ValueError("weights must be positive")
        if abs(sum(wts) - 1.0) > 1e-12:
            raise ValueError("weights must sum to one")

    @property
    def n_atoms(self) -> int:
        return len(self.points)

    def moment(self, power: int) -> float:
        return float(sum(w * p**power for p, w in zip(self.points, self.weights)))

    @classmethod
    def from_atoms(cls, points, weights, normalize: bool = False) -> "UltralocalMeasure":
        w = np.asarray(weights, dtype=np.float64)
        if normalize:
            w = w / w.sum()
        return cls(tuple(points), tuple(w))

    @classmethod
    def symmetric_pair(cls, value: float = 1.0) -> "UltralocalMeasure":
        return cls((-value, value), (0.5, 0.5))

    @classmethod
    def truncated_gaussian(cls, cutoff: float, nodes: int = 20) -> "UltralocalMeasure":
        """Unit Gaussian conditioned on |x| <= cutoff, as a quadrature atom list."""
        x, w = np.polynomial.legendre.leggauss(nodes)
        x = cutoff * x
        w = cutoff * w * np.exp(-0.5 * x**2) / math.sqrt(2.0 * math.pi)
        return cls.from_atoms(x, w, normalize=True)


def gaussian_truncation_cost(cutoff: float, nodes: int | None = None) -> float:
    """-log of the unit-Gaussian mass inside [-cutoff, cutoff].

    With nodes given the mass is computed by the same quadrature rule the
    truncated measure uses; otherwise the closed form via erf.
    """
    if nodes is None:
        return -math.log(math.erf(cutoff / math.sqrt(2.0)))
    x, w = np.polynomial.legendre.leggauss(nodes)
    x = cutoff * x
    mass = float(np.sum(cutoff * w * np.exp(-0.5 * x**2)) / math.sqrt(2.0 * math.pi))
    return -math.log(mass)


# ===== models =====


@dataclass(frozen=True)
class ClusterModel:
    """Local terms on polymers over a shared cube torus and product measure.

    cube_sites[c] lists the field sites inside cube c (disjoint across
    cubes); values[i] is a vectorized evaluator for the i-th polymer term:
    it receives a (configs, sites) matrix of field values at the polymer's
    sites in ascending site order and returns one value per row.
    """

    torus: CubeTorus
    cube_sites: tuple
    measure: UltralocalMeasure
    polymers: tuple
    values: tuple

    def __post_init__(self):
        if len(self.cube_sites) != self.torus.n_cubes:
            raise ValueError("cube_sites must list every cube of the torus")
        seen = set()
        for sites in self.cube_sites:
            for s in sites:
                if s in seen:
                    raise ValueError("cube site lists must be disjoint")
                seen.add(s)
        if len(self.polymers) != len(self.values):
            raise ValueError("one evaluator per polymer required")
        for p in self.polymers:
            if p.torus != self.torus:
                raise ValueError("polymer lives on a different cube torus")

    def sites_of_cubes(self, cubes) -> tuple:
        out = []
        for c in cubes:
            out.extend(self.cube_sites[c])
        return tuple(sorted(out))

    def sites_of(self, index: int) -> tuple:
        return self.sites_of_cubes(self.polymers[index].cubes)


def overlapping(a: Polymer, b: Polymer) -> bool:
    return bool(set(a.cubes) & set(b.cubes))


def family_indivisible(polys) -> bool:
    """Connectivity of the overlap graph (sharing at least one cube)."""
    n = len(polys)
    if n == 0:
        raise ValueError("empty family")
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in range(n):
            if j not in seen and overlapping(polys[i], polys[j]):
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def term_table(model: ClusterModel, index: int) -> np.ndarray:
    """Values of one local term over the atom grid of its own sites."""
    sites = model.sites_of(index)
    r = model.measure.n_atoms
    shape = (r,) * len(sites)
    idx = np.indices(shape).reshape(len(sites), -1).T
    vals = np.asarray(model.measure.points)[idx]
    out = np.asarray(model.values[index](vals))
    if not np.iscomplexobj(out):
        out = out.astype(np.float64)
    return out.reshape(shape)


def _embed(table: np.ndarray, own_sites, all_sites, r: int) -> np.ndarray:
    """Broadcast a table over a subset of sites onto the full site grid."""
    shape = [1] * len(all_sites)
    pos = {s: i for i, s in enumerate(all_sites)}
    for s in own_sites:
        shape[pos[s]] = r
    return table.reshape(shape)


def integrate_site_table(model: ClusterModel, sites, table: np.ndarray):
    """Exact integral of a tabulated function of the given sites."""
    w = np.asarray(model.measure.weights)
    out = np.asarray(table)
    if not np.iscomplexobj(out):
        out = out.astype(np.float64)
    for _ in range(len(sites)):
        out = np.tensordot(out, w, axes=([len(out.shape) - 1], [0]))
    return complex(out) if np.iscomplexobj(out) else float(out)


def mayer_amplitude_tables(model: ClusterModel) -> dict:
    """Mayer amplitudes K(Y, .) as tables, keyed by the union cube tuple.

    K(Y) sums, over indivisible subfamilies of the support with union Y,
    the product of (e^{term} - 1) factors.
    """
    n = len(model.polymers)
    if n > 16:
        raise ClusterCapError("too many support polymers for family enumeration")
    r = model.measure.n_atoms
    tables = []
    for i in range(n):
        t = term_table(model, i)
        # expm1 has no complex loop; the plain form is accurate enough there
        tables.append(np.exp(t) - 1.0 if np.iscomplexobj(t) else np.expm1(t))
    out: dict = {}
    for mask in range(1, 2**n):
        family = [i for i in range(n) if mask >> i & 1]
        polys = [model.polymers[i] for i in family]
        if not family_indivisible(polys):
            continue
        cubes = set()
        for p in polys:
            cubes |= set(p.cubes)
        key = tuple(sorted(cubes))
        y_sites = model.sites_of_cubes(key)
        if r ** len(y_sites) > BRUTE_GRID_CAP:
            raise ClusterCapError("amplitude grid exceeds the exact-integration cap")
        acc = np.ones((r,) * len(y_sites))
        for i in family:
            acc = acc * _embed(tables[i], model.sites_of(i), y_sites, r)
        if key in out:
            out[key] = (y_sites, out[key][1] + acc)
        else:
            out[key] = (y_sites, acc)
    return out


def integrated_amplitudes(model: ClusterModel) -> dict:
    """K#(Y): Mayer amplitudes integrated over the product measure."""
    out = {}
    for key, (sites, table) in mayer_amplitude_tables(model).items():
        out[key] = integrate_site_table(model, sites, table)
    return out


# ===== connected-graph resummation =====


@lru_cache(maxsize=None)
def _rho_t_counts(adj: tuple, counts: tuple) -> float:
    """Alternating connected-subgraph sum for a multiset of vertices.

    adj[i][j] says whether distinct support vertices i and j overlap; counts
    gives the multiplicity of each vertex.  Copies of one vertex always
    overlap each other.  Works over multiplicity vectors, so interchangeable
    copies are never enumerated separately; the recursion peels off edgeless
    remainders, which are exactly the independent subsets of the live
    vertices, so only those are enumerated.
    """
    if sum(counts) == 0:
        raise ValueError("empty multiset")
    n = len(counts)

    @lru_cache(maxsize=None)
    def independent_subsets(live: tuple) -> tuple:
        """All nonempty independent subsets of the live vertices."""
        out = []
        stack = [((), live)]
        while stack:
            chosen, todo = stack.pop()
            for k, v in enumerate(todo):
                nxt = tuple(u for u in todo[k + 1 :] if not adj[v][u])
                stack.append((chosen + (v,), nxt))
            if chosen:
                out.append(chosen)
        return tuple(out)

    def edgeless(c: tuple) -> bool:
        live = [i for i, k in enumerate(c) if k]
        if any(c[i] > 1 for i in live):
            return False
        for a in range(len(live)):
            for b in range(a + 1, len(live)):
                if adj[live[a]][live[b]]:
                    return False
        return True

    @lru_cache(maxsize=None)
    def c_value(c: tuple) -> float:
        m = sum(c)
        if m == 1:
            return 1.0
        total = 1.0 if edgeless(c) else 0.0
        # peel off the part containing one fixed copy of the first live
        # vertex; the remainder must be edgeless, so it is an independent
        # subset taken with multiplicity one
        live = tuple(i for i in range(n) if c[i])
        f = live[0]
        for rest in independent_subsets(live):
            sub = list(c)
            ways = 1
            for i in rest:
                sub[i] -= 1
                ways *= c[i] - 1 if i == f else c[i]
            if sub[f] == 0 or ways == 0:
                continue
            total -= ways * c_value(tuple(sub))
        return total

    return c_value(counts)


def connected_rho_t(polymers) -> float:
    """rho_T of a polymer family (repeats allowed); capped at 9 members."""
    n = len(polymers)
    if n < 1:
        raise ValueError("need at least one polymer")
    if n > RHO_T_PUBLIC_CAP:
        raise ClusterCapError(f"rho_T enumeration capped at {RHO_T_PUBLIC_CAP} members")
    distinct = []
    counts = []
    for p in polymers:
        for i, q in enumerate(distinct):
            if q.cubes == p.cubes and q.torus == p.torus:
                counts[i] += 1
                break
        else:
            distinct.append(p)
            counts.append(1)
    adj = tuple(
        tuple(overlapping(distinct[i], distinct[j]) for j in range(len(distinct)))
        for i in range(len(distinct))
    )
    return _rho_t_counts(adj, tuple(counts))


def spanning_tree_count(adjacency: np.ndarray) -> int:
    """Number of spanning trees via the matrix-tree determinant."""
    a = np.asarray(adjacency, dtype=np.float64)
    n = a.shape[0]
    if n == 1:
        return 1
    lap = np.diag(a.sum(axis=1)) - a
    return int(round(np.linalg.det(lap[1:, 1:])))


def tree_degree_count(degrees) -> int:
    """Labeled trees with the given degree sequence: (n-2)! / prod (d_i - 1)!."""
    n = len(degrees)
    if n == 1:
        return 1 if degrees[0] == 0 else 0
    if n == 2:
        return 1 if tuple(degrees) == (1, 1) else 0
    if any(d < 1 for d in degrees) or sum(degrees) != 2 * (n - 1):
        return 0
    out = math.factorial(n - 2)
    for d in degrees:
        out //= math.factorial(d - 1)
    return out


def _tree_truncation_bound(total_mag: float, n_max: int) -> float:
    """Bound on the orders beyond n_max via the Cayley tree count.

    The order-n tuple sum is at most n^{n-2}/n! times (sum of |K#|)^n; the
    bound is summed until it is negligible, or reported as inf when the
    terms do not decrease.
    """
    if total_mag == 0.0:
        return 0.0
    out = 0.0
    prev = math.inf
    for n in range(n_max + 1, n_max + 200):
        log_term = (n - 2) * math.log(n) - math.lgamma(n + 1) + n * math.log(total_mag)
        term = math.exp(log_term)
        if term >= prev:
            return math.inf
        out += term
        prev = term
        if term < 1e-300 or term < out * 1e-18:
            break
    return out


def connected_amplitudes(model: ClusterModel, n_max: int = 12, prune: float = 1e-16) -> dict:
    """Connected amplitudes H#(Y) from the truncated resummation series.

    Enumerates multisets of gas atoms (the Mayer-amplitude support) with
    rigorous magnitude pruning; each multiset contributes rho_T times the
    product of K# powers over factorials, keyed by the cube union.  Returns
    the amplitude map plus dual tail estimates and a convergence flag.

    Pruning is per node: the absolute mass of every extension of a size-u
    multiset of weight w by atoms drawn from a suffix of total magnitude s
    is at most w * sum_t (u+t)^(u+t-2) s^t / t!, combining the Cayley tree
    bound on rho_T with the multinomial identity for multiset weights.
    """
    ksharp = integrated_amplitudes(model)
    atoms = sorted(ksharp.items(), key=lambda kv: (-abs(kv[1]), kv[0]))
    keys = [k for k, _ in atoms]
    vals = [v for _, v in atoms]
    mags = [abs(v) for v in vals]
    cube_sets = [frozenset(k) for k in keys]
    n_atoms = len(atoms)
    suffix = [0.0] * (n_atoms + 1)
    for i in range(n_atoms - 1, -1, -1):
        suffix[i] = suffix[i + 1] + mags[i]
    adj_full = tuple(
        tuple(bool(cube_sets[i] & cube_sets[j]) for j in range(n_atoms))
        for i in range(n_atoms)
    )
    amplitudes: dict = {}
    order_sums = [0.0] * (n_max + 1)
    state = {"nodes": 0, "pruned": 0.0, "capped": False}
    cayley = [1.0] * (n_max + 1)
    for n in range(3, n_max + 1):
        cayley[n] = float(n) ** (n - 2)
    inv_fact = [1.0 / math.factorial(t) for t in range(n_max + 1)]

    def tail_mass(u: int, w: float, s: float, t_min: int) -> float:
        total = 0.0
        s_pow = s**t_min
        for t in range(t_min, n_max - u + 1):
            total += cayley[u + t] * s_pow * inv_fact[t]
            s_pow *= s
        return w * total

    def record(counts: dict):
        idx = tuple(sorted(counts))
        if len(idx) > 1:
            # divisible supports contribute nothing; skip the rho_T work
            seen = {idx[0]}
            stack = [idx[0]]
            while stack:
                a = stack.pop()
                for b in idx:
                    if b not in seen and adj_full[a][b]:
                        seen.add(b)
                        stack.append(b)
            if len(seen) < len(idx):
                return
        cvec = tuple(counts[i] for i in idx)
        adj = tuple(tuple(adj_full[a][b] for b in idx) for a in idx)
        rho = _rho_t_counts(adj, cvec)
        if rho == 0.0:
            return
        term = rho
        for i in idx:
            term *= vals[i] ** counts[i] / math.factorial(counts[i])
        union = frozenset()
        for i in idx:
            union |= cube_sets[i]
        key = tuple(sorted(union))
        amplitudes[key] = amplitudes.get(key, 0.0) + term
        order_sums[sum(cvec)] += abs(term)

    def grow(start: int, counts: dict, weight: float, n_used: int):
        state["nodes"] += 1
        if state["nodes"] > SERIES_NODE_CAP:
            state["capped"] = True
            return
        if n_used > 0:
            record(counts)
        if n_used == n_max:
            return
        for i in range(start, n_atoms):
            if mags[i] == 0.0:
                break  # sorted by magnitude: the rest vanish too
            si = suffix[i]
            rest_bound = tail_mass(n_used, weight, si, 1)
            if rest_bound <= prune:
                state["pruned"] += rest_bound
                break
            new_w = weight * mags[i] / (counts.get(i, 0) + 1)
            sub_bound = tail_mass(n_used + 1, new_w, si, 0)
            if sub_bound <= prune:
                state["pruned"] += sub_bound
                continue
            counts[i] = counts.get(i, 0) + 1
            grow(i, counts, new_w, n_used + 1)
            counts[i] -= 1
            if counts[i] == 0:
                del counts[i]
            if state["capped"]:
                return

    grow(0, {}, 1.0, 0)

    trunc_tree = _tree_truncation_bound(suffix[0], n_max)
    geo = math.inf
    nz = [s for s in order_sums[1:] if s > 0]
    if len(nz) >= 2 and nz[-1] < nz[-2]:
        ratio = nz[-1] / nz[-2]
        geo = nz[-1] * ratio / (1.0 - ratio)
    tail = state["pruned"] + min(trunc_tree, geo)
    return {
        "amplitudes": amplitudes,
        "k_sharp": ksharp,
        "n_max": n_max,
        "order_sums": order_sums,
        "pruned_bound": state["pruned"],
        "tail_tree_bound": trunc_tree,
        "tail_geometric": geo,
        "tail_bound": tail,
        "converged": (not state["capped"]) and tail < 1e-12,
        "nodes": state["nodes"],
    }


# ===== brute-force oracle =====


def log_partition_bruteforce(model: ClusterModel, active=None) -> float:
    """log of the exact partition function over the product measure.

    Integrates exp(sum of active local terms) by exact tensor summation over
    every site that appears in the support; errs out when the atom grid
    exceeds the cap instead of approximating.
    """
    if active is None:
        active = range(len(model.polymers))
    active = list(active)
    all_sites = sorted({s for i in active for s in model.sites_of(i)})
    r = model.measure.n_atoms
    if not all_sites:
        return 0.0
    if r ** len(all_sites) > BRUTE_GRID_CAP:
        raise ClusterCapError("brute-force grid exceeds the exact-integration cap")
    pos = {s: i for i, s in enumerate(all_sites)}
    radices = [r] * len(all_sites)
    site_weights = [np.asarray(model.measure.weights)] * len(all_sites)
    terms = []
    for i in active:
        ids = [pos[s] for s in model.sites_of(i)]
        terms.append((ids, term_table(model, i)))
    return float(np.log(tensor_partition(radices, site_weights, terms)))


def exact_connected_parts(model: ClusterModel) -> dict:
    """H#(Y) recovered from brute-force log partitions by inclusion-exclusion.

    For every subset of support terms the restricted log partition is
    computed exactly; alternating sums isolate the contribution using
    exactly each subset, which is then accumulated on its cube union.
    """
    n = len(model.polymers)
    if n > 12:
        raise ClusterCapError("too many support polymers for subset inversion")
    logxi = {}
    for mask in range(2**n):
        logxi[mask] = log_partition_bruteforce(model, [i for i in range(n) if mask >> i & 1])
    out: dict = {}
    for mask in range(1, 2**n):
        members = [i for i in range(n) if mask >> i & 1]
        e_val = 0.0
        sub = mask
        while True:
            sign = -1.0 if (bin(mask ^ sub).count("1") % 2) else 1.0
            e_val += sign * logxi[sub]
            if sub == 0:
                break
            sub = (sub - 1) & mask
        cubes = set()
        for i in members:
            cubes |= set(model.polymers[i].cubes)
        key = tuple(sorted(cubes))
        out[key] = out.get(key, 0.0) + e_val
    return out


# ===== decay reporting =====


def decay_report(model: ClusterModel, kappa: float, kappa0: float, h0_cap: float | None = None, n_max: int = 12) -> dict:
    """Fit exponential decay of |H#(Y)| in the tree distance of Y.

    Also measures the input magnitude H0 = max |H(X)| e^{kappa d_M(X)} over
    the support and flags it against an optional hypothesis threshold.
    """
    h0 = 0.0
    for i, p in enumerate(model.polymers):
        mag = float(np.max(np.abs(term_table(model, i))))
        h0 = max(h0, mag * math.exp(kappa * tree_distance(p)))
    res = connected_amplitudes(model, n_max=n_max)
    pts = []
    for key, val in res["amplitudes"].items():
        if abs(val) < 1e-300:
            continue
        poly = Polymer(model.torus, key)
        pts.append((float(tree_distance(poly)), math.log(abs(val))))
    rate = math.nan
    if len({d for d, _ in pts}) >= 2:
        arr = np.array(pts)
        slope, _ = np.polyfit(arr[:, 0], arr[:, 1], 1)
        rate = -float(slope)
    claimed = kappa - 3.0 * kappa0 - 3.0
    return {
        "h0_measured": h0,
        "h0_cap": h0_cap,
        "h0_ok": (h0_cap is None) or (h0 <= h0_cap),
        "points": pts,
        "rate": rate,
        "claimed_rate": claimed,
        "rate_ok": (not math.isnan(rate)) and rate > 0 and rate >= min(claimed, 0.0),
        "tail_bound": res["tail_bound"],
    }
