"""Reference measures, jump kernels and reversibility checks.

All measures are stored as integer numerators over the common denominator
``4 * 4**k`` and all kernel probabilities as integer ``num / den`` pairs, so
identities can be checked exactly with integer cross-multiplication.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable

import numba
import numpy as np

from .lattice import PLANE, ROD, STAR, LatticeGraph, LatticeParams, build_graphs


@dataclass(frozen=True, eq=False)
class MeasureTable:
    """Per-vertex measures ``m_k`` (full degrees) and ``m_bar_k`` (domain degrees).

    ``numerator[x] / denominator`` is the measure of vertex ``x``; the measure
    scaled by the speed ``4**k`` is ``numerator[x] / 4``.
    """

    k: int
    full_numerator: np.ndarray
    reflected_numerator: np.ndarray

    @property
    def denominator(self) -> int:
        return 4 * 4**self.k

    def numerator(self, variant: str) -> np.ndarray:
        if variant == "full":
            return self.full_numerator
        if variant == "reflected":
            return self.reflected_numerator
        raise ValueError(f"unknown variant {variant!r}")

    def values(self, variant: str = "reflected") -> np.ndarray:
        return self.numerator(variant) / self.denominator

    def speed_values(self, variant: str = "reflected") -> np.ndarray:
        """The measure multiplied by the speed ``4**k``."""
        return self.numerator(variant) / 4.0

    def value(self, vid: int, variant: str = "reflected") -> Fraction:
        return Fraction(int(self.numerator(variant)[vid]), self.denominator)

    def total(self, variant: str = "reflected", mask=None) -> Fraction:
        num = self.numerator(variant)
        if mask is not None:
            num = num[mask]
        return Fraction(int(num.sum()), self.denominator)

    def normalized(self, variant: str = "reflected") -> np.ndarray:
        num = self.numerator(variant).astype(float)
        return num / num.sum()


def measures(graph: LatticeGraph) -> MeasureTable:
    """Exact per-vertex measures for both degree tables."""

    def numerators(deg):
        S = graph.params.scale
        num = np.where(graph.kind == ROD, 2 * S * deg, deg).astype(np.int64)
        num[0] = 2 * S + deg[0] - 1
        return num

    full = numerators(graph.degree)
    ref = numerators(graph.degree_reflected)
    ref[~graph.inside] = 0
    return MeasureTable(graph.k, full, ref)


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """One-step jump distribution with exact rational entries.

    Row ``x`` of the CSR arrays lists the neighbors of ``x`` with probability
    ``num / den``.  Rows of exterior vertices in the full kernel are truncated
    to materialized neighbors and flagged incomplete.
    """

    graph: LatticeGraph
    variant: str
    indptr: np.ndarray
    indices: np.ndarray
    num: np.ndarray
    den: np.ndarray

    @property
    def k(self) -> int:
        return self.graph.k

    @property
    def speed(self) -> int:
        return 4**self.graph.k

    @property
    def probs(self) -> np.ndarray:
        return self.num / self.den

    @property
    def complete_rows(self) -> np.ndarray:
        return self.graph.inside.copy()

    @property
    def states(self) -> np.ndarray:
        """Ids of vertices the process may occupy."""
        return np.flatnonzero(self.graph.inside)

    def row(self, vid: int) -> tuple[np.ndarray, list[Fraction]]:
        sl = slice(self.indptr[vid], self.indptr[vid + 1])
        return self.indices[sl], [Fraction(int(a), int(b)) for a, b in zip(self.num[sl], self.den[sl])]

    def prob(self, x: int, y: int) -> Fraction:
        nbrs, probs = self.row(x)
        hit = np.flatnonzero(nbrs == y)
        return probs[hit[0]] if len(hit) else Fraction(0)

    def row_sums_exact(self) -> np.ndarray:
        """Boolean per complete row: entries sum to exactly one."""
        deg = np.diff(self.indptr)
        src = np.repeat(np.arange(len(deg)), deg)
        ok = np.ones(len(deg), dtype=bool)
        # non-star rows share one denominator equal to the row length
        uniform = (self.num == 1) & (self.den == deg[src])
        bad_rows = np.unique(src[~uniform])
        ok[bad_rows] = False
        for x in bad_rows:
            _, probs = self.row(int(x))
            ok[x] = sum(probs, Fraction(0)) == 1
        return ok[self.complete_rows]

    def sampler(self) -> "KernelSampler":
        return KernelSampler.from_kernel(self)


def kernel(graph: LatticeGraph, variant: str = "reflected") -> JumpKernel:
    """Jump kernel of the full graph (``variant='full'``) or the domain graph."""
    if variant == "full":
        indptr, indices, deg = graph.full_indptr, graph.full_indices, graph.degree
    elif variant == "reflected":
        indptr, indices, deg = graph.reflected_indptr, graph.reflected_indices, graph.degree_reflected
    else:
        raise ValueError(f"unknown variant {variant!r}")
    counts = np.diff(indptr)
    src = np.repeat(np.arange(graph.n_vertices), counts)
    num = np.ones(len(indices), dtype=np.int64)
    den = deg[src].astype(np.int64)
    # the star prefers the rod: weight 2^(k+1) against 1 for each plane neighbor
    star_row = slice(indptr[0], indptr[1])
    boost = 2 * graph.params.scale
    num[star_row] = np.where(graph.kind[indices[star_row]] == ROD, boost, 1)
    den[star_row] = deg[0] + boost - 1
    return JumpKernel(graph, variant, indptr, indices, num, den)


@dataclass(frozen=True, eq=False)
class KernelSampler:
    """Float view of a kernel used during simulation."""

    indptr: np.ndarray
    indices: np.ndarray
    star_cumulative: np.ndarray
    inside: np.ndarray
    boundary: np.ndarray
    speed: float

    @classmethod
    def from_kernel(cls, kern: JumpKernel) -> "KernelSampler":
        sl = slice(kern.indptr[0], kern.indptr[1])
        cum = np.cumsum(kern.num[sl]) / float(kern.den[sl][0])
        cum[-1] = 1.0
        g = kern.graph
        return cls(kern.indptr, kern.indices, cum, g.inside, g.boundary, float(kern.speed))

    def choose(self, pos: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Neighbor selected by uniforms ``u`` for walkers at ``pos``."""
        start = self.indptr[pos]
        deg = self.indptr[pos + 1] - start
        offset = np.minimum((u * deg).astype(np.int64), deg - 1)
        star = pos == 0
        if star.any():
            offset[star] = np.searchsorted(self.star_cumulative, u[star], side="right")
        return self.indices[start + offset]


@dataclass(frozen=True)
class BalanceReport:
    """Outcome of the exact detailed-balance scan."""

    variant: str
    oriented_edges: int
    exact_violations: int
    max_violation: float
    max_relative_violation: float
    plane_constant: Fraction
    rod_constant: Fraction
    plane_constant_ok: bool
    rod_constant_ok: bool

    @property
    def ok(self) -> bool:
        return self.exact_violations == 0 and self.plane_constant_ok and self.rod_constant_ok


@numba.njit(cache=True)
def _balance_scan(indptr, indices, num, den, mnum, rows, is_rod, rod_factor):
    n = len(indptr) - 1
    cursor = indptr[:-1].copy()
    edges = 0
    violations = 0
    asymmetric = 0
    max_abs = 0.0
    max_rel = 0.0
    plane_ok = True
    rod_ok = True
    for x in range(n):
        for p in range(indptr[x], indptr[x + 1]):
            y = indices[p]
            if not (rows[x] and rows[y]):
                continue
            # rows are sorted, so the reverse entry of (x, y) is the next unread entry of row y
            q = cursor[y]
            while q < indptr[y + 1] and indices[q] < x:
                q += 1
            cursor[y] = q + 1
            if q >= indptr[y + 1] or indices[q] != x:
                asymmetric += 1
                continue
            edges += 1
            lhs = num[p] * mnum[x] * den[q]
            rhs = num[q] * mnum[y] * den[p]
            if lhs != rhs:
                violations += 1
            a = num[p] * mnum[x] / (4.0 * den[p])
            b = num[q] * mnum[y] / (4.0 * den[q])
            d = abs(a - b)
            if d > max_abs:
                max_abs = d
            if d / max(a, b) > max_rel:
                max_rel = d / max(a, b)
            if is_rod[x] or is_rod[y]:
                if num[p] * mnum[x] != rod_factor * den[p]:
                    rod_ok = False
            elif num[p] * mnum[x] != den[p]:
                plane_ok = False
    return edges, violations, asymmetric, max_abs, max_rel, plane_ok, rod_ok


def detailed_balance_violation(graph: LatticeGraph, kern: JumpKernel, meas: MeasureTable) -> BalanceReport:
    """Check ``j(x,y) m0(x) == j(y,x) m0(y)`` on every oriented edge.

    ``m0`` is the measure times the speed.  Also checks the edge constants:
    ``1/4`` on edges carried by the plane and ``2^(k-1)`` on edges carried by the rod.
    """
    mnum = meas.numerator(kern.variant)
    if kern.variant == "reflected":
        rows = graph.inside
    else:
        rows = np.ones(graph.n_vertices, dtype=bool)
    S = graph.params.scale
    edges, violations, asymmetric, max_abs, max_rel, plane_ok, rod_ok = _balance_scan(
        kern.indptr, kern.indices, kern.num, kern.den, mnum, rows, graph.kind == ROD, 2 * S
    )
    if asymmetric:
        raise ValueError(f"kernel support is not symmetric on {asymmetric} entries")
    return BalanceReport(
        variant=kern.variant,
        oriented_edges=int(edges),
        exact_violations=int(violations),
        max_violation=float(max_abs),
        max_relative_violation=float(max_rel),
        plane_constant=Fraction(1, 4),
        rod_constant=Fraction(S, 2),
        plane_constant_ok=bool(plane_ok),
        rod_constant_ok=bool(rod_ok),
    )


def star_identities(graph: LatticeGraph, kern: JumpKernel, meas: MeasureTable) -> dict:
    """Exact values of ``m0(star) j(star, rod)`` and ``m0(star) j(star, plane neighbor)``."""
    m0 = Fraction(int(meas.numerator(kern.variant)[0]), 4)
    nbrs, probs = kern.row(0)
    rod = [p for v, p in zip(nbrs, probs) if graph.kind[v] == ROD]
    plane = {p for v, p in zip(nbrs, probs) if graph.kind[v] == PLANE}
    return {
        "rod": m0 * rod[0],
        "plane": {m0 * p for p in plane},
    }


# quadrature oracle ------------------------------------------------------------


def integrate_domain(
    f: Callable[[np.ndarray], np.ndarray],
    params: LatticeParams,
    cells: int = 2**12,
    rtol: float = 1e-9,
    atol: float = 1e-12,
    max_cells: int = 2**24,
) -> float:
    """Integral of ``f`` against Lebesgue measure on the plane annulus plus the rod.

    Midpoint rule in polar coordinates on the plane and on the rod.  Each
    refinement halves the step, and the two latest values are combined by
    Richardson extrapolation; refinement stops when successive extrapolated
    values agree to ``rtol`` (or ``atol``).
    """
    eps, R, L = float(params.epsilon), float(params.radius), float(params.rod_length)

    def plane_part(n):
        nr = max(int(np.sqrt(n)), 8)
        nt = max(n // nr, 8)
        r = eps + (np.arange(nr) + 0.5) * (R - eps) / nr
        t = (np.arange(nt) + 0.5) * 2 * np.pi / nt
        ct, st = np.cos(t), np.sin(t)
        total = 0.0
        for ri in r:
            pts = np.column_stack([ri * ct, ri * st, np.zeros(nt)])
            total += float(np.sum(f(pts))) * ri
        return total * (R - eps) / nr * 2 * np.pi / nt

    def rod_part(n):
        s = (np.arange(n) + 0.5) * L / n
        pts = np.column_stack([np.zeros(n), np.zeros(n), s])
        return float(np.sum(f(pts))) * L / n

    n = cells
    raw = plane_part(n) + rod_part(n)
    prev = None
    while n < max_cells:
        n *= 4
        cur = plane_part(n) + rod_part(n)
        extrapolated = (4 * cur - raw) / 3
        raw = cur
        if prev is not None and abs(extrapolated - prev) <= max(rtol * abs(extrapolated), atol):
            return extrapolated
        prev = extrapolated
    raise ArithmeticError("quadrature did not converge; the integrand may be too irregular")


def weak_convergence_error(
    f: Callable[[np.ndarray], np.ndarray],
    k_range: Iterable[int],
    params: LatticeParams,
    reference: float | None = None,
) -> np.ndarray:
    """``|sum_x f(x) m_bar_k(x) - integral of f|`` for each k."""
    if reference is None:
        reference = integrate_domain(f, params)
    errors = []
    for k in k_range:
        g = build_graphs(params.with_k(k))
        m = measures(g)
        errors.append(abs(float(np.dot(f(g.coords), m.values("reflected"))) - reference))
    return np.array(errors)


def lebesgue_total(params: LatticeParams) -> float:
    """Lebesgue measure of the domain: annulus area plus rod length."""
    eps, R, L = float(params.epsilon), float(params.radius), float(params.rod_length)
    return np.pi * (R * R - eps * eps) + L


# audit output -------------------------------------------------------------------


def write_measures_csv(graph: LatticeGraph, meas: MeasureTable, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["vertex", "m_k", "m_bar_k", "m0_k"])
    d = meas.denominator
    for vid, (a, b) in enumerate(zip(meas.full_numerator.tolist(), meas.reflected_numerator.tolist())):
        w.writerow([vid, Fraction(a, d), Fraction(b, d), Fraction(a, 4)])


def write_kernel_csv(kern: JumpKernel, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["vertex", "id", "prob"])
    counts = np.diff(kern.indptr)
    src = np.repeat(np.arange(len(counts)), counts)
    rows = kern.complete_rows
    for x, y, a, b in zip(src.tolist(), kern.indices.tolist(), kern.num.tolist(), kern.den.tolist()):
        if rows[x]:
            w.writerow([x, y, Fraction(a, b)])
