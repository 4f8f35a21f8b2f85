"""Test functions, discrete and continuum generators, martingale diagnostics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .lattice import (
    PLANE,
    ROD,
    STAR,
    LatticeGraph,
    LatticeParams,
    _Geometry,
    build_graphs,
    point_kinds,
    project_f,
    star_structure,
)
from .measures import JumpKernel, MeasureTable

# uniform cubic B-spline on knots 0..4, one row of power coefficients per unit piece
_BSPLINE = np.array(
    [
        [0.0, 0.0, 0.0, 1.0],
        [4.0, -12.0, 12.0, -3.0],
        [-44.0, 60.0, -24.0, 3.0],
        [64.0, -48.0, 12.0, -1.0],
    ]
) / 6.0


def bspline(t, order: int = 0) -> np.ndarray:
    """Uniform cubic B-spline supported on [0, 4] or one of its first two derivatives."""
    t = np.asarray(t, dtype=float)
    piece = np.clip(np.floor(t).astype(np.int64), 0, 3)
    c = _BSPLINE[piece]
    if order == 0:
        val = c[..., 0] + t * (c[..., 1] + t * (c[..., 2] + t * c[..., 3]))
    elif order == 1:
        val = c[..., 1] + t * (2 * c[..., 2] + 3 * t * c[..., 3])
    elif order == 2:
        val = 2 * c[..., 2] + 6 * t * c[..., 3]
    else:
        raise ValueError("order must be 0, 1 or 2")
    return np.where((t >= 0) & (t <= 4), val, 0.0)


def spline_step(t, order: int = 0) -> np.ndarray:
    """Cubic spline equal to 1 on (-inf, 1], 0 on [4, inf), knots at 1, 2, 3, 4."""
    t = np.asarray(t, dtype=float)
    tail = sum(bspline(t - m, order) for m in (1, 2, 3))
    base = 1.0 if order == 0 else 0.0
    return np.where(t <= 1, base, np.where(t >= 4, 0.0, base - tail))


@dataclass(frozen=True)
class TestFunction:
    """A function on plane and rod with closed-form derivatives.

    The plane part gets ``(x1, x2)`` and returns value, gradient components
    and Laplacian; the rod part gets ``s`` and returns value, first and second
    derivative.  ``star_value`` is the common value on the collapsed disk.
    """

    __test__ = False  # not a pytest class

    name: str
    plane: Callable[[np.ndarray, np.ndarray], tuple]
    rod: Callable[[np.ndarray], tuple]
    star_value: float
    plane_support: float
    rod_support: float
    knots: dict = field(default_factory=dict)

    def _split(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if p.shape[-1] != 3:
            raise ValueError("points must have shape (n, 3)")
        x3 = p[:, 2]
        r2 = p[:, 0] ** 2 + p[:, 1] ** 2
        return p, x3 > 0, (x3 == 0) & (r2 == 0)

    def values(self, points) -> np.ndarray:
        p, rod, star = self._split(points)
        out = np.asarray(self.plane(p[:, 0], p[:, 1])[0], dtype=float).copy()
        out[rod] = self.rod(p[rod, 2])[0]
        out[star] = self.star_value
        return out

    __call__ = values

    def generator(self, points) -> np.ndarray:
        """Continuum generator: half the second derivative on the rod, a quarter of the Laplacian on the plane."""
        p, rod, star = self._split(points)
        out = 0.25 * np.asarray(self.plane(p[:, 0], p[:, 1])[3], dtype=float)
        out[rod] = 0.5 * np.asarray(self.rod(p[rod, 2])[2])
        out[star] = 0.0
        return out

    def gradient(self, points) -> np.ndarray:
        p, rod, star = self._split(points)
        _, g1, g2, _ = self.plane(p[:, 0], p[:, 1])
        out = np.column_stack([g1, g2, np.zeros(len(p))])
        out[rod] = 0.0
        out[rod, 2] = self.rod(p[rod, 2])[1]
        out[star] = 0.0
        return out


def continuum_generator(f: TestFunction) -> Callable[[np.ndarray], np.ndarray]:
    return f.generator


def _zero_plane(x1, x2):
    z = np.zeros(np.shape(x1))
    return z, z, z, z


def _zero_rod(s):
    z = np.zeros(np.shape(s))
    return z, z, z


def canonical_test_functions(params: LatticeParams) -> list[TestFunction]:
    """Three compactly supported spline test functions with explicit value at the star.

    * ``radial_rod``: equal to 1 near the collapsed disk and on the start of
      the rod, decaying to 0 along a radial spline in ``|x| - eps`` and a rod
      spline; value 1 at the star.
    * ``rod_bump``: a B-spline bump on the rod, zero near the star.
    * ``plane_box``: a tensor-product B-spline on a box away from the disk,
      zero near the disk and at the star.

    All knots sit at multiples of ``eps``.
    """
    eps = float(params.epsilon)

    def radial_plane(x1, x2):
        r = np.hypot(x1, x2)
        t = (r - eps) / eps
        g = spline_step(t)
        g1 = spline_step(t, 1) / eps
        g2 = spline_step(t, 2) / eps**2
        safe = np.where(r > 0, r, 1.0)
        lap = g2 + g1 / safe
        return g, g1 * x1 / safe, g1 * x2 / safe, lap

    def radial_rod(s):
        t = s / eps
        return spline_step(t), spline_step(t, 1) / eps, spline_step(t, 2) / eps**2

    def bump_rod(s):
        t = (s - 3 * eps) / eps
        return bspline(t), bspline(t, 1) / eps, bspline(t, 2) / eps**2

    def box_plane(x1, x2):
        a = (x1 - 2 * eps) / eps
        b = (x2 + 2 * eps) / eps
        pa, pb = bspline(a), bspline(b)
        da, db = bspline(a, 1) / eps, bspline(b, 1) / eps
        sa, sb = bspline(a, 2) / eps**2, bspline(b, 2) / eps**2
        return pa * pb, da * pb, pa * db, sa * pb + pa * sb

    return [
        TestFunction(
            "radial_rod",
            radial_plane,
            radial_rod,
            star_value=1.0,
            plane_support=5 * eps,
            rod_support=4 * eps,
            knots={"radius": [m * eps for m in (2, 3, 4, 5)], "rod": [m * eps for m in (1, 2, 3, 4)]},
        ),
        TestFunction(
            "rod_bump",
            _zero_plane,
            bump_rod,
            star_value=0.0,
            plane_support=0.0,
            rod_support=7 * eps,
            knots={"rod": [m * eps for m in (3, 4, 5, 6, 7)]},
        ),
        TestFunction(
            "plane_box",
            box_plane,
            _zero_rod,
            star_value=0.0,
            plane_support=float(np.hypot(6, 2)) * eps,
            rod_support=0.0,
            knots={"x1": [m * eps for m in (2, 3, 4, 5, 6)], "x2": [m * eps for m in (-2, -1, 0, 1, 2)]},
        ),
    ]


def quadratic_function(plane_coeffs=(1.0, 0.0, 1.0), rod_coeff: float = 1.0) -> TestFunction:
    """``a x1^2 + b x1 x2 + c x2^2`` on the plane and ``d s^2`` on the rod (not compactly supported)."""
    a, b, c = plane_coeffs

    def plane(x1, x2):
        return a * x1 * x1 + b * x1 * x2 + c * x2 * x2, 2 * a * x1 + b * x2, b * x1 + 2 * c * x2, np.full(np.shape(x1), 2 * a + 2 * c)

    def rod(s):
        return rod_coeff * s * s, 2 * rod_coeff * s, np.full(np.shape(s), 2 * rod_coeff)

    return TestFunction("quadratic", plane, rod, 0.0, np.inf, np.inf)


def projection_function(i: int, epsilon) -> Callable[[np.ndarray], np.ndarray]:
    """The i-th coordinate of the disk-flattening projection, as a function of points."""
    eps = float(epsilon)
    return lambda pts: project_f(pts, eps)[:, i]


def vertex_values(f, graph: LatticeGraph) -> np.ndarray:
    """Evaluate a test function (or any points -> values callable) at every vertex."""
    if isinstance(f, np.ndarray):
        return f
    return np.asarray(f(graph.coords), dtype=float)


def _row_sum(kern: JumpKernel, terms: np.ndarray) -> np.ndarray:
    counts = np.diff(kern.indptr)
    src = np.repeat(np.arange(len(counts)), counts)
    return np.bincount(src, weights=terms, minlength=len(counts))


def discrete_generator(kern: JumpKernel, f) -> np.ndarray:
    """``4**k * sum_y (f(y) - f(x)) j(x, y)`` at every vertex (zero off the domain)."""
    fv = vertex_values(f, kern.graph)
    counts = np.diff(kern.indptr)
    src = np.repeat(np.arange(len(counts)), counts)
    out = kern.speed * _row_sum(kern, (fv[kern.indices] - fv[src]) * kern.probs)
    out[~kern.graph.inside] = 0.0
    return out


def quadratic_variation_rate(kern: JumpKernel, f) -> np.ndarray:
    """``4**k * sum_y (f(x) - f(y))^2 j(x, y)``: the rate of the predictable bracket."""
    fv = vertex_values(f, kern.graph)
    counts = np.diff(kern.indptr)
    src = np.repeat(np.arange(len(counts)), counts)
    out = kern.speed * _row_sum(kern, (fv[kern.indices] - fv[src]) ** 2 * kern.probs)
    out[~kern.graph.inside] = 0.0
    return out


# stencil evaluation without a full graph ---------------------------------------------


class LocalStencil:
    """Evaluates the domain-kernel generator at chosen vertices from local geometry only.

    Used at fine scales where materializing the whole graph would not fit in memory.
    """

    def __init__(self, params: LatticeParams):
        self.params = params
        self.geo = _Geometry(params)
        self.h = 2.0**-params.k
        self.speed = float(params.speed)
        self.star = star_structure(params)

    def _plane_points(self, ij):
        return np.column_stack([ij[:, 0] * self.h, ij[:, 1] * self.h, np.zeros(len(ij))])

    def _rod_points(self, n):
        n = np.asarray(n, dtype=float)
        return np.column_stack([np.zeros(len(n)), np.zeros(len(n)), n * self.h])

    def plane(self, ij: np.ndarray, f: Callable) -> np.ndarray:
        ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
        r2 = ij[:, 0] ** 2 + ij[:, 1] ** 2
        if not self.geo.in_domain_plane(r2).all():
            raise ValueError("plane vertices must lie in the domain")
        fx = f(self._plane_points(ij))
        fstar = float(f(np.zeros((1, 3)))[0])
        total = np.zeros(len(ij))
        deg = np.zeros(len(ij), dtype=np.int64)
        touches = np.zeros(len(ij), dtype=bool)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = ij + np.array([di, dj])
            nr2 = nb[:, 0] ** 2 + nb[:, 1] ** 2
            touches |= self.geo.in_disk(nr2)
            ok = self.geo.in_domain_plane(nr2)
            if ok.any():
                total[ok] += f(self._plane_points(nb[ok])) - fx[ok]
            deg += ok
        total += np.where(touches, fstar - fx, 0.0)
        deg += touches
        return self.speed * total / deg

    def rod(self, n: np.ndarray, f: Callable) -> np.ndarray:
        n = np.asarray(n, dtype=np.int64).ravel()
        last = self.geo.rod_inside_max
        if np.any(n < 1) or np.any(n > last):
            raise ValueError("rod vertices must lie in the domain")
        fx = f(self._rod_points(n))
        fstar = float(f(np.zeros((1, 3)))[0])
        below = np.where(n == 1, fstar, f(self._rod_points(np.maximum(n - 1, 1))))
        has_up = n + 1 <= last
        up = f(self._rod_points(n + 1))
        total = (below - fx) + np.where(has_up, up - fx, 0.0)
        deg = 1 + has_up
        return self.speed * total / deg

    def star_value(self, f: Callable) -> float:
        nb = self.star.plane_neighbors
        fstar = float(f(np.zeros((1, 3)))[0])
        boost = 2 * self.params.scale
        denom = len(nb) + 1 + boost - 1
        plane_part = np.sum(f(self._plane_points(nb)) - fstar)
        rod_part = boost * (float(f(self._rod_points([1]))[0]) - fstar)
        return self.speed * (plane_part + rod_part) / denom


@dataclass
class GeneratorReport:
    f_name: str
    k: list
    sup_error: list
    slope: float
    max_abs_generator: list
    error_constant: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def regular_points(params: LatticeParams) -> tuple[np.ndarray, np.ndarray]:
    """Integer coordinates of the regular interior at scale ``params.k``: plane ``(i, j)`` and rod ``n``."""
    g = build_graphs(params)
    reg = g.regular
    plane = reg & (g.kind == PLANE)
    rod = reg & (g.kind == ROD)
    return g.ij[plane], g.ij[rod, 0]


def _support_vertices(params: LatticeParams, f: TestFunction):
    S = params.scale
    geo = _Geometry(params)
    rp = int(np.ceil(f.plane_support * S)) + 1
    if f.plane_support > 0:
        axis = np.arange(-rp, rp + 1, dtype=np.int64)
        I, J = np.meshgrid(axis, axis, indexing="ij")
        ij = np.column_stack([I.ravel(), J.ravel()])
        ij = ij[geo.in_domain_plane(ij[:, 0] ** 2 + ij[:, 1] ** 2)]
    else:
        ij = np.empty((0, 2), dtype=np.int64)
    rr = min(int(np.ceil(f.rod_support * S)) + 1, geo.rod_inside_max)
    return ij, np.arange(1, rr + 1)


def convergence_report(f: TestFunction, k_range: Sequence[int], params: LatticeParams, k0: int | None = None) -> GeneratorReport:
    """Sup error of the discrete generator over the coarse regular set, for each k.

    The regular set is taken at ``k0 = min(k_range)`` and its points are
    reused at every finer scale.
    """
    ks = sorted(k_range)
    k0 = ks[0] if k0 is None else k0
    if k0 != ks[0]:
        raise ValueError("k0 must be the smallest k of the sweep")
    plane_ij, rod_n = regular_points(params.with_k(k0))
    if len(plane_ij) + len(rod_n) == 0:
        raise ValueError("empty regular set")
    errors, max_abs = [], []
    for k in ks:
        p = params.with_k(k)
        st = LocalStencil(p)
        mult = 2 ** (k - k0)
        exact_plane = f.generator(st._plane_points(plane_ij * mult))
        exact_rod = f.generator(st._rod_points(rod_n * mult))
        err = max(
            np.max(np.abs(st.plane(plane_ij * mult, f) - exact_plane), initial=0.0),
            np.max(np.abs(st.rod(rod_n * mult, f) - exact_rod), initial=0.0),
        )
        errors.append(float(err))
        sup_ij, sup_n = _support_vertices(p, f)
        # outside the support every stencil sees a constant function, where the generator vanishes
        vals = [abs(st.star_value(f))]
        if len(sup_ij):
            vals.append(np.max(np.abs(st.plane(sup_ij, f))))
        if len(sup_n):
            vals.append(np.max(np.abs(st.rod(sup_n, f))))
        max_abs.append(float(max(vals)))
    errs = np.array(errors)
    if np.all(errs > 0):
        slope = float(np.polyfit(ks, np.log2(errs), 1)[0])
        constant = float(np.max(errs * 2.0 ** np.array(ks)))
    else:
        slope, constant = float("nan"), float("nan")
    return GeneratorReport(f.name, ks, errors, slope, max_abs, constant)


def self_adjointness_gap(kern: JumpKernel, meas: MeasureTable, f, g, exact: bool = False):
    """``sum Lf g m - sum f Lg m`` with the measure matching the kernel.

    With ``exact=True`` every float input is converted to its exact rational
    value and the two sums are computed in rational arithmetic, which isolates
    the algebraic identity from rounding.
    """
    graph = kern.graph
    fv = vertex_values(f, graph)
    gv = vertex_values(g, graph)
    m = meas.values(kern.variant)
    if not exact:
        lhs = np.dot(discrete_generator(kern, fv) * gv, m)
        rhs = np.dot(fv * discrete_generator(kern, gv), m)
        return float(lhs - rhs)
    mnum = meas.numerator(kern.variant)
    den = meas.denominator

    def side(a, b):
        # sum over x with b(x) != 0 of m(x) b(x) * speed * sum_y (a(y) - a(x)) j(x, y)
        total = Fraction(0)
        for x in np.flatnonzero((b != 0) & graph.inside).tolist():
            sl = slice(kern.indptr[x], kern.indptr[x + 1])
            ax = Fraction(float(a[x]))
            inner = Fraction(0)
            for y, pn, pd in zip(kern.indices[sl].tolist(), kern.num[sl].tolist(), kern.den[sl].tolist()):
                inner += (Fraction(float(a[y])) - ax) * Fraction(pn, pd)
            total += Fraction(int(mnum[x]), den) * Fraction(float(b[x])) * inner
        return total * kern.speed

    return side(fv, gv) - side(gv, fv)


# martingale diagnostics --------------------------------------------------------------


@dataclass
class MartingaleReport:
    grid: np.ndarray
    mean: np.ndarray
    standard_error: np.ndarray
    qv_increment_max_rate: float
    qv_violations: int
    n_paths: int

    @property
    def z_scores(self) -> np.ndarray:
        se = np.where(self.standard_error > 0, self.standard_error, np.inf)
        return self.mean / se


def martingale_values(fv, gen, paths, grid) -> np.ndarray:
    """Per-path martingale ``f(X_t) - f(X_0) - int_0^t Lf`` on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    M = np.empty((len(paths), len(grid)))
    for p, path in enumerate(paths):
        ends = np.append(path.times[1:], np.inf)
        overlap = np.clip(np.minimum(ends[:, None], grid[None, :]) - path.times[:, None], 0, None)
        integral = (gen[path.vertices][:, None] * overlap).sum(axis=0)
        M[p] = fv[path.positions(grid)] - fv[path.vertices[0]] - integral
    return M


def martingale_diagnostics(paths, f, kern: JumpKernel, grid: Sequence[float], qv_bound: float = 81.0) -> MartingaleReport:
    """Mean of the martingale on ``grid`` and pathwise bracket increments against ``qv_bound``."""
    grid = np.asarray(grid, dtype=float)
    fv = vertex_values(f, kern.graph)
    gen = discrete_generator(kern, fv)
    rate = quadratic_variation_rate(kern, fv)
    M = martingale_values(fv, gen, paths, grid)
    qv = np.empty((len(paths), len(grid)))
    for p, path in enumerate(paths):
        ends = np.append(path.times[1:], np.inf)
        overlap = np.clip(np.minimum(ends[:, None], grid[None, :]) - path.times[:, None], 0, None)
        qv[p] = (rate[path.vertices][:, None] * overlap).sum(axis=0)
    max_rate, violations = bracket_increment_check(qv, grid, qv_bound)
    n = len(paths)
    se = M.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(len(grid), np.inf)
    return MartingaleReport(grid, M.mean(axis=0), se, max_rate, violations, n)


def bracket_increment_check(qv: np.ndarray, grid: np.ndarray, bound: float) -> tuple[float, int]:
    """Largest ``(qv_t - qv_s) / (t - s)`` over grid pairs and the number of pairs exceeding ``bound``."""
    grid = np.asarray(grid, dtype=float)
    inc = qv[:, None, :] - qv[:, :, None]
    dt = grid[None, :] - grid[:, None]
    upper = dt > 0
    ratios = inc[:, upper] / dt[upper]
    tol = 1e-9 * bound
    violations = int(np.count_nonzero(inc[:, upper] > bound * dt[upper] + tol))
    return float(ratios.max(initial=0.0)), violations
