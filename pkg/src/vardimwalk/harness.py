"""Experiment driver: configuration, seeded chunked simulation and verdict reports.

Each experiment returns metric rows that carry their own tolerance and
verdict.  Simulations are split into fixed-size chunks of path indices;
walker ``i`` always uses stream ``i`` of the master seed and chunk results
are combined in chunk order, so reports do not depend on the worker count.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from functools import partial
from typing import Any, Callable

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .generator import (
    LocalStencil,
    canonical_test_functions,
    convergence_report,
    discrete_generator,
    projection_function,
    quadratic_function,
    quadratic_variation_rate,
    self_adjointness_gap,
    vertex_values,
)
from .lattice import (
    PLANE,
    ROD,
    STAR,
    LatticeGraph,
    LatticeParams,
    as_fraction,
    build_graphs,
    comparability_constant,
    project_f,
    projection_increments,
    rho_norm,
    star_degree_bound,
    star_mass,
    star_mass_bound,
    star_structure,
)
from .measures import (
    JumpKernel,
    detailed_balance_violation,
    integrate_domain,
    kernel,
    lebesgue_total,
    measures,
    star_identities,
)
from .walker import (
    CEMETERY,
    IntegralObserver,
    MarginalObserver,
    OccupationObserver,
    PathRecorder,
    run_walks,
    time_reverse,
    w_rho_at_most,
)

SCHEMA = "vardimwalk-report/1"
EXPERIMENTS = (
    "build",
    "balance",
    "measures",
    "geometry",
    "generator",
    "martingale",
    "occupation",
    "resurrection",
    "variance",
    "reversal",
    "tightness",
)
FORMATS = ("json", "csv")
CHUNK = 5000

_EXACT = {"epsilon": "1", "radius": "20", "rod_length": "20"}
_COMPACT = {"epsilon": "1/2", "radius": "9", "rod_length": "9"}
_SWEEP = {"epsilon": "5/8", "radius": "11", "rod_length": "11"}

DEFAULTS: dict[str, dict[str, Any]] = {
    "build": {"k": (3, 4, 5, 6, 7, 8), **_EXACT},
    "balance": {"k": (3, 4, 5, 6), **_EXACT},
    "measures": {"k": (3, 4, 5, 6), **_EXACT},
    "geometry": {"k": (3, 4, 5, 6), **_EXACT},
    "generator": {"k": (3, 4, 5, 6, 7), **_EXACT},
    "martingale": {"k": (4,), **_COMPACT, "paths": 100_000, "t_max": 1.0},
    "occupation": {"k": (4,), **_COMPACT, "paths": 10_000, "t_max": 50.0},
    "resurrection": {"k": (4,), **_COMPACT, "paths": 100_000, "t_max": 2.0},
    "variance": {"k": (5,), **_COMPACT, "paths": 20_000, "t_max": 1.0},
    "reversal": {"k": (4,), **_COMPACT, "paths": 20_000, "t_max": 1.0},
    "tightness": {
        "k": (3, 4, 5, 6),
        **_SWEEP,
        "paths": 100_000,
        "t_max": 1.0,
        "theta": 0.02,
        "delta": 0.3,
        "window": 0.5,
        "w_paths": 10_000,
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration (usage error)."""


# configuration ------------------------------------------------------------------------


def parse_k(value) -> tuple[int, ...]:
    """``4``, ``3-6`` or ``3,5,7`` to a sorted tuple of scale exponents."""
    if isinstance(value, int):
        return (value,)
    if isinstance(value, (tuple, list)):
        return tuple(sorted(int(v) for v in value))
    text = str(value).strip()
    try:
        if "-" in text:
            lo, hi = (int(p) for p in text.split("-"))
            ks = tuple(range(lo, hi + 1))
        else:
            ks = tuple(sorted(int(p) for p in text.split(",")))
    except ValueError as exc:
        raise ConfigError(f"cannot read k from {value!r}") from exc
    if not ks:
        raise ConfigError(f"empty k range {value!r}")
    return ks


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of one experiment; ``None`` fields take the experiment defaults."""

    experiment: str
    k: tuple[int, ...] | None = None
    epsilon: str | None = None
    radius: str | None = None
    rod_length: str | None = None
    paths: int | None = None
    t_max: float | None = None
    theta: float | None = None
    delta: float | None = None
    window: float | None = None
    w_paths: int | None = None
    seed: int = 20240611
    out: str | None = None
    format: str = "json"
    n_jobs: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.k is not None:
            object.__setattr__(self, "k", parse_k(self.k))

    def resolved(self) -> "ExperimentConfig":
        """Fill unset fields from the experiment defaults and validate."""
        defaults = DEFAULTS[self.experiment]
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, val in defaults.items():
            if values.get(key) is None:
                values[key] = val
        cfg = ExperimentConfig(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.paths is not None and self.paths < 1:
            raise ConfigError("paths must be at least 1")
        if self.w_paths is not None and self.w_paths < 1:
            raise ConfigError("w_paths must be at least 1")
        if self.t_max is not None and not self.t_max > 0:
            raise ConfigError("t_max must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.n_jobs == 0:
            raise ConfigError("n_jobs must be nonzero")
        if self.theta is not None and self.window is not None and not 0 < self.theta < self.window:
            raise ConfigError("need 0 < theta < window")
        # raises ParameterError naming the violated assumption
        for k in self.k or ():
            self.params(k)

    def params(self, k: int) -> LatticeParams:
        return LatticeParams(k, self.epsilon, self.radius, self.rod_length)

    def echo(self) -> dict:
        d = asdict(self)
        d["k"] = list(self.k) if self.k is not None else None
        d.pop("out")
        d.pop("n_jobs")
        return d

    @classmethod
    def from_file(cls, path: str, **overrides) -> "ExperimentConfig":
        """Read ``key = value`` lines (``#`` starts a comment); keyword overrides win."""
        values: dict[str, Any] = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key = value")
                key, val = (p.strip() for p in line.split("=", 1))
                values[key.replace("-", "_")] = val
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**_coerce(values))


_TYPES = {
    "paths": int,
    "w_paths": int,
    "seed": int,
    "n_jobs": int,
    "t_max": float,
    "theta": float,
    "delta": float,
    "window": float,
}


def _coerce(values: dict) -> dict:
    names = {f.name for f in fields(ExperimentConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    out = {}
    for key, val in values.items():
        if val is None:
            out[key] = None
        elif key in _TYPES:
            try:
                out[key] = _TYPES[key](val)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot read {val!r}") from exc
        elif key == "k":
            out[key] = parse_k(val)
        else:
            out[key] = str(val)
    return out


# reports ------------------------------------------------------------------------------


def _plain(value):
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


@dataclass
class Metric:
    name: str
    value: Any
    tolerance: str
    passed: bool
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "value": _plain(self.value),
            "tolerance": self.tolerance,
            "verdict": "pass" if self.passed else "fail",
            "note": self.note,
        }


@dataclass
class Report:
    experiment: str
    config: dict
    metrics: list[Metric] = field(default_factory=list)
    wall_clock: float = 0.0
    schema: str = SCHEMA

    @property
    def passed(self) -> bool:
        return all(m.passed for m in self.metrics)

    def as_dict(self, wall_clock: bool = True) -> dict:
        d = {
            "schema": self.schema,
            "experiment": self.experiment,
            "config": _plain(self.config),
            "metrics": [m.as_dict() for m in self.metrics],
            "verdict": "pass" if self.passed else "fail",
        }
        if wall_clock:
            d["wall_clock"] = round(self.wall_clock, 3)
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.as_dict(wall_clock), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "metric", "value", "tolerance", "verdict", "note"])
        for m in self.metrics:
            d = m.as_dict()
            w.writerow([self.experiment, d["name"], json.dumps(d["value"]), d["tolerance"], d["verdict"], d["note"]])
        return buf.getvalue()

    def render(self, fmt: str = "json") -> str:
        return self.to_json() if fmt == "json" else self.to_csv()

    def write(self, path: str, fmt: str = "json") -> None:
        with open(path, "w") as fh:
            fh.write(self.render(fmt))

    def metric(self, name: str) -> Metric:
        for m in self.metrics:
            if m.name == name:
                return m
        raise KeyError(name)


def run(config: ExperimentConfig) -> Report:
    """Run one experiment and write its report to ``config.out`` when set."""
    cfg = config.resolved()
    t0 = time.perf_counter()
    metrics = _RUNNERS[cfg.experiment](cfg)
    report = Report(cfg.experiment, cfg.echo(), metrics, time.perf_counter() - t0)
    if cfg.out:
        report.write(cfg.out, cfg.format)
    return report


# shared helpers -----------------------------------------------------------------------


def sample_starts(p: np.ndarray, n: int, seed: int, salt: int = 0) -> np.ndarray:
    """``n`` i.i.d. start vertices drawn from ``p``; the draw depends only on ``(seed, salt, n)``."""
    rng = np.random.default_rng([seed, salt, 0x5354])
    return rng.choice(len(p), size=n, p=p / p.sum()).astype(np.int64)


def _walk_chunk(kern, starts, t_max, seed, mode, killing, stream_base, make_observers, reduce, a, b):
    observers = make_observers()
    run_walks(
        kern, starts[a:b], t_max, seed, mode=mode, killing=killing,
        stream_ids=stream_base + np.arange(a, b, dtype=np.uint64), observers=observers,
    )
    results = [ob.result() for ob in observers]
    return reduce(results) if reduce is not None else results


def simulate_chunked(
    kern: JumpKernel,
    starts: np.ndarray,
    t_max: float,
    seed: int,
    make_observers: Callable[[], list],
    *,
    mode: str = "reflected",
    killing: str = "exit",
    stream_base: int = 0,
    reduce: Callable | None = None,
    n_jobs: int = 1,
    chunk: int = CHUNK,
) -> list:
    """Run walks in fixed chunks and return the per-chunk results in order.

    ``make_observers`` builds fresh observers per chunk; without ``reduce``
    the observer results of all chunks are concatenated along the path axis.
    """
    n = len(starts)
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    task = partial(_walk_chunk, kern, starts, t_max, seed, mode, killing, np.uint64(stream_base), make_observers, reduce)
    if n_jobs == 1 or len(bounds) == 1:
        parts = [task(a, b) for a, b in bounds]
    else:
        parts = Parallel(n_jobs=n_jobs)(delayed(task)(a, b) for a, b in bounds)
    if reduce is not None:
        return parts
    return [np.concatenate([p[i] for p in parts], axis=0) for i in range(len(parts[0]))]


def region_bins(graph: LatticeGraph, width: float = 1.0) -> tuple[np.ndarray, list[str]]:
    """Bins by distance to the star: plane shells and rod segments of ``width``.

    The star joins the first rod segment.  Exterior vertices get their own
    final bin, which walks confined to the domain never fill.
    """
    p = graph.params
    rn = graph.rho_norm
    n_plane = int(math.ceil(float(p.radius - p.epsilon) / width))
    n_rod = int(math.ceil(float(p.rod_length) / width))
    bins = np.empty(graph.n_vertices, dtype=np.int64)
    plane = graph.kind == PLANE
    bins[plane] = np.minimum((rn[plane] / width).astype(np.int64), n_plane - 1)
    rod = graph.kind != PLANE
    bins[rod] = n_plane + np.minimum((rn[rod] / width).astype(np.int64), n_rod - 1)
    bins[~graph.inside] = n_plane + n_rod
    labels = [f"plane[{i * width:g},{(i + 1) * width:g})" for i in range(n_plane)]
    labels += [f"rod[{i * width:g},{(i + 1) * width:g})" for i in range(n_rod)]
    return bins, labels + ["exterior"]


def histogram(bins_of_vertex: np.ndarray, vertices: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin counts of vertex samples; ``CEMETERY`` samples go to bin ``n_bins``."""
    v = np.asarray(vertices)
    b = np.where(v == CEMETERY, n_bins, bins_of_vertex[np.where(v == CEMETERY, 0, v)])
    return np.bincount(b, minlength=n_bins + 1)


def stationary_oracle(kern: JumpKernel) -> np.ndarray:
    """Stationary law of the walk on the domain from the balance equations ``pi Q = 0``.

    The weight of the first domain vertex is fixed to one, the remaining
    sparse system is solved by LU with one refinement step, and the result
    is normalized.
    """
    inside = np.flatnonzero(kern.graph.inside)
    n = kern.graph.n_vertices
    P = sparse.csr_matrix((kern.probs, kern.indices, kern.indptr), shape=(n, n))[inside][:, inside]
    A = (P - sparse.identity(len(inside), format="csr")).T.tocsc()
    B = A[1:, 1:].tocsc()
    rhs = -A[1:, 0].toarray().ravel()
    lu = splu(B)
    x = lu.solve(rhs)
    x += lu.solve(rhs - B @ x)
    pi = np.concatenate([[1.0], x])
    out = np.zeros(n)
    out[inside] = pi / pi.sum()
    return out


def _tv(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def _strictly_decreasing(seq) -> bool:
    return all(b < a for a, b in zip(seq[:-1], seq[1:]))


def _timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def _info(name, value, note="") -> Metric:
    return Metric(name, value, "reported", True, note)


# exact experiments --------------------------------------------------------------------


def _build(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    masses = []
    for k in cfg.k:
        p = cfg.params(k)
        ss, dt = _timed(star_structure, p)
        bound = star_degree_bound(p)
        mass = star_mass(p, ss.plane_degree)
        masses.append(mass)
        out += [
            Metric(f"k={k} star rod neighbors", list(ss.rod_neighbors), "== [1]", list(ss.rod_neighbors) == [1]),
            Metric(f"k={k} star plane degree", ss.plane_degree, f"<= {bound}", ss.plane_degree <= bound),
            Metric(f"k={k} star mass", mass, f"<= {star_mass_bound(p)}", mass <= star_mass_bound(p)),
            Metric(f"k={k} star enumeration seconds", dt, "< 1", dt < 1.0),
        ]
    out.append(Metric("star mass strictly decreasing", [str(m) for m in masses], "strict", _strictly_decreasing(masses)))
    k0 = cfg.k[0]
    g = build_graphs(cfg.params(k0))
    ss = star_structure(cfg.params(k0))
    star_nbrs = g.neighbors(0, "full")
    indptr, indices = g.full_indptr, g.full_indices
    rows = np.repeat(np.arange(g.n_vertices), np.diff(indptr))
    per_vertex = np.bincount(rows[indices == 0], minlength=g.n_vertices)
    inside = np.flatnonzero(g.inside)
    A = g.adjacency("reflected")[inside][:, inside]
    n_comp, _ = connected_components(A, directed=False)
    rod_nbrs = star_nbrs[g.kind[star_nbrs] == ROD]
    out += [
        Metric(f"k={k0} graph star degree equals enumeration", [int(g.degree[0]), ss.degree], "equal", int(g.degree[0]) == ss.degree),
        Metric(f"k={k0} graph star rod neighbor", [int(g.ij[v, 0]) for v in rod_nbrs], "== [1]", [int(g.ij[v, 0]) for v in rod_nbrs] == [1]),
        Metric(f"k={k0} max star edges per vertex", int(per_vertex[1:].max(initial=0)), "<= 1", int(per_vertex[1:].max(initial=0)) <= 1),
        Metric(f"k={k0} domain graph components", int(n_comp), "== 1", n_comp == 1),
        _info(f"k={k0} vertices", int(g.n_vertices)),
    ]
    return out


def _balance(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    for k in cfg.k:
        g, build_s = _timed(build_graphs, cfg.params(k))
        meas = measures(g)
        S = 2**k
        for variant in ("full", "reflected"):
            kern = kernel(g, variant)
            rep, dt = _timed(detailed_balance_violation, g, kern, meas)
            row_ok = bool(np.all(kern.row_sums_exact()))
            ids = star_identities(g, kern, meas)
            tag = f"k={k} {variant}"
            out += [
                Metric(f"{tag} exact violations", rep.exact_violations, "== 0", rep.exact_violations == 0),
                Metric(f"{tag} float relative violation", rep.max_relative_violation, "< 1e-12", rep.max_relative_violation < 1e-12),
                Metric(f"{tag} plane edge constant", rep.plane_constant, "== 1/4 on every plane edge", rep.plane_constant_ok and rep.plane_constant == Fraction(1, 4)),
                Metric(f"{tag} rod edge constant", rep.rod_constant, f"== {Fraction(S, 2)} on every rod edge", rep.rod_constant_ok and rep.rod_constant == Fraction(S, 2)),
                Metric(f"{tag} star identities", {"rod": ids["rod"], "plane": sorted(ids["plane"])}, f"rod == {Fraction(S, 2)}, plane == {{1/4}}", ids["rod"] == Fraction(S, 2) and ids["plane"] == {Fraction(1, 4)}),
                Metric(f"{tag} row sums exactly 1", row_ok, "true", row_ok),
                Metric(f"{tag} balance check seconds", dt, "< 1", dt < 1.0),
            ]
        out.append(_info(f"k={k} graph build seconds", build_s, "graph construction is timed separately from the balance check"))
    return out


def weak_convergence_rows(cfg: ExperimentConfig) -> list[Metric]:
    p0 = cfg.params(cfg.k[0])
    functions = [("one", lambda pts: np.ones(len(pts)))] + [(f.name, f.values) for f in canonical_test_functions(p0)]
    refs = {name: (lebesgue_total(p0) if name == "one" else integrate_domain(f, p0)) for name, f in functions}
    errors = {name: [] for name, _ in functions}
    non_regular = []
    for k in cfg.k:
        g = build_graphs(cfg.params(k))
        meas = measures(g)
        mbar = meas.values("reflected") * g.inside
        for name, f in functions:
            errors[name].append(abs(float(np.dot(f(g.coords), mbar)) - refs[name]))
        total = meas.total("reflected")
        non_regular.append(float(meas.total("reflected", g.inside & ~g.regular) / total))
    out = []
    for name, errs in errors.items():
        # below the quadrature tolerance an error is indistinguishable from zero
        floor = 1e-8 * max(abs(refs[name]), 1.0)
        ok = all(b < a or (a <= floor and b <= floor) for a, b in zip(errs[:-1], errs[1:]))
        out.append(Metric(f"weak convergence error {name}", errs, f"decreasing in k (values below {floor:.1e} count as zero)", ok))
    out.append(Metric("normalized non-regular mass", non_regular, "strictly decreasing, last < 0.05", _strictly_decreasing(non_regular) and non_regular[-1] < 0.05))
    return out


def _measures(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    masses = []
    for k in range(3, 9):
        p = cfg.params(k)
        ss = star_structure(p)
        m = star_mass(p, ss.plane_degree)
        masses.append(m)
        out.append(Metric(f"k={k} star mass", m, f"<= {star_mass_bound(p)}", m <= star_mass_bound(p)))
    out.append(Metric("star mass strictly decreasing over k=3..8", [str(m) for m in masses], "strict", _strictly_decreasing(masses)))
    out += weak_convergence_rows(cfg)
    g = build_graphs(cfg.params(cfg.k[0]))
    meas = measures(g)
    positive = bool(np.all(meas.numerator("full")[g.inside] > 0) and np.all(meas.numerator("reflected")[g.inside] > 0))
    out.append(Metric(f"k={cfg.k[0]} measures positive on the domain", positive, "true", positive))
    return out


def _geometry(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    t0 = time.perf_counter()
    constants = {}
    for k in cfg.k:
        g = build_graphs(cfg.params(k))
        inc = projection_increments(g)
        out.append(Metric(f"k={k} max plane-edge projection step / mesh", inc["plane"], "<= 9", inc["plane"] <= 9.0, "the proof's constant is 3"))
        out.append(Metric(f"k={k} max step / mesh at star and rod edges", [inc["star"], inc["rod"]], "<= 9", max(inc["star"], inc["rod"]) <= 9.0))
        worst = max(inc["plane"], inc["star"], inc["rod"])
        out.append(_info(f"k={k} all edge steps within 3 mesh units", bool(worst <= 3.0), f"{inc['edges']} edges"))
        if k in cfg.k[:2]:
            constants[k] = comparability_constant(g)
        if k == cfg.k[0]:
            eps = float(as_fraction(cfg.epsilon))
            inside = g.inside
            c = g.coords[inside]
            rng = np.random.default_rng([cfg.seed, 0x4745])
            r = float(as_fraction(cfg.epsilon)) + rng.random(5000) * float(cfg.params(k).radius - cfg.params(k).epsilon)
            a = rng.random(5000) * 2 * np.pi
            sampled = np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(5000)])
            rods = np.column_stack([np.zeros(1000), np.zeros(1000), rng.random(1000) * float(as_fraction(cfg.rod_length)) + 1e-9])
            pts = np.vstack([c, sampled, rods, np.zeros((1, 3))])
            lhs = rho_norm(pts, eps)
            rhs = np.linalg.norm(project_f(pts, eps), axis=1)
            err = float(np.max(np.abs(lhs - rhs) / np.maximum(lhs, 1e-300)))
            out.append(Metric("norm equals projected norm (relative error)", err, "< 1e-12", err < 1e-12, f"{len(pts)} points"))
    elapsed = time.perf_counter() - t0
    ks = sorted(constants)
    for k in ks:
        out.append(_info(f"k={k} comparability constant", constants[k]))
    if len(ks) >= 2:
        c0, c1 = constants[ks[0]]["constant"], constants[ks[1]]["constant"]
        rel = abs(c1 / c0 - 1)
        out.append(Metric(f"comparability constant stability k={ks[0]} vs k={ks[1]}", rel, "<= 0.10", rel <= 0.10))
    out.append(Metric("geometry seconds", elapsed, "< 10", elapsed < 10.0, "includes graph construction"))
    return out


def _generator(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    p0 = cfg.params(cfg.k[0])
    t0 = time.perf_counter()
    for f in canonical_test_functions(p0):
        rep = convergence_report(f, cfg.k, p0)
        out.append(Metric(f"{f.name} log2 error slope", rep.slope, "in [-1.3, -0.7]", -1.3 <= rep.slope <= -0.7))
        out.append(_info(f"{f.name} sup errors", rep.sup_error))
        out.append(_info(f"{f.name} error constant", rep.error_constant, "max of error * 2^k"))
        spread = max(rep.max_abs_generator) / min(rep.max_abs_generator)
        out.append(Metric(f"{f.name} max |generator| over k", rep.max_abs_generator, "max/min over k <= 1.5", spread <= 1.5))
    elapsed = time.perf_counter() - t0
    out.append(Metric("convergence sweep seconds", elapsed, "< 30", elapsed < 30.0))
    quad = quadratic_function()
    worst = 0.0
    for k in cfg.k[:3]:
        p = cfg.params(k)
        st = LocalStencil(p)
        g = build_graphs(p)
        # stencils reaching the star leave the quadratic region
        sel = g.regular & ~g.star_adjacent
        ij = g.ij[sel & (g.kind == PLANE)]
        n = g.ij[sel & (g.kind == ROD), 0]
        worst = max(
            worst,
            float(np.max(np.abs(st.plane(ij, quad.values) - quad.generator(st._plane_points(ij))))),
            float(np.max(np.abs(st.rod(n, quad.values) - quad.generator(st._rod_points(n))))),
        )
    out.append(Metric("quadratic stencil error on regular vertices away from the star", worst, "== 0", worst == 0.0, f"k in {list(cfg.k[:3])}"))
    g = build_graphs(p0)
    meas = measures(g)
    kern = kernel(g, "reflected")
    fs = canonical_test_functions(p0)
    for i in range(len(fs)):
        for j in range(i + 1, len(fs)):
            gap = self_adjointness_gap(kern, meas, fs[i].values, fs[j].values, exact=True)
            out.append(Metric(f"self-adjointness gap {fs[i].name}/{fs[j].name}", gap, "== 0 exactly", gap == 0))
    return out


# Monte Carlo experiments --------------------------------------------------------------


def _setup(cfg: ExperimentConfig, k: int, variant: str = "reflected"):
    g = build_graphs(cfg.params(k))
    return g, measures(g), kernel(g, variant)


def _martingale_observers(rates, grid):
    return [MarginalObserver(grid), IntegralObserver(rates, grid)]


def _martingale_reduce(fvals, n_f, grid, bound, results):
    pos, integ = results
    fx = fvals[pos]  # (n, G, F)
    M = fx - fx[:, :1, :] - integ[:, :, :n_f]
    qv = integ[:, :, n_f:]
    inc = qv[:, None, :, :] - qv[:, :, None, :]
    dt = grid[None, :] - grid[:, None]
    upper = dt > 0
    rates = inc[:, upper, :] / dt[upper][None, :, None]
    viol = inc[:, upper, :] > bound * dt[upper][None, :, None] + 1e-9 * bound
    return M.sum(axis=0), (M * M).sum(axis=0), rates.max(axis=(0, 1)), viol.sum(axis=(0, 1)), len(M)


def _martingale(cfg: ExperimentConfig) -> list[Metric]:
    k = cfg.k[0]
    g, meas, kern = _setup(cfg, k)
    eps = float(as_fraction(cfg.epsilon))
    funcs = [(f.name, f.values) for f in canonical_test_functions(cfg.params(k))]
    funcs += [(f"projection_{i + 1}", projection_function(i, eps)) for i in range(3)]
    fvals = np.column_stack([vertex_values(f, g) for _, f in funcs])
    gens = np.column_stack([discrete_generator(kern, fvals[:, i]) for i in range(len(funcs))])
    qvr = np.column_stack([quadratic_variation_rate(kern, fvals[:, i]) for i in range(len(funcs))])
    grid = np.linspace(0.0, cfg.t_max, 9)
    starts = sample_starts(meas.normalized("reflected"), cfg.paths, cfg.seed)
    parts = simulate_chunked(
        kern, starts, cfg.t_max, cfg.seed,
        partial(_martingale_observers, np.column_stack([gens, qvr]), grid),
        reduce=partial(_martingale_reduce, fvals, len(funcs), grid, 81.0),
        n_jobs=cfg.n_jobs,
    )
    s1 = sum(p[0] for p in parts)
    s2 = sum(p[1] for p in parts)
    max_rate = np.max([p[2] for p in parts], axis=0)
    viol = sum(p[3] for p in parts)
    n = sum(p[4] for p in parts)
    mean = s1 / n
    var = (s2 - n * mean * mean) / (n - 1)
    se = np.sqrt(np.maximum(var, 0.0) / n)
    out = []
    for i, (name, _) in enumerate(funcs):
        m, s = mean[-1, i], se[-1, i]
        z = 0.0 if s == 0 else m / s
        out.append(Metric(f"{name} mean of M at t={cfg.t_max:g}", {"mean": m, "se": s, "z": z}, "|z| <= 3", abs(z) <= 3.0))
    for i, (name, _) in enumerate(funcs):
        if name.startswith("projection"):
            out.append(Metric(f"{name} bracket increments per unit time", max_rate[i], "<= 81 on every path and grid pair", int(viol[i]) == 0, f"{int(viol[i])} violations"))
        else:
            out.append(_info(f"{name} max bracket rate", max_rate[i]))
    out.append(_info("paths", int(n)))
    return out


def _occupation_observers(bins, n_bins):
    return [OccupationObserver(bins, n_bins)]


def _occupation(cfg: ExperimentConfig) -> list[Metric]:
    k = cfg.k[0]
    g, meas, kern = _setup(cfg, k)
    target = meas.normalized("reflected")
    pi = stationary_oracle(kern)
    oracle_gap = float(np.max(np.abs(pi - target)) / target.max())
    bins, labels = region_bins(g)
    n_bins = len(labels) - 1
    starts = sample_starts(target, cfg.paths, cfg.seed)
    (occ,) = simulate_chunked(kern, starts, cfg.t_max, cfg.seed, partial(_occupation_observers, bins, n_bins), n_jobs=cfg.n_jobs)
    frac = occ[:, :n_bins] / cfg.t_max
    expected = np.bincount(bins[g.inside], weights=target[g.inside], minlength=n_bins)[:n_bins]
    # per-path fractions are i.i.d. vectors summing to one: drop one bin and
    # compare the mean with the expected vector using the sample covariance
    keep = np.arange(n_bins - 1)
    d = frac.mean(axis=0)[keep] - expected[keep]
    cov = np.cov(frac[:, keep], rowvar=False)
    stat = float(len(frac) * d @ np.linalg.solve(cov, d))
    pval = float(stats.chi2.sf(stat, len(keep)))
    return [
        Metric("stationary solve vs normalized domain measure (relative)", oracle_gap, "< 1e-10", oracle_gap < 1e-10),
        Metric("occupation chi-square p-value", pval, "> 0.01", pval > 0.01, f"statistic {stat:.2f} on {len(keep)} degrees of freedom"),
        _info("occupation by bin", dict(zip(labels[:n_bins], frac.mean(axis=0).tolist()))),
        _info("expected by bin", dict(zip(labels[:n_bins], expected.tolist()))),
    ]


def _marginal_observers(times):
    return [MarginalObserver(times)]


def _resurrection(cfg: ExperimentConfig) -> list[Metric]:
    k = cfg.k[0]
    g, meas, refl = _setup(cfg, k)
    full = kernel(g, "full")
    times = [t for t in (0.5, 1.0, 2.0) if t <= cfg.t_max] or [cfg.t_max]
    p = meas.normalized("reflected")
    n = cfg.paths
    bins, labels = region_bins(g)
    nb = len(labels)
    runs = {}
    for salt, (name, kern, mode) in enumerate((("reflected", refl, "reflected"), ("resurrected", full, "resurrected"))):
        starts = sample_starts(p, n, cfg.seed, salt)
        (pos,) = simulate_chunked(
            kern, starts, cfg.t_max, cfg.seed, partial(_marginal_observers, times),
            mode=mode, stream_base=salt * n, n_jobs=cfg.n_jobs,
        )
        runs[name] = pos
    out = []
    boundary = g.boundary & g.inside
    for q, t in enumerate(times):
        a = histogram(bins, runs["reflected"][:, q], nb)[:nb] / n
        b = histogram(bins, runs["resurrected"][:, q], nb)[:nb] / n
        se = np.sqrt(a * (1 - a) / n + b * (1 - b) / n)
        z = np.where(se > 0, (b - a) / np.where(se > 0, se, 1), 0.0)
        worst = int(np.argmax(np.abs(z)))
        out.append(Metric(f"t={t:g} max |z| over bins", float(np.abs(z).max()), "<= 3", bool(np.abs(z).max() <= 3.0), f"largest in {labels[worst]}"))
        fa = float(boundary[runs["reflected"][:, q]].mean())
        fb = float(boundary[runs["resurrected"][:, q]].mean())
        zb = (fb - fa) / math.sqrt((fa * (1 - fa) + fb * (1 - fb)) / n)
        out.append(_info(f"t={t:g} boundary-vertex fraction reflected/resurrected", [fa, fb], f"z = {zb:.1f}"))
    mfull = meas.values("full") * g.inside
    mbar = meas.values("reflected") * g.inside
    predicted = float((mfull[boundary].sum() / mfull.sum()) / (mbar[boundary].sum() / mbar.sum()))
    out.append(_info("stationary boundary mass ratio of the resurrected walk", predicted, "exit killing rejects the jump, so boundary vertices are held longer"))
    return out


def variance_profile(start: np.ndarray, positions: np.ndarray, survived: np.ndarray, times) -> dict:
    """Displacement variance per unit time among walkers that stayed in their window.

    ``start`` and ``positions`` are embedded coordinates of shape ``(n, d)``
    and ``(n, len(times), d)``; ``survived`` masks walkers that never left
    the window.  Returns per-time variance ratios, standard errors and the
    surviving count; too few survivors give NaN.
    """
    times = np.asarray(times, dtype=float)
    disp = positions[survived] - start[survived][:, None, :]
    m = len(disp)
    if m < 2:
        nan = np.full((len(times), positions.shape[2]), np.nan)
        return {"rate": nan, "se": nan, "survivors": m}
    var = disp.var(axis=0, ddof=1)
    # standard error of a sample variance through the fourth central moment
    c = disp - disp.mean(axis=0)
    m4 = (c**4).mean(axis=0)
    se = np.sqrt(np.maximum(m4 - var**2 * (m - 3) / (m - 1), 0.0) / m)
    return {"rate": var / times[:, None], "se": se / times[:, None], "survivors": m}


def _variance_observers(times, window_bins):
    return [MarginalObserver(times), OccupationObserver(window_bins, 2)]


def _variance(cfg: ExperimentConfig) -> list[Metric]:
    k = cfg.k[0]
    p = cfg.params(k)
    g, _, kern = _setup(cfg, k)
    h = Fraction(1, 2**k)
    rod_rate = h * h * p.speed
    plane_rate = h * h * p.speed / 2
    out = [
        Metric("rod variance rate, exact", rod_rate, "== 1", rod_rate == 1),
        Metric("plane per-coordinate variance rate, exact", plane_rate, "== 1/2", plane_rate == Fraction(1, 2)),
        Metric("plane/rod ratio, exact", plane_rate / rod_rate, "== 1/2", plane_rate / rod_rate == Fraction(1, 2)),
    ]
    times = np.array([t for t in (cfg.t_max / 4, cfg.t_max / 2, cfg.t_max)])
    eps, R, L = float(p.epsilon), float(p.radius), float(p.rod_length)
    rn = g.rho_norm
    coords = g.coords
    s0 = round(L / 2 * 2**k)
    x0 = round((eps + R) / 2 * 2**k)
    rod_start = int(np.flatnonzero((g.kind == ROD) & (g.ij[:, 0] == s0))[0])
    plane_start = int(np.flatnonzero((g.kind == PLANE) & (g.ij[:, 0] == x0) & (g.ij[:, 1] == 0))[0])
    rates = {}
    for salt, (name, start, half_width) in enumerate(
        (("rod", rod_start, min(L / 2, L - L / 2) - 1.0), ("plane", plane_start, min(x0 / 2**k - eps, R - x0 / 2**k) - 0.5))
    ):
        centre = coords[start]
        win = np.linalg.norm(coords - centre, axis=1) < half_width
        win &= (g.kind == g.kind[start]) & g.inside
        window_bins = np.where(win, 0, 1)
        starts = np.full(cfg.paths, start, dtype=np.int64)
        pos, occ = simulate_chunked(
            kern, starts, cfg.t_max, cfg.seed, partial(_variance_observers, times, window_bins),
            stream_base=salt * cfg.paths, n_jobs=cfg.n_jobs,
        )
        survived = occ[:, 1] == 0
        dims = [2] if name == "rod" else [0, 1]
        prof = variance_profile(centre[dims][None, :].repeat(len(pos), 0), coords[pos][:, :, dims], survived, times)
        rates[name] = prof
        out.append(_info(f"{name} surviving paths", prof["survivors"], f"window half-width {half_width:g}"))
    target = {"rod": 1.0, "plane": 0.5}
    for name in ("rod", "plane"):
        r = rates[name]["rate"][-1]
        rel = np.abs(r / target[name] - 1)
        out.append(Metric(f"{name} variance rate at t={cfg.t_max:g}", r, f"within 5% of {target[name]}", bool(np.all(rel <= 0.05)), f"se {rates[name]['se'][-1].tolist()}"))
        out.append(_info(f"{name} variance rate profile", rates[name]["rate"], f"times {times.tolist()}"))
    ratio = float(rates["plane"]["rate"][-1].mean() / rates["rod"]["rate"][-1][0])
    out.append(Metric("plane/rod variance ratio", ratio, "within 5% of 1/2", abs(ratio / 0.5 - 1) <= 0.05))
    return out


def _chi2_homogeneity(a: np.ndarray, b: np.ndarray, min_count: int = 10) -> tuple[float, int, float]:
    keep = (a + b) >= min_count
    table = np.vstack([a[keep], b[keep]])
    rest = np.array([[a[~keep].sum()], [b[~keep].sum()]])
    if rest.sum() > 0:
        table = np.hstack([table, rest])
    table = table[:, table.sum(axis=0) > 0]
    stat, pval, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), int(dof), float(pval)


def _reversal(cfg: ExperimentConfig) -> list[Metric]:
    k = cfg.k[0]
    g, meas, kern = _setup(cfg, k)
    T = cfg.t_max
    s, t = 0.2 * T, 0.5 * T
    starts = sample_starts(meas.normalized("reflected"), cfg.paths, cfg.seed)
    rec = PathRecorder()
    run_walks(kern, starts, T, cfg.seed, observers=[rec])
    paths = rec.paths(k)
    bins, labels = region_bins(g)
    nb = len(labels)
    probe = np.linspace(0.0, T, 23)[1:-1] + T / 97
    fwd = np.array([p.positions([s, t]) for p in paths[0::2]])
    bad_involution = 0
    rev = []
    for p in paths[1::2]:
        r = time_reverse(p, T)
        rev.append(r.positions([s, t]))
        rr = time_reverse(r, T)
        if not np.array_equal(rr.positions(probe), p.positions(probe)):
            bad_involution += 1
    rev = np.array(rev)
    joint_f = np.bincount(bins[fwd[:, 0]] * nb + bins[fwd[:, 1]], minlength=nb * nb)
    joint_r = np.bincount(bins[rev[:, 0]] * nb + bins[rev[:, 1]], minlength=nb * nb)
    stat, dof, pval = _chi2_homogeneity(joint_f, joint_r)
    m_stat, m_dof, m_pval = _chi2_homogeneity(np.bincount(bins[fwd[:, 0]], minlength=nb), np.bincount(bins[rev[:, 0]], minlength=nb))
    return [
        Metric("double reversal restores the path", bad_involution, "== 0 mismatches", bad_involution == 0, f"{len(paths) // 2} paths probed at {len(probe)} times"),
        Metric(f"two-time joint at ({s:g}, {t:g}) forward vs reversed", pval, "p > 0.01", pval > 0.01, f"chi-square {stat:.2f} on {dof} dof"),
        Metric(f"marginal at {s:g} forward vs reversed", m_pval, "p > 0.01", m_pval > 0.01, f"chi-square {m_stat:.2f} on {m_dof} dof"),
    ]


def _exceed_fraction(kern, graph, starts, seed, theta, window, delta, stream_base, a, b):
    rec = PathRecorder()
    run_walks(kern, starts[a:b], window + theta, seed, stream_ids=stream_base + np.arange(a, b, dtype=np.uint64), observers=[rec])
    return sum(not w_rho_at_most(p, graph, theta, window, delta) for p in rec.paths(graph.k))


def modulus_exceedance(cfg: ExperimentConfig, k: int) -> tuple[float, float]:
    """Fraction of stationary-start walks whose partition modulus exceeds ``delta``, with its standard error."""
    g, meas, kern = _setup(cfg, k)
    n = cfg.w_paths
    starts = sample_starts(meas.normalized("reflected"), n, cfg.seed, 100 + k)
    bounds = [(a, min(a + 2000, n)) for a in range(0, n, 2000)]
    task = partial(_exceed_fraction, kern, g, starts, cfg.seed, cfg.theta, cfg.window, cfg.delta, np.uint64((k << 40) + (1 << 39)))
    if cfg.n_jobs == 1:
        counts = [task(a, b) for a, b in bounds]
    else:
        counts = Parallel(n_jobs=cfg.n_jobs)(delayed(task)(a, b) for a, b in bounds)
    P = sum(counts) / n
    return P, math.sqrt(P * (1 - P) / n)


def marginal_convergence(cfg: ExperimentConfig, t_list=(0.5, 1.0), n_boot: int = 400) -> dict:
    """Killed-walk marginals binned by distance to the star, compared between consecutive k.

    Each scale draws its own i.i.d. starts from its domain measure.  Returns
    the histograms, total-variation distances between consecutive scales and
    parametric-bootstrap standard errors of the distances and of their
    successive differences.
    """
    t_list = [t for t in t_list if t <= cfg.t_max] or [cfg.t_max]
    hists = []
    labels = None
    for k in cfg.k:
        g, meas, full = _setup(cfg, k, "full")
        bins, labels = region_bins(g)
        nb = len(labels)
        starts = sample_starts(meas.normalized("reflected"), cfg.paths, cfg.seed, k)
        (pos,) = simulate_chunked(
            full, starts, max(t_list), cfg.seed, partial(_marginal_observers, t_list),
            mode="killed", killing="boundary", stream_base=k << 40, n_jobs=cfg.n_jobs,
        )
        # bins: domain regions, exterior (unused) and the cemetery
        hists.append(np.stack([histogram(bins, pos[:, q], nb) for q in range(len(t_list))]))
    hists = np.array(hists, dtype=float) / cfg.paths  # (K, T, B)
    K = len(cfg.k)
    dist = np.array([[_tv(hists[i, q], hists[i + 1, q]) for i in range(K - 1)] for q in range(len(t_list))])
    rng = np.random.default_rng([cfg.seed, 0xB007])
    boot = np.empty((n_boot, len(t_list), K - 1))
    for r in range(n_boot):
        sample = np.array([[rng.multinomial(cfg.paths, hists[i, q]) / cfg.paths for q in range(len(t_list))] for i in range(K)])
        boot[r] = [[_tv(sample[i, q], sample[i + 1, q]) for i in range(K - 1)] for q in range(len(t_list))]
    dist_se = boot.std(axis=0, ddof=1)
    diff_se = np.diff(boot, axis=2).std(axis=0, ddof=1)
    return {
        "times": t_list,
        "labels": labels + ["cemetery"],
        "histograms": hists,
        "distances": dist,
        "distance_se": dist_se,
        "difference_se": diff_se,
        "cemetery_mass": hists[:, :, -1],
    }


def _tightness(cfg: ExperimentConfig) -> list[Metric]:
    out = []
    P, SE = [], []
    for k in cfg.k:
        p, se = modulus_exceedance(cfg, k)
        P.append(p)
        SE.append(se)
    label = f"P[w > {cfg.delta:g}] at theta={cfg.theta:g}, T={cfg.window:g}"
    out.append(_info(f"{label} by k", {"k": list(cfg.k), "p": P, "se": SE}))
    diffs = [(P[i + 1] - P[i], math.hypot(SE[i], SE[i + 1])) for i in range(len(P) - 1)]
    ok = all(d <= 3 * s for d, s in diffs)
    out.append(Metric(f"{label} decreasing in k", [d for d, _ in diffs], "no increase beyond 3 standard errors", ok))
    out.append(_info(f"{label} strictly decreasing in k", _strictly_decreasing(P), "point estimates only"))
    mc = marginal_convergence(cfg)
    for q, t in enumerate(mc["times"]):
        d = mc["distances"][q]
        dse = mc["difference_se"][q]
        inc = np.diff(d)
        ok = bool(np.all(inc <= 3 * dse))
        out.append(Metric(f"t={t:g} killed marginal distances between consecutive k", d, "no increase beyond 3 standard errors", ok, f"se {mc['distance_se'][q].tolist()}"))
        out.append(_info(f"t={t:g} killed marginal distances strictly decreasing", _strictly_decreasing(d), "point estimates only"))
        cem = mc["cemetery_mass"][:, q]
        out.append(_info(f"t={t:g} cemetery mass by k", cem))
    if len(mc["times"]) > 1:
        cem = mc["cemetery_mass"]
        mono = bool(np.all(np.diff(cem, axis=1) >= 0))
        out.append(Metric("cemetery mass nondecreasing in t", cem, "nondecreasing", mono))
    return out


_RUNNERS: dict[str, Callable[[ExperimentConfig], list[Metric]]] = {
    "build": _build,
    "balance": _balance,
    "measures": _measures,
    "geometry": _geometry,
    "generator": _generator,
    "martingale": _martingale,
    "occupation": _occupation,
    "resurrection": _resurrection,
    "variance": _variance,
    "reversal": _reversal,
    "tightness": _tightness,
}
