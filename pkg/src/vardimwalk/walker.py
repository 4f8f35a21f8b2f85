"""Continuous-time walks on the lattice graphs and path utilities.

The simulation engine advances a batch of walkers in lock-step.  Walker ``p``
consumes the random block ``(seed, stream_ids[p], step)`` at its ``step``-th
clock ring, so results do not depend on batching.  Observers receive every
holding segment ``[t0, t1)`` and can accumulate statistics without storing
paths.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .lattice import ROD, STAR, LatticeGraph, rho_to_boundary
from .measures import JumpKernel, KernelSampler
from .rng import RngStream, hold_and_choice

CEMETERY = -1
MODES = ("reflected", "killed", "resurrected")
KILLING = ("exit", "boundary")


@dataclass
class Path:
    """Right-continuous piecewise-constant trajectory.

    ``vertices[l]`` is occupied on ``[times[l], times[l+1])``; the last vertex
    until ``absorption_time`` (killed paths) or the horizon.
    """

    times: np.ndarray
    vertices: np.ndarray
    horizon: float
    k: int
    absorption_time: float = math.inf
    absorbed_at: int = CEMETERY
    resurrections: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def absorbed(self) -> bool:
        return self.absorption_time <= self.horizon

    @property
    def n_jumps(self) -> int:
        return len(self.times) - 1

    def positions(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = self.vertices[np.clip(idx, 0, None)]
        return np.where(t >= self.absorption_time, CEMETERY, out)

    def position(self, t: float) -> int:
        return int(self.positions(np.array([t]))[0])

    def jumps_before(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="left")) - 1

    def occupation(self) -> dict[int, float]:
        """Time spent in each vertex up to the horizon; the cemetery is keyed by -1."""
        end = min(self.horizon, self.absorption_time)
        keep = self.times < end
        t = self.times[keep]
        durations = np.diff(np.append(t, end))
        ids, inv = np.unique(self.vertices[keep], return_inverse=True)
        out = dict(zip(ids.tolist(), np.bincount(inv, weights=durations).tolist()))
        if self.absorbed:
            out[CEMETERY] = self.horizon - self.absorption_time
        return out

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "vertex_id"])
        for t, v in zip(self.times.tolist(), self.vertices.tolist()):
            w.writerow([repr(t), v])
        if self.absorbed:
            w.writerow([repr(self.absorption_time), CEMETERY])

    def check_adjacency(self, graph: LatticeGraph, variant: str = "full") -> bool:
        indptr = graph.full_indptr if variant == "full" else graph.reflected_indptr
        indices = graph.full_indices if variant == "full" else graph.reflected_indices
        for a, b in zip(self.vertices[:-1].tolist(), self.vertices[1:].tolist()):
            if b not in indices[indptr[a] : indptr[a + 1]]:
                return False
        return True


# observers ------------------------------------------------------------------------


class Observer:
    """Receives holding segments of a batch; ``result`` has a leading path axis."""

    def start(self, n_paths: int, t_max: float) -> None:
        self.n_paths, self.t_max = n_paths, t_max

    def segment(self, idx, vertex, t0, t1) -> None:
        pass

    def jump(self, idx, time, vertex) -> None:
        pass

    def absorb(self, idx, time, vertex) -> None:
        pass

    def resurrect(self, idx, time) -> None:
        pass

    def result(self):
        raise NotImplementedError


class MarginalObserver(Observer):
    """Vertex occupied at each query time (``CEMETERY`` once absorbed)."""

    def __init__(self, times: Sequence[float]):
        self.times = np.asarray(times, dtype=float)

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        if np.any(self.times > t_max) or np.any(self.times < 0):
            raise ValueError("marginal times must lie in [0, t_max]")
        self.out = np.full((n_paths, len(self.times)), CEMETERY, dtype=np.int64)

    def segment(self, idx, vertex, t0, t1):
        last = t1 >= self.t_max
        for q, tq in enumerate(self.times):
            hit = (t0 <= tq) & ((tq < t1) | last)
            self.out[idx[hit], q] = vertex[hit]

    def result(self):
        return self.out


class OccupationObserver(Observer):
    """Time spent in each bin per path; bin ``n_bins`` collects the cemetery."""

    def __init__(self, bin_of_vertex: np.ndarray, n_bins: int):
        self.bins = np.asarray(bin_of_vertex, dtype=np.int64)
        self.n_bins = n_bins

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        self.out = np.zeros((n_paths, self.n_bins + 1))

    def segment(self, idx, vertex, t0, t1):
        self.out[idx, self.bins[vertex]] += t1 - t0

    def result(self):
        self.out[:, -1] = self.t_max - self.out[:, :-1].sum(axis=1)
        np.maximum(self.out[:, -1], 0.0, out=self.out[:, -1])
        return self.out


class IntegralObserver(Observer):
    """``int_0^g rate(X_s) ds`` at each grid time ``g`` for one or more rate columns."""

    def __init__(self, rates: np.ndarray, grid: Sequence[float]):
        rates = np.asarray(rates, dtype=float)
        self.rates = rates[:, None] if rates.ndim == 1 else rates
        self.grid = np.asarray(grid, dtype=float)

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        self.out = np.zeros((n_paths, len(self.grid), self.rates.shape[1]))

    def segment(self, idx, vertex, t0, t1):
        overlap = np.clip(np.minimum(t1[:, None], self.grid[None, :]) - t0[:, None], 0.0, None)
        self.out[idx] += overlap[:, :, None] * self.rates[vertex][:, None, :]

    def result(self):
        return self.out


class JumpCountObserver(Observer):
    """Number of clock rings strictly before each query time."""

    def __init__(self, times: Sequence[float]):
        self.times = np.asarray(times, dtype=float)

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        self.out = np.zeros((n_paths, len(self.times)), dtype=np.int64)

    def segment(self, idx, vertex, t0, t1):
        ring = t1 < self.t_max
        self.out[idx] += ring[:, None] & (t1[:, None] < self.times[None, :])

    def result(self):
        return self.out


class AbsorptionObserver(Observer):
    """Absorption time per path, ``inf`` for paths alive at the horizon."""

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        self.out = np.full(n_paths, math.inf)

    def absorb(self, idx, time, vertex):
        self.out[idx] = time

    def result(self):
        return self.out


class PathRecorder(Observer):
    """Stores full trajectories; memory grows with the number of jumps."""

    def start(self, n_paths, t_max):
        super().start(n_paths, t_max)
        self._idx, self._t, self._v = [], [], []
        self._abs_t = np.full(n_paths, math.inf)
        self._abs_v = np.full(n_paths, CEMETERY, dtype=np.int64)
        self._res_idx, self._res_t = [], []

    def initial(self, vertex):
        self._idx.append(np.arange(self.n_paths))
        self._t.append(np.zeros(self.n_paths))
        self._v.append(np.asarray(vertex).copy())

    def jump(self, idx, time, vertex):
        self._idx.append(idx.copy())
        self._t.append(time.copy())
        self._v.append(vertex.copy())

    def absorb(self, idx, time, vertex):
        self._abs_t[idx] = time
        self._abs_v[idx] = vertex

    def resurrect(self, idx, time):
        self._res_idx.append(idx.copy())
        self._res_t.append(time.copy())

    def paths(self, k: int) -> list[Path]:
        idx = np.concatenate(self._idx)
        order = np.argsort(idx, kind="stable")
        t = np.concatenate(self._t)[order]
        v = np.concatenate(self._v)[order]
        cuts = np.searchsorted(idx[order], np.arange(self.n_paths + 1))
        if self._res_idx:
            ridx = np.concatenate(self._res_idx)
            rorder = np.argsort(ridx, kind="stable")
            rt = np.concatenate(self._res_t)[rorder]
            rcuts = np.searchsorted(ridx[rorder], np.arange(self.n_paths + 1))
        else:
            rt, rcuts = np.empty(0), np.zeros(self.n_paths + 1, dtype=np.int64)
        return [
            Path(
                t[cuts[p] : cuts[p + 1]],
                v[cuts[p] : cuts[p + 1]],
                self.t_max,
                k,
                float(self._abs_t[p]),
                int(self._abs_v[p]),
                rt[rcuts[p] : rcuts[p + 1]],
            )
            for p in range(self.n_paths)
        ]

    def result(self):
        raise TypeError("use paths() to collect recorded trajectories")


# engine -----------------------------------------------------------------------------


def run_walks(
    kern: JumpKernel | KernelSampler,
    starts,
    t_max: float,
    seed: int,
    *,
    mode: str = "reflected",
    killing: str = "exit",
    stream_ids=None,
    observers: Iterable[Observer] = (),
) -> None:
    """Advance walkers from ``starts`` up to ``t_max`` feeding every observer.

    ``mode`` selects the process:

    * ``"reflected"`` follows the kernel, which should be the domain kernel.
    * ``"killed"`` follows the full kernel and is absorbed according to
      ``killing``: ``"exit"`` kills on the attempt to jump out of the domain,
      ``"boundary"`` kills on arrival at a boundary vertex (and at time 0 when
      started there).
    * ``"resurrected"`` restarts each killed run from its pre-absorption
      vertex, which amounts to rejecting the offending jump.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if killing not in KILLING:
        raise ValueError(f"killing must be one of {KILLING}, got {killing!r}")
    if not t_max >= 0:
        raise ValueError("t_max must be nonnegative")
    sampler = kern.sampler() if isinstance(kern, JumpKernel) else kern
    pos = np.array(starts, dtype=np.int64).ravel()
    n = len(pos)
    streams = np.arange(n, dtype=np.uint64) if stream_ids is None else np.asarray(stream_ids, dtype=np.uint64)
    if len(streams) != n:
        raise ValueError("stream_ids must match starts")
    if n and not sampler.inside[pos].all():
        raise ValueError("every start must lie in the domain")
    observers = list(observers)
    for ob in observers:
        ob.start(n, t_max)
        if isinstance(ob, PathRecorder):
            ob.initial(pos)

    t = np.zeros(n)
    step = np.zeros(n, dtype=np.uint64)
    active = np.arange(n)
    if mode != "reflected" and killing == "boundary":
        at_boundary = sampler.boundary[pos]
        if mode == "resurrected" and at_boundary.any():
            raise ValueError("boundary killing cannot resurrect a walk started on the boundary")
        if at_boundary.any():
            dead = active[at_boundary]
            for ob in observers:
                ob.absorb(dead, np.zeros(len(dead)), pos[dead])
            active = active[~at_boundary]

    inside, boundary = sampler.inside, sampler.boundary
    while active.size:
        hold, u = hold_and_choice(seed, streams[active], step[active], sampler.speed)
        here = pos[active]
        t0 = t[active]
        t1 = t0 + hold
        done = t1 >= t_max
        seg_end = np.where(done, t_max, t1)
        for ob in observers:
            ob.segment(active, here, t0, seg_end)
        go = ~done
        idx = active[go]
        tj = t1[go]
        src = here[go]
        nxt = sampler.choose(src, u[go])
        if mode == "reflected":
            moved = np.ones(len(idx), dtype=bool)
            alive = moved
        else:
            bad = ~inside[nxt] if killing == "exit" else boundary[nxt]
            if mode == "killed":
                if bad.any():
                    for ob in observers:
                        ob.absorb(idx[bad], tj[bad], nxt[bad])
                moved = ~bad
                alive = ~bad
            else:
                if bad.any():
                    for ob in observers:
                        ob.resurrect(idx[bad], tj[bad])
                nxt = np.where(bad, src, nxt)
                moved = ~bad
                alive = np.ones(len(idx), dtype=bool)
        if moved.any():
            for ob in observers:
                ob.jump(idx[moved], tj[moved], nxt[moved])
        pos[idx] = nxt
        t[idx] = tj
        step[idx] += np.uint64(1)
        active = idx[alive]


def simulate_paths(
    kern: JumpKernel,
    starts,
    t_max: float,
    seed: int,
    *,
    mode: str = "reflected",
    killing: str = "exit",
    stream_ids=None,
) -> list[Path]:
    recorder = PathRecorder()
    run_walks(kern, starts, t_max, seed, mode=mode, killing=killing, stream_ids=stream_ids, observers=[recorder])
    return recorder.paths(kern.k)


def _single(kern, start, t_max, rng: RngStream, mode, killing):
    vid = start if isinstance(start, (int, np.integer)) else kern.graph.index(start)
    if rng.counter != 0:
        raise ValueError("walks consume a fresh stream; pass an RngStream with counter 0")
    return simulate_paths(kern, [vid], t_max, rng.seed, mode=mode, killing=killing, stream_ids=[rng.stream])[0]


def simulate_reflected(kern: JumpKernel, start, t_max: float, rng: RngStream) -> Path:
    """Walk with the domain kernel; never absorbed."""
    if kern.variant != "reflected":
        raise ValueError("simulate_reflected needs the reflected kernel")
    return _single(kern, start, t_max, rng, "reflected", "exit")


def simulate_killed(kern: JumpKernel, start, t_max: float, rng: RngStream, killing: str = "boundary") -> Path:
    """Walk with the full kernel, absorbed at the domain boundary."""
    if kern.variant != "full":
        raise ValueError("simulate_killed needs the full kernel")
    return _single(kern, start, t_max, rng, "killed", killing)


def resurrect_inw(kern: JumpKernel, start, t_max: float, rng: RngStream, killing: str = "exit") -> Path:
    """Killed walk restarted from its pre-absorption vertex after every absorption."""
    if kern.variant != "full":
        raise ValueError("resurrect_inw needs the full kernel")
    return _single(kern, start, t_max, rng, "resurrected", killing)


# path transforms --------------------------------------------------------------------


def time_reverse(path: Path, t: float) -> Path:
    """Path ``s -> X((t-s)-)`` on ``[0, t]``, frozen at ``X(0)`` afterwards."""
    if t > path.horizon:
        raise ValueError("t exceeds the path horizon")
    if path.absorption_time < t:
        raise ValueError("path is absorbed before t")
    inner = path.times < t
    inner[0] = True
    times = path.times[inner]
    verts = path.vertices[inner]
    new_times = np.concatenate([[0.0], t - times[:0:-1]])
    return Path(new_times, verts[::-1].copy(), max(t, path.horizon), path.k)


def occupation_and_marginals(paths: Sequence[Path], times: Sequence[float]) -> tuple[dict, list[dict]]:
    """Occupation fractions over all paths and empirical marginals at ``times``."""
    if not paths:
        raise ValueError("empty path set")
    total = 0.0
    occ: dict[int, float] = {}
    for p in paths:
        total += p.horizon
        for v, d in p.occupation().items():
            occ[v] = occ.get(v, 0.0) + d
    occupation = {v: d / total for v, d in sorted(occ.items())}
    marginals = []
    for t in times:
        vals = np.array([p.position(t) for p in paths])
        ids, counts = np.unique(vals, return_counts=True)
        marginals.append(dict(zip(ids.tolist(), (counts / len(paths)).tolist())))
    return occupation, marginals


# modulus of continuity ---------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _rho(i, j, kinds, pts, rn, bd):
    """Geodesic distance between segments i and j; kind 3 is the cemetery."""
    ki, kj = kinds[i], kinds[j]
    if ki == 3 and kj == 3:
        return 0.0
    if ki == 3:
        return bd[j]
    if kj == 3:
        return bd[i]
    through = rn[i] + rn[j]
    if ki == kj and ki != STAR:
        dx = pts[i, 0] - pts[j, 0]
        dy = pts[i, 1] - pts[j, 1]
        dz = pts[i, 2] - pts[j, 2]
        d = math.sqrt(dx * dx + dy * dy + dz * dz)
        return min(d, through)
    return through


@numba.njit(cache=True)
def _window_add(a, b, counts, rowcnt, rowmin, rowmax, sign):
    counts[a, b] += sign
    rowcnt[a] += sign
    if sign > 0:
        if rowcnt[a] == 1:
            rowmin[a] = b
            rowmax[a] = b
        else:
            rowmin[a] = min(rowmin[a], b)
            rowmax[a] = max(rowmax[a], b)
    elif rowcnt[a] > 0 and counts[a, b] == 0:
        while counts[a, rowmin[a]] == 0:
            rowmin[a] += 1
        while counts[a, rowmax[a]] == 0:
            rowmax[a] -= 1


@numba.njit(cache=True)
def _exceed_times(times, kinds, pts, rn, bd, delta, horizon, h):
    """For each segment j the first jump time after which the window from j exceeds delta.

    Windows made only of plane points away from the disk keep per-row column
    extremes of their lattice cells, so the farthest window point from a new
    point costs one step per occupied row instead of one per segment.
    """
    m = len(times)
    out = np.empty(m)
    ci = np.zeros(m, np.int64)
    cj = np.zeros(m, np.int64)
    imin, imax, jmin, jmax = 0, -1, 0, -1
    for i in range(m):
        if kinds[i] == 1:
            ci[i] = round(pts[i, 0] / h)
            cj[i] = round(pts[i, 1] / h)
            if imax < imin:
                imin, imax, jmin, jmax = ci[i], ci[i], cj[i], cj[i]
            else:
                imin = min(imin, ci[i])
                imax = max(imax, ci[i])
                jmin = min(jmin, cj[i])
                jmax = max(jmax, cj[i])
    ni = max(imax - imin + 1, 1)
    nj = max(jmax - jmin + 1, 1)
    counts = np.zeros((ni, nj), np.int32)
    rowcnt = np.zeros(ni, np.int64)
    rowmin = np.zeros(ni, np.int64)
    rowmax = np.zeros(ni, np.int64)
    for i in range(m):
        ci[i] -= imin
        cj[i] -= jmin
    rlo, rhi = ni, -1
    n_other = 0
    e = 0
    for j in range(m):
        if e <= j:
            e = j
        while e < m:
            if e > j:
                if kinds[e] == 1 and n_other == 0 and rn[e] > delta:
                    a, b = ci[e], cj[e]
                    far = 0
                    for r in range(rlo, rhi + 1):
                        if rowcnt[r] > 0:
                            dj = max(abs(rowmin[r] - b), abs(rowmax[r] - b))
                            d2 = (r - a) * (r - a) + dj * dj
                            if d2 > far:
                                far = d2
                    hit = math.sqrt(far) * h > delta
                else:
                    hit = False
                    for i in range(j, e):
                        if _rho(i, e, kinds, pts, rn, bd) > delta:
                            hit = True
                            break
                if hit:
                    break
            if kinds[e] == 1:
                _window_add(ci[e], cj[e], counts, rowcnt, rowmin, rowmax, 1)
                rlo = min(rlo, ci[e])
                rhi = max(rhi, ci[e])
            else:
                n_other += 1
            e += 1
        out[j] = times[e] if e < m else horizon
        if kinds[j] == 1:
            _window_add(ci[j], cj[j], counts, rowcnt, rowmin, rowmax, -1)
            while rlo <= rhi and rowcnt[rlo] == 0:
                rlo += 1
            while rhi >= rlo and rowcnt[rhi] == 0:
                rhi -= 1
            if rlo > rhi:
                rlo, rhi = ni, -1
        else:
            n_other -= 1
    return out


@numba.njit(cache=True)
def _feasible(times, kinds, pts, rn, bd, delta, theta, T, horizon, h):
    m = len(times)
    E = _exceed_times(times, kinds, pts, rn, bd, delta, horizon, h)
    left = np.empty(m + 1)
    right = np.empty(m + 1)
    left[0] = 0.0
    right[0] = 0.0
    cnt = 1
    p = 0
    for j in range(m):
        a = times[j]
        if a >= T:
            break
        b = times[j + 1] if j + 1 < m else math.inf
        while p < cnt and right[p] < a:
            p += 1
        if p == cnt:
            continue
        lo = max(left[p], a)
        if lo >= b or lo >= T:
            continue
        need = max(T, lo + theta)
        if E[j] >= need:
            return True
        if lo + theta <= E[j]:
            left[cnt] = lo + theta
            right[cnt] = E[j]
            cnt += 1
    return False


@dataclass(frozen=True)
class PathGeometry:
    """Per-segment geometry arrays of a path, cemetery encoded as kind 3."""

    times: np.ndarray
    kinds: np.ndarray
    points: np.ndarray
    rho_norm: np.ndarray
    to_boundary: np.ndarray
    horizon: float
    vertices: np.ndarray
    mesh: float

    @classmethod
    def from_path(cls, path: Path, graph: LatticeGraph, horizon: float | None = None) -> "PathGeometry":
        horizon = path.horizon if horizon is None else horizon
        keep = path.times < horizon
        times = path.times[keep]
        verts = path.vertices[keep]
        if path.absorption_time < horizon:
            times = np.append(times, path.absorption_time)
            verts = np.append(verts, CEMETERY)
        cem = verts == CEMETERY
        safe = np.where(cem, 0, verts)
        kinds = graph.kind[safe].astype(np.int8)
        kinds[cem] = 3
        pts = _coords(graph, safe)
        rn = _rho_norm_of(graph, safe, pts)
        bd = rho_to_boundary(pts, graph.params)
        return cls(times, kinds, pts, rn, bd, float(horizon), verts, 2.0**-graph.k)


def _coords(graph: LatticeGraph, ids: np.ndarray) -> np.ndarray:
    h = 2.0**-graph.k
    out = np.zeros((len(ids), 3))
    kind = graph.kind[ids]
    ij = graph.ij[ids]
    plane = kind == 1
    out[plane, 0] = ij[plane, 0] * h
    out[plane, 1] = ij[plane, 1] * h
    rod = kind == ROD
    out[rod, 2] = ij[rod, 0] * h
    return out


def _rho_norm_of(graph, ids, pts):
    eps = float(graph.params.epsilon)
    kind = graph.kind[ids]
    return np.where(kind == ROD, pts[:, 2], np.where(kind == STAR, 0.0, np.hypot(pts[:, 0], pts[:, 1]) - eps))


def _check_window(theta, T, horizon):
    if not 0 < theta < T:
        raise ValueError("need 0 < theta < T")
    if horizon < T + theta:
        raise ValueError(f"path horizon {horizon} must be at least T + theta = {T + theta}")


def w_rho_at_most(path: Path, graph: LatticeGraph, theta: float, T: float, delta: float) -> bool:
    """Whether the partition modulus of ``path`` on ``[0, T]`` is at most ``delta``."""
    _check_window(theta, T, path.horizon)
    g = PathGeometry.from_path(path, graph, T + theta)
    return bool(_feasible(g.times, g.kinds, g.points, g.rho_norm, g.to_boundary, delta, theta, T, g.horizon, g.mesh))


def modulus_w_rho(path: Path, graph: LatticeGraph, theta: float, T: float) -> float:
    """Exact infimum over theta-separated partitions of the largest within-piece oscillation.

    The value is one of the pairwise distances between visited states, so a
    binary search over those candidates with the feasibility sweep is exact.
    """
    _check_window(theta, T, path.horizon)
    g = PathGeometry.from_path(path, graph, T + theta)
    _, first = np.unique(g.vertices, return_index=True)
    cand = [0.0]
    for a in range(len(first)):
        for b in range(a + 1, len(first)):
            cand.append(_rho(first[a], first[b], g.kinds, g.points, g.rho_norm, g.to_boundary))
    cand = np.unique(np.array(cand))
    lo, hi = 0, len(cand) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _feasible(g.times, g.kinds, g.points, g.rho_norm, g.to_boundary, cand[mid], theta, T, g.horizon, g.mesh):
            hi = mid
        else:
            lo = mid + 1
    return float(cand[lo])
