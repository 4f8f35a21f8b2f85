import io
import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse, stats
from scipy.sparse.linalg import expm_multiply, spsolve

from vardimwalk.lattice import LatticeParams, build_graphs, geodesic_rho, rho_to_boundary
from vardimwalk.measures import kernel
from vardimwalk.rng import RngStream
from vardimwalk.walker import (
    CEMETERY,
    AbsorptionObserver,
    JumpCountObserver,
    MarginalObserver,
    OccupationObserver,
    Path,
    PathGeometry,
    _exceed_times,
    modulus_w_rho,
    occupation_and_marginals,
    resurrect_inw,
    run_walks,
    simulate_killed,
    simulate_paths,
    simulate_reflected,
    time_reverse,
    w_rho_at_most,
)

SEED = 20240611


def near(graph, radius, n, seed=0):
    """Domain vertices within ``radius`` of the star."""
    pool = np.flatnonzero(graph.inside & (graph.rho_norm < radius))
    return np.random.default_rng(seed).choice(pool, n)


def transition_matrix(kern, rows, cols):
    counts = np.diff(kern.indptr)
    src = np.repeat(np.arange(len(counts)), counts)
    n = len(counts)
    P = sparse.csr_matrix((kern.probs, (src, kern.indices)), shape=(n, n))
    return P[rows][:, cols]


# engine ------------------------------------------------------------------------------


def test_ring_counts_are_poisson(reflected_kernel, small_graph):
    n = 20_000
    starts = near(small_graph, 2.0, n)
    obs = JumpCountObserver([0.25, 0.5])
    run_walks(reflected_kernel, starts, 0.5, SEED, observers=[obs])
    counts = obs.result()
    lam = 64 * np.array([0.25, 0.5])
    z = (counts.mean(axis=0) - lam) / np.sqrt(lam / n)
    assert np.all(np.abs(z) < 4)
    assert counts[:, 0].var() == pytest.approx(lam[0], rel=0.05)


def test_results_do_not_depend_on_batching(reflected_kernel, small_graph):
    starts = near(small_graph, 3.0, 40)
    whole = simulate_paths(reflected_kernel, starts, 0.3, SEED)
    first = simulate_paths(reflected_kernel, starts[:15], 0.3, SEED, stream_ids=np.arange(15))
    second = simulate_paths(reflected_kernel, starts[15:], 0.3, SEED, stream_ids=np.arange(15, 40))
    for a, b in zip(whole, first + second):
        assert np.array_equal(a.times, b.times) and np.array_equal(a.vertices, b.vertices)
    single = simulate_reflected(reflected_kernel, int(starts[20]), 0.3, RngStream(SEED, stream=20))
    assert np.array_equal(single.vertices, whole[20].vertices)


def test_reflected_paths_follow_domain_edges(reflected_kernel, small_graph):
    paths = simulate_paths(reflected_kernel, near(small_graph, 1.0, 50), 0.5, SEED)
    for p in paths:
        assert p.check_adjacency(small_graph, "reflected")
        assert small_graph.inside[p.vertices].all()
        assert not p.absorbed
        assert np.all(np.diff(p.times) > 0) and p.times[-1] < p.horizon


@pytest.mark.parametrize("killing", ["exit", "boundary"])
def test_killed_paths_are_absorbed_where_declared(full_kernel, small_graph, killing):
    g = small_graph
    starts = np.flatnonzero(g.inside & ~g.boundary & (g.rho_norm > 10.0) & (g.kind == 1))[:200]
    paths = simulate_paths(full_kernel, starts, 1.0, SEED, mode="killed", killing=killing)
    absorbed = [p for p in paths if p.absorbed]
    assert len(absorbed) > 20
    for p in absorbed:
        assert p.check_adjacency(g, "full")
        assert g.inside[p.vertices].all()
        assert p.position(p.absorption_time) == CEMETERY
        if killing == "exit":
            assert not g.inside[p.absorbed_at]
        else:
            assert g.boundary[p.absorbed_at]
        assert p.absorbed_at in g.neighbors(int(p.vertices[-1]), "full")
        assert p.occupation()[CEMETERY] == pytest.approx(1.0 - p.absorption_time)


def test_boundary_start_is_absorbed_at_time_zero(full_kernel, small_graph):
    b = int(np.flatnonzero(small_graph.boundary)[0])
    p = simulate_killed(full_kernel, b, 1.0, RngStream(1))
    assert p.absorption_time == 0.0 and p.position(0.0) == CEMETERY
    with pytest.raises(ValueError, match="boundary"):
        simulate_paths(full_kernel, [b], 1.0, 1, mode="resurrected", killing="boundary")


def test_resurrected_paths_stay_in_domain(full_kernel, small_graph):
    g = small_graph
    starts = np.flatnonzero(g.boundary & (g.kind == 1))[:100]
    paths = simulate_paths(full_kernel, starts, 0.5, SEED, mode="resurrected")
    assert sum(len(p.resurrections) for p in paths) > 0
    for p in paths:
        assert not p.absorbed and g.inside[p.vertices].all()
        assert p.check_adjacency(g, "reflected")
    one = resurrect_inw(full_kernel, int(starts[3]), 0.5, RngStream(SEED, stream=3))
    assert np.array_equal(one.vertices, paths[3].vertices)


def test_input_validation(reflected_kernel, full_kernel, small_graph):
    ext = int(np.flatnonzero(~small_graph.inside)[0])
    with pytest.raises(ValueError, match="domain"):
        run_walks(reflected_kernel, [ext], 1.0, 1)
    with pytest.raises(ValueError, match="mode"):
        run_walks(reflected_kernel, [0], 1.0, 1, mode="teleport")
    with pytest.raises(ValueError, match="killing"):
        run_walks(full_kernel, [0], 1.0, 1, mode="killed", killing="sometimes")
    with pytest.raises(ValueError):
        simulate_reflected(full_kernel, 0, 1.0, RngStream(1))
    with pytest.raises(ValueError):
        simulate_killed(reflected_kernel, 0, 1.0, RngStream(1))
    with pytest.raises(ValueError, match="fresh"):
        simulate_reflected(reflected_kernel, 0, 1.0, RngStream(1, counter=4))


# laws against matrix-exponential oracles ---------------------------------------------


def _chi2_against(probs, samples, n_bins_min=5):
    counts = np.bincount(samples, minlength=len(probs)).astype(float)
    expected = probs * len(samples)
    keep = expected >= n_bins_min
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] < n_bins_min:
        obs[-2] += obs[-1]
        exp[-2] += exp[-1]
        obs, exp = obs[:-1], exp[:-1]
    return stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue


def _marginal_oracle(kern, graph, start, t, sub_diag=None):
    states = np.flatnonzero(graph.inside)
    P = transition_matrix(kern, states, states)
    rates = kern.speed * (P - sparse.identity(len(states)))
    if sub_diag is not None:
        rates = rates + sparse.diags(kern.speed * sub_diag[states])
    v = np.zeros(len(states))
    v[np.searchsorted(states, start)] = 1.0
    return states, expm_multiply(rates.T.tocsr() * t, v)


def test_reflected_marginal_matches_oracle(reflected_kernel, small_graph):
    start, t, n = 0, 0.3, 20_000
    states, p = _marginal_oracle(reflected_kernel, small_graph, start, t)
    obs = MarginalObserver([t])
    run_walks(reflected_kernel, np.full(n, start), t, SEED, observers=[obs])
    idx = np.searchsorted(states, obs.result()[:, 0])
    assert _chi2_against(p, idx) > 1e-3


def test_resurrected_marginal_matches_rejection_oracle(full_kernel, small_graph):
    g = small_graph
    start = int(np.flatnonzero(g.boundary & (g.kind == 1))[10])
    t, n = 0.3, 20_000
    counts = np.diff(full_kernel.indptr)
    src = np.repeat(np.arange(g.n_vertices), counts)
    rejected = np.bincount(src, weights=full_kernel.probs * ~g.inside[full_kernel.indices], minlength=g.n_vertices)
    states, p = _marginal_oracle(full_kernel, g, start, t, sub_diag=rejected)
    assert p.sum() == pytest.approx(1.0, abs=1e-10)
    obs = MarginalObserver([t])
    run_walks(full_kernel, np.full(n, start), t, SEED, mode="resurrected", observers=[obs])
    idx = np.searchsorted(states, obs.result()[:, 0])
    assert _chi2_against(p, idx) > 1e-3


@pytest.mark.parametrize("killing", ["exit", "boundary"])
def test_killed_survival_matches_oracle(full_kernel, small_graph, killing):
    g = small_graph
    live = g.inside & ~g.boundary if killing == "boundary" else g.inside
    start = int(np.flatnonzero(g.inside & ~g.boundary & (g.kind == 1) & (g.rho_norm > 9.8))[0])
    t, n = 0.5, 20_000
    states = np.flatnonzero(live)
    P = transition_matrix(full_kernel, states, states)
    rates = full_kernel.speed * (P - sparse.identity(len(states)))
    survival = expm_multiply(rates.tocsr() * t, np.ones(len(states)))[np.searchsorted(states, start)]
    paths = simulate_paths(full_kernel, np.full(n, start), t, SEED, mode="killed", killing=killing)
    alive = np.mean([not p.absorbed for p in paths])
    se = math.sqrt(survival * (1 - survival) / n)
    assert abs(alive - survival) < 4 * se


def test_mean_absorption_time_from_star_matches_linear_solve():
    g = build_graphs(LatticeParams(3, 1, 20, 20))
    kern = kernel(g, "full")
    live = np.flatnonzero(g.inside & ~g.boundary)
    P = transition_matrix(kern, live, live)
    exact = spsolve((sparse.identity(len(live)) - P).tocsc(), np.full(len(live), 1 / kern.speed))[0]
    assert exact == pytest.approx(390.6266, rel=1e-6)
    obs = AbsorptionObserver()
    n = 1000
    run_walks(kern, np.zeros(n, dtype=np.int64), 1e4, SEED, mode="killed", killing="boundary", observers=[obs])
    tau = obs.result()
    assert np.isfinite(tau).all()
    assert abs(tau.mean() - exact) < 4 * tau.std(ddof=1) / np.sqrt(n)


def test_zero_horizon_and_single_jump_cases(reflected_kernel, small_graph):
    v = int(np.flatnonzero(small_graph.inside)[5])
    p = simulate_paths(reflected_kernel, [v], 0.0, SEED)[0]
    assert p.n_jumps == 0 and p.position(0.0) == v
    assert time_reverse(p, 0.0).position(0.0) == v
    a, b = 0, int(small_graph.neighbors(0, "reflected")[-1])
    jump = Path(np.array([0.0, 0.5]), np.array([a, b]), 1.2, small_graph.k)
    assert modulus_w_rho(jump, small_graph, 0.2, 1.0) == 0.0


# path utilities ----------------------------------------------------------------------


@st.composite
def synthetic_paths(draw):
    n = draw(st.integers(1, 12))
    gaps = draw(st.lists(st.floats(0.01, 0.2), min_size=n - 1, max_size=n - 1))
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    verts = np.array(draw(st.lists(st.integers(0, 500), min_size=n, max_size=n)))
    horizon = float(times[-1]) + draw(st.floats(0.01, 0.5))
    return Path(times, verts, horizon, 3)


@settings(max_examples=100, deadline=None)
@given(synthetic_paths(), st.floats(0.0, 1.0))
def test_time_reversal_is_an_involution(path, frac):
    t = frac * path.horizon
    twice = time_reverse(time_reverse(path, t), t)
    grid = np.linspace(0, t, 50, endpoint=False)
    # r_t r_t X agrees with X off the jump times; sample strictly inside holding intervals
    grid = grid[~np.isin(grid, path.times)]
    assert np.array_equal(twice.positions(grid), path.positions(grid))


@settings(max_examples=100, deadline=None)
@given(synthetic_paths())
def test_reversal_maps_values_to_left_limits(path):
    t = path.horizon
    rev = time_reverse(path, t)
    for s in np.linspace(0, t, 17)[1:-1]:
        left = path.positions(np.nextafter(t - s, -np.inf))
        if t - s not in path.times:
            assert rev.position(s) == left


def test_occupation_and_marginals(reflected_kernel, small_graph):
    paths = simulate_paths(reflected_kernel, near(small_graph, 1.0, 30), 0.4, SEED)
    for p in paths:
        assert sum(p.occupation().values()) == pytest.approx(0.4)
    occ, marg = occupation_and_marginals(paths, [0.0, 0.4])
    assert sum(occ.values()) == pytest.approx(1.0)
    assert sum(marg[1].values()) == pytest.approx(1.0)
    bins = np.zeros(small_graph.n_vertices, dtype=np.int64)
    obs = OccupationObserver(bins, 1)
    run_walks(reflected_kernel, near(small_graph, 1.0, 30), 0.4, SEED, observers=[obs])
    assert obs.result()[:, 0] == pytest.approx(np.full(30, 0.4))


def test_path_csv(reflected_kernel, small_graph):
    p = simulate_paths(reflected_kernel, [0], 0.1, SEED)[0]
    buf = io.StringIO()
    p.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,vertex_id" and lines[1] == "0.0,0"
    assert len(lines) == p.n_jumps + 2


# modulus of continuity ---------------------------------------------------------------


def _rho_matrix(geom, graph):
    pts, kinds = geom.points, geom.kinds
    eps = float(graph.params.epsilon)
    n = len(pts)
    live = kinds != 3
    R = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if live[a] and live[b]:
                R[a, b] = geodesic_rho(pts[a], pts[b], eps)
            elif live[a] or live[b]:
                q = pts[a] if live[a] else pts[b]
                R[a, b] = rho_to_boundary(q, graph.params)[0]
    return R


def _exceed_oracle(geom, R, delta):
    m = len(geom.times)
    out = np.empty(m)
    for j in range(m):
        e = j + 1
        while e < m and not (R[j:e, e] > delta).any():
            e += 1
        out[j] = geom.times[e] if e < m else geom.horizon
    return out


@pytest.mark.parametrize("mode", ["reflected", "killed", "resurrected"])
def test_exceed_times_match_dense_oracle(small_graph, reflected_kernel, full_kernel, mode):
    g = small_graph
    rng = np.random.default_rng(5)
    starts = np.concatenate([near(g, 0.6, 8, 1), rng.choice(np.flatnonzero(g.inside & (g.rho_norm < 11)), 8)])
    kern = reflected_kernel if mode == "reflected" else full_kernel
    paths = simulate_paths(kern, starts, 0.12, SEED, mode=mode, killing="boundary" if mode == "killed" else "exit")
    checked = 0
    for p in paths:
        geom = PathGeometry.from_path(p, g)
        R = _rho_matrix(geom, g)
        for delta in (0.1, 0.2, 0.4, 0.7):
            got = _exceed_times(geom.times, geom.kinds, geom.points, geom.rho_norm, geom.to_boundary, delta, geom.horizon, geom.mesh)
            assert np.array_equal(got, _exceed_oracle(geom, R, delta))
            checked += 1
    assert checked == 4 * len(paths)


def _grid_modulus(path, graph, step, theta_steps, T_steps):
    """Exact modulus by dynamic programming over breakpoints on the jump-time grid."""
    geom = PathGeometry.from_path(path, graph, (T_steps + theta_steps) * step)
    R = _rho_matrix(geom, graph)
    N = T_steps + theta_steps
    cell_state = np.searchsorted(geom.times, (np.arange(N) + 0.5) * step) - 1

    def osc(s, e):
        idx = np.unique(cell_state[s:e])
        return float(R[np.ix_(idx, idx)].max())

    @lru_cache(maxsize=None)
    def best(s):
        value = osc(s, max(T_steps, s + theta_steps))
        for e in range(s + theta_steps, T_steps):
            value = min(value, max(osc(s, e), best(e)))
        return value

    return best(0)


@pytest.mark.parametrize("seed", range(24))
def test_modulus_matches_grid_oracle(small_graph, seed):
    g = small_graph
    rng = np.random.default_rng(seed)
    step, theta_steps, T_steps = 1 / 16, 2, 16
    v = int(near(g, 0.3, 1, seed)[0]) if seed % 2 else int(rng.choice(np.flatnonzero(g.inside & (g.rho_norm < 5))))
    verts, times, t = [v], [0.0], 0.0
    while True:
        t += step * rng.integers(1, 4)
        if t >= (T_steps + theta_steps) * step:
            break
        nbrs = g.neighbors(verts[-1], "reflected")
        # occasional long moves exercise large oscillations
        verts.append(int(rng.choice(nbrs)) if rng.random() < 0.8 else int(rng.choice(np.flatnonzero(g.inside & (g.rho_norm < 3)))))
        times.append(t)
    horizon = (T_steps + theta_steps) * step
    if seed % 3 == 0 and len(times) > 2:
        # absorbed at a grid time; the jump scheduled there never happens
        cut = len(times) // 2
        path = Path(np.array(times[:cut]), np.array(verts[:cut]), horizon, g.k, absorption_time=times[cut])
    else:
        path = Path(np.array(times), np.array(verts), horizon, g.k)
    w = modulus_w_rho(path, g, theta_steps * step, T_steps * step)
    assert w == pytest.approx(_grid_modulus(path, g, step, theta_steps, T_steps), rel=1e-12, abs=1e-15)
    assert w_rho_at_most(path, g, theta_steps * step, T_steps * step, w)
    if w > 0:
        assert not w_rho_at_most(path, g, theta_steps * step, T_steps * step, w * (1 - 1e-9))


def test_modulus_is_monotone_in_theta(reflected_kernel, small_graph):
    for p in simulate_paths(reflected_kernel, near(small_graph, 2.0, 10), 0.7, SEED):
        values = [modulus_w_rho(p, small_graph, th, 0.5) for th in (0.01, 0.05, 0.1, 0.2)]
        assert values == sorted(values)


def test_modulus_of_constant_path_is_zero(small_graph):
    p = Path(np.array([0.0]), np.array([0]), 1.0, small_graph.k)
    assert modulus_w_rho(p, small_graph, 0.1, 0.5) == 0.0
    with pytest.raises(ValueError):
        modulus_w_rho(p, small_graph, 0.6, 0.5)
    with pytest.raises(ValueError):
        modulus_w_rho(p, small_graph, 0.3, 0.9)
