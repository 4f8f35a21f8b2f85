"""scikit-learn style front end: a walk estimator and a projection transformer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .lattice import LatticeParams, build_graphs, geodesic_rho, point_kinds, project_f, rho_norm
from .measures import kernel, measures
from .walker import MODES, simulate_paths


def check_points(X, epsilon) -> np.ndarray:
    """Validate an ``(n, 3)`` array of embedded points of the space.

    Parameters
    ----------
    X : array-like of shape (n_points, 3)
        Plane points ``(x1, x2, 0)`` outside the disk, rod points ``(0, 0, s)``
        or the darning point ``(0, 0, 0)``.
    epsilon : float
        Disk radius.

    Returns
    -------
    X : ndarray of shape (n_points, 3)
    """
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected 3 columns, got {X.shape[1]}")
    point_kinds(X, float(epsilon))
    return X


def check_start_vertices(starts, graph) -> np.ndarray:
    starts = np.asarray(starts)
    if starts.ndim != 1 or not np.issubdtype(starts.dtype, np.integer):
        raise ValueError("starts must be a 1-d array of vertex ids")
    if np.any(starts < 0) or np.any(starts >= graph.n_vertices):
        raise ValueError("start vertex id out of range")
    if not graph.inside[starts].all():
        raise ValueError("start vertices must lie in the domain")
    return starts.astype(np.int64)


class GeodesicProjection(TransformerMixin, BaseEstimator):
    """Map points of the plane-with-rod space to R^3 by flattening the disk.

    Plane points go to ``(|x| - eps) x / |x|`` in the first two coordinates,
    rod points to their length in the third, the darning point to the origin.
    The Euclidean norm of the image equals the geodesic distance to the
    darning point.

    Parameters
    ----------
    epsilon : float, default=1.0
        Radius of the collapsed disk.
    """

    def __init__(self, epsilon=1.0):
        self.epsilon = epsilon

    def fit(self, X, y=None):
        check_points(X, self.epsilon)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_points(X, self.epsilon)
        return project_f(X, float(self.epsilon))

    def rho_norm(self, X):
        return rho_norm(check_points(X, self.epsilon), float(self.epsilon))

    def pairwise_rho(self, X, Y=None):
        X = check_points(X, self.epsilon)
        Y = X if Y is None else check_points(Y, self.epsilon)
        out = np.empty((len(X), len(Y)))
        for a, x in enumerate(X):
            out[a] = geodesic_rho(np.broadcast_to(x, Y.shape), Y, float(self.epsilon))
        return out


class LatticeWalk(BaseEstimator):
    """Continuous-time random walk on a lattice approximation of the plane-with-rod domain.

    ``fit`` builds the graph, the measures and the jump kernel; the sampling
    methods then draw paths or final positions.

    Parameters
    ----------
    k : int, default=4
        Mesh exponent.
    epsilon, radius, rod_length : rational or str, default=1, 20, 20
    mode : {"reflected", "killed", "resurrected"}, default="reflected"
    killing : {"exit", "boundary"}, default="exit"
    random_state : int, default=0
        Master seed of the counter-based generator.
    """

    def __init__(self, k=4, epsilon=1, radius=20, rod_length=20, mode="reflected", killing="exit", random_state=0):
        self.k = k
        self.epsilon = epsilon
        self.radius = radius
        self.rod_length = rod_length
        self.mode = mode
        self.killing = killing
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.params_ = LatticeParams(self.k, self.epsilon, self.radius, self.rod_length)
        self.graph_ = build_graphs(self.params_)
        self.measures_ = measures(self.graph_)
        self.kernel_ = kernel(self.graph_, "reflected" if self.mode == "reflected" else "full")
        self.n_states_ = int(self.graph_.inside.sum())
        return self

    def stationary_distribution(self) -> np.ndarray:
        check_is_fitted(self, "graph_")
        return self.measures_.normalized("reflected" if self.mode == "reflected" else "full") * self.graph_.inside

    def sample_starts(self, n_paths: int) -> np.ndarray:
        """Start vertices drawn from the normalized domain measure (seeded by ``random_state``)."""
        check_is_fitted(self, "graph_")
        rng = np.random.default_rng([int(self.random_state), 0x5747])
        p = self.measures_.normalized("reflected")
        return rng.choice(self.graph_.n_vertices, size=n_paths, p=p)

    def sample_paths(self, starts, t_max: float, stream_offset: int = 0):
        check_is_fitted(self, "graph_")
        starts = check_start_vertices(starts, self.graph_)
        streams = np.arange(stream_offset, stream_offset + len(starts))
        return simulate_paths(
            self.kernel_, starts, t_max, int(self.random_state), mode=self.mode, killing=self.killing, stream_ids=streams
        )

    def sample_positions(self, starts, t: float) -> np.ndarray:
        """Embedded coordinates at time ``t``; NaN rows for absorbed walkers."""
        paths = self.sample_paths(starts, t)
        ids = np.array([p.position(t) for p in paths])
        coords = np.full((len(ids), 3), np.nan)
        ok = ids >= 0
        coords[ok] = self.graph_.coords[ids[ok]]
        return coords
