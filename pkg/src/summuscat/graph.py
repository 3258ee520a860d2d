"""Station geometry and the graph-Laplacian trace regularizer.

The regularizer ``tr(W (D - A) W^T)`` penalizes disagreement between the
parameter columns of geographically close tasks, with ``A`` built from a
Gaussian kernel over station distances.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError

LATLON = "latlon"
PLANAR = "planar"
COORD_SYSTEMS = (LATLON, PLANAR)
EARTH_RADIUS_KM = 6371.0

_COMPONENT = "graph"


@dataclass(frozen=True)
class StationSet:
    ids: tuple
    coords: np.ndarray
    coord_system: str = PLANAR

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        coords = np.array(self.coords, dtype=np.float64, copy=True).reshape(-1, 2) if len(ids) else np.zeros((0, 2))
        coords.setflags(write=False)
        if len(set(ids)) != len(ids):
            raise ParameterError("station ids must be unique", component=_COMPONENT)
        if coords.shape[0] != len(ids):
            raise ShapeError(f"{len(ids)} ids but {coords.shape[0]} coordinates", component=_COMPONENT)
        if self.coord_system not in COORD_SYSTEMS:
            raise ParameterError(f"unknown coord_system {self.coord_system!r}", component=_COMPONENT)
        if not np.all(np.isfinite(coords)):
            raise ParameterError("station coordinates must be finite", component=_COMPONENT)
        if self.coord_system == LATLON and coords.size:
            if np.any(np.abs(coords[:, 0]) > 90) or np.any(np.abs(coords[:, 1]) > 180):
                raise ParameterError("latitude must be in [-90, 90] and longitude in [-180, 180]",
                                     component=_COMPONENT)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)

    def __len__(self):
        return len(self.ids)

    def index(self, station_id):
        return self.ids.index(station_id)

    def subset(self, ids: Sequence[str]) -> "StationSet":
        pos = [self.index(i) for i in ids]
        return StationSet(tuple(ids), self.coords[pos], self.coord_system)

    def __eq__(self, other):
        if not isinstance(other, StationSet):
            return NotImplemented
        return (self.ids == other.ids and self.coord_system == other.coord_system
                and np.array_equal(self.coords, other.coords))


@dataclass(frozen=True)
class TaskGraph:
    """Gaussian-kernel task graph with zero-diagonal adjacency ``A`` and degree ``D``."""

    A: np.ndarray
    D: np.ndarray
    omega: float

    @property
    def S(self):
        return self.A.shape[0]

    @property
    def laplacian(self):
        return self.D - self.A

    def permuted(self, order) -> "TaskGraph":
        order = np.asarray(order)
        return TaskGraph(self.A[np.ix_(order, order)], self.D[np.ix_(order, order)], self.omega)


def distance_matrix(stations: StationSet) -> np.ndarray:
    """Pairwise distances: haversine km for lat/lon, Euclidean otherwise."""
    if len(stations) < 1:
        raise ParameterError("need at least one station", component=_COMPONENT)
    c = stations.coords
    if stations.coord_system == PLANAR:
        diff = c[:, None, :] - c[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
    else:
        lat = np.radians(c[:, 0])
        lon = np.radians(c[:, 1])
        dlat = lat[:, None] - lat[None, :]
        dlon = lon[:, None] - lon[None, :]
        h = np.sin(dlat / 2) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2) ** 2
        d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def median_bandwidth(dmat) -> float:
    """Median of off-diagonal distances; 1.0 when there are none or all are zero."""
    dmat = np.asarray(dmat, dtype=np.float64)
    S = dmat.shape[0]
    if S < 2:
        return 1.0
    off = dmat[~np.eye(S, dtype=bool)]
    med = float(np.median(off))
    return med if med > 0 else 1.0


def gaussian_adjacency(dmat, omega: float | None = None) -> TaskGraph:
    """Build ``A_ij = exp(-d_ij / omega)`` for ``i != j`` with ``A_ii = 0``.

    ``omega`` defaults to the median off-diagonal distance.
    """
    dmat = np.asarray(dmat, dtype=np.float64)
    if dmat.ndim != 2 or dmat.shape[0] != dmat.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {dmat.shape}", component=_COMPONENT)
    if np.any(dmat < 0) or not np.all(np.isfinite(dmat)):
        raise ParameterError("distances must be finite and nonnegative", component=_COMPONENT)
    if not np.allclose(dmat, dmat.T, rtol=0, atol=1e-9 * max(1.0, float(dmat.max(initial=0.0)))):
        raise ParameterError("distance matrix must be symmetric", component=_COMPONENT)
    if omega is None:
        omega = median_bandwidth(dmat)
    omega = float(omega)
    if not omega > 0 or not np.isfinite(omega):
        raise ParameterError(f"omega must be positive, got {omega}", component=_COMPONENT)
    A = np.exp(-dmat / omega)
    np.fill_diagonal(A, 0.0)
    A = 0.5 * (A + A.T)
    D = np.diag(A.sum(axis=1))
    A.setflags(write=False)
    D.setflags(write=False)
    return TaskGraph(A, D, omega)


def build_graph(stations: StationSet, omega: float | None = None) -> TaskGraph:
    return gaussian_adjacency(distance_matrix(stations), omega)


def _check(W, graph):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != graph.S:
        raise ShapeError(f"W must have {graph.S} columns, got shape {W.shape}", component=_COMPONENT)
    return W


def laplacian_trace(W, graph: TaskGraph) -> float:
    """``tr(W (D - A) W^T)`` for a ``(P, S)`` matrix of task parameter columns."""
    W = _check(W, graph)
    return float(np.sum((W @ graph.laplacian) * W))


def laplacian_trace_grad(W, graph: TaskGraph) -> np.ndarray:
    """Gradient ``2 W (D - A)`` of :func:`laplacian_trace` with respect to ``W``."""
    W = _check(W, graph)
    return 2.0 * (W @ graph.laplacian)
