"""Kohonen self-organizing maps: training, assignment, scalar grouping.

Cluster assignment follows the nearest-node rule: a point belongs to the
node whose weight vector minimizes the Euclidean distance (equivalently,
maximizes the negated root distance).  Ties go to the lowest node index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .table import GridTable

GROUPING_SAMPLES = 256


@dataclass(frozen=True)
class SomTrainParams:
    epochs: int = 20
    lr_start: float = 0.5
    lr_end: float = 0.02
    radius_start: float | None = None  # None -> half the lattice diameter
    ordered_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_start <= 1 or not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start <= 1")
        if not 0 < self.ordered_fraction <= 1:
            raise ValueError("ordered_fraction must be in (0, 1]")


@dataclass
class SomMap:
    """Trained map: one prototype weight vector per surviving node.

    ``lattice_shape`` records the topology used during training; after
    empty-node pruning the live node count can be smaller than the
    lattice size.  A trained map is immutable by convention and safe for
    concurrent assignment queries.
    """

    lattice_shape: tuple[int, ...]
    node_weights: np.ndarray
    trained: bool = False
    quantization_errors: tuple[float, ...] = field(default=(), repr=False)

    @property
    def num_clusters(self) -> int:
        return self.node_weights.shape[0]

    @property
    def dims(self) -> int:
        return self.node_weights.shape[1]


def _lattice_positions(shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) not in (1, 2) or any(n < 1 for n in shape):
        raise ValueError("topology must be a 1-D or 2-D lattice shape")
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    return np.stack([g.reshape(-1) for g in grids], axis=-1)


def som_train(
    points: np.ndarray, topology: tuple[int, ...] | int, params: SomTrainParams
) -> SomMap:
    """Train a Kohonen map on normalized input vectors.

    Sequential (sample-at-a-time) updates with a Gaussian neighborhood
    over the lattice; the learning rate decays linearly over all epochs
    and the neighborhood radius decays to zero across the ordered phase
    (the first ``ordered_fraction`` of epochs).  Nodes start at distinct
    data points.  During the ordered phase, an epoch whose quantization
    error regresses is rolled back, so the recorded error sequence is
    non-increasing at epoch boundaries.  Nodes that win no points after
    training are pruned.

    Deterministic for a fixed seed and point order.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array (num_points, dims)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite values")
    shape = (int(topology),) if np.isscalar(topology) else tuple(int(n) for n in topology)
    positions = _lattice_positions(shape)
    n_nodes = positions.shape[0]
    if pts.shape[0] < n_nodes:
        raise ValueError(f"{pts.shape[0]} points cannot seed {n_nodes} nodes")

    rng = np.random.default_rng(params.seed)
    unique = np.unique(pts, axis=0)
    if unique.shape[0] < n_nodes:
        raise ValueError(f"only {unique.shape[0]} distinct points for {n_nodes} nodes")
    weights = unique[rng.choice(unique.shape[0], size=n_nodes, replace=False)].copy()

    diameter = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    radius0 = params.radius_start if params.radius_start is not None else diameter / 2.0
    lat_d2 = ((positions[:, None, :] - positions[None, :, :]) ** 2).sum(axis=2)

    epochs = params.epochs
    ordered_epochs = max(int(np.ceil(params.ordered_fraction * epochs)), 1)
    qe_history: list[float] = []
    prev_qe = np.inf

    for epoch in range(epochs):
        frac = epoch / (epochs - 1) if epochs > 1 else 1.0
        lr = params.lr_start + (params.lr_end - params.lr_start) * frac
        in_ordered = epoch < ordered_epochs
        if in_ordered and ordered_epochs > 1:
            radius = radius0 * (1.0 - epoch / (ordered_epochs - 1))
        else:
            radius = 0.0

        snapshot = weights.copy()
        order = rng.permutation(pts.shape[0])
        for i in order:
            x = pts[i]
            d2 = ((weights - x) ** 2).sum(axis=1)
            winner = int(np.argmin(d2))
            if radius > 0.0:
                h = np.exp(-lat_d2[winner] / (2.0 * radius * radius))
                weights += lr * h[:, None] * (x - weights)
            else:
                weights[winner] += lr * (x - weights[winner])

        d2_all = ((pts[:, None, :] - weights[None, :, :]) ** 2).sum(axis=2)
        qe = float(np.sqrt(d2_all.min(axis=1)).mean())
        if in_ordered and qe > prev_qe:
            # Sequential updates do not guarantee monotone quantization
            # error; reject regressing epochs to keep the ordered phase
            # non-increasing at epoch boundaries.
            weights = snapshot
            qe = prev_qe
        qe_history.append(qe)
        prev_qe = qe

    d2_all = ((pts[:, None, :] - weights[None, :, :]) ** 2).sum(axis=2)
    wins = np.argmin(d2_all, axis=1)
    live = np.unique(wins)
    weights = weights[live]

    return SomMap(
        lattice_shape=shape,
        node_weights=weights,
        trained=True,
        quantization_errors=tuple(qe_history),
    )


def som_assign_batch(som: SomMap, queries: np.ndarray) -> np.ndarray:
    """Nearest-node index for each query row; ties pick the lowest index."""
    if not som.trained:
        raise ValueError("map is not trained")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != som.dims:
        raise ValueError(f"queries must have shape (n, {som.dims})")
    d2 = ((q[:, None, :] - som.node_weights[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def som_assign(som: SomMap, query: np.ndarray) -> int:
    """Cluster index of a single normalized query vector."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a 1-D vector")
    return int(som_assign_batch(som, q[None, :])[0])


@dataclass(frozen=True)
class ScalarGrouping:
    """Partition of output-scalar indices into disjoint covering groups."""

    num_scalars: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        flat = [i for g in self.groups for i in g]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty scalar group")
        if sorted(flat) != list(range(self.num_scalars)):
            raise ValueError("groups must partition all scalar indices")
        object.__setattr__(
            self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups)
        )

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def group_of(self, scalar_index: int) -> int:
        for gi, g in enumerate(self.groups):
            if scalar_index in g:
                return gi
        raise KeyError(scalar_index)


def _scalar_features(table: GridTable) -> np.ndarray:
    """Standardized profile vectors, one row per output scalar.

    Each scalar is sampled at a fixed low-discrepancy (Halton) set of up
    to 256 grid points, then shifted/scaled to zero mean and unit
    variance so affinely related scalars coincide.
    """
    n_samples = min(GROUPING_SAMPLES, table.num_points)
    if n_samples == table.num_points:
        flat = np.arange(table.num_points)
    else:
        halton = qmc.Halton(d=table.dims, scramble=False)
        u = halton.random(n_samples)
        idx_nd = [
            np.clip(np.round(u[:, d] * (n - 1)).astype(np.intp), 0, n - 1)
            for d, n in enumerate(len(a) for a in table.axes)
        ]
        flat = np.ravel_multi_index(idx_nd, table.shape)
    profiles = table.values[flat, :].T.copy()
    mean = profiles.mean(axis=1, keepdims=True)
    std = profiles.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    return (profiles - mean) / std


def group_scalars(
    table: GridTable, num_groups: int, params: SomTrainParams | None = None
) -> ScalarGrouping:
    """Partition output scalars by clustering their standardized profiles.

    A 1-D Kohonen map with ``num_groups`` nodes is trained on the scalar
    profile vectors; scalars sharing a winning node share a group.  Empty
    groups are pruned, so the result can have fewer groups than asked.
    """
    if not 1 <= num_groups <= table.num_scalars:
        raise ValueError(
            f"num_groups must be in 1..{table.num_scalars}, got {num_groups}"
        )
    features = _scalar_features(table)
    # Grouping has no meaningful lattice ordering, so the default radius
    # only spans immediate neighbours.
    params = params or SomTrainParams(epochs=40, radius_start=1.0, seed=0)
    distinct = np.unique(features, axis=0).shape[0]
    nodes = min(num_groups, distinct)
    som = som_train(features, (nodes,), params)
    wins = som_assign_batch(som, features)
    groups = [tuple(np.flatnonzero(wins == j)) for j in range(som.num_clusters)]
    groups = [g for g in groups if g]
    return ScalarGrouping(num_scalars=table.num_scalars, groups=tuple(groups))
