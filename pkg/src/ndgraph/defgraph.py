"""Deformation-graph state and its four shaping losses.

A deformation graph is a fixed-size set of nodes, each carrying a
position, an axis-angle rotation, and a positive importance weight,
predicted independently for every frame. Sequence-wide state (node
radii, affinity parameters, inter-node distances) is optimized jointly
across the whole sequence. The losses below pull the nodes onto the
shape (coverage, interior) and give the graph a stable, sparse
connectivity (affinity, sparsity).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

INTERIOR_SAMPLE_WEIGHT = 10.0


class GraphError(ValueError):
    """Raised for structurally invalid graph state."""


def _as_tensor(x):
    if isinstance(x, dc.Tensor):
        return x
    return dc.constant(np.asarray(x, dtype=dc.float_dtype()))


@dataclass
class GraphFrame:
    """Per-frame node state: positions, axis-angle rotations, weights.

    Weights must already be positive (the encoder emits them through a
    softplus; hand-built graphs must respect the same contract).
    """

    positions: dc.Tensor
    rotations: dc.Tensor
    weights: dc.Tensor

    def __post_init__(self):
        self.positions = _as_tensor(self.positions)
        self.rotations = _as_tensor(self.rotations)
        self.weights = _as_tensor(self.weights)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.rotations.shape != (n, 3):
            raise GraphError(
                f"positions/rotations must be (N, 3), got "
                f"{self.positions.shape} and {self.rotations.shape}")
        if self.weights.shape != (n,):
            raise GraphError(f"weights must be (N,), got {self.weights.shape}")
        # Softplus output is positive in exact arithmetic; float32 may
        # underflow to 0 for very negative raw weights, which just
        # disables the node. Only genuinely negative weights are invalid.
        if np.any(self.weights.data < 0):
            raise GraphError("importance weights must be nonnegative")
        if not (np.all(np.isfinite(self.positions.data))
                and np.all(np.isfinite(self.rotations.data))):
            raise GraphError("graph frame contains non-finite entries")

    @property
    def n_nodes(self):
        return self.positions.shape[0]


@dataclass
class GraphGlobals:
    """Sequence-wide graph state.

    Radii are stored as log-radius and affinities as K free N x N
    matrices so Adam can run unconstrained; ``radii()`` and
    ``affinity()`` expose the constrained quantities.
    """

    log_radii: dc.Tensor
    affinity_params: list
    node_distances: dc.Tensor

    def __post_init__(self):
        self.log_radii = _as_tensor(self.log_radii)
        self.affinity_params = [_as_tensor(a) for a in self.affinity_params]
        self.node_distances = _as_tensor(self.node_distances)
        n = self.log_radii.shape[0]
        for a in self.affinity_params:
            if a.shape != (n, n):
                raise GraphError(f"affinity matrices must be ({n}, {n}), got {a.shape}")
        if self.node_distances.shape != (n, n):
            raise GraphError(
                f"node distances must be ({n}, {n}), got {self.node_distances.shape}")

    @property
    def n_nodes(self):
        return self.log_radii.shape[0]

    def radii(self):
        return dc.exp(self.log_radii)

    def affinity(self):
        """Mean of the row-softmaxed affinity matrices; rows sum to 1."""
        acc = None
        for a in self.affinity_params:
            sm = dc.softmax_rows(a)
            acc = sm if acc is None else dc.add(acc, sm)
        return dc.mul(acc, dc.constant(1.0 / len(self.affinity_params)))

    def parameters(self):
        tensors = [self.log_radii, *self.affinity_params, self.node_distances]
        return {t.name: t for t in tensors}


def init_graph_globals(n_nodes, k_neighbors=2, radius=0.3, distance=0.3, seed=0):
    """Fresh sequence-wide state: shared radius, near-uniform affinities.

    Affinity matrices start as tiny i.i.d. noise so the row softmaxes
    are almost uniform but tie-free; distances start at a typical
    unit-cube node spacing.
    """
    if n_nodes < 1 or k_neighbors < 1:
        raise GraphError("need at least one node and one affinity matrix")
    rng = np.random.default_rng(seed)
    dt = dc.float_dtype()
    log_r = dc.parameter(np.full(n_nodes, np.log(radius), dtype=dt), name="log_radii")
    affs = [dc.parameter(rng.normal(0.0, 0.01, (n_nodes, n_nodes)).astype(dt),
                         name=f"affinity_{i}")
            for i in range(k_neighbors)]
    dist = dc.parameter(np.full((n_nodes, n_nodes), distance, dtype=dt),
                        name="node_distances")
    return GraphGlobals(log_r, affs, dist)


@dataclass
class CoverageParams:
    offset: float = 0.07
    sharpness: float = 100.0

    def __post_init__(self):
        if self.sharpness <= 0:
            raise GraphError("coverage sharpness must be positive")


def influence(points, positions, radii, weights):
    """Per-node Gaussian influence of the graph at query points.

    Returns an (M, N) tensor with entry w_i * exp(-|x - v_i|^2 / r_i^2):
    the weight at x = v_i, decaying with distance on the node's radius
    scale. Differentiable in every argument.
    """
    points = _as_tensor(points)
    positions = _as_tensor(positions)
    radii = _as_tensor(radii)
    weights = _as_tensor(weights)
    m = points.shape[0]
    n = positions.shape[0]
    diff = dc.sub(dc.reshape(points, (m, 1, 3)), dc.reshape(positions, (1, n, 3)))
    sq = dc.reduce_sum(dc.square(diff), axis=2)
    inv_r2 = dc.reshape(dc.div(dc.constant(1.0), dc.square(radii)), (1, n))
    return dc.mul(dc.reshape(weights, (1, n)), dc.exp(dc.neg(dc.mul(sq, inv_r2))))


def coverage(points, frame, radii, params=CoverageParams()):
    """Soft covered/free indicator in (0, 1) per query point.

    A sharp sigmoid of the summed node influence minus a small offset:
    near 1 where some node's Gaussian reaches the point, near 0 in free
    space.
    """
    g = influence(points, frame.positions, radii, frame.weights)
    total = dc.reduce_sum(g, axis=1)
    return dc.sigmoid(dc.mul(dc.sub(total, dc.constant(params.offset)),
                             dc.constant(params.sharpness)))


def _weighted_coverage_term(points, labels, sdf, frame, radii, params):
    if len(points) == 0:
        return dc.constant(0.0)
    pred = coverage(points, frame, radii, params)
    target = dc.constant(np.asarray(labels, dtype=dc.float_dtype()))
    # Interior points are few but load-bearing; weight them up.
    w = np.where(np.asarray(sdf) < 0, INTERIOR_SAMPLE_WEIGHT, 1.0)
    sq = dc.square(dc.sub(pred, target))
    return dc.reduce_sum(dc.mul(sq, dc.constant(w.astype(dc.float_dtype()))))


def loss_coverage(samples, frame, radii, params=CoverageParams(),
                  lam_uniform=1.0, lam_near=0.1):
    """Squared error between predicted coverage and visibility labels.

    Uniform and near-surface sample sets enter with their own weights;
    samples with a negative distance label count 10x.
    """
    un = _weighted_coverage_term(samples.p_uniform, samples.c_uniform,
                                 samples.sdf_uniform, frame, radii, params)
    ns = _weighted_coverage_term(samples.p_near, samples.c_near,
                                 samples.sdf_near, frame, radii, params)
    return dc.add(dc.mul(un, dc.constant(lam_uniform)),
                  dc.mul(ns, dc.constant(lam_near)))


def loss_interior(frame, volume):
    """Hinge on the sampled distance at each node: positive values (node
    outside the surface) are penalized, negative are free. Nodes that
    leave the grid entirely pay the squared distance to the nearest
    grid corner."""
    pos = frame.positions
    origin = np.asarray(volume.origin, dtype=np.float64)
    extent = (np.asarray(volume.resolution) - 1) * volume.voxel_size
    inside = np.all((pos.data >= origin - 1e-12)
                    & (pos.data <= origin + extent + 1e-12), axis=1)
    total = dc.constant(0.0)
    if np.any(inside):
        vals = dc.constant(volume.values.astype(dc.float_dtype()))
        pts = _gather_rows(pos, np.flatnonzero(inside))
        sampled = dc.trilinear_gather(vals, pts, origin, volume.voxel_size)
        total = dc.add(total, dc.reduce_sum(dc.relu(sampled)))
    if np.any(~inside):
        out_idx = np.flatnonzero(~inside)
        pts = _gather_rows(pos, out_idx)
        corners = origin + extent * _CORNER_UNIT
        # Nearest corner chosen on detached values; distance stays
        # differentiable through the positions.
        d2 = ((pos.data[out_idx, None, :] - corners[None, :, :]) ** 2).sum(axis=2)
        chosen = dc.constant(corners[np.argmin(d2, axis=1)].astype(dc.float_dtype()))
        total = dc.add(total, dc.reduce_sum(dc.square(dc.sub(pts, chosen))))
    return total


_CORNER_UNIT = np.array([[x, y, z] for x in (0.0, 1.0)
                         for y in (0.0, 1.0) for z in (0.0, 1.0)])


def _gather_rows(t, idx):
    """Row subset of a (N, D) tensor via narrow/concat (keeps gradients)."""
    idx = np.asarray(idx)
    if len(idx) == t.shape[0] and np.array_equal(idx, np.arange(t.shape[0])):
        return t
    pieces = []
    start = 0
    while start < len(idx):
        stop = start
        while stop + 1 < len(idx) and idx[stop + 1] == idx[stop] + 1:
            stop += 1
        pieces.append(dc.narrow(t, 0, int(idx[start]), int(stop - start + 1)))
        start = stop + 1
    return pieces[0] if len(pieces) == 1 else dc.concat(pieces, axis=0)


def _offdiag_mask(n):
    return (1.0 - np.eye(n)).astype(dc.float_dtype())


def pairwise_sq_distances(positions):
    n = positions.shape[0]
    diff = dc.sub(dc.reshape(positions, (n, 1, 3)),
                  dc.reshape(positions, (1, n, 3)))
    return dc.reduce_sum(dc.square(diff), axis=2)


def loss_affinity(aff, distances, frame, lam_rel=0.1, lam_abs=0.1):
    """Edge-weighted length regularity of the graph.

    The relative term asks each edge's optimized distance to track the
    actual node separation across frames; the absolute term shrinks
    edges outright. Diagonal (self) edges are excluded.
    """
    n = frame.n_nodes
    mask = dc.constant(_offdiag_mask(n))
    sq_len = pairwise_sq_distances(frame.positions)
    rel = dc.absval(dc.sub(dc.square(distances), sq_len))
    e_masked = dc.mul(aff, mask)
    rel_term = dc.reduce_sum(dc.mul(e_masked, rel))
    abs_term = dc.reduce_sum(dc.mul(e_masked, sq_len))
    return dc.add(dc.mul(rel_term, dc.constant(lam_rel)),
                  dc.mul(abs_term, dc.constant(lam_abs)))


def loss_sparsity(affinity_params):
    """Pushes the K affinity matrices toward disjoint neighbor choices:
    the Frobenius overlap of every ordered pair of row-softmaxes."""
    if len(affinity_params) < 2:
        return dc.constant(0.0)
    sms = [dc.softmax_rows(a) for a in affinity_params]
    total = dc.constant(0.0)
    for l, sl in enumerate(sms):
        for m, sm in enumerate(sms):
            if l == m:
                continue
            total = dc.add(total, dc.reduce_sum(dc.square(dc.mul(sl, sm))))
    return total


def hard_neighbors(graph_globals):
    """Debug export: argmax neighbor per row of each affinity softmax.

    Not used by any loss; handy for visualizing connectivity.
    """
    out = []
    for a in graph_globals.affinity_params:
        row = a.data - a.data.max(axis=1, keepdims=True)
        ex = np.exp(row)
        out.append(np.argmax(ex / ex.sum(axis=1, keepdims=True), axis=1))
    return np.stack(out)
