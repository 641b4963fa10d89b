"""Pose-conditioned implicit surface interpolated across graph nodes.

Each node carries a small MLP that predicts signed distance in the
node's local coordinate frame from a positional encoding of the query
point plus a pose code projected from the graph embedding. The global
field blends the per-node predictions with the same normalized skinning
weights as the warp, so deforming the graph deforms the surface.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .deformation import axis_angle_to_matrix, normalized_influence

POSENC_BANDS = 5
POSENC_DIM = 6 * POSENC_BANDS          # sin and cos of 5 bands per coordinate
CODE_DIM = 32
MLP_WIDTH = 32
MLP_LAYERS = 8
SKIP_LAYER = 5                          # this layer's input regains the MLP input


def positional_encoding(points):
    """(M, 3) points -> (M, 30) frequency features.

    Columns run band-major, coordinate-minor: for each frequency
    2^l * pi (l = 0..4) the six columns sin/cos of x, y, z.
    """
    points = points if isinstance(points, dc.Tensor) else dc.constant(points)
    columns = []
    for band in range(POSENC_BANDS):
        scaled = dc.mul(points, dc.constant(np.pi * 2.0 ** band))
        s, c = dc.sin(scaled), dc.cos(scaled)
        for coord in range(3):
            columns.append(dc.narrow(s, 1, coord, 1))
            columns.append(dc.narrow(c, 1, coord, 1))
    return dc.concat(columns, axis=1)


def node_local_coords(points, frame, node):
    """Queries expressed in one node's rigid frame: R_i^T (x - v_i)."""
    points = points if isinstance(points, dc.Tensor) else dc.constant(points)
    rot = axis_angle_to_matrix(dc.reshape(
        dc.narrow(frame.rotations, 0, node, 1), (3,)))
    v = dc.narrow(frame.positions, 0, node, 1)
    # rows (x - v)^T R are the transposed local coordinates R^T (x - v)
    return dc.matmul(dc.sub(points, v), rot)


class PoseProjection:
    """Per-node linear maps from the 7N graph embedding to pose codes.

    All N maps are stacked into one (N * code_dim, 7N) matrix so a
    single product produces every node's code; there is no bias.
    """

    def __init__(self, n_nodes, weight, code_dim=CODE_DIM):
        self.n_nodes = n_nodes
        self.code_dim = code_dim
        self.weight = weight

    @staticmethod
    def init(n_nodes, seed=0, code_dim=CODE_DIM):
        rng = np.random.default_rng(seed)
        fan_in = 7 * n_nodes
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (n_nodes * code_dim, fan_in))
        return PoseProjection(
            n_nodes, dc.parameter(w.astype(dc.float_dtype()), name="pose_proj.w"),
            code_dim)

    def codes(self, embedding):
        """(7N,) embedding -> (N, code_dim) pose codes."""
        col = dc.reshape(embedding, (embedding.shape[0], 1))
        return dc.reshape(dc.matmul(self.weight, col),
                          (self.n_nodes, self.code_dim))

    def parameters(self):
        return {self.weight.name: self.weight}


class NodeMlpParams:
    """One node's signed-distance MLP: 8 linear layers of width 32.

    The input is [pose code, positional encoding]; layer SKIP_LAYER
    sees that input concatenated back onto its features; every layer
    but the last is followed by a leaky ReLU.
    """

    def __init__(self, prefix, params):
        self.prefix = prefix
        self.params = params

    @staticmethod
    def layer_shapes(code_dim=CODE_DIM):
        n_in = code_dim + POSENC_DIM
        shapes = []
        for layer in range(MLP_LAYERS):
            cin = MLP_WIDTH if layer else n_in
            if layer == SKIP_LAYER:
                cin += n_in
            cout = 1 if layer == MLP_LAYERS - 1 else MLP_WIDTH
            shapes.append((cout, cin))
        return shapes

    @staticmethod
    def init(prefix, seed=0, code_dim=CODE_DIM):
        rng = np.random.default_rng(seed)
        dt = dc.float_dtype()
        params = {}
        for layer, (cout, cin) in enumerate(NodeMlpParams.layer_shapes(code_dim)):
            bound = np.sqrt(6.0 / cin)
            params[f"{prefix}.l{layer}.w"] = dc.parameter(
                rng.uniform(-bound, bound, (cout, cin)).astype(dt),
                name=f"{prefix}.l{layer}.w")
            params[f"{prefix}.l{layer}.b"] = dc.parameter(
                np.zeros(cout, dtype=dt), name=f"{prefix}.l{layer}.b")
        return NodeMlpParams(prefix, params)

    def forward(self, features, slope=0.01):
        """(M, code_dim + 30) features -> (M, 1) signed distances."""
        h = features
        for layer in range(MLP_LAYERS):
            if layer == SKIP_LAYER:
                h = dc.concat([h, features], axis=1)
            h = dc.linear(h, self.params[f"{self.prefix}.l{layer}.w"],
                          self.params[f"{self.prefix}.l{layer}.b"])
            if layer < MLP_LAYERS - 1:
                h = dc.leaky_relu(h, slope)
        return h

    def parameters(self):
        return dict(self.params)


def init_node_mlps(n_nodes, seed=0, code_dim=CODE_DIM):
    """Independent MLPs named node000, node001, ... with distinct inits."""
    return [NodeMlpParams.init(f"node{i:03d}", seed=seed * 7919 + i,
                               code_dim=code_dim)
            for i in range(n_nodes)]


def _tile_rows(row, m):
    """(1, D) tensor repeated into (M, D) via an outer product."""
    return dc.matmul(dc.constant(np.ones((m, 1), dtype=row.data.dtype)), row)


def global_sdf(points, frame, radii, projection, mlps, embedding,
               truncation=0.1):
    """Blended signed distance of the query points under one frame.

    Returns (values, supported): a (M,) tensor and a boolean mask.
    Unsupported points take the constant +truncation and contribute no
    gradient.
    """
    points = points if isinstance(points, dc.Tensor) else dc.constant(points)
    m = points.shape[0]
    ghat, supported = normalized_influence(points, frame, radii,
                                           require_support=False)
    codes = projection.codes(embedding)
    out = None
    for i, mlp in enumerate(mlps):
        local = node_local_coords(points, frame, i)
        feats = dc.concat([_tile_rows(dc.narrow(codes, 0, i, 1), m),
                           positional_encoding(local)], axis=1)
        term = dc.mul(dc.narrow(ghat, 1, i, 1), mlp.forward(feats))
        out = term if out is None else dc.add(out, term)
    out = dc.reshape(out, (m,))
    if not np.all(supported):
        mask = supported.astype(out.data.dtype)
        out = dc.add(dc.mul(out, dc.constant(mask)),
                     dc.constant((1.0 - mask) * truncation))
    return out, supported


def loss_recon(predicted, labels, truncation=0.1):
    """L1 between predictions and labels, both clamped to the truncation band."""
    labels = np.clip(np.asarray(labels, dtype=dc.float_dtype()),
                     -truncation, truncation)
    clamped = dc.clamp(predicted, -truncation, truncation)
    return dc.reduce_sum(dc.absval(dc.sub(clamped, dc.constant(labels))))
