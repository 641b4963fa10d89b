"""3-D convolutional encoder mapping an SDF volume to a deformation
graph embedding.

The trunk downsamples the volume with stride-2 convolutions, each
followed by two residual units; the flattened features feed a shared
linear layer and two small heads. One head emits the per-node axis
angle rotations, the other the node positions and raw importance
weights; the raw weights pass through a softplus so the graph contract
(strictly positive weights) holds for any parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .defgraph import GraphFrame


class ConfigError(ValueError):
    """Raised for encoder configurations that cannot produce a graph."""


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the network. The defaults are the desk-scale setup (a
    32-cube input and 16 nodes); the full-scale shape is the same code
    with more stages, channels, and head width."""

    resolution: int = 32
    channels: tuple = (8, 16, 32)
    n_nodes: int = 16
    head_width: int = 256
    residual_units: int = 2
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1

    def __post_init__(self):
        spatial = self.resolution
        for _ in self.channels:
            if spatial < 2:
                raise ConfigError(
                    f"resolution {self.resolution} too small for "
                    f"{len(self.channels)} stride-2 stages")
            spatial //= 2
        if self.head_width < 7 * self.n_nodes:
            raise ConfigError(
                f"head width {self.head_width} below embedding size "
                f"{7 * self.n_nodes}")

    @property
    def final_spatial(self):
        return self.resolution // (2 ** len(self.channels))

    @property
    def trunk_features(self):
        return self.channels[-1] * self.final_spatial ** 3

    @property
    def embedding_size(self):
        return 7 * self.n_nodes


def _kaiming(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class EncoderParams:
    """Named parameter tensors plus batchnorm running buffers.

    ``params`` maps name -> Tensor (optimized); ``buffers`` maps
    name -> ndarray (mutated by train-mode batchnorm, saved alongside).
    Iteration order is fixed by construction, which keeps gradient
    accumulation and checkpoints deterministic.
    """

    def __init__(self, config, params, buffers):
        self.config = config
        self.params = params
        self.buffers = buffers

    def parameters(self):
        return dict(self.params)

    @staticmethod
    def init(config, seed=0):
        rng = np.random.default_rng(seed)
        dt = dc.float_dtype()
        params = {}
        buffers = {}

        def conv(name, c_in, c_out):
            fan = c_in * 27
            params[f"{name}.w"] = dc.parameter(
                _kaiming(rng, fan, (c_out, c_in, 3, 3, 3), dt), name=f"{name}.w")
            params[f"{name}.b"] = dc.parameter(np.zeros(c_out, dtype=dt),
                                               name=f"{name}.b")

        def bn(name, c):
            params[f"{name}.gamma"] = dc.parameter(np.ones(c, dtype=dt),
                                                   name=f"{name}.gamma")
            params[f"{name}.beta"] = dc.parameter(np.zeros(c, dtype=dt),
                                                  name=f"{name}.beta")
            buffers[f"{name}.mean"] = np.zeros(c, dtype=np.float64)
            buffers[f"{name}.var"] = np.ones(c, dtype=np.float64)

        def lin(name, n_in, n_out):
            params[f"{name}.w"] = dc.parameter(
                _kaiming(rng, n_in, (n_out, n_in), dt), name=f"{name}.w")
            params[f"{name}.b"] = dc.parameter(np.zeros(n_out, dtype=dt),
                                               name=f"{name}.b")

        c_prev = 1
        for s, c_out in enumerate(config.channels):
            conv(f"stage{s}.down", c_prev, c_out)
            bn(f"stage{s}.down.bn", c_out)
            for u in range(config.residual_units):
                conv(f"stage{s}.res{u}.conv1", c_out, c_out)
                bn(f"stage{s}.res{u}.bn1", c_out)
                conv(f"stage{s}.res{u}.conv2", c_out, c_out)
                bn(f"stage{s}.res{u}.bn2", c_out)
            c_prev = c_out
        lin("trunk", config.trunk_features, config.head_width)
        n = config.n_nodes
        for layer, (n_in, n_out) in enumerate(
                ((config.head_width, config.head_width),
                 (config.head_width, config.head_width),
                 (config.head_width, 3 * n))):
            lin(f"head_rot.l{layer}", n_in, n_out)
        for layer, (n_in, n_out) in enumerate(
                ((config.head_width, config.head_width),
                 (config.head_width, config.head_width),
                 (config.head_width, 4 * n))):
            lin(f"head_geo.l{layer}", n_in, n_out)
        return EncoderParams(config, params, buffers)


def _bn(x, params, buffers, name, training, momentum):
    return dc.batchnorm3d(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                          buffers[f"{name}.mean"], buffers[f"{name}.var"],
                          training, momentum=momentum)


def forward_batch(x, enc, training=False):
    """Embeddings for a batch of volumes.

    x: (B, 1, R, R, R) tensor of SDF values. Returns a (B, 7N) tensor
    ordered [positions, rotations, raw weights] per row.
    """
    cfg = enc.config
    p, bufs = enc.params, enc.buffers
    if x.ndim != 5 or x.shape[2] != cfg.resolution:
        raise ConfigError(
            f"input shape {x.shape} does not match resolution {cfg.resolution}")
    for s in range(len(cfg.channels)):
        x = dc.conv3d(x, p[f"stage{s}.down.w"], p[f"stage{s}.down.b"],
                      stride=2, padding=1)
        x = dc.relu(_bn(x, p, bufs, f"stage{s}.down.bn", training,
                        cfg.bn_momentum))
        for u in range(cfg.residual_units):
            y = dc.conv3d(x, p[f"stage{s}.res{u}.conv1.w"],
                          p[f"stage{s}.res{u}.conv1.b"], stride=1, padding=1)
            y = dc.relu(_bn(y, p, bufs, f"stage{s}.res{u}.bn1", training,
                            cfg.bn_momentum))
            y = dc.conv3d(y, p[f"stage{s}.res{u}.conv2.w"],
                          p[f"stage{s}.res{u}.conv2.b"], stride=1, padding=1)
            y = _bn(y, p, bufs, f"stage{s}.res{u}.bn2", training,
                    cfg.bn_momentum)
            x = dc.relu(dc.add(x, y))
    b = x.shape[0]
    x = dc.reshape(x, (b, cfg.trunk_features))
    x = dc.leaky_relu(dc.linear(x, p["trunk.w"], p["trunk.b"]),
                      cfg.leaky_slope)

    def head(name, h):
        for layer in range(3):
            h = dc.linear(h, p[f"{name}.l{layer}.w"], p[f"{name}.l{layer}.b"])
            if layer < 2:
                h = dc.leaky_relu(h, cfg.leaky_slope)
        return h

    rot = head("head_rot", x)                        # (B, 3N)
    geo = head("head_geo", x)                        # (B, 3N + N)
    n = cfg.n_nodes
    positions = dc.narrow(geo, 1, 0, 3 * n)
    raw_weights = dc.narrow(geo, 1, 3 * n, n)
    return dc.concat([positions, rot, raw_weights], axis=1)


def graph_frame_from_embedding(row):
    """GraphFrame for one embedding row ((7N,) or (1, 7N) tensor)."""
    if row.ndim == 2:
        row = dc.reshape(row, (row.shape[1],))
    n = row.shape[0] // 7
    positions = dc.reshape(dc.narrow(row, 0, 0, 3 * n), (n, 3))
    rotations = dc.reshape(dc.narrow(row, 0, 3 * n, 3 * n), (n, 3))
    weights = dc.softplus(dc.narrow(row, 0, 6 * n, n))
    return GraphFrame(positions, rotations, weights)


def volume_tensor(volumes):
    """Stack SdfVolume values into a constant (B, 1, R, R, R) tensor."""
    arrs = [np.asarray(v.values, dtype=dc.float_dtype()) for v in volumes]
    return dc.constant(np.stack(arrs)[:, None])


def ndg_forward(volume, enc, training=False):
    """Predict the deformation graph of a single volume.

    Returns (GraphFrame, embedding) where the embedding is the raw 7N
    vector [positions, rotations, raw weights].
    """
    emb = forward_batch(volume_tensor([volume]), enc, training)
    row = dc.reshape(emb, (emb.shape[1],))
    return graph_frame_from_embedding(row), row


def encode_volume(enc, training=False):
    """Closure suitable for loss_viewpoint_consistency: volume -> frame."""
    def encode(volume):
        frame, _ = ndg_forward(volume, enc, training)
        return frame
    return encode
