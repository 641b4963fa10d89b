"""Differentiable rotations, the embedded-deformation warp, and the two
cross-frame consistency losses.

The warp carries a point observed at a source frame to a target frame
by blending per-node rigid motions with normalized Gaussian skinning
weights. Consistency is enforced two ways: the encoder must predict
rotation-equivariant graphs (viewpoint consistency), and warped surface
points must land on the target frame's zero level set (surface
consistency).
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import sdfgrid as sg
from .defgraph import influence, _as_tensor

VC_WEIGHTS = (10.0, 1.0, 1e-4)  # position, importance weight, rotation
SUPPORT_EPS = 1e-12


class UnsupportedPointError(ValueError):
    """Raised when a warped point lies outside every node's influence."""


def axis_angle_to_matrix(aa):
    """Rotation matrices from axis-angle vectors (Rodrigues).

    Accepts a single (3,) vector or an (N, 3) batch; returns (3, 3) or
    (N, 3, 3). Smooth through the origin: the trig coefficients are
    evaluated as analytic functions of theta^2 with series fallbacks, so
    gradients are exact and stable for arbitrarily small angles.
    """
    aa = _as_tensor(aa)
    single = aa.ndim == 1
    if single:
        aa = dc.reshape(aa, (1, 3))
    n = aa.shape[0]
    x = dc.narrow(aa, 1, 0, 1)
    y = dc.narrow(aa, 1, 1, 1)
    z = dc.narrow(aa, 1, 2, 1)
    s = dc.reduce_sum(dc.square(aa), axis=1, keepdims=True)
    a = dc.rot_coeff_a(s)
    b = dc.rot_coeff_b(s)
    one = dc.constant(np.ones((n, 1), dtype=dc.float_dtype()))

    xx, yy, zz = dc.square(x), dc.square(y), dc.square(z)
    xy, xz, yz = dc.mul(x, y), dc.mul(x, z), dc.mul(y, z)
    r00 = dc.sub(one, dc.mul(b, dc.add(yy, zz)))
    r01 = dc.sub(dc.mul(b, xy), dc.mul(a, z))
    r02 = dc.add(dc.mul(b, xz), dc.mul(a, y))
    r10 = dc.add(dc.mul(b, xy), dc.mul(a, z))
    r11 = dc.sub(one, dc.mul(b, dc.add(xx, zz)))
    r12 = dc.sub(dc.mul(b, yz), dc.mul(a, x))
    r20 = dc.sub(dc.mul(b, xz), dc.mul(a, y))
    r21 = dc.add(dc.mul(b, yz), dc.mul(a, x))
    r22 = dc.sub(one, dc.mul(b, dc.add(xx, yy)))
    flat = dc.concat([r00, r01, r02, r10, r11, r12, r20, r21, r22], axis=1)
    if single:
        return dc.reshape(flat, (3, 3))
    return dc.reshape(flat, (n, 3, 3))


def _node_matrix(mats, i):
    """(3, 3) slice of an (N, 3, 3) rotation tensor."""
    return dc.reshape(dc.narrow(mats, 0, i, 1), (3, 3))


def normalized_influence(points, frame, radii, require_support=True):
    """Row-normalized skinning weights and the per-point support mask.

    These are the blend weights shared by the warp field and the
    interpolated implicit surface.
    """
    g = influence(points, frame.positions, radii, frame.weights)
    total = dc.reduce_sum(g, axis=1, keepdims=True)
    supported = total.data[:, 0] >= SUPPORT_EPS
    if require_support and not np.all(supported):
        bad = np.asarray(points.data if isinstance(points, dc.Tensor) else points)
        idx = int(np.flatnonzero(~supported)[0])
        raise UnsupportedPointError(
            f"point {bad[idx]} lies outside every node's influence")
    if not np.all(supported):
        # Unsupported rows are masked by every caller; floor their
        # denominator so they stay finite instead of dividing 0/0.
        total = dc.clamp(total, SUPPORT_EPS, np.inf)
    return dc.div(g, total), supported


def warp(points, source, target, radii, _require_support=True):
    """Carry points from the source frame to the target frame.

    Each node contributes the rigid motion that maps its source pose to
    its target pose; contributions blend with skinning weights that are
    the source-frame influences normalized to sum to one (so equal
    frames give the identity map). Points with no node support raise
    UnsupportedPointError.
    """
    points = _as_tensor(points)
    if source.n_nodes != target.n_nodes:
        raise ValueError("source and target frames must have equal node counts")
    ghat, supported = normalized_influence(points, source, radii, _require_support)
    n = source.n_nodes
    m = points.shape[0]
    rot_s = axis_angle_to_matrix(source.rotations)
    rot_t_inv = axis_angle_to_matrix(dc.neg(target.rotations))
    out = None
    for i in range(n):
        # Rows transform as x' = (x - v_s) Q^T + v_t with Q = R_t R_s^T;
        # Q^T = R_s R_t^T comes from composing R(aa_s) with R(-aa_t).
        qt = dc.matmul(_node_matrix(rot_s, i), _node_matrix(rot_t_inv, i))
        v_s = dc.narrow(source.positions, 0, i, 1)
        v_t = dc.narrow(target.positions, 0, i, 1)
        moved = dc.add(dc.matmul(dc.sub(points, v_s), qt), v_t)
        term = dc.mul(dc.narrow(ghat, 1, i, 1), moved)
        out = term if out is None else dc.add(out, term)
    return (out, supported) if not _require_support else out


def warp_positions(points, source, target, radii):
    """Non-differentiating convenience: warped coordinates as ndarray."""
    return warp(points, source, target, radii).data.copy()


def _rotation_correction(angle):
    """Constant 9x9 map sending row-major R.flat to (R_y(angle) @ R).flat."""
    return np.kron(sg.rotation_y(angle), np.eye(3)).T


def vc_from_frames(frame_a, alpha, frame_b, beta, volume_center,
                   weights=VC_WEIGHTS):
    """Viewpoint-consistency residual between two already-encoded frames.

    Each frame was predicted from the input volume resampled by its
    angle, which presents the object rotated by R_y(angle)^T; undoing
    that (rotate positions by R_y(angle) about the volume center,
    left-compose R_y(angle) onto node rotations) must give matching
    graphs. Weighted squared differences over positions, importance
    weights, and rotation matrices.
    """
    lam_pos, lam_w, lam_rot = weights
    center = dc.constant(np.asarray(volume_center, dtype=dc.float_dtype()))
    total = dc.constant(0.0)
    corrected = []
    for frame, angle in ((frame_a, alpha), (frame_b, beta)):
        rot_y = dc.constant(sg.rotation_y(angle).T.astype(dc.float_dtype()))
        pos = dc.add(dc.matmul(dc.sub(frame.positions, center), rot_y), center)
        n = frame.n_nodes
        flat = dc.reshape(axis_angle_to_matrix(frame.rotations), (n, 9))
        mats = dc.matmul(flat, dc.constant(
            _rotation_correction(angle).astype(dc.float_dtype())))
        corrected.append((pos, mats, frame.weights))
    (pa, ma, wa), (pb, mb, wb) = corrected
    total = dc.add(total, dc.mul(dc.reduce_sum(dc.square(dc.sub(pa, pb))),
                                 dc.constant(lam_pos)))
    total = dc.add(total, dc.mul(dc.reduce_sum(dc.square(dc.sub(wa, wb))),
                                 dc.constant(lam_w)))
    total = dc.add(total, dc.mul(dc.reduce_sum(dc.square(dc.sub(ma, mb))),
                                 dc.constant(lam_rot)))
    return total


def loss_viewpoint_consistency(volume, alpha, beta, encode, weights=VC_WEIGHTS):
    """Encode the volume resampled by two angles and compare the graphs
    after undoing each rotation. ``encode`` maps SdfVolume -> GraphFrame."""
    frame_a = encode(sg.resample_rotated(volume, alpha))
    frame_b = encode(sg.resample_rotated(volume, beta))
    center = (volume.origin + volume.max_corner()) / 2.0
    return vc_from_frames(frame_a, alpha, frame_b, beta, center, weights)


def loss_surface_consistency(points, source, target, radii, target_volume):
    """Warped surface samples must land on the target zero level set.

    Sum of squared sampled distances at the warped positions; samples
    the warp cannot support, or that land outside the grid, contribute
    the worst case truncation^2 instead (constant, no gradient).
    """
    points = _as_tensor(points)
    warped, supported = warp(points, source, target, radii,
                             _require_support=False)
    origin = np.asarray(target_volume.origin, dtype=np.float64)
    extent = (np.asarray(target_volume.resolution) - 1) * target_volume.voxel_size
    in_grid = np.all((warped.data >= origin - 1e-12)
                     & (warped.data <= origin + extent + 1e-12), axis=1)
    usable = supported & in_grid
    penalty = float(np.count_nonzero(~usable)) * target_volume.truncation ** 2
    total = dc.constant(penalty)
    if np.any(usable):
        vals = dc.constant(target_volume.values.astype(dc.float_dtype()))
        rows = _rows(warped, np.flatnonzero(usable))
        sampled = dc.trilinear_gather(vals, rows, origin,
                                      target_volume.voxel_size)
        total = dc.add(total, dc.reduce_sum(dc.square(sampled)))
    return total


def _rows(t, idx):
    from .defgraph import _gather_rows
    return _gather_rows(t, idx)


def rotation_orthonormality_error(mats):
    """max |R R^T - I| over a batch; sanity metric for tests and logs."""
    m = mats.data if isinstance(mats, dc.Tensor) else np.asarray(mats)
    m = m.reshape(-1, 3, 3)
    eye = np.eye(3)
    return max(np.abs(r @ r.T - eye).max() for r in m)
