"""Composite gradient checks, one per training loss.

Each entry builds a small randomized configuration whose finite
differences stay clear of non-smooth points: graph nodes keep a wide
margin from grid boundaries and cell faces, distance labels avoid the
truncation clamp and the L1 kink, and affinity distances keep the
absolute-difference argument away from zero. The checks exercise the
same code paths the trainer differentiates, at toy sizes.
"""

from __future__ import annotations

import numpy as np

from . import defgraph as dg
from . import deformation as df
from . import diffcore as dc
from . import gradcheck as gc
from . import implicitsurf as isf
from . import sdfgrid as sg


def _signed_margin(rng, shape, lo, hi):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _frame_arrays(rng, n, prefix=""):
    return {
        f"{prefix}pos": rng.uniform(0.3, 0.7, (n, 3)),
        f"{prefix}rot": rng.uniform(-0.6, 0.6, (n, 3)),
        f"{prefix}wts": rng.uniform(0.5, 2.0, n),
    }


def _smooth_volume(rng, res=8, scale=0.05, floor=None):
    vals = rng.normal(size=(res, res, res)) * scale
    if floor is not None:
        vals = np.abs(vals) + floor
    return sg.SdfVolume(vals, np.zeros(3), 1.0 / (res - 1), 0.1)


def check_coverage(seed):
    rng = np.random.default_rng(seed)
    n = 3

    class Samples:
        p_uniform = rng.uniform(0.1, 0.9, (12, 3))
        p_near = rng.uniform(0.2, 0.8, (8, 3))
        c_uniform = rng.integers(0, 2, 12).astype(float)
        c_near = rng.integers(0, 2, 8).astype(float)
        sdf_uniform = _signed_margin(rng, 12, 0.02, 0.1)
        sdf_near = _signed_margin(rng, 8, 0.02, 0.1)

    arrays = dict(_frame_arrays(rng, n), log_radii=rng.uniform(-1.2, -0.7, n))

    def build(t):
        frame = dg.GraphFrame(t["pos"], t["rot"], t["wts"])
        return dg.loss_coverage(Samples, frame, dc.exp(t["log_radii"]))

    return gc.check_gradient(build, arrays, eps=1e-6)


def check_interior(seed):
    rng = np.random.default_rng(seed)
    vol = _smooth_volume(rng, floor=0.02)
    pos = gc._interior_points(rng, 4, vol.resolution, vol.origin,
                              vol.voxel_size)
    pos = np.concatenate([pos, [[1.4, 1.2, -0.3]]])  # one escaped node

    def build(t):
        frame = dg.GraphFrame(t["pos"], np.zeros((5, 3)), np.ones(5))
        return dg.loss_interior(frame, vol)

    return gc.check_gradient(build, {"pos": pos})


def check_affinity(seed):
    rng = np.random.default_rng(seed)
    n = 3
    pos = rng.uniform(0.2, 0.8, (n, 3))
    sq = np.sum((pos[:, None] - pos[None]) ** 2, axis=-1)
    arrays = {
        "pos": pos,
        "aff0": rng.normal(size=(n, n)),
        "aff1": rng.normal(size=(n, n)),
        # keep D^2 - |v_a - v_b|^2 away from the absolute-value kink
        "dist": np.sqrt(sq + rng.uniform(0.2, 0.5, (n, n))),
    }

    def build(t):
        frame = dg.GraphFrame(t["pos"], np.zeros((n, 3)), np.ones(n))
        sm = [dc.softmax_rows(t["aff0"]), dc.softmax_rows(t["aff1"])]
        aff = dc.mul(dc.add(sm[0], sm[1]), dc.constant(0.5))
        return dg.loss_affinity(aff, t["dist"], frame)

    return gc.check_gradient(build, arrays)


def check_sparsity(seed):
    rng = np.random.default_rng(seed)
    arrays = {"aff0": rng.normal(size=(4, 4)), "aff1": rng.normal(size=(4, 4))}

    def build(t):
        return dg.loss_sparsity([t["aff0"], t["aff1"]])

    return gc.check_gradient(build, arrays)


def check_viewpoint_consistency(seed):
    rng = np.random.default_rng(seed)
    n = 3
    alpha, beta = rng.uniform(0, 2 * np.pi, 2)
    arrays = dict(_frame_arrays(rng, n, "a_"), **_frame_arrays(rng, n, "b_"))

    def build(t):
        a = dg.GraphFrame(t["a_pos"], t["a_rot"], t["a_wts"])
        b = dg.GraphFrame(t["b_pos"], t["b_rot"], t["b_wts"])
        return df.vc_from_frames(a, alpha, b, beta, np.full(3, 0.5))

    return gc.check_gradient(build, arrays)


def check_surface_consistency(seed):
    rng = np.random.default_rng(seed)
    vol = _smooth_volume(rng)
    n = 3
    # near-identity motion keeps the warped points inside their cells,
    # clear of the trilinear gradient discontinuities at the faces
    points = gc._interior_points(rng, 6, vol.resolution, vol.origin,
                                 vol.voxel_size)
    src = rng.uniform(0.35, 0.65, (n, 3))
    arrays = {
        "src_pos": src,
        "dst_pos": src + rng.uniform(-0.008, 0.008, (n, 3)),
        "rot": rng.uniform(-0.02, 0.02, (n, 3)),
        "wts": rng.uniform(0.8, 1.5, n),
        "radii": rng.uniform(0.3, 0.5, n),
    }

    def build(t):
        a = dg.GraphFrame(t["src_pos"], t["rot"], t["wts"])
        b = dg.GraphFrame(t["dst_pos"], t["rot"], t["wts"])
        return df.loss_surface_consistency(points, a, b, t["radii"], vol)

    return gc.check_gradient(build, arrays)


def check_reconstruction(seed):
    rng = np.random.default_rng(seed)
    n, code_dim = 3, 4
    frame = dg.GraphFrame(0.5 + 0.2 * rng.uniform(-1, 1, (n, 3)),
                          rng.uniform(-0.4, 0.4, (n, 3)),
                          rng.uniform(0.5, 2.0, n))
    radii = dc.constant(np.full(n, 0.4))
    points = rng.uniform(0.3, 0.7, (8, 3))
    emb = rng.normal(size=7 * n) * 0.1
    proj_w = isf.PoseProjection.init(n, seed=seed, code_dim=code_dim)
    mlp_seeds = [seed * 31 + i for i in range(n)]

    def make(t):
        proj = isf.PoseProjection(n, t["proj"], code_dim)
        mlps = []
        for i, s in enumerate(mlp_seeds):
            mlp = isf.NodeMlpParams.init(f"node{i:03d}", seed=s,
                                         code_dim=code_dim)
            mlp.params[f"node{i:03d}.l7.w"] = t[f"w7_{i}"]
            mlp.params[f"node{i:03d}.l7.b"] = t[f"b7_{i}"]
            mlps.append(mlp)
        vals, _ = isf.global_sdf(points, frame, radii, proj, mlps, t["emb"])
        return vals

    arrays = {"proj": proj_w.weight.data.copy(), "emb": emb}
    for i, s in enumerate(mlp_seeds):
        mlp = isf.NodeMlpParams.init(f"node{i:03d}", seed=s, code_dim=code_dim)
        arrays[f"w7_{i}"] = mlp.params[f"node{i:03d}.l7.w"].data.copy()
        arrays[f"b7_{i}"] = mlp.params[f"node{i:03d}.l7.b"].data.copy()

    # scale the output layers so every prediction sits inside the clamp
    # band, then offset the labels past the L1 kink in a random direction
    pred0 = make({k: dc.constant(v) for k, v in arrays.items()}).data
    peak = np.abs(pred0).max()
    if peak > 0.06:
        for i in range(n):
            arrays[f"w7_{i}"] *= 0.06 / peak
            arrays[f"b7_{i}"] *= 0.06 / peak
        pred0 = pred0 * (0.06 / peak)
    labels = pred0 + _signed_margin(rng, pred0.shape, 0.02, 0.035)

    def build(t):
        return isf.loss_recon(make(t), labels)

    return gc.check_gradient(build, arrays)


COMPOSITE_CHECKS = [
    ("coverage", check_coverage),
    ("interior", check_interior),
    ("affinity", check_affinity),
    ("sparsity", check_sparsity),
    ("viewpoint_consistency", check_viewpoint_consistency),
    ("surface_consistency", check_surface_consistency),
    ("reconstruction", check_reconstruction),
]
