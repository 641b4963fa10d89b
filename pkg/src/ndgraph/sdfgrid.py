"""Truncated signed distance volumes: sampling, rotation resampling,
multi-view depth fusion, and bit-exact file IO.

Grid convention: a volume covers the unit cube [0,1]^3 (after sequence
normalization); voxel centers sit at origin + index * voxel_size with
x the fastest-varying index in serialized form. Values are truncated to
[-truncation, +truncation], negative inside the surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

VOLUME_MAGIC = b"NDGV"
DEPTH_MAGIC = b"NDGD"
VOLUME_VERSION = 1


class VolumeFormatError(ValueError):
    """Malformed volume/depth file (bad magic, truncation, extent mismatch)."""


class OutOfGridError(ValueError):
    """Query point lies outside the voxel lattice; callers decide the fallback."""

    def __init__(self, point):
        super().__init__(f"point {np.asarray(point)} outside the voxel lattice")
        self.point = np.asarray(point)


def _orthonormal(rot, tol=1e-9):
    return (np.abs(rot @ rot.T - np.eye(3)).max() < tol
            and abs(np.linalg.det(rot) - 1.0) < tol)


_LATTICE_CACHE = {}


def _index_lattice(shape):
    """Cached (Rx*Ry*Rz, 3) float index grid, x fastest-varying."""
    lattice = _LATTICE_CACHE.get(shape)
    if lattice is None:
        ix, iy, iz = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
        lattice = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3, order="F")
        lattice = np.ascontiguousarray(lattice, dtype=np.float64)
        if len(_LATTICE_CACHE) < 8:
            _LATTICE_CACHE[shape] = lattice
    return lattice


@dataclass
class SdfVolume:
    """Dense TSDF with |values| <= truncation, shape (Rx, Ry, Rz)."""

    values: np.ndarray
    origin: np.ndarray
    voxel_size: float
    truncation: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise VolumeFormatError(f"values must be 3-D, got shape {self.values.shape}")
        if min(self.values.shape) < 2:
            raise VolumeFormatError(f"resolution must be >= 2 per axis, got {self.values.shape}")
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def resolution(self):
        return self.values.shape

    def max_corner(self):
        return self.origin + (np.array(self.values.shape) - 1) * self.voxel_size

    def contains(self, pts):
        """Boolean mask of points inside the sampling lattice."""
        pts = np.atleast_2d(pts)
        lo = self.origin - 1e-12
        hi = self.max_corner() + 1e-12
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def voxel_centers(self):
        """(Rx*Ry*Rz, 3) array of center positions, x fastest."""
        return self.origin + _index_lattice(self.values.shape) * self.voxel_size


def unit_cube_volume(resolution, truncation, fill=None):
    """Volume covering [0,1]^3 with the given per-axis resolution."""
    r = int(resolution)
    vals = np.full((r, r, r), truncation if fill is None else fill, dtype=np.float32)
    return SdfVolume(vals, np.zeros(3), 1.0 / (r - 1), truncation)


def from_function(fn, resolution, truncation):
    """Sample an SDF callable on the unit-cube lattice, truncated."""
    vol = unit_cube_volume(resolution, truncation)
    d = fn(vol.voxel_centers())
    vol.values = np.clip(d, -truncation, truncation).astype(np.float32).reshape(
        vol.resolution, order="F")
    return vol


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _trilinear_raw(volume, pts):
    """Interpolate at (M, 3) points known to lie inside the lattice."""
    res = np.array(volume.resolution)
    u = (pts - volume.origin) / volume.voxel_size
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    f = u - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    v = volume.values
    return ((v[ix, iy, iz] * (1 - fx) + v[ix + 1, iy, iz] * fx) * (1 - fy) * (1 - fz)
            + (v[ix, iy + 1, iz] * (1 - fx) + v[ix + 1, iy + 1, iz] * fx) * fy * (1 - fz)
            + (v[ix, iy, iz + 1] * (1 - fx) + v[ix + 1, iy, iz + 1] * fx) * (1 - fy) * fz
            + (v[ix, iy + 1, iz + 1] * (1 - fx) + v[ix + 1, iy + 1, iz + 1] * fx) * fy * fz)


def trilinear_sample(volume, pts):
    """Interpolate the volume at points (M, 3) or a single (3,) point.

    Plain numpy fast path (no tape). Raises OutOfGridError if any point
    leaves the lattice; callers with a fallback policy pre-filter with
    ``volume.contains``.
    """
    single = np.asarray(pts).ndim == 1
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    inside = volume.contains(pts)
    if not np.all(inside):
        raise OutOfGridError(pts[np.argmin(inside)])
    out = _trilinear_raw(volume, pts)
    return float(out[0]) if single else out


def trilinear_sample_graph(volume, points):
    """Tape version: ``points`` is a (M, 3) Tensor, gradient flows to it."""
    vals = dc.constant(volume.values.astype(points.data.dtype))
    return dc.trilinear_gather(vals, points, volume.origin, volume.voxel_size)


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def resample_rotated(volume, angle_y):
    """New volume whose voxel at index i holds the input sampled at the
    y-rotation of i's position about the cube center; out-of-lattice
    sources fill with +truncation."""
    if angle_y == 0.0:
        return SdfVolume(volume.values.copy(), volume.origin.copy(),
                         volume.voxel_size, volume.truncation)
    center = (volume.origin + volume.max_corner()) / 2.0
    pts = volume.voxel_centers()
    src = (pts - center) @ rotation_y(angle_y).T + center
    inside = volume.contains(src)
    vals = np.full(pts.shape[0], volume.truncation, dtype=np.float64)
    if np.any(inside):
        vals[inside] = _trilinear_raw(volume, src[inside])
    out = vals.astype(volume.values.dtype).reshape(volume.resolution, order="F")
    return SdfVolume(out, volume.origin.copy(), volume.voxel_size, volume.truncation)


# ---------------------------------------------------------------------------
# Cameras and depth maps
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; ``pose`` maps camera coordinates to world (4x4).

    Camera frame: +z is the viewing direction, +x right, +y down (image
    row index grows with +y).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.pose.shape != (4, 4) or not _orthonormal(self.pose[:3, :3]):
            raise ValueError("pose must be a rigid 4x4 with orthonormal rotation")

    def world_to_camera(self, pts):
        r = self.pose[:3, :3]
        t = self.pose[:3, 3]
        return (np.atleast_2d(pts) - t) @ r

    def project(self, pts):
        """(u, v, z) pixel coordinates and camera-space depth for points."""
        pc = self.world_to_camera(pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def ray_directions(self):
        """(H, W, 3) unit ray directions in world coordinates."""
        us, vs = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d = np.stack([(us - self.cx) / self.fx, (vs - self.cy) / self.fy,
                      np.ones_like(us, dtype=np.float64)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.pose[:3, :3].T

    def center(self):
        return self.pose[:3, 3]


def look_at_camera(position, target, width, height, focal, up=(0.0, 1.0, 0.0)):
    """Camera at ``position`` whose +z axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = position
    return Camera(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0,
                  width, height, pose)


@dataclass
class DepthMap:
    """Per-pixel metric depth along camera +z; 0 marks no return."""

    depth: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.shape != (self.camera.height, self.camera.width):
            raise VolumeFormatError(
                f"depth shape {self.depth.shape} does not match camera "
                f"{self.camera.height}x{self.camera.width}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise VolumeFormatError("depths must be finite and >= 0")

    def back_project(self):
        """World positions of all pixels with a return."""
        h, w = self.depth.shape
        vs, us = np.nonzero(self.depth > 0)
        z = self.depth[vs, us].astype(np.float64)
        cam = self.camera
        pc = np.stack([(us - cam.cx) / cam.fx * z, (vs - cam.cy) / cam.fy * z, z], axis=1)
        return pc @ cam.pose[:3, :3].T + cam.pose[:3, 3]


def _lift_pixels(cam, u, v, depth):
    """World positions of (sub)pixel coordinates at the given z-depths."""
    pc = np.stack([(u - cam.cx) / cam.fx * depth,
                   (v - cam.cy) / cam.fy * depth, depth], axis=-1)
    return pc @ cam.pose[:3, :3].T + cam.pose[:3, 3]


def _wall_points(cam, u, v, lo, hi, step):
    """Samples along pixel rays between depths lo..hi (silhouette walls).

    At a depth discontinuity the surface turns away from the camera; the
    boundary ray bounds it like a visual-hull facet, so points along that
    ray stand in for the unseen surface strip (error < one pixel footprint).
    """
    n = np.maximum(np.ceil((hi - lo) / step).astype(np.int64), 1) + 1
    owner = np.repeat(np.arange(n.size), n)
    local = np.arange(owner.size) - np.repeat(np.cumsum(n) - n, n)
    depth = np.minimum(lo[owner] + local * step, hi[owner])
    return _lift_pixels(cam, u[owner], v[owner], depth)


def _surface_samples(dm, voxel_size, truncation):
    """Sub-pixel surface evidence for one view: back-projected returns,
    bilinear in-quad refinements, and silhouette wall samples."""
    cam = dm.camera
    d = dm.depth.astype(np.float64)
    hit = d > 0
    jump = truncation / 2.0
    step = voxel_size / 2.0
    pieces = [dm.back_project()]

    # Bilinear subdivision inside depth-coherent 2x2 pixel quads.
    d00, d01, d10, d11 = d[:-1, :-1], d[:-1, 1:], d[1:, :-1], d[1:, 1:]
    coherent = (hit[:-1, :-1] & hit[:-1, 1:] & hit[1:, :-1] & hit[1:, 1:]
                & (np.maximum(np.maximum(d00, d01), np.maximum(d10, d11))
                   - np.minimum(np.minimum(d00, d01), np.minimum(d10, d11)) <= jump))
    vs, us = np.nonzero(coherent)
    if vs.size:
        sub = 4
        off = np.arange(sub) / sub
        ov, ou = [o.ravel()[1:] for o in np.meshgrid(off, off, indexing="ij")]
        zq = (d00[vs, us, None] * (1 - ov) * (1 - ou) + d01[vs, us, None] * (1 - ov) * ou
              + d10[vs, us, None] * ov * (1 - ou) + d11[vs, us, None] * ov * ou)
        pieces.append(_lift_pixels(cam, (us[:, None] + ou).ravel(),
                                   (vs[:, None] + ov).ravel(), zq.ravel()))

    # Silhouette walls at hit/miss boundaries and intra-surface depth jumps,
    # anchored on the ray that cleared past the nearer surface.
    wall_u, wall_v, wall_lo, wall_hi = [], [], [], []
    for ax in (0, 1):
        if ax == 0:
            da, db, ha, hb = d[:-1, :], d[1:, :], hit[:-1, :], hit[1:, :]
            va, ua = np.meshgrid(np.arange(d.shape[0] - 1), np.arange(d.shape[1]),
                                 indexing="ij")
            vb, ub = va + 1, ua
        else:
            da, db, ha, hb = d[:, :-1], d[:, 1:], hit[:, :-1], hit[:, 1:]
            va, ua = np.meshgrid(np.arange(d.shape[0]), np.arange(d.shape[1] - 1),
                                 indexing="ij")
            vb, ub = va, ua + 1
        for hn, dn, hc, dc, uc, vc, un, vn, iu, iv in (
                (ha, da, hb, db, ub, vb, ua, va, -(ax == 1), -(ax == 0)),
                (hb, db, ha, da, ua, va, ub, vb, +(ax == 1), +(ax == 0))):
            clears = hn & (~hc | (dc - dn > jump))
            if not np.any(clears):
                continue
            anchor = dn[clears]
            tail = _wall_tails(d, hit, vn[clears], un[clears], iv, iu, step,
                               truncation)
            cap = np.where(hc[clears], np.minimum(dc[clears], anchor + tail),
                           anchor + tail)
            wall_u.append(uc[clears].astype(np.float64))
            wall_v.append(vc[clears].astype(np.float64))
            wall_lo.append(anchor - step)
            wall_hi.append(cap)
    if wall_u:
        pieces.append(_wall_points(cam, np.concatenate(wall_u), np.concatenate(wall_v),
                                   np.concatenate(wall_lo), np.concatenate(wall_hi),
                                   step))
    return np.concatenate([p for p in pieces if p.size], axis=0) \
        if any(p.size for p in pieces) else np.zeros((0, 3))


def _wall_tails(d, hit, nv, nu, iv, iu, step, truncation):
    """Depth extent for silhouette walls from local curvature.

    Walking inward from a convex silhouette, depth falls like sqrt(2*R*s)
    with s the surface offset past the tangency. Two depth deltas pin both
    the sub-pixel tangency offset and R; a tail of 1.2*sqrt(footprint*R)
    then covers the strip no camera resolves while keeping the hull slack
    of its far end (tail^2 / 2R) inside a voxel. The footprint cancels,
    so the tail needs no calibration. Flat profiles (linear depth) carry
    no slack and extend the full truncation band.
    """
    h, w = d.shape
    t1 = d[nv, nu]
    v2c, u2c = np.clip(nv + iv, 0, h - 1), np.clip(nu + iu, 0, w - 1)
    v3c, u3c = np.clip(nv + 2 * iv, 0, h - 1), np.clip(nu + 2 * iu, 0, w - 1)
    ok = ((nv + 2 * iv >= 0) & (nv + 2 * iv < h) & (nu + 2 * iu >= 0)
          & (nu + 2 * iu < w) & hit[v2c, u2c] & hit[v3c, u3c])
    d1 = t1 - d[v2c, u2c]
    d2 = t1 - d[v3c, u3c]
    ok &= (d1 > 1e-9) & (d2 > d1)
    gamma = np.where(ok, d2 / np.maximum(d1, 1e-12), 2.0)
    tails = np.full(t1.shape, truncation)
    steep = ok & (gamma < 1.999)
    if np.any(steep):
        g = np.clip(gamma[steep], np.sqrt(2.0) + 1e-5, 1.999)
        lo = np.zeros(g.shape)
        hi = np.full(g.shape, 1e4)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            val = (np.sqrt(mid + 2) - np.sqrt(mid)) / (np.sqrt(mid + 1) - np.sqrt(mid))
            high = val > g
            hi = np.where(high, mid, hi)
            lo = np.where(high, lo, mid)
        phi = 0.5 * (lo + hi)
        tails[steep] = (1.2 / np.sqrt(2.0)) * d1[steep] / (np.sqrt(phi + 1) - np.sqrt(phi))
    return np.clip(tails, 2 * step, truncation)


def _nearest_features(points, lo, span, fine, capture):
    """Windowed separable squared-distance transform with feature carry.

    Splats the point set on a fine lattice (keeping, per cell, the sample
    nearest the cell center), then propagates nearest-occupied-cell ids
    exactly for all cells within ``capture`` of a sample. Returns
    (rep (F^3,3), occ (F^3,), feat (F^3,) linear ids, spacing).
    """
    sp = span / (fine - 1)
    idx = np.round((points - lo) / sp).astype(np.int64)
    keep = np.all((idx >= 0) & (idx < fine), axis=1)
    idx, pts = idx[keep], points[keep]
    rep = np.zeros((fine ** 3, 3), dtype=np.float64)
    occ = np.zeros(fine ** 3, dtype=bool)
    if idx.shape[0]:
        lin = (idx[:, 0] * fine + idx[:, 1]) * fine + idx[:, 2]
        d2 = ((pts - (lo + idx * sp)) ** 2).sum(axis=1)
        order = np.lexsort((d2, lin))
        lin, pts = lin[order], pts[order]
        first = np.ones(lin.size, dtype=bool)
        first[1:] = lin[1:] != lin[:-1]
        rep[lin[first]] = pts[first]
        occ[lin[first]] = True

    inf = np.float64(1e30)
    g = np.where(occ, 0.0, inf).reshape(fine, fine, fine)
    feat = np.where(occ, np.arange(fine ** 3), -1).reshape(fine, fine, fine)
    window = min(int(np.ceil(capture / sp)) + 1, fine - 1)
    for axis in range(3):
        gb, fb = g.copy(), feat.copy()
        for o in range(1, window + 1):
            c = (o * sp) ** 2
            for dst, src in (((slice(o, None),), (slice(None, -o),)),
                             ((slice(None, -o),), (slice(o, None),))):
                sl_d = tuple(dst[0] if a == axis else slice(None) for a in range(3))
                sl_s = tuple(src[0] if a == axis else slice(None) for a in range(3))
                cand = g[sl_s] + c
                m = cand < gb[sl_d]
                gb[sl_d][m] = cand[m]
                fb[sl_d][m] = feat[sl_s][m]
        g, feat = gb, fb
    return rep, occ, feat.ravel(), sp


def _distance_to_samples(queries, rep, occ, feat, lo, sp, fine):
    """Exact distance from each query to the best candidate sample, probing
    the 27-neighborhoods of both the containing cell and the propagated
    nearest cell (sub-cell accuracy near the surface)."""
    qidx = np.clip(np.round((queries - lo) / sp).astype(np.int64), 0, fine - 1)
    qlin = (qidx[:, 0] * fine + qidx[:, 1]) * fine + qidx[:, 2]
    best = np.full(queries.shape[0], 1e30)
    seeds = [qidx]
    near = feat[qlin]
    has = near >= 0
    nidx = qidx.copy()
    if np.any(has):
        nidx[has] = np.stack([near[has] // (fine * fine),
                              (near[has] // fine) % fine,
                              near[has] % fine], axis=1)
    seeds.append(nidx)
    offs = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1],
                                indexing="ij"), axis=-1).reshape(-1, 3)
    for seed in seeds:
        for o in offs:
            c = np.clip(seed + o, 0, fine - 1)
            cl = (c[:, 0] * fine + c[:, 1]) * fine + c[:, 2]
            live = occ[cl]
            if not np.any(live):
                continue
            dist = np.linalg.norm(queries[live] - rep[cl[live]], axis=1)
            best[live] = np.minimum(best[live], dist)
    return best


def fuse_depth_views(depth_maps, resolution, truncation):
    """Fuse calibrated depth views into a truncated signed distance volume.

    Magnitude: Euclidean distance from the voxel center to the union of all
    views' observed surface samples (sub-pixel refinements plus silhouette
    walls), truncated. Sign and observedness come from per-view tests: a
    view whose pixel saw past the voxel (miss) or hit a surface behind it
    votes free space; a voxel behind every observed surface is inside.
    Voxels behind all views but beyond the truncation band, or outside all
    frusta, are unobserved and fill with +truncation.
    """
    depth_maps = list(depth_maps)
    if not depth_maps:
        raise ValueError("fuse_depth_views needs at least one depth map")
    vol = unit_cube_volume(resolution, truncation)
    pts = vol.voxel_centers()
    h = vol.voxel_size

    cloud = [_surface_samples(dm, h, truncation) for dm in depth_maps]
    cloud = np.concatenate([c for c in cloud if c.size], axis=0) \
        if any(c.size for c in cloud) else np.zeros((0, 3))
    pad = truncation + 2 * h
    span = 1.0 + 2 * pad
    fine = min(int(np.ceil(span / (h / 2.0))) + 1, 256)
    dist = np.full(pts.shape[0], 1e30)
    if cloud.shape[0]:
        rep, occ, feat, sp = _nearest_features(cloud, -pad, span, fine,
                                               truncation + 2 * h)
        dist = _distance_to_samples(pts, rep, occ, feat, -pad, sp, fine)

    any_front = np.zeros(pts.shape[0], dtype=bool)
    any_free = np.zeros(pts.shape[0], dtype=bool)
    any_behind = np.zeros(pts.shape[0], dtype=bool)
    for dm in depth_maps:
        cam = dm.camera
        u, v, z = cam.project(pts)
        ui = np.round(u).astype(np.int64)
        vi = np.round(v).astype(np.int64)
        in_img = (z > 1e-9) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        obs = np.zeros(pts.shape[0])
        obs[in_img] = dm.depth[vi[in_img], ui[in_img]]
        hit = in_img & (obs > 0)
        any_front |= hit & (z <= obs)
        any_behind |= hit & (z > obs)
        any_free |= in_img & ~hit
    positive = any_front | any_free
    observed = positive | (any_behind & (dist < truncation))
    signed = np.where(positive, 1.0, -1.0) * np.minimum(dist, truncation)
    fused = np.where(observed, signed, truncation)
    vol.values = fused.astype(np.float32).reshape(vol.resolution, order="F")
    return vol


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def write_volume(volume, path):
    rx, ry, rz = volume.resolution
    header = VOLUME_MAGIC + struct.pack(
        "<IIIIfffff", VOLUME_VERSION, rx, ry, rz, volume.voxel_size,
        *volume.origin.astype(np.float32), volume.truncation)
    payload = np.asarray(volume.values, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 40:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    version, rx, ry, rz, h, ox, oy, oz, trunc = struct.unpack("<IIIIfffff", raw[4:40])
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    expect = 40 + rx * ry * rz * 4
    if len(raw) != expect:
        raise VolumeFormatError(f"{path}: size {len(raw)} != expected {expect} "
                                f"for extents {(rx, ry, rz)}")
    vals = np.frombuffer(raw[40:], dtype="<f4").reshape((rx, ry, rz), order="F")
    return SdfVolume(vals.copy(), np.array([ox, oy, oz], dtype=np.float64),
                     float(np.float32(h)), float(np.float32(trunc)))


def write_depth(depth_map, path):
    cam = depth_map.camera
    header = DEPTH_MAGIC + struct.pack("<II", cam.width, cam.height)
    header += np.asarray(cam.pose, dtype="<f4").tobytes()
    header += struct.pack("<ffff", cam.fx, cam.fy, cam.cx, cam.cy)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(depth_map.depth, dtype="<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DEPTH_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12 + 64 + 16:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    w, h = struct.unpack("<II", raw[4:12])
    pose = np.frombuffer(raw[12:76], dtype="<f4").reshape(4, 4).astype(np.float64)
    fx, fy, cx, cy = struct.unpack("<ffff", raw[76:92])
    expect = 92 + w * h * 4
    if len(raw) != expect:
        raise VolumeFormatError(f"{path}: size {len(raw)} != expected {expect} "
                                f"for {w}x{h} depth")
    # f32 round trip can leave the rotation a hair off orthonormal; re-orthonormalize.
    r = pose[:3, :3]
    u, _, vt = np.linalg.svd(r)
    pose[:3, :3] = u @ vt
    depth = np.frombuffer(raw[92:], dtype="<f4").reshape(h, w)
    cam = Camera(fx, fy, cx, cy, w, h, pose)
    return DepthMap(depth.copy(), cam)
