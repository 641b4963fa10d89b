"""Synthetic deforming scenes with exact SDFs and correspondences.

A scene is a set of rigid primitives (spheres, capsules), each carrying an
analytic per-frame rigid motion; a two-bone hinge is two capsules sharing
a pivot. Everything downstream sees the scene after sequence
normalization: one affine map (shared by all frames) scales the union of
all per-frame bounding boxes so its largest side equals 1.0 and centers
it in the unit cube. Exact SDFs give exact visibility, exact surface
samples, and exact dense trajectories for end-point-error evaluation.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import sdfgrid as sg

GT_MAGIC = b"NDGT"
SAMPLES_MAGIC = b"NDGS"


class SceneError(ValueError):
    pass


def _rodrigues(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


@dataclass
class RigidMotion:
    """Per-frame rigid map x -> R(u)(x - pivot) + pivot + offset(u).

    Rotation angle and translation offset interpolate linearly in the
    frame fraction u in [0, 1].
    """

    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    angle_start: float = 0.0
    angle_end: float = 0.0
    offset_start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset_end: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.pivot = np.asarray(self.pivot, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        self.offset_start = np.asarray(self.offset_start, dtype=np.float64)
        self.offset_end = np.asarray(self.offset_end, dtype=np.float64)

    def rotation(self, u):
        return _rodrigues(self.axis, (1 - u) * self.angle_start + u * self.angle_end)

    def offset(self, u):
        return (1 - u) * self.offset_start + u * self.offset_end

    def apply(self, pts, u):
        r = self.rotation(u)
        return (np.atleast_2d(pts) - self.pivot) @ r.T + self.pivot + self.offset(u)

    def invert(self, pts, u):
        r = self.rotation(u)
        return (np.atleast_2d(pts) - self.pivot - self.offset(u)) @ r + self.pivot


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def sdf(self, pts):
        return np.linalg.norm(np.atleast_2d(pts) - self.center, axis=1) - self.radius

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def area(self):
        return 4.0 * np.pi * self.radius ** 2

    def surface_sample(self, n, rng):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if np.linalg.norm(self.b - self.a) < 1e-12:
            raise SceneError("capsule endpoints coincide")

    def sdf(self, pts):
        pts = np.atleast_2d(pts)
        ab = self.b - self.a
        t = np.clip((pts - self.a) @ ab / (ab @ ab), 0.0, 1.0)
        closest = self.a + t[:, None] * ab
        return np.linalg.norm(pts - closest, axis=1) - self.radius

    def bbox(self):
        lo = np.minimum(self.a, self.b) - self.radius
        hi = np.maximum(self.a, self.b) + self.radius
        return lo, hi

    def area(self):
        length = np.linalg.norm(self.b - self.a)
        return 2.0 * np.pi * self.radius * length + 4.0 * np.pi * self.radius ** 2

    def surface_sample(self, n, rng):
        ab = self.b - self.a
        length = np.linalg.norm(ab)
        axis = ab / length
        # Orthonormal frame around the axis.
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        n1 = np.cross(axis, helper)
        n1 /= np.linalg.norm(n1)
        n2 = np.cross(axis, n1)
        cyl_area = 2.0 * np.pi * self.radius * length
        p_cyl = cyl_area / self.area()
        pick = rng.uniform(size=n) < p_cyl
        out = np.empty((n, 3))
        m = int(pick.sum())
        if m:
            theta = rng.uniform(0, 2 * np.pi, m)
            h = rng.uniform(0, 1, m)
            ring = np.outer(np.cos(theta), n1) + np.outer(np.sin(theta), n2)
            out[pick] = self.a + np.outer(h, ab) + self.radius * ring
        k = n - m
        if k:
            d = rng.standard_normal((k, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            along = d @ axis
            ends = np.where(along[:, None] >= 0, self.b, self.a)
            out[~pick] = ends + self.radius * d
        return out


@dataclass
class ScenePrimitive:
    shape: object  # Sphere or Capsule in reference coordinates
    motion: RigidMotion


@dataclass
class SceneSpec:
    """Analytic scene description prior to normalization."""

    primitives: list
    frames: int
    blend_smoothness: float = 0.0

    def __post_init__(self):
        if self.frames < 1:
            raise SceneError("scene needs at least one frame")
        if not self.primitives:
            raise SceneError("scene needs at least one primitive")


def static_sphere_spec(frames=1, radius=0.25):
    return SceneSpec([ScenePrimitive(Sphere(np.zeros(3), radius), RigidMotion())], frames)


def rigid_translation_spec(frames=20, translation=(0.45, 0.0, 0.1),
                           length=0.5, radius=0.18):
    """A capsule translating rigidly; asymmetric enough to pin orientation."""
    half = length / 2.0
    cap = Capsule(np.array([-half, 0.0, 0.0]), np.array([half, 0.0, 0.0]), radius)
    motion = RigidMotion(offset_end=np.asarray(translation, dtype=np.float64))
    return SceneSpec([ScenePrimitive(cap, motion)], frames)


def hinge_spec(frames=20, bone_length=0.5, radius=0.14,
               angle_start=0.0, angle_end=np.pi / 2):
    """Two bones sharing a pivot at the origin; bone B swings about +z.

    Bone A lies along -x and stays put; bone B starts along +x and rotates
    by the hinge angle (about z, through the shared joint).
    """
    bone_a = Capsule(np.array([-bone_length, 0.0, 0.0]), np.zeros(3), radius)
    bone_b = Capsule(np.zeros(3), np.array([bone_length, 0.0, 0.0]), radius)
    swing = RigidMotion(pivot=np.zeros(3), axis=np.array([0.0, 0.0, 1.0]),
                        angle_start=angle_start, angle_end=angle_end)
    return SceneSpec([ScenePrimitive(bone_a, RigidMotion()),
                      ScenePrimitive(bone_b, swing)], frames)


def _smin(a, b, k):
    if k <= 0.0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


class Scene:
    """A SceneSpec after sequence normalization; all queries take
    normalized unit-cube coordinates and a frame index."""

    def __init__(self, spec):
        self.spec = spec
        self.frames = spec.frames
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        # Spheres and capsules have exact bboxes from their transformed
        # centers/endpoints; the union over frames defines the normalization.
        for t in range(self.frames):
            u = self.frame_fraction(t)
            for prim in spec.primitives:
                if isinstance(prim.shape, Sphere):
                    c = prim.motion.apply(prim.shape.center[None], u)[0]
                    lo = np.minimum(lo, c - prim.shape.radius)
                    hi = np.maximum(hi, c + prim.shape.radius)
                else:
                    a = prim.motion.apply(prim.shape.a[None], u)[0]
                    b = prim.motion.apply(prim.shape.b[None], u)[0]
                    lo = np.minimum(lo, np.minimum(a, b) - prim.shape.radius)
                    hi = np.maximum(hi, np.maximum(a, b) + prim.shape.radius)
        side = hi - lo
        largest = float(side.max())
        if largest <= 0:
            raise SceneError("degenerate scene: empty bounding box")
        self.scale = 1.0 / largest
        self.world_lo = lo
        self.pad = (1.0 - side * self.scale) / 2.0

    def frame_fraction(self, t):
        return 0.0 if self.frames == 1 else t / (self.frames - 1)

    def to_unit(self, pts):
        return (np.atleast_2d(pts) - self.world_lo) * self.scale + self.pad

    def to_world(self, pts):
        return (np.atleast_2d(pts) - self.pad) / self.scale + self.world_lo

    def sdf(self, pts, t):
        """Exact union SDF at normalized points for frame t."""
        w = self.to_world(pts)
        u = self.frame_fraction(t)
        d = None
        for prim in self.spec.primitives:
            ref = prim.motion.invert(w, u)
            di = prim.shape.sdf(ref)
            d = di if d is None else _smin(d, di, self.spec.blend_smoothness)
        return d * self.scale

    def frame_bbox(self, t):
        """Normalized bounding box of the shape at frame t."""
        u = self.frame_fraction(t)
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for prim in self.spec.primitives:
            if isinstance(prim.shape, Sphere):
                c = prim.motion.apply(prim.shape.center[None], u)[0]
                lo = np.minimum(lo, c - prim.shape.radius)
                hi = np.maximum(hi, c + prim.shape.radius)
            else:
                a = prim.motion.apply(prim.shape.a[None], u)[0]
                b = prim.motion.apply(prim.shape.b[None], u)[0]
                lo = np.minimum(lo, np.minimum(a, b) - prim.shape.radius)
                hi = np.maximum(hi, np.maximum(a, b) + prim.shape.radius)
        return self.to_unit(lo[None])[0], self.to_unit(hi[None])[0]

    def surface_sample(self, t, n, rng, max_tries=64):
        """n exact surface points of the union at frame t (normalized),
        together with the owning primitive index and reference coords."""
        u = self.frame_fraction(t)
        areas = np.array([p.shape.area() for p in self.spec.primitives])
        probs = areas / areas.sum()
        pts = np.empty((0, 3))
        owner = np.empty(0, dtype=np.int64)
        refs = np.empty((0, 3))
        for _ in range(max_tries):
            need = n - len(pts)
            if need <= 0:
                break
            draw = max(need * 2, 16)
            counts = rng.multinomial(draw, probs)
            batch_ref, batch_owner, batch_world = [], [], []
            for i, prim in enumerate(self.spec.primitives):
                if counts[i] == 0:
                    continue
                r = prim.shape.surface_sample(counts[i], rng)
                batch_ref.append(r)
                batch_owner.append(np.full(counts[i], i, dtype=np.int64))
                batch_world.append(prim.motion.apply(r, u))
            ref = np.concatenate(batch_ref)
            own = np.concatenate(batch_owner)
            world = np.concatenate(batch_world)
            # Keep points on the union surface (not swallowed by another part).
            keep = np.ones(len(ref), dtype=bool)
            for j, prim in enumerate(self.spec.primitives):
                other = own != j
                if not other.any():
                    continue
                dj = prim.shape.sdf(prim.motion.invert(world[other], u))
                keep[other] &= dj > 1e-9
            pts = np.concatenate([pts, self.to_unit(world[keep])])
            owner = np.concatenate([owner, own[keep]])
            refs = np.concatenate([refs, ref[keep]])
        if len(pts) < n:
            raise SceneError(f"surface sampling starved: got {len(pts)}/{n}")
        return pts[:n], owner[:n], refs[:n]

    def trajectory(self, owner, refs):
        """(T, n, 3) normalized positions of material points over all frames."""
        out = np.empty((self.frames, len(refs), 3))
        for t in range(self.frames):
            u = self.frame_fraction(t)
            world = np.empty_like(refs)
            for i in np.unique(owner):
                sel = owner == i
                world[sel] = self.spec.primitives[i].motion.apply(refs[sel], u)
            out[t] = self.to_unit(world)
        return out

    def normals(self, pts, t, eps=1e-5):
        """Central-difference surface normals of the normalized SDF."""
        pts = np.atleast_2d(pts)
        g = np.empty_like(pts)
        for c in range(3):
            d = np.zeros(3)
            d[c] = eps
            g[:, c] = (self.sdf(pts + d, t) - self.sdf(pts - d, t)) / (2 * eps)
        return g / np.linalg.norm(g, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Rendering and capture rig
# ---------------------------------------------------------------------------

def rig_cameras(resolution=192, distance=2.0, focal_factor=0.7):
    """Four cameras at 90-degree spacing in the x-z plane, looking at the
    cube center. The default resolution keeps the pixel footprint at the
    cube smaller than a 64-grid voxel, so fused volumes resolve the surface
    everywhere a camera clears it."""
    center = np.array([0.5, 0.5, 0.5])
    cams = []
    for theta in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
        pos = center + distance * np.array([np.sin(theta), 0.0, np.cos(theta)])
        cams.append(sg.look_at_camera(pos, center, resolution, resolution,
                                      focal_factor * resolution))
    return cams


def render_depth(scene, t, camera, eps=1e-6, max_steps=256, t_max=8.0):
    """Sphere-trace the frame-t SDF; returns metric depth, 0 on miss."""
    dirs = camera.ray_directions().reshape(-1, 3)
    origin = camera.center()
    m = dirs.shape[0]
    ray_t = np.zeros(m)
    active = np.ones(m, dtype=bool)
    hit = np.zeros(m, dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        pos = origin + ray_t[active, None] * dirs[active]
        d = scene.sdf(pos, t)
        newly_hit = d < eps
        idx = np.nonzero(active)[0]
        hit[idx[newly_hit]] = True
        ray_t[idx] += np.maximum(d, 0.0)
        escaped = ray_t[idx] > t_max
        active[idx[newly_hit | escaped]] = False
    zaxis = camera.pose[:3, 2]
    depth = np.where(hit, ray_t * (dirs @ zaxis), 0.0)
    return sg.DepthMap(depth.reshape(camera.height, camera.width).astype(np.float32),
                       camera)


# ---------------------------------------------------------------------------
# Sequences, samples, ground truth
# ---------------------------------------------------------------------------

@dataclass
class GroundTruthMotion:
    keyframes: np.ndarray      # (K,) frame indices
    trajectories: np.ndarray   # (K, P, T, 3) normalized positions

    def __post_init__(self):
        self.keyframes = np.asarray(self.keyframes, dtype=np.int64)
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        k, p, t, c = self.trajectories.shape
        if c != 3 or k != len(self.keyframes):
            raise SceneError(f"bad trajectory extents {self.trajectories.shape}")


@dataclass
class SceneSequence:
    scene: Scene
    volumes: list
    depths: list          # depths[t] is the list of per-camera DepthMap
    gt_motion: GroundTruthMotion
    truncation: float

    @property
    def frames(self):
        return len(self.volumes)

    @property
    def resolution(self):
        return self.volumes[0].resolution[0]

    @property
    def voxel_size(self):
        return self.volumes[0].voxel_size


def keyframe_indices(frames, n_keyframes):
    if n_keyframes > frames:
        raise SceneError(f"{n_keyframes} keyframes exceed {frames} frames")
    return np.array([(j * frames) // n_keyframes for j in range(n_keyframes)],
                    dtype=np.int64)


def generate_gt_motion(scene, n_keyframes=10, points_per_keyframe=200, seed=0,
                       max_tries=200):
    """Dense trajectories for surface points sampled at each keyframe.

    Points whose rigid trajectory is swallowed by another primitive in any
    frame (articulation creases) are rejected so every kept trajectory
    stays on the union surface for the whole sequence.
    """
    rng = np.random.default_rng(seed)
    kf = keyframe_indices(scene.frames, n_keyframes)
    all_tracks = []
    for k in kf:
        kept = []
        for _ in range(max_tries):
            need = points_per_keyframe - sum(len(c) for c in kept)
            if need <= 0:
                break
            pts, owner, refs = scene.surface_sample(int(k), max(2 * need, 16), rng)
            tracks = scene.trajectory(owner, refs)        # (T, n, 3)
            on_surface = np.ones(tracks.shape[1], dtype=bool)
            for t in range(scene.frames):
                on_surface &= np.abs(scene.sdf(tracks[t], t)) < 1e-7
            kept.append(tracks[:, on_surface].transpose(1, 0, 2))
        got = np.concatenate(kept) if kept else np.empty((0, scene.frames, 3))
        if len(got) < points_per_keyframe:
            raise SceneError(f"keyframe {k}: only {len(got)} valid trajectories")
        all_tracks.append(got[:points_per_keyframe])
    return GroundTruthMotion(kf, np.stack(all_tracks))


def generate_sequence(spec, resolution=64, truncation=0.1, cameras=None,
                      n_keyframes=10, gt_points=200, seed=0):
    """Render, fuse, and track a scene: the full synthetic ground truth."""
    scene = Scene(spec)
    if cameras is None:
        cameras = rig_cameras()
    volumes = []
    depths = []
    static = all(m.motion.angle_start == m.motion.angle_end
                 and np.array_equal(m.motion.offset_start, m.motion.offset_end)
                 for m in spec.primitives)
    for t in range(scene.frames):
        if static and t > 0:
            dms = [sg.DepthMap(depths[0][i].depth.copy(), cameras[i])
                   for i in range(len(cameras))]
            vol = sg.SdfVolume(volumes[0].values.copy(), volumes[0].origin.copy(),
                               volumes[0].voxel_size, truncation)
        else:
            dms = [render_depth(scene, t, cam) for cam in cameras]
            vol = sg.fuse_depth_views(dms, resolution, truncation)
        depths.append(dms)
        volumes.append(vol)
    kf = min(n_keyframes, scene.frames)
    gt = generate_gt_motion(scene, kf, gt_points, seed=seed)
    return SceneSequence(scene, volumes, depths, gt, truncation)


@dataclass
class FrameSamples:
    """Labeled point sets for one frame.

    The coverage label is 1 for points invisible in every camera (inside
    or occluded -> should be covered by nodes) and 0 for points seen by at
    least one camera (free space up to the surface band).
    """

    p_uniform: np.ndarray
    p_near: np.ndarray
    p_surface: np.ndarray
    c_uniform: np.ndarray
    c_near: np.ndarray
    sdf_uniform: np.ndarray
    sdf_near: np.ndarray
    sdf_surface: np.ndarray

    @property
    def visible_uniform(self):
        return self.c_uniform == 0

    @property
    def visible_near(self):
        return self.c_near == 0


def visibility(points, depth_maps, eps):
    """1 where a point is visible in at least one view.

    A point is visible in a view when it projects inside the image and its
    camera depth does not exceed the observed surface depth plus eps; a
    miss pixel means the ray is free to infinity.
    """
    points = np.atleast_2d(points)
    vis = np.zeros(len(points), dtype=bool)
    for dm in depth_maps:
        cam = dm.camera
        u, v, z = cam.project(points)
        ui = np.round(u).astype(np.int64)
        vi = np.round(v).astype(np.int64)
        ok = (z > 1e-9) & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
        obs = np.zeros(len(points))
        obs[ok] = dm.depth[vi[ok], ui[ok]]
        vis |= ok & ((obs == 0) | (z <= obs + eps))
    return vis


def sample_points(sequence, t, n_uniform, n_near, n_surface, seed):
    """Draw the three labeled point sets for frame t, deterministically."""
    if min(n_uniform, n_near, n_surface) <= 0:
        raise SceneError("sample counts must be positive")
    scene = sequence.scene
    rng = np.random.default_rng(seed)
    h = sequence.voxel_size
    eps = 2.0 * h
    lo, hi = scene.frame_bbox(t)
    uni = rng.uniform(lo, hi, size=(n_uniform, 3))
    surf_for_near, _, _ = scene.surface_sample(t, n_near, rng)
    normals = scene.normals(surf_for_near, t)
    near = surf_for_near + normals * rng.normal(0.0, 2.0 * h, size=(n_near, 1))
    surf, _, _ = scene.surface_sample(t, n_surface, rng)
    dms = sequence.depths[t]
    c_uni = (~visibility(uni, dms, eps)).astype(np.float64)
    c_near = (~visibility(near, dms, eps)).astype(np.float64)
    tr = sequence.truncation
    return FrameSamples(
        uni, near, surf,
        c_uni, c_near,
        np.clip(scene.sdf(uni, t), -tr, tr),
        np.clip(scene.sdf(near, t), -tr, tr),
        np.clip(scene.sdf(surf, t), -tr, tr),
    )


# ---------------------------------------------------------------------------
# Directory layout and binary records
# ---------------------------------------------------------------------------

def write_gt_motion(gt, path):
    """Keyframe indices are not stored: they are always floor(j*T/K)."""
    k, p, t, _ = gt.trajectories.shape
    if not np.array_equal(gt.keyframes, keyframe_indices(t, k)):
        raise SceneError("gt keyframes must follow the uniform floor(j*T/K) rule")
    with open(path, "wb") as f:
        f.write(GT_MAGIC + struct.pack("<III", k, p, t))
        f.write(np.asarray(gt.trajectories, dtype="<f4").tobytes())


def read_gt_motion(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != GT_MAGIC:
        raise sg.VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    k, p, t = struct.unpack("<III", raw[4:16])
    expect = 16 + k * p * t * 3 * 4
    if len(raw) != expect:
        raise sg.VolumeFormatError(f"{path}: size {len(raw)} != expected {expect}")
    traj = np.frombuffer(raw[16:], dtype="<f4").reshape(k, p, t, 3).astype(np.float64)
    return GroundTruthMotion(keyframe_indices(t, k), traj)


def write_samples(samples, path):
    arrays = [samples.p_uniform, samples.p_near, samples.p_surface,
              samples.c_uniform, samples.c_near,
              samples.sdf_uniform, samples.sdf_near, samples.sdf_surface]
    with open(path, "wb") as f:
        f.write(SAMPLES_MAGIC + struct.pack("<III", len(samples.p_uniform),
                                            len(samples.p_near), len(samples.p_surface)))
        for a in arrays:
            f.write(np.asarray(a, dtype="<f8").tobytes())


def read_samples(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != SAMPLES_MAGIC:
        raise sg.VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    nu, nn, ns = struct.unpack("<III", raw[4:16])
    shapes = [(nu, 3), (nn, 3), (ns, 3), (nu,), (nn,), (nu,), (nn,), (ns,)]
    off = 16
    parts = []
    for shape in shapes:
        count = int(np.prod(shape))
        parts.append(np.frombuffer(raw[off:off + 8 * count], dtype="<f8").reshape(shape).copy())
        off += 8 * count
    if off != len(raw):
        raise sg.VolumeFormatError(f"{path}: trailing bytes ({len(raw) - off})")
    return FrameSamples(*parts)


def save_sequence(sequence, directory):
    os.makedirs(directory, exist_ok=True)
    for t, vol in enumerate(sequence.volumes):
        sg.write_volume(vol, os.path.join(directory, f"frame_{t:04d}.ndgv"))
        for c, dm in enumerate(sequence.depths[t]):
            sg.write_depth(dm, os.path.join(directory, f"frame_{t:04d}_cam{c}.ndgd"))
    write_gt_motion(sequence.gt_motion, os.path.join(directory, "gt_motion.bin"))


def load_sequence(directory, scene):
    """Rebuild a sequence from disk; the analytic scene is supplied by the
    caller (it is fully determined by the generating config)."""
    volumes = []
    depths = []
    t = 0
    while True:
        vpath = os.path.join(directory, f"frame_{t:04d}.ndgv")
        if not os.path.exists(vpath):
            break
        volumes.append(sg.read_volume(vpath))
        dms = []
        c = 0
        while True:
            dpath = os.path.join(directory, f"frame_{t:04d}_cam{c}.ndgd")
            if not os.path.exists(dpath):
                break
            dms.append(sg.read_depth(dpath))
            c += 1
        depths.append(dms)
        t += 1
    if not volumes:
        raise FileNotFoundError(f"no frame volumes found in {directory}")
    gt = read_gt_motion(os.path.join(directory, "gt_motion.bin"))
    return SceneSequence(scene, volumes, depths, gt, volumes[0].truncation)
