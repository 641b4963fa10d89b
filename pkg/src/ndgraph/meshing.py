"""Triangle mesh extraction from scalar lattices and mesh file export.

Marching cubes over the 256 corner-sign cases. Instead of a hardcoded
triangle table, each case is triangulated on demand by chaining the
directed iso-segments of the six cube faces into closed loops and
fanning them; ambiguous faces (two diagonal inside corners) connect by
the sign of the face-center value, a choice both neighbor cells agree
on, so shared edges always meet and the surface stays watertight. The
same rule makes extraction symmetric under field negation up to
triangle winding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sdfgrid import SdfVolume

# corner k of a cell sits at offset (k & 1, k >> 1 & 1, k >> 2 & 1)
CORNER_OFFSETS = np.array([[k & 1, k >> 1 & 1, k >> 2 & 1] for k in range(8)])

EDGES = [(0, 1), (2, 3), (4, 5), (6, 7),
         (0, 2), (1, 3), (4, 6), (5, 7),
         (0, 4), (1, 5), (2, 6), (3, 7)]
_EDGE_ID = {pair: i for i, pair in enumerate(EDGES)}

# four corners per face, counterclockwise as seen from outside the cell
FACES = [(0, 4, 6, 2), (1, 3, 7, 5),
         (0, 1, 5, 4), (2, 6, 7, 3),
         (0, 2, 3, 1), (4, 5, 7, 6)]


class MeshExportError(IOError):
    """Raised when a mesh file cannot be written or parsed."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray              # (V, 3) float64
    triangles: np.ndarray             # (T, 3) int64
    colors: np.ndarray | None = None  # (V, 3) uint8

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def triangle_normals(self):
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return np.cross(b - a, c - a)

    def euler_characteristic(self):
        edges = {tuple(sorted(e)) for t in self.triangles
                 for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
        return self.n_vertices - len(edges) + self.n_triangles


def _edge_of(a, b):
    return _EDGE_ID[(a, b) if a < b else (b, a)]


def _face_segments(face, inside, joined):
    """Directed cut-point links (from_edge, to_edge) on one face.

    Walking the face counterclockwise from outside, a segment runs from
    each inside-to-outside crossing to an outside-to-inside one; with
    two diagonal inside corners, ``joined`` picks whether the inside
    corners connect through the face center.
    """
    flags = [inside[c] for c in face]
    starts, ends = [], []
    for i in range(4):
        a, b = face[i], face[(i + 1) % 4]
        if flags[i] and not flags[(i + 1) % 4]:
            starts.append(_edge_of(a, b))
        elif flags[(i + 1) % 4] and not flags[i]:
            ends.append(_edge_of(a, b))
    if not starts:
        return []
    if len(starts) == 1:
        return [(starts[0], ends[0])]
    # diagonal case: starts/ends alternate around the face; pairing the
    # start with the end that follows it cuts off the inside corners,
    # the other pairing cuts off the outside ones (the joined channel)
    if joined:
        return [(starts[0], ends[0]), (starts[1], ends[1])]
    return [(starts[0], ends[1]), (starts[1], ends[0])]


def _ambiguous_faces(case):
    inside = [(case >> k) & 1 for k in range(8)]
    out = []
    for f, face in enumerate(FACES):
        flags = [inside[c] for c in face]
        if sum(flags) == 2 and flags[0] == flags[2]:
            out.append(f)
    return out


def _triangulate_case(case, decisions):
    """Triangles (as local edge-id triples) for one corner-sign case.

    ``decisions`` maps each ambiguous face of the case to its joined
    flag. Loops are fanned with reversed order so right-hand normals
    point toward the positive side of the field.
    """
    inside = [(case >> k) & 1 for k in range(8)]
    nxt = {}
    for f, face in enumerate(FACES):
        for start, end in _face_segments(face, inside, decisions.get(f, False)):
            nxt[start] = end
    triangles = []
    remaining = set(nxt)
    while remaining:
        head = min(remaining)
        loop = [head]
        remaining.discard(head)
        cur = nxt[head]
        while cur != head:
            loop.append(cur)
            remaining.discard(cur)
            cur = nxt[cur]
        for i in range(1, len(loop) - 1):
            triangles.append((loop[0], loop[i + 1], loop[i]))
    return triangles


_CASE_CACHE = {}


def _case_triangles(case, decisions):
    key = (case, decisions)
    tris = _CASE_CACHE.get(key)
    if tris is None:
        tris = _triangulate_case(case, dict(decisions))
        _CASE_CACHE[key] = tris
    return tris


def marching_cubes(field, iso=0.0, origin=None, voxel_size=None):
    """Extract the iso-surface of a scalar lattice as a triangle mesh.

    ``field`` is an SdfVolume (its grid frame is used) or a plain 3-D
    array with optional origin/voxel_size (defaults: zero origin, unit
    spacing). Vertices lie on sign-crossing cell edges by linear
    interpolation and are shared between cells, so the mesh is
    watertight wherever the surface does not leave the lattice. A
    constant-sign field yields an empty mesh.
    """
    if isinstance(field, SdfVolume):
        values, origin = field.values, field.origin
        voxel_size = field.voxel_size
    else:
        values = np.asarray(field, dtype=np.float64)
        origin = np.zeros(3) if origin is None else np.asarray(origin, float)
        voxel_size = 1.0 if voxel_size is None else float(voxel_size)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError(f"need a lattice of at least 2x2x2, got {values.shape}")
    v = values - iso
    inside = v < 0

    case = np.zeros(tuple(s - 1 for s in values.shape), dtype=np.uint16)
    for k, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        block = inside[dx:dx + case.shape[0], dy:dy + case.shape[1],
                       dz:dz + case.shape[2]]
        case |= block.astype(np.uint16) << k
    active = np.argwhere((case != 0) & (case != 255))   # C order = cell order

    sx, sy, sz = values.shape
    strides = np.array([sy * sz, sz, 1])
    corner_flat = CORNER_OFFSETS @ strides
    flat_v = v.reshape(-1)
    ambiguous = {}

    verts, vert_index, triangles = [], {}, []
    for cell in active:
        base = int(cell @ strides)
        c = int(case[tuple(cell)])
        amb = ambiguous.get(c)
        if amb is None:
            amb = ambiguous[c] = _ambiguous_faces(c)
        decisions = tuple(
            (f, bool(flat_v[base + corner_flat[list(FACES[f])]].mean() < 0))
            for f in amb)
        for tri in _case_triangles(c, decisions):
            idx = []
            for e in tri:
                a, b = EDGES[e]
                key = (base + int(corner_flat[a]), base + int(corner_flat[b]))
                at = vert_index.get(key)
                if at is None:
                    va, vb = flat_v[key[0]], flat_v[key[1]]
                    t = va / (va - vb)
                    p = (cell + CORNER_OFFSETS[a]
                         + t * (CORNER_OFFSETS[b] - CORNER_OFFSETS[a]))
                    at = vert_index[key] = len(verts)
                    verts.append(origin + p * voxel_size)
                idx.append(at)
            triangles.append(idx)

    if not triangles:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    triangles = _cancel_opposite_pairs(triangles)
    mesh = TriangleMesh(np.array(verts), np.array(triangles, dtype=np.int64))
    return _drop_degenerate(mesh)


def _cancel_opposite_pairs(triangles):
    """Drop coincident triangle pairs with opposite winding.

    When a face ambiguity joins two diagonal corners, the loops of both
    adjacent cells thread the same channel window and their fans can cap
    it from either side; the caps coincide exactly and cancel, leaving
    the tunnel wall continuous.
    """
    groups = {}
    for i, tri in enumerate(triangles):
        groups.setdefault(frozenset(tri), []).append(i)
    drop = set()
    for idx in groups.values():
        while len(idx) >= 2:
            a = triangles[idx[0]]
            flipped = next(
                (j for j in idx[1:]
                 if _canonical(triangles[j]) == _canonical((a[0], a[2], a[1]))),
                None)
            if flipped is None:
                break
            drop.update((idx[0], flipped))
            idx = [j for j in idx if j not in (idx[0], flipped)]
    return [t for i, t in enumerate(triangles) if i not in drop]


def _canonical(tri):
    k = tri.index(min(tri))
    return (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3])


def _drop_degenerate(mesh, min_area=1e-12):
    area2 = np.linalg.norm(mesh.triangle_normals(), axis=1)
    keep = area2 >= 2.0 * min_area
    if keep.all():
        return mesh
    tris = mesh.triangles[keep]
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[tris] = True
    remap = np.cumsum(used) - 1
    colors = mesh.colors[used] if mesh.colors is not None else None
    return TriangleMesh(mesh.vertices[used], remap[tris], colors)


# ---------------------------------------------------------------------------
# File export / import
# ---------------------------------------------------------------------------

def export_obj(mesh, path):
    """ASCII OBJ with v and f lines, 1-based indices."""
    try:
        with open(path, "w") as fh:
            for x, y, z in mesh.vertices:
                fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
            for a, b, c in mesh.triangles:
                fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
    except OSError as err:
        raise MeshExportError(f"cannot write OBJ {path}: {err}") from err


def load_obj(path):
    verts, tris = [], []
    try:
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    except OSError as err:
        raise MeshExportError(f"cannot read OBJ {path}: {err}") from err
    return TriangleMesh(np.array(verts).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))


def export_ply(mesh, path):
    """Binary little-endian PLY; colors, when present, as uchar RGB."""
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {mesh.n_triangles}",
               "property list uchar int vertex_indices", "end_header"]
    vt = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_color else [])
    vdata = np.zeros(mesh.n_vertices, dtype=vt)
    vdata["xyz"] = mesh.vertices.astype("<f4")
    if has_color:
        vdata["rgb"] = mesh.colors
    fdata = np.zeros(mesh.n_triangles, dtype=[("n", "u1"), ("idx", "<i4", 3)])
    fdata["n"] = 3
    fdata["idx"] = mesh.triangles
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vdata.tobytes())
            fh.write(fdata.tobytes())
    except OSError as err:
        raise MeshExportError(f"cannot write PLY {path}: {err}") from err


def load_ply(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise MeshExportError(f"cannot read PLY {path}: {err}") from err
    end = raw.find(b"end_header\n")
    if end < 0 or not raw.startswith(b"ply"):
        raise MeshExportError(f"not a PLY file: {path}")
    lines = raw[:end].decode("ascii").splitlines()
    n_vert = n_face = 0
    has_color = False
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:3] == ["property", "uchar", "red"]:
            has_color = True
    body = raw[end + len(b"end_header\n"):]
    vt = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_color else [])
    vdata = np.frombuffer(body, dtype=vt, count=n_vert)
    offset = vdata.itemsize * n_vert
    fdata = np.frombuffer(body[offset:], dtype=[("n", "u1"), ("idx", "<i4", 3)],
                          count=n_face)
    colors = vdata["rgb"].copy() if has_color else None
    return TriangleMesh(vdata["xyz"].astype(np.float64),
                        fdata["idx"].astype(np.int64), colors)
