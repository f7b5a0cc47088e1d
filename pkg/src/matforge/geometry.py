"""Meshes, cameras and deterministic G-buffer rasterization."""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

NORMAL_TOL = 1e-4


class MeshError(ValueError):
    """Raised for malformed or incomplete mesh input."""


class MeshParseError(MeshError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle mesh.

    ``faces`` has shape (F, 3, 3): per corner the (position, uv, normal)
    indices, zero-based.
    """

    vertices: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(np.reshape(self.vertices, (-1, 3)), np.float64)
        n = _frozen(np.reshape(self.normals, (-1, 3)), np.float64)
        uv = _frozen(np.reshape(self.uvs, (-1, 2)), np.float64)
        f = _frozen(np.reshape(self.faces, (-1, 3, 3)), np.int64)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "normals", n)
        object.__setattr__(self, "uvs", uv)
        object.__setattr__(self, "faces", f)
        if len(f):
            for k, arr in enumerate((v, uv, n)):
                idx = f[:, :, k]
                if idx.min() < 0 or idx.max() >= len(arr):
                    raise MeshError("face index out of range")
        if len(n):
            lengths = np.linalg.norm(n, axis=1)
            if np.any(np.abs(lengths - 1.0) > NORMAL_TOL):
                raise MeshError("normals must be unit length")
        if len(uv) and (uv.min() < 0.0 or uv.max() > 1.0):
            raise MeshError("UV coordinates must lie in [0,1]")

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def corner_positions(self) -> np.ndarray:
        return self.vertices[self.faces[:, :, 0]]

    def corner_uvs(self) -> np.ndarray:
        return self.uvs[self.faces[:, :, 1]]

    def corner_normals(self) -> np.ndarray:
        return self.normals[self.faces[:, :, 2]]

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3, 3), dtype=np.int64))

    @classmethod
    def concat(cls, *meshes: "TriMesh") -> "TriMesh":
        vs, ns, uvs, fs = [], [], [], []
        ov = on = ou = 0
        for m in meshes:
            vs.append(m.vertices)
            ns.append(m.normals)
            uvs.append(m.uvs)
            fs.append(m.faces + np.array([ov, ou, on]))
            ov += len(m.vertices)
            on += len(m.normals)
            ou += len(m.uvs)
        return cls(np.concatenate(vs), np.concatenate(ns), np.concatenate(uvs), np.concatenate(fs))


def normalize_to_unit_box(mesh: TriMesh) -> TriMesh:
    """Center the bounding box at the origin and scale it uniformly into [-1,1]^3."""
    if not len(mesh.vertices):
        return mesh
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    scale = 1.0 / half if half > 0 else 1.0
    return TriMesh((mesh.vertices - center) * scale, mesh.normals, mesh.uvs, mesh.faces)


def _parse_index(tok: str, count: int, lineno: int, what: str) -> int:
    try:
        i = int(tok)
    except ValueError:
        raise MeshParseError(lineno, f"bad {what} index {tok!r}") from None
    if i < 1:
        raise MeshParseError(lineno, f"{what} index {i} invalid (OBJ indices are 1-based)")
    if i > count:
        raise MeshParseError(lineno, f"{what} index {i} out of range ({count} defined)")
    return i - 1


def parse_obj(text: str, normalize: bool = True) -> TriMesh:
    """Parse the supported OBJ subset (v/vt/vn/f, triangles only)."""
    verts, norms, uvs, faces = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag, args = parts[0], parts[1:]
        if tag in ("v", "vn", "vt"):
            want = 2 if tag == "vt" else 3
            if len(args) < want:
                raise MeshParseError(lineno, f"'{tag}' needs {want} components")
            try:
                vals = [float(a) for a in args[:want]]
            except ValueError:
                raise MeshParseError(lineno, f"non-numeric '{tag}' component") from None
            if not all(math.isfinite(x) for x in vals):
                raise MeshParseError(lineno, f"non-finite '{tag}' component")
            {"v": verts, "vn": norms, "vt": uvs}[tag].append(vals)
        elif tag == "f":
            if len(args) != 3:
                raise MeshParseError(lineno, "only triangular faces are supported")
            corner = []
            for a in args:
                idx = a.split("/")
                if len(idx) != 3 or not idx[1] or not idx[2]:
                    raise MeshError(f"line {lineno}: mesh lacks UV/normal attributes")
                corner.append((
                    _parse_index(idx[0], len(verts), lineno, "vertex"),
                    _parse_index(idx[1], len(uvs), lineno, "uv"),
                    _parse_index(idx[2], len(norms), lineno, "normal"),
                ))
            faces.append(corner)
        else:
            warnings.warn(f"line {lineno}: unsupported OBJ directive {tag!r} skipped", stacklevel=2)
    if faces and (not uvs or not norms):
        raise MeshError("mesh lacks UV/normal attributes")
    uv_arr = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    if len(uv_arr) and (uv_arr.min() < 0.0 or uv_arr.max() > 1.0):
        raise MeshError("UV coordinates outside [0,1]")
    n_arr = np.array(norms, dtype=np.float64).reshape(-1, 3)
    lengths = np.linalg.norm(n_arr, axis=1)
    if np.any(lengths == 0):
        raise MeshError("zero-length normal")
    mesh = TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        n_arr / lengths[:, None] if len(n_arr) else n_arr,
        uv_arr,
        np.array(faces, dtype=np.int64).reshape(-1, 3, 3),
    )
    return normalize_to_unit_box(mesh) if normalize else mesh


def load_mesh(path: str | os.PathLike) -> TriMesh:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_obj(fh.read())


def write_obj(mesh: TriMesh, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v {:.9g} {:.9g} {:.9g}\n".format(*v))
        for t in mesh.uvs:
            fh.write("vt {:.9g} {:.9g}\n".format(*t))
        for n in mesh.normals:
            fh.write("vn {:.9g} {:.9g} {:.9g}\n".format(*n))
        for f in mesh.faces + 1:
            fh.write("f " + " ".join(f"{c[0]}/{c[1]}/{c[2]}" for c in f) + "\n")


@dataclass(frozen=True)
class Camera:
    eye: tuple
    target: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    vertical_fov: float = math.radians(50.0)
    near: float = 0.1
    far: float = 10.0
    resolution: tuple = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "eye", tuple(float(x) for x in self.eye))
        object.__setattr__(self, "target", tuple(float(x) for x in self.target))
        up = np.asarray(self.up, dtype=np.float64)
        object.__setattr__(self, "up", tuple(float(x) for x in up / np.linalg.norm(up)))
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))
        if not 0.0 < self.near < self.far:
            raise ValueError("camera requires 0 < near < far")
        if not 0.0 < self.vertical_fov < math.pi:
            raise ValueError("camera vertical_fov must lie in (0, pi)")
        if min(self.resolution) < 1:
            raise ValueError("camera resolution must be at least 1x1")
        fwd = np.subtract(self.target, self.eye)
        if np.linalg.norm(fwd) == 0 or np.linalg.norm(np.cross(fwd, up)) < 1e-9:
            raise ValueError("camera eye/target/up are degenerate")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (right, up, forward) world-space unit vectors."""
        fwd = _normalize(np.subtract(self.target, self.eye))
        right = _normalize(np.cross(fwd, self.up))
        up = np.cross(right, fwd)
        return right, up, fwd

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map world points to continuous pixel coordinates (x right, y down) and view depth."""
        right, up, fwd = self.basis()
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.eye)
        depth = rel @ fwd
        xc, yc = rel @ right, rel @ up
        tan_half = math.tan(0.5 * self.vertical_fov)
        aspect = self.width / self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            x_ndc = xc / (depth * tan_half * aspect)
            y_ndc = yc / (depth * tan_half)
        px = (x_ndc + 1.0) * 0.5 * self.width
        py = (1.0 - y_ndc) * 0.5 * self.height
        return np.stack([px, py], axis=-1), depth

    def window_depth(self, depth: np.ndarray) -> np.ndarray:
        """Perspective depth mapped to [0,1] between near and far (OpenGL convention)."""
        n, f = self.near, self.far
        ndc = (f + n) / (f - n) - 2.0 * f * n / ((f - n) * np.asarray(depth, dtype=np.float64))
        return 0.5 * (ndc + 1.0)


def camera_ring(view_count: int, radius: float = 3.0, elevation: float = math.radians(20.0),
                resolution=(64, 64), vertical_fov: float = math.radians(50.0),
                near: float = 0.1, far: float = 10.0, seed: int | None = None) -> list[Camera]:
    """Cameras on a circle around the origin, looking at it.

    With ``seed`` set, azimuths are drawn uniformly and elevations uniformly in
    ``[0, 2*elevation]`` instead of the fixed ring.
    """
    if view_count < 1:
        raise ValueError("view_count must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if seed is None:
        az = 2.0 * math.pi * np.arange(view_count) / view_count
        el = np.full(view_count, float(elevation))
    else:
        rng = np.random.default_rng(seed)
        az = rng.uniform(0.0, 2.0 * math.pi, view_count)
        el = rng.uniform(0.0, 2.0 * float(elevation), view_count)
    cams = []
    for a, e in zip(az, el):
        eye = radius * np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
        cams.append(Camera(tuple(eye), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), vertical_fov, near, far, resolution))
    return cams


@dataclass(frozen=True)
class GBuffer:
    """Per-pixel geometry. Arrays are (H, W, ...) with row 0 at the top.

    ``view_origin`` is the eye position for camera buffers and ``None`` for
    UV-space buffers, whose ``depth`` channel is unused (zero).
    """

    normal: np.ndarray
    position: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    view_origin: tuple | None = None
    overlap_count: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.mask.shape
        return (w, h)


def _blank(h: int, w: int):
    return (np.zeros((h, w, 3)), np.zeros((h, w, 3)), np.zeros((h, w, 2)),
            np.full((h, w), np.inf), np.zeros((h, w), dtype=bool))


def _edge(ax, ay, bx, by, px, py):
    """Signed edge function with a canonical vertex order.

    Evaluating the shared edge of two triangles always uses the same operand
    order, so the two results are exact negatives of each other and the
    top-left rule assigns each center to exactly one triangle.
    """
    if (ax, ay) > (bx, by):
        return -((ax - bx) * (py - by) - (ay - by) * (px - bx))
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _coverage(sx, sy, px, py):
    """Barycentrics of pixel centers (px, py) in the screen triangle and the inside mask."""
    (x0, x1, x2), (y0, y1, y2) = sx, sy
    area = _edge(x0, y0, x1, y1, x2, y2)
    if area == 0 or not math.isfinite(area):
        return None
    if area < 0:
        # orient so the interior is positive; swap corners 1 and 2
        order = (0, 2, 1)
        x0, x1, x2 = sx[0], sx[2], sx[1]
        y0, y1, y2 = sy[0], sy[2], sy[1]
        area = -area
    else:
        order = (0, 1, 2)
    e0 = _edge(x1, y1, x2, y2, px, py)
    e1 = _edge(x2, y2, x0, y0, px, py)
    e2 = _edge(x0, y0, x1, y1, px, py)
    inside = np.ones(np.broadcast(px, py).shape, dtype=bool)
    for e, (ax, ay, bx, by) in ((e0, (x1, y1, x2, y2)), (e1, (x2, y2, x0, y0)), (e2, (x0, y0, x1, y1))):
        dx, dy = bx - ax, by - ay
        top_left = (dy == 0 and dx > 0) or dy < 0
        inside &= (e > 0) | ((e == 0) & top_left)
    lam = np.empty(inside.shape + (3,))
    lam[..., order[0]] = e0 / area
    lam[..., order[1]] = e1 / area
    lam[..., order[2]] = e2 / area
    return lam, inside


def rasterize_gbuffer(mesh: TriMesh, camera: Camera) -> GBuffer:
    """Z-buffered perspective rasterization of normal, position, UV and depth."""
    w, h = camera.resolution
    normal, position, uv, depth, mask = _blank(h, w)
    eye = np.asarray(camera.eye)
    if mesh.face_count:
        pos = mesh.corner_positions()
        nrm = mesh.corner_normals()
        tex = mesh.corner_uvs()
        screen, vdepth = camera.project(pos.reshape(-1, 3))
        screen = screen.reshape(-1, 3, 2)
        vdepth = vdepth.reshape(-1, 3)
        for fi in range(mesh.face_count):
            d = vdepth[fi]
            if np.any(d < camera.near) or not np.all(np.isfinite(screen[fi])):
                continue
            sx, sy = screen[fi, :, 0], screen[fi, :, 1]
            i0 = max(int(math.floor(sx.min() - 0.5)), 0)
            i1 = min(int(math.ceil(sx.max() - 0.5)), w - 1)
            j0 = max(int(math.floor(sy.min() - 0.5)), 0)
            j1 = min(int(math.ceil(sy.max() - 0.5)), h - 1)
            if i0 > i1 or j0 > j1:
                continue
            px = (np.arange(i0, i1 + 1) + 0.5)[None, :]
            py = (np.arange(j0, j1 + 1) + 0.5)[:, None]
            cov = _coverage(tuple(sx), tuple(sy), px, py)
            if cov is None:
                continue
            lam, inside = cov
            if not inside.any():
                continue
            # perspective-correct weights
            pw = lam / d
            inv_z = pw.sum(axis=-1)
            pw = pw / inv_z[..., None]
            z = 1.0 / inv_z
            p_int = pw @ pos[fi]
            n_int = _normalize(pw @ nrm[fi])
            t_int = pw @ tex[fi]
            facing = np.einsum("...k,...k->...", n_int, p_int - eye) < 0
            ok = inside & facing & (z >= camera.near) & (z <= camera.far)
            ok &= z < depth[j0:j1 + 1, i0:i1 + 1]
            if not ok.any():
                continue
            sl = (slice(j0, j1 + 1), slice(i0, i1 + 1))
            depth[sl] = np.where(ok, z, depth[sl])
            mask[sl] |= ok
            normal[sl] = np.where(ok[..., None], n_int, normal[sl])
            position[sl] = np.where(ok[..., None], p_int, position[sl])
            uv[sl] = np.where(ok[..., None], t_int, uv[sl])
    depth = np.where(mask, depth, 0.0)
    return GBuffer(normal, position, uv, depth, mask, tuple(eye))


def rasterize_uv_gbuffer(mesh: TriMesh, resolution) -> GBuffer:
    """Rasterize faces into UV space; row 0 is v near 1. Overlapping texels keep the first face."""
    w, h = int(resolution[0]), int(resolution[1])
    normal, position, uv, _, mask = _blank(h, w)
    overlaps = 0
    if mesh.face_count:
        pos = mesh.corner_positions()
        nrm = mesh.corner_normals()
        tex = mesh.corner_uvs()
        for fi in range(mesh.face_count):
            sx = tex[fi, :, 0] * w
            sy = (1.0 - tex[fi, :, 1]) * h
            i0 = max(int(math.floor(sx.min() - 0.5)), 0)
            i1 = min(int(math.ceil(sx.max() - 0.5)), w - 1)
            j0 = max(int(math.floor(sy.min() - 0.5)), 0)
            j1 = min(int(math.ceil(sy.max() - 0.5)), h - 1)
            if i0 > i1 or j0 > j1:
                continue
            px = (np.arange(i0, i1 + 1) + 0.5)[None, :]
            py = (np.arange(j0, j1 + 1) + 0.5)[:, None]
            cov = _coverage(tuple(sx), tuple(sy), px, py)
            if cov is None:
                continue
            lam, inside = cov
            sl = (slice(j0, j1 + 1), slice(i0, i1 + 1))
            taken = inside & mask[sl]
            overlaps += int(taken.sum())
            ok = inside & ~mask[sl]
            if not ok.any():
                continue
            mask[sl] |= ok
            position[sl] = np.where(ok[..., None], lam @ pos[fi], position[sl])
            normal[sl] = np.where(ok[..., None], _normalize(lam @ nrm[fi]), normal[sl])
            uv[sl] = np.where(ok[..., None], lam @ tex[fi], uv[sl])
    if overlaps:
        warnings.warn(f"{overlaps} texels covered by more than one face (first face kept)", stacklevel=2)
    return GBuffer(normal, position, uv, np.zeros((h, w)), mask, None, overlaps)


def texel_centers(resolution) -> np.ndarray:
    """UV coordinates of texel centers, shape (H, W, 2)."""
    w, h = int(resolution[0]), int(resolution[1])
    u = (np.arange(w) + 0.5) / w
    v = 1.0 - (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W, ...) image at UV coordinates, clamp-to-edge."""
    h, w = image.shape[:2]
    x = np.clip(uv[..., 0] * w - 0.5, 0.0, w - 1.0)
    y = np.clip((1.0 - uv[..., 1]) * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    if image.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


# -- procedural fixtures -----------------------------------------------------

def make_quad(z: float = 0.0, size: float = 1.0, uv_rect=(0.0, 0.0, 1.0, 1.0), normal_sign: float = 1.0) -> TriMesh:
    """Axis-aligned square in the plane ``z`` facing +z (or -z), UVs spanning ``uv_rect``."""
    s = size
    u0, v0, u1, v1 = uv_rect
    verts = [[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]]
    uvs = [[u0, v0], [u1, v0], [u1, v1], [u0, v1]]
    faces = [[[0, 0, 0], [1, 1, 0], [2, 2, 0]], [[0, 0, 0], [2, 2, 0], [3, 3, 0]]]
    return TriMesh(verts, [[0.0, 0.0, normal_sign]], uvs, faces)


def make_cube() -> TriMesh:
    """Unit cube [-1,1]^3: 8 positions, 12 faces, flat normals, each side in its own UV cell."""
    verts = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    sides = [  # (corner ids counter-clockwise seen from outside, normal)
        ([4, 6, 7, 5], (1, 0, 0)), ([1, 3, 2, 0], (-1, 0, 0)),
        ([2, 3, 7, 6], (0, 1, 0)), ([0, 4, 5, 1], (0, -1, 0)),
        ([1, 5, 7, 3], (0, 0, 1)), ([0, 2, 6, 4], (0, 0, -1)),
    ]
    normals, uvs, faces = [], [], []
    for s, (ids, nrm) in enumerate(sides):
        normals.append(nrm)
        cu, cv = (s % 3) / 3.0, (s // 3) / 2.0
        pad = 0.01
        base = len(uvs)
        uvs += [[cu + pad, cv + pad], [cu + 1 / 3 - pad, cv + pad],
                [cu + 1 / 3 - pad, cv + 0.5 - pad], [cu + pad, cv + 0.5 - pad]]
        a, b, c, d = ids
        faces.append([[a, base, s], [b, base + 1, s], [c, base + 2, s]])
        faces.append([[a, base, s], [c, base + 2, s], [d, base + 3, s]])
    return TriMesh(verts, normals, uvs, faces)


def make_uv_sphere(segments: int = 48, rings: int = 24, radius: float = 1.0) -> TriMesh:
    """Latitude/longitude sphere with a duplicated seam column so UVs stay in [0,1]."""
    theta = np.linspace(0.0, math.pi, rings + 1)
    phi = np.linspace(0.0, 2.0 * math.pi, segments + 1)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.sin(pp), np.cos(tt), np.sin(tt) * np.cos(pp)], axis=-1)
    uvs = np.stack([pp / (2 * math.pi), 1.0 - tt / math.pi], axis=-1)
    idx = np.arange((rings + 1) * (segments + 1)).reshape(rings + 1, segments + 1)
    faces = []
    for r in range(rings):
        for s in range(segments):
            a, b = idx[r, s], idx[r, s + 1]
            c, d = idx[r + 1, s], idx[r + 1, s + 1]
            if r > 0:
                faces.append([[a, a, a], [c, c, c], [b, b, b]])
            if r < rings - 1:
                faces.append([[b, b, b], [c, c, c], [d, d, d]])
    dirs = dirs.reshape(-1, 3)
    return TriMesh(radius * dirs, _normalize(dirs), np.clip(uvs.reshape(-1, 2), 0.0, 1.0), faces)
