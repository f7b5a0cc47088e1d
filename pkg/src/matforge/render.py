"""Point-light shading of G-buffers, the rendered-material loss and relighting."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import brdf
from .geometry import Camera, GBuffer, TriMesh, rasterize_gbuffer, texel_centers
from .parallel import map_tiles, row_tiles

MIN_DISTANCE = 0.1
ENV_LIGHT_COUNT = 128


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: float
    color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("light intensity must be nonnegative")


@dataclass(frozen=True)
class DirectionalLight:
    """Distant light arriving from ``direction`` (unit vector pointing toward the light)."""

    direction: tuple
    irradiance: float
    color: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class MaterialMaps:
    """Albedo (H, W, 3), roughness (H, W), metallic (H, W)."""

    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        r = np.asarray(self.roughness, dtype=np.float64)
        m = np.asarray(self.metallic, dtype=np.float64)
        if a.ndim != 3 or a.shape[-1] != 3:
            raise ValueError("albedo map must be (H, W, 3)")
        if r.shape != a.shape[:2] or m.shape != a.shape[:2]:
            raise ValueError("material maps must share one resolution")
        for name, arr in (("albedo", a), ("roughness", r), ("metallic", m)):
            if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
                raise ValueError(f"{name} map values outside [0,1]")
        object.__setattr__(self, "albedo", a)
        object.__setattr__(self, "roughness", r)
        object.__setattr__(self, "metallic", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.roughness.shape

    @classmethod
    def constant(cls, shape, albedo=(0.5, 0.5, 0.5), roughness=0.5, metallic=0.0) -> "MaterialMaps":
        h, w = shape
        return cls(np.broadcast_to(np.asarray(albedo, dtype=np.float64), (h, w, 3)).copy(),
                   np.full((h, w), float(roughness)), np.full((h, w), float(metallic)))

    @classmethod
    def procedural(cls, resolution: int, phase: float = 0.0) -> "MaterialMaps":
        """Smooth UV-space test materials, periodic in u so a wrapped seam stays continuous."""
        uv = texel_centers((resolution, resolution))
        u, v = 2.0 * np.pi * uv[..., 0] + phase, uv[..., 1]
        albedo = np.stack([0.5 + 0.3 * np.sin(u) * np.sin(np.pi * v), 0.5 + 0.3 * np.cos(u + 2.0 * v),
                           0.4 + 0.3 * np.sin(np.pi * v)], axis=-1)
        return cls(albedo, 0.3 + 0.4 * v, 0.5 + 0.4 * np.sin(u) * v * (1.0 - v))

    def stack(self) -> np.ndarray:
        """(H, W, 5) channel stack: albedo RGB, roughness, metallic."""
        return np.concatenate([self.albedo, self.roughness[..., None], self.metallic[..., None]], axis=-1)

    @classmethod
    def from_stack(cls, x: np.ndarray, clamp: bool = False) -> "MaterialMaps":
        x = np.asarray(x, dtype=np.float64)
        if clamp:
            x = np.clip(x, 0.0, 1.0)
        return cls(x[..., :3], x[..., 3], x[..., 4])


@dataclass(frozen=True)
class MapGrad:
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray


@dataclass(frozen=True)
class RadianceImage:
    rgb: np.ndarray
    mask: np.ndarray


def sample_lights(seed: int, count_range=(3, 10), intensity_range=(1.0, 10.0),
                  radius_range=(2.0, 4.0)) -> list[PointLight]:
    """Random white point lights: count uniform in ``count_range`` (inclusive),
    positions uniform in the volume of a spherical shell, intensities uniform."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    dirs = rng.standard_normal((count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r0, r1 = radius_range
    radii = np.cbrt(rng.uniform(r0 ** 3, r1 ** 3, count))
    intensities = rng.uniform(intensity_range[0], intensity_range[1], count)
    return [PointLight(tuple(d * r), float(i)) for d, r, i in zip(dirs, radii, intensities)]


def light_digest(lights) -> str:
    h = hashlib.sha256()
    for light in lights:
        h.update(repr(light).encode())
    return h.hexdigest()


def _incident(light, points: np.ndarray):
    """Unit direction to the light and the incident irradiance scale (N, 3) at each point."""
    color = np.asarray(light.color, dtype=np.float64)
    if isinstance(light, DirectionalLight):
        wi = np.broadcast_to(np.asarray(light.direction, dtype=np.float64), points.shape)
        return wi, np.broadcast_to(light.irradiance * color, points.shape)
    delta = np.asarray(light.position, dtype=np.float64) - points
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    wi = delta / np.where(dist > 0, dist, 1.0)
    d = np.maximum(dist, MIN_DISTANCE)
    return wi, light.intensity * color / (d * d)


def _per_light(normal, position, eye, lights):
    """Yield (valid, dots, radiance, cos) per light, in list order."""
    wo = np.asarray(eye, dtype=np.float64) - position
    wo = wo / np.linalg.norm(wo, axis=-1, keepdims=True)
    nwo = np.sum(normal * wo, axis=-1)
    for light in lights:
        wi, rad = _incident(light, position)
        nwi = np.sum(normal * wi, axis=-1)
        valid = (nwi > 0) & (nwo > 0)
        h = wi + wo
        hn = np.linalg.norm(h, axis=-1, keepdims=True)
        h = np.where(valid[..., None], h / np.where(hn > 0, hn, 1.0), normal)
        nh = np.sum(normal * h, axis=-1)
        woh = np.sum(wo * h, axis=-1)
        safe = np.where(valid, 1.0, 0.5)
        dots = (np.where(valid, nh, 1.0), np.where(valid, nwo, safe), np.where(valid, nwi, safe),
                np.where(valid, woh, 1.0))
        yield valid, dots, rad, nwi


def shade_points(normal, position, eye, albedo, roughness, metallic, lights, specular: bool = True):
    """Outgoing radiance (N, 3) = sum over lights of f_r * incident * max(n.wi, 0)."""
    out = np.zeros(np.shape(position))
    for valid, dots, rad, nwi in _per_light(normal, position, eye, lights):
        f = brdf.eval_dots(*dots, albedo, roughness, metallic, specular)
        out += np.where(valid[..., None], f * rad * nwi[..., None], 0.0)
    return out


def shade_pixel(normal, position, view_origin, mat: brdf.MaterialSample, lights, specular: bool = True):
    """Radiance leaving one surface point toward ``view_origin``."""
    n = np.asarray(normal, dtype=np.float64)[None]
    p = np.asarray(position, dtype=np.float64)[None]
    return shade_points(n, p, view_origin, np.asarray(mat.albedo)[None], np.asarray(mat.roughness)[None],
                        np.asarray(mat.metallic)[None], lights, specular)[0]


def _render_radiance(normal, position, eye, albedo, roughness, metallic, lights, specular):
    return shade_points(normal, position, eye, albedo, roughness, metallic, lights, specular)


def _check_match(g: GBuffer, maps: MaterialMaps):
    if maps.shape != g.shape:
        raise ValueError(f"material resolution {maps.shape} does not match G-buffer {g.shape}")
    if g.view_origin is None:
        raise ValueError("G-buffer has no view origin (UV-space buffers cannot be shaded)")


def render_image(g: GBuffer, maps: MaterialMaps, lights, specular: bool = True) -> RadianceImage:
    _check_match(g, maps)
    lights = list(lights)

    def tile(rows):
        m = g.mask[rows]
        out = np.zeros(m.shape + (3,))
        if m.any():
            out[m] = _render_radiance(g.normal[rows][m], g.position[rows][m], g.view_origin,
                                      maps.albedo[rows][m], maps.roughness[rows][m],
                                      maps.metallic[rows][m], lights, specular)
        return out

    rgb = np.concatenate(map_tiles(tile, row_tiles(g.shape[0])), axis=0)
    return RadianceImage(rgb, g.mask.copy())


def pbr_loss(pred: MaterialMaps, gt: MaterialMaps, g: GBuffer, lights, norm: str = "l1",
             specular: bool = True) -> tuple[float, MapGrad]:
    """Mean per-channel L1 (or squared L2) difference of the two renders under one light list,
    with its gradient with respect to the predicted maps."""
    _check_match(g, pred)
    _check_match(g, gt)
    if norm not in ("l1", "l2"):
        raise ValueError(f"unknown loss norm {norm!r}")
    count = int(g.mask.sum()) * 3
    if count == 0:
        raise ValueError("pbr_loss needs at least one covered pixel")
    lights = list(lights)

    def tile(rows):
        m = g.mask[rows]
        ga = np.zeros(m.shape + (3,))
        gr = np.zeros(m.shape)
        gm = np.zeros(m.shape)
        if not m.any():
            return 0.0, ga, gr, gm
        n, p = g.normal[rows][m], g.position[rows][m]
        a, r, mt = pred.albedo[rows][m], pred.roughness[rows][m], pred.metallic[rows][m]
        x_pred = _render_radiance(n, p, g.view_origin, a, r, mt, lights, specular)
        x_gt = _render_radiance(n, p, g.view_origin, gt.albedo[rows][m], gt.roughness[rows][m],
                                gt.metallic[rows][m], lights, specular)
        diff = x_pred - x_gt
        if norm == "l1":
            partial = float(np.abs(diff).sum())
            up = np.sign(diff) / count
        else:
            partial = float((diff * diff).sum())
            up = 2.0 * diff / count
        da = np.zeros_like(a)
        dr = np.zeros(len(r))
        dm = np.zeros(len(mt))
        for valid, dots, rad, nwi in _per_light(n, p, g.view_origin, lights):
            d_a, d_r, d_m, _ = brdf.grad_dots(*dots, a, r, mt, specular)
            w = np.where(valid[..., None], up * rad * nwi[..., None], 0.0)
            da += w * d_a
            dr += np.sum(w * d_r, axis=-1)
            dm += np.sum(w * d_m, axis=-1)
        ga[m], gr[m], gm[m] = da, dr, dm
        return partial, ga, gr, gm

    parts = map_tiles(tile, row_tiles(g.shape[0]))
    total = 0.0
    for part in parts:
        total += part[0]
    grad = MapGrad(np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]),
                   np.concatenate([p[3] for p in parts]))
    return total / count, grad


# -- environment lighting ----------------------------------------------------

def latlong_direction(theta, phi) -> np.ndarray:
    """Lat-long convention: theta from +y (row 0 at the top), phi around y from +z toward +x."""
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), st * np.cos(phi)], axis=-1)


def _radical_inverse2(i: np.ndarray) -> np.ndarray:
    out = np.zeros(len(i))
    scale = 0.5
    i = i.copy()
    while np.any(i):
        out += (i & 1) * scale
        i >>= 1
        scale *= 0.5
    return out


def _invert_cdf(cdf: np.ndarray, u: np.ndarray):
    """Continuous inversion of a piecewise-constant distribution; returns (cell, offset in cell)."""
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    lo = np.where(idx > 0, cdf[np.maximum(idx - 1, 0)], 0.0)
    width = cdf[idx] - lo
    frac = np.clip((u - lo) / np.where(width > 0, width, 1.0), 0.0, 1.0 - 1e-12)
    return idx, frac


def env_to_lights(env: np.ndarray, count: int = ENV_LIGHT_COUNT, seed: int = 0) -> list[DirectionalLight]:
    """Importance sampling of a lat-long map into directional lights.

    A randomly shifted Hammersley point set is pushed through the marginal (row) and
    conditional (column) distributions of luminance times sin(theta). Each light
    carries radiance / (count * pdf), so the light sum is an unbiased estimate of the
    environment's irradiance integral.
    """
    env = np.asarray(env, dtype=np.float64)
    h, w = env.shape[:2]
    if env.ndim == 2:
        env = env[..., None].repeat(3, axis=-1)
    if np.any(env < 0) or not np.all(np.isfinite(env)):
        raise ValueError("environment map must be finite and nonnegative")
    theta_c = math.pi * (np.arange(h) + 0.5) / h
    lum = env @ np.array([0.2126, 0.7152, 0.0722])
    weight = lum * np.sin(theta_c)[:, None]
    total = weight.sum()
    if total <= 0:
        return []
    row_w = weight.sum(axis=1)
    row_cdf = np.cumsum(row_w / total)
    row_cdf[-1] = 1.0
    rng = np.random.default_rng(seed)
    shift = rng.uniform(size=2)
    k = np.arange(count)
    u1 = ((k + 0.5) / count + shift[0]) % 1.0
    u2 = (_radical_inverse2(k) + shift[1]) % 1.0
    rows, fy = _invert_cdf(row_cdf, u1)
    cols = np.zeros(count, dtype=np.int64)
    fx = np.zeros(count)
    for r in np.unique(rows):
        sel = rows == r
        col_cdf = np.cumsum(weight[r] / row_w[r])
        col_cdf[-1] = 1.0
        cols[sel], fx[sel] = _invert_cdf(col_cdf, u2[sel])
    theta = math.pi * (rows + fy) / h
    phi = 2.0 * math.pi * (cols + fx) / w
    dirs = latlong_direction(theta, phi)
    d_area = (math.pi / h) * (2.0 * math.pi / w) * np.sin(theta)
    pmf = weight[rows, cols] / total
    lights = []
    for j in range(count):
        if d_area[j] <= 0 or pmf[j] <= 0:
            continue
        pdf = pmf[j] / d_area[j]
        radiance = env[rows[j], cols[j]]
        scale = float(radiance.max())
        lights.append(DirectionalLight(tuple(dirs[j]), scale / (count * pdf), tuple(radiance / scale)))
    return lights


def rotate_env(env: np.ndarray, shift: int) -> np.ndarray:
    """Rotate a lat-long map about the vertical axis by whole columns."""
    return np.roll(env, shift, axis=1)


# -- relighting ----------------------------------------------------------------

class UnfilledTextureError(ValueError):
    """A visible surface point maps to texels with no coverage."""


def sample_masked(image: np.ndarray, mask: np.ndarray, uv: np.ndarray):
    """Bilinear lookup restricted to covered texels (weights renormalized)."""
    h, w = mask.shape
    x = np.clip(uv[..., 0] * w - 0.5, 0.0, w - 1.0)
    y = np.clip((1.0 - uv[..., 1]) * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    taps = ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
            (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy))
    acc = np.zeros(uv.shape[:-1] + image.shape[2:])
    wsum = np.zeros(uv.shape[:-1])
    for yy, xx, wt in taps:
        wt = wt * mask[yy, xx]
        wsum += wt
        acc += image[yy, xx] * (wt[..., None] if image.ndim == 3 else wt)
    ok = wsum > 0
    denom = np.where(ok, wsum, 1.0)
    return acc / (denom[..., None] if image.ndim == 3 else denom), ok


def sample_maps(maps: MaterialMaps, uv: np.ndarray, coverage: np.ndarray | None = None):
    """Look up UV-space material maps at the given UVs; returns (MaterialMaps-like arrays, ok)."""
    mask = np.ones(maps.shape, dtype=bool) if coverage is None else np.asarray(coverage, dtype=bool)
    stack, ok = sample_masked(maps.stack(), mask, uv)
    return stack, ok


def relight(mesh: TriMesh, maps: MaterialMaps, camera: Camera, lighting, coverage: np.ndarray | None = None,
            env_lights: int = ENV_LIGHT_COUNT, seed: int = 0, specular: bool = True) -> RadianceImage:
    """Render UV-textured materials from ``camera``.

    ``lighting`` is a list of lights or a lat-long environment image (H, W, 3).
    """
    if isinstance(lighting, np.ndarray):
        lights = env_to_lights(lighting, env_lights, seed)
    else:
        lights = list(lighting)
    g = rasterize_gbuffer(mesh, camera)
    h, w = g.shape
    stack = np.zeros((h, w, 5))
    if g.mask.any():
        vals, ok = sample_maps(maps, g.uv[g.mask], coverage)
        if not ok.all():
            raise UnfilledTextureError(f"{int((~ok).sum())} visible pixels sample uncovered texels; fill holes first")
        stack[g.mask] = vals
    view_maps = MaterialMaps.from_stack(stack, clamp=True)
    return render_image(g, view_maps, lights, specular)
