"""Baking per-view material images into the UV atlas, hole filling, and UV-space refinement."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import diffusion
from .dit import MATERIAL_CHANNELS, MRDiT, ReferenceTokens, ToyCodec
from .geometry import Camera, GBuffer, TriMesh, rasterize_uv_gbuffer
from .parallel import map_tiles, row_tiles
from .render import MaterialMaps, sample_masked

MATERIALS = ("albedo", "roughness", "metallic")
FACE_EPS = 0.1
DEPTH_EPS = 1e-3
BLEND_POWER = 2


@dataclass(frozen=True)
class TextureMap:
    """UV-space image (H, W) or (H, W, C) with a boolean coverage mask; uncovered texels are zero."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if data.shape[:2] != mask.shape or mask.ndim != 2:
            raise ValueError(f"texture data {data.shape} does not match mask {mask.shape}")
        if not np.isfinite(data).all():
            raise ValueError("texture data must be finite")
        if np.any(data[~mask] != 0):
            raise ValueError("uncovered texels must hold zero")
        data.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def resolution(self) -> tuple[int, int]:
        h, w = self.mask.shape
        return (w, h)

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else self.data.shape[2]

    @classmethod
    def masked(cls, data: np.ndarray, mask: np.ndarray) -> "TextureMap":
        """Build a map, zeroing everything outside ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        data = np.asarray(data, dtype=np.float64)
        keep = mask if data.ndim == 2 else mask[..., None]
        return cls(np.where(keep, data, 0.0), mask)


@dataclass(frozen=True)
class ViewSet:
    cameras: list[Camera]
    images: list[MaterialMaps]
    gbuffers: list[GBuffer]

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.gbuffers)):
            raise ValueError("view set needs one image and one G-buffer per camera")
        for cam, img, g in zip(self.cameras, self.images, self.gbuffers):
            if img.shape != (cam.height, cam.width) or g.shape != img.shape:
                raise ValueError("view image resolution must equal camera resolution")

    def __len__(self) -> int:
        return len(self.cameras)


def textures_to_maps(textures: dict[str, TextureMap]) -> tuple[MaterialMaps, np.ndarray]:
    """Per-material texture maps to one MaterialMaps plus the shared coverage mask."""
    mask = textures["albedo"].mask
    for name in MATERIALS:
        if not np.array_equal(textures[name].mask, mask):
            raise ValueError("material textures must share one coverage mask")
    maps = MaterialMaps(np.clip(textures["albedo"].data, 0, 1), np.clip(textures["roughness"].data, 0, 1),
                        np.clip(textures["metallic"].data, 0, 1))
    return maps, mask


def maps_to_textures(maps: MaterialMaps, mask: np.ndarray) -> dict[str, TextureMap]:
    return {name: TextureMap.masked(getattr(maps, name), mask) for name in MATERIALS}


def _view_samples(cam: Camera, img: MaterialMaps, g: GBuffer, pos: np.ndarray, nrm: np.ndarray,
                  eps_face: float, eps_z: float):
    """Sample one view at surface points; returns (stack values, cosine, accepted)."""
    pix, depth = cam.project(pos)
    to_eye = np.asarray(cam.eye) - pos
    to_eye /= np.linalg.norm(to_eye, axis=-1, keepdims=True)
    cos = np.einsum("...k,...k->...", nrm, to_eye)
    w, h = cam.width, cam.height
    with np.errstate(invalid="ignore"):
        inside = (depth > cam.near) & (pix[..., 0] >= 0) & (pix[..., 0] < w) & (pix[..., 1] >= 0) & (pix[..., 1] < h)
    accepted = inside & (cos > eps_face)
    uv = np.stack([pix[..., 0] / w, 1.0 - pix[..., 1] / h], axis=-1)
    uv = np.where(accepted[..., None], uv, 0.5)
    zbuf = np.where(g.mask, cam.window_depth(np.where(g.mask, g.depth, 1.0)), 0.0)
    z_seen, z_ok = sample_masked(zbuf, g.mask, uv)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_here = cam.window_depth(np.where(accepted, depth, 1.0))
    accepted &= z_ok & (np.abs(z_here - z_seen) < eps_z)
    vals, v_ok = sample_masked(img.stack(), g.mask, uv)
    accepted &= v_ok
    return vals, cos, accepted


def view_weights(mesh: TriMesh, views: ViewSet, uv_resolution, eps_face: float = FACE_EPS,
                 eps_z: float = DEPTH_EPS, power: int = BLEND_POWER) -> tuple[np.ndarray, GBuffer]:
    """Unnormalized blend weight of every view at every texel, shape (views, H, W)."""
    uvg = rasterize_uv_gbuffer(mesh, uv_resolution)
    out = np.zeros((len(views),) + uvg.shape)
    for k, (cam, img, g) in enumerate(zip(views.cameras, views.images, views.gbuffers)):
        _, cos, ok = _view_samples(cam, img, g, uvg.position, uvg.normal, eps_face, eps_z)
        out[k] = np.where(ok & uvg.mask, cos, 0.0) ** power
    return out, uvg


def backproject(mesh: TriMesh, views: ViewSet, uv_resolution, eps_face: float = FACE_EPS,
                eps_z: float = DEPTH_EPS, power: int = BLEND_POWER) -> dict[str, TextureMap]:
    """Blend every view's material samples into the UV atlas with weights (n . view)^power."""
    if mesh.uvs.shape[0] == 0:
        raise ValueError("mesh lacks UV coordinates")
    if len(views) == 0:
        raise ValueError("back-projection needs at least one view")
    uvg = rasterize_uv_gbuffer(mesh, uv_resolution)
    h, w = uvg.shape

    def tile(rows):
        pos, nrm, occ = uvg.position[rows], uvg.normal[rows], uvg.mask[rows]
        acc = np.zeros(occ.shape + (MATERIAL_CHANNELS,))
        wsum = np.zeros(occ.shape)
        for cam, img, g in zip(views.cameras, views.images, views.gbuffers):
            vals, cos, ok = _view_samples(cam, img, g, pos, nrm, eps_face, eps_z)
            wt = np.where(ok & occ, cos, 0.0) ** power
            acc += wt[..., None] * vals
            wsum += wt
        return acc, wsum

    acc = np.zeros((h, w, MATERIAL_CHANNELS))
    wsum = np.zeros((h, w))
    for rows, (a, s) in zip(row_tiles(h), map_tiles(tile, row_tiles(h))):
        acc[rows], wsum[rows] = a, s
    covered = wsum > 0
    stack = np.where(covered[..., None], acc / np.where(covered, wsum, 1.0)[..., None], 0.0)
    return {
        "albedo": TextureMap.masked(stack[..., :3], covered),
        "roughness": TextureMap.masked(stack[..., 3], covered),
        "metallic": TextureMap.masked(stack[..., 4], covered),
    }


def _box_down(data: np.ndarray, weight: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = weight.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw), (0, 0)))
        weight = np.pad(weight, ((0, ph), (0, pw)))
    h2, w2 = weight.shape[0] // 2, weight.shape[1] // 2
    wd = (data * weight[..., None]).reshape(h2, 2, w2, 2, -1).sum(axis=(1, 3))
    ws = weight.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    mean = np.where(ws[..., None] > 0, wd / np.where(ws > 0, ws, 1.0)[..., None], 0.0)
    return mean, ws


def fill_holes(t: TextureMap, atlas_mask: np.ndarray | None = None) -> TextureMap:
    """Pull-push fill of uncovered texels inside ``atlas_mask`` (default: the whole map).

    Covered texels are copied through unchanged. A map with no coverage at all
    warns and comes back all zero.
    """
    atlas = np.ones(t.mask.shape, dtype=bool) if atlas_mask is None else np.asarray(atlas_mask, dtype=bool)
    if atlas.shape != t.mask.shape:
        raise ValueError("atlas mask shape does not match texture")
    if not t.mask.any():
        warnings.warn("texture has no covered texels; returning zeros", stacklevel=2)
        return TextureMap(np.zeros_like(t.data), np.zeros_like(t.mask))
    data = t.data if t.data.ndim == 3 else t.data[..., None]
    levels = [(data, t.mask.astype(np.float64))]
    while max(levels[-1][1].shape) > 1:
        levels.append(_box_down(*levels[-1]))
    filled = levels[-1][0]
    for d, wgt in reversed(levels[:-1]):
        h, w = wgt.shape
        up = np.repeat(np.repeat(filled, 2, axis=0), 2, axis=1)[:h, :w]
        filled = np.where(wgt[..., None] > 0, d, up)
    filled = np.where(t.mask[..., None], data, filled)
    if t.data.ndim == 2:
        filled = filled[..., 0]
    out_mask = atlas | t.mask
    return TextureMap.masked(filled, out_mask)


def bake_uv_normal(mesh: TriMesh, uv_resolution) -> TextureMap:
    g = rasterize_uv_gbuffer(mesh, uv_resolution)
    return TextureMap.masked(g.normal, g.mask)


RefinerFn = Callable[[np.ndarray, np.ndarray, np.ndarray, ReferenceTokens, int], np.ndarray]


def _torch_refiner(model: MRDiT) -> RefinerFn:
    def run(z, t_c, t_n, text, t):
        as_t = lambda a: torch.tensor(a, dtype=torch.float32)
        with torch.no_grad():
            out = model(as_t(z), as_t(t_c), as_t(t_n), text.to(torch.float32), torch.tensor([t]))
        return out.double().numpy()
    return run


def refine_texture(t_c: dict[str, TextureMap], t_n: TextureMap, text: ReferenceTokens,
                   model: MRDiT | RefinerFn, schedule: diffusion.NoiseSchedule, steps: int = 50, seed: int = 0,
                   guidance: diffusion.GuidanceSchedule | None = None,
                   latent_resolution: tuple[int, int] | None = None,
                   atlas_mask: np.ndarray | None = None) -> dict[str, TextureMap]:
    """Sample the refined texture conditioned on the coarse texture and UV normals.

    ``model`` is an MRDiT or any callable with the ``(z, t_c, t_n, text, t)``
    signature on numpy stacks shaped (1, 1, C, H, W). The result is resized to
    the texture resolution, clamped to [0, 1] and zeroed outside the atlas.
    """
    maps, _ = textures_to_maps(t_c)
    w, h = t_n.resolution
    if maps.shape != (h, w):
        raise ValueError("coarse texture and normal map resolutions differ")
    atlas = t_n.mask if atlas_mask is None else np.asarray(atlas_mask, dtype=bool)
    lw, lh = latent_resolution or (w, h)
    fn = _torch_refiner(model) if isinstance(model, MRDiT) else model
    cond_c = ToyCodec.encode(maps.stack().transpose(2, 0, 1)[None, None])
    cond_n = t_n.data.transpose(2, 0, 1)[None, None]
    blank = ReferenceTokens(text.image[..., :0, :], text.text[..., :0, :])

    def v_model(z, t, cond):
        return fn(z, cond_c, cond_n, text if cond else blank, t)

    z0 = diffusion.sample(v_model, schedule, (1, 1, MATERIAL_CHANNELS, lh, lw), steps, guidance, seed)
    x = ToyCodec.decode(z0)[0, 0]
    if (lh, lw) != (h, w):
        x = torch.nn.functional.interpolate(torch.as_tensor(x)[None], size=(h, w), mode="bilinear",
                                            align_corners=False)[0].numpy()
    stack = np.clip(x.transpose(1, 2, 0), 0.0, 1.0)
    return maps_to_textures(MaterialMaps.from_stack(stack), atlas)
