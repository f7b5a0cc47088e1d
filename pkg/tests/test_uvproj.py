import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from matforge import diffusion
from matforge.dit import ReferenceTokens
from matforge.geometry import (Camera, TriMesh, camera_ring, make_quad, make_uv_sphere, rasterize_gbuffer,
                               rasterize_uv_gbuffer, texel_centers)
from matforge.render import MaterialMaps, PointLight, relight, render_image
from matforge.train import render_material_views
from matforge.uvproj import (TextureMap, ViewSet, backproject, bake_uv_normal, fill_holes, maps_to_textures,
                             refine_texture, textures_to_maps, view_weights)
import torch


def psnr(a, b):
    return 10 * math.log10(1.0 / np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def constant_views(mesh, cams, colors):
    gbufs = [rasterize_gbuffer(mesh, c) for c in cams]
    images = [MaterialMaps.constant(g.shape, albedo=col, roughness=0.25 + 0.5 * col[0], metallic=col[1])
              for g, col in zip(gbufs, colors)]
    return ViewSet(cams, images, gbufs)


@pytest.fixture(scope="module")
def sphere_bake():
    res = 256
    tex = MaterialMaps.procedural(res)
    mesh = make_uv_sphere()
    cams = camera_ring(4, resolution=(64, 64))
    gbufs, views = render_material_views(mesh, tex, cams)
    baked = backproject(mesh, ViewSet(cams, views, gbufs), (res, res))
    return mesh, tex, cams, gbufs, views, baked


# -- back-projection -----------------------------------------------------------------------------

def test_constant_view_on_facing_quad():
    quad = make_quad(0.0, 1.0)
    cam = Camera((0.0, 0.0, 3.0), resolution=(32, 32), vertical_fov=math.radians(50.0))
    c = (0.2, 0.6, 0.9)
    baked = backproject(quad, constant_views(quad, [cam], [c]), (32, 32))
    m = baked["albedo"].mask
    assert m.mean() > 0.9
    assert np.allclose(baked["albedo"].data[m], c, rtol=0, atol=1e-12)
    assert np.allclose(baked["roughness"].data[m], 0.35, atol=1e-12)


def test_faces_turned_away_are_uncovered():
    away = make_quad(0.0, 1.0, normal_sign=-1.0)
    cam = Camera((0.0, 0.0, 3.0), resolution=(32, 32))
    views = ViewSet([cam], [MaterialMaps.constant((32, 32))], [rasterize_gbuffer(make_quad(0.0, 1.0), cam)])
    baked = backproject(away, views, (16, 16))
    assert not baked["albedo"].mask.any()
    assert not baked["albedo"].data.any()


def test_sphere_round_trip_psnr(sphere_bake):
    _, tex, _, _, _, baked = sphere_bake
    m = baked["albedo"].mask
    assert m.mean() > 0.5
    for name in ("albedo", "roughness", "metallic"):
        assert psnr(baked[name].data[m], getattr(tex, name)[m]) >= 30.0


def test_bake_then_render_matches_source_view(sphere_bake):
    mesh, tex, cams, gbufs, views, baked = sphere_bake
    maps, mask = textures_to_maps(baked)
    lights = [PointLight((2.0, 2.5, 3.0), 20.0), PointLight((-3.0, 1.0, 2.0), 12.0)]
    ref = render_image(gbufs[0], views[0], lights)
    filled, _ = textures_to_maps({k: fill_holes(t) for k, t in baked.items()})
    got = relight(mesh, filled, cams[0], lights)
    # compare only pixels whose four texture taps were all covered by the bake
    ok = ref.mask.copy()
    uv = gbufs[0].uv[ok]
    h, w = mask.shape
    x = np.clip(uv[:, 0] * w - 0.5, 0, w - 1)
    y = np.clip((1 - uv[:, 1]) * h - 0.5, 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    taps = mask[y0, x0] & mask[y0, x1] & mask[y1, x0] & mask[y1, x1]
    ok[ok] = taps
    peak = ref.rgb[ok].max()
    assert ok.sum() > 0.5 * ref.mask.sum()
    assert 10 * math.log10(peak ** 2 / np.mean((got.rgb[ok] - ref.rgb[ok]) ** 2)) >= 30.0


def test_blend_is_convex_per_texel():
    mesh = make_uv_sphere(24, 12)
    cams = camera_ring(4, resolution=(32, 32))
    colors = [(0.1, 0.9, 0.3), (0.8, 0.2, 0.5), (0.4, 0.4, 1.0), (0.0, 0.6, 0.7)]
    views = constant_views(mesh, cams, colors)
    baked = backproject(mesh, views, (64, 64))
    weights, _ = view_weights(mesh, views, (64, 64))
    m = baked["albedo"].mask
    assert np.array_equal(m, weights.sum(0) > 0)
    col = np.array(colors)
    used = weights > 0
    for ch in range(3):
        lo = np.where(used, col[:, ch, None, None], np.inf).min(0)
        hi = np.where(used, col[:, ch, None, None], -np.inf).max(0)
        v = baked["albedo"].data[..., ch]
        assert np.all(v[m] >= lo[m] - 1e-12) and np.all(v[m] <= hi[m] + 1e-12)
    # texels seen by two views blend strictly between them
    assert np.any(used.sum(0) >= 2)


def _occluder_scene():
    # front quad at z=0.5 covers the middle of the back quad at z=0; separate UV charts
    front = make_quad(0.5, 0.3, uv_rect=(0.5, 0.0, 1.0, 0.5))
    back = make_quad(0.0, 1.0, uv_rect=(0.0, 0.5, 0.5, 1.0))
    return TriMesh.concat(front, back), front, back


def test_occluded_texels_get_no_contribution():
    mesh, _, _ = _occluder_scene()
    eye = np.array([0.0, 0.0, 3.0])
    cam = Camera(tuple(eye), resolution=(48, 48), vertical_fov=math.radians(45.0))
    weights, uvg = view_weights(mesh, constant_views(mesh, [cam], [(0.5, 0.5, 0.5)]), (128, 128))
    back = uvg.mask & (np.abs(uvg.position[..., 2]) < 1e-9)
    p = uvg.position[back]
    # exact occlusion: the segment from p to the eye crosses z=0.5 inside the front square
    s = (0.5 - p[:, 2]) / (eye[2] - p[:, 2])
    hit = p + s[:, None] * (eye - p)
    hidden = (np.abs(hit[:, 0]) <= 0.3) & (np.abs(hit[:, 1]) <= 0.3)
    w = weights[0][back]
    assert hidden.sum() > 100 and (~hidden).sum() > 100
    assert not np.any(w[hidden] > 0)
    assert np.mean(w[~hidden] > 0) > 0.95


def test_backproject_errors():
    cam = Camera((0, 0, 3), resolution=(8, 8))
    quad = make_quad()
    views = constant_views(quad, [cam], [(0.5, 0.5, 0.5)])
    no_uv = TriMesh(quad.vertices, quad.normals, np.zeros((0, 2)), quad.faces[:0])
    with pytest.raises(ValueError):
        backproject(no_uv, views, (8, 8))
    with pytest.raises(ValueError):
        backproject(quad, ViewSet([], [], []), (8, 8))
    with pytest.raises(ValueError):
        ViewSet([cam], [MaterialMaps.constant((4, 4))], [rasterize_gbuffer(quad, cam)])


def test_backproject_independent_of_thread_count(monkeypatch):
    mesh = make_uv_sphere(16, 8)
    cams = camera_ring(3, resolution=(24, 24))
    gbufs, views = render_material_views(mesh, MaterialMaps.procedural(48), cams)
    vs = ViewSet(cams, views, gbufs)
    monkeypatch.setenv("MATFORGE_THREADS", "1")
    a = backproject(mesh, vs, (48, 48))
    monkeypatch.setenv("MATFORGE_THREADS", "4")
    b = backproject(mesh, vs, (48, 48))
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


# -- hole filling ------------------------------------------------------------------------------------

def test_fill_fully_covered_is_unchanged(rng):
    t = TextureMap(rng.uniform(size=(16, 16, 3)), np.ones((16, 16), bool))
    out = fill_holes(t)
    assert out.data.tobytes() == t.data.tobytes() and out.mask.all()


def test_fill_single_hole_with_constant():
    c = 0.37
    mask = np.ones((9, 9), bool)
    mask[4, 4] = False
    t = TextureMap.masked(np.full((9, 9), c), mask)
    out = fill_holes(t)
    assert out.data[4, 4] == pytest.approx(c, abs=1e-15)
    assert out.mask.all()


def test_fill_smooth_gradient_from_half_coverage():
    rng = np.random.default_rng(8)
    uv = texel_centers((64, 64))
    img = 0.2 + 0.6 * uv[..., 0] * 0.7 + 0.3 * uv[..., 1]
    mask = rng.uniform(size=(64, 64)) < 0.5
    out = fill_holes(TextureMap.masked(img, mask))
    rms = np.sqrt(np.mean((out.data - img) ** 2))
    assert rms / np.sqrt(np.mean(img ** 2)) < 0.10


@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 20), st.integers(3, 20), st.floats(0.05, 0.95))
def test_fill_never_touches_covered_texels(seed, h, w, frac):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(h, w)) < frac
    if not mask.any():
        mask[0, 0] = True
    t = TextureMap.masked(rng.uniform(size=(h, w, 3)), mask)
    out = fill_holes(t)
    assert out.data[mask].tobytes() == t.data[mask].tobytes()
    assert out.mask.all()
    assert np.all(out.data >= t.data[mask].min(0) - 1e-12) and np.all(out.data <= t.data[mask].max(0) + 1e-12)


def test_fill_respects_atlas_mask(rng):
    mask = np.zeros((8, 8), bool)
    mask[:4, :4] = True
    atlas = np.zeros((8, 8), bool)
    atlas[:6, :6] = True
    out = fill_holes(TextureMap.masked(rng.uniform(size=(8, 8)), mask), atlas)
    assert np.array_equal(out.mask, atlas)
    assert not out.data[~atlas].any()


def test_fill_empty_map_warns():
    with pytest.warns(UserWarning):
        out = fill_holes(TextureMap(np.zeros((4, 4)), np.zeros((4, 4), bool)))
    assert not out.mask.any() and not out.data.any()


# -- UV normals --------------------------------------------------------------------------------------

def test_quad_normal_bake():
    quad = make_quad(0.0, 1.0, uv_rect=(0.1, 0.1, 0.7, 0.9))
    t = bake_uv_normal(quad, (32, 32))
    assert np.array_equal(t.mask, rasterize_uv_gbuffer(quad, (32, 32)).mask)
    assert np.allclose(t.data[t.mask], (0, 0, 1))
    assert t.resolution == (32, 32) and t.channels == 3


def test_sphere_normal_bake_unit_length():
    t = bake_uv_normal(make_uv_sphere(24, 12), (64, 32))
    assert t.resolution == (64, 32)
    assert np.abs(np.linalg.norm(t.data[t.mask], axis=-1) - 1).max() <= 1e-4


# -- refinement ----------------------------------------------------------------------------------------

def _oracle_refiner(schedule):
    """Returns the exact v for a clean latent equal to the coarse-texture condition."""
    def fn(z, t_c, t_n, text, t):
        a, s = schedule.sqrt_alpha_bar[t], schedule.sqrt_one_minus_alpha_bar[t]
        return (a * z - t_c) / s
    return fn


def _coarse(res=32, cover=0.8, seed=0):
    rng = np.random.default_rng(seed)
    mesh = make_uv_sphere(16, 8)
    t_n = bake_uv_normal(mesh, (res, res))
    mask = t_n.mask & (rng.uniform(size=t_n.mask.shape) < cover)
    return maps_to_textures(MaterialMaps.procedural(res), mask), t_n


def test_refine_with_oracle_reproduces_coarse_texture():
    sched = diffusion.make_schedule(1000)
    t_c, t_n = _coarse()
    text = ReferenceTokens(torch.zeros(0, 8), torch.zeros(2, 8))
    out = refine_texture(t_c, t_n, text, _oracle_refiner(sched), sched, steps=50, seed=3,
                         guidance=diffusion.GuidanceSchedule())
    for name in ("albedo", "roughness", "metallic"):
        assert np.abs(out[name].data - t_c[name].data)[t_c[name].mask].max() <= 1e-3


def test_refine_output_resolution_and_atlas_masking():
    sched = diffusion.make_schedule(1000)
    t_c, t_n = _coarse(32)
    calls = []

    def fn(z, c, n, text, t):
        calls.append(z.shape)
        return np.full_like(z, 0.3)

    out = refine_texture(t_c, t_n, ReferenceTokens(torch.zeros(0, 8), torch.zeros(1, 8)), fn, sched, steps=4,
                         latent_resolution=(16, 16))
    assert calls and all(s == (1, 1, 5, 16, 16) for s in calls)
    for name, tex in out.items():
        assert tex.resolution == (32, 32)
        assert np.array_equal(tex.mask, t_n.mask)
        assert not tex.data[~t_n.mask].any()
        assert tex.data.min() >= 0 and tex.data.max() <= 1


def test_refine_uses_blank_text_for_unconditional_branch():
    sched = diffusion.make_schedule(1000)
    t_c, t_n = _coarse(16)
    seen = []

    def fn(z, c, n, text, t):
        seen.append(text.text.shape[0])
        return np.zeros_like(z)

    refine_texture(t_c, t_n, ReferenceTokens(torch.zeros(0, 8), torch.ones(3, 8)), fn, sched, steps=3,
                   guidance=diffusion.GuidanceSchedule(steps=3))
    assert seen == [3, 0] * 3


# -- texture containers -----------------------------------------------------------------------------------

def test_texture_map_invariants():
    with pytest.raises(ValueError):
        TextureMap(np.ones((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        TextureMap(np.full((2, 2), np.nan), np.ones((2, 2), bool))
    with pytest.raises(ValueError):
        TextureMap(np.zeros((4, 4)), np.zeros((4, 5), bool))
    t = TextureMap.masked(np.ones((4, 6, 3)), np.eye(4, 6, dtype=bool))
    assert t.resolution == (6, 4) and t.channels == 3 and t.data.sum() == 12


def test_textures_maps_round_trip(rng):
    mask = rng.uniform(size=(8, 8)) < 0.5
    tex = maps_to_textures(MaterialMaps.procedural(8), mask)
    maps, m = textures_to_maps(tex)
    assert np.array_equal(m, mask)
    assert np.array_equal(maps.albedo[mask], MaterialMaps.procedural(8).albedo[mask])
    tex["roughness"] = TextureMap(np.zeros((8, 8)), np.zeros((8, 8), bool))
    with pytest.raises(ValueError):
        textures_to_maps(tex)
