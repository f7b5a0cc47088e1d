import math
import pathlib

import numpy as np
import pytest
from scipy import stats

from matforge import render
from matforge.brdf import MaterialSample
from matforge.geometry import GBuffer, camera_ring, make_uv_sphere, rasterize_gbuffer
from matforge.gradcheck import render_fixture, render_suite
from matforge.render import (DirectionalLight, MaterialMaps, PointLight, UnfilledTextureError, env_to_lights,
                             light_digest, pbr_loss, relight, render_image, rotate_env, sample_lights, shade_pixel)
from oracles import reference_shade

GOLDEN = pathlib.Path(__file__).parent / "data" / "golden_sphere.npz"


def random_maps(rng, shape):
    return MaterialMaps(rng.uniform(0, 1, shape + (3,)), rng.uniform(0, 1, shape), rng.uniform(0, 1, shape))


@pytest.fixture(scope="module")
def view():
    cam = camera_ring(1, resolution=(20, 20), vertical_fov=math.radians(40.0))[0]
    return rasterize_gbuffer(make_uv_sphere(24, 12), cam)


# -- lights ---------------------------------------------------------------------------------

def test_sample_lights_ranges():
    for seed in range(300):
        lights = sample_lights(seed)
        assert 3 <= len(lights) <= 10
        for light in lights:
            assert 1.0 <= light.intensity <= 10.0
            assert 2.0 - 1e-12 <= np.linalg.norm(light.position) <= 4.0 + 1e-12
            assert light.color == (1.0, 1.0, 1.0)


def test_sample_lights_deterministic():
    assert sample_lights(42) == sample_lights(42)
    assert sample_lights(42) != sample_lights(43)


def test_light_count_is_uniform():
    counts = np.bincount([len(sample_lights(s)) for s in range(10_000)], minlength=11)[3:]
    assert stats.chisquare(counts).pvalue > 0.01


# -- shading ---------------------------------------------------------------------------------

def test_no_lights_is_black():
    mat = MaterialSample([0.5] * 3, 0.5, 0.5)
    assert np.array_equal(shade_pixel([0, 0, 1], [0, 0, 0], (0, 0, 3), mat, []), np.zeros(3))


def test_unit_light_along_normal():
    mat = MaterialSample([1.0] * 3, 0.5, 0.0)
    out = shade_pixel([0, 0, 1], [0, 0, 0], (0, 0, 3), mat, [PointLight((0, 0, 1), math.pi)], specular=False)
    assert np.allclose(out, 1.0, rtol=1e-15)


def test_distance_clamp():
    mat = MaterialSample([1.0] * 3, 0.5, 0.0)
    near = shade_pixel([0, 0, 1], [0, 0, 0], (0, 0, 3), mat, [PointLight((0, 0, 0.01), 1.0)], specular=False)
    assert np.allclose(near, 1.0 / math.pi / 0.01, rtol=1e-12)


def test_lights_behind_surface_or_viewer_contribute_nothing():
    mat = MaterialSample([0.5] * 3, 0.5, 0.5)
    behind = shade_pixel([0, 0, 1], [0, 0, 0], (0, 0, 3), mat, [PointLight((0, 0, -2), 5.0)])
    unseen = shade_pixel([0, 0, 1], [0, 0, 0], (0, 0, -3), mat, [PointLight((0, 0, 2), 5.0)])
    assert not behind.any() and not unseen.any()


def test_shading_matches_per_light_oracle():
    rng = np.random.default_rng(31)
    for _ in range(200):
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        p = rng.uniform(-1, 1, 3)
        eye = p + n * 2 + rng.uniform(-1, 1, 3)
        a, r, m = rng.uniform(0, 1, 3), rng.uniform(0, 1), rng.uniform(0, 1)
        lights = [PointLight(tuple(rng.uniform(-4, 4, 3)), rng.uniform(1, 10), tuple(rng.uniform(0, 1, 3)))
                  for _ in range(rng.integers(1, 6))]
        got = shade_pixel(n, p, tuple(eye), MaterialSample(a, r, m), lights)
        want = reference_shade(n, p, eye, a, r, m, [(l.position, l.intensity, l.color) for l in lights])
        assert np.allclose(got, want, rtol=1e-12, atol=1e-300)


# -- images --------------------------------------------------------------------------------

def test_black_dielectric_without_specular_renders_black(view):
    maps = MaterialMaps.constant(view.shape, albedo=(0, 0, 0), metallic=0.0)
    img = render_image(view, maps, sample_lights(1), specular=False)
    assert not img.rgb.any()


def test_black_dielectric_keeps_specular_highlight(view):
    maps = MaterialMaps.constant(view.shape, albedo=(0, 0, 0), metallic=0.0)
    img = render_image(view, maps, sample_lights(1))
    assert img.rgb.max() > 0  # dielectric F0 = 0.04 still reflects


def test_masked_pixels_zero_and_covered_nonnegative(view, rng):
    img = render_image(view, random_maps(rng, view.shape), sample_lights(2))
    assert not img.rgb[~img.mask].any()
    assert np.all(img.rgb[img.mask] >= 0) and np.all(np.isfinite(img.rgb))
    assert np.array_equal(img.mask, view.mask)


def test_doubling_intensity_doubles_exactly(view, rng):
    maps = random_maps(rng, view.shape)
    lights = sample_lights(3)
    doubled = [PointLight(l.position, 2 * l.intensity, l.color) for l in lights]
    assert np.array_equal(render_image(view, maps, doubled).rgb, 2 * render_image(view, maps, lights).rgb)


def test_copies_of_a_light_scale_linearly(view, rng):
    maps = random_maps(rng, view.shape)
    light = sample_lights(4)[0]
    one = render_image(view, maps, [light]).rgb
    for k in (2, 3):
        assert np.array_equal(render_image(view, maps, [light] * k).rgb, k * one)
    for k in (4, 7):
        assert np.allclose(render_image(view, maps, [light] * k).rgb, k * one, rtol=1e-14, atol=0)


def test_resolution_mismatch(view):
    with pytest.raises(ValueError):
        render_image(view, MaterialMaps.constant((4, 4)), sample_lights(0))


def test_golden_image():
    data = np.load(GOLDEN)
    g = GBuffer(data["normal"], data["position"], data["uv"], data["depth"], data["mask"], tuple(data["eye"]))
    maps = MaterialMaps(data["albedo"], data["roughness"], data["metallic"])
    lights = [PointLight(tuple(p), float(i)) for p, i in zip(data["light_positions"], data["light_intensities"])]
    img = render_image(g, maps, lights)
    assert np.abs(img.rgb - data["rgb"]).max() <= 1e-6
    # the stored inputs still match the current rasterizer and light sampler
    cam = camera_ring(1, resolution=(24, 24), vertical_fov=math.radians(40.0))[0]
    fresh = rasterize_gbuffer(make_uv_sphere(24, 12), cam)
    assert np.array_equal(fresh.mask, g.mask)
    assert np.allclose(fresh.normal, g.normal, atol=1e-12)
    assert lights == sample_lights(7)


def test_render_independent_of_thread_count(view, rng, monkeypatch):
    maps = random_maps(rng, view.shape)
    lights = sample_lights(5)
    monkeypatch.setenv("MATFORGE_THREADS", "1")
    a = render_image(view, maps, lights).rgb
    la, ga = pbr_loss(maps, MaterialMaps.constant(view.shape), view, lights)
    monkeypatch.setenv("MATFORGE_THREADS", "4")
    b = render_image(view, maps, lights).rgb
    lb, gb = pbr_loss(maps, MaterialMaps.constant(view.shape), view, lights)
    assert a.tobytes() == b.tobytes()
    assert la == lb and ga.albedo.tobytes() == gb.albedo.tobytes()


# -- loss -------------------------------------------------------------------------------------

@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_loss_of_identical_maps_is_zero(view, rng, norm):
    maps = random_maps(rng, view.shape)
    loss, grad = pbr_loss(maps, maps, view, sample_lights(0), norm)
    assert loss == 0.0
    for part in (grad.albedo, grad.roughness, grad.metallic):
        assert not part.any()


@pytest.mark.parametrize("norm", ["l1", "l2"])
def test_loss_symmetric_and_nonnegative(view, rng, norm):
    a, b = random_maps(rng, view.shape), random_maps(rng, view.shape)
    lights = sample_lights(8)
    ab, _ = pbr_loss(a, b, view, lights, norm)
    ba, _ = pbr_loss(b, a, view, lights, norm)
    assert ab > 0 and math.isclose(ab, ba, rel_tol=1e-14)


def test_loss_is_mean_over_covered_pixels_and_channels(view, rng):
    a, b = random_maps(rng, view.shape), random_maps(rng, view.shape)
    lights = sample_lights(8)
    ra, rb = render_image(view, a, lights).rgb, render_image(view, b, lights).rgb
    diff = (ra - rb)[view.mask]
    assert math.isclose(pbr_loss(a, b, view, lights, "l1")[0], np.abs(diff).mean(), rel_tol=1e-12)
    assert math.isclose(pbr_loss(a, b, view, lights, "l2")[0], (diff ** 2).mean(), rel_tol=1e-12)


def test_loss_zero_only_for_equal_renders(view):
    lights = sample_lights(0)
    a = MaterialMaps.constant(view.shape, albedo=(0.5, 0.5, 0.5))
    b = MaterialMaps.constant(view.shape, albedo=(0.5, 0.5, 0.51))
    assert pbr_loss(a, b, view, lights)[0] > 0


def test_loss_uses_one_light_list(view, rng, monkeypatch):
    seen = []
    real = render._per_light

    def spy(normal, position, eye, lights):
        seen.append(light_digest(lights))
        return real(normal, position, eye, lights)

    monkeypatch.setattr(render, "_per_light", spy)
    pbr_loss(random_maps(rng, view.shape), random_maps(rng, view.shape), view, iter(sample_lights(6)))
    assert len(seen) >= 3 and len(set(seen)) == 1
    assert seen[0] == light_digest(sample_lights(6))


def test_loss_errors(view):
    empty = GBuffer(view.normal, view.position, view.uv, view.depth, np.zeros_like(view.mask), view.view_origin)
    maps = MaterialMaps.constant(view.shape)
    with pytest.raises(ValueError):
        pbr_loss(maps, maps, empty, sample_lights(0))
    with pytest.raises(ValueError):
        pbr_loss(maps, maps, view, sample_lights(0), norm="huber")


def test_render_suite_gradients():
    rep = render_suite(resolution=10, seed=3)
    assert rep.passed, rep.lines()


def test_fixture_has_coverage():
    g, pred, gt, lights = render_fixture(16, 0)
    assert g.mask.sum() > 50 and pred.shape == g.shape and len(lights) >= 3


# -- environment lighting and relighting ----------------------------------------------------------

SPHERE = make_uv_sphere(32, 16)


def diffuse_maps(value=0.5):
    return MaterialMaps.constant((16, 16), albedo=(value,) * 3, roughness=0.5, metallic=0.0)


def test_env_lights_estimate_total_irradiance():
    env = np.ones((32, 64, 3))
    lights = env_to_lights(env, 128, seed=0)
    assert len(lights) == 128
    total = sum(l.irradiance for l in lights)
    assert math.isclose(total, 4 * math.pi, rel_tol=0.02)  # weights estimate the full solid angle


def test_uniform_environment_diffuse_sphere_is_flat():
    cam = camera_ring(1, resolution=(48, 48), vertical_fov=math.radians(40.0))[0]
    img = relight(SPHERE, diffuse_maps(), cam, np.ones((32, 64, 3)), specular=False)
    # a Lambertian under unit radiance from every direction reflects albedo * 1
    vals = img.rgb[img.mask]
    assert np.abs(vals / 0.5 - 1).max() < 0.02


def test_zero_environment_is_black():
    cam = camera_ring(1, resolution=(16, 16))[0]
    img = relight(SPHERE, diffuse_maps(), cam, np.zeros((8, 16, 3)))
    assert not img.rgb.any()


def test_env_rotation_matches_camera_rotation():
    h, w = 32, 64
    theta = math.pi * (np.arange(h) + 0.5) / h
    phi = 2 * math.pi * (np.arange(w) + 0.5) / w
    env = (1.4 + 0.8 * np.cos(theta)[:, None] + 0.5 * np.cos(phi)[None, :])[..., None].repeat(3, -1)
    cams = camera_ring(4, resolution=(48, 48), vertical_fov=math.radians(40.0))
    a = relight(SPHERE, diffuse_maps(), cams[0], env, specular=False)
    b = relight(SPHERE, diffuse_maps(), cams[1], rotate_env(env, w // 4), specular=False)
    assert np.array_equal(a.mask, b.mask)
    assert np.abs(a.rgb - b.rgb).max() / a.rgb.max() < 0.02


def test_rotation_invariant_environment():
    h, w = 16, 32
    theta = math.pi * (np.arange(h) + 0.5) / h
    env = np.repeat((1 + np.cos(theta))[:, None, None], w, 1).repeat(3, -1)
    cam = camera_ring(1, resolution=(24, 24))[0]
    a = relight(SPHERE, diffuse_maps(), cam, env)
    b = relight(SPHERE, diffuse_maps(), cam, rotate_env(env, 5))
    assert a.rgb.tobytes() == b.rgb.tobytes()


def test_env_lights_deterministic_and_validated():
    env = np.random.default_rng(0).uniform(0, 2, (8, 16, 3))
    assert env_to_lights(env, seed=3) == env_to_lights(env, seed=3)
    assert all(isinstance(l, DirectionalLight) for l in env_to_lights(env))
    with pytest.raises(ValueError):
        env_to_lights(-env)


def test_relight_with_point_lights_matches_view_render():
    cam = camera_ring(1, resolution=(24, 24))[0]
    maps = diffuse_maps(0.7)
    lights = sample_lights(9)
    img = relight(SPHERE, maps, cam, lights)
    g = rasterize_gbuffer(SPHERE, cam)
    ref = render_image(g, MaterialMaps.constant(g.shape, albedo=(0.7,) * 3, roughness=0.5), lights)
    assert np.allclose(img.rgb, ref.rgb, rtol=1e-12, atol=1e-15)


def test_relight_unfilled_texture_errors():
    cam = camera_ring(1, resolution=(24, 24))[0]
    coverage = np.zeros((16, 16), dtype=bool)
    coverage[:, :2] = True
    with pytest.raises(UnfilledTextureError):
        relight(SPHERE, diffuse_maps(), cam, sample_lights(0), coverage=coverage)


def test_material_maps_validation():
    with pytest.raises(ValueError):
        MaterialMaps(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        MaterialMaps(np.full((4, 4, 3), 1.5), np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        PointLight((0, 0, 3), -1.0)
    m = MaterialMaps.procedural(8)
    assert np.array_equal(MaterialMaps.from_stack(m.stack()).stack(), m.stack())
