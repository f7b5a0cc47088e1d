"""Numerical self-checks: finite-difference gradient suites and algebraic identity suites.

Each suite returns a :class:`Report`; the ``gradcheck`` command prints it and
exits nonzero when any check fails.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import brdf, diffusion
from .dit import (AppearanceAttention, DitConfig, Global3DAttention, MGDiT, ReferenceTokens, appearance_attention,
                  global_3d_attention, randomize_)
from .geometry import camera_ring, make_uv_sphere, rasterize_gbuffer
from .render import MaterialMaps, pbr_loss, sample_lights
from .train import _PbrLossFn, _pbr_job

REL_TOL = 1e-4
ABS_FLOOR = 1e-7


@dataclass
class Check:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tolerance)


@dataclass
class Report:
    suite: str
    checks: list[Check] = field(default_factory=list)

    def add(self, name: str, value: float, tolerance: float) -> Check:
        c = Check(name, float(value), float(tolerance))
        self.checks.append(c)
        return c

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'}  {self.suite}.{c.name}  {c.value:.3e} <= {c.tolerance:.1e}"
               for c in self.checks]
        out.append(f"{self.suite}: {'all checks passed' if self.passed else 'FAILED'}")
        return out


def scaled_error(analytic, numeric) -> np.ndarray:
    """|a - n| over max(|a|, |n|) with the denominator floored so absolute errors
    under ``ABS_FLOOR`` always count as passing."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR / REL_TOL)


def _unit(rng, count):
    v = rng.standard_normal((count, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_shading(rng: np.random.Generator, count: int, margin: float = 0.05):
    """Random shading configurations away from the hemisphere boundary, the G-term ties and the
    roughness clamp; returns (dots tuple, albedo, roughness, metallic)."""
    n = np.tile([0.0, 0.0, 1.0], (count, 1))
    parts = []
    have = 0
    while have < count:
        wi, wo = _unit(rng, 4 * count), _unit(rng, 4 * count)
        wi[:, 2], wo[:, 2] = np.abs(wi[:, 2]), np.abs(wo[:, 2])
        s = wi + wo
        h = s / np.linalg.norm(s, axis=-1, keepdims=True)
        nh, nwo, nwi, woh = h[:, 2], wo[:, 2], wi[:, 2], np.sum(wo * h, axis=-1)
        masking, shadowing = brdf._g_terms(nh, nwo, nwi, woh)
        terms = np.sort(np.stack([np.ones_like(masking), masking, shadowing], -1), -1)
        ok = (nwi > margin) & (nwo > margin) & (woh > margin) & (terms[:, 1] - terms[:, 0] > 10 * brdf.TIE_DELTA)
        parts.append(np.stack([nh, nwo, nwi, woh], -1)[ok])
        have += int(ok.sum())
    dots = np.concatenate(parts)[:count]
    albedo = rng.uniform(0.0, 1.0, (count, 3))
    rough = rng.uniform(0.1, 0.95, count)
    metal = rng.uniform(0.0, 1.0, count)
    return tuple(dots.T), albedo, rough, metal, n


def brdf_suite(samples: int = 1000, seed: int = 0, step: float = 1e-4) -> Report:
    """Closed-form BRDF partials against central differences."""
    rng = np.random.default_rng(seed)
    dots, a, r, m, _ = random_shading(rng, samples)
    d_a, d_r, d_m, _ = brdf.grad_dots(*dots, a, r, m)
    rep = Report("brdf")

    def f(a_, r_, m_):
        return brdf.eval_dots(*dots, a_, r_, m_)

    fd_a = np.zeros_like(a)
    for c in range(3):
        e = np.zeros(3)
        e[c] = step
        # output channel c depends only on albedo channel c
        fd_a[:, c] = (f(a + e, r, m)[:, c] - f(a - e, r, m)[:, c]) / (2 * step)
    fd_r = (f(a, r + step, m) - f(a, r - step, m)) / (2 * step)
    fd_m = (f(a, r, m + step) - f(a, r, m - step)) / (2 * step)
    rep.add("d_albedo", scaled_error(d_a, fd_a).max(), REL_TOL)
    rep.add("d_roughness", scaled_error(d_r, fd_r).max(), REL_TOL)
    rep.add("d_metallic", scaled_error(d_m, fd_m).max(), REL_TOL)
    return rep


def render_fixture(resolution: int = 16, seed: int = 0):
    """A sphere view with two random material maps and a seeded light rig."""
    rng = np.random.default_rng(seed)
    cam = camera_ring(1, resolution=(resolution, resolution), vertical_fov=math.radians(40.0))[0]
    g = rasterize_gbuffer(make_uv_sphere(24, 12), cam)

    def maps():
        return MaterialMaps(rng.uniform(0.05, 0.95, g.shape + (3,)), rng.uniform(0.2, 0.9, g.shape),
                            rng.uniform(0.05, 0.95, g.shape))
    return g, maps(), maps(), sample_lights(seed)


def render_suite(resolution: int = 16, seed: int = 0, step: float = 1e-6, norms=("l1", "l2")) -> Report:
    """Rendered-material loss gradient against central differences over every map entry."""
    g, pred, gt, lights = render_fixture(resolution, seed)
    rep = Report("render")
    for norm in norms:
        _, grad = pbr_loss(pred, gt, g, lights, norm)
        x = pred.stack()
        analytic = np.concatenate([grad.albedo, grad.roughness[..., None], grad.metallic[..., None]], -1)
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            if not g.mask[idx[:2]]:
                continue
            hi, lo = x.copy(), x.copy()
            hi[idx] += step
            lo[idx] -= step
            numeric[idx] = (pbr_loss(MaterialMaps.from_stack(hi), gt, g, lights, norm)[0]
                            - pbr_loss(MaterialMaps.from_stack(lo), gt, g, lights, norm)[0]) / (2 * step)
        rep.add(f"{norm}.max_rel_error", scaled_error(analytic, numeric).max(), REL_TOL)
    return rep


def diffusion_suite(samples: int = 10_000, seed: int = 0) -> Report:
    """Noising/recovery identities on random (x0, eps, t) and the zero-SNR endpoint values."""
    rng = np.random.default_rng(seed)
    sched = diffusion.make_schedule(1000)
    x0 = rng.standard_normal((samples, 4))
    eps = rng.standard_normal((samples, 4))
    t = rng.integers(0, sched.steps, samples)
    x_t = diffusion.q_sample(sched, x0, eps, t)
    v = diffusion.v_target(sched, x0, eps, t)
    rep = Report("diffusion")
    rep.add("x0_recovery", np.abs(diffusion.x0_from_v(sched, x_t, v, t) - x0).max(), 1e-6)
    rep.add("eps_recovery", np.abs(diffusion.eps_from_v(sched, x_t, v, t) - eps).max(), 1e-6)
    rep.add("terminal_alpha_bar", abs(sched.alpha_bar[-1]), 0.0)
    rep.add("terminal_x_t_is_noise", np.abs(diffusion.q_sample(sched, x0, eps, sched.steps - 1) - eps).max(), 0.0)
    rep.add("terminal_v_is_minus_x0", np.abs(diffusion.v_target(sched, x0, eps, sched.steps - 1) + x0).max(), 0.0)
    rep.add("alpha_bar_decreasing", float(np.any(np.diff(sched.alpha_bar) >= 0)), 0.0)
    g = diffusion.GuidanceSchedule()
    rep.add("guidance_first", abs(g.scale(0) - 1.0), 0.0)
    rep.add("guidance_last", abs(g.scale(g.steps - 1) - g.base_scale), 1e-12)
    return rep


def attention_suite(seed: int = 0, width: int = 16, heads: int = 2, views: int = 3, grid: int = 2) -> Report:
    """Row-stochastic attention weights, shape preservation, and view-permutation
    equivariance of the position-free global attention on random micro models."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rep = Report("dit")
    app = randomize_(AppearanceAttention(width, heads).double(), seed)
    glob = randomize_(Global3DAttention(width, heads).double(), seed + 1)
    x = torch.randn(2, views, width, grid, grid, generator=gen, dtype=torch.float64)
    ref = ReferenceTokens(torch.randn(5, width, generator=gen, dtype=torch.float64),
                          torch.randn(3, width, generator=gen, dtype=torch.float64))
    with torch.no_grad():
        app.weights, glob.weights = [], []
        y_app = appearance_attention(x, ref, app)
        y_glob = global_3d_attention(x, ref, glob, use_pos=False)
        rows = max((w.sum(-1) - 1).abs().max().item() for w in app.weights + glob.weights)
        app.weights = glob.weights = None
        rep.add("softmax_row_sums", rows, 1e-12)
        rep.add("shape_preserved", float(y_app.shape != x.shape or y_glob.shape != x.shape), 0.0)
        perm = torch.randperm(views, generator=gen)
        y_perm = global_3d_attention(x[:, perm], ref, glob, use_pos=False)
        rep.add("global_view_equivariance", (y_perm - y_glob[:, perm]).abs().max().item(), 1e-10)
        y_app_perm = appearance_attention(x[:, perm], ref, app)
        rep.add("appearance_view_equivariance", (y_app_perm - y_app[:, perm]).abs().max().item(), 1e-10)
        cfg = DitConfig(width=width, heads=heads, branch_blocks=1, shared_blocks=1, time_dim=8, use_pos=False)
        model = randomize_(MGDiT(cfg).double(), seed, std=0.2)
        xs = [torch.randn(1, views, c, 2 * grid, 2 * grid, generator=gen, dtype=torch.float64) for c in (3, 1, 1)]
        n = torch.randn(1, views, 3, 2 * grid, 2 * grid, generator=gen, dtype=torch.float64)
        out = model(*xs, n, ref, 10)
        out_p = model(*(v[:, perm] for v in xs), n[:, perm], ref, 10)
        rep.add("model_shapes", float(any(o.shape != v.shape for o, v in zip(out, xs))), 0.0)
        rep.add("model_view_equivariance", max((a[:, perm] - b).abs().max().item() for a, b in zip(out, out_p)), 1e-10)
    return rep


def bridge_suite(seed: int = 0) -> Report:
    """Autograd through the rendered-material loss bridge against torch's numerical Jacobian."""
    g, pred, gt, lights = render_fixture(8, seed)
    job = _pbr_job([[g]], [[gt]], lights, "l2")
    a = torch.tensor(pred.albedo.transpose(2, 0, 1)[None, None], requires_grad=True)
    r = torch.tensor(pred.roughness[None, None, None], requires_grad=True)
    m = torch.tensor(pred.metallic[None, None, None], requires_grad=True)
    ok = torch.autograd.gradcheck(lambda a_, r_, m_: _PbrLossFn.apply(a_, r_, m_, job), (a, r, m),
                                  eps=1e-6, atol=ABS_FLOOR, rtol=REL_TOL, raise_exception=False)
    rep = Report("dit")
    rep.add("pbr_bridge_gradcheck", 0.0 if ok else 1.0, 0.0)
    return rep


def dit_suite(seed: int = 0) -> Report:
    rep = attention_suite(seed)
    rep.checks.extend(bridge_suite(seed).checks)
    return rep


SUITES = {
    "brdf": brdf_suite,
    "render": render_suite,
    "diffusion": diffusion_suite,
    "dit": dit_suite,
}


def run(name: str, seed: int = 0) -> Report:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed=seed)
