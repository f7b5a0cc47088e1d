"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from matforge import diffusion, gradcheck
from matforge.brdf import f0_of, fresnel_schlick, ndf_ggx
from matforge.geometry import camera_ring, make_uv_sphere
from matforge.render import MaterialMaps
from matforge.train import render_material_views
from matforge.uvproj import ViewSet, backproject


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str, seconds: float, budget: float | None = None):
        in_time = budget is None or seconds < budget
        status = "PASS" if ok and in_time else "FAIL"
        limit = f" (budget {budget:.0f} s)" if budget else ""
        with capsys.disabled():
            print(f"\n{status} criterion {number:2d} {title}: {detail}; {seconds:.1f} s{limit}")
        assert ok, detail
        assert in_time, f"took {seconds:.1f} s, budget {budget} s"
    return emit


def test_01_diffusion_algebra(report):
    t0 = time.perf_counter()
    rep = gradcheck.diffusion_suite(samples=10_000, seed=0)
    worst = max(c.value for c in rep.checks[:2])
    report(1, "diffusion algebra", rep.passed, f"max recovery error {worst:.2e}, terminal identities exact",
           time.perf_counter() - t0, 10)


def test_02_brdf_gradients(report):
    t0 = time.perf_counter()
    rep = gradcheck.brdf_suite(samples=1000, seed=0)
    worst = max(c.value for c in rep.checks)
    report(2, "BRDF gradients", rep.passed and all(c.tolerance == 1e-4 for c in rep.checks),
           f"max scaled error {worst:.2e} over 1000 samples", time.perf_counter() - t0, 30)


def test_03_ggx_normalization(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    estimates = {}
    for r in (0.3, 0.6, 1.0):
        # uniform hemisphere directions: cos(theta) ~ U(0, 1), pdf 1 / (2 pi)
        cos_t = rng.uniform(0.0, 1.0, 1_000_000)
        estimates[r] = float(np.mean(ndf_ggx(cos_t, r) * cos_t) * 2 * math.pi)
    ok = all(abs(v - 1.0) <= 0.02 for v in estimates.values())
    report(3, "GGX normalization", ok, ", ".join(f"r={r}: {v:.4f}" for r, v in estimates.items()),
           time.perf_counter() - t0, 30)


def test_04_closed_form_values(report):
    t0 = time.perf_counter()
    errs = [abs(fresnel_schlick(0.5, 0.04) - 0.07), abs(ndf_ggx(1.0, 1.0) - 1 / math.pi),
            float(np.abs(f0_of(np.array([0.3, 0.6, 0.9]), 0.0) - 0.04).max())]
    report(4, "closed-form values", max(errs) <= 1e-12, f"max error {max(errs):.1e}", time.perf_counter() - t0)


def test_05_pbr_loss_gradients(report):
    t0 = time.perf_counter()
    rep = gradcheck.render_suite(resolution=16, seed=0)
    worst = max(c.value for c in rep.checks)
    report(5, "PBR loss gradients", rep.passed, f"max scaled error {worst:.2e} on 16x16 maps",
           time.perf_counter() - t0, 120)


def test_06_oracle_sampler(report):
    t0 = time.perf_counter()
    sched = diffusion.make_schedule(1000)
    target = np.random.default_rng(6).uniform(-1.0, 1.0, (1, 4, 5, 8, 8))

    def oracle(x_t, t, cond):
        a, s = sched.sqrt_alpha_bar[t], sched.sqrt_one_minus_alpha_bar[t]
        eps = (x_t - a * target) / s
        return a * eps - s * target

    out = diffusion.sample(oracle, sched, target.shape, steps=50, guidance=diffusion.GuidanceSchedule(), seed=0)
    err = float(np.abs(out - target).max())
    report(6, "oracle sampler", err <= 1e-4, f"max |x0 - target| {err:.2e} after 50 steps",
           time.perf_counter() - t0, 5)


def test_07_guidance_endpoints(report):
    t0 = time.perf_counter()
    g = diffusion.GuidanceSchedule()
    vals = [g.scale(k) for k in range(g.steps)]
    ok = vals[0] == 1.0 and abs(vals[-1] - 6.0) <= 1e-12 and all(b >= a for a, b in zip(vals, vals[1:]))
    report(7, "guidance endpoints", ok, f"scale(0)={vals[0]}, scale(49)={vals[-1]:.12g}, monotone",
           time.perf_counter() - t0)


def test_08_bake_round_trip(report):
    t0 = time.perf_counter()
    tex = MaterialMaps.procedural(256)
    mesh = make_uv_sphere()
    cams = camera_ring(4, resolution=(64, 64))
    gbufs, views = render_material_views(mesh, tex, cams)
    baked = backproject(mesh, ViewSet(cams, views, gbufs), (256, 256))
    mask = baked["albedo"].mask
    psnr = {}
    for name in ("albedo", "roughness", "metallic"):
        mse = np.mean((baked[name].data[mask] - getattr(tex, name)[mask]) ** 2)
        psnr[name] = 10 * math.log10(1.0 / mse)
    ok = mask.any() and min(psnr.values()) >= 30.0
    report(8, "bake round trip", ok, ", ".join(f"{k} {v:.1f} dB" for k, v in psnr.items())
           + f" over {mask.mean():.0%} of texels", time.perf_counter() - t0, 60)


def test_09_attention_invariants(report):
    t0 = time.perf_counter()
    reps = [gradcheck.attention_suite(seed) for seed in range(3)]
    failed = [c.name for r in reps for c in r.checks if not c.passed]
    report(9, "attention invariants", not failed, "all checks passed" if not failed else f"failed {failed}",
           time.perf_counter() - t0, 10)


# -- micro overfit -------------------------------------------------------------------------------------

OVERFIT_STEPS = 2000
OVERFIT_LR = 5e-3
# expected loss over uniform t, one fixed-noise sample at the midpoint of each of 50 equal strata
OVERFIT_PROBE = tuple((5000 + k, 20 * k + 10) for k in range(50))


@pytest.mark.slow
def test_10_micro_overfit(report):
    import torch

    from matforge.dit import DitConfig, MGDiT, ToyTokenizer
    from matforge.train import TrainConfig, Trainer, build_batch, train_step

    t0 = time.perf_counter()
    torch.set_num_threads(1)
    cams = camera_ring(4, 3.0, resolution=(32, 32), vertical_fov=math.radians(40.0))
    batch = build_batch(make_uv_sphere(32, 16), MaterialMaps.procedural(64), cams, ToyTokenizer(64),
                        "a smooth painted ball")
    sched = diffusion.make_schedule(1000)
    cfg = TrainConfig(lr=OVERFIT_LR)
    probe_cfg = TrainConfig(lr=OVERFIT_LR, cond_dropout=0.0)
    model = MGDiT(DitConfig(width=64), seed=0)

    def probe() -> float:
        return float(np.mean([train_step(model, batch, sched, s, probe_cfg, backward=False, timestep=t)[0].total
                              for s, t in OVERFIT_PROBE]))

    before = probe()
    trainer = Trainer(model, lambda m, s: train_step(m, batch, sched, s, cfg)[0], cfg, OVERFIT_STEPS, seed=0)
    for _ in range(OVERFIT_STEPS):
        trainer.run_step()
    after = probe()
    reduction = 1.0 - after / before
    report(10, "micro overfit", reduction >= 0.90,
           f"probe loss {before:.4f} -> {after:.4f}, reduction {reduction:.1%} (need 90%)",
           time.perf_counter() - t0, 15 * 60)


# -- CLI determinism -------------------------------------------------------------------------------------

TINY = """seed = 5
[views]
count = 2
resolution = 8
[model]
width = 8
heads = 2
branch_blocks = 1
shared_blocks = 1
time_dim = 8
mlp_ratio = 2
[uv]
resolution = 32
latent_resolution = 8
[sampler]
steps = 3
[lights]
env_samples = 16
"""


def _pipeline(root: Path, threads: str) -> dict[str, bytes]:
    root.mkdir()
    (root / "tiny.ini").write_text(TINY, encoding="utf-8")
    env = {**os.environ, "MATFORGE_THREADS": threads}
    conf = ["--config", "tiny.ini"]
    mesh = ["--mesh", "data/mesh.obj"]
    env_map = np.linspace(0.1, 2.0, 8 * 16 * 3).reshape(8, 16, 3)
    from matforge.io import write_pfm
    write_pfm(root / "env.pfm", env_map)
    commands = [
        ["make-fixture", "sphere", "--out", "data", "--texture-res", "32"],
        ["gbuffer", *conf, *mesh, "--out", "gbuffer"],
        ["train-toy", *conf, "--data", "data", "--out", "mg", "--steps", "3"],
        ["train-toy", *conf, "--data", "data", "--out", "mr", "--model", "mrdit", "--steps", "2"],
        ["sample", *conf, *mesh, "--params", "mg/params", "--out", "sample"],
        ["bake", *conf, *mesh, "--views-dir", "sample", "--out", "bake", "--fill"],
        ["refine", *conf, *mesh, "--textures", "bake/coarse", "--out", "refine_fill"],
        ["refine", *conf, *mesh, "--textures", "bake/coarse", "--params", "mr/params", "--out", "refine_mr"],
        ["relight", *conf, *mesh, "--textures", "bake/filled", "--out", "relight"],
        ["relight", *conf, *mesh, "--textures", "bake/filled", "--env", "env.pfm", "--env-rotate", "3",
         "--out", "relight_env"],
        ["gradcheck", "brdf", "--out", "gc_brdf"],
        ["gradcheck", "diffusion", "--out", "gc_diffusion"],
        ["gradcheck", "dit", "--out", "gc_dit"],
    ]
    outputs = {}
    for k, cmd in enumerate(commands):
        proc = subprocess.run([sys.executable, "-m", "matforge.cli", *cmd], cwd=root, env=env,
                              capture_output=True, timeout=120)
        assert proc.returncode == 0, (cmd, proc.stderr.decode())
        outputs[f"stdout {k} {cmd[0]}"] = proc.stdout
    for p in sorted(root.rglob("*")):
        if p.is_file():
            outputs[str(p.relative_to(root))] = p.read_bytes()
    return outputs


@pytest.mark.slow
def test_11_cli_determinism(report, tmp_path):
    t0 = time.perf_counter()
    runs = {name: _pipeline(tmp_path / name, threads) for name, threads in
            (("one", "1"), ("four", "4"))}
    base = runs["one"]
    mismatched = sorted({k for r in runs.values() for k in set(r) ^ set(base)}
                        | {k for r in runs.values() for k in base if k in r and r[k] != base[k]})
    detail = (f"{len(base)} outputs byte-identical across runs with 1 and 4 threads" if not mismatched
              else f"differences in {mismatched[:5]}")
    report(11, "CLI determinism", not mismatched, detail, time.perf_counter() - t0, 5 * 60)
