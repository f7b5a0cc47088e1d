"""``matforge`` command line: G-buffers, toy training, sampling, baking, refinement,
relighting and numerical self-checks.

Exit codes: 0 success, 2 usage or configuration error, 3 bad input data,
4 failed numerical check.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import diffusion, gradcheck, io
from .config import ConfigError, PipelineConfig, load_config
from .dit import MGDiT, MRDiT, DitConfig, ReferenceTokens, ToyTokenizer
from .geometry import MeshError, TriMesh, camera_ring, load_mesh, make_cube, make_quad, make_uv_sphere, \
    rasterize_gbuffer, write_obj
from .render import MaterialMaps, UnfilledTextureError, env_to_lights, relight, sample_lights
from .train import LossBreakdown, Trainer, TrainConfig, build_batch, load_model, refiner_train_step, \
    render_material_views, save_model, train_step
from .uvproj import ViewSet, backproject, bake_uv_normal, fill_holes, maps_to_textures, refine_texture, \
    textures_to_maps

log = logging.getLogger("matforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4
FIXTURES = {"cube": make_cube, "sphere": lambda: make_uv_sphere(32, 16), "quad": make_quad}
LOSS_HEADER = ["step", "v_albedo", "v_roughness", "v_metallic", "pbr", "total"]
REFINER_LOSS_HEADER = ["step", "v_uv", "total"]


class DataError(Exception):
    pass


# -- shared setup ------------------------------------------------------------------

def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    return cfg.override("views", count=args.views)


def _cameras(cfg: PipelineConfig, count: int | None = None):
    v = cfg.views
    return camera_ring(count or v.count, v.radius, cfg.elevation, (v.resolution, v.resolution), cfg.fov, v.near, v.far)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mesh(path) -> TriMesh:
    if path is None:
        raise DataError("a --mesh OBJ file is required")
    return load_mesh(path)


def _schedule(cfg: PipelineConfig) -> diffusion.NoiseSchedule:
    s = cfg.schedule
    return diffusion.make_schedule(s.timesteps, s.beta_start, s.beta_end, s.zero_snr)


def _guidance(cfg: PipelineConfig, steps: int) -> diffusion.GuidanceSchedule | None:
    s = cfg.sampler
    return diffusion.GuidanceSchedule(s.guidance_scale, s.guidance_power, steps) if s.guidance else None


def _dit_config(cfg: PipelineConfig) -> DitConfig:
    m = cfg.model
    return DitConfig(m.width, m.heads, m.branch_blocks, m.shared_blocks, m.patch, m.time_dim, m.mlp_ratio,
                     m.positional)


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    t, lt = cfg.train, cfg.lights
    return TrainConfig(lr=t.lr, weight_decay=t.weight_decay, grad_clip=t.grad_clip, v_norm=t.v_norm,
                       pbr_norm=t.pbr_norm, pbr_weight=t.pbr_weight, cond_dropout=t.cond_dropout,
                       light_count=(lt.count_min, lt.count_max), light_intensity=(lt.intensity_min, lt.intensity_max),
                       light_radius=(lt.radius_min, lt.radius_max))


def _read_prompt(args, data: Path | None = None) -> str:
    if args.prompt is not None:
        return args.prompt
    if data is not None and (data / "prompt.txt").exists():
        return (data / "prompt.txt").read_text(encoding="utf-8").strip()
    return ""


def _read_reference(path) -> np.ndarray | None:
    return None if path is None else io.read_png(path)


# -- commands ------------------------------------------------------------------------

def cmd_make_fixture(args) -> int:
    out = _out_dir(args)
    mesh = FIXTURES[args.name]()
    write_obj(mesh, out / "mesh.obj")
    maps = MaterialMaps.procedural(args.texture_res)
    io.save_textures(out / "texture", maps_to_textures(maps, np.ones(maps.shape, dtype=bool)))
    (out / "prompt.txt").write_text(f"a smooth painted {args.name}\n", encoding="utf-8")
    print(f"wrote {args.name} fixture to {out}")
    return EXIT_OK


def cmd_gbuffer(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    mesh = _mesh(args.mesh)
    for k, cam in enumerate(_cameras(cfg)):
        g = rasterize_gbuffer(mesh, cam)
        io.write_pfm(out / f"view{k:02d}.normal.pfm", g.normal)
        io.write_pfm(out / f"view{k:02d}.position.pfm", g.position)
        io.write_pfm(out / f"view{k:02d}.depth.pfm", g.depth)
        io.write_mask(out / f"view{k:02d}.mask.png", g.mask)
        log.info("view %d: %d covered pixels", k, int(g.mask.sum()))
    print(f"wrote {cfg.views.count} G-buffers to {out}")
    return EXIT_OK


def _load_dataset(data: Path):
    mesh = _mesh(data / "mesh.obj")
    maps, coverage = textures_to_maps(io.load_textures(data / "texture"))
    return mesh, maps, coverage


def _read_log(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) < upto]


def _write_log(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train_toy(args) -> int:
    cfg = _config(args).override("train", steps=args.steps)
    out = _out_dir(args)
    data = Path(args.data)
    mesh, textures, coverage = _load_dataset(data)
    cams = _cameras(cfg)
    schedule = _schedule(cfg)
    tcfg = _train_config(cfg)
    stem = out / "params"
    resume = args.resume and stem.with_suffix(".json").exists()
    if resume:
        model, meta, tensors = load_model(stem)
        if meta["kind"] != args.model:
            raise DataError(f"{stem}.json holds a {meta['kind']} model, not {args.model}")
        tok_seed = meta["tokenizer_seed"]
    else:
        model = (MGDiT if args.model == "mgdit" else MRDiT)(_dit_config(cfg), seed=cfg.seed)
        tok_seed = cfg.seed
    tokenizer = ToyTokenizer(model.cfg.width, seed=tok_seed)
    prompt = _read_prompt(args, data)

    if args.model == "mgdit":
        batch = build_batch(mesh, textures, cams, tokenizer, prompt, _read_reference(args.reference), coverage)
        header = LOSS_HEADER

        def loss_fn(m, seed) -> LossBreakdown:
            return train_step(m, batch, schedule, seed, tcfg)[0]

        def row(lb: LossBreakdown):
            return lb.row()
    else:
        res = cfg.uv.latent_resolution
        gbufs, views = render_material_views(mesh, textures, cams, coverage)
        uv_res = textures.shape[::-1]
        coarse = backproject(mesh, ViewSet(cams, views, gbufs), uv_res, cfg.uv.face_eps, cfg.uv.depth_eps,
                             cfg.uv.blend_power)
        t_c = torch.as_tensor(textures_to_maps(coarse)[0].stack().transpose(2, 0, 1)[None, None], dtype=torch.float32)
        t_n = torch.tensor(bake_uv_normal(mesh, uv_res).data.transpose(2, 0, 1)[None, None], dtype=torch.float32)
        z0 = torch.nn.functional.interpolate(torch.as_tensor(textures.stack().transpose(2, 0, 1)[None]),
                                             size=(res, res), mode="bilinear", align_corners=False)[:, None]
        text = tokenizer(prompt).text_only()
        header = REFINER_LOSS_HEADER

        def loss_fn(m, seed) -> LossBreakdown:
            return refiner_train_step(m, z0, t_c, t_n, text, schedule, seed, tcfg)[0]

        def row(lb: LossBreakdown):
            return [lb.v["uv"], lb.total]

    trainer = Trainer(model, loss_fn, tcfg, cfg.train.steps, cfg.seed if not resume else meta["seed"])
    rows = []
    if resume:
        trainer.load_state(tensors, meta["step"])
        rows = _read_log(out / "loss.csv", trainer.step)
        log.info("resuming at step %d of %d", trainer.step, trainer.total_steps)
    extra = {"tokenizer_seed": tok_seed, "prompt": prompt}
    every = cfg.train.checkpoint_every
    while trainer.step < trainer.total_steps:
        step = trainer.step
        lb = trainer.run_step()
        rows.append([step] + [repr(float(x)) for x in row(lb)])
        if step % 50 == 0:
            log.info("step %d total %.5f", step, lb.total)
        if every and trainer.step % every == 0 and trainer.step < trainer.total_steps:
            save_model(stem, model, args.model, extra, trainer)
            _write_log(out / "loss.csv", header, rows)
    save_model(stem, model, args.model, extra, trainer)
    _write_log(out / "loss.csv", header, rows)
    print(f"trained {args.model} to step {trainer.step}; archive {stem}.json")
    return EXIT_OK


def _load_kind(stem, kind: str):
    if stem is None:
        raise DataError("--params is required")
    if not Path(f"{stem}.json").exists() and not Path(stem).exists():
        raise DataError(f"no parameter archive at {stem}")
    model, meta, _ = load_model(stem)
    if meta["kind"] != kind:
        raise DataError(f"{stem} holds a {meta['kind']} model, expected {kind}")
    model.eval()
    return model, meta


def cmd_sample(args) -> int:
    cfg = _config(args).override("sampler", steps=args.steps)
    out = _out_dir(args)
    model, meta = _load_kind(args.params, "mgdit")
    mesh = _mesh(args.mesh)
    cams = _cameras(cfg)
    gbufs = [rasterize_gbuffer(mesh, cam) for cam in cams]
    normals = torch.as_tensor(np.stack([g.normal.transpose(2, 0, 1) for g in gbufs])[None], dtype=torch.float32)
    prompt = args.prompt if args.prompt is not None else meta.get("prompt", "")
    tokenizer = ToyTokenizer(model.cfg.width, seed=meta["tokenizer_seed"])
    ref = tokenizer(prompt, _read_reference(args.reference))
    blank = ReferenceTokens.empty(model.cfg.width)
    f, res = len(cams), cfg.views.resolution

    def v_model(x, t, cond):
        xt = torch.as_tensor(x, dtype=torch.float32)
        with torch.no_grad():
            v = model(xt[:, :, :3], xt[:, :, 3:4], xt[:, :, 4:5], normals, ref if cond else blank, t)
        return torch.cat(v, dim=2).double().numpy()

    steps = cfg.sampler.steps
    x0 = diffusion.sample(v_model, _schedule(cfg), (1, f, 5, res, res), steps, _guidance(cfg, steps), cfg.seed,
                          cfg.sampler.solver)
    for k, g in enumerate(gbufs):
        stack = np.where(g.mask[..., None], np.clip(x0[0, k].transpose(1, 2, 0), 0.0, 1.0), 0.0)
        io.write_pfm(out / f"view{k:02d}.albedo.pfm", stack[..., :3])
        io.write_pfm(out / f"view{k:02d}.roughness.pfm", stack[..., 3])
        io.write_pfm(out / f"view{k:02d}.metallic.pfm", stack[..., 4])
    print(f"wrote {3 * f} material images for {f} views to {out}")
    return EXIT_OK


def _read_views(folder: Path, cfg: PipelineConfig, mesh: TriMesh) -> ViewSet:
    count = cfg.views.count
    if not folder.is_dir():
        raise DataError(f"{folder} is not a directory")
    found = sorted(folder.glob("view*.albedo.pfm"))
    if len(found) < count:
        raise DataError(f"{folder} holds {len(found)} views, config expects {count}")
    cams = _cameras(cfg)
    images, gbufs = [], []
    for k, cam in enumerate(cams):
        parts = [io.read_pfm(folder / f"view{k:02d}.{name}.pfm") for name in ("albedo", "roughness", "metallic")]
        images.append(MaterialMaps(*(np.clip(p.astype(np.float64), 0.0, 1.0) for p in parts)))
        gbufs.append(rasterize_gbuffer(mesh, cam))
    return ViewSet(cams, images, gbufs)


def cmd_bake(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    mesh = _mesh(args.mesh)
    if args.views_dir is None:
        raise DataError("--views-dir is required")
    views = _read_views(Path(args.views_dir), cfg, mesh)
    res = (cfg.uv.resolution, cfg.uv.resolution)
    coarse = backproject(mesh, views, res, cfg.uv.face_eps, cfg.uv.depth_eps, cfg.uv.blend_power)
    io.save_textures(out / "coarse", coarse)
    covered = coarse["albedo"].mask
    print(f"baked {len(views)} views: {covered.mean():.3f} of texels covered")
    if args.fill:
        atlas = bake_uv_normal(mesh, res).mask
        io.save_textures(out / "filled", {k: fill_holes(t, atlas) for k, t in coarse.items()})
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _config(args).override("sampler", steps=args.steps)
    out = _out_dir(args)
    mesh = _mesh(args.mesh)
    if args.textures is None:
        raise DataError("--textures is required")
    coarse = io.load_textures(args.textures)
    w, h = coarse["albedo"].resolution
    t_n = bake_uv_normal(mesh, (w, h))
    if args.params is None:
        refined = {k: fill_holes(t, t_n.mask) for k, t in coarse.items()}
        print("no refiner parameters given; filled holes by pull-push")
    else:
        model, meta = _load_kind(args.params, "mrdit")
        text = ToyTokenizer(model.cfg.width, seed=meta["tokenizer_seed"])(_read_prompt(args) or
                                                                           meta.get("prompt", "")).text_only()
        lat = cfg.uv.latent_resolution
        steps = cfg.sampler.steps
        refined = refine_texture(coarse, t_n, text, model, _schedule(cfg), steps, cfg.seed, _guidance(cfg, steps),
                                 (lat, lat))
    io.save_textures(out / "refined", refined)
    return EXIT_OK


def cmd_relight(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    mesh = _mesh(args.mesh)
    if args.textures is None:
        raise DataError("--textures is required")
    maps, coverage = textures_to_maps(io.load_textures(args.textures))
    cams = _cameras(cfg)
    if not 0 <= args.view < len(cams):
        raise DataError(f"--view {args.view} outside the {len(cams)} configured views")
    if args.env is not None:
        env = io.read_pfm(args.env).astype(np.float64)
        if env.ndim != 3:
            raise DataError("environment map must be an RGB PFM")
        lights = env_to_lights(np.roll(env, args.env_rotate, axis=1), cfg.lights.env_samples, cfg.seed)
    else:
        lt = cfg.lights
        lights = sample_lights(cfg.seed, (lt.count_min, lt.count_max), (lt.intensity_min, lt.intensity_max),
                               (lt.radius_min, lt.radius_max))
    img = relight(mesh, maps, cams[args.view], lights, coverage)
    io.write_pfm(out / "relit.pfm", img.rgb)
    io.write_png(out / "relit.png", img.rgb)
    print(f"relit view {args.view} with {len(lights)} lights")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    report = gradcheck.run(args.module, seed=cfg.seed)
    text = "\n".join(report.lines())
    print(text)
    if args.out is not None:
        (_out_dir(args) / f"gradcheck_{args.module}.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if report.passed else EXIT_CHECK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--views", type=int, help="override the configured view count")
    common.add_argument("--steps", type=int, help="override training or sampling steps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="matforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", parents=[common], help="write a procedural mesh and texture set")
    p.add_argument("name", choices=sorted(FIXTURES))
    p.add_argument("--texture-res", type=int, default=128)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("gbuffer", parents=[common], help="rasterize per-view normal/position/mask images")
    p.add_argument("--mesh")
    p.set_defaults(func=cmd_gbuffer)

    p = sub.add_parser("train-toy", parents=[common], help="train the toy generator or refiner")
    p.add_argument("--data", required=True, help="folder with mesh.obj and texture.* maps")
    p.add_argument("--model", choices=("mgdit", "mrdit"), default="mgdit")
    p.add_argument("--prompt")
    p.add_argument("--reference", help="reference image (PNG)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/params if present")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("sample", parents=[common], help="sample per-view material images")
    p.add_argument("--params", help="archive stem written by train-toy")
    p.add_argument("--mesh")
    p.add_argument("--prompt")
    p.add_argument("--reference", help="reference image (PNG)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bake", parents=[common], help="back-project view images into the UV atlas")
    p.add_argument("--mesh")
    p.add_argument("--views-dir", help="folder with viewNN.<material>.pfm images")
    p.add_argument("--fill", action="store_true", help="also write pull-push filled maps")
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("refine", parents=[common], help="refine or fill a coarse texture")
    p.add_argument("--mesh")
    p.add_argument("--textures", help="texture stem, e.g. out/coarse")
    p.add_argument("--params", help="refiner archive stem; pull-push filling without it")
    p.add_argument("--prompt")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("relight", parents=[common], help="render textured materials under new lighting")
    p.add_argument("--mesh")
    p.add_argument("--textures", help="texture stem, e.g. out/refined")
    p.add_argument("--env", help="lat-long environment map (RGB PFM)")
    p.add_argument("--env-rotate", type=int, default=0, help="rotate the environment by whole columns")
    p.add_argument("--view", type=int, default=0, help="index of the configured ring camera")
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("gradcheck", parents=[common], help="run a numerical self-check suite")
    p.add_argument("module", choices=sorted(gradcheck.SUITES))
    p.set_defaults(func=cmd_gradcheck, out=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MeshError, io.ImageFormatError, UnfilledTextureError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
