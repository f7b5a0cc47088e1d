"""Training step for the toy generator (v-loss per branch plus rendered-material loss),
a resumable AdamW loop, and the refiner's v-loss step."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from . import diffusion
from .archive import load_archive, save_archive
from .dit import BRANCH_CHANNELS, BRANCHES, MGDiT, MRDiT, DitConfig, ReferenceTokens, ToyCodec, ToyTokenizer
from .geometry import Camera, GBuffer, TriMesh, rasterize_gbuffer
from .render import MaterialMaps, pbr_loss, sample_lights, sample_maps


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    cosine_decay: bool = True
    v_norm: str = "l1"
    pbr_norm: str = "l1"
    v_weights: tuple = (1.0, 1.0, 1.0)
    pbr_weight: float = 1.0
    cond_dropout: float = 0.1
    alpha_bar_weighting: bool = False
    light_count: tuple = (3, 10)
    light_intensity: tuple = (1.0, 10.0)
    light_radius: tuple = (2.0, 4.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainBatch:
    """One training example set. ``x0`` latents are material images (identity codec)."""

    x0: dict[str, torch.Tensor]
    normals: torch.Tensor
    ref: ReferenceTokens
    gbuffers: list[list[GBuffer]]

    def to(self, dtype) -> "TrainBatch":
        return TrainBatch({k: v.to(dtype) for k, v in self.x0.items()}, self.normals.to(dtype),
                          self.ref.to(dtype), self.gbuffers)

    def gt_maps(self) -> list[list[MaterialMaps]]:
        return _maps_from_latents(*(self.x0[k].detach().double().numpy() for k in BRANCHES))


@dataclass
class LossBreakdown:
    v: dict[str, float]
    pbr: float
    total: float

    def row(self) -> list[float]:
        return [self.v[k] for k in BRANCHES] + [self.pbr, self.total]


def _maps_from_latents(a, r, m) -> list[list[MaterialMaps]]:
    b, f = a.shape[:2]
    return [[MaterialMaps(a[i, j].transpose(1, 2, 0), r[i, j, 0], m[i, j, 0]) for j in range(f)] for i in range(b)]


def render_material_views(mesh: TriMesh, textures: MaterialMaps, cameras: list[Camera],
                          coverage: np.ndarray | None = None) -> tuple[list[GBuffer], list[MaterialMaps]]:
    """Rasterize each camera and look up the UV-space textures per covered pixel."""
    gbufs, views = [], []
    for cam in cameras:
        g = rasterize_gbuffer(mesh, cam)
        stack = np.zeros(g.shape + (5,))
        if g.mask.any():
            vals, ok = sample_maps(textures, g.uv[g.mask], coverage)
            vals[~ok] = 0.0
            stack[g.mask] = vals
        gbufs.append(g)
        views.append(MaterialMaps.from_stack(stack, clamp=True))
    return gbufs, views


def build_batch(mesh: TriMesh, textures: MaterialMaps, cameras: list[Camera], tokenizer: ToyTokenizer,
                prompt: str = "", reference: np.ndarray | None = None,
                coverage: np.ndarray | None = None) -> TrainBatch:
    gbufs, views = render_material_views(mesh, textures, cameras, coverage)
    if reference is None:
        reference = views[0].albedo

    def latent(get):
        return torch.as_tensor(np.stack([get(v).transpose(2, 0, 1) for v in views])[None], dtype=torch.float32)

    x0 = {
        "albedo": latent(lambda v: v.albedo),
        "roughness": latent(lambda v: v.roughness[..., None]),
        "metallic": latent(lambda v: v.metallic[..., None]),
    }
    normals = torch.as_tensor(np.stack([g.normal.transpose(2, 0, 1) for g in gbufs])[None], dtype=torch.float32)
    return TrainBatch(x0, normals, tokenizer(prompt, reference), [gbufs])


class _PbrLossFn(torch.autograd.Function):
    """Bridges the numpy renderer (with its closed-form gradient) into autograd."""

    @staticmethod
    def forward(ctx, a, r, m, job):
        loss, grads = job(a.detach().double().numpy(), r.detach().double().numpy(), m.detach().double().numpy())
        ctx.save_for_backward(*(torch.as_tensor(g, dtype=a.dtype) for g in grads))
        return a.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        ga, gr, gm = ctx.saved_tensors
        return grad_out * ga, grad_out * gr, grad_out * gm, None


def _pbr_job(gbuffers, gt_maps, lights, norm):
    def run(a, r, m):
        ga, gr, gm = np.zeros_like(a), np.zeros_like(r), np.zeros_like(m)
        pred = _maps_from_latents(a, r, m)
        views = [(i, j) for i in range(len(gbuffers)) for j in range(len(gbuffers[i])) if gbuffers[i][j].mask.any()]
        if not views:
            raise ValueError("no covered pixels in any training view")
        total = 0.0
        for i, j in views:
            loss, g = pbr_loss(pred[i][j], gt_maps[i][j], gbuffers[i][j], lights, norm)
            total += loss
            ga[i, j] = g.albedo.transpose(2, 0, 1)
            gr[i, j, 0] = g.roughness
            gm[i, j, 0] = g.metallic
        k = len(views)
        return total / k, (ga / k, gr / k, gm / k)
    return run


def train_step(model: MGDiT, batch: TrainBatch, schedule: diffusion.NoiseSchedule, seed: int,
               cfg: TrainConfig | None = None, backward: bool = True, timestep: int | None = None):
    """One loss evaluation and backward pass; returns (LossBreakdown, {param name: grad}).

    ``timestep`` pins t for evaluation; noise and lights still come from ``seed``."""
    cfg = cfg or TrainConfig()
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    b = batch.normals.shape[0]
    t = torch.randint(0, schedule.steps, (b,), generator=gen)
    if timestep is not None:
        t = torch.full((b,), int(timestep))
    eps = {k: torch.randn(batch.x0[k].shape, generator=gen, dtype=torch.float64).to(dtype) for k in BRANCHES}
    drop = torch.rand((), generator=gen, dtype=torch.float64).item() < cfg.cond_dropout
    ref = ReferenceTokens.empty(batch.ref.image.shape[-1], dtype) if drop else batch.ref
    x_t = {k: diffusion.q_sample(schedule, batch.x0[k], eps[k], t) for k in BRANCHES}
    lights = sample_lights(int(seed), cfg.light_count, cfg.light_intensity, cfg.light_radius)

    with torch.set_grad_enabled(backward):
        v_pred = dict(zip(BRANCHES, model(x_t["albedo"], x_t["roughness"], x_t["metallic"], batch.normals, ref, t)))
        lv = {k: diffusion.v_loss(v_pred[k], diffusion.v_target(schedule, batch.x0[k], eps[k], t), cfg.v_norm)
              for k in BRANCHES}
        x0_hat = {k: ToyCodec.decode(diffusion.x0_from_v(schedule, x_t[k], v_pred[k], t)).clamp(0.0, 1.0)
                  for k in BRANCHES}
        job = _pbr_job(batch.gbuffers, batch.gt_maps(), lights, cfg.pbr_norm)
        l_pbr = _PbrLossFn.apply(x0_hat["albedo"], x0_hat["roughness"], x0_hat["metallic"], job)
        if cfg.alpha_bar_weighting:
            l_pbr = l_pbr * float(schedule.alpha_bar[t.numpy()].mean())
        total = diffusion.total_loss([lv[k] for k in BRANCHES], l_pbr, cfg.v_weights, cfg.pbr_weight)
        grads = {}
        if backward:
            model.zero_grad(set_to_none=True)
            total.backward()
            grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                     for n, p in model.named_parameters()}
    breakdown = LossBreakdown({k: float(lv[k].detach()) for k in BRANCHES}, float(l_pbr.detach()),
                              float(total.detach()))
    return breakdown, grads


def refiner_train_step(model: MRDiT, z0: torch.Tensor, t_c: torch.Tensor, t_n: torch.Tensor,
                       text: ReferenceTokens, schedule: diffusion.NoiseSchedule, seed: int,
                       cfg: TrainConfig | None = None, backward: bool = True):
    """V-loss step for the UV refiner on a (b, 1, 5, h, w) target latent."""
    cfg = cfg or TrainConfig()
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    t = torch.randint(0, schedule.steps, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64).to(dtype)
    drop = torch.rand((), generator=gen, dtype=torch.float64).item() < cfg.cond_dropout
    text = ReferenceTokens.empty(text.text.shape[-1], dtype) if drop else text.to(dtype)
    z0 = z0.to(dtype)
    x_t = diffusion.q_sample(schedule, z0, eps, t)
    with torch.set_grad_enabled(backward):
        v = model(x_t, t_c.to(dtype), t_n.to(dtype), text, t)
        loss = diffusion.v_loss(v, diffusion.v_target(schedule, z0, eps, t), cfg.v_norm)
        if backward:
            model.zero_grad(set_to_none=True)
            loss.backward()
    return LossBreakdown({"uv": float(loss.detach())}, 0.0, float(loss.detach())), {}


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step)]).generate_state(1)[0])


class Trainer:
    """AdamW with cosine learning-rate decay and global-norm clipping.

    ``loss_fn(model, seed)`` must run the backward pass and return a LossBreakdown.
    The learning rate depends only on the step index, so a run restored from an
    archive continues exactly where it stopped.
    """

    def __init__(self, model: torch.nn.Module, loss_fn: Callable, cfg: TrainConfig, total_steps: int, seed: int = 0):
        self.model, self.loss_fn, self.cfg = model, loss_fn, cfg
        self.total_steps, self.seed = int(total_steps), int(seed)
        self.step = 0
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps,
                                     weight_decay=cfg.weight_decay, foreach=False)

    def lr_at(self, step: int) -> float:
        if not self.cfg.cosine_decay or self.total_steps <= 1:
            return self.cfg.lr
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, self.total_steps) / self.total_steps))

    def run_step(self) -> LossBreakdown:
        for group in self.opt.param_groups:
            group["lr"] = self.lr_at(self.step)
        out = self.loss_fn(self.model, step_seed(self.seed, self.step))
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip, foreach=False)
        self.opt.step()
        self.step += 1
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{n}": p.detach().cpu().numpy() for n, p in self.model.named_parameters()}
        for n, p in self.model.named_parameters():
            st = self.opt.state.get(p)
            if st:
                out[f"adam.exp_avg.{n}"] = st["exp_avg"].cpu().numpy()
                out[f"adam.exp_avg_sq.{n}"] = st["exp_avg_sq"].cpu().numpy()
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int):
        with torch.no_grad():
            for n, p in self.model.named_parameters():
                p.copy_(torch.as_tensor(tensors[f"param.{n}"], dtype=p.dtype))
                if f"adam.exp_avg.{n}" in tensors:
                    self.opt.state[p] = {
                        "step": torch.tensor(float(step), dtype=torch.float32),
                        "exp_avg": torch.as_tensor(tensors[f"adam.exp_avg.{n}"], dtype=p.dtype).clone(),
                        "exp_avg_sq": torch.as_tensor(tensors[f"adam.exp_avg_sq.{n}"], dtype=p.dtype).clone(),
                    }
        self.step = int(step)


def save_model(stem, model: torch.nn.Module, kind: str, extra_meta: dict | None = None,
               trainer: Trainer | None = None):
    tensors = trainer.state_tensors() if trainer else {f"param.{n}": p.detach().cpu().numpy()
                                                     for n, p in model.named_parameters()}
    meta = {"kind": kind, "model": model.cfg.to_dict(), "step": trainer.step if trainer else 0}
    if trainer:
        meta["train"] = trainer.cfg.to_dict()
        meta["total_steps"] = trainer.total_steps
        meta["seed"] = trainer.seed
    meta.update(extra_meta or {})
    save_archive(stem, tensors, meta)


def load_model(stem) -> tuple[torch.nn.Module, dict, dict[str, np.ndarray]]:
    tensors, meta = load_archive(stem)
    cls = {"mgdit": MGDiT, "mrdit": MRDiT}.get(meta.get("kind"))
    if cls is None:
        raise ValueError(f"{stem}: unknown model kind {meta.get('kind')!r}")
    model = cls(DitConfig(**meta["model"]))
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.as_tensor(tensors[f"param.{n}"]))
    return model, meta, tensors
