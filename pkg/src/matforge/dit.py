"""Desk-scale multi-branch diffusion transformer with reference and cross-view attention.

Latent stacks are tensors shaped (b, f, c, h, w). Inside the network they are
patchified into token stacks (b, f, N, d) with N = (h/p)(w/p).
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BRANCHES = ("albedo", "roughness", "metallic")
BRANCH_CHANNELS = {"albedo": 3, "roughness": 1, "metallic": 1}
MATERIAL_CHANNELS = sum(BRANCH_CHANNELS.values())


@dataclass
class DitConfig:
    width: int = 64
    heads: int = 4
    branch_blocks: int = 1
    shared_blocks: int = 2
    patch: int = 2
    time_dim: int = 64
    mlp_ratio: int = 4
    use_pos: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.width % 2:
            raise ValueError("width must be even")
        if min(self.heads, self.patch, self.time_dim, self.mlp_ratio) < 1 or self.shared_blocks < 0 \
                or self.branch_blocks < 0:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReferenceTokens:
    """Image and text tokens, each (n, d) or (b, n, d)."""

    image: torch.Tensor
    text: torch.Tensor

    @classmethod
    def empty(cls, width: int, dtype=torch.float32) -> "ReferenceTokens":
        z = torch.zeros(0, width, dtype=dtype)
        return cls(z, z.clone())

    def to(self, dtype) -> "ReferenceTokens":
        return ReferenceTokens(self.image.to(dtype), self.text.to(dtype))

    def text_only(self) -> "ReferenceTokens":
        return ReferenceTokens(self.image[..., :0, :], self.text)

    def batched(self, b: int) -> tuple[torch.Tensor, torch.Tensor]:
        def expand(x):
            return x.unsqueeze(0).expand(b, -1, -1) if x.dim() == 2 else x
        return expand(self.image), expand(self.text)


class ToyCodec:
    """Identity latent codec: the latent of a material image is the image itself."""

    @staticmethod
    def encode(x):
        return x

    @staticmethod
    def decode(z):
        return z


class ToyTokenizer:
    """Fixed random-projection tokenizer.

    Words map to seeded Gaussian vectors; images are average-pooled to a
    ``grid x grid`` array of ``patch_px``-pixel patches, each projected by one
    fixed random matrix.
    """

    def __init__(self, width: int, seed: int = 0, grid: int = 4, patch_px: int = 4, max_words: int = 16):
        self.width, self.seed, self.grid, self.patch_px, self.max_words = width, seed, grid, patch_px, max_words
        rng = np.random.default_rng([seed, 1])
        k = 3 * patch_px * patch_px
        self.proj = rng.standard_normal((k, width)) / math.sqrt(k)

    def text(self, prompt: str) -> np.ndarray:
        words = re.findall(r"[a-z0-9]+", prompt.lower())[: self.max_words]
        out = np.zeros((len(words), self.width))
        for i, word in enumerate(words):
            digest = hashlib.blake2b(f"{self.seed}:{word}".encode(), digest_size=8).digest()
            out[i] = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.width)
        return out

    def image(self, img: np.ndarray | None) -> np.ndarray:
        if img is None:
            return np.zeros((0, self.width))
        x = torch.as_tensor(np.asarray(img, dtype=np.float64)[..., :3]).permute(2, 0, 1)[None]
        side = self.grid * self.patch_px
        pooled = F.adaptive_avg_pool2d(x, (side, side))[0]
        p, g = self.patch_px, self.grid
        patches = pooled.reshape(3, g, p, g, p).permute(1, 3, 0, 2, 4).reshape(g * g, -1).numpy()
        return patches @ self.proj

    def __call__(self, prompt: str = "", image: np.ndarray | None = None, dtype=torch.float32) -> ReferenceTokens:
        return ReferenceTokens(torch.as_tensor(self.image(image), dtype=dtype),
                               torch.as_tensor(self.text(prompt), dtype=dtype))


# -- embeddings ----------------------------------------------------------------

def _sincos(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    omega = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / max(half, 1)))
    ang = pos.to(torch.float64)[:, None] * omega[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def sincos_3d(f: int, h: int, w: int, d: int) -> torch.Tensor:
    """Positional table (f*h*w, d): separate sin/cos bands for the view, row and column axes."""
    df = dh = 2 * (d // 6)
    dw = d - df - dh
    ef = _sincos(torch.arange(f), df)[:, None, None].expand(f, h, w, df)
    eh = _sincos(torch.arange(h), dh)[None, :, None].expand(f, h, w, dh)
    ew = _sincos(torch.arange(w), dw)[None, None, :].expand(f, h, w, dw)
    return torch.cat([ef, eh, ew], dim=-1).reshape(f * h * w, d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


# -- attention -----------------------------------------------------------------

def attend(q, k, v, heads: int, weights_out: list | None = None):
    """Multi-head scaled dot-product attention on (B, N, d) inputs."""
    B, nq, d = q.shape
    nk = k.shape[1]
    hd = d // heads
    q = q.reshape(B, nq, heads, hd).transpose(1, 2)
    k = k.reshape(B, nk, heads, hd).transpose(1, 2)
    v = v.reshape(B, nk, heads, hd).transpose(1, 2)
    if weights_out is None:
        return F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(B, nq, d)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    weights_out.append(w.detach())
    return (w @ v).transpose(1, 2).reshape(B, nq, d)


class AppearanceAttention(nn.Module):
    """Per-view attention: queries from view tokens, keys/values from view + image + text tokens."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)
        self.weights: list | None = None

    def forward(self, x: torch.Tensor, ref: ReferenceTokens) -> torch.Tensor:
        b, f, n, d = x.shape
        xf = x.reshape(b * f, n, d)
        img, txt = ref.batched(b)
        # replicate reference tokens once per view, then fold views into the batch
        ctx = torch.cat([xf, img.repeat_interleave(f, dim=0), txt.repeat_interleave(f, dim=0)], dim=1)
        out = attend(self.q(xf), self.k(ctx), self.v(ctx), self.heads, self.weights)
        return self.o(out).reshape(b, f, n, d)


class Global3DAttention(nn.Module):
    """Full attention over text, image and all views' tokens jointly."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.o = nn.Linear(width, width)
        self.weights: list | None = None

    def forward(self, x: torch.Tensor, ref: ReferenceTokens, grid: tuple[int, int], use_pos: bool = True):
        b, f, n, d = x.shape
        views = x.reshape(b, f * n, d)
        if use_pos:
            views = views + sincos_3d(f, grid[0], grid[1], d).to(x.dtype)
        img, txt = ref.batched(b)
        seq = torch.cat([txt, img, views], dim=1)
        q, k, v = self.qkv(seq).chunk(3, dim=-1)
        out = self.o(attend(q, k, v, self.heads, self.weights))
        return out[:, seq.shape[1] - f * n:].reshape(b, f, n, d)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None, None]) + shift[:, None, None]


class RefDiTBlock(nn.Module):
    """adaLN-modulated block: appearance attention, global 3D attention, MLP, each residual."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, appearance: bool = True):
        super().__init__()
        self.appearance = AppearanceAttention(width, heads) if appearance else None
        self.glob = Global3DAttention(width, heads)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * width, width))
        self.n_mod = 9 if appearance else 6
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, self.n_mod * width))

    def forward(self, x, temb, ref: ReferenceTokens, grid, use_pos: bool = True):
        mods = list(self.ada(temb).chunk(self.n_mod, dim=-1))
        if self.appearance is not None:
            shift, scale, gate = mods[:3]
            mods = mods[3:]
            h = _modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
            x = x + gate[:, None, None] * self.appearance(h, ref)
        shift, scale, gate = mods[:3]
        h = _modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
        x = x + gate[:, None, None] * self.glob(h, ref, grid, use_pos)
        shift, scale, gate = mods[3:6]
        h = _modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale)
        return x + gate[:, None, None] * self.mlp(h)


class GeometryEncoder(nn.Module):
    """Per-view 3x3 convolution from normal maps to latent channels."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, n: torch.Tensor) -> torch.Tensor:
        b, f, c, h, w = n.shape
        return self.conv(n.reshape(b * f, c, h, w)).reshape(b, f, -1, h, w)


class TimeEmbedder(nn.Module):
    def __init__(self, time_dim: int, width: int):
        super().__init__()
        self.time_dim = time_dim
        self.mlp = nn.Sequential(nn.Linear(time_dim, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.time_dim).to(dtype))


class FinalLayer(nn.Module):
    def __init__(self, width: int, out_dim: int):
        super().__init__()
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.unembed = nn.Linear(width, out_dim)

    def forward(self, x, temb):
        shift, scale = self.ada(temb).chunk(2, dim=-1)
        return self.unembed(_modulate(F.layer_norm(x, x.shape[-1:], eps=1e-6), shift, scale))


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    b, f, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"latent size {h}x{w} not divisible by patch {p}")
    x = x.reshape(b, f, c, h // p, p, w // p, p).permute(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(b, f, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: torch.Tensor, p: int, c: int, h: int, w: int) -> torch.Tensor:
    b, f = tokens.shape[:2]
    x = tokens.reshape(b, f, h // p, w // p, c, p, p).permute(0, 1, 4, 2, 5, 3, 6)
    return x.reshape(b, f, c, h, w)


def tokens_to_stack(tokens: torch.Tensor, grid) -> torch.Tensor:
    """(b, f, N, d) -> (b, f, d, h', w')."""
    b, f, n, d = tokens.shape
    return tokens.transpose(2, 3).reshape(b, f, d, grid[0], grid[1])


def stack_to_tokens(x: torch.Tensor) -> torch.Tensor:
    b, f, d, h, w = x.shape
    return x.reshape(b, f, d, h * w).transpose(2, 3)


def _check_stack(x: torch.Tensor, name: str):
    if x.dim() != 5 or min(x.shape) < 1:
        raise ValueError(f"{name} must be a rank-5 (b, f, c, h, w) tensor with nonzero sizes, got {tuple(x.shape)}")


def _as_timesteps(t, b: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.int64)
    return t.expand(b) if t.dim() == 0 else t


# -- functional operations --------------------------------------------------------

def inject_geometry(x: torch.Tensor, n: torch.Tensor, encoder: GeometryEncoder) -> torch.Tensor:
    """x_g = G(n) + x."""
    _check_stack(x, "x")
    _check_stack(n, "n")
    if x.shape[:2] != n.shape[:2] or x.shape[3:] != n.shape[3:]:
        raise ValueError(f"normal latent {tuple(n.shape)} does not match latent {tuple(x.shape)}")
    g = encoder(n)
    if g.shape != x.shape:
        raise ValueError(f"geometry encoder output {tuple(g.shape)} does not match latent {tuple(x.shape)}")
    return x + g


def appearance_attention(x_f: torch.Tensor, ref: ReferenceTokens, attn: AppearanceAttention) -> torch.Tensor:
    """Residual appearance attention on a hidden stack (b, f, d, h, w)."""
    _check_stack(x_f, "x_f")
    if ref.image.shape[-1] != x_f.shape[2] or ref.text.shape[-1] != x_f.shape[2]:
        raise ValueError("reference token width differs from view token width")
    tok = stack_to_tokens(x_f)
    return tokens_to_stack(tok + attn(tok, ref), x_f.shape[3:])


def global_3d_attention(x: torch.Tensor, ref: ReferenceTokens, attn: Global3DAttention,
                        use_pos: bool = True) -> torch.Tensor:
    """Residual joint attention over all views' tokens plus reference tokens."""
    _check_stack(x, "x")
    if ref.image.shape[-1] != x.shape[2] or ref.text.shape[-1] != x.shape[2]:
        raise ValueError("reference token width differs from view token width")
    tok = stack_to_tokens(x)
    return tokens_to_stack(tok + attn(tok, ref, x.shape[3:], use_pos), x.shape[3:])


def fuse_branches(a_out: torch.Tensor, r_out: torch.Tensor, m_out: torch.Tensor) -> torch.Tensor:
    """Shared latent as the elementwise sum of the three branch outputs."""
    if not a_out.shape == r_out.shape == m_out.shape:
        raise ValueError("branch outputs must share one shape")
    return a_out + r_out + m_out


def _orthogonal_init(module: nn.Module, generator: torch.Generator):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.orthogonal_(m.weight, generator=generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.orthogonal_(m.weight.view(m.weight.shape[0], -1), gain=0.5, generator=generator)
            nn.init.zeros_(m.bias)


def _zero_init(module: nn.Module):
    for p in module.parameters():
        nn.init.zeros_(p)


class MGDiT(nn.Module):
    """Multi-branch generator: per-branch input blocks, shared trunk, per-branch output blocks."""

    def __init__(self, cfg: DitConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or DitConfig()
        self.cfg = cfg
        d, p = cfg.width, cfg.patch
        self.geometry = GeometryEncoder(3, MATERIAL_CHANNELS)
        self.time = TimeEmbedder(cfg.time_dim, d)
        self.image_proj = nn.Linear(d, d)
        self.text_proj = nn.Linear(d, d)

        def blocks(n):
            return nn.ModuleList(RefDiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(n))

        self.patch_in = nn.ModuleDict({k: nn.Linear(c * p * p, d) for k, c in BRANCH_CHANNELS.items()})
        self.branch_in = nn.ModuleDict({k: blocks(cfg.branch_blocks) for k in BRANCHES})
        self.trunk = blocks(cfg.shared_blocks)
        self.branch_out = nn.ModuleDict({k: blocks(cfg.branch_blocks) for k in BRANCHES})
        self.final = nn.ModuleDict({k: FinalLayer(d, c * p * p) for k, c in BRANCH_CHANNELS.items()})
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        _orthogonal_init(self, gen)
        for block in self.modules():
            if isinstance(block, RefDiTBlock):
                _zero_init(block.ada)
        for final in self.final.values():
            _zero_init(final.ada)
            _zero_init(final.unembed)

    def embed_reference(self, ref: ReferenceTokens) -> ReferenceTokens:
        return ReferenceTokens(self.image_proj(ref.image), self.text_proj(ref.text))

    def branch_forward(self, x_g: torch.Tensor, branch: str, temb=None, ref: ReferenceTokens | None = None):
        """Branch input projection and that branch's blocks; returns the hidden stack (b, f, d, h/p, w/p)."""
        _check_stack(x_g, "x_g")
        p = self.cfg.patch
        b, f, c, h, w = x_g.shape
        if c != BRANCH_CHANNELS[branch]:
            raise ValueError(f"{branch} branch expects {BRANCH_CHANNELS[branch]} channels, got {c}")
        grid = (h // p, w // p)
        if temb is None:
            temb = torch.zeros(b, self.cfg.width, dtype=x_g.dtype)
        if ref is None:
            ref = ReferenceTokens.empty(self.cfg.width, x_g.dtype)
        tok = self.patch_in[branch](patchify(x_g, p))
        for blk in self.branch_in[branch]:
            tok = blk(tok, temb, ref, grid, self.cfg.use_pos)
        return tokens_to_stack(tok, grid)

    def forward(self, x_a, x_r, x_m, n, ref: ReferenceTokens, t):
        for name, x in (("x_a", x_a), ("x_r", x_r), ("x_m", x_m), ("n", n)):
            _check_stack(x, name)
        b, f, _, h, w = x_a.shape
        if not (x_r.shape[:2] + x_r.shape[3:] == x_m.shape[:2] + x_m.shape[3:] == x_a.shape[:2] + x_a.shape[3:]):
            raise ValueError("material latents must share (b, f, h, w)")
        p = self.cfg.patch
        grid = (h // p, w // p)
        temb = self.time(_as_timesteps(t, b), x_a.dtype)
        ref = self.embed_reference(ref)
        geo = self.geometry(n) if n.shape[2] == 3 else None
        if geo is None or geo.shape[3:] != x_a.shape[3:]:
            raise ValueError(f"normal latent {tuple(n.shape)} does not match latents")
        geo = geo.split([BRANCH_CHANNELS[k] for k in BRANCHES], dim=2)
        hidden = [self.branch_forward(x + g, k, temb, ref) for k, x, g in zip(BRANCHES, (x_a, x_r, x_m), geo)]
        tok = stack_to_tokens(fuse_branches(*hidden))
        for blk in self.trunk:
            tok = blk(tok, temb, ref, grid, self.cfg.use_pos)
        outs = []
        for k in BRANCHES:
            o = tok
            for blk in self.branch_out[k]:
                o = blk(o, temb, ref, grid, self.cfg.use_pos)
            outs.append(unpatchify(self.final[k](o, temb), p, BRANCH_CHANNELS[k], h, w))
        return tuple(outs)


def mgdit_forward(x_a, x_r, x_m, n, ref: ReferenceTokens, t, model: MGDiT):
    return model(x_a, x_r, x_m, n, ref, t)


class MRDiT(nn.Module):
    """UV-space refiner: coarse texture and UV normals are added to the noisy latent;
    blocks carry global attention only (text tokens in the sequence)."""

    def __init__(self, cfg: DitConfig | None = None, seed: int = 0, channels: int = MATERIAL_CHANNELS):
        super().__init__()
        cfg = cfg or DitConfig()
        self.cfg = cfg
        self.channels = channels
        d, p = cfg.width, cfg.patch
        self.geometry = GeometryEncoder(3, channels)
        self.time = TimeEmbedder(cfg.time_dim, d)
        self.text_proj = nn.Linear(d, d)
        self.patch_in = nn.Linear(channels * p * p, d)
        self.blocks = nn.ModuleList(RefDiTBlock(d, cfg.heads, cfg.mlp_ratio, appearance=False)
                                    for _ in range(cfg.shared_blocks + 2 * cfg.branch_blocks))
        self.final = FinalLayer(d, channels * p * p)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        _orthogonal_init(self, gen)
        for blk in self.blocks:
            _zero_init(blk.ada)
        _zero_init(self.final.ada)
        _zero_init(self.final.unembed)

    def forward(self, z, t_c, t_n, text: ReferenceTokens, t):
        for name, x in (("z", z), ("T_c", t_c), ("T_n", t_n)):
            _check_stack(x, name)
        b, f, c, h, w = z.shape
        if c != self.channels or t_c.shape[2] != self.channels:
            raise ValueError(f"refiner expects {self.channels} latent channels")
        if t_c.shape[3:] != z.shape[3:]:
            t_c = F.interpolate(t_c.reshape(b * f, c, *t_c.shape[3:]), size=(h, w), mode="bilinear",
                                align_corners=False).reshape(b, f, c, h, w)
        if t_n.shape[3:] != z.shape[3:]:
            t_n = F.interpolate(t_n.reshape(b * f, 3, *t_n.shape[3:]), size=(h, w), mode="bilinear",
                                align_corners=False).reshape(b, f, 3, h, w)
        x = z + ToyCodec.encode(t_c) + self.geometry(t_n)
        p = self.cfg.patch
        grid = (h // p, w // p)
        temb = self.time(_as_timesteps(t, b), z.dtype)
        ref = ReferenceTokens(text.image[..., :0, :], self.text_proj(text.text))
        tok = self.patch_in(patchify(x, p))
        for blk in self.blocks:
            tok = blk(tok, temb, ref, grid, self.cfg.use_pos)
        return unpatchify(self.final(tok, temb), p, c, h, w)


def mrdit_forward(z, t_c, t_n, text: ReferenceTokens, t, model: MRDiT):
    return model(z, t_c, t_n, text, t)


def randomize_(model: nn.Module, seed: int = 0, std: float = 0.3) -> nn.Module:
    """Overwrite every parameter with seeded Gaussian noise (tests and probes)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return model
