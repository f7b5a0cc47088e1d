"""Image files: PFM for floats, 8-bit PNG for previews and masks, and texture-set bundles."""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .uvproj import TextureMap

GAMMA = 2.2
_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", re.DOTALL)


class ImageFormatError(ValueError):
    pass


def write_pfm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 3) float image, little-endian, rows bottom to top."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ImageFormatError(f"PFM holds 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    body = np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise ImageFormatError(f"{path}: bad PFM scale line") from None
    if scale == 0:
        raise ImageFormatError(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


def encode_srgb8(linear: np.ndarray) -> np.ndarray:
    return np.round(np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA) * 255.0).astype(np.uint8)


def decode_srgb8(values: np.ndarray) -> np.ndarray:
    return (values.astype(np.float64) / 255.0) ** GAMMA


def write_png(path: str | os.PathLike, linear: np.ndarray) -> None:
    """Clamp to [0, 1], gamma-encode and store as 8-bit gray or RGB."""
    Image.fromarray(encode_srgb8(np.asarray(linear, dtype=np.float64))).save(path, format="PNG")


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG back to linear values."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB" if im.mode in ("RGB", "RGBA", "P") else "L"))
    return decode_srgb8(arr)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def texture_paths(stem: str | os.PathLike, names=("albedo", "roughness", "metallic")) -> dict[str, Path]:
    stem = Path(stem)
    out = {n: stem.with_name(f"{stem.name}.{n}.pfm") for n in names}
    out["mask"] = stem.with_name(f"{stem.name}.mask.png")
    return out


def save_textures(stem: str | os.PathLike, textures: dict[str, TextureMap]) -> None:
    """Write ``<stem>.<name>.pfm`` per map and one ``<stem>.mask.png``."""
    paths = texture_paths(stem, tuple(textures))
    mask = None
    for name, tex in textures.items():
        write_pfm(paths[name], tex.data)
        if mask is None:
            mask = tex.mask
        elif not np.array_equal(mask, tex.mask):
            raise ValueError("textures in one bundle must share a coverage mask")
    write_mask(paths["mask"], mask)


def load_textures(stem: str | os.PathLike, names=("albedo", "roughness", "metallic")) -> dict[str, TextureMap]:
    paths = texture_paths(stem, names)
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(p)
    mask = read_mask(paths["mask"])
    out = {}
    for name in names:
        data = read_pfm(paths[name]).astype(np.float64)
        if data.shape[:2] != mask.shape:
            raise ImageFormatError(f"{paths[name]}: size does not match {paths['mask']}")
        out[name] = TextureMap.masked(data, mask)
    return out
