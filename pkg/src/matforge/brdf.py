"""Cook-Torrance microfacet BRDF (GGX distribution, min-form geometry term, Schlick Fresnel).

All functions broadcast over leading axes; RGB quantities carry a trailing
axis of length 3, scalars (roughness, metallic, dot products) do not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

R_MIN = 0.04
DIELECTRIC_F0 = 0.04
TIE_DELTA = 1e-4


class DegenerateHalfVectorError(ValueError):
    """wi and wo are opposite, so the half vector is undefined."""


def _dot(a, b):
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


@dataclass(frozen=True)
class ShadingPoint:
    n: np.ndarray
    wi: np.ndarray
    wo: np.ndarray

    def __post_init__(self):
        for name in ("n", "wi", "wo"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > 1e-6):
                raise ValueError(f"ShadingPoint.{name} must be unit length")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class MaterialSample:
    """Albedo (..., 3), roughness (...), metallic (...).

    Roughness is stored as given and clamped to ``R_MIN`` at evaluation, so the
    roughness partial is zero below the clamp.
    """

    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        r = np.asarray(self.roughness, dtype=np.float64)
        m = np.asarray(self.metallic, dtype=np.float64)
        if a.shape[-1:] != (3,):
            raise ValueError("albedo must have a trailing RGB axis")
        if np.any((a < 0) | (a > 1)):
            raise ValueError("albedo outside [0,1]")
        if np.any((r < 0) | (r > 1)):
            raise ValueError("roughness outside [0,1]")
        if np.any((m < 0) | (m > 1)):
            raise ValueError("metallic outside [0,1]")
        object.__setattr__(self, "albedo", a)
        object.__setattr__(self, "roughness", r)
        object.__setattr__(self, "metallic", m)


@dataclass(frozen=True)
class BrdfGrad:
    """Partials of each output channel; ``subgradient`` marks points near a G tie or the roughness clamp."""

    d_albedo: np.ndarray
    d_roughness: np.ndarray
    d_metallic: np.ndarray
    subgradient: np.ndarray


def half_vector(wi, wo) -> np.ndarray:
    s = np.asarray(wi, dtype=np.float64) + np.asarray(wo, dtype=np.float64)
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateHalfVectorError("wi = -wo: half vector undefined")
    return s / norm


def ndf_ggx(n_dot_h, roughness):
    alpha = np.asarray(roughness, dtype=np.float64) ** 2
    a2 = alpha * alpha
    q = np.asarray(n_dot_h, dtype=np.float64) ** 2 * (a2 - 1.0) + 1.0
    return a2 / (math.pi * q * q)


def _g_terms(n_dot_h, n_dot_wo, n_dot_wi, wo_dot_h):
    masking = 2.0 * n_dot_h * n_dot_wo / wo_dot_h
    shadowing = 2.0 * n_dot_h * n_dot_wi / wo_dot_h
    return masking, shadowing


def geometry_term(n_dot_h, n_dot_wo, n_dot_wi, wo_dot_h):
    wo_dot_h = np.asarray(wo_dot_h, dtype=np.float64)
    if np.any(wo_dot_h <= 0):
        raise ValueError("geometry_term requires wo.h > 0")
    masking, shadowing = _g_terms(np.asarray(n_dot_h, dtype=np.float64), n_dot_wo, n_dot_wi, wo_dot_h)
    return np.minimum(1.0, np.minimum(masking, shadowing))


def fresnel_schlick(h_dot_wo, f0):
    f0 = np.asarray(f0, dtype=np.float64)
    k = (1.0 - np.asarray(h_dot_wo, dtype=np.float64)) ** 5
    if f0.ndim > k.ndim:
        k = k[..., None]
    return f0 + (1.0 - f0) * k


def f0_of(albedo, metallic):
    m = np.asarray(metallic, dtype=np.float64)[..., None]
    return m * np.asarray(albedo, dtype=np.float64) + (1.0 - m) * DIELECTRIC_F0


def _dots(n, wi, wo):
    h = half_vector(wi, wo)
    return _dot(n, h), _dot(n, wo), _dot(n, wi), _dot(wo, h)


def _check_hemisphere(n_wi, n_wo):
    if np.any(n_wi <= 0) or np.any(n_wo <= 0):
        raise ValueError("brdf evaluation requires n.wi > 0 and n.wo > 0")


def eval_dots(nh, nwo, nwi, woh, albedo, roughness, metallic, specular: bool = True):
    """BRDF from precomputed dot products; no domain checks (callers mask invalid entries)."""
    albedo = np.asarray(albedo, dtype=np.float64)
    m = np.asarray(metallic, dtype=np.float64)
    out = (1.0 - m)[..., None] * albedo / math.pi
    if specular:
        r = np.clip(roughness, R_MIN, 1.0)
        d = ndf_ggx(nh, r)
        g = np.minimum(1.0, np.minimum(*_g_terms(nh, nwo, nwi, woh)))
        f = fresnel_schlick(woh, f0_of(albedo, m))
        out = out + (d * g / (4.0 * nwi * nwo))[..., None] * f
    return out


def grad_dots(nh, nwo, nwi, woh, albedo, roughness, metallic, specular: bool = True):
    """Closed-form partials of :func:`eval_dots` with respect to albedo, roughness and metallic."""
    albedo = np.asarray(albedo, dtype=np.float64)
    m = np.asarray(metallic, dtype=np.float64)
    r_in = np.asarray(roughness, dtype=np.float64)
    m3 = m[..., None]
    d_a = np.broadcast_to((1.0 - m3) / math.pi, albedo.shape).copy()
    d_m = -albedo / math.pi
    d_r = np.zeros_like(d_a)
    masking, shadowing = _g_terms(nh, nwo, nwi, woh)
    terms = np.stack(np.broadcast_arrays(np.ones_like(masking), masking, shadowing), axis=-1)
    srt = np.sort(terms, axis=-1)
    sub = (srt[..., 1] - srt[..., 0]) <= TIE_DELTA
    sub = sub | (np.abs(r_in - R_MIN) <= TIE_DELTA)
    if specular:
        r = np.clip(r_in, R_MIN, 1.0)
        alpha = r * r
        a2 = alpha * alpha
        q = nh * nh * (a2 - 1.0) + 1.0
        d = a2 / (math.pi * q * q)
        # dD/dr = dD/d(alpha^2) * d(alpha^2)/dr, alpha^2 = r^4
        dd_dr = (q - 2.0 * a2 * nh * nh) / (math.pi * q ** 3) * 4.0 * r ** 3
        dd_dr = np.where(r_in < R_MIN, 0.0, dd_dr)
        g = np.min(terms, axis=-1)
        denom = 4.0 * nwi * nwo
        k = (1.0 - woh) ** 5
        f = fresnel_schlick(woh, f0_of(albedo, m))
        dgd = (d * g / denom)[..., None]
        # dF/dF0 = 1 - k; dF0/da = m; dF0/dm = a - 0.04
        d_a = d_a + dgd * (1.0 - k)[..., None] * m3
        d_m = d_m + dgd * (1.0 - k)[..., None] * (albedo - DIELECTRIC_F0)
        d_r = (dd_dr * g / denom)[..., None] * f
    shape = np.broadcast_shapes(d_a.shape, d_r.shape, d_m.shape)
    return (np.broadcast_to(d_a, shape), np.broadcast_to(d_r, shape),
            np.broadcast_to(d_m, shape), np.asarray(sub))


def brdf_eval(sp: ShadingPoint, mat: MaterialSample, specular: bool = True) -> np.ndarray:
    """f_r = (1-m) a/pi + D G F / (4 (n.wi)(n.wo)), per RGB channel."""
    nh, nwo, nwi, woh = _dots(sp.n, sp.wi, sp.wo)
    _check_hemisphere(nwi, nwo)
    return eval_dots(nh, nwo, nwi, woh, mat.albedo, mat.roughness, mat.metallic, specular)


def brdf_grad(sp: ShadingPoint, mat: MaterialSample, specular: bool = True) -> BrdfGrad:
    nh, nwo, nwi, woh = _dots(sp.n, sp.wi, sp.wo)
    _check_hemisphere(nwi, nwo)
    d_a, d_r, d_m, sub = grad_dots(nh, nwo, nwi, woh, mat.albedo, mat.roughness, mat.metallic, specular)
    return BrdfGrad(d_a, d_r, d_m, sub)
