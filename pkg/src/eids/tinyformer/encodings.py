"""Positional encodings: sinusoidal, Fourier (learnable frequencies) and rotary.

All three accept arbitrary real positions, so the same code serves the
index-based variants (positions 0..n-1) and the timestamp-driven ones
(positions = packet arrival times).
"""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def sinusoid_freqs(d_m: int, base: float = 10000.0) -> np.ndarray:
    """Angular frequency ``1 / base**(2i/d_m)`` of each sin/cos pair."""
    i = np.arange(d_m // 2)
    return base ** (-2.0 * i / d_m)


def pe_sinusoidal(positions, d_m: int, base: float = 10000.0) -> np.ndarray:
    """``(..., n) -> (..., n, d_m)``; even columns sine, odd columns cosine."""
    if d_m % 2:
        raise ValueError("d_m must be even")
    angle = np.asarray(positions, dtype=np.float64)[..., None] * sinusoid_freqs(d_m, base)
    out = np.empty(angle.shape[:-1] + (d_m,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def pe_fourier(positions, freqs) -> np.ndarray:
    """``PE[p, 2i] = sin(2 pi f_i p)``, ``PE[p, 2i+1] = cos(2 pi f_i p)``."""
    freqs = np.asarray(freqs, dtype=np.float64)
    angle = TWO_PI * np.asarray(positions, dtype=np.float64)[..., None] * freqs
    out = np.empty(angle.shape[:-1] + (2 * len(freqs),))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


def pe_fourier_freq_grad(positions, freqs, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * pe_fourier(positions, freqs))`` w.r.t. ``freqs``."""
    freqs = np.asarray(freqs, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    angle = TWO_PI * pos * freqs
    g = upstream[..., 0::2] * np.cos(angle) - upstream[..., 1::2] * np.sin(angle)
    return (g * TWO_PI * pos).reshape(-1, len(freqs)).sum(axis=0)


def init_fourier_freqs(d_m: int, base: float = 10000.0) -> np.ndarray:
    """Frequencies that make the Fourier encoding start out equal to the sinusoidal one."""
    return sinusoid_freqs(d_m, base) / TWO_PI


def rope_thetas(d_r: int, d_m: int | None = None, base: float = 10000.0,
                style: str = "model") -> np.ndarray:
    """Rotation rate of each of the ``d_r / 2`` coordinate pairs.

    ``style="model"`` uses ``base**(-i/d_m)``; ``style="head"`` uses the
    common per-head form ``base**(-2i/d_r)``.
    """
    if d_r % 2:
        raise ValueError("rotary dimension must be even")
    i = np.arange(d_r // 2)
    if style == "model":
        return base ** (-i / (d_m if d_m is not None else d_r))
    if style == "head":
        return base ** (-2.0 * i / d_r)
    raise ValueError(f"unknown rope style {style!r}")


def rope_angles(positions, thetas) -> tuple[np.ndarray, np.ndarray]:
    angle = np.asarray(positions, dtype=np.float64)[..., None] * thetas
    return np.cos(angle), np.sin(angle)


def rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Rotate consecutive pairs of the last axis of ``x``; ``inverse`` applies the transpose."""
    if inverse:
        sin = -sin
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def rope_rotate(qk, positions, theta_base: float = 10000.0, d_m: int | None = None,
                style: str = "model") -> np.ndarray:
    """Rotate ``(..., n, d_r)`` query or key vectors by their positions."""
    qk = np.asarray(qk, dtype=np.float64)
    cos, sin = rope_angles(positions, rope_thetas(qk.shape[-1], d_m, theta_base, style))
    return rope_apply(qk, cos, sin)
