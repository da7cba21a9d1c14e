"""Deterministic numeric substrate.

Derived-key RNG streams, 2-D FFT amplitude/phase helpers, rank-based
quantile mapping, population statistics, and a central finite-difference
gradient oracle. Everything is float64; identical inputs give identical
outputs regardless of call order or parallelism.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

# Shared floor for standard deviations in statistic-transfer ops.
STAT_EPS = 1e-6

_U64 = (1 << 64) - 1


class NonFiniteError(ValueError):
    """An array that must be finite contains NaN or infinity."""


def ensure_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


@dataclass
class RngStream:
    """A seeded generator derived from (master_seed, key).

    The same (master_seed, key) pair always yields the same draw sequence;
    distinct keys give independent streams.
    """

    master_seed: int
    key: tuple[int, int, str]
    gen: np.random.Generator = field(repr=False)


def rng_derive(master_seed: int, key: tuple[int, int, str]) -> RngStream:
    """Derive an independent stream for key = (client_id, round, tag).

    Counter-based: the Philox key is a hash of the seed and the key tuple,
    so stream creation is order-independent and streams for different
    clients/rounds/purposes never collide in practice.
    """
    if not isinstance(master_seed, (int, np.integer)) or master_seed < 0:
        raise ValueError(f"master_seed must be a non-negative integer, got {master_seed!r}")
    client_id, round_idx, tag = key
    payload = f"{int(master_seed) & _U64}|{int(client_id)}|{int(round_idx)}|{tag}".encode()
    digest = hashlib.sha256(payload).digest()
    philox_key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=philox_key))
    return RngStream(int(master_seed), (int(client_id), int(round_idx), str(tag)), gen)


def _as_image(x) -> np.ndarray:
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError(f"image must be at least 2x2, got shape {img.shape}")
    return img


def fft2(img) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and phase of the 2-D DFT of a real H x W image."""
    spectrum = np.fft.fft2(_as_image(img))
    return np.abs(spectrum), np.angle(spectrum)


def ifft2(amplitude, phase) -> np.ndarray:
    """Real part of the inverse 2-D DFT of amplitude * exp(i * phase)."""
    amplitude = _as_image(amplitude)
    phase = _as_image(phase)
    if amplitude.shape != phase.shape:
        raise ValueError(f"amplitude {amplitude.shape} and phase {phase.shape} differ")
    return np.real(np.fft.ifft2(amplitude * np.exp(1j * phase)))


def quantile_map(src, ref) -> np.ndarray:
    """Remap src so its value distribution matches ref's.

    Each element receives the value of ref's (linearly interpolated)
    quantile function at the element's rank in src. Tied source values
    share their average rank, so equal inputs map to equal outputs and a
    constant input maps to ref's median-rank value.
    """
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if src.size == 0:
        raise ValueError("quantile_map: source is empty")
    if ref.size == 0:
        raise ValueError("quantile_map: reference is empty")
    flat = src.ravel()
    if flat.size == 1:
        quantiles = np.array([0.5])
    else:
        ranks = rankdata(flat, method="average") - 1.0
        quantiles = ranks / (flat.size - 1)
    ref_sorted = np.sort(ref.ravel())
    out = np.interp(quantiles * (ref_sorted.size - 1), np.arange(ref_sorted.size), ref_sorted)
    return out.reshape(src.shape)


def tensor_stats(x, axis_group: str = "global"):
    """Population mean and std, globally or per channel.

    Channel axis convention: axis 0 for a (C, H, W) array, axis 1 for a
    (B, C, H, W) batch; 1-D and 2-D inputs count as a single channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if axis_group == "global":
        return float(x.mean()), float(x.std())
    if axis_group != "per_channel":
        raise ValueError(f"axis_group must be 'global' or 'per_channel', got {axis_group!r}")
    if x.ndim <= 2:
        return np.array([x.mean()]), np.array([x.std()])
    if x.ndim == 3:
        axes = (1, 2)
    elif x.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise ValueError(f"per_channel stats support up to 4-D arrays, got shape {x.shape}")
    return x.mean(axis=axes), x.std(axis=axes)


def finite_diff_grad(f, params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar f over a name -> array mapping.

    f is called with the same mapping; entries are perturbed in place and
    restored. Evaluation failures propagate to the caller.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    grads: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(params)
            flat[i] = orig - h
            f_minus = f(params)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = grad
    return grads
