"""Data-side harmonization: map every client's inputs toward a shared reference.

All image operators take (C, H, W) float64 arrays. Deterministic operators
(histogram matching, frequency-amplitude swap, statistic transfer) are pure
functions of image and reference; stochastic ones (augmentation, statistic
mixing) draw from an explicit stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import STAT_EPS, RngStream, ensure_finite, fft2, ifft2, quantile_map, rng_derive
from .synthdata import ClientDataset

HARMONIZE_KINDS = (
    "none", "augment", "hist_sri", "hist_ari", "fda_sri",
    "mixstyle_input", "mixstyle_feature", "adain", "plugin",
)

# Transforms whose output is a pure function of (image, reference).
DETERMINISTIC_KINDS = ("hist_sri", "hist_ari", "fda_sri", "adain", "plugin")


@dataclass(frozen=True)
class HarmonizeKind:
    """Which transform to run and its parameters."""

    kind: str = "none"
    beta: float = 0.1            # fda_sri: low-frequency window fraction
    alpha: float = 0.3           # mixstyle: Beta(alpha, alpha) mixing weight
    layer_tag: str | None = None  # mixstyle_feature: hook site inside the model
    plugin_name: str | None = None
    reference_client: int = 0

    def __post_init__(self):
        if self.kind not in HARMONIZE_KINDS:
            raise ValueError(f"unknown harmonize kind {self.kind!r}; valid: {', '.join(HARMONIZE_KINDS)}")
        if not (0.0 <= self.beta <= 0.5):
            raise ValueError(f"beta must be in [0, 0.5], got {self.beta}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.kind == "plugin" and not self.plugin_name:
            raise ValueError("kind 'plugin' requires plugin_name")


@dataclass
class ReferenceBank:
    """Reference images sampled from training splits only.

    sri_image is one representative train image of the designated reference
    client; ari_image is the pixel-wise mean of one representative per client.
    """

    mode: str
    sri_image: np.ndarray
    ari_image: np.ndarray
    source_client: int
    rep_indices: dict[int, int] = field(default_factory=dict)

    def reference(self) -> np.ndarray:
        return self.sri_image if self.mode == "sri" else self.ari_image


def build_reference_bank(datasets: list[ClientDataset], mode: str, master_seed: int,
                         source_client: int = 0) -> ReferenceBank:
    if mode not in ("sri", "ari"):
        raise ValueError(f"mode must be 'sri' or 'ari', got {mode!r}")
    if not any(ds.client_id == source_client for ds in datasets):
        raise ValueError(f"no client with id {source_client}")
    reps = {}
    for ds in datasets:
        if ds.train_idx.size == 0:
            raise ValueError(f"client {ds.client_id} has an empty train split")
        stream = rng_derive(master_seed, (ds.client_id, 0, "refbank"))
        reps[ds.client_id] = int(ds.train_idx[stream.gen.integers(ds.train_idx.size)])
    by_id = {ds.client_id: ds for ds in datasets}
    sri = by_id[source_client].images[reps[source_client]].copy()
    ari = np.mean([by_id[cid].images[reps[cid]] for cid in sorted(reps)], axis=0)
    return ReferenceBank(mode, sri, ari, source_client, reps)


def _check_image(x, name="image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (C, H, W), got shape {arr.shape}")
    return arr


def apply_hist_match(x, bank: ReferenceBank) -> np.ndarray:
    """Per-channel quantile mapping of x onto the bank reference."""
    x = _check_image(x)
    ref = _check_image(bank.reference(), "reference")
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        out[c] = quantile_map(x[c], ref[c % ref.shape[0]])
    return ensure_finite(out, "hist-matched image")


def fda_window(h: int, w: int, beta: float) -> tuple[slice, slice]:
    """Centered low-frequency square of odd side 2*floor(beta*min(h, w)) + 1.

    Indices are in fftshift coordinates; the window clamps to the spectrum.
    """
    b = int(np.floor(beta * min(h, w)))
    side = 2 * b + 1
    cy, cx = h // 2, w // 2
    y0 = max(cy - side // 2, 0)
    x0 = max(cx - side // 2, 0)
    return slice(y0, min(y0 + side, h)), slice(x0, min(x0 + side, w))


def apply_fda(x, bank: ReferenceBank, beta: float, clip: bool = True) -> np.ndarray:
    """Swap the centered low-frequency amplitude block with the reference's.

    Keeps x's phase, inverts, takes the real part, and clips to [0, 1].
    beta = 0 swaps only the DC bin; beta = 0.5 replaces the full amplitude.
    """
    if not (0.0 <= beta <= 0.5):
        raise ValueError(f"beta must be in [0, 0.5], got {beta}")
    x = _check_image(x)
    ref = _check_image(bank.reference(), "reference")
    if x.shape[-2:] != ref.shape[-2:]:
        raise ValueError(f"image {x.shape} and reference {ref.shape} sizes differ")
    h, w = x.shape[-2:]
    ys, xs = fda_window(h, w, beta)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        amp, phase = fft2(x[c])
        ref_amp, _ = fft2(ref[c % ref.shape[0]])
        amp_sh = np.fft.fftshift(amp)
        amp_sh[ys, xs] = np.fft.fftshift(ref_amp)[ys, xs]
        out[c] = ifft2(np.fft.ifftshift(amp_sh), phase)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return ensure_finite(out, "fda image")


def _channel_stats(x: np.ndarray):
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sigma = x.std(axis=(-2, -1), keepdims=True)
    return mu, sigma


def apply_adain(x, bank: ReferenceBank) -> np.ndarray:
    """Transfer the reference's per-channel mean/std onto x."""
    x = _check_image(x)
    ref = _check_image(bank.reference(), "reference")
    mu_x, sig_x = _channel_stats(x)
    mu_r, sig_r = _channel_stats(ref)
    out = sig_r * (x - mu_x) / np.maximum(sig_x, STAT_EPS) + mu_r
    return ensure_finite(out, "adain image")


def apply_mixstyle_input(x, peer, alpha: float, stream: RngStream,
                         lam: float | None = None) -> np.ndarray:
    """Renormalize x with per-channel stats interpolated toward the peer's.

    lam ~ Beta(alpha, alpha) unless forced; lam = 1 is an exact identity and
    lam = 0 reproduces the statistic transfer of apply_adain with the peer
    as reference.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = _check_image(x)
    peer = _check_image(peer, "peer")
    if lam is None:
        lam = float(stream.gen.beta(alpha, alpha))
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if lam == 1.0:
        return x.copy()
    mu_x, sig_x = _channel_stats(x)
    mu_p, sig_p = _channel_stats(peer)
    mu_mix = lam * mu_x + (1.0 - lam) * mu_p
    sig_mix = lam * sig_x + (1.0 - lam) * sig_p
    out = sig_mix * (x - mu_x) / np.maximum(sig_x, STAT_EPS) + mu_mix
    return ensure_finite(out, "mixstyle image")


@dataclass(frozen=True)
class AugmentParams:
    """Probabilities and ranges; all-zero parameters give the identity."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rot90"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.brightness < 0 or self.contrast < 0:
            raise ValueError("brightness and contrast ranges must be non-negative")

    @staticmethod
    def identity() -> "AugmentParams":
        return AugmentParams(0.0, 0.0, 0.0, 0.0, 0.0)


def apply_augment(x, target, stream: RngStream, params: AugmentParams, task: str):
    """Geometric augments move image and mask together; jitter is image-only.

    Classification labels pass through untouched.
    """
    x = _check_image(x).copy()
    rng = stream.gen
    mask = None
    if task == "seg":
        mask = np.asarray(target, dtype=np.float64).copy()
    if params.p_hflip > 0 and rng.uniform() < params.p_hflip:
        x = x[:, :, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    if params.p_vflip > 0 and rng.uniform() < params.p_vflip:
        x = x[:, ::-1, :]
        if mask is not None:
            mask = mask[::-1, :]
    if params.p_rot90 > 0 and rng.uniform() < params.p_rot90:
        quarter = int(rng.integers(1, 4))
        x = np.rot90(x, quarter, axes=(1, 2))
        if mask is not None:
            mask = np.rot90(mask, quarter, axes=(0, 1))
    if params.contrast > 0:
        x = x * (1.0 + rng.uniform(-params.contrast, params.contrast))
    if params.brightness > 0:
        x = x + rng.uniform(-params.brightness, params.brightness)
    if params.contrast > 0 or params.brightness > 0:
        x = np.clip(x, 0.0, 1.0)
    out_target = np.ascontiguousarray(mask) if mask is not None else target
    return np.ascontiguousarray(x), out_target


def amplified_difference(x, x_harmonized, scale: float = 5.0) -> np.ndarray:
    """clip(scale * |x - x'|, 0, 1): where did harmonization touch the image."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_harmonized, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.clip(scale * np.abs(a - b), 0.0, 1.0)


def feature_mixstyle_hook(feats: np.ndarray, alpha: float, stream: RngStream,
                          lam: np.ndarray | float | None = None):
    """Mix per-instance feature statistics with a shuffled batch partner.

    Returns (mixed, scale): the transform is affine per instance with the
    statistics treated as constants, so `scale` is the exact backward factor
    under that convention. Batches of fewer than two instances pass through.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim < 2:
        raise ValueError(f"features must have a batch axis, got shape {f.shape}")
    batch = f.shape[0]
    if batch < 2:
        return f.copy(), np.ones_like(f)
    axes = tuple(range(2, f.ndim)) if f.ndim >= 3 else (1,)
    lam_shape = (batch,) + (1,) * (f.ndim - 1)
    if lam is None:
        lam_arr = stream.gen.beta(alpha, alpha, size=batch).reshape(lam_shape)
    else:
        lam_arr = np.broadcast_to(np.asarray(lam, dtype=np.float64), lam_shape).copy()
    if np.all(lam_arr == 1.0):
        return f.copy(), np.ones_like(f)
    partner = stream.gen.permutation(batch)
    mu = f.mean(axis=axes, keepdims=True)
    sig = f.std(axis=axes, keepdims=True)
    mu_mix = lam_arr * mu + (1.0 - lam_arr) * mu[partner]
    sig_mix = lam_arr * sig + (1.0 - lam_arr) * sig[partner]
    scale = sig_mix / np.maximum(sig, STAT_EPS)
    mixed = scale * (f - mu) + mu_mix
    return mixed, np.broadcast_to(scale, f.shape).copy()


# --------------------------------------------------------------------------
# Plugin registry for externally trained harmonizers.

_PLUGINS: dict[str, object] = {}


def register_plugin(name: str, transform) -> None:
    """Register transform(x, bank, stream) -> image under a name."""
    if not name:
        raise ValueError("plugin name must be non-empty")
    _PLUGINS[name] = transform


def get_plugin(name: str):
    if name not in _PLUGINS:
        raise KeyError(f"no harmonization plugin named {name!r}; registered: {sorted(_PLUGINS)}")
    return _PLUGINS[name]


def _noop_plugin(x, bank, stream):
    return np.asarray(x, dtype=np.float64).copy()


register_plugin("noop", _noop_plugin)
