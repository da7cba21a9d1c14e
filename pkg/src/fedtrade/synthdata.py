"""Synthetic federations with independently controllable style and content shift.

Two dials in [0, 1] set how much clients differ:

* delta_style spreads per-client appearance (gain, bias, gamma, noise,
  background texture) while leaving targets untouched.
* delta_content spreads what is in the images (lesion shape family, size,
  position priors for segmentation; class priors and pattern frequency for
  classification) while styles stay put.

At delta 0 the corresponding per-client parameters are identical, so the
federation is IID along that axis by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import RngStream, ensure_finite, rng_derive

FORMAT_VERSION = 1

SHAPE_FAMILIES = ("ellipse", "star", "crescent")

# Unequal client sizes by default, roughly 1000:196:380:612 scaled down.
DEFAULT_CLIENT_SIZES = (250, 49, 95, 153)


class LoadError(ValueError):
    """A persisted federation fails validation; the message names the field."""


@dataclass(frozen=True)
class StyleParams:
    """Appearance transform for one client; identity is (1, 0, 1, 0, 0)."""

    gain: float = 1.0
    bias: float = 0.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    texture_amp: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.noise_sigma < 0 or self.texture_amp < 0:
            raise ValueError("noise_sigma and texture_amp must be non-negative")


@dataclass(frozen=True)
class ContentParams:
    """Target-side distribution for one client."""

    family_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    radius_mean: float = 5.5
    radius_rel_spread: float = 0.18
    pos_center: tuple[float, float] = (0.5, 0.5)
    pos_sigma: float = 0.16
    class_priors: tuple[float, ...] = (0.5, 0.5)
    freq_lo: float = 2.0
    freq_hi: float = 4.0

    def __post_init__(self):
        w = np.asarray(self.family_weights, dtype=np.float64)
        if w.shape != (3,) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"family_weights must be 3 non-negative values summing to 1, got {self.family_weights}")
        p = np.asarray(self.class_priors, dtype=np.float64)
        if p.ndim != 1 or p.size < 2 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"class_priors must be >=2 non-negative values summing to 1, got {self.class_priors}")
        if self.radius_mean <= 0 or self.radius_rel_spread < 0:
            raise ValueError("radius parameters out of range")
        if not (0 < self.freq_lo <= self.freq_hi):
            raise ValueError("need 0 < freq_lo <= freq_hi")


# Per-client endpoints reached at delta = 1. Client k beyond the table cycles.
_STYLE_BASE = StyleParams(gain=1.0, bias=0.0, gamma=1.0, noise_sigma=0.05, texture_amp=0.10)
_STYLE_EXTREMES = (
    StyleParams(gain=1.00, bias=0.00, gamma=1.00, noise_sigma=0.04, texture_amp=0.05),
    StyleParams(gain=0.55, bias=0.28, gamma=0.55, noise_sigma=0.14, texture_amp=0.18),
    StyleParams(gain=1.45, bias=-0.10, gamma=2.20, noise_sigma=0.08, texture_amp=0.12),
    StyleParams(gain=0.70, bias=0.18, gamma=1.60, noise_sigma=0.18, texture_amp=0.22),
)

_CONTENT_BASE = ContentParams()
_CONTENT_EXTREMES = (
    ContentParams(family_weights=(0.85, 0.10, 0.05), radius_mean=3.6, pos_center=(0.32, 0.32),
                  pos_sigma=0.07, class_priors=(0.8, 0.2), freq_lo=1.5, freq_hi=2.8),
    ContentParams(family_weights=(0.10, 0.85, 0.05), radius_mean=5.0, pos_center=(0.68, 0.34),
                  pos_sigma=0.07, class_priors=(0.65, 0.35), freq_lo=2.0, freq_hi=3.5),
    ContentParams(family_weights=(0.05, 0.05, 0.90), radius_mean=6.5, pos_center=(0.34, 0.66),
                  pos_sigma=0.07, class_priors=(0.35, 0.65), freq_lo=2.5, freq_hi=4.5),
    ContentParams(family_weights=(0.30, 0.20, 0.50), radius_mean=8.2, pos_center=(0.62, 0.64),
                  pos_sigma=0.08, class_priors=(0.2, 0.8), freq_lo=3.5, freq_hi=6.0),
)


def _lerp(a: float, b: float, t: float) -> float:
    return (1.0 - t) * a + t * b


def _lerp_tuple(a, b, t):
    return tuple(_lerp(x, y, t) for x, y in zip(a, b))


def _style_at(delta: float, k: int) -> StyleParams:
    e = _STYLE_EXTREMES[k % len(_STYLE_EXTREMES)]
    b = _STYLE_BASE
    return StyleParams(
        gain=_lerp(b.gain, e.gain, delta),
        bias=_lerp(b.bias, e.bias, delta),
        gamma=_lerp(b.gamma, e.gamma, delta),
        noise_sigma=_lerp(b.noise_sigma, e.noise_sigma, delta),
        texture_amp=_lerp(b.texture_amp, e.texture_amp, delta),
    )


def _priors_at(base: tuple[float, ...], extreme: tuple[float, float], delta: float, n_classes: int):
    if n_classes == 2:
        return _lerp_tuple(base, extreme, delta)
    # More classes: tilt the uniform prior toward the same skew direction.
    tilt = np.linspace(extreme[0], extreme[-1], n_classes)
    tilt = tilt / tilt.sum()
    return tuple(_lerp_tuple(base, tuple(tilt), delta))


def _content_at(delta: float, k: int, n_classes: int) -> ContentParams:
    e = _CONTENT_EXTREMES[k % len(_CONTENT_EXTREMES)]
    b = _CONTENT_BASE
    base_priors = tuple(1.0 / n_classes for _ in range(n_classes))
    return ContentParams(
        family_weights=_lerp_tuple(b.family_weights, e.family_weights, delta),
        radius_mean=_lerp(b.radius_mean, e.radius_mean, delta),
        radius_rel_spread=_lerp(b.radius_rel_spread, e.radius_rel_spread, delta),
        pos_center=_lerp_tuple(b.pos_center, e.pos_center, delta),
        pos_sigma=_lerp(b.pos_sigma, e.pos_sigma, delta),
        class_priors=_priors_at(base_priors, e.class_priors, delta, n_classes),
        freq_lo=_lerp(b.freq_lo, e.freq_lo, delta),
        freq_hi=_lerp(b.freq_hi, e.freq_hi, delta),
    )


@dataclass(frozen=True)
class ShiftProfile:
    """Per-client style and content parameters plus the dials that made them."""

    delta_style: float
    delta_content: float
    style: tuple[StyleParams, ...]
    content: tuple[ContentParams, ...]

    def __post_init__(self):
        for name, d in (("delta_style", self.delta_style), ("delta_content", self.delta_content)):
            if not (0.0 <= d <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {d}")
        if len(self.style) != len(self.content):
            raise ValueError("style and content lists must have one entry per client")
        if self.delta_style == 0.0 and len(set(self.style)) > 1:
            raise ValueError("delta_style = 0 requires identical style params for all clients")
        if self.delta_content == 0.0 and len(set(self.content)) > 1:
            raise ValueError("delta_content = 0 requires identical content params for all clients")

    @staticmethod
    def from_deltas(delta_style: float, delta_content: float, k: int, n_classes: int = 2) -> "ShiftProfile":
        if k < 1:
            raise ValueError(f"need at least one client, got k={k}")
        return ShiftProfile(
            delta_style=float(delta_style),
            delta_content=float(delta_content),
            style=tuple(_style_at(float(delta_style), i) for i in range(k)),
            content=tuple(_content_at(float(delta_content), i, n_classes) for i in range(k)),
        )


@dataclass(frozen=True)
class FederationSpec:
    """Everything needed to regenerate a federation deterministically."""

    task: str                      # "seg" or "cls"
    shift: ShiftProfile
    master_seed: int
    n_per_client: tuple[int, ...] = DEFAULT_CLIENT_SIZES
    h: int = 32
    w: int = 32
    c: int = 1
    n_classes: int = 2

    def __post_init__(self):
        if self.task not in ("seg", "cls"):
            raise ValueError(f"task must be 'seg' or 'cls', got {self.task!r}")
        if len(self.n_per_client) != self.k:
            raise ValueError("n_per_client length must match the shift profile's client count")
        if any(n < 10 for n in self.n_per_client):
            raise ValueError("each client needs at least 10 samples to split")
        if self.h < 8 or self.w < 8:
            raise ValueError("images must be at least 8x8")
        if self.c != 1:
            raise ValueError("only single-channel images are supported")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def k(self) -> int:
        return len(self.shift.style)


@dataclass
class ClientDataset:
    """One client's arrays and index splits.

    Images are (N, C, H, W) float64 in [0, 1]. Targets are (N, H, W) masks in
    {0, 1} for segmentation or (N,) labels for classification, stored float64.
    """

    client_id: int
    images: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def n_train(self) -> int:
        return int(self.train_idx.size)


def split_sizes(n: int, test_fraction: float = 0.1, n_test: int | None = None) -> tuple[int, int, int]:
    """(test, train, val) counts: test first, then 85/15 of the remainder.

    Both the test count and the train count round down.
    """
    if n_test is None:
        n_test = math.floor(n * test_fraction)
    if not (0 <= n_test < n):
        raise ValueError(f"test count {n_test} out of range for n={n}")
    rem = n - n_test
    n_train = math.floor(rem * 0.85)
    return n_test, n_train, rem - n_train


# --------------------------------------------------------------------------
# Rendering

def _grids(h: int, w: int):
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return yy, xx


def _shape_mask(h: int, w: int, family: str, cy: float, cx: float, radius: float,
                rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grids(h, w)
    dy = yy - cy
    dx = xx - cx
    if family == "ellipse":
        aspect = rng.uniform(0.7, 1.4)
        phi = rng.uniform(0.0, np.pi)
        c, s = np.cos(phi), np.sin(phi)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / (radius * aspect)) ** 2 + (v / (radius / aspect)) ** 2 <= 1.0
    if family == "star":
        m = int(rng.integers(5, 8))
        phi = rng.uniform(0.0, 2 * np.pi)
        theta = np.arctan2(dy, dx)
        r_theta = radius * (0.75 + 0.35 * np.cos(m * theta + phi))
        return np.hypot(dx, dy) <= r_theta
    if family == "crescent":
        phi = rng.uniform(0.0, 2 * np.pi)
        oy = cy + 0.55 * radius * np.sin(phi)
        ox = cx + 0.55 * radius * np.cos(phi)
        disk = np.hypot(dx, dy) <= radius
        bite = np.hypot(yy - oy, xx - ox) <= 0.8 * radius
        return disk & ~bite
    raise ValueError(f"unknown shape family {family!r}")


def _texture_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth zero-mean field in roughly [-1, 1] from three random sinusoids."""
    yy, xx = _grids(h, w)
    field = np.zeros((h, w))
    for _ in range(3):
        fy = rng.uniform(0.5, 3.0)
        fx = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return field / 3.0


def apply_style(clean: np.ndarray, style: StyleParams, rng: np.random.Generator) -> np.ndarray:
    """gain -> bias -> gamma -> additive Gaussian noise -> clip to [0, 1].

    Background texture is added before the gain so it is shaped by the same
    intensity map as the scene. Negative values are floored before the gamma
    power; the final clip bounds the output.
    """
    x = clean
    if style.texture_amp > 0:
        x = x + style.texture_amp * _texture_field(x.shape[-2], x.shape[-1], rng)
    x = x * style.gain
    x = x + style.bias
    x = np.clip(x, 0.0, None) ** style.gamma
    if style.noise_sigma > 0:
        x = x + style.noise_sigma * rng.standard_normal(size=x.shape)
    return ensure_finite(np.clip(x, 0.0, 1.0), "styled image")


def render_seg_sample(spec: FederationSpec, client_id: int, stream: RngStream,
                      styled: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair for a client; styled=False returns the clean render.

    The mask is the exact support of the rendered lesion and never depends on
    style parameters. Content draws happen before style draws on the stream.
    Families carry distinct intensity profiles (bright ellipse, mid star,
    faint rimmed crescent), so shifting the family mixture moves the local
    appearance-to-label rule and not only the pixel statistics.
    """
    content = spec.shift.content[client_id]
    rng = stream.gen
    h, w = spec.h, spec.w
    family = SHAPE_FAMILIES[rng.choice(3, p=np.asarray(content.family_weights))]
    radius = content.radius_mean * (1.0 + content.radius_rel_spread * rng.uniform(-1.0, 1.0))
    radius = float(np.clip(radius, 2.0, min(h, w) / 2.5))
    cy = float(np.clip(rng.normal(content.pos_center[0] * h, content.pos_sigma * h), radius, h - 1 - radius))
    cx = float(np.clip(rng.normal(content.pos_center[1] * w, content.pos_sigma * w), radius, w - 1 - radius))
    mask = _shape_mask(h, w, family, cy, cx, radius, rng)
    clean = np.full((h, w), 0.30)
    if family == "ellipse":
        clean[mask] = rng.uniform(0.58, 0.70)
    elif family == "star":
        clean[mask] = rng.uniform(0.55, 0.66)
    else:
        # crescents are faint: the interior sits inside the background
        # texture band and only a one-pixel rim is unambiguous, so clients
        # with different family mixtures disagree on what dim pixels mean
        clean[mask] = rng.uniform(0.34, 0.41)
        core = mask.copy()
        for axis in (0, 1):
            for shift in (1, -1):
                core &= np.roll(mask, shift, axis=axis)
        clean[mask & ~core] = rng.uniform(0.66, 0.74)
    clean = clean[None, :, :]
    if not styled:
        return clean, mask.astype(np.float64)
    image = apply_style(clean, spec.shift.style[client_id], rng)
    return image, mask.astype(np.float64)


def render_cls_sample(spec: FederationSpec, client_id: int, stream: RngStream,
                      styled: bool = True) -> tuple[np.ndarray, int]:
    """One (image, label) pair: oriented gratings, label = orientation class.

    Even labels run horizontally, odd labels vertically; extra classes beyond
    two alternate orientation with a distinct frequency band.
    """
    content = spec.shift.content[client_id]
    rng = stream.gen
    h, w = spec.h, spec.w
    label = int(rng.choice(spec.n_classes, p=np.asarray(content.class_priors)))
    freq = rng.uniform(content.freq_lo, content.freq_hi) * (1.0 + 0.5 * (label // 2))
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = _grids(h, w)
    coord = yy / h if label % 2 == 0 else xx / w
    clean = (0.5 + 0.18 * np.sin(2 * np.pi * freq * coord + phase))[None, :, :]
    if not styled:
        return clean, label
    image = apply_style(clean, spec.shift.style[client_id], rng)
    return image, label


def make_federation(spec: FederationSpec) -> list[ClientDataset]:
    """Render every client's samples and fix the index splits.

    The test indices come first from a permutation keyed only by
    (master_seed, client), so they are identical whatever the shift dials say.
    """
    datasets = []
    render = render_seg_sample if spec.task == "seg" else render_cls_sample
    for k in range(spec.k):
        n = spec.n_per_client[k]
        images = np.empty((n, spec.c, spec.h, spec.w))
        if spec.task == "seg":
            targets = np.empty((n, spec.h, spec.w))
        else:
            targets = np.empty((n,))
        for i in range(n):
            stream = rng_derive(spec.master_seed, (k, i, "sample"))
            images[i], targets[i] = render(spec, k, stream)
        n_test, n_train, _ = split_sizes(n)
        perm = rng_derive(spec.master_seed, (k, 0, "split")).gen.permutation(n)
        test_idx = np.sort(perm[:n_test])
        train_idx = np.sort(perm[n_test:n_test + n_train])
        val_idx = np.sort(perm[n_test + n_train:])
        datasets.append(ClientDataset(k, images, targets, train_idx, val_idx, test_idx))
    return datasets


# --------------------------------------------------------------------------
# Persistence: manifest.json plus raw little-endian float64 arrays.

def _spec_to_dict(spec: FederationSpec) -> dict:
    d = asdict(spec)
    d["shift"]["style"] = [asdict(s) for s in spec.shift.style]
    d["shift"]["content"] = [asdict(c) for c in spec.shift.content]
    return d


def _spec_from_dict(d: dict) -> FederationSpec:
    shift = d["shift"]
    style = tuple(StyleParams(**s) for s in shift["style"])
    content = tuple(
        ContentParams(
            family_weights=tuple(c["family_weights"]),
            radius_mean=c["radius_mean"],
            radius_rel_spread=c["radius_rel_spread"],
            pos_center=tuple(c["pos_center"]),
            pos_sigma=c["pos_sigma"],
            class_priors=tuple(c["class_priors"]),
            freq_lo=c["freq_lo"],
            freq_hi=c["freq_hi"],
        )
        for c in shift["content"]
    )
    profile = ShiftProfile(shift["delta_style"], shift["delta_content"], style, content)
    return FederationSpec(
        task=d["task"],
        shift=profile,
        master_seed=d["master_seed"],
        n_per_client=tuple(d["n_per_client"]),
        h=d["h"], w=d["w"], c=d["c"],
        n_classes=d["n_classes"],
    )


def _write_f64(path: Path, arr: np.ndarray):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise LoadError(f"missing data file {path.name}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise LoadError(f"{path.name}: expected {expected} float64 values, found {raw.size}")
    return raw.reshape(shape).astype(np.float64)


def persist_federation(datasets: list[ClientDataset], spec: FederationSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients = []
    for ds in datasets:
        img_name = f"client_{ds.client_id}_images.f64"
        tgt_name = f"client_{ds.client_id}_targets.f64"
        _write_f64(out / img_name, ds.images)
        _write_f64(out / tgt_name, ds.targets)
        clients.append({
            "client_id": ds.client_id,
            "images_file": img_name,
            "targets_file": tgt_name,
            "images_shape": list(ds.images.shape),
            "targets_shape": list(ds.targets.shape),
            "train_idx": ds.train_idx.tolist(),
            "val_idx": ds.val_idx.tolist(),
            "test_idx": ds.test_idx.tolist(),
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": _spec_to_dict(spec),
        "clients": clients,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_federation(in_dir) -> tuple[list[ClientDataset], FederationSpec]:
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise LoadError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest.json is not valid JSON: {exc}") from exc
    for field_name in ("format_version", "spec", "clients"):
        if field_name not in manifest:
            raise LoadError(f"manifest missing field '{field_name}'")
    if manifest["format_version"] != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {manifest['format_version']!r}")
    try:
        spec = _spec_from_dict(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"manifest field 'spec' is malformed: {exc}") from exc
    datasets = []
    for entry in manifest["clients"]:
        for field_name in ("client_id", "images_file", "targets_file", "images_shape",
                           "targets_shape", "train_idx", "val_idx", "test_idx"):
            if field_name not in entry:
                raise LoadError(f"client entry missing field '{field_name}'")
        images = _read_f64(root / entry["images_file"], tuple(entry["images_shape"]))
        targets = _read_f64(root / entry["targets_file"], tuple(entry["targets_shape"]))
        n = images.shape[0]
        idx = {}
        for split in ("train_idx", "val_idx", "test_idx"):
            arr = np.asarray(entry[split], dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise LoadError(f"client {entry['client_id']}: field '{split}' indexes out of range")
            idx[split] = arr
        datasets.append(ClientDataset(int(entry["client_id"]), images, targets,
                                      idx["train_idx"], idx["val_idx"], idx["test_idx"]))
    datasets.sort(key=lambda d: d.client_id)
    return datasets, spec
