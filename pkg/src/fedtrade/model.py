"""Small models with hand-written reverse-mode gradients.

Three architectures (linear classifier, two-layer batch-norm MLP, two-level
encoder-decoder segmenter) over a common ParamSet whose entries carry a
partition tag: body, head, norm_affine, or norm_stats. Gradients are derived
by hand and checked against the finite-difference oracle in numerics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .numerics import finite_diff_grad, rng_derive

PARTITION_TAGS = ("body", "head", "norm_affine", "norm_stats")
GRAD_TAGS = ("body", "head", "norm_affine")

ARCHS = ("logreg", "mlp_bn", "tiny_convseg")
LOSS_KINDS = ("bce_logits", "softmax_ce")

_BN_EPS = 1e-12
_BN_MOMENTUM = 0.1

CHECKPOINT_FORMAT = "fedtrade-params-v1"


class ParamSet:
    """Named float64 arrays with partition tags, iterated in name order."""

    __slots__ = ("values", "tags")

    def __init__(self, values: dict[str, np.ndarray], tags: dict[str, str]):
        if set(values) != set(tags):
            raise ValueError("values and tags must cover the same names")
        for name, tag in tags.items():
            if tag not in PARTITION_TAGS:
                raise ValueError(f"{name}: unknown partition tag {tag!r}")
        self.values = {name: np.asarray(values[name], dtype=np.float64) for name in sorted(values)}
        self.tags = {name: tags[name] for name in sorted(tags)}

    def clone(self) -> "ParamSet":
        return ParamSet({n: v.copy() for n, v in self.values.items()}, dict(self.tags))

    def names(self) -> list[str]:
        return list(self.values)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def merge_from(self, other: "ParamSet", tags) -> "ParamSet":
        """New set taking tagged entries from `other`, the rest from self."""
        tags = set(tags)
        values = {}
        for name, tag in self.tags.items():
            src = other if tag in tags else self
            values[name] = src.values[name].copy()
        return ParamSet(values, dict(self.tags))


def partition_filter(params: ParamSet, tags) -> ParamSet:
    """Sub-ParamSet containing only the entries whose tag is in `tags`."""
    tags = set(tags)
    bad = tags - set(PARTITION_TAGS)
    if bad:
        raise ValueError(f"unknown partition tags {sorted(bad)}")
    names = [n for n, t in params.tags.items() if t in tags]
    return ParamSet({n: params.values[n].copy() for n in names},
                    {n: params.tags[n] for n in names})


def param_axpy(a: float, x: ParamSet, b: float, y: ParamSet) -> ParamSet:
    """a * x + b * y over matching names."""
    if x.names() != y.names():
        raise ValueError("param_axpy: name sets differ")
    return ParamSet({n: a * x.values[n] + b * y.values[n] for n in x.values}, dict(x.tags))


def param_diff(x: ParamSet, y: ParamSet) -> ParamSet:
    return param_axpy(1.0, x, -1.0, y)


def param_norm_sq(params: ParamSet) -> float:
    return float(sum(np.sum(v * v) for v in params.values.values()))


def param_zeros_like(params: ParamSet, tags=GRAD_TAGS) -> ParamSet:
    sub = partition_filter(params, tags)
    return ParamSet({n: np.zeros_like(v) for n, v in sub.values.items()}, dict(sub.tags))


def params_equal(x: ParamSet, y: ParamSet) -> bool:
    """Bit-level equality over matching names."""
    if x.names() != y.names():
        return False
    return all(np.array_equal(x.values[n], y.values[n]) for n in x.values)


def params_allclose(x: ParamSet, y: ParamSet, atol: float = 0.0, rtol: float = 1e-12) -> bool:
    if x.names() != y.names():
        return False
    return all(np.allclose(x.values[n], y.values[n], atol=atol, rtol=rtol) for n in x.values)


def sgd_step(theta: ParamSet, grad: ParamSet, lr: float) -> ParamSet:
    """theta - lr * grad on the gradient's entries; norm stats carry over."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, tag in grad.tags.items():
        if name not in theta:
            raise ValueError(f"gradient entry {name!r} not in parameters")
        if tag == "norm_stats":
            raise ValueError("gradients must not carry norm_stats entries")
    values = {}
    for name, v in theta.values.items():
        if name in grad:
            values[name] = v - lr * grad.values[name]
        else:
            values[name] = v.copy()
    return ParamSet(values, dict(theta.tags))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and dimensions; in_shape is (d,) or (c, h, w)."""

    arch: str
    in_shape: tuple[int, ...]
    out_dim: int = 1
    hidden: tuple[int, int] = (32, 16)
    channels: int = 4
    hook_tag: str | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; valid: {', '.join(ARCHS)}")
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")
        if self.arch in ("logreg", "mlp_bn"):
            if len(self.in_shape) != 1 or self.in_shape[0] < 1:
                raise ValueError(f"{self.arch} needs in_shape (d,), got {self.in_shape}")
            if self.arch == "mlp_bn" and (len(self.hidden) != 2 or min(self.hidden) < 1):
                raise ValueError("mlp_bn needs two positive hidden sizes")
        else:
            if len(self.in_shape) != 3:
                raise ValueError(f"tiny_convseg needs in_shape (c, h, w), got {self.in_shape}")
            _, h, w = self.in_shape
            if h % 2 or w % 2:
                raise ValueError("tiny_convseg needs even spatial dimensions for pooling")
            if self.channels < 1:
                raise ValueError("channels must be >= 1")
        if self.hook_tag is not None and self.hook_tag not in hook_sites(self.arch):
            raise ValueError(f"hook_tag {self.hook_tag!r} not in {hook_sites(self.arch)}")

    def default_hook_tag(self) -> str | None:
        if self.hook_tag is not None:
            return self.hook_tag
        sites = hook_sites(self.arch)
        return sites[0] if sites else None


def hook_sites(arch: str) -> tuple[str, ...]:
    if arch == "mlp_bn":
        return ("hidden1", "hidden2")
    if arch == "tiny_convseg":
        return ("enc1", "bottleneck", "dec")
    return ()


def has_norm_layers(spec: ModelSpec) -> bool:
    return spec.arch in ("mlp_bn", "tiny_convseg")


def _bn_param_entries(prefix: str, width: int, values, tags):
    values[f"{prefix}.gamma"] = np.ones(width)
    values[f"{prefix}.beta"] = np.zeros(width)
    values[f"{prefix}.mean"] = np.zeros(width)
    values[f"{prefix}.var"] = np.ones(width)
    tags[f"{prefix}.gamma"] = "norm_affine"
    tags[f"{prefix}.beta"] = "norm_affine"
    tags[f"{prefix}.mean"] = "norm_stats"
    tags[f"{prefix}.var"] = "norm_stats"


def init_params(spec: ModelSpec, master_seed: int) -> ParamSet:
    """Uniform(-s, s) with s = 1 / sqrt(fan_in), one stream per layer."""
    values: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    if spec.arch == "logreg":
        d = spec.in_shape[0]
        gen = rng_derive(master_seed, (0, 0, "init/head")).gen
        s = 1.0 / np.sqrt(d)
        values["head.w"] = gen.uniform(-s, s, size=(d, spec.out_dim))
        values["head.b"] = gen.uniform(-s, s, size=(spec.out_dim,))
        tags["head.w"] = tags["head.b"] = "head"
    elif spec.arch == "mlp_bn":
        d = spec.in_shape[0]
        h1, h2 = spec.hidden
        for name, shape, fan, tag in (
            ("fc1", (d, h1), d, "body"),
            ("fc2", (h1, h2), h1, "body"),
            ("head", (h2, spec.out_dim), h2, "head"),
        ):
            gen = rng_derive(master_seed, (0, 0, f"init/{name}")).gen
            s = 1.0 / np.sqrt(fan)
            values[f"{name}.w"] = gen.uniform(-s, s, size=shape)
            values[f"{name}.b"] = gen.uniform(-s, s, size=(shape[1],))
            tags[f"{name}.w"] = tags[f"{name}.b"] = tag
        _bn_param_entries("bn1", h1, values, tags)
        _bn_param_entries("bn2", h2, values, tags)
    else:
        c = spec.in_shape[0] + 2  # two coordinate channels join the input
        f = spec.channels
        for name, shape, fan, tag in (
            ("enc1", (f, c, 3, 3), c * 9, "body"),
            ("enc2", (2 * f, f, 3, 3), f * 9, "body"),
            ("dec", (f, 3 * f, 3, 3), 3 * f * 9, "body"),
            ("head", (spec.out_dim, f), f, "head"),
        ):
            gen = rng_derive(master_seed, (0, 0, f"init/{name}")).gen
            s = 1.0 / np.sqrt(fan)
            values[f"{name}.w"] = gen.uniform(-s, s, size=shape)
            values[f"{name}.b"] = gen.uniform(-s, s, size=(shape[0],))
            tags[f"{name}.w"] = tags[f"{name}.b"] = tag
        _bn_param_entries("bn1", f, values, tags)
        _bn_param_entries("bn2", 2 * f, values, tags)
        _bn_param_entries("bn3", f, values, tags)
        if spec.out_dim == 1:
            # sparse-positive dense output: start the logit low so the
            # background gradient flood cannot drown the early lesion signal
            values["head.b"] = np.full(1, -2.0)
    return ParamSet(values, tags)


# --------------------------------------------------------------------------
# Layer primitives

def _bn_fwd(x, gamma, beta, run_mean, run_var, mode, update_stats, conv):
    axes = (0, 2, 3) if conv else (0,)
    bshape = (1, -1, 1, 1) if conv else (1, -1)
    if mode == "train":
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            run_mean *= 1.0 - _BN_MOMENTUM
            run_mean += _BN_MOMENTUM * mu
            run_var *= 1.0 - _BN_MOMENTUM
            run_var += _BN_MOMENTUM * var
    else:
        mu, var = run_mean, run_var
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    n = int(np.prod([x.shape[a] for a in axes]))
    return out, (xhat, inv, gamma, mode, axes, bshape, n)


def _bn_bwd(dout, cache):
    xhat, inv, gamma, mode, axes, bshape, n = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    scale = (gamma * inv).reshape(bshape)
    if mode == "train":
        mean_d = dout.mean(axis=axes).reshape(bshape)
        mean_dx = (dout * xhat).mean(axis=axes).reshape(bshape)
        dx = scale * (dout - mean_d - xhat * mean_dx)
    else:
        dx = scale * dout
    return dx, dgamma, dbeta


def _im2col3(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[:, :, k] = xp[:, :, di:di + h, dj:dj + w]
            k += 1
    return cols.reshape(b, c * 9, h * w).transpose(0, 2, 1)


def _with_coords(x):
    """Append normalized row/column channels so spatial priors are learnable."""
    b, _, h, w = x.shape
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    coords = np.broadcast_to(np.stack([yy, xx])[None], (b, 2, h, w))
    return np.concatenate([x, coords], axis=1)


def _conv3_fwd(x, w, bias):
    b, _, h, wd = x.shape
    f = w.shape[0]
    cols = _im2col3(x)
    y = cols @ w.reshape(f, -1).T + bias
    return y.transpose(0, 2, 1).reshape(b, f, h, wd), cols


def _conv3_bwd(dy, cols, w, x_shape):
    b, c, h, wd = x_shape
    f = w.shape[0]
    dym = dy.reshape(b, f, h * wd).transpose(0, 2, 1)
    dw = np.tensordot(dym, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = dym @ w.reshape(f, -1)
    dcols = dcols.transpose(0, 2, 1).reshape(b, c, 9, h, wd)
    dxp = np.zeros((b, c, h + 2, wd + 2))
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di:di + h, dj:dj + wd] += dcols[:, :, k]
            k += 1
    return dxp[:, :, 1:1 + h, 1:1 + wd], dw, db


def _conv1_fwd(x, w, bias):
    return np.einsum("bchw,oc->bohw", x, w) + bias.reshape(1, -1, 1, 1)


def _conv1_bwd(dy, x, w):
    dx = np.einsum("bohw,oc->bchw", dy, w)
    dw = np.einsum("bohw,bchw->oc", dy, x)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def _pool_fwd(x):
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_bwd(dout, arg, x_shape):
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    return dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def _upsample_fwd(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_bwd(dout):
    b, c, h, w = dout.shape
    return dout.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _apply_hook(tag, feats, hooks, cache):
    if hooks and tag in hooks:
        feats, scale = hooks[tag](feats)
        cache[f"hookscale/{tag}"] = scale
    return feats


def _hook_scale(tag, grad, cache):
    key = f"hookscale/{tag}"
    return grad * cache[key] if key in cache else grad


# --------------------------------------------------------------------------
# Architecture graphs

def forward(spec: ModelSpec, params: ParamSet, x, mode: str = "eval", hooks=None,
            update_stats: bool | None = None):
    """Logits and a backward cache.

    Train mode normalizes with batch statistics and, unless update_stats is
    False, updates the running stats in place (momentum 0.1). Eval mode uses
    running stats, so per-sample outputs do not depend on batch composition.
    Hooks fire at named sites: hooks[tag](feats) -> (feats', backward_scale).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if update_stats is None:
        update_stats = mode == "train"
    x = np.asarray(x, dtype=np.float64)
    v = params.values
    cache: dict = {"mode": mode}
    if spec.arch == "logreg":
        if x.ndim != 2:
            raise ValueError(f"logreg expects (B, d) input, got {x.shape}")
        cache["x"] = x
        return x @ v["head.w"] + v["head.b"], cache
    if spec.arch == "mlp_bn":
        if x.ndim != 2:
            raise ValueError(f"mlp_bn expects (B, d) input, got {x.shape}")
        cache["x"] = x
        z1 = x @ v["fc1.w"] + v["fc1.b"]
        bn1, cache["bn1"] = _bn_fwd(z1, v["bn1.gamma"], v["bn1.beta"], v["bn1.mean"], v["bn1.var"],
                                    mode, update_stats, conv=False)
        cache["relu1"] = bn1 > 0
        a1 = _apply_hook("hidden1", np.maximum(bn1, 0.0), hooks, cache)
        cache["a1"] = a1
        z2 = a1 @ v["fc2.w"] + v["fc2.b"]
        bn2, cache["bn2"] = _bn_fwd(z2, v["bn2.gamma"], v["bn2.beta"], v["bn2.mean"], v["bn2.var"],
                                    mode, update_stats, conv=False)
        cache["relu2"] = bn2 > 0
        a2 = _apply_hook("hidden2", np.maximum(bn2, 0.0), hooks, cache)
        cache["a2"] = a2
        return a2 @ v["head.w"] + v["head.b"], cache
    # tiny_convseg
    if x.ndim != 4:
        raise ValueError(f"tiny_convseg expects (B, c, h, w) input, got {x.shape}")
    x = _with_coords(x)
    cache["x_shape"] = x.shape
    y1, cache["cols1"] = _conv3_fwd(x, v["enc1.w"], v["enc1.b"])
    bn1, cache["bn1"] = _bn_fwd(y1, v["bn1.gamma"], v["bn1.beta"], v["bn1.mean"], v["bn1.var"],
                                mode, update_stats, conv=True)
    cache["relu1"] = bn1 > 0
    h1 = _apply_hook("enc1", np.maximum(bn1, 0.0), hooks, cache)
    cache["h1_shape"] = h1.shape
    p, cache["poolarg"] = _pool_fwd(h1)
    cache["p_shape"] = p.shape
    y2, cache["cols2"] = _conv3_fwd(p, v["enc2.w"], v["enc2.b"])
    bn2, cache["bn2"] = _bn_fwd(y2, v["bn2.gamma"], v["bn2.beta"], v["bn2.mean"], v["bn2.var"],
                                mode, update_stats, conv=True)
    cache["relu2"] = bn2 > 0
    h2 = _apply_hook("bottleneck", np.maximum(bn2, 0.0), hooks, cache)
    u = _upsample_fwd(h2)
    cache["split"] = u.shape[1]
    cat = np.concatenate([u, h1], axis=1)
    cache["cat_shape"] = cat.shape
    y3, cache["cols3"] = _conv3_fwd(cat, v["dec.w"], v["dec.b"])
    bn3, cache["bn3"] = _bn_fwd(y3, v["bn3.gamma"], v["bn3.beta"], v["bn3.mean"], v["bn3.var"],
                                mode, update_stats, conv=True)
    cache["relu3"] = bn3 > 0
    h3 = _apply_hook("dec", np.maximum(bn3, 0.0), hooks, cache)
    cache["h3"] = h3
    return _conv1_fwd(h3, v["head.w"], v["head.b"]), cache


def _backward(spec: ModelSpec, params: ParamSet, cache, dlogits) -> dict[str, np.ndarray]:
    v = params.values
    g: dict[str, np.ndarray] = {}
    if spec.arch == "logreg":
        g["head.w"] = cache["x"].T @ dlogits
        g["head.b"] = dlogits.sum(axis=0)
        return g
    if spec.arch == "mlp_bn":
        g["head.w"] = cache["a2"].T @ dlogits
        g["head.b"] = dlogits.sum(axis=0)
        da2 = _hook_scale("hidden2", dlogits @ v["head.w"].T, cache)
        dz2, g["bn2.gamma"], g["bn2.beta"] = _bn_bwd(da2 * cache["relu2"], cache["bn2"])
        g["fc2.w"] = cache["a1"].T @ dz2
        g["fc2.b"] = dz2.sum(axis=0)
        da1 = _hook_scale("hidden1", dz2 @ v["fc2.w"].T, cache)
        dz1, g["bn1.gamma"], g["bn1.beta"] = _bn_bwd(da1 * cache["relu1"], cache["bn1"])
        g["fc1.w"] = cache["x"].T @ dz1
        g["fc1.b"] = dz1.sum(axis=0)
        return g
    dh3, g["head.w"], g["head.b"] = _conv1_bwd(dlogits, cache["h3"], v["head.w"])
    dh3 = _hook_scale("dec", dh3, cache)
    dy3, g["bn3.gamma"], g["bn3.beta"] = _bn_bwd(dh3 * cache["relu3"], cache["bn3"])
    dcat, g["dec.w"], g["dec.b"] = _conv3_bwd(dy3, cache["cols3"], v["dec.w"], cache["cat_shape"])
    split = cache["split"]
    du, dh1_skip = dcat[:, :split], dcat[:, split:]
    dh2 = _hook_scale("bottleneck", _upsample_bwd(du), cache)
    dy2, g["bn2.gamma"], g["bn2.beta"] = _bn_bwd(dh2 * cache["relu2"], cache["bn2"])
    dp, g["enc2.w"], g["enc2.b"] = _conv3_bwd(dy2, cache["cols2"], v["enc2.w"], cache["p_shape"])
    dh1 = dh1_skip + _pool_bwd(dp, cache["poolarg"], cache["h1_shape"])
    dh1 = _hook_scale("enc1", dh1, cache)
    dy1, g["bn1.gamma"], g["bn1.beta"] = _bn_bwd(dh1 * cache["relu1"], cache["bn1"])
    _, g["enc1.w"], g["enc1.b"] = _conv3_bwd(dy1, cache["cols1"], v["enc1.w"], cache["x_shape"])
    return g


# --------------------------------------------------------------------------
# Losses (mean reduction over elements)

def _squeeze_logits(logits):
    if logits.ndim >= 2 and logits.shape[1] == 1:
        return logits[:, 0]
    return logits


def bce_logits_loss(logits, targets):
    """Stable binary cross-entropy with logits; targets in {0, 1}."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ")
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    dz = (expit(z) - y) / z.size
    return loss, dz


def softmax_ce_loss(logits, labels):
    """Cross-entropy over softmax with the class axis at position 1."""
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(labels)
    if z.ndim < 2 or z.shape[1] < 2:
        raise ValueError(f"softmax_ce needs >= 2 classes on axis 1, got {z.shape}")
    lab = lab.astype(np.int64)
    if lab.shape != z.shape[:1] + z.shape[2:]:
        raise ValueError(f"labels {lab.shape} do not match logits {z.shape}")
    if lab.min() < 0 or lab.max() >= z.shape[1]:
        raise ValueError("labels out of class range")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=1, keepdims=True))
    z_true = np.take_along_axis(z, np.expand_dims(lab, 1), axis=1)
    n_sites = lab.size
    loss = float(np.sum(lse - z_true) / n_sites)
    classes = np.arange(z.shape[1]).reshape((1, -1) + (1,) * (z.ndim - 2))
    onehot = (np.expand_dims(lab, 1) == classes).astype(np.float64)
    dz = (np.exp(z - lse) - onehot) / n_sites
    return loss, dz


def _loss_from_logits(logits, y, loss_kind: str):
    if loss_kind == "bce_logits":
        squeezed = _squeeze_logits(logits)
        loss, dsq = bce_logits_loss(squeezed, y)
        return loss, dsq.reshape(logits.shape)
    if loss_kind == "softmax_ce":
        return softmax_ce_loss(logits, y)
    raise ValueError(f"unknown loss {loss_kind!r}; valid: {', '.join(LOSS_KINDS)}")


def loss_value(spec: ModelSpec, params: ParamSet, x, y, loss_kind: str,
               mode: str = "eval", hooks=None) -> float:
    """Loss without gradients; never touches running statistics."""
    logits, _ = forward(spec, params, x, mode=mode, hooks=hooks, update_stats=False)
    loss, _ = _loss_from_logits(logits, y, loss_kind)
    return loss


def loss_and_grad(spec: ModelSpec, params: ParamSet, x, y, loss_kind: str,
                  mode: str = "train", hooks=None, update_stats: bool | None = None):
    """Mean loss and its gradient ParamSet over body/head/norm_affine entries."""
    logits, cache = forward(spec, params, x, mode=mode, hooks=hooks, update_stats=update_stats)
    loss, dlogits = _loss_from_logits(logits, y, loss_kind)
    grads = _backward(spec, params, cache, dlogits)
    tags = {n: params.tags[n] for n in grads}
    return loss, ParamSet(grads, tags)


def predict(spec: ModelSpec, params: ParamSet, x, loss_kind: str) -> np.ndarray:
    """Hard predictions in eval mode: argmax for softmax, logit > 0 for bce."""
    logits, _ = forward(spec, params, x, mode="eval")
    if loss_kind == "softmax_ce":
        return np.argmax(logits, axis=1)
    return (_squeeze_logits(logits) > 0).astype(np.float64)


def gradient_check_error(spec: ModelSpec, params: ParamSet, x, y, loss_kind: str,
                         mode: str, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grad = loss_and_grad(spec, params, x, y, loss_kind, mode=mode, update_stats=False)
    arrays = {n: params.values[n] for n, t in params.tags.items() if t in GRAD_TAGS}

    def f(_):
        return loss_value(spec, params, x, y, loss_kind, mode=mode)

    fd = finite_diff_grad(f, arrays, h=h)
    worst = 0.0
    for name, g_fd in fd.items():
        g_an = grad.values[name]
        denom = np.maximum(np.maximum(np.abs(g_fd), np.abs(g_an)), 1e-6)
        worst = max(worst, float(np.max(np.abs(g_an - g_fd) / denom)))
    return worst


# --------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw little-endian float64 payload.

def save_params(params: ParamSet, path) -> Path:
    path = Path(path)
    names = params.names()
    header = {
        "format": CHECKPOINT_FORMAT,
        "names": names,
        "shapes": {n: list(params.values[n].shape) for n in names},
        "tags": params.tags,
        "dtype": "<f8",
    }
    payload = b"".join(np.ascontiguousarray(params.values[n], dtype="<f8").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode())
        fh.write(b"\n")
        fh.write(payload)
    return path


def load_params(path) -> ParamSet:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError("checkpoint has no header line")
    header = json.loads(raw[:newline])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    buf = raw[newline + 1:]
    values = {}
    offset = 0
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(buf):
            raise ValueError(f"checkpoint payload truncated at entry {name!r}")
        values[name] = np.frombuffer(buf[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise ValueError("checkpoint payload has trailing bytes")
    return ParamSet(values, dict(header["tags"]))
