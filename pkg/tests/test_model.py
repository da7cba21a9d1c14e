import zlib

import numpy as np
import pytest

from fedtrade.model import (
    GRAD_TAGS,
    ModelSpec,
    ParamSet,
    forward,
    gradient_check_error,
    has_norm_layers,
    hook_sites,
    init_params,
    load_params,
    loss_and_grad,
    loss_value,
    param_axpy,
    param_diff,
    param_norm_sq,
    param_zeros_like,
    params_equal,
    partition_filter,
    predict,
    save_params,
    sgd_step,
)
from fedtrade.numerics import finite_diff_grad

CASES = [
    (ModelSpec("logreg", (5,), out_dim=1), "bce_logits", (4, 5), "binary"),
    (ModelSpec("logreg", (5,), out_dim=3), "softmax_ce", (4, 5), "label3"),
    (ModelSpec("mlp_bn", (6,), out_dim=1, hidden=(5, 4)), "bce_logits", (4, 6), "binary"),
    (ModelSpec("mlp_bn", (6,), out_dim=3, hidden=(5, 4)), "softmax_ce", (4, 6), "label3"),
    (ModelSpec("tiny_convseg", (1, 8, 8), out_dim=1, channels=2), "bce_logits", (2, 1, 8, 8), "mask"),
    (ModelSpec("tiny_convseg", (1, 8, 8), out_dim=3, channels=2), "softmax_ce", (2, 1, 8, 8), "maskcls"),
]


def make_batch(rng, x_shape, target_kind, out_hw=None):
    x = rng.normal(size=x_shape)
    n = x_shape[0]
    if target_kind == "binary":
        y = rng.integers(0, 2, size=n).astype(np.float64)
    elif target_kind == "label3":
        y = rng.integers(0, 3, size=n)
    elif target_kind == "mask":
        y = rng.integers(0, 2, size=(n, *out_hw)).astype(np.float64)
    else:
        y = rng.integers(0, 3, size=(n, *out_hw))
    return x, y


class TestGradients:
    @pytest.mark.parametrize("spec,loss_kind,x_shape,target_kind", CASES,
                             ids=[f"{c[0].arch}-{c[1]}" for c in CASES])
    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_analytic_matches_finite_difference(self, spec, loss_kind, x_shape, target_kind, mode):
        rng = np.random.default_rng(zlib.crc32(f"{spec.arch}|{loss_kind}|{mode}".encode()))
        params = init_params(spec, master_seed=1)
        out_hw = x_shape[2:] if len(x_shape) == 4 else None
        x, y = make_batch(rng, x_shape, target_kind, out_hw)
        # move away from the relu kink region a bit
        if has_norm_layers(spec):
            for name in params.names():
                if name.endswith(".beta"):
                    params.values[name] += 0.05
        err = gradient_check_error(spec, params, x, y, loss_kind, mode=mode)
        assert err < 1e-4

    def test_hook_backward_scale(self):
        # multiplicative hook with a constant factor; scale must feed backward
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(4, 3))
        params = init_params(spec, master_seed=2)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 2, size=5)
        hooks = {"hidden1": lambda f: (1.7 * f, np.full_like(f, 1.7))}
        _, grad = loss_and_grad(spec, params, x, y, "softmax_ce", mode="train",
                                hooks=hooks, update_stats=False)
        arrays = {n: params.values[n] for n, t in params.tags.items() if t in GRAD_TAGS}
        fd = finite_diff_grad(
            lambda _: loss_value(spec, params, x, y, "softmax_ce", mode="train", hooks=hooks),
            arrays)
        for name, g_fd in fd.items():
            np.testing.assert_allclose(grad.values[name], g_fd, atol=1e-6)

    def test_loss_kind_validation(self):
        spec = ModelSpec("logreg", (3,), out_dim=1)
        params = init_params(spec, 0)
        with pytest.raises(ValueError, match="unknown loss"):
            loss_value(spec, params, np.zeros((2, 3)), np.zeros(2), "hinge")


class TestBatchNorm:
    def test_running_stats_momentum(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        params = init_params(spec, 3)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 2, size=8)
        z1 = x @ params["fc1.w"] + params["fc1.b"]
        want_mean = 0.9 * params["bn1.mean"] + 0.1 * z1.mean(axis=0)
        want_var = 0.9 * params["bn1.var"] + 0.1 * z1.var(axis=0)
        loss_and_grad(spec, params, x, y, "softmax_ce", mode="train")
        np.testing.assert_allclose(params["bn1.mean"], want_mean, atol=1e-12)
        np.testing.assert_allclose(params["bn1.var"], want_var, atol=1e-12)

    def test_loss_value_never_updates_stats(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        params = init_params(spec, 3)
        before = params.clone()
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 4))
        loss_value(spec, params, x, rng.integers(0, 2, size=8), "softmax_ce", mode="train")
        assert params_equal(params, before)

    def test_eval_output_independent_of_batch(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        params = init_params(spec, 4)
        rng = np.random.default_rng(2)
        xa, xb = rng.normal(size=(1, 4)), rng.normal(size=(3, 4))
        solo, _ = forward(spec, params, xa, mode="eval")
        joint, _ = forward(spec, params, np.vstack([xa, xb]), mode="eval")
        np.testing.assert_allclose(solo[0], joint[0], atol=1e-12)

    def test_train_output_depends_on_batch(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        params = init_params(spec, 4)
        rng = np.random.default_rng(2)
        xa, xb = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        solo, _ = forward(spec, params, xa, mode="train", update_stats=False)
        joint, _ = forward(spec, params, np.vstack([xa, xb]), mode="train", update_stats=False)
        assert not np.allclose(solo[0], joint[0])

    def test_logreg_has_no_norm_layers(self):
        assert not has_norm_layers(ModelSpec("logreg", (3,)))
        assert hook_sites("logreg") == ()


class TestParamOps:
    def small(self):
        return ParamSet(
            {"head.w": np.array([1.0, 2.0]), "body.w": np.array([[3.0]]),
             "bn.mean": np.array([0.5])},
            {"head.w": "head", "body.w": "body", "bn.mean": "norm_stats"})

    def test_merge_from_takes_tagged_entries(self):
        a, b = self.small(), self.small()
        b.values["head.w"][:] = 9.0
        b.values["body.w"][:] = 8.0
        merged = a.merge_from(b, ("head",))
        assert merged["head.w"][0] == 9.0
        assert merged["body.w"][0, 0] == 3.0
        # copies, not views
        merged.values["head.w"][0] = -1.0
        assert b["head.w"][0] == 9.0

    def test_partition_filter(self):
        sub = partition_filter(self.small(), ("head", "norm_stats"))
        assert sub.names() == ["bn.mean", "head.w"]
        with pytest.raises(ValueError, match="unknown partition tags"):
            partition_filter(self.small(), ("weights",))

    def test_axpy_and_diff(self):
        a, b = self.small(), self.small()
        out = param_axpy(2.0, a, -1.0, b)
        np.testing.assert_array_equal(out["head.w"], a["head.w"])
        assert param_norm_sq(param_diff(a, b)) == 0.0

    def test_axpy_name_mismatch(self):
        a = self.small()
        b = partition_filter(a, ("head",))
        with pytest.raises(ValueError, match="name sets differ"):
            param_axpy(1.0, a, 1.0, b)

    def test_zeros_like_defaults_to_grad_tags(self):
        z = param_zeros_like(self.small())
        assert "bn.mean" not in z
        assert param_norm_sq(z) == 0.0

    def test_tag_validation(self):
        with pytest.raises(ValueError, match="unknown partition tag"):
            ParamSet({"w": np.zeros(1)}, {"w": "misc"})
        with pytest.raises(ValueError, match="same names"):
            ParamSet({"w": np.zeros(1)}, {"v": "head"})


class TestSgdStep:
    def test_zero_lr_returns_equal_copy(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        theta = init_params(spec, 5)
        grad = param_zeros_like(theta)
        out = sgd_step(theta, grad, 0.0)
        assert params_equal(out, theta)
        assert out.values["fc1.w"] is not theta.values["fc1.w"]

    def test_only_grad_entries_move(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        theta = init_params(spec, 5)
        grad = param_zeros_like(theta, tags=("head",))
        grad.values["head.w"][:] = 1.0
        out = sgd_step(theta, grad, 0.1)
        np.testing.assert_allclose(out["head.w"], theta["head.w"] - 0.1, atol=1e-15)
        assert np.array_equal(out["fc1.w"], theta["fc1.w"])
        assert np.array_equal(out["bn1.mean"], theta["bn1.mean"])

    def test_rejects_norm_stats_gradient(self):
        spec = ModelSpec("mlp_bn", (4,), out_dim=2, hidden=(3, 3))
        theta = init_params(spec, 5)
        bad = partition_filter(theta, ("norm_stats",))
        with pytest.raises(ValueError, match="norm_stats"):
            sgd_step(theta, bad, 0.1)

    def test_rejects_negative_lr(self):
        spec = ModelSpec("logreg", (2,))
        theta = init_params(spec, 0)
        with pytest.raises(ValueError, match="non-negative"):
            sgd_step(theta, param_zeros_like(theta), -0.1)


class TestInit:
    @pytest.mark.parametrize("spec", [c[0] for c in CASES[:5:2]],
                             ids=["logreg", "mlp_bn", "tiny_convseg"])
    def test_deterministic(self, spec):
        assert params_equal(init_params(spec, 7), init_params(spec, 7))
        assert not params_equal(init_params(spec, 7), init_params(spec, 8))

    def test_fan_in_bounds(self):
        spec = ModelSpec("mlp_bn", (16,), out_dim=2, hidden=(8, 4))
        p = init_params(spec, 11)
        for name, fan in (("fc1.w", 16), ("fc2.w", 8), ("head.w", 4)):
            assert np.max(np.abs(p[name])) <= 1.0 / np.sqrt(fan)

    def test_norm_defaults(self):
        p = init_params(ModelSpec("tiny_convseg", (1, 8, 8), channels=2), 0)
        np.testing.assert_array_equal(p["bn1.gamma"], 1.0)
        np.testing.assert_array_equal(p["bn1.beta"], 0.0)
        np.testing.assert_array_equal(p["bn1.mean"], 0.0)
        np.testing.assert_array_equal(p["bn1.var"], 1.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="unknown arch"):
            ModelSpec("resnet", (4,))
        with pytest.raises(ValueError, match="even spatial"):
            ModelSpec("tiny_convseg", (1, 7, 8))
        with pytest.raises(ValueError, match="hook_tag"):
            ModelSpec("mlp_bn", (4,), hook_tag="enc1")


class TestPredict:
    def test_shapes(self):
        rng = np.random.default_rng(0)
        cls = ModelSpec("mlp_bn", (6,), out_dim=3, hidden=(4, 4))
        out = predict(cls, init_params(cls, 0), rng.normal(size=(5, 6)), "softmax_ce")
        assert out.shape == (5,) and set(np.unique(out)) <= {0, 1, 2}
        seg = ModelSpec("tiny_convseg", (1, 8, 8), out_dim=1, channels=2)
        mask = predict(seg, init_params(seg, 0), rng.normal(size=(3, 1, 8, 8)), "bce_logits")
        assert mask.shape == (3, 8, 8) and set(np.unique(mask)) <= {0.0, 1.0}


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = ModelSpec("tiny_convseg", (1, 8, 8), channels=2)
        params = init_params(spec, 9)
        path = save_params(params, tmp_path / "ckpt.bin")
        loaded = load_params(path)
        assert params_equal(loaded, params)
        assert loaded.tags == params.tags

    def test_truncated_payload(self, tmp_path):
        params = init_params(ModelSpec("logreg", (4,)), 1)
        path = save_params(params, tmp_path / "ckpt.bin")
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_params(path)

    def test_bad_format(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        path.write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError, match="format"):
            load_params(path)
