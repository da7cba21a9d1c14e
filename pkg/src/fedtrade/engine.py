"""Experiment orchestration: federated rounds, baselines, evaluation, suites.

The engine owns the experiment-level contracts: every method in a comparison
runs the same round/epoch budget on byte-identical splits, client updates are
pure functions of (state snapshot, derived rng), and all results are
reproducible from (config, master_seed) alone whatever the parallelism.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .harmonize import (
    DETERMINISTIC_KINDS,
    AugmentParams,
    HarmonizeKind,
    apply_adain,
    apply_augment,
    apply_fda,
    apply_hist_match,
    apply_mixstyle_input,
    build_reference_bank,
    feature_mixstyle_hook,
    get_plugin,
)
from .metrics import PRIMARY_METRIC, cls_metrics, confusion_matrix, micro_pool, seg_metrics
from .model import (
    GRAD_TAGS,
    ModelSpec,
    ParamSet,
    init_params,
    loss_and_grad,
    loss_value,
    param_diff,
    param_norm_sq,
    partition_filter,
    predict,
)
from .numerics import rng_derive
from .strategies import (
    GLOBAL_EVAL_KINDS,
    StrategyKind,
    aggregate_round,
    client_round,
    eval_params,
    finalize_strategy,
    init_strategy_state,
    run_local_epochs,
)
from .synthdata import ClientDataset, FederationSpec, ShiftProfile, make_federation

BASELINE_KINDS = (
    "local_centralized", "central_global", "central_local",
    "fedavg_global", "fedavg_local",
)

RESULT_SCHEMA = "fedtrade-results-v1"

# Methods grouped for the directional comparisons. Harmonization methods are
# fedavg plus an input-side transform; personalization methods keep part or
# all of the model client-specific.
HARMONIZATION_METHODS = (
    "augment", "hist_sri", "hist_ari", "fda_sri",
    "mixstyle_input", "mixstyle_feature", "adain",
)
PERSONALIZATION_METHODS = ("fedper", "fedrep", "fedbn", "pfedme", "ditto", "finetune")


class DivergenceError(RuntimeError):
    """Training produced non-finite parameters or losses."""

    def __init__(self, round_idx: int, client_id: int | None, detail: str = ""):
        self.round = round_idx
        self.client = client_id
        where = f"client {client_id}" if client_id is not None else "server aggregate"
        msg = f"non-finite values at round {round_idx}, {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass(frozen=True)
class TrainingConfig:
    """Round/epoch budget shared by every method in a comparison."""

    rounds: int = 20
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.rounds < 1 or self.epochs < 1:
            raise ValueError("rounds and epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class ToySpec:
    """Convex quadratic federation: client k minimizes (theta - anchor_k)^2.

    The p_k-weighted objective has the closed-form optimum sum_k p_k anchor_k,
    which makes convergence testable to tight tolerances.
    """

    anchors: tuple[float, ...] = (-2.0, 0.5, 1.5, 3.0)
    weights: tuple[float, ...] | None = None
    master_seed: int = 0

    def __post_init__(self):
        if len(self.anchors) < 1:
            raise ValueError("need at least one anchor")
        if self.weights is not None:
            if len(self.weights) != len(self.anchors):
                raise ValueError("weights must match anchors in length")
            if any(w < 0 for w in self.weights) or math.fsum(self.weights) <= 0:
                raise ValueError("weights must be non-negative with positive sum")

    @property
    def task(self) -> str:
        return "toy"

    @property
    def k(self) -> int:
        return len(self.anchors)

    def client_weights(self) -> dict[int, float]:
        if self.weights is None:
            return {i: 1.0 / self.k for i in range(self.k)}
        s = math.fsum(self.weights)
        return {i: w / s for i, w in enumerate(self.weights)}

    def optimum(self) -> float:
        w = self.client_weights()
        return math.fsum(w[i] * a for i, a in enumerate(self.anchors))


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a federation, a model, a method, a budget."""

    federation: FederationSpec | ToySpec
    train: TrainingConfig
    model: ModelSpec | None = None
    strategy: StrategyKind | None = None
    baseline: str | None = None
    harmonize: HarmonizeKind = HarmonizeKind()
    allow_combined: bool = False
    eval_global: bool = False

    def __post_init__(self):
        if (self.strategy is None) == (self.baseline is None):
            raise ValueError("exactly one of strategy/baseline must be set")
        if self.baseline is not None and self.baseline not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline {self.baseline!r}; valid: {', '.join(BASELINE_KINDS)}")
        if self.task == "toy":
            if self.model is not None:
                raise ValueError("the toy federation takes no model spec")
            if self.harmonize.kind != "none":
                raise ValueError("the toy federation has no inputs to harmonize")
        else:
            if self.model is None:
                raise ValueError(f"task {self.task!r} needs a model spec")
            self._check_model()
        if self.harmonize.kind != "none" and not self.allow_combined:
            if self.baseline is not None or self.strategy.kind != "fedavg":
                raise ValueError(
                    "harmonization combines only with the fedavg backbone unless "
                    "allow_combined is set (the comparison keeps data-side and "
                    "model-side methods mutually exclusive by default)")
        if self.eval_global and self.strategy is not None and self.strategy.kind not in GLOBAL_EVAL_KINDS:
            raise ValueError(f"{self.strategy.kind} builds per-client models; pooled "
                             "global evaluation is not defined for it")

    def _check_model(self):
        fed, m = self.federation, self.model
        if fed.task == "seg":
            if m.arch != "tiny_convseg":
                raise ValueError("segmentation needs arch tiny_convseg")
            if m.in_shape != (fed.c, fed.h, fed.w):
                raise ValueError(f"model in_shape {m.in_shape} != federation images {(fed.c, fed.h, fed.w)}")
            if m.out_dim != 1:
                raise ValueError("segmentation uses a single-logit head")
        else:
            if m.arch not in ("logreg", "mlp_bn"):
                raise ValueError("classification needs arch logreg or mlp_bn")
            d = fed.c * fed.h * fed.w
            if m.in_shape != (d,):
                raise ValueError(f"model in_shape {m.in_shape} != flattened images ({d},)")
            if m.out_dim != fed.n_classes:
                raise ValueError(f"out_dim {m.out_dim} != n_classes {fed.n_classes}")
        if self.harmonize.kind == "mixstyle_feature":
            tag = self.harmonize.layer_tag or m.default_hook_tag()
            if tag is None:
                raise ValueError(f"arch {m.arch} has no feature hook sites for mixstyle_feature")

    @property
    def task(self) -> str:
        return self.federation.task

    @property
    def loss_kind(self) -> str:
        return "bce_logits" if self.task == "seg" else "softmax_ce"

    @property
    def master_seed(self) -> int:
        return self.federation.master_seed


def method_label(config: ExperimentConfig) -> str:
    """Row name for tables; harmonization methods are named by the transform."""
    if config.baseline is not None:
        return config.baseline
    if config.harmonize.kind != "none":
        if config.strategy.kind == "fedavg":
            return config.harmonize.kind
        return f"{config.strategy.kind}+{config.harmonize.kind}"
    return config.strategy.kind


# --------------------------------------------------------------------------
# Harmonization wiring.

class HarmonizePipeline:
    """Applies the configured input transform consistently at train and eval.

    Deterministic transforms (histogram matching, frequency swap, stat
    transfer, plugins) are applied per image to every split. Stochastic
    transforms re-draw per epoch at train time; mixing at eval time uses a
    fixed derived stream; random augments are identity at eval.
    """

    def __init__(self, hk: HarmonizeKind, datasets: list[ClientDataset],
                 master_seed: int, task: str, model_spec: ModelSpec | None = None):
        self.hk = hk
        self.task = task
        self.master_seed = master_seed
        self.bank = None
        self.hook_tag = None
        if hk.kind in ("hist_sri", "fda_sri", "adain", "plugin"):
            self.bank = build_reference_bank(datasets, "sri", master_seed, hk.reference_client)
        elif hk.kind == "hist_ari":
            self.bank = build_reference_bank(datasets, "ari", master_seed, hk.reference_client)
        if hk.kind == "mixstyle_feature":
            if model_spec is None:
                raise ValueError("mixstyle_feature needs the model spec to pick a hook site")
            self.hook_tag = hk.layer_tag or model_spec.default_hook_tag()
        # orientation defines the class label, so right-angle rotation is
        # label-destroying for classification and stays off there
        self.augment_params = AugmentParams() if task == "seg" else AugmentParams(p_rot90=0.0)

    @property
    def is_stochastic_train(self) -> bool:
        return self.hk.kind in ("augment", "mixstyle_input")

    def _static_one(self, img: np.ndarray, stream) -> np.ndarray:
        k = self.hk.kind
        if k in ("hist_sri", "hist_ari"):
            return apply_hist_match(img, self.bank)
        if k == "fda_sri":
            return apply_fda(img, self.bank, self.hk.beta)
        if k == "adain":
            return apply_adain(img, self.bank)
        if k == "plugin":
            return get_plugin(self.hk.plugin_name)(img, self.bank, stream)
        raise ValueError(f"{k!r} is not a per-image deterministic kind")

    def transform_static(self, client_id: int, images: np.ndarray, split: str) -> np.ndarray:
        if self.hk.kind not in DETERMINISTIC_KINDS:
            return images
        stream = rng_derive(self.master_seed, (client_id, 0, f"plugin/{split}"))
        out = np.empty_like(images)
        for i in range(images.shape[0]):
            out[i] = self._static_one(images[i], stream)
        return out

    def _mix_epoch(self, images: np.ndarray, stream) -> np.ndarray:
        perm = stream.gen.permutation(images.shape[0])
        out = np.empty_like(images)
        for i in range(images.shape[0]):
            out[i] = apply_mixstyle_input(images[i], images[perm[i]], self.hk.alpha, stream)
        return out

    def transform_train_epoch(self, client_id: int, epoch_index: int,
                              images: np.ndarray, targets: np.ndarray):
        k = self.hk.kind
        if k == "augment":
            stream = rng_derive(self.master_seed, (client_id, epoch_index, "augment"))
            out_x = np.empty_like(images)
            out_y = targets.copy()
            for i in range(images.shape[0]):
                xi, yi = apply_augment(images[i], targets[i], stream, self.augment_params, self.task)
                out_x[i] = xi
                if self.task == "seg":
                    out_y[i] = yi
            return out_x, out_y
        if k == "mixstyle_input":
            stream = rng_derive(self.master_seed, (client_id, epoch_index, "mixstyle"))
            return self._mix_epoch(images, stream), targets
        return images, targets

    def transform_eval(self, client_id: int, images: np.ndarray, split: str) -> np.ndarray:
        if self.hk.kind in DETERMINISTIC_KINDS:
            return self.transform_static(client_id, images, split)
        if self.hk.kind == "mixstyle_input":
            stream = rng_derive(self.master_seed, (client_id, 0, f"harmonize_eval/{split}"))
            return self._mix_epoch(images, stream)
        return images

    def hook_factory(self, client_id: int):
        """Per-batch train-time feature hooks; None for every other kind."""
        if self.hk.kind != "mixstyle_feature":
            return None
        tag, alpha, seed = self.hook_tag, self.hk.alpha, self.master_seed

        def factory(epoch_index: int, batch_index: int):
            stream = rng_derive(seed, (client_id, epoch_index, f"mixfeat/{batch_index}"))
            return {tag: lambda feats: feature_mixstyle_hook(feats, alpha, stream)}

        return factory


# --------------------------------------------------------------------------
# Client problems: the strategy-facing training view.

def model_input(spec: ModelSpec, images: np.ndarray) -> np.ndarray:
    if spec.arch == "tiny_convseg":
        return images
    return images.reshape(images.shape[0], -1)


class ClientProblem:
    """Mini-batch training view of one client's (possibly harmonized) data.

    Batch order depends only on (master_seed, client_id, epoch_index), so any
    two runs that walk the same epoch indices see identical batches.
    """

    def __init__(self, client_id: int, model_spec: ModelSpec, loss_kind: str,
                 train_images: np.ndarray, train_targets: np.ndarray,
                 batch_size: int, master_seed: int,
                 epoch_transform=None, hook_factory=None):
        if train_images.shape[0] == 0:
            raise ValueError(f"client {client_id} has an empty train split")
        self.client_id = client_id
        self.model_spec = model_spec
        self.loss_kind = loss_kind
        self.train_images = train_images
        self.train_targets = train_targets
        self.batch_size = int(batch_size)
        self.master_seed = master_seed
        self.epoch_transform = epoch_transform
        self.hook_factory = hook_factory
        self.n_train = int(train_images.shape[0])

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.n_train // self.batch_size)

    def _targets_for_loss(self, targets: np.ndarray) -> np.ndarray:
        if self.loss_kind == "softmax_ce":
            return np.asarray(targets).astype(np.int64)
        return targets

    def batches(self, epoch_index: int):
        x, y = self.train_images, self.train_targets
        if self.epoch_transform is not None:
            x, y = self.epoch_transform(self.client_id, epoch_index, x, y)
        xm = model_input(self.model_spec, x)
        gen = rng_derive(self.master_seed, (self.client_id, epoch_index, "batch")).gen
        perm = gen.permutation(self.n_train)
        for b, start in enumerate(range(0, self.n_train, self.batch_size)):
            idx = perm[start:start + self.batch_size]
            hooks = self.hook_factory(epoch_index, b) if self.hook_factory is not None else None
            yield xm[idx], self._targets_for_loss(y[idx]), hooks

    def loss_and_grad(self, theta: ParamSet, batch):
        x, y, hooks = batch
        return loss_and_grad(self.model_spec, theta, x, y, self.loss_kind,
                             mode="train", hooks=hooks)

    def train_loss(self, theta: ParamSet) -> float:
        x = model_input(self.model_spec, self.train_images)
        y = self._targets_for_loss(self.train_targets)
        return loss_value(self.model_spec, theta, x, y, self.loss_kind)


class ToyProblem:
    """Full-batch quadratic objective sum_i w_i (theta - a_i)^2."""

    def __init__(self, client_id: int, anchors, weights=None):
        self.client_id = client_id
        self.anchors = np.atleast_1d(np.asarray(anchors, dtype=np.float64))
        if weights is None:
            weights = np.full(self.anchors.size, 1.0 / self.anchors.size)
        self.weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        self.n_train = 1

    @property
    def steps_per_epoch(self) -> int:
        return 1

    def batches(self, epoch_index: int):
        yield (None, None, None)

    def loss_and_grad(self, theta: ParamSet, batch):
        t = theta.values["theta"]
        diff = t - self.anchors
        loss = float(np.sum(self.weights * diff * diff))
        grad = ParamSet({"theta": np.sum(2.0 * self.weights * diff, keepdims=True)},
                        {"theta": "head"})
        return loss, grad

    def train_loss(self, theta: ParamSet) -> float:
        t = theta.values["theta"]
        return float(np.sum(self.weights * (t - self.anchors) ** 2))


def toy_init_params() -> ParamSet:
    return ParamSet({"theta": np.zeros(1)}, {"theta": "head"})


# --------------------------------------------------------------------------
# World assembly: problems, weights, initial params, eval bundles.

@dataclass
class _World:
    problems: dict[int, object]
    weights: dict[int, float]
    theta0: ParamSet
    val_data: dict[int, tuple]
    test_data: dict[int, tuple]
    pipeline: HarmonizePipeline | None = None
    datasets: list[ClientDataset] | None = None


def _client_weights(sizes: dict[int, int]) -> dict[int, float]:
    total = sum(sizes.values())
    w = {cid: sizes[cid] / total for cid in sizes}
    s = math.fsum(w.values())
    return {cid: v / s for cid, v in w.items()}


def build_world(config: ExperimentConfig, datasets: list[ClientDataset] | None = None) -> _World:
    if config.task == "toy":
        spec = config.federation
        problems = {i: ToyProblem(i, spec.anchors[i]) for i in range(spec.k)}
        empty = {i: (None, None) for i in range(spec.k)}
        return _World(problems, spec.client_weights(), toy_init_params(), empty, empty)
    fed = config.federation
    if datasets is None:
        datasets = make_federation(fed)
    pipeline = HarmonizePipeline(config.harmonize, datasets, fed.master_seed,
                                 fed.task, config.model)
    problems, val_data, test_data = {}, {}, {}
    for ds in datasets:
        cid = ds.client_id
        train_x = pipeline.transform_static(cid, ds.images[ds.train_idx], "train")
        problems[cid] = ClientProblem(
            cid, config.model, config.loss_kind, train_x, ds.targets[ds.train_idx],
            config.train.batch_size, fed.master_seed,
            epoch_transform=pipeline.transform_train_epoch if pipeline.is_stochastic_train else None,
            hook_factory=pipeline.hook_factory(cid))
        val_data[cid] = (pipeline.transform_eval(cid, ds.images[ds.val_idx], "val"),
                         ds.targets[ds.val_idx])
        test_data[cid] = (pipeline.transform_eval(cid, ds.images[ds.test_idx], "test"),
                          ds.targets[ds.test_idx])
    weights = _client_weights({cid: problems[cid].n_train for cid in problems})
    theta0 = init_params(config.model, fed.master_seed)
    return _World(problems, weights, theta0, val_data, test_data, pipeline, datasets)


# --------------------------------------------------------------------------
# Evaluation.

def evaluate_arrays(config: ExperimentConfig, theta: ParamSet, images, targets) -> dict[str, float]:
    """Metric suite of one model on one array pair; adds the eval loss."""
    task = config.task
    if task == "toy":
        raise ValueError("toy clients are scored by loss, not arrays")
    x = model_input(config.model, images)
    preds = predict(config.model, theta, x, config.loss_kind)
    if task == "seg":
        per_image = [seg_metrics(preds[i], targets[i]) for i in range(len(targets))]
        out = {k: float(np.mean([m[k] for m in per_image])) for k in per_image[0]}
    else:
        conf = confusion_matrix(preds, np.asarray(targets).astype(np.int64),
                                config.federation.n_classes)
        out = cls_metrics(conf)
    y = np.asarray(targets).astype(np.int64) if config.loss_kind == "softmax_ce" else targets
    out["loss"] = loss_value(config.model, theta, x, y, config.loss_kind)
    return out


def _eval_confusion(config, theta, images, targets) -> np.ndarray:
    x = model_input(config.model, images)
    preds = predict(config.model, theta, x, config.loss_kind)
    return confusion_matrix(preds, np.asarray(targets).astype(np.int64),
                            config.federation.n_classes)


def evaluate_locally(config: ExperimentConfig, models: dict[int, ParamSet],
                     eval_data: dict[int, tuple], world: _World) -> dict[int, dict[str, float]]:
    """Client k's effective model on client k's split only."""
    out = {}
    for cid in sorted(models):
        if config.task == "toy":
            out[cid] = {"loss": world.problems[cid].train_loss(models[cid])}
        else:
            images, targets = eval_data[cid]
            out[cid] = evaluate_arrays(config, models[cid], images, targets)
    return out


def evaluate_globally(config: ExperimentConfig, theta: ParamSet,
                      eval_data: dict[int, tuple], world: _World) -> dict[str, float]:
    """One model on the pooled split, concatenated in client order.

    Classification pools confusion counts across clients (micro average);
    segmentation averages per-image metrics over the pooled images.
    """
    cids = sorted(eval_data)
    if config.task == "toy":
        loss = math.fsum(world.weights[cid] * world.problems[cid].train_loss(theta)
                         for cid in cids)
        return {"loss": loss}
    if config.task == "cls":
        confs = [_eval_confusion(config, theta, *eval_data[cid]) for cid in cids]
        out = cls_metrics(micro_pool(confs))
    else:
        images = np.concatenate([eval_data[cid][0] for cid in cids])
        targets = np.concatenate([eval_data[cid][1] for cid in cids])
        return evaluate_arrays(config, theta, images, targets)
    images = np.concatenate([eval_data[cid][0] for cid in cids])
    targets = np.concatenate([eval_data[cid][1] for cid in cids]).astype(np.int64)
    out["loss"] = loss_value(config.model, theta, model_input(config.model, images),
                             targets, config.loss_kind)
    return out


def primary_metric_name(task: str) -> str:
    return PRIMARY_METRIC[task]


def metric_direction(metric: str) -> float:
    """+1 when larger is better, -1 for losses."""
    return -1.0 if metric == "loss" else 1.0


# --------------------------------------------------------------------------
# Training drivers.

def _check_finite_params(*paramsets) -> bool:
    for ps in paramsets:
        if ps is not None and not np.isfinite(param_norm_sq(ps)):
            return False
    return True


def _val_metric(config: ExperimentConfig, world: _World, models: dict[int, ParamSet]) -> dict[str, float]:
    name = primary_metric_name(config.task)
    out = {}
    for cid in sorted(world.problems):
        if config.task == "toy":
            out[str(cid)] = world.problems[cid].train_loss(models[cid])
        else:
            images, targets = world.val_data[cid]
            out[str(cid)] = evaluate_arrays(config, models[cid], images, targets)[name]
    return out


def _round_record(config, world, round_idx, current_models, global_params, prev_global) -> dict:
    global_loss = math.fsum(world.weights[cid] * world.problems[cid].train_loss(global_params)
                            for cid in sorted(world.problems))
    delta = partition_filter(param_diff(global_params, prev_global), GRAD_TAGS)
    record = {
        "round": round_idx,
        "global_loss": global_loss,
        "delta_norm": math.sqrt(param_norm_sq(delta)),
        "per_client_val_metric": _val_metric(config, world, current_models),
    }
    if not math.isfinite(record["global_loss"]):
        raise DivergenceError(round_idx, None, "global train loss is not finite")
    return record


def run_federated(config: ExperimentConfig, world: _World, jobs: int = 1):
    """R rounds of broadcast, K client updates, aggregate. Returns (state, log).

    Client updates are pure, so the thread count never changes results; the
    aggregation itself is a single-threaded reduction in client-id order.
    """
    if config.strategy is None:
        raise ValueError("run_federated needs a strategy config")
    cids = sorted(world.problems)
    state = init_strategy_state(config.strategy, world.theta0, cids)
    log = []
    cfg = config.train
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for r in range(cfg.rounds):
            prev = state.global_params

            def work(cid, _round=r):
                return client_round(state, world.problems[cid], cid, _round,
                                    cfg.epochs, cfg.lr)

            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as ex:
                    futures = [(cid, ex.submit(work, cid)) for cid in cids]
                    contribs = [f.result() for _, f in futures]
            else:
                contribs = [work(cid) for cid in cids]
            for c in contribs:
                if not _check_finite_params(c.params, c.new_control, c.personal):
                    raise DivergenceError(r, c.client_id)
            aggregate_round(state, contribs, world.weights)
            if not _check_finite_params(state.global_params, state.control_global):
                raise DivergenceError(r, None)
            models = {cid: eval_params(state, cid) for cid in cids}
            log.append(_round_record(config, world, r, models, state.global_params, prev))
        finalize_strategy(state, world.problems, cfg.lr)
        for cid in cids:
            if not _check_finite_params(eval_params(state, cid)):
                raise DivergenceError(cfg.rounds - 1, cid, "post-training fine-tune diverged")
    return state, log


def _run_chunked_local(config, world, problems: dict[int, object]):
    """Round-chunked independent training used by the non-federated baselines.

    Each model trains epochs*rounds epochs in total; the log keeps the same
    per-round shape as the federated runs.
    """
    cfg = config.train
    thetas = {cid: world.theta0 for cid in problems}
    weights = world.weights
    if set(problems) != set(weights):
        # single pooled model: weight 1 on the pooled pseudo-client
        weights = {cid: 1.0 for cid in problems}
    log = []
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        for r in range(cfg.rounds):
            prev = {cid: thetas[cid] for cid in thetas}
            for cid in sorted(problems):
                epochs = range(r * cfg.epochs, (r + 1) * cfg.epochs)
                thetas[cid], _ = run_local_epochs(problems[cid], thetas[cid], epochs, cfg.lr)
                if not _check_finite_params(thetas[cid]):
                    raise DivergenceError(r, cid)
            ordered = sorted(problems)
            global_loss = math.fsum(weights[cid] * problems[cid].train_loss(thetas[cid])
                                    for cid in ordered)
            delta_sq = math.fsum(
                weights[cid] * param_norm_sq(partition_filter(
                    param_diff(thetas[cid], prev[cid]), GRAD_TAGS))
                for cid in ordered)
            name = primary_metric_name(config.task)
            per_client = {}
            for cid in sorted(world.problems):
                model = thetas[cid] if cid in thetas else thetas[ordered[0]]
                if config.task == "toy":
                    per_client[str(cid)] = world.problems[cid].train_loss(model)
                else:
                    images, targets = world.val_data[cid]
                    per_client[str(cid)] = evaluate_arrays(config, model, images, targets)[name]
            record = {"round": r, "global_loss": global_loss,
                      "delta_norm": math.sqrt(delta_sq),
                      "per_client_val_metric": per_client}
            if not math.isfinite(global_loss):
                raise DivergenceError(r, None, "train loss is not finite")
            log.append(record)
    return thetas, log


def _pooled_problem(config: ExperimentConfig, world: _World):
    """Single training problem over the concatenated client train splits."""
    if config.task == "toy":
        spec = config.federation
        w = spec.client_weights()
        return ToyProblem(0, spec.anchors, [w[i] for i in range(spec.k)])
    cids = sorted(world.problems)
    images = np.concatenate([world.problems[cid].train_images for cid in cids])
    targets = np.concatenate([world.problems[cid].train_targets for cid in cids])
    return ClientProblem(0, config.model, config.loss_kind, images, targets,
                         config.train.batch_size, config.master_seed)


# --------------------------------------------------------------------------
# Result rows.

@dataclass
class ResultTable:
    """Long-form results: one row per (method, client, metric)."""

    rows: list[tuple[str, str, str, float]] = field(default_factory=list)

    def add_local(self, method: str, per_client: dict[int, dict[str, float]]):
        for cid in sorted(per_client):
            for metric in sorted(per_client[cid]):
                self.rows.append((method, str(cid), metric, float(per_client[cid][metric])))

    def add_global(self, method: str, metrics: dict[str, float]):
        for metric in sorted(metrics):
            self.rows.append((method, "pooled", metric, float(metrics[metric])))

    def client_labels(self, method: str) -> list[str]:
        return sorted({c for m, c, _, _ in self.rows if m == method})

    def value(self, method: str, client: str, metric: str) -> float:
        for m, c, k, v in self.rows:
            if (m, c, k) == (method, client, metric):
                return v
        raise KeyError(f"no row ({method}, {client}, {metric})")

    def to_csv(self) -> str:
        lines = ["method,client,metric,value"]
        lines += [f"{m},{c},{k},{v!r}" for m, c, k, v in self.rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = [{"method": m, "client": c, "metric": k, "value": v}
                for m, c, k, v in self.rows]
        return json.dumps({"schema": RESULT_SCHEMA, "rows": rows}, indent=2) + "\n"

    @staticmethod
    def from_csv(text: str) -> "ResultTable":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != "method,client,metric,value":
            raise ValueError("unrecognized results csv header")
        rows = []
        for ln in lines[1:]:
            m, c, k, v = ln.split(",")
            rows.append((m, c, k, float(v)))
        return ResultTable(rows)


def round_log_text(log: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log)


# --------------------------------------------------------------------------
# Experiment entry point.

def run_experiment(config: ExperimentConfig, datasets: list[ClientDataset] | None = None,
                   jobs: int = 1) -> tuple[ResultTable, list[dict]]:
    """Train by the configured method and score on the test splits."""
    world = build_world(config, datasets)
    label = method_label(config)
    table = ResultTable()
    if config.baseline in ("fedavg_global", "fedavg_local"):
        fed_cfg = replace(config, baseline=None, strategy=StrategyKind("fedavg"))
        state, log = run_federated(fed_cfg, world, jobs)
        if config.baseline == "fedavg_global":
            table.add_global(label, evaluate_globally(config, state.global_params,
                                                      world.test_data, world))
        else:
            models = {cid: state.global_params for cid in world.problems}
            table.add_local(label, evaluate_locally(config, models, world.test_data, world))
        return table, log
    if config.baseline == "local_centralized":
        thetas, log = _run_chunked_local(config, world, world.problems)
        table.add_local(label, evaluate_locally(config, thetas, world.test_data, world))
        return table, log
    if config.baseline in ("central_global", "central_local"):
        pooled = _pooled_problem(config, world)
        thetas, log = _run_chunked_local(config, world, {0: pooled})
        theta = thetas[0]
        if config.baseline == "central_global":
            table.add_global(label, evaluate_globally(config, theta, world.test_data, world))
        else:
            models = {cid: theta for cid in world.problems}
            table.add_local(label, evaluate_locally(config, models, world.test_data, world))
        return table, log
    state, log = run_federated(config, world, jobs)
    models = {cid: eval_params(state, cid) for cid in sorted(world.problems)}
    table.add_local(label, evaluate_locally(config, models, world.test_data, world))
    if config.eval_global:
        table.add_global(label, evaluate_globally(config, state.global_params,
                                                  world.test_data, world))
    return table, log


# --------------------------------------------------------------------------
# Method catalog and the trade-off suite.

def method_config(name: str, federation, model: ModelSpec | None,
                  train: TrainingConfig) -> ExperimentConfig:
    """Experiment config for a catalog method name on a given federation."""
    if name in BASELINE_KINDS:
        return ExperimentConfig(federation, train, model, baseline=name)
    strategies = {
        "fedavg": StrategyKind("fedavg"),
        "fedprox": StrategyKind("fedprox", mu=0.1),
        "scaffold": StrategyKind("scaffold"),
        "fedadam": StrategyKind("fedadam"),
        "fedper": StrategyKind("fedper"),
        "fedrep": StrategyKind("fedrep", head_epochs=1),
        "fedbn": StrategyKind("fedbn"),
        "pfedme": StrategyKind("pfedme", lam=1.0, inner_steps=3),
        "ditto": StrategyKind("ditto", lam=0.1),
        "finetune": StrategyKind("finetune", post_epochs=5),
    }
    if name in strategies:
        return ExperimentConfig(federation, train, model, strategy=strategies[name])
    if name in HARMONIZATION_METHODS:
        return ExperimentConfig(federation, train, model, strategy=StrategyKind("fedavg"),
                                harmonize=HarmonizeKind(kind=name))
    raise ValueError(f"unknown method {name!r}; valid: "
                     f"{', '.join(sorted(set(BASELINE_KINDS) | set(strategies) | set(HARMONIZATION_METHODS)))}")


METHOD_NAMES = BASELINE_KINDS + (
    "fedavg", "fedprox", "scaffold", "fedadam", "fedper", "fedrep", "fedbn",
    "pfedme", "ditto", "finetune",
) + HARMONIZATION_METHODS


def cell_federation(task: str, delta_style: float, delta_content: float, seed: int,
                    n_per_client=None, h: int = 32, w: int = 32,
                    n_classes: int = 2, k: int = 4) -> FederationSpec:
    """Federation spec for one heterogeneity cell of the sweep grid."""
    shift = ShiftProfile.from_deltas(delta_style, delta_content, k, n_classes)
    kwargs = {} if n_per_client is None else {"n_per_client": tuple(n_per_client)}
    return FederationSpec(task=task, shift=shift, master_seed=seed,
                          h=h, w=w, n_classes=n_classes, **kwargs)


def method_mean(table: ResultTable, method: str, metric: str) -> float:
    """Mean primary metric across a method's clients (or its pooled cell)."""
    labels = table.client_labels(method)
    values = [table.value(method, c, metric) for c in labels]
    return float(np.mean(values))


def summarize_records(records: list[dict]) -> list[dict]:
    """Per (cell, method): mean and sample std of the per-seed means."""
    groups: dict[tuple, list[float]] = {}
    meta: dict[tuple, dict] = {}
    for rec in records:
        key = (rec["delta_style"], rec["delta_content"], rec["method"])
        groups.setdefault(key, []).append(rec["mean"])
        meta[key] = rec
    out = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        out.append({
            "delta_style": key[0], "delta_content": key[1], "method": key[2],
            "metric": meta[key]["metric"],
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0,
            "n_seeds": int(vals.size),
        })
    return out


def direction_records(summary: list[dict]) -> list[dict]:
    """Best-harmonization vs best-personalization comparison per cell."""
    cells = sorted({(s["delta_style"], s["delta_content"]) for s in summary})
    out = []
    for ds, dc in cells:
        rows = {s["method"]: s for s in summary
                if (s["delta_style"], s["delta_content"]) == (ds, dc)}
        metric = next(iter(rows.values()))["metric"]
        sign = metric_direction(metric)

        def best(names):
            cands = [(sign * rows[n]["mean"], n) for n in names if n in rows]
            if not cands:
                return None
            score, name = max(cands)
            return {"method": name, "mean": sign * score}

        rec = {
            "delta_style": ds, "delta_content": dc, "metric": metric,
            "best_harmonization": best(HARMONIZATION_METHODS),
            "best_personalization": best(PERSONALIZATION_METHODS),
            "fedavg_local_mean": rows["fedavg_local"]["mean"] if "fedavg_local" in rows else None,
        }
        bh, bp = rec["best_harmonization"], rec["best_personalization"]
        if bh and bp:
            rec["harmonization_minus_personalization"] = bh["mean"] - bp["mean"]
        if bh and rec["fedavg_local_mean"] is not None:
            rec["harmonization_minus_fedavg"] = bh["mean"] - rec["fedavg_local_mean"]
        if bp and rec["fedavg_local_mean"] is not None:
            rec["personalization_minus_fedavg"] = bp["mean"] - rec["fedavg_local_mean"]
        out.append(rec)
    return out


def run_tradeoff_suite(task: str, cells: list[tuple[float, float]], methods: list[str],
                       seeds: list[int], model: ModelSpec | None, train: TrainingConfig,
                       n_per_client=None, n_classes: int = 2, h: int = 32, w: int = 32,
                       jobs: int = 1, progress=None):
    """Grid of heterogeneity cells x methods x seeds under one shared budget.

    Every method inside the suite runs the same rounds/epochs (communication
    parity is structural: one TrainingConfig) on the same per-seed federation,
    so test splits are byte-identical across methods. Returns
    (records, summary, directions).
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    metric = primary_metric_name(task)
    records = []
    for ds, dc in cells:
        for seed in seeds:
            fed = cell_federation(task, ds, dc, seed, n_per_client, h, w, n_classes)
            datasets = make_federation(fed)
            for name in methods:
                config = method_config(name, fed, model, train)
                table, _ = run_experiment(config, datasets, jobs)
                rec = {
                    "delta_style": ds, "delta_content": dc, "method": name,
                    "seed": seed, "metric": metric,
                    "mean": method_mean(table, name, metric),
                    "per_client": {c: table.value(name, c, metric)
                                   for c in table.client_labels(name)},
                }
                records.append(rec)
                if progress is not None:
                    progress(rec)
    summary = summarize_records(records)
    return records, summary, direction_records(summary)
