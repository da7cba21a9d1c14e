"""Federated optimization strategies over a common round interface.

A strategy is client_update(global_view, local_problem) -> contribution plus
server_aggregate(contributions) -> new state. Local problems are duck-typed:
they expose n_train, steps_per_epoch, batches(epoch_index) yielding
(x, y, hooks) and loss_and_grad(theta, batch). Batch order is derived from
(master_seed, client, epoch_index), so two strategies walking the same epoch
indices consume identical batches; the algebraic reductions between
strategies (fedprox at mu = 0, round-one scaffold, ditto at lam = 0) are then
bit-level identities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import (
    GRAD_TAGS,
    ParamSet,
    param_axpy,
    param_norm_sq,
    param_zeros_like,
    partition_filter,
    sgd_step,
)

STRATEGY_KINDS = (
    "fedavg", "fedprox", "scaffold", "fedadam", "fedper",
    "fedrep", "fedbn", "pfedme", "ditto", "finetune",
)

# Strategies whose evaluation model is the shared global model.
GLOBAL_EVAL_KINDS = ("fedavg", "fedprox", "scaffold", "fedadam")

# Per-client entries kept out of aggregation for the layer-wise strategies.
LOCAL_TAGS = {
    "fedper": ("head",),
    "fedrep": ("head",),
    "fedbn": ("norm_affine", "norm_stats"),
}

# Disjoint epoch-index spaces so auxiliary phases never share batch streams
# with the main local pass.
FEDREP_HEAD_EPOCH_BASE = 1_000_000
FINETUNE_EPOCH_BASE = 2_000_000


@dataclass(frozen=True)
class StrategyKind:
    """Strategy name plus its hyperparameters (unused ones are ignored)."""

    kind: str
    mu: float = 0.0            # fedprox: proximal pull toward the broadcast model
    lam: float = 1.0           # ditto / pfedme: personal-global coupling
    eta: float = 0.1           # fedadam: server step size
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    head_epochs: int = 1       # fedrep: head-only epochs per round
    inner_steps: int = 3       # pfedme: proximal inner iterations
    inner_lr: float | None = None   # pfedme: defaults to the run lr
    outer_lr: float | None = None   # pfedme: defaults to the run lr
    post_epochs: int = 5       # finetune: local epochs after training

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; valid: {', '.join(STRATEGY_KINDS)}")
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lam must be non-negative")
        if self.eta <= 0 or self.tau <= 0:
            raise ValueError("eta and tau must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.head_epochs < 0 or self.inner_steps < 1 or self.post_epochs < 0:
            raise ValueError("epoch/step counts out of range")
        for name in ("inner_lr", "outer_lr"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive when given")


@dataclass
class Contribution:
    """What one client sends back for a round."""

    client_id: int
    params: ParamSet
    delta_control: ParamSet | None = None
    new_control: ParamSet | None = None
    personal: ParamSet | None = None


@dataclass
class StrategyState:
    """Server-side state carried across rounds."""

    kind: StrategyKind
    global_params: ParamSet
    round: int = 0
    personal: dict[int, ParamSet] = field(default_factory=dict)
    control_global: ParamSet | None = None
    control_clients: dict[int, ParamSet] = field(default_factory=dict)
    adam_m: ParamSet | None = None
    adam_v: ParamSet | None = None


def _add_on_common(grad: ParamSet, coeff: float, a: ParamSet, b: ParamSet) -> ParamSet:
    """grad + coeff * (a - b), touching only the gradient's entries."""
    values = {n: grad.values[n] + coeff * (a.values[n] - b.values[n]) for n in grad.values}
    return ParamSet(values, dict(grad.tags))


def _add_correction(grad: ParamSet, correction: ParamSet) -> ParamSet:
    values = {
        n: grad.values[n] + correction.values[n] if n in correction else grad.values[n].copy()
        for n in grad.values
    }
    return ParamSet(values, dict(grad.tags))


def run_local_epochs(problem, theta: ParamSet, epoch_indices, lr: float, *,
                     prox_mu: float = 0.0, prox_anchor: ParamSet | None = None,
                     correction: ParamSet | None = None, train_tags=None):
    """Mini-batch SGD over the given epoch indices; returns (theta, steps).

    The prox and correction terms are skipped entirely when inactive so the
    plain path stays bit-identical to vanilla local SGD.
    """
    theta = theta.clone()
    steps = 0
    for epoch_idx in epoch_indices:
        for batch in problem.batches(epoch_idx):
            _, grad = problem.loss_and_grad(theta, batch)
            if prox_mu:
                grad = _add_on_common(grad, prox_mu, theta, prox_anchor)
            if correction is not None:
                grad = _add_correction(grad, correction)
            if train_tags is not None:
                grad = partition_filter(grad, train_tags)
            theta = sgd_step(theta, grad, lr)
            steps += 1
    return theta, steps


def _round_epochs(round_idx: int, epochs: int) -> range:
    return range(round_idx * epochs, (round_idx + 1) * epochs)


def client_update_fedavg(problem, theta_global: ParamSet, round_idx: int,
                         epochs: int, lr: float) -> ParamSet:
    theta, _ = run_local_epochs(problem, theta_global, _round_epochs(round_idx, epochs), lr)
    return theta


def client_update_fedprox(problem, theta_global: ParamSet, round_idx: int,
                          epochs: int, lr: float, mu: float) -> ParamSet:
    """Local SGD on loss + (mu / 2) * ||theta - broadcast||^2."""
    if mu < 0:
        raise ValueError(f"mu must be non-negative, got {mu}")
    theta, _ = run_local_epochs(problem, theta_global, _round_epochs(round_idx, epochs), lr,
                                prox_mu=mu, prox_anchor=theta_global)
    return theta


def server_aggregate_fedavg(contributions: list[tuple[int, float, ParamSet]]) -> ParamSet:
    """Weighted average, summed in ascending client-id order.

    Weights must be non-negative and sum to 1 within 1e-12.
    """
    if not contributions:
        raise ValueError("no contributions to aggregate")
    ids = [cid for cid, _, _ in contributions]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in contributions: {sorted(ids)}")
    ordered = sorted(contributions, key=lambda c: c[0])
    weights = [w for _, w, _ in ordered]
    if any(w < 0 for w in weights):
        raise ValueError("aggregation weights must be non-negative")
    if abs(math.fsum(weights) - 1.0) > 1e-12:
        raise ValueError(f"aggregation weights sum to {math.fsum(weights)!r}, expected 1")
    first = ordered[0][2]
    values = {n: ordered[0][1] * v for n, v in first.values.items()}
    for cid, w, params in ordered[1:]:
        if params.names() != first.names():
            raise ValueError(f"client {cid} contribution has mismatched parameter names")
        for n, v in params.values.items():
            values[n] = values[n] + w * v
    return ParamSet(values, dict(first.tags))


def scaffold_client_round(problem, theta_global: ParamSet, c_global: ParamSet,
                          c_client: ParamSet, round_idx: int, epochs: int, lr: float):
    """One SCAFFOLD client round.

    Local steps use gradient + (c - c_k); afterwards
    c_k' = c_k - c + (theta_global - theta_local) / (S * lr).
    Returns (theta_local, c_new, delta_c).
    """
    correction = None
    if param_norm_sq(c_global) != 0.0 or param_norm_sq(c_client) != 0.0:
        correction = param_axpy(1.0, c_global, -1.0, c_client)
    theta, steps = run_local_epochs(problem, theta_global, _round_epochs(round_idx, epochs), lr,
                                    correction=correction)
    if steps == 0 or lr == 0.0:
        raise ValueError("scaffold control update needs steps * lr > 0")
    drift = param_axpy(1.0, partition_filter(theta_global, GRAD_TAGS),
                       -1.0, partition_filter(theta, GRAD_TAGS))
    c_new = param_axpy(1.0, param_axpy(1.0, c_client, -1.0, c_global),
                       1.0 / (steps * lr), drift)
    delta_c = param_axpy(1.0, c_new, -1.0, c_client)
    return theta, c_new, delta_c


def fedadam_server_step(theta_global: ParamSet, contributions, m: ParamSet, v: ParamSet,
                        eta: float, beta1: float, beta2: float, tau: float):
    """Server Adam (no bias correction) on the weighted pseudo-gradient.

    delta = sum_k w_k (theta_k - theta_global) over gradient-bearing entries;
    m <- beta1 m + (1 - beta1) delta, v <- beta2 v + (1 - beta2) delta^2,
    theta <- theta + eta * m / (sqrt(v) + tau). Norm statistics are averaged
    plainly. Returns (theta_new, m_new, v_new).
    """
    averaged = server_aggregate_fedavg(contributions)
    delta = param_axpy(1.0, partition_filter(averaged, GRAD_TAGS),
                       -1.0, partition_filter(theta_global, GRAD_TAGS))
    m_new = param_axpy(beta1, m, 1.0 - beta1, delta)
    v_vals = {n: beta2 * v.values[n] + (1.0 - beta2) * delta.values[n] ** 2 for n in v.values}
    v_new = ParamSet(v_vals, dict(v.tags))
    new_values = {}
    for name, val in theta_global.values.items():
        tag = theta_global.tags[name]
        if tag in GRAD_TAGS:
            new_values[name] = val + eta * m_new.values[name] / (np.sqrt(v_new.values[name]) + tau)
        else:
            new_values[name] = averaged.values[name].copy()
    return ParamSet(new_values, dict(theta_global.tags)), m_new, v_new


def client_update_pfedme(problem, w_global: ParamSet, round_idx: int, epochs: int,
                         lam: float, inner_steps: int, inner_lr: float, outer_lr: float):
    """Moreau-envelope personalization.

    Per batch, the inner loop approximately solves
    min_theta f(theta) + (lam / 2) * ||theta - w||^2 from the current w; the
    outer iterate then moves w <- w - outer_lr * lam * (w - theta_personal).
    Returns (theta_personal, w_local). With lam = 0 the inner loop is plain
    SGD on the batch and w never moves.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    w = w_global.clone()
    tilde = w.clone()
    for epoch_idx in _round_epochs(round_idx, epochs):
        for batch in problem.batches(epoch_idx):
            tilde = w.clone()
            for _ in range(inner_steps):
                _, grad = problem.loss_and_grad(tilde, batch)
                if lam:
                    grad = _add_on_common(grad, lam, tilde, w)
                tilde = sgd_step(tilde, grad, inner_lr)
            if lam:
                for name, tag in w.tags.items():
                    if tag in GRAD_TAGS:
                        w.values[name] = w.values[name] - outer_lr * lam * (
                            w.values[name] - tilde.values[name])
    if lam:
        # carry the last personal solution's running stats into the
        # aggregated iterate; at lam = 0 the tracks stay fully decoupled
        w = w.merge_from(tilde, ("norm_stats",))
    return tilde, w


def client_update_ditto(problem, theta_global: ParamSet, theta_personal: ParamSet | None,
                        round_idx: int, epochs: int, lr: float, lam: float):
    """Two-track Ditto round.

    The global track is a vanilla fedavg update; the persistent personal
    track descends loss + (lam / 2) * ||v - broadcast||^2 from where it left
    off. Both tracks walk the same epoch indices, so at lam = 0 the personal
    track reproduces uninterrupted local training bit for bit.
    Returns (theta_for_aggregation, theta_personal).
    """
    idxs = _round_epochs(round_idx, epochs)
    global_out, _ = run_local_epochs(problem, theta_global, idxs, lr)
    personal = theta_personal if theta_personal is not None else theta_global
    personal, _ = run_local_epochs(problem, personal, idxs, lr,
                                   prox_mu=lam, prox_anchor=theta_global)
    return global_out, personal


def layerwise_merge(kind: str, theta_global: ParamSet, theta_local: ParamSet) -> ParamSet:
    """Per-client model for the layer-wise strategies.

    fedper/fedrep take the head from the local set; fedbn takes norm affine
    parameters and running statistics from the local set.
    """
    if kind not in LOCAL_TAGS:
        raise ValueError(f"layerwise_merge supports {sorted(LOCAL_TAGS)}, got {kind!r}")
    local = LOCAL_TAGS[kind]
    present = set(theta_global.tags.values())
    if not present & set(local):
        raise ValueError(f"{kind} needs parameters tagged {local}, model has {sorted(present)}")
    return theta_global.merge_from(theta_local, local)


def local_finetune(problem, theta: ParamSet, post_epochs: int, lr: float) -> ParamSet:
    """Fine-tune a trained model locally; epoch streams are finetune-specific."""
    if post_epochs < 0:
        raise ValueError("post_epochs must be non-negative")
    idxs = range(FINETUNE_EPOCH_BASE, FINETUNE_EPOCH_BASE + post_epochs)
    theta, _ = run_local_epochs(problem, theta, idxs, lr)
    return theta


# --------------------------------------------------------------------------
# Round dispatcher used by the engine.

def init_strategy_state(kind: StrategyKind, theta0: ParamSet, client_ids) -> StrategyState:
    state = StrategyState(kind=kind, global_params=theta0.clone())
    if kind.kind == "scaffold":
        state.control_global = param_zeros_like(theta0)
        state.control_clients = {cid: param_zeros_like(theta0) for cid in client_ids}
    elif kind.kind == "fedadam":
        state.adam_m = param_zeros_like(theta0)
        state.adam_v = param_zeros_like(theta0)
    elif kind.kind == "fedbn":
        # fail before any training if the model has no norm layers
        layerwise_merge("fedbn", theta0, theta0)
    return state


def client_round(state: StrategyState, problem, client_id: int, round_idx: int,
                 epochs: int, lr: float) -> Contribution:
    kind = state.kind
    theta_g = state.global_params
    if kind.kind in ("fedavg", "finetune"):
        return Contribution(client_id, client_update_fedavg(problem, theta_g, round_idx, epochs, lr))
    if kind.kind == "fedprox":
        return Contribution(client_id, client_update_fedprox(problem, theta_g, round_idx, epochs, lr, kind.mu))
    if kind.kind == "fedadam":
        return Contribution(client_id, client_update_fedavg(problem, theta_g, round_idx, epochs, lr))
    if kind.kind == "scaffold":
        theta, c_new, delta_c = scaffold_client_round(
            problem, theta_g, state.control_global, state.control_clients[client_id],
            round_idx, epochs, lr)
        return Contribution(client_id, theta, delta_control=delta_c, new_control=c_new)
    if kind.kind in LOCAL_TAGS:
        start = theta_g
        if client_id in state.personal:
            start = layerwise_merge(kind.kind, theta_g, state.personal[client_id])
        if kind.kind == "fedrep":
            head_idxs = range(FEDREP_HEAD_EPOCH_BASE + round_idx * kind.head_epochs,
                              FEDREP_HEAD_EPOCH_BASE + (round_idx + 1) * kind.head_epochs)
            theta, _ = run_local_epochs(problem, start, head_idxs, lr, train_tags=("head",))
            theta, _ = run_local_epochs(problem, theta, _round_epochs(round_idx, epochs), lr,
                                        train_tags=("body", "norm_affine"))
        else:
            theta, _ = run_local_epochs(problem, start, _round_epochs(round_idx, epochs), lr)
        return Contribution(client_id, theta, personal=theta)
    if kind.kind == "pfedme":
        inner_lr = kind.inner_lr if kind.inner_lr is not None else lr
        outer_lr = kind.outer_lr if kind.outer_lr is not None else lr
        tilde, w = client_update_pfedme(problem, theta_g, round_idx, epochs,
                                        kind.lam, kind.inner_steps, inner_lr, outer_lr)
        return Contribution(client_id, w, personal=tilde)
    if kind.kind == "ditto":
        personal_prev = state.personal.get(client_id)
        global_out, personal = client_update_ditto(problem, theta_g, personal_prev,
                                                   round_idx, epochs, lr, kind.lam)
        return Contribution(client_id, global_out, personal=personal)
    raise ValueError(f"unhandled strategy {kind.kind!r}")


def aggregate_round(state: StrategyState, contributions: list[Contribution],
                    weights: dict[int, float]) -> None:
    """Fold sorted client contributions into the server state."""
    kind = state.kind
    contribs = sorted(contributions, key=lambda c: c.client_id)
    triples = [(c.client_id, weights[c.client_id], c.params) for c in contribs]
    averaged = server_aggregate_fedavg(triples)
    if kind.kind == "fedadam":
        theta, m, v = fedadam_server_step(state.global_params, triples, state.adam_m,
                                          state.adam_v, kind.eta, kind.beta1, kind.beta2, kind.tau)
        state.global_params, state.adam_m, state.adam_v = theta, m, v
    elif kind.kind == "scaffold":
        state.global_params = averaged
        delta_triples = [(c.client_id, weights[c.client_id], c.delta_control) for c in contribs]
        delta = server_aggregate_fedavg(delta_triples)
        state.control_global = param_axpy(1.0, state.control_global, 1.0, delta)
        for c in contribs:
            state.control_clients[c.client_id] = c.new_control
    elif kind.kind in LOCAL_TAGS:
        shared = tuple(t for t in ("body", "head", "norm_affine", "norm_stats")
                       if t not in LOCAL_TAGS[kind.kind])
        state.global_params = state.global_params.merge_from(averaged, shared)
    else:
        state.global_params = averaged
    for c in contribs:
        if c.personal is not None:
            state.personal[c.client_id] = c.personal
    state.round += 1


def finalize_strategy(state: StrategyState, problems: dict[int, object], lr: float) -> None:
    """Post-training work; only finetune trains per-client copies here."""
    if state.kind.kind == "finetune":
        for cid in sorted(problems):
            state.personal[cid] = local_finetune(problems[cid], state.global_params,
                                                 state.kind.post_epochs, lr)


def eval_params(state: StrategyState, client_id: int) -> ParamSet:
    """The model a client is evaluated with under the locally-tested protocol."""
    kind = state.kind.kind
    if kind in GLOBAL_EVAL_KINDS:
        return state.global_params
    if kind in LOCAL_TAGS:
        if client_id in state.personal:
            return layerwise_merge(kind, state.global_params, state.personal[client_id])
        return state.global_params
    if client_id in state.personal:
        return state.personal[client_id]
    return state.global_params
