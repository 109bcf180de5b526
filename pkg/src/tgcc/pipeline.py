"""End-to-end condensation: intervention, causal encoder, contrast and matching.

Gradient routing per step:

* ``L_causal`` updates the encoder only.
* ``L_InfoNCE`` updates the encoder and the synthetic graph.
* ``L_cond`` updates the synthetic graph only.
* The relay model is trained on the synthetic graph's cross-entropy only.

Each epoch draws a fresh relay initialization, refreshes the intervention
(one Theta step, new augmented adjacency, one eigensolve for the negatives)
and then runs ``steps_per_epoch`` outer steps.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import intervention as iv
from .causal import causal_loss_grad
from .condense import MatchState, MatchView, SynGradient, SyntheticGraph, hidden_vjp, init_synthetic, outer_step
from .contrast import build_negative, infonce_grad, readout
from .errors import NumericError
from .graph import Graph, degree_marginals, gcn_normalize, normalized_laplacian, spectral_decompose
from .relay import Adam, RelayModel, init_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TgccConfig:
    # causal objective
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    lam: float = 0.5
    # total-loss weights
    delta: float = 0.5
    eta: float = 1.0
    # intervention
    epsilon: float = 1.0
    rho: float = 0.1
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6
    lr_theta: float = 1.0
    # contrast
    kappas: tuple[float, ...] = (0.1, 0.2, 0.3)
    num_negatives: int = 3
    temperature: float = 0.5
    # condensation
    ratio: float = 0.026
    steps_per_epoch: int = 50
    inner_steps: int = 10
    epochs: int = 5
    hidden: int = 64
    lr_x: float = 1e-4
    lr_adj: float = 1e-4
    lr_relay: float = 0.01
    lr_encoder: float = 1e-3
    shared_encoder: bool = False
    seed: int = 0
    # evaluation
    eval_steps: int = 600
    eval_lr: float = 0.01
    eval_weight_decay: float = 5e-4
    eval_threshold: float | None = None
    link_test_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kappas", tuple(float(k) for k in self.kappas))
        weights = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta, eta=self.eta, rho=self.rho)
        bad = [k for k, v in weights.items() if v < 0]
        if bad:
            raise ValueError(f"weights must be nonnegative: {bad}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")
        if min(self.steps_per_epoch, self.inner_steps, self.epochs) < 1:
            raise ValueError("steps_per_epoch, inner_steps and epochs must be >= 1")
        if self.temperature <= 0 or self.num_negatives < 1 or not self.kappas:
            raise ValueError("contrast settings invalid")
        if any(not 0 <= k <= 1 for k in self.kappas):
            raise ValueError("kappa values must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "TgccConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "TgccConfig":
        return cls.from_dict(json.loads(text))

    def negative_kappas(self) -> list[float]:
        return [self.kappas[k % len(self.kappas)] for k in range(self.num_negatives)]


@dataclass
class RunArtifacts:
    syn: SyntheticGraph
    encoder: RelayModel
    epoch_trace: list[dict] = field(default_factory=list)
    step_trace: list[dict] = field(default_factory=list)
    config: TgccConfig = field(default_factory=TgccConfig)
    config_json: str = ""
    seed: int = 0
    relay_update_sources: list[str] = field(default_factory=list)


TERMS = ("L_causal", "L_InfoNCE", "L_cond")

FIELD_DOCS = {
    "alpha": "weight of the cross-view alignment term",
    "beta": "weight of the per-dimension std penalty",
    "gamma": "weight of the dimension independence term",
    "lam": "target standard deviation per embedding dimension",
    "delta": "weight of InfoNCE in the total loss",
    "eta": "weight of the gradient-matching loss in the total loss",
    "epsilon": "entropy weight of the transport problems",
    "rho": "edit budget as a fraction of total edge weight",
    "sinkhorn_iters": "Sinkhorn iteration cap",
    "sinkhorn_tol": "Sinkhorn L1 marginal tolerance",
    "lr_theta": "step size of the Theta ascent per epoch",
    "kappas": "fraction of the lower spectrum kept per negative (cycled)",
    "num_negatives": "number of spectral negatives per epoch",
    "temperature": "InfoNCE temperature",
    "ratio": "condensation ratio r; m = max(C, round(r n))",
    "steps_per_epoch": "outer matching steps per relay initialization",
    "inner_steps": "relay SGD steps on the synthetic graph per outer step",
    "epochs": "relay re-initializations (intervention refreshes)",
    "hidden": "hidden width of relay, encoder and evaluation GCNs",
    "lr_x": "Adam step size for synthetic features",
    "lr_adj": "Adam step size for synthetic adjacency logits",
    "lr_relay": "SGD step size of the relay inner loop",
    "lr_encoder": "Adam step size of the causal encoder",
    "shared_encoder": "use the relay's first layer as the causal encoder",
    "seed": "master seed",
    "eval_steps": "full-batch training steps during evaluation",
    "eval_lr": "Adam step size during evaluation",
    "eval_weight_decay": "weight decay during evaluation",
    "eval_threshold": "binarize the condensed adjacency at this value (null keeps weights)",
    "link_test_fraction": "fraction of edges held out for link prediction",
}


def augment(g: Graph, theta: np.ndarray, cfg: TgccConfig, L: np.ndarray | None = None):
    """Solve both transport plans for the current Theta and build the augmented graph."""
    if L is None:
        L = normalized_laplacian(g)
    A = g.dense_adjacency()
    a, b = degree_marginals(A)
    plus = iv.solve_delta_plus(A, L, theta, cfg.epsilon, a, b, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    minus = iv.solve_delta_minus(A, L, theta, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    plan = iv.InterventionPlan(plus, minus, theta, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    V = iv.intervene(A, plan, iv.budget_scale(A, cfg.rho))
    return plan, g.with_adjacency(V, augmented=True)


def intervention_sequence(g: Graph, cfg: TgccConfig, refreshes: int):
    """Yield ``(plan, augmented_graph)`` for successive Theta refreshes."""
    rng = np.random.default_rng(cfg.seed)
    L = normalized_laplacian(g)
    theta = iv.init_theta(g.n, rng)
    plan = None
    for k in range(refreshes):
        if plan is not None:
            theta = iv.update_theta(theta, iv.matching_term_grad(theta, L, plan.delta_plus), cfg.lr_theta)
        plan, g_aug = augment(g, theta, cfg, L)
        yield plan, g_aug


def _relu_px(px: np.ndarray, W1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = px @ W1
    return np.maximum(h, 0.0), h > 0


def _finite_or_abort(values: dict[str, float], epoch: int, step: int) -> None:
    for name in (*TERMS, "total"):
        if name in values and not math.isfinite(values[name]):
            raise NumericError(f"non-finite {name} at epoch {epoch}, step {step}")


def run_condense(g: Graph, cfg: TgccConfig, on_epoch: Callable[[dict], None] | None = None) -> RunArtifacts:
    config_json = cfg.to_json()
    rng = np.random.default_rng(cfg.seed)
    syn = init_synthetic(g, cfg.ratio, cfg.seed)
    encoder = init_model(g.d, cfg.hidden, g.num_classes, cfg.seed + 7919)
    enc_opt = Adam(cfg.lr_encoder)
    syn_opt = Adam({"xs": cfg.lr_x, "adj": cfg.lr_adj})
    lrs = {"lr_x": cfg.lr_x, "lr_adj": cfg.lr_adj, "lr_relay": cfg.lr_relay}
    view_A = MatchView.from_graph(g)
    relay_seeds = rng.integers(0, 2**31 - 1, size=cfg.epochs)
    art = RunArtifacts(syn, encoder, config=cfg, config_json=config_json, seed=cfg.seed)
    interventions = intervention_sequence(g, cfg, cfg.epochs)

    for epoch in range(cfg.epochs):
        _, g_aug = next(interventions)
        V = g_aug.adjacency
        view_V = MatchView.from_graph(g_aug)
        decomposition = spectral_decompose(normalized_laplacian(V))
        neg_px = []
        for kappa in cfg.negative_kappas():
            neg = build_negative(V, kappa, decomposition)
            neg_px.append(gcn_normalize(neg.adjacency_neg) @ g.features)

        relay = init_model(g.d, cfg.hidden, g.num_classes, int(relay_seeds[epoch]))
        if cfg.shared_encoder:
            relay = RelayModel(encoder.W1, relay.W2, relay.seed)
        state = MatchState(0, cfg.steps_per_epoch, relay, optimizer=syn_opt)
        rows = []
        for step in range(cfg.steps_per_epoch):
            W1 = encoder.W1
            zA, actA = _relu_px(view_A.px, W1)
            zV, actV = _relu_px(view_V.px, W1)
            terms, gzA, gzV = causal_loss_grad(zA, zV, cfg.alpha, cfg.beta, cfg.gamma, cfg.lam)
            gW1 = view_A.px.T @ (gzA * actA) + view_V.px.T @ (gzV * actV)

            P_s = gcn_normalize(syn.adjacency())
            q_s = P_s @ syn.xs
            z_s, act_s = _relu_px(q_s, W1)
            neg_z = [_relu_px(px, W1) for px in neg_px]
            nce, g_i, g_j, g_ms = infonce_grad(readout(z_s), readout(zV), [readout(z) for z, _ in neg_z], cfg.temperature)
            g_nce = q_s.T @ (np.broadcast_to(g_i / syn.m, z_s.shape) * act_s)
            g_nce = g_nce + view_V.px.T @ (np.broadcast_to(g_j / g.n, zV.shape) * actV)
            for (z, act), px, g_m in zip(neg_z, neg_px, g_ms):
                g_nce = g_nce + px.T @ (np.broadcast_to(g_m / g.n, z.shape) * act)
            # abort before any parameter sees a non-finite gradient
            _finite_or_abort({"L_causal": terms.total, "L_InfoNCE": nce}, epoch, step)
            gW1 = gW1 + cfg.delta * g_nce
            aux = None
            if cfg.delta:
                aux = hidden_vjp(syn, W1, np.broadcast_to(g_i / syn.m, z_s.shape)).scale(cfg.delta)

            new_W1 = enc_opt.step({"W1": W1}, {"W1": gW1})["W1"]
            encoder = RelayModel(new_W1, encoder.W2, encoder.seed)
            if cfg.shared_encoder:
                state.relay = RelayModel(new_W1, state.relay.W2, state.relay.seed)
                state.relay_update_sources.append("causal")

            step_lrs = lrs if (cfg.eta or cfg.delta) else {**lrs, "lr_x": 0.0, "lr_adj": 0.0}
            state, syn = outer_step(state, view_A, view_V, syn, step_lrs, cfg.inner_steps, aux, cfg.eta)
            if cfg.shared_encoder:
                encoder = RelayModel(state.relay.W1, encoder.W2, encoder.seed)
            l_cond = state.trace[-1]
            row = {
                "epoch": epoch,
                "step": step,
                "L_causal": terms.total,
                "L_InfoNCE": nce,
                "L_cond": l_cond,
            }
            row["total"] = row["L_causal"] + cfg.delta * row["L_InfoNCE"] + cfg.eta * row["L_cond"]
            _finite_or_abort(row, epoch, step)
            rows.append(row)
        art.step_trace.extend(rows)
        art.relay_update_sources.extend(state.relay_update_sources)
        summary = {"epoch": epoch}
        for name in TERMS:
            summary[name] = float(np.mean([r[name] for r in rows]))
        summary["total"] = summary["L_causal"] + cfg.delta * summary["L_InfoNCE"] + cfg.eta * summary["L_cond"]
        art.epoch_trace.append(summary)
        log.info("epoch %d %s", epoch, summary)
        if on_epoch is not None:
            on_epoch(summary)

    art.syn = syn
    art.encoder = encoder
    return art


def loss_report(artifacts: RunArtifacts) -> list[dict]:
    """Per-epoch table of the three loss terms and the weighted total."""
    return [{k: row[k] for k in ("epoch", *TERMS, "total")} for row in artifacts.epoch_trace]


def report_tsv(rows: list[dict]) -> str:
    if not rows:
        return ""
    first = ["epoch", *TERMS, "total"]
    cols = [c for c in first if c in rows[0]] + [c for c in rows[0] if c not in first]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
