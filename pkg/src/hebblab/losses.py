"""Objective terms of the two-phase training method and their composition.

Phase 1:  CE + lambda_hebb1 * nu(CE) * R_hebb
Phase 2:  CE_A + CE_B + lambda_metric * L_metric
          + nu(mean CE) * (lambda_cons * ||theta - theta_frozen||^2
                           + lambda_hebb2 * (R_hebb_A + R_hebb_B) / 2)

The gate input is the detached scalar CE value: nu modulates theta only
multiplicatively, while phi (the gating MLP) receives gradients through nu.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .models import ForwardTaps, ModelState
from .tensor import Tensor

NM_HIDDEN = 8
# The sigmoid output is squeezed into [NU_FLOOR, 1 - NU_FLOOR] so the gate
# stays strictly inside (0, 1) even where the sigmoid saturates in floats.
NU_FLOOR = 1e-6


@dataclass
class NeuromodulatorState:
    """Parameters of the gating MLP: 1 input -> 8 ReLU units -> 1 sigmoid."""

    params: dict[str, Tensor]

    def snapshot_params(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_params(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            raise ValueError("neuromodulator parameter-set mismatch")
        for name, p in self.params.items():
            p.data = arrays[name].astype(p.data.dtype)
            p.grad = None

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None


def build_neuromodulator(seed: int = 0) -> NeuromodulatorState:
    rng = np.random.default_rng(seed)
    b1 = np.sqrt(6.0 / 1.0)
    b2 = np.sqrt(6.0 / NM_HIDDEN)
    params = {
        "w1": T.Tensor(rng.uniform(-b1, b1, size=(1, NM_HIDDEN)), requires_grad=True),
        "b1": T.Tensor(np.zeros(NM_HIDDEN), requires_grad=True),
        "w2": T.Tensor(rng.uniform(-b2, b2, size=(NM_HIDDEN, 1)), requires_grad=True),
        "b2": T.Tensor(np.zeros(1), requires_grad=True),
    }
    return NeuromodulatorState(params=params)


def neuromodulator(state: NeuromodulatorState, ce_value: float) -> Tensor:
    """Gate nu in (0, 1) from the detached scalar cross-entropy value."""
    if not np.isfinite(ce_value):
        raise ValueError(f"neuromodulator input must be finite, got {ce_value}")
    p = state.params
    x = T.Tensor(np.array([[ce_value]]))
    hidden = T.relu(T.dense(x, p["w1"], p["b1"]))
    out = T.sigmoid(T.dense(hidden, p["w2"], p["b2"]))
    out = T.shift(T.scale(out, 1.0 - 2.0 * NU_FLOOR), NU_FLOOR)
    return T.reshape(out, ())


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be [N, K], got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: expected {logits.shape[0]} labels, "
                         f"got shape {labels.shape}")
    picked = T.pick(T.log_softmax(logits), labels)
    return T.scale(T.mean_all(picked), -1.0)


def hebbian_regularizer(activation: Tensor, weight: Tensor,
                        stat: str = "mean") -> Tensor:
    """Mean over filters of (mean activation - mean kernel weight)^2.

    ``stat`` selects the activation statistic: "mean" averages the post-ReLU
    map over batch and space; "max_per_map" averages the per-image spatial
    maxima instead (the alternative reading, kept behind this switch).
    """
    if activation.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("hebbian_regularizer: expected rank-4 activation and weight")
    if activation.shape[1] != weight.shape[0]:
        raise ValueError(
            f"hebbian_regularizer: activation has {activation.shape[1]} channels "
            f"but weight has {weight.shape[0]} filters")
    if stat == "mean":
        abar = T.mean_axes(activation, (0, 2, 3))
    elif stat == "max_per_map":
        abar = T.mean_axes(T.spatial_max(activation), (0,))
    else:
        raise ValueError(f"unknown activation statistic {stat!r}")
    wbar = T.mean_axes(weight, (1, 2, 3))
    return T.mean_all(T.square(T.sub(abar, wbar)))


def pairwise_margin_loss(emb_a: Tensor, emb_b: Tensor, same_class,
                         margin: float) -> Tensor:
    """Contrastive pair loss, averaged over the pair batch.

    Same class: squared distance.  Different class: squared hinge
    [max(0, margin - distance)]^2.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if emb_a.data.ndim == 1:
        emb_a = T.reshape(emb_a, (1, emb_a.shape[0]))
        emb_b = T.reshape(emb_b, (1, emb_b.shape[0]))
    if emb_a.shape != emb_b.shape:
        raise ValueError(f"embedding dimension mismatch: {emb_a.shape} vs {emb_b.shape}")
    n = emb_a.shape[0]
    same = np.broadcast_to(np.asarray(same_class, dtype=bool), (n,))
    same_f = same.astype(emb_a.data.dtype)

    d2 = T.sum_axes(T.square(T.sub(emb_a, emb_b)), (1,))
    dist = T.sqrt(d2)
    hinge = T.relu(T.shift(T.scale(dist, -1.0), margin))
    per_pair = T.add(T.mul_const(d2, same_f),
                     T.mul_const(T.square(hinge), 1.0 - same_f))
    return T.mean_all(per_pair)


def consolidation_penalty(params: dict[str, Tensor],
                          frozen: dict[str, np.ndarray]) -> Tensor:
    """Unweighted quadratic penalty sum_theta (theta - theta_frozen)^2."""
    if set(params) != set(frozen):
        raise ValueError("consolidation_penalty: parameter-set mismatch")
    total = None
    for name, p in params.items():  # fixed iteration order
        ref = frozen[name]
        if ref.shape != p.data.shape:
            raise ValueError(f"consolidation_penalty: shape mismatch for {name}")
        term = T.sum_all(T.square(T.add_const(p, -ref.astype(p.data.dtype))))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("consolidation_penalty: empty parameter set")
    return total


@dataclass
class LossBreakdown:
    """Scalar total (graph tensor) plus reporting values for every term."""

    total: Tensor
    ce: float
    hebbian: float
    nu: float
    metric: float = 0.0
    consolidation: float = 0.0
    hebbian_weighted: float = 0.0
    metric_weighted: float = 0.0
    consolidation_weighted: float = 0.0
    ce_a: float = 0.0
    ce_b: float = 0.0


def phase1_loss(taps: ForwardTaps, labels, nm: NeuromodulatorState,
                config: TrainConfig) -> LossBreakdown:
    """CE plus the gated Hebbian term; reduces to plain CE when the
    coefficient is zero (the gated branch is not graphed at all then)."""
    ce = cross_entropy(taps.logits, labels)
    ce_val = ce.item()
    hebb = hebbian_regularizer(taps.hebbian_activation, taps.hebbian_weight,
                               config.hebb_activation_stat)
    nu = neuromodulator(nm, ce_val)
    lam = config.lambda_hebb1
    if lam > 0:
        total = T.add(ce, T.scale(T.mul(nu, hebb), lam))
    else:
        total = ce
    hebb_val, nu_val = hebb.item(), nu.item()
    return LossBreakdown(total=total, ce=ce_val, hebbian=hebb_val, nu=nu_val,
                         hebbian_weighted=lam * nu_val * hebb_val)


def phase2_loss(taps_a: ForwardTaps, taps_b: ForwardTaps, labels_a, labels_b,
                model: ModelState, frozen: dict[str, np.ndarray],
                nm: NeuromodulatorState, config: TrainConfig) -> LossBreakdown:
    """Pairwise fine-tuning objective; the gate is evaluated on the mean of
    the two CE values and scales consolidation plus continued Hebbian."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    ce_a = cross_entropy(taps_a.logits, labels_a)
    ce_b = cross_entropy(taps_b.logits, labels_b)
    metric = pairwise_margin_loss(taps_a.embedding, taps_b.embedding,
                                  labels_a == labels_b, config.margin)
    hebb = T.scale(T.add(
        hebbian_regularizer(taps_a.hebbian_activation, taps_a.hebbian_weight,
                            config.hebb_activation_stat),
        hebbian_regularizer(taps_b.hebbian_activation, taps_b.hebbian_weight,
                            config.hebb_activation_stat)), 0.5)
    cons = consolidation_penalty(model.params, frozen)
    nu = neuromodulator(nm, 0.5 * (ce_a.item() + ce_b.item()))

    total = T.add(ce_a, ce_b)
    if config.lambda_metric > 0:
        total = T.add(total, T.scale(metric, config.lambda_metric))
    gated = None
    if config.lambda_cons > 0:
        gated = T.scale(cons, config.lambda_cons)
    if config.lambda_hebb2 > 0:
        weighted_hebb = T.scale(hebb, config.lambda_hebb2)
        gated = weighted_hebb if gated is None else T.add(gated, weighted_hebb)
    if gated is not None:
        total = T.add(total, T.mul(nu, gated))

    ce_a_val, ce_b_val = ce_a.item(), ce_b.item()
    hebb_val, cons_val, metric_val, nu_val = (hebb.item(), cons.item(),
                                              metric.item(), nu.item())
    return LossBreakdown(
        total=total, ce=ce_a_val + ce_b_val, ce_a=ce_a_val, ce_b=ce_b_val,
        hebbian=hebb_val, nu=nu_val, metric=metric_val, consolidation=cons_val,
        hebbian_weighted=nu_val * config.lambda_hebb2 * hebb_val,
        metric_weighted=config.lambda_metric * metric_val,
        consolidation_weighted=nu_val * config.lambda_cons * cons_val)
