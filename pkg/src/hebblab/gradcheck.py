"""Finite-difference verification harness for the full training losses.

The gate input is detached by design: the implemented theta-gradient is the
gradient of the objective with the neuromodulator input held at its base
value.  The closures here therefore freeze that input before probing, which
is exactly the function whose true derivative the backward pass computes.
Batch-norm running statistics are restored around every probe so repeated
forward passes see identical state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import models as M
from . import tensor as T
from .config import TrainConfig


def phase1_closure(model: M.ModelState, nm: L.NeuromodulatorState,
                   x: np.ndarray, labels: np.ndarray, config: TrainConfig):
    """Closure computing the phase-1 objective with a frozen gate input."""
    bn_snap = model.snapshot_bn()
    taps = M.forward(model, x, "train")
    base_ce = L.cross_entropy(taps.logits, labels).item()
    model.restore_bn(bn_snap)

    def build():
        model.restore_bn(bn_snap)
        taps = M.forward(model, x, "train")
        ce = L.cross_entropy(taps.logits, labels)
        hebb = L.hebbian_regularizer(taps.hebbian_activation, taps.hebbian_weight,
                                     config.hebb_activation_stat)
        nu = L.neuromodulator(nm, base_ce)
        if config.lambda_hebb1 > 0:
            return T.add(ce, T.scale(T.mul(nu, hebb), config.lambda_hebb1))
        return ce

    return build


def phase2_closure(model: M.ModelState, nm: L.NeuromodulatorState,
                   x_a: np.ndarray, x_b: np.ndarray, labels_a: np.ndarray,
                   labels_b: np.ndarray, frozen: dict[str, np.ndarray],
                   config: TrainConfig):
    """Closure computing the phase-2 objective with a frozen gate input."""
    bn_snap = model.snapshot_bn()
    taps_a = M.forward(model, x_a, "train")
    taps_b = M.forward(model, x_b, "train")
    base_gate = 0.5 * (L.cross_entropy(taps_a.logits, labels_a).item()
                       + L.cross_entropy(taps_b.logits, labels_b).item())
    model.restore_bn(bn_snap)
    same = np.asarray(labels_a) == np.asarray(labels_b)

    def build():
        model.restore_bn(bn_snap)
        taps_a = M.forward(model, x_a, "train")
        taps_b = M.forward(model, x_b, "train")
        total = T.add(L.cross_entropy(taps_a.logits, labels_a),
                      L.cross_entropy(taps_b.logits, labels_b))
        if config.lambda_metric > 0:
            metric = L.pairwise_margin_loss(taps_a.embedding, taps_b.embedding,
                                            same, config.margin)
            total = T.add(total, T.scale(metric, config.lambda_metric))
        gated = None
        if config.lambda_cons > 0:
            gated = T.scale(L.consolidation_penalty(model.params, frozen),
                            config.lambda_cons)
        if config.lambda_hebb2 > 0:
            hebb = T.scale(T.add(
                L.hebbian_regularizer(taps_a.hebbian_activation,
                                      taps_a.hebbian_weight,
                                      config.hebb_activation_stat),
                L.hebbian_regularizer(taps_b.hebbian_activation,
                                      taps_b.hebbian_weight,
                                      config.hebb_activation_stat)), 0.5)
            weighted = T.scale(hebb, config.lambda_hebb2)
            gated = weighted if gated is None else T.add(gated, weighted)
        if gated is not None:
            total = T.add(total, T.mul(L.neuromodulator(nm, base_gate), gated))
        return total

    return build


@dataclass
class GradCheckResult:
    case: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_gradcheck(max_elements_per_param: int = 4, seed: int = 0,
                  tolerance: float = 1e-4,
                  eps=(1e-5, 1e-6, 1e-7)) -> list[GradCheckResult]:
    """Run the FD suite: both backbones x both phase losses, 64-bit.

    Every theta and phi parameter tensor is probed on a deterministic
    subsample of ``max_elements_per_param`` elements, over a schedule of
    step sizes (see ``check_gradients``).
    """
    results = []
    with T.default_dtype("float64"):
        rng = np.random.default_rng(seed)
        for arch in ("tiny_vgg", "mini_resnet"):
            model = M.build_model(arch, num_classes=3, input_size=16,
                                  seed=seed + 1)
            nm = L.build_neuromodulator(seed=seed + 2)
            config = TrainConfig()
            params = list(model.params.values()) + list(nm.params.values())

            x = rng.random((2, 3, 16, 16))
            labels = rng.integers(0, 3, size=2)
            err = T.check_gradients(
                phase1_closure(model, nm, x, labels, config), params,
                eps=eps, max_elements_per_param=max_elements_per_param,
                seed=seed)
            results.append(GradCheckResult(f"{arch}/phase1", err, tolerance))

            # one pair for the plain stack; two pairs where batch norm
            # requires N >= 2 per side
            pairs = 1 if arch == "tiny_vgg" else 2
            x_a = rng.random((pairs, 3, 16, 16))
            x_b = rng.random((pairs, 3, 16, 16))
            labels_a = rng.integers(0, 3, size=pairs)
            labels_b = rng.integers(0, 3, size=pairs)
            frozen = {k: v + 0.05 * rng.normal(size=v.shape)
                      for k, v in model.snapshot_params().items()}
            err = T.check_gradients(
                phase2_closure(model, nm, x_a, x_b, labels_a, labels_b,
                               frozen, config), params,
                eps=eps, max_elements_per_param=max_elements_per_param,
                seed=seed)
            results.append(GradCheckResult(f"{arch}/phase2", err, tolerance))
    return results
