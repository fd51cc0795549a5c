"""Meta-training across device groups and few-pilot adaptation.

A single shared initialisation is learned over K training device groups:
each epoch every group's pilots are re-split at random into two halves,
one inner SGD step is taken on the first half, and the loss of the
stepped parameters on the second half drives the outer update. The outer
gradient is differentiated through the inner step exactly (including the
curvature term) unless the first-order approximation is requested.

Note the split roles: the inner step uses the query half and the outer
loss the support half. That assignment is deliberate (it mirrors the
procedure this simulator reproduces, which inverts the more common
naming); `swap_split_roles` restores the conventional assignment.

The outer Adam step size decays linearly from `outer_step` to
`outer_step_final` over the training run. Constant aggressive steps kill
these very small ReLU networks (units die and the model degenerates to a
constant output), while a constant small step neither converges within the
epoch budget nor leaves a quiet loss tail; the decayed schedule does both.

At test time the learned initialisation is adapted to a target device
with plain full-batch SGD on its few pilots. Per-example losses are
summed, not averaged, by default (`reduction`), so the effective
adaptation step grows with the pilot count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import OptimizerState, init_optimizer, opt_step_vec
from .phy import Constellation, MetaDataset, PilotSet, bpsk, gen_target_pilots
from .sicnet import (SicNetModel, build_default, combined_loss_grad,
                     combined_loss_hvp, sicnet_ser)

DEFAULT_REDUCTION = "sum"


@dataclass
class MetaConfig:
    """Step sizes, split sizes and loop lengths for meta-training."""

    outer_step: float = 0.02
    outer_step_final: float | None = 0.002
    inner_step: float = 0.001
    adapt_step: float = 0.001
    support_size: int = 4
    query_size: int = 4
    meta_epochs: int = 300
    adapt_epochs: int = 1000
    second_order: bool = True
    outer_optimizer: str = "adam"
    swap_split_roles: bool = False
    reduction: str = DEFAULT_REDUCTION

    def __post_init__(self) -> None:
        if self.outer_step < 0 or self.inner_step < 0 or self.adapt_step < 0:
            raise ValueError("step sizes must be >= 0")
        if self.outer_step_final is not None and self.outer_step_final < 0:
            raise ValueError("final outer step must be >= 0")
        if self.support_size < 1 or self.query_size < 1:
            raise ValueError("split sizes must be >= 1")
        if self.meta_epochs < 0 or self.adapt_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def outer_step_at(self, epoch: int) -> float:
        """Linearly decayed outer step for the given epoch."""
        if self.outer_step_final is None or self.meta_epochs <= 1:
            return self.outer_step
        frac = epoch / (self.meta_epochs - 1)
        return self.outer_step + (self.outer_step_final - self.outer_step) * frac


@dataclass
class MetaState:
    """Learned shared initialisation plus training bookkeeping."""

    model: SicNetModel
    opt_state: OptimizerState
    loss_trace: np.ndarray
    config: MetaConfig = field(default_factory=MetaConfig)

    @property
    def n_params(self) -> int:
        return self.model.n_params

    @property
    def reported_params(self) -> int:
        """Learned vector plus the adapted working copy used at test time."""
        return 2 * self.model.n_params


def inner_adapt(model: SicNetModel, pilots, step: float,
                reduction: str = DEFAULT_REDUCTION) -> SicNetModel:
    """One full-batch SGD step on the combined loss of a pilot batch.

    `pilots` is a PilotSet or an (rx_features, labels) pair.
    """
    if isinstance(pilots, PilotSet):
        if pilots.size == 0:
            raise ValueError("pilot set is empty")
        rx, labels = pilots.rx_features(), pilots.symbols
    else:
        rx, labels = pilots
        if np.asarray(rx).shape[0] == 0:
            raise ValueError("pilot batch is empty")
    _, grad = combined_loss_grad(model, rx, labels, reduction)
    return model.with_theta(model.theta - step * grad)


def _outer_grad(model: SicNetModel, rx_in, lab_in, rx_out, lab_out,
                inner_step: float, second_order: bool,
                reduction: str = DEFAULT_REDUCTION):
    """Loss and gradient of the outer objective through one inner step.

    Returns (loss at the adapted parameters, gradient w.r.t. the shared
    parameters). First order drops the curvature term, which makes the
    result exactly the plain gradient at the adapted parameters.
    """
    _, g_in = combined_loss_grad(model, rx_in, lab_in, reduction)
    adapted = model.with_theta(model.theta - inner_step * g_in)
    loss_out, g_out = combined_loss_grad(adapted, rx_out, lab_out, reduction)
    if second_order and inner_step != 0.0:
        g_out = g_out - inner_step * combined_loss_hvp(model, rx_in, lab_in,
                                                       g_out, reduction)
    return loss_out, g_out


def meta_train(data: MetaDataset, cfg: MetaConfig, seed) -> MetaState:
    """Learn a shared initialisation over the dataset's device groups.

    Per epoch and group: re-split the group's pilots, take one inner step
    of size inner_step on one half, accumulate the gradient of the other
    half's loss at the stepped parameters (summed over groups, exactly
    differentiated through the step unless second_order is off), then
    apply one outer optimizer step. The per-epoch trace records the
    summed outer loss before each update. Deterministic per seed,
    including the splits.
    """
    need = cfg.support_size + cfg.query_size
    for g in data.groups:
        if g.size < need:
            raise ValueError(
                f"group {g.group_id} has {g.size} pilots, "
                f"needs at least {need} for the support/query split"
            )
    model = build_default(
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,))))
    split_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    theta = model.theta
    opt = init_optimizer(cfg.outer_optimizer, cfg.outer_step, theta.size)
    trace = np.empty(cfg.meta_epochs)
    features = [(g.rx_features(), g.symbols) for g in data.groups]
    for epoch in range(cfg.meta_epochs):
        current = model.with_theta(theta)
        total_grad = np.zeros_like(theta)
        total_loss = 0.0
        for (rx, labels), group in zip(features, data.groups):
            perm = split_rng.permutation(group.size)
            support = perm[: cfg.support_size]
            query = perm[cfg.support_size : need]
            if cfg.swap_split_roles:
                step_idx, eval_idx = support, query
            else:
                step_idx, eval_idx = query, support
            loss, grad = _outer_grad(
                current, rx[step_idx], labels[step_idx],
                rx[eval_idx], labels[eval_idx],
                cfg.inner_step, cfg.second_order, cfg.reduction,
            )
            total_grad += grad
            total_loss += loss
        trace[epoch] = total_loss
        opt.step_size = cfg.outer_step_at(epoch)
        theta, opt = opt_step_vec(theta, total_grad, opt)
    return MetaState(model.with_theta(theta), opt, trace, replace(cfg))


def adapt(state: MetaState, target_pilots: PilotSet, step: float | None = None,
          epochs: int | None = None) -> SicNetModel:
    """Fine-tune the learned initialisation on a target device's pilots.

    Plain full-batch SGD; the state itself is never modified, so two
    target devices can be adapted in either order with identical results.
    Step size and epoch count default to the training configuration.
    """
    if target_pilots.size == 0:
        raise ValueError("pilot set is empty")
    step = state.config.adapt_step if step is None else step
    epochs = state.config.adapt_epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rx = target_pilots.rx_features()
    labels = target_pilots.symbols
    theta = state.model.theta
    model = state.model
    for _ in range(epochs):
        model = model.with_theta(theta)
        _, grad = combined_loss_grad(model, rx, labels, state.config.reduction)
        theta = theta - step * grad
    return state.model.with_theta(theta)


def meta_ser(state: MetaState, n_pilots: int, h, snr_db: float, n_symbols: int,
             seed, n_realizations: int = 20,
             constellation: Constellation | None = None, powers=(4.0, 1.0),
             pilot_snr_db: float | None = None) -> np.ndarray:
    """Adapted-model symbol error rate, averaged over target realizations.

    Each realization draws fresh pilots (channel fixed to `h`, or uniform
    over {+1, -1} when h is None), adapts the learned initialisation, and
    evaluates on a fresh stream of n_symbols transmissions. Pilots are
    received at `pilot_snr_db` (defaults to the evaluation SNR).
    """
    if n_pilots < 1:
        raise ValueError("need at least one pilot")
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    constellation = constellation or bpsk()
    powers = np.asarray(powers, dtype=np.float64)
    pilot_snr = snr_db if pilot_snr_db is None else pilot_snr_db
    total = np.zeros(state.model.n_devices)
    for r in range(n_realizations):
        pilot_seed = np.random.SeedSequence(seed, spawn_key=(r, 0))
        eval_seed = np.random.SeedSequence(seed, spawn_key=(r, 1))
        pilots = gen_target_pilots(n_pilots, constellation, powers, h,
                                   pilot_snr, pilot_seed)
        model = adapt(state, pilots)
        total += sicnet_ser(model, pilots.h, snr_db, n_symbols, eval_seed,
                            constellation, powers)
    return total / n_realizations
