"""Update rules: plain momentum SGD, two-rate and multi-tier cycles, and variants.

Stepsize conventions differ by family, matching how each scheme is usually
quoted. For the drift-style cycles (macro_step, multi_tier_cycle) cfg.h is the
stepsize of the SLOWEST tier; every tier drifts each micro-step with the
micro-stepsize h / P (P the slowest refresh period, i.e. cfg.k for two tiers),
so a tier with period p effectively trains with stepsize h * p / P. For
random_subset_cycle cfg.h is the FAST stepsize and the slow (masked) part
takes its single update with stepsize h * k. vanilla_step and noise_step use
cfg.h directly.

A cycle consumes one minibatch per micro-step. The first micro-step's full
backward pass supplies both the slow-tier gradient refresh and the fast
gradient of that step; later micro-steps within the cycle only need gradients
for the tiers that refresh, so a layer-suffix partition gets away with a
truncated backward pass there. That reuse applies in both drift modes, so per
two-tier cycle the counters record k*L forward and L + (k-1)*l backward layer
visits for a suffix of l fast layers out of L.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .linalg import CostCounters, RngStream
from .model import backward_full, backward_truncated, forward, loss_value
from .partition import Partition, RateTier, resample_masks

__all__ = [
    "NoiseConfig",
    "MultirateConfig",
    "OptState",
    "init_state",
    "rate_tiers",
    "vanilla_step",
    "macro_step",
    "macro_step_wd",
    "multi_tier_cycle",
    "random_subset_cycle",
    "remask_step",
    "composite_average_step",
    "noise_step",
]


@dataclass(frozen=True)
class NoiseConfig:
    """Per-tier friction and temperature for the Langevin-style step."""

    gammas: tuple
    taus: tuple

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in np.atleast_1d(self.gammas)))
        object.__setattr__(self, "taus", tuple(float(t) for t in np.atleast_1d(self.taus)))
        if any(g <= 0 for g in self.gammas):
            raise DomainError(f"friction must be > 0: {self.gammas}")
        if any(t < 0 for t in self.taus):
            raise DomainError(f"temperature must be >= 0: {self.taus}")

    def for_tier(self, tier):
        g = self.gammas[tier] if tier < len(self.gammas) else self.gammas[-1]
        t = self.taus[tier] if tier < len(self.taus) else self.taus[-1]
        return g, t


@dataclass(frozen=True)
class MultirateConfig:
    """Hyperparameters shared by all step functions.

    weight_decay may be a scalar (same for every tier) or a per-tier sequence;
    the decay term enters the momentum refresh, so it sees the tier's own
    refresh schedule. slow_stepsize overrides the slowest tier's stepsize
    (uncoupled mode); same_lr instead pins it to the micro-stepsize, which is
    the "slow refresh without the larger stepsize" ablation.
    """

    h: float
    k: int = 1
    momentum: float = 0.9
    drift: bool = True
    weight_decay: object = 0.0
    slow_stepsize: float | None = None
    same_lr: bool = False
    noise: NoiseConfig | None = None

    def __post_init__(self):
        # h = 0 is legal for the plain step (momenta accumulate, parameters
        # hold still); the cycle entry points reject it when they derive
        # per-tier stepsizes.
        if self.h < 0:
            raise DomainError(f"h must be >= 0, got {self.h}")
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must be in [0, 1), got {self.momentum}")
        wd = np.atleast_1d(np.asarray(self.weight_decay, dtype=np.float64))
        if (wd < 0).any():
            raise DomainError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.slow_stepsize is not None and self.slow_stepsize <= 0:
            raise DomainError(f"slow_stepsize must be > 0, got {self.slow_stepsize}")
        if self.same_lr and self.slow_stepsize is not None:
            raise DomainError("same_lr and slow_stepsize are mutually exclusive")

    def omega(self, tier):
        wd = np.atleast_1d(np.asarray(self.weight_decay, dtype=np.float64))
        return float(wd[tier]) if tier < wd.size else float(wd[-1])


@dataclass
class OptState:
    """Mutable optimizer state: momenta per block, step counts, sampling rng."""

    momenta: dict
    rng: RngStream
    counters: CostCounters = field(default_factory=CostCounters)
    micro_step: int = 0
    macro_step: int = 0
    stash: dict | None = None


def init_state(net, rng):
    """Zero momenta for every block; ``rng`` drives mask/noise sampling."""
    momenta = {pid: np.zeros_like(net.get_param(pid)) for pid in net.param_ids()}
    return OptState(momenta=momenta, rng=rng)


def _periods_for(part, cfg):
    if part.periods is not None:
        return part.periods
    return (1, cfg.k)


def rate_tiers(part, cfg):
    """Resolved RateTier list: periods plus effective per-tier stepsizes."""
    periods = _periods_for(part, cfg)
    P = periods[-1]
    micro = cfg.h / P
    steps = [micro * p for p in periods]
    if cfg.same_lr:
        steps[-1] = micro
    elif cfg.slow_stepsize is not None:
        steps[-1] = cfg.slow_stepsize
    return [RateTier(i, periods[i], steps[i]) for i in range(len(periods))]


def _check_batches(batches, n):
    if len(batches) != n:
        raise ContractError(f"cycle needs {n} minibatches, got {len(batches)}")


def _refresh_block(mom, grad, theta, mu, omega):
    g = grad + omega * theta if omega != 0.0 else grad
    np.multiply(mom, mu, out=mom)
    mom += g


def _refresh_masked(mom, grad, theta, mu, omega, sel):
    g = grad[sel] + omega * theta[sel] if omega != 0.0 else grad[sel]
    mom[sel] = mu * mom[sel] + g


def vanilla_step(net, state, cfg, batch):
    """One momentum-SGD step on a single minibatch at stepsize cfg.h."""
    x, y = batch
    forward(net, x, state.counters)
    loss = loss_value(net, y)
    grads = backward_full(net, y, state.counters)
    for pid in net.param_ids():
        theta = net.get_param(pid)
        _refresh_block(state.momenta[pid], grads[pid], theta, cfg.momentum, cfg.omega(0))
        theta -= cfg.h * state.momenta[pid]
    state.micro_step += 1
    return loss


def _due_backward_depth(net, part, due):
    """How many top layers the backward pass must reach for the due tiers."""
    min_layer = net.n_layers
    for pid, tier in part.assignment.items():
        if tier in due:
            min_layer = min(min_layer, pid.layer)
    if part.masks:
        # the fast half of a masked block refreshes every micro-step
        for pid in part.masks:
            min_layer = min(min_layer, pid.layer)
    return net.n_layers - min_layer


def _drift_cycle(net, state, part, cfg, batches, periods):
    n_tiers = len(periods)
    P = periods[-1]
    _check_batches(batches, P)
    tiers = rate_tiers(part, cfg)
    micro_drift = [t.stepsize / t.period for t in tiers]
    mu = cfg.momentum
    losses = []
    for t in range(P):
        due = {i for i in range(n_tiers) if t % periods[i] == 0}
        x, y = batches[t]
        forward(net, x, state.counters)
        losses.append(loss_value(net, y))
        depth = _due_backward_depth(net, part, due)
        if depth < net.n_layers:
            grads = backward_truncated(net, y, depth, state.counters)
        else:
            grads = backward_full(net, y, state.counters)
        for pid in net.param_ids():
            theta = net.get_param(pid)
            mom = state.momenta[pid]
            if pid in part.masks:
                mask = part.masks[pid]
                _refresh_masked(mom, grads[pid], theta, mu, cfg.omega(0), ~mask)
                if 1 in due:
                    _refresh_masked(mom, grads[pid], theta, mu, cfg.omega(1), mask)
            else:
                tier = part.assignment[pid]
                if tier in due:
                    _refresh_block(mom, grads[pid], theta, mu, cfg.omega(tier))
        if cfg.drift:
            for pid in net.param_ids():
                theta = net.get_param(pid)
                mom = state.momenta[pid]
                if pid in part.masks:
                    mask = part.masks[pid]
                    theta[~mask] -= micro_drift[0] * mom[~mask]
                    theta[mask] -= micro_drift[1] * mom[mask]
                else:
                    theta -= micro_drift[part.assignment[pid]] * mom
        else:
            for pid in net.param_ids():
                theta = net.get_param(pid)
                mom = state.momenta[pid]
                if pid in part.masks:
                    mask = part.masks[pid]
                    theta[~mask] -= tiers[0].stepsize * mom[~mask]
                    if 1 in due:
                        theta[mask] -= tiers[1].stepsize * mom[mask]
                else:
                    tier = part.assignment[pid]
                    if tier == 0:
                        theta -= tiers[0].stepsize * mom
                    elif tier in due:
                        theta -= tiers[tier].stepsize * mom
        state.micro_step += 1
    state.macro_step += 1
    return float(np.mean(losses))


def macro_step(net, state, part, cfg, batches):
    """One two-tier cycle: k micro-steps consuming k minibatches.

    The slow tier refreshes momentum on the first micro-step's full gradient.
    With cfg.drift the slow parameters then move a k-th of their update each
    micro-step; without it they take the whole update at once and only the
    fast tier moves during the rest of the cycle.
    """
    if part.periods is not None:
        raise ContractError("partition carries its own periods; use multi_tier_cycle")
    if part.n_tiers > 2:
        raise ContractError(f"macro_step handles 2 tiers, partition has {part.n_tiers}")
    return _drift_cycle(net, state, part, cfg, batches, (1, cfg.k))


def macro_step_wd(net, state, part, cfg, batches):
    """macro_step with the weight-decay terms spelled out; zero decay is identical."""
    return macro_step(net, state, part, cfg, batches)


def multi_tier_cycle(net, state, part, cfg, batches):
    """One full cycle of a multi-tier partition: P micro-steps, P = slowest period."""
    if part.periods is None:
        raise ContractError("partition has no tier periods; build it with multi_tier()")
    return _drift_cycle(net, state, part, cfg, batches, part.periods)


def _stash_and_zero(net, part, state):
    stash = {}
    for pid, mask in part.masks.items():
        theta = net.get_param(pid)
        stash[pid] = theta[mask].copy()
        theta[mask] = 0.0
    state.stash = stash


def _restore(net, part, state):
    for pid, mask in part.masks.items():
        net.get_param(pid)[mask] = state.stash[pid]
    state.stash = None


def random_subset_cycle(net, state, part, cfg, batches):
    """Regularizing cycle: train with a random subset of weights switched off.

    The masked (slow) weights are stashed and set to zero for k fast steps at
    stepsize cfg.h; their momenta stay frozen meanwhile. They are then
    restored and the whole network takes one joint step on a fresh minibatch,
    fast entries at cfg.h and masked entries at k * cfg.h (or cfg.slow_stepsize
    if set). Consumes k + 1 minibatches and returns (mean loss, next
    partition) with freshly sampled masks.
    """
    if part.mode != "random-subset" or not part.masks:
        raise ContractError("random_subset_cycle needs a random-subset partition")
    _check_batches(batches, cfg.k + 1)
    h_slow = cfg.slow_stepsize if cfg.slow_stepsize is not None else cfg.h * cfg.k
    if cfg.same_lr:
        h_slow = cfg.h
    mu = cfg.momentum
    losses = []
    _stash_and_zero(net, part, state)
    for t in range(cfg.k):
        x, y = batches[t]
        forward(net, x, state.counters)
        losses.append(loss_value(net, y))
        grads = backward_full(net, y, state.counters)
        for pid in net.param_ids():
            theta = net.get_param(pid)
            mom = state.momenta[pid]
            if pid in part.masks:
                # whole-array arithmetic with a selective write-back; scalar
                # for scalar this matches the gather/scatter form but avoids
                # the fancy-indexing cost on the big weight blocks
                fast = ~part.masks[pid]
                g = grads[pid]
                if cfg.omega(0) != 0.0:
                    g = g + cfg.omega(0) * theta
                if mu == 0.0:
                    np.copyto(mom, g, where=fast)
                else:
                    np.copyto(mom, mu * mom + g, where=fast)
                np.copyto(theta, theta - cfg.h * mom, where=fast)
            else:
                _refresh_block(mom, grads[pid], theta, mu, cfg.omega(0))
                theta -= cfg.h * mom
        state.micro_step += 1
    _restore(net, part, state)
    x, y = batches[cfg.k]
    forward(net, x, state.counters)
    losses.append(loss_value(net, y))
    grads = backward_full(net, y, state.counters)
    for pid in net.param_ids():
        theta = net.get_param(pid)
        mom = state.momenta[pid]
        if pid in part.masks:
            mask = part.masks[pid]
            g = grads[pid]
            if cfg.omega(0) != 0.0 or cfg.omega(1) != 0.0:
                g = g + np.where(mask, cfg.omega(1), cfg.omega(0)) * theta
            np.multiply(mom, mu, out=mom)
            mom += g
            theta -= np.where(mask, h_slow, cfg.h) * mom
        else:
            _refresh_block(mom, grads[pid], theta, mu, cfg.omega(0))
            theta -= cfg.h * mom
    state.micro_step += 1
    state.macro_step += 1
    return float(np.mean(losses)), resample_masks(part, net, state.rng)


def remask_step(net, state, part, cfg, batch):
    """Ablation of the random-subset scheme with no separate timescale.

    Every step: zero the masked weights, take the gradient there, restore, and
    update ALL parameters with the same stepsize cfg.h, then resample the
    mask. Returns (loss, next partition).
    """
    if part.mode != "random-subset" or not part.masks:
        raise ContractError("remask_step needs a random-subset partition")
    x, y = batch
    _stash_and_zero(net, part, state)
    forward(net, x, state.counters)
    loss = loss_value(net, y)
    grads = backward_full(net, y, state.counters)
    _restore(net, part, state)
    for pid in net.param_ids():
        theta = net.get_param(pid)
        _refresh_block(state.momenta[pid], grads[pid], theta, cfg.momentum, cfg.omega(0))
        theta -= cfg.h * state.momenta[pid]
    state.micro_step += 1
    return loss, resample_masks(part, net, state.rng)


def composite_average_step(net_a, state_a, net_b, state_b, cfg, batches):
    """One averaging cycle of two copies trained at different stepsizes.

    Copy A takes k steps at the fast stepsize cfg.h on the k minibatches; copy
    B takes a single step at cfg.slow_stepsize on the first one. Both are then
    set to the parameter-wise mean. Requires slow_stepsize == k * h so the
    copies cover the same span per cycle. Momenta are per-copy and not merged.
    """
    if cfg.slow_stepsize is None:
        raise ContractError("composite averaging needs slow_stepsize")
    if abs(cfg.slow_stepsize - cfg.k * cfg.h) > 1e-12 * cfg.slow_stepsize:
        raise ContractError(
            f"slow_stepsize {cfg.slow_stepsize} must equal k*h = {cfg.k * cfg.h}"
        )
    ids_a, ids_b = net_a.param_ids(), net_b.param_ids()
    if ids_a != ids_b or any(
        net_a.get_param(pid).shape != net_b.get_param(pid).shape for pid in ids_a
    ):
        raise ContractError("the two copies have different architectures")
    _check_batches(batches, cfg.k)
    fast_cfg = MultirateConfig(h=cfg.h, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    slow_cfg = MultirateConfig(
        h=cfg.slow_stepsize, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    losses = [vanilla_step(net_a, state_a, fast_cfg, b) for b in batches]
    loss_b = vanilla_step(net_b, state_b, slow_cfg, batches[0])
    for pid in ids_a:
        mean = 0.5 * (net_a.get_param(pid) + net_b.get_param(pid))
        net_a.get_param(pid)[...] = mean
        net_b.get_param(pid)[...] = mean
    state_a.macro_step += 1
    state_b.macro_step += 1
    return 0.5 * (float(np.mean(losses)) + loss_b)


def noise_step(net, state, cfg, batch, part=None):
    """Langevin-style step: friction, gradient, and tier-temperature noise.

    Momentum first (semi-implicit order), then position:
        p <- (1 - gamma*h) p - h*grad + sqrt(2*gamma*tau*h) * xi
        theta <- theta + h * p
    With tau = 0 this is plain momentum SGD with mu = 1 - gamma*h at stepsize
    h^2 (velocity form). Noise is only drawn for tiers with tau > 0, so a
    zero-temperature run consumes no rng state. A friction large enough that
    1 - gamma*h < 0 is flagged with a RuntimeWarning but not fatal.
    """
    if cfg.noise is None:
        raise ContractError("noise_step needs cfg.noise")
    if part is not None and part.masks:
        raise ContractError("noise_step supports whole-block partitions only")
    x, y = batch
    forward(net, x, state.counters)
    loss = loss_value(net, y)
    grads = backward_full(net, y, state.counters)
    h = cfg.h
    warned = False
    for pid in net.param_ids():
        tier = part.assignment[pid] if part is not None else 0
        gamma, tau = cfg.noise.for_tier(tier)
        if 1.0 - gamma * h < 0.0 and not warned:
            warnings.warn(
                f"friction {gamma} unstable at stepsize {h}: 1 - gamma*h < 0", RuntimeWarning
            )
            warned = True
        mom = state.momenta[pid]
        np.multiply(mom, 1.0 - gamma * h, out=mom)
        mom -= h * grads[pid]
        if tau > 0.0:
            mom += np.sqrt(2.0 * gamma * tau * h) * state.rng.normal(0.0, 1.0, mom.shape)
        net.get_param(pid)[...] += h * mom
    state.micro_step += 1
    return loss
