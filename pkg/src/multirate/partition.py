"""Splitting a network's parameters into update-rate tiers.

Tier 0 is the fastest group and refreshes its gradient every micro-step; tier
i > 0 refreshes every periods[i] micro-steps. Whole blocks are assigned via
``assignment``; the random-subset mode instead splits blocks scalar-wise with
boolean ``masks`` (True marks the slow part). Every parameter block of the
network appears in exactly one of the two maps.

With the drift-style update all tiers share the micro-stepsize h / P (P the
slowest period), so tier i moves a distance of h * periods[i] / P per refresh
interval: the slowest tier effectively trains with stepsize h, the fastest
with h / P.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError
from .model import ParamId

__all__ = [
    "RateTier",
    "Partition",
    "layerwise",
    "bias_slow",
    "all_fast",
    "sample_random_subset",
    "resample_masks",
    "multi_tier",
    "validate_partition",
    "slow_fraction",
]


@dataclass(frozen=True)
class RateTier:
    """One update-rate group: refresh period in micro-steps and its stepsize."""

    index: int
    period: int
    stepsize: float

    def __post_init__(self):
        if self.index < 0 or self.period < 1:
            raise DomainError(f"bad tier {self.index} with period {self.period}")
        if self.stepsize <= 0:
            raise DomainError(f"tier {self.index}: stepsize must be > 0")


@dataclass
class Partition:
    """Tier assignment for a specific network's parameter blocks."""

    mode: str
    assignment: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    periods: tuple | None = None
    fast_suffix_len: int | None = None
    probs: tuple | None = None
    include_biases: bool = False
    resample_period: int | None = None

    @property
    def n_tiers(self):
        tiers = set(self.assignment.values())
        if self.masks:
            tiers.update((0, 1))
        return max(tiers) + 1 if tiers else 1

    def tier_blocks(self, tier):
        """ParamIds wholly assigned to ``tier`` (mask-split blocks excluded)."""
        return [pid for pid, t in self.assignment.items() if t == tier]


def validate_partition(part, net):
    """Check the partition covers the network's registry exactly."""
    registry = set(net.param_ids())
    covered = set(part.assignment) | set(part.masks)
    if covered != registry:
        missing = registry - covered
        extra = covered - registry
        raise ContractError(f"partition does not match network (missing {missing}, extra {extra})")
    if set(part.assignment) & set(part.masks):
        raise ContractError("a block appears in both assignment and masks")
    tiers = set(part.assignment.values()) | ({0, 1} if part.masks else set())
    if tiers and tiers != set(range(max(tiers) + 1)):
        raise ContractError(f"tier indices not contiguous from 0: {sorted(tiers)}")
    for pid, m in part.masks.items():
        if m.shape != net.get_param(pid).shape or m.dtype != np.bool_:
            raise ContractError(f"mask for {pid} has wrong shape or dtype")
    return part


def layerwise(net, n_fast_layers):
    """Final ``n_fast_layers`` layers fast, the rest slow.

    n_fast_layers == n_layers gives the degenerate all-fast split (training
    then behaves like plain SGD at the fast stepsize).
    """
    L = net.n_layers
    if not 1 <= n_fast_layers <= L:
        raise DomainError(f"n_fast_layers must be in [1, {L}], got {n_fast_layers}")
    cut = L - n_fast_layers
    assignment = {pid: (0 if pid.layer >= cut else 1) for pid in net.param_ids()}
    part = Partition(
        mode="layerwise", assignment=assignment, fast_suffix_len=n_fast_layers
    )
    return validate_partition(part, net)


def bias_slow(net, variant="all"):
    """Bias blocks slow, all weights fast.

    variant "input" slows only the first layer's bias, "output" only the last
    layer's; the other biases then stay fast. A net without biases in the
    requested layers yields an empty slow set (everything tier 0).
    """
    if variant not in ("all", "input", "output"):
        raise DomainError(f"unknown bias_slow variant {variant!r}")
    slow_layers = {
        "all": set(range(net.n_layers)),
        "input": {0},
        "output": {net.n_layers - 1},
    }[variant]
    assignment = {}
    for pid in net.param_ids():
        slow = pid.role == "bias" and pid.layer in slow_layers
        assignment[pid] = 1 if slow else 0
    part = Partition(mode="bias-slow", assignment=assignment)
    return validate_partition(part, net)


def all_fast(net):
    """Everything in tier 0; useful as the trivial one-tier split."""
    assignment = {pid: 0 for pid in net.param_ids()}
    return validate_partition(Partition(mode="all-fast", assignment=assignment), net)


def sample_random_subset(net, probs, rng, include_biases=False, resample_period=None):
    """Bernoulli scalar-wise split: weight entries go slow with a per-layer probability.

    ``probs`` has one entry per layer. Biases stay fast unless include_biases,
    in which case they use their layer's probability too. Draws happen in
    registry order so the mask set is reproducible from the rng state.
    """
    probs = tuple(float(p) for p in probs)
    if len(probs) != net.n_layers:
        raise DomainError(f"need {net.n_layers} probabilities, got {len(probs)}")
    if any(not 0.0 <= p <= 1.0 for p in probs):
        raise DomainError(f"probabilities must be in [0, 1]: {probs}")
    assignment = {}
    masks = {}
    for pid in net.param_ids():
        if pid.role == "weight" or include_biases:
            shape = net.get_param(pid).shape
            masks[pid] = rng.random(shape) < probs[pid.layer]
        else:
            assignment[pid] = 0
    part = Partition(
        mode="random-subset",
        assignment=assignment,
        masks=masks,
        probs=probs,
        include_biases=include_biases,
        resample_period=resample_period,
    )
    return validate_partition(part, net)


def resample_masks(part, net, rng):
    """Fresh Bernoulli masks with the partition's stored probabilities."""
    if part.mode != "random-subset":
        raise ContractError(f"cannot resample a {part.mode} partition")
    return sample_random_subset(net, part.probs, rng, part.include_biases, part.resample_period)


def multi_tier(net, layer_groups, ratios):
    """General hierarchy: layer_groups[i] holds the layer indices of tier i.

    Tier 0 is fastest. ratios[j] is the period multiplier between tiers j and
    j+1, so tier i refreshes every prod(ratios[:i]) micro-steps.
    """
    if len(layer_groups) != len(ratios) + 1:
        raise DomainError(
            f"{len(layer_groups)} groups need {len(layer_groups) - 1} ratios, got {len(ratios)}"
        )
    ratios = tuple(int(r) for r in ratios)
    if any(r < 1 for r in ratios):
        raise DomainError(f"ratios must be >= 1: {ratios}")
    seen = []
    for group in layer_groups:
        seen.extend(group)
    if sorted(seen) != list(range(net.n_layers)):
        raise ContractError(f"layer groups must partition 0..{net.n_layers - 1}, got {layer_groups}")
    assignment = {}
    for tier, group in enumerate(layer_groups):
        for layer in group:
            for pid in net.param_ids():
                if pid.layer == layer:
                    assignment[pid] = tier
    periods = [1]
    for r in ratios:
        periods.append(periods[-1] * r)
    part = Partition(mode="multi-tier", assignment=assignment, periods=tuple(periods))
    return validate_partition(part, net)


def slow_fraction(part, net):
    """Fraction of scalar parameters outside tier 0."""
    slow = 0
    for pid, tier in part.assignment.items():
        if tier > 0:
            slow += net.get_param(pid).size
    for m in part.masks.values():
        slow += int(m.sum())
    return slow / net.n_params
