"""Dense float64 kernel: checked matmul with operation counting, and seeded RNG streams.

Everything downstream builds on this module. Arrays are plain numpy float64
arrays; the additions here are shape validation with package-level error types,
floating-point operation counters for the training cost model, and a
counter-based RNG with named child streams so that independent random choices
(init, batching, masks, noise) never interact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "tensor",
    "zeros",
    "matmul",
    "gauss",
    "CostCounters",
    "RngStream",
]


def tensor(data):
    """Copy ``data`` into a C-contiguous float64 array."""
    return np.array(data, dtype=np.float64, order="C")


def zeros(shape):
    return np.zeros(shape, dtype=np.float64)


def matmul(a, b, counters=None):
    """Matrix product of two rank-2 arrays.

    Adds 2*m*n*p to ``counters.flops`` (multiply-add convention) when counters
    are supplied. Raises ShapeError on rank or inner-dimension mismatch.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if counters is not None:
        m, n = a.shape
        p = b.shape[1]
        counters.flops += 2 * m * n * p
    return a @ b


def gauss(rng, shape, mean=0.0, std=1.0):
    """Normal draws with validated spread; ``rng`` is an RngStream."""
    if std < 0:
        raise DomainError(f"std must be >= 0, got {std}")
    return rng.normal(mean, std, shape)


@dataclass
class CostCounters:
    """Tally of training work: layer visits per pass direction plus matmul flops.

    Counter additivity (running f then g equals counters(f) + counters(g))
    holds because ops only ever increment the fields.
    """

    forward_layer_visits: int = 0
    backward_layer_visits: int = 0
    flops: int = 0

    def copy(self):
        return CostCounters(self.forward_layer_visits, self.backward_layer_visits, self.flops)

    def __add__(self, other):
        return CostCounters(
            self.forward_layer_visits + other.forward_layer_visits,
            self.backward_layer_visits + other.backward_layer_visits,
            self.flops + other.flops,
        )

    def __sub__(self, other):
        return CostCounters(
            self.forward_layer_visits - other.forward_layer_visits,
            self.backward_layer_visits - other.backward_layer_visits,
            self.flops - other.flops,
        )


_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    # Standard splitmix64 finalizer; used to derive child stream ids.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream identified by (seed, stream_id).

    Two streams with the same key produce identical draw sequences regardless
    of creation order, and child streams derived via :meth:`child` are
    independent of draws made on the parent. Backed by numpy's Philox
    generator, which makes the full state serializable for checkpoints.
    """

    def __init__(self, seed, stream_id=0):
        if seed < 0:
            raise DomainError(f"seed must be >= 0, got {seed}")
        self.seed = int(seed)
        self.stream_id = int(stream_id) & _MASK64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed & _MASK64, self.stream_id], dtype=np.uint64))
        )

    def child(self, index):
        """Derive the ``index``-th child stream; deterministic in (key, index)."""
        if index < 0:
            raise DomainError(f"child index must be >= 0, got {index}")
        cid = _splitmix64((_splitmix64(self.stream_id) + index + 1) & _MASK64)
        return RngStream(self.seed, cid)

    # draw methods mirror numpy's Generator API for the cases we use

    def normal(self, mean=0.0, std=1.0, shape=None):
        return self._gen.normal(mean, std, shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def random(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self):
        """Serializable snapshot: (seed, stream_id, counter/key state)."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state):
        stream = cls(state["seed"], state["stream_id"])
        st = stream._gen.bit_generator.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        stream._gen.bit_generator.state = st
        return stream
