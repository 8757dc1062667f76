"""The Bernoulli mask process: forward drops, reverse revivals, exact oracles.

Masks are int8 vectors with 1 = visible, 0 = masked. The forward chain is
absorbing toward 0 (a dropped gene stays dropped); the reverse chain is
absorbing toward 1. All stochastic operations take an explicit
``numpy.random.Generator`` so trajectories are reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .schedule import VisibilitySchedule

# Enumeration bounds for the exact chain oracle; 2^(G*T) path growth.
ORACLE_MAX_G = 4
ORACLE_MAX_T = 6


@dataclass
class MaskState:
    """A mask vector paired with its timestep."""

    m: np.ndarray
    t: int

    def validate(self) -> None:
        if not np.all((self.m == 0) | (self.m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if self.t == 0 and not np.all(self.m == 1):
            raise ValueError("t=0 requires an all-ones mask on forward trajectories")


@dataclass
class MaskedExpression:
    """A partially observed expression vector and the mask that produced it."""

    x: np.ndarray
    m: np.ndarray

    def validate(self) -> None:
        """Check the Dirac constraint x = m * x (zeros at masked coordinates)."""
        if self.x.shape != self.m.shape:
            raise ValueError("x and m must have equal length")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x must be finite")
        if np.any(self.x[self.m == 0] != 0.0):
            raise ValueError("x must be 0 wherever m is 0")


def sample_mask_direct(G: int, alpha_bar_t: float, rng: np.random.Generator) -> np.ndarray:
    """Draw G independent Bernoulli(alpha_bar_t) visibility indicators."""
    if not (0.0 <= alpha_bar_t <= 1.0):
        raise ValueError(f"alpha_bar_t must be in [0, 1], got {alpha_bar_t}")
    return (rng.random(G) < alpha_bar_t).astype(np.int8)


def forward_mask_step(m_prev: np.ndarray, p_t: float, rng: np.random.Generator) -> np.ndarray:
    """One forward transition: visible entries drop with probability p_t.

    Masked entries stay masked (the chain is absorbing toward 0).
    """
    if not (0.0 <= p_t <= 1.0):
        raise ValueError(f"p_t must be in [0, 1], got {p_t}")
    keep = rng.random(m_prev.shape) >= p_t
    return (m_prev.astype(np.int8) * keep).astype(np.int8)


def reverse_mask_step(m_t: np.ndarray, pi_t: float, rng: np.random.Generator) -> np.ndarray:
    """One reverse transition: masked entries revive with probability pi_t.

    Visible entries stay visible (the reverse chain is absorbing toward 1).
    """
    if not (0.0 < pi_t <= 1.0):
        raise ValueError(f"pi_t must be in (0, 1], got {pi_t}")
    revived = rng.random(m_t.shape) < pi_t
    return np.maximum(m_t.astype(np.int8), revived.astype(np.int8))


def apply_mask(x: np.ndarray, m: np.ndarray) -> MaskedExpression:
    """Mask an expression vector: returns (m * x, m)."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m)
    if x.shape != m.shape:
        raise ValueError(f"length mismatch: x {x.shape} vs m {m.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    out = MaskedExpression(x=x * m, m=m.astype(np.int8))
    out.validate()
    return out


def forward_trajectory(
    schedule: VisibilitySchedule, G: int, rng: np.random.Generator
) -> list[MaskState]:
    """Sample a full forward mask trajectory m_0 .. m_T from all-ones."""
    states = [MaskState(m=np.ones(G, dtype=np.int8), t=0)]
    for t in range(1, schedule.T + 1):
        states.append(MaskState(m=forward_mask_step(states[-1].m, schedule.drop_at(t), rng), t=t))
    return states


def reverse_trajectory(
    schedule: VisibilitySchedule, G: int, rng: np.random.Generator
) -> list[MaskState]:
    """Sample a full reverse mask trajectory m_T .. m_0 from all-zeros."""
    states = [MaskState(m=np.zeros(G, dtype=np.int8), t=schedule.T)]
    for t in range(schedule.T, 0, -1):
        states.append(MaskState(m=reverse_mask_step(states[-1].m, schedule.revive_at(t), rng), t=t - 1))
    return states


def exact_chain_marginal(
    schedule: VisibilitySchedule, G: int, t: int
) -> dict[tuple[int, ...], float]:
    """Exact mask distribution at step t by brute-force path enumeration.

    Composes the per-step per-gene drop outcomes from m_0 = all-ones, summing
    path probabilities. Independent of the closed-form product-Bernoulli
    marginal, so it serves as its oracle.

    Raises:
        ValueError: if G or schedule.T exceed the enumeration bounds.
    """
    if G > ORACLE_MAX_G or schedule.T > ORACLE_MAX_T:
        raise ValueError(
            f"enumeration bound exceeded: need G <= {ORACLE_MAX_G} and T <= {ORACLE_MAX_T}"
        )
    if not (0 <= t <= schedule.T):
        raise ValueError(f"t must be in 0..T, got {t}")

    dist: dict[tuple[int, ...], float] = {tuple([1] * G): 1.0}
    for step in range(1, t + 1):
        p = schedule.drop_at(step)
        nxt: dict[tuple[int, ...], float] = {}
        for state, prob in dist.items():
            visible = [g for g, bit in enumerate(state) if bit == 1]
            # Enumerate every per-gene drop/keep outcome for this step.
            for outcome in product((0, 1), repeat=len(visible)):
                child = list(state)
                w = prob
                for g, kept in zip(visible, outcome):
                    if kept:
                        w *= 1.0 - p
                    else:
                        child[g] = 0
                        w *= p
                if w > 0.0:
                    key = tuple(child)
                    nxt[key] = nxt.get(key, 0.0) + w
        dist = nxt
    return dist


def product_bernoulli_distribution(G: int, q: float) -> dict[tuple[int, ...], float]:
    """Closed-form product-Bernoulli(q) distribution over binary vectors."""
    dist: dict[tuple[int, ...], float] = {}
    for bits in product((0, 1), repeat=G):
        prob = 1.0
        for b in bits:
            prob *= q if b == 1 else (1.0 - q)
        dist[bits] = prob
    return dist


def total_variation(
    p: dict[tuple[int, ...], float], q: dict[tuple[int, ...], float]
) -> float:
    """Total variation distance between two distributions over binary vectors."""
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
