"""Visibility schedules for the Bernoulli mask process.

A schedule is the cumulative visibility table abar[0..T] with abar[0] = 1 and
abar[T] = 0, strictly decreasing. Supported shapes:

- power:  abar_t = (1 - t/T)^zeta, zeta > 0
- linear: the power schedule with zeta = 1
- cosine: abar_t = cos^2((t/T) * pi/2), endpoints clamped to exactly 1 and 0

Derived per-step quantities (1-based t, stored 0-based at index t-1):

- drop[t]   = 1 - abar_t / abar_{t-1}         forward drop probability
- revive[t] = (abar_{t-1} - abar_t) / (1 - abar_t)   reverse revival probability
- weight[t] = revive[t]                        loss weight

revive[1] is 1 by the closed form: abar_0 = 1 makes numerator and denominator
equal, so the 0/0-prone ratio is replaced by the exact value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("power", "linear", "cosine")

#: Default diffusion horizon.
DEFAULT_T = 50


@dataclass(frozen=True)
class VisibilitySchedule:
    """Immutable visibility schedule with derived per-step sequences.

    Attributes:
        kind: one of "power", "linear", "cosine".
        T: number of diffusion steps (>= 1).
        zeta: power exponent (1.0 for linear; stored but unused for cosine).
        alpha_bar: cumulative visibility, shape (T+1,), alpha_bar[t] for t in 0..T.
        drop: per-step drop probabilities p_t, shape (T,), drop[t-1] = p_t.
        revive: per-step revival probabilities pi_t, shape (T,), revive[t-1] = pi_t.
        weight: per-step loss weights w_t, shape (T,); equals revive elementwise.
    """

    kind: str
    T: int
    zeta: float
    alpha_bar: np.ndarray
    drop: np.ndarray
    revive: np.ndarray
    weight: np.ndarray

    def validate(self, tol: float = 1e-12) -> None:
        """Assert every schedule invariant, raising ValueError on violation."""
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1, got {ab.shape}")
        if ab[0] != 1.0 or ab[self.T] != 0.0:
            raise ValueError("alpha_bar endpoints must be exactly 1 and 0")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        for seq, name in ((self.drop, "drop"), (self.revive, "revive")):
            if seq.shape != (self.T,):
                raise ValueError(f"{name} must have length T")
            if not np.all((seq > 0.0) & (seq <= 1.0)):
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.revive[0] != 1.0:
            raise ValueError("revive[1] must be exactly 1")
        if np.max(np.abs(self.weight - self.revive)) > tol:
            raise ValueError("weight must equal revive elementwise")
        recon = ab[:-1] * (1.0 - self.drop)
        if np.max(np.abs(ab[1:] - recon)) > tol:
            raise ValueError("alpha_bar[t] must equal alpha_bar[t-1]*(1-drop[t])")
        # Reverse-marginal telescope: q_T = 0, q_{t-1} = q_t + (1-q_t)*revive[t]
        # must reproduce alpha_bar exactly.
        q = 0.0
        for t in range(self.T, 0, -1):
            if abs(q - ab[t]) > tol:
                raise ValueError(f"telescope mismatch at t={t}")
            q = q + (1.0 - q) * self.revive[t - 1]
        if abs(q - 1.0) > tol:
            raise ValueError("telescope must terminate at 1")

    def drop_at(self, t: int) -> float:
        """Drop probability p_t for 1-based timestep t."""
        return float(self.drop[t - 1])

    def revive_at(self, t: int) -> float:
        """Revival probability pi_t for 1-based timestep t."""
        return float(self.revive[t - 1])

    def weight_at(self, t: int) -> float:
        """Loss weight w_t for 1-based timestep t."""
        return float(self.weight[t - 1])


def _derive_steps(alpha_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Compute (drop, revive) sequences from a cumulative visibility table."""
    prev = alpha_bar[:-1]
    curr = alpha_bar[1:]
    drop = 1.0 - curr / prev
    revive = np.empty_like(drop)
    revive[0] = 1.0
    revive[1:] = (prev[1:] - curr[1:]) / (1.0 - curr[1:])
    return drop, revive


def _from_alpha_bar(kind: str, zeta: float, alpha_bar: np.ndarray) -> VisibilitySchedule:
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    alpha_bar.setflags(write=False)
    drop, revive = _derive_steps(alpha_bar)
    for arr in (drop, revive):
        arr.setflags(write=False)
    sched = VisibilitySchedule(
        kind=kind,
        T=len(alpha_bar) - 1,
        zeta=zeta,
        alpha_bar=alpha_bar,
        drop=drop,
        revive=revive,
        weight=revive,
    )
    sched.validate()
    return sched


def build_schedule(kind: str, T: int, zeta: float = 1.0) -> VisibilitySchedule:
    """Construct a visibility schedule.

    Args:
        kind: "power", "linear" (power with zeta = 1) or "cosine".
        T: number of diffusion steps, >= 1.
        zeta: power exponent; must be > 0. Ignored for linear/cosine.

    Raises:
        ValueError: on T < 1, zeta <= 0, or unknown kind.
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (zeta > 0.0):
        raise ValueError(f"zeta must be > 0, got {zeta}")

    t = np.arange(T + 1, dtype=np.float64)
    if kind == "cosine":
        alpha_bar = np.cos((t / T) * (math.pi / 2.0)) ** 2
        zeta = 1.0
    else:
        if kind == "linear":
            zeta = 1.0
        alpha_bar = (1.0 - t / T) ** zeta
    # Force exact endpoints: cos(pi/2) and 0**zeta may carry rounding dust.
    alpha_bar[0] = 1.0
    alpha_bar[T] = 0.0
    return _from_alpha_bar(kind, zeta, alpha_bar)


def log_gene_zeta(T: int, G: int) -> float:
    """Power exponent ln(G)/ln(T), the default schedule exponent.

    Makes the expected visible-gene count at the last pre-terminal step equal
    to one: G * alpha_bar[T-1] = G * (1/T)^(log_T G) = 1.

    Raises:
        ValueError: if T < 2 (degenerate logarithm base) or G < 2.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if G < 2:
        raise ValueError(f"G must be >= 2, got {G}")
    return math.log(G) / math.log(T)


def subsample_indices(T: int, K: int) -> list[int]:
    """Evenly spaced alpha_bar indices {round(i*T/K)} for a K-step budget.

    Deduplicated and guaranteed to keep the endpoints 0 and T.
    """
    if K < 1 or K > T:
        raise ValueError(f"K must be in 1..T, got K={K}, T={T}")
    idx: list[int] = []
    for i in range(K + 1):
        j = round(i * T / K)
        if not idx or j > idx[-1]:
            idx.append(j)
    idx[0] = 0
    idx[-1] = T
    return idx


def subsample_schedule(s: VisibilitySchedule, K: int) -> VisibilitySchedule:
    """Restrict a schedule to a K-step inference budget.

    The returned schedule visits the alpha_bar subsequence at the evenly
    spaced indices of :func:`subsample_indices`; drop/revive/weight are
    recomputed from the subsequence. K = s.T returns a schedule with values
    identical to s.
    """
    idx = subsample_indices(s.T, K)
    return _from_alpha_bar(s.kind, s.zeta, s.alpha_bar[idx])


def schedule_table(s: VisibilitySchedule) -> list[dict[str, float | int | None]]:
    """Rows for the schedule-dump CSV: t, alpha_bar, drop, revive, weight.

    The t = 0 row has no per-step quantities (None).
    """
    rows: list[dict[str, float | int | None]] = [
        {"t": 0, "alpha_bar": float(s.alpha_bar[0]), "drop": None, "revive": None, "weight": None}
    ]
    for t in range(1, s.T + 1):
        rows.append(
            {
                "t": t,
                "alpha_bar": float(s.alpha_bar[t]),
                "drop": float(s.drop[t - 1]),
                "revive": float(s.revive[t - 1]),
                "weight": float(s.weight[t - 1]),
            }
        )
    return rows
