"""Categorical diffusion over the four edge relations of an ego-graph.

Every ordered node pair carries one relation code.  A forward step keeps the
current relation with probability ``alpha_t`` and otherwise resamples it from
the relation marginal ``m``, so the chain forgets the clean graph and settles
on ``m``.  Relation adjacency matrices are integer arrays with
:data:`~protfuse.hetgraph.DIAG` on the diagonal; diagonal entries are never
diffused.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NumericFault
from .hetgraph import DIAG, RELATIONS

__all__ = [
    "NoiseSchedule", "cosine_schedule", "kernel", "transition_matrix",
    "cumulative_transition", "forward_sample", "posterior_distribution",
    "posterior_table", "reverse_step", "reverse_chain", "stationary_sample",
    "schedule_csv", "write_schedule_csv", "ALPHA_MIN",
]

N_REL = len(RELATIONS)
ALPHA_MIN = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step keep probabilities; index ``t - 1`` holds step ``t``."""

    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_alphas(cls, alphas) -> "NoiseSchedule":
        a = np.asarray(alphas, dtype=np.float64).ravel()
        if a.size < 1:
            raise ContractViolation("schedule needs at least one step")
        if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
            raise ContractViolation("alphas must lie in [0, 1]")
        return cls(a, np.cumprod(a))

    @property
    def T(self) -> int:
        return int(self.alpha.size)

    def _check_t(self, t, lo=1):
        if not (lo <= t <= self.T) or int(t) != t:
            raise ContractViolation(f"timestep {t} outside [{lo}, {self.T}]")

    def alpha_at(self, t) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t) -> float:
        """Cumulative keep probability; ``t = 0`` gives 1."""
        self._check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def cosine_schedule(T, shift=0.008) -> NoiseSchedule:
    """Shifted cosine schedule with every step clamped to ``[1e-5, 1]``.

    The stored cumulative products are the running products of the clamped
    steps, so they stay consistent with the per-step values.
    """
    if int(T) != T or T < 1:
        raise ContractViolation(f"T must be a positive integer, got {T}")
    if shift < 0:
        raise ContractViolation("shift must be non-negative")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + shift) / (1 + shift) * np.pi / 2) ** 2
    bar = f / f[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = bar[1:] / bar[:-1]
    alpha = np.clip(np.nan_to_num(alpha, nan=ALPHA_MIN), ALPHA_MIN, 1.0)
    return NoiseSchedule.from_alphas(alpha)


def _check_marginal(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (N_REL,) or np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
        raise ContractViolation(f"relation marginal must be a length-{N_REL} distribution, got {m}")
    return m


def kernel(keep, m) -> np.ndarray:
    """``keep * I + (1 - keep) * 1 m^T``."""
    m = _check_marginal(m)
    return keep * np.eye(N_REL) + (1.0 - keep) * np.broadcast_to(m, (N_REL, N_REL))


def transition_matrix(schedule: NoiseSchedule, t, m) -> np.ndarray:
    return kernel(schedule.alpha_at(t), m)


def cumulative_transition(schedule: NoiseSchedule, t, m) -> np.ndarray:
    return kernel(schedule.alpha_bar_at(t), m)


def _as_codes(adj) -> np.ndarray:
    a = np.asarray(adj)
    if a.ndim == 3:
        a = a.argmax(-1)
        np.fill_diagonal(a, DIAG)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation("adjacency must be square")
    return a.astype(np.int64)


def _off_diagonal(n):
    return ~np.eye(n, dtype=bool)


def _sample_rows(probs, rng) -> np.ndarray:
    """Inverse-CDF draw, one per row of ``probs`` (last axis)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    return np.minimum((u[..., None] >= cdf).sum(-1), N_REL - 1)


def forward_sample(a0, schedule: NoiseSchedule, t, m, rng) -> np.ndarray:
    """Corrupt every off-diagonal pair independently with ``Q_bar(t)``."""
    a0 = _as_codes(a0)
    qbar = cumulative_transition(schedule, t, m)
    off = _off_diagonal(a0.shape[0])
    out = np.full_like(a0, DIAG)
    out[off] = _sample_rows(qbar[a0[off]], rng)
    return out


def stationary_sample(n, m, rng) -> np.ndarray:
    """An ``n``-node adjacency with every pair drawn from ``m``."""
    m = _check_marginal(m)
    off = _off_diagonal(n)
    out = np.full((n, n), DIAG, dtype=np.int64)
    out[off] = _sample_rows(np.broadcast_to(m, (int(off.sum()), N_REL)), rng)
    return out


def _unnormalized_posteriors(schedule, t, m):
    # [r0, rt, r'] = Q(t)[r', rt] * Q_bar(t-1)[r0, r']
    q = transition_matrix(schedule, t, m)
    qbar_prev = cumulative_transition(schedule, t - 1, m)
    return qbar_prev[:, None, :] * q.T[None, :, :]


def posterior_table(schedule: NoiseSchedule, t, m):
    """All posteriors at once, indexed ``[r0, rt, r_prev]``.

    Entries whose normalizer is zero (``rt`` unreachable from ``r0``) are
    NaN.  At ``t = 1`` the posterior is a point mass on ``r0``.
    """
    schedule._check_t(t)
    if t == 1:
        return np.broadcast_to(np.eye(N_REL)[:, None, :], (N_REL, N_REL, N_REL)).copy()
    raw = _unnormalized_posteriors(schedule, t, m)
    z = raw.sum(-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(z > 0, raw / np.where(z > 0, z, 1.0), np.nan)


def posterior_distribution(r0, rt, schedule: NoiseSchedule, t, m) -> np.ndarray:
    post = posterior_table(schedule, t, m)[r0, rt]
    if np.any(np.isnan(post)):
        raise NumericFault(f"posterior normalizer is zero for r0={r0}, rt={rt}, t={t}")
    return post


def reverse_step(p0_hat, at, schedule: NoiseSchedule, t, m, rng) -> np.ndarray:
    """Sample ``A(t-1)`` from a predicted clean-relation distribution.

    Each pair's reverse distribution is the ``p0_hat``-weighted mixture of
    the exact posteriors; candidates whose posterior is undefined for the
    observed ``rt`` get zero weight.  At ``t = 1`` the clean relation is
    sampled from ``p0_hat`` directly.
    """
    at = _as_codes(at)
    n = at.shape[0]
    p0 = np.asarray(p0_hat, dtype=np.float64)
    if p0.shape != (n, n, N_REL):
        raise ContractViolation(f"p0_hat must have shape {(n, n, N_REL)}, got {p0.shape}")
    off = _off_diagonal(n)
    rows = p0[off]
    if np.any(rows < -1e-12) or np.abs(rows.sum(-1) - 1.0).max(initial=0.0) > 1e-6:
        raise ContractViolation("p0_hat rows must be distributions (tolerance 1e-6)")
    out = np.full_like(at, DIAG)
    if t == 1:
        schedule._check_t(t)
        out[off] = _sample_rows(rows, rng)
        return out
    post = posterior_table(schedule, t, m)[:, at[off], :]      # [r0, pair, r']
    valid = ~np.isnan(post[..., 0])                              # [r0, pair]
    weights = np.where(valid, rows.T, 0.0)
    mix = np.einsum("kp,kpr->pr", weights, np.nan_to_num(post))
    z = mix.sum(-1)
    if np.any(z <= 0):
        raise NumericFault(f"reverse step at t={t}: prediction gives zero mass to every reachable state")
    out[off] = _sample_rows(mix / z[:, None], rng)
    return out


def reverse_chain(predict, n, schedule: NoiseSchedule, m, rng, start=None) -> np.ndarray:
    """Run the reverse process from ``t = T`` down to a clean sample.

    ``predict(a_t, t)`` returns per-pair clean-relation probabilities of
    shape ``(n, n, 4)``.  ``start`` defaults to a draw from ``m``.
    """
    a = stationary_sample(n, m, rng) if start is None else _as_codes(start)
    for t in range(schedule.T, 0, -1):
        a = reverse_step(predict(a, t), a, schedule, t, m, rng)
    return a


def schedule_csv(schedule: NoiseSchedule) -> str:
    lines = ["t,alpha,alpha_bar"]
    for t in range(1, schedule.T + 1):
        lines.append(f"{t},{schedule.alpha[t - 1]:.17g},{schedule.alpha_bar[t - 1]:.17g}")
    return "\n".join(lines) + "\n"


def write_schedule_csv(path, schedule: NoiseSchedule) -> Path:
    path = Path(path)
    path.write_text(schedule_csv(schedule))
    return path
