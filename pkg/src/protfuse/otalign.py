"""Entropic optimal-transport alignment of embedding dimensions.

Columns (embedding dimensions) are the transported samples: every structure
dimension carries mass ``1/d_struc`` and every sequence dimension mass
``1/d_seq``.  The resulting plan maps structure embeddings into the
sequence coordinate frame by a matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, ConvergenceFailure, DataFault
from .numerics.matio import load_matrix, save_matrix

__all__ = [
    "TransportPlan", "build_cost", "sinkhorn_solve", "barycentric_project",
    "concat_intrinsic", "save_plan", "load_plan",
]


@dataclass
class TransportPlan:
    values: np.ndarray
    epsilon: float
    iterations: int
    marginal_error: float
    cost: float = float("nan")

    @property
    def shape(self):
        return self.values.shape


def build_cost(e_struc, e_seq) -> np.ndarray:
    """RMSE between every structure column and every sequence column.

    ``C[i, j] = sqrt(mean_p (e_struc[p, i] - e_seq[p, j])**2)``, shape
    ``(d_struc, d_seq)``.
    """
    e_struc = np.asarray(e_struc, dtype=np.float64)
    e_seq = np.asarray(e_seq, dtype=np.float64)
    if e_struc.ndim != 2 or e_seq.ndim != 2:
        raise ContractViolation("embeddings must be 2-D (proteins x dims)")
    n = e_struc.shape[0]
    if n < 1 or e_seq.shape[0] != n:
        raise ContractViolation(
            f"row counts differ: structure has {e_struc.shape[0]}, sequence has {e_seq.shape[0]}")
    cost = np.empty((e_struc.shape[1], e_seq.shape[1]))
    for i in range(e_struc.shape[1]):
        diff = e_struc[:, i:i + 1] - e_seq
        cost[i] = np.sqrt(np.einsum("pj,pj->j", diff, diff) / n)
    return cost


def sinkhorn_solve(cost, epsilon=1e-3, cost_tol=1e-6, max_iter=100_000,
                   marginal_tol=1e-6, normalize_cost=True, newton_after=100) -> TransportPlan:
    """Log-domain Sinkhorn with uniform marginals.

    The cost is divided by its largest entry before solving, so ``epsilon``
    is relative to a unit-range cost.  Iteration stops when the change in
    transport cost drops below ``cost_tol`` *and* the L1 marginal error is
    below ``marginal_tol``.  Raises :class:`ConvergenceFailure` otherwise.

    Plain scaling mixes slowly once the plan is nearly sparse, so after
    ``newton_after`` sweeps each sweep is preceded by a damped Newton step on
    the dual.  The fixed point is unchanged; ``newton_after=None`` disables it.
    """
    c = np.asarray(cost, dtype=np.float64)
    if epsilon <= 0 or cost_tol <= 0:
        raise ContractViolation("epsilon and cost_tol must be positive")
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        raise ContractViolation("cost must be a finite 2-D matrix")
    n, m = c.shape
    scale = c.max() if normalize_cost and c.max() > 0 else 1.0
    cn = c / scale
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    ker = -cn / epsilon
    f = np.zeros(n)
    g = np.zeros(m)
    prev_cost = None
    err = np.inf
    for it in range(1, max_iter + 1):
        if newton_after is not None and it > newton_after:
            f, g = _newton_step(ker, f, g, epsilon, log_a, log_b)
        f = epsilon * (log_a - logsumexp(ker + g[None, :] / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp(ker + f[:, None] / epsilon, axis=0))
        plan = np.exp(ker + (f[:, None] + g[None, :]) / epsilon)
        # columns are exact after the g-update; rows carry the residual
        err = np.abs(plan.sum(1) - 1.0 / n).sum() + np.abs(plan.sum(0) - 1.0 / m).sum()
        tcost = float((plan * cn).sum())
        if prev_cost is not None and abs(tcost - prev_cost) < cost_tol and err < marginal_tol:
            return TransportPlan(plan, epsilon, it, float(err), tcost)
        prev_cost = tcost
    raise ConvergenceFailure(
        f"Sinkhorn did not converge in {max_iter} iterations (marginal error {err:.3e})",
        last_error=float(err))


def _dual_value(ker, f, g, eps, a, b):
    return f @ a + g @ b - eps * np.exp(ker + (f[:, None] + g[None, :]) / eps).sum()


def _newton_step(ker, f, g, eps, log_a, log_b):
    """One backtracking Newton ascent step on the entropic dual in (f, g).

    The last entry of ``g`` is held fixed to remove the shift ambiguity.
    Returns the input unchanged if no step improves the dual.
    """
    n, m = ker.shape
    a, b = np.exp(log_a), np.exp(log_b)
    plan = np.exp(ker + (f[:, None] + g[None, :]) / eps)
    grad = np.concatenate([a - plan.sum(1), b - plan.sum(0)])[:-1]
    hess = np.zeros((n + m, n + m))
    hess[:n, :n] = np.diag(plan.sum(1))
    hess[n:, n:] = np.diag(plan.sum(0))
    hess[:n, n:] = plan
    hess[n:, :n] = plan.T
    hess = hess[:-1, :-1] / eps
    try:
        step = np.linalg.lstsq(hess, grad, rcond=1e-14)[0]
    except np.linalg.LinAlgError:
        return f, g
    step = np.append(step, 0.0)
    base = _dual_value(ker, f, g, eps, a, b)
    slope = grad @ step[:-1]
    t = 1.0
    while t > 1e-6:
        nf, ng = f + t * step[:n], g + t * step[n:]
        with np.errstate(over="ignore"):
            val = _dual_value(ker, nf, ng, eps, a, b)
        if np.isfinite(val) and val >= base + 1e-4 * t * slope:
            return nf, ng
        t *= 0.5
    return f, g


def _plan_array(plan):
    return plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)


def barycentric_project(e_struc, plan, normalize=False) -> np.ndarray:
    """Map structure embeddings into sequence space: ``e_struc @ plan``.

    With ``normalize`` each output column is divided by the plan's column
    mass, i.e. a proper weighted average of structure dimensions.
    """
    t = _plan_array(plan)
    e_struc = np.asarray(e_struc, dtype=np.float64)
    if e_struc.shape[1] != t.shape[0]:
        raise ContractViolation(
            f"plan has {t.shape[0]} rows but embeddings have {e_struc.shape[1]} columns")
    out = e_struc @ t
    if normalize:
        out = out / t.sum(axis=0, keepdims=True)
    return out


def concat_intrinsic(e_seq, e_struc_aligned) -> np.ndarray:
    e_seq = np.asarray(e_seq, dtype=np.float64)
    e_al = np.asarray(e_struc_aligned, dtype=np.float64)
    if e_seq.shape[0] != e_al.shape[0]:
        raise ContractViolation("row counts differ")
    if e_seq.shape[1] != e_al.shape[1]:
        raise ContractViolation(
            f"aligned block has {e_al.shape[1]} columns, expected {e_seq.shape[1]}")
    return np.concatenate([e_seq, e_al], axis=1)


def save_plan(path, plan: TransportPlan) -> None:
    path = Path(path)
    save_matrix(path, plan.values)
    meta = path.with_suffix(path.suffix + ".meta")
    meta.write_text(
        f"epsilon={plan.epsilon!r}\niterations={plan.iterations}\n"
        f"marginal_error={plan.marginal_error!r}\ncost={plan.cost!r}\n")


def load_plan(path) -> TransportPlan:
    path = Path(path)
    values = load_matrix(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not meta_path.exists():
        raise DataFault(f"missing plan metadata: {meta_path}")
    meta = dict(line.split("=", 1) for line in meta_path.read_text().split() if "=" in line)
    return TransportPlan(values, float(meta["epsilon"]), int(meta["iterations"]),
                         float(meta["marginal_error"]), float(meta.get("cost", "nan")))
