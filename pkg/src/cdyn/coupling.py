"""Couplings between cell populations.

Temporal pseudo-pairs between consecutive snapshots and cross-condition pairs
at a fixed time are both realized as CouplingPlan: sampled (src, dst) index
pairs with uniform weights. The independent coupling draws pairs uniformly;
the Sinkhorn coupling runs entropic-regularized optimal transport with
uniform marginals in log space and then samples pairs from the dense plan.

Plans are pure functions of their inputs and seed, and may be built
concurrently for different (condition, time) pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ComputeError, ValidationError
from .rng import spawn_rng


@dataclass
class CouplingPlan:
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray
    method: str

    def __post_init__(self) -> None:
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (self.src.shape == self.dst.shape == self.w.shape) or self.src.ndim != 1:
            raise ValidationError("CouplingPlan: src, dst, w must be equal-length 1-D sequences")
        if self.src.size == 0:
            raise ValidationError("CouplingPlan: empty plan")
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValidationError("CouplingPlan: weights must be nonnegative and sum to 1")

    def validate_bounds(self, n_src: int, n_dst: int) -> None:
        if self.src.min() < 0 or self.src.max() >= n_src:
            raise ValidationError("CouplingPlan: src index out of bounds")
        if self.dst.min() < 0 or self.dst.max() >= n_dst:
            raise ValidationError("CouplingPlan: dst index out of bounds")


def independent_coupling(n_src: int, n_dst: int, n_pairs: int, seed: int) -> CouplingPlan:
    if n_src < 1 or n_dst < 1:
        raise ValidationError("independent_coupling: populations must be nonempty")
    if n_pairs < 1:
        raise ValidationError("independent_coupling: n_pairs must be >= 1")
    rng = spawn_rng(seed, "independent-coupling", n_src, n_dst, n_pairs)
    src = rng.integers(0, n_src, size=n_pairs)
    dst = rng.integers(0, n_dst, size=n_pairs)
    return CouplingPlan(src, dst, np.full(n_pairs, 1.0 / n_pairs), "independent")


def sinkhorn_plan(cost: np.ndarray, eps: float, max_iters: int = 10_000,
                  tol: float = 1e-6) -> tuple[np.ndarray, list[float]]:
    """Dense entropic plan with uniform marginals via log-space scaling.

    Returns (plan, per-iteration marginal L1 violations). Raises ComputeError
    carrying the final violation if not converged within max_iters.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValidationError("sinkhorn: cost must be a nonempty matrix")
    if not np.all(np.isfinite(cost)):
        raise ValidationError("sinkhorn: cost must be finite")
    if eps <= 0:
        raise ValidationError("sinkhorn: eps must be positive")
    n, m = cost.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    log_k = -cost / eps
    log_u = np.zeros(n)
    log_v = np.zeros(m)
    history: list[float] = []
    from scipy.special import logsumexp

    for _ in range(max_iters):
        log_u = log_a - logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_b - logsumexp(log_k + log_u[:, None], axis=0)
        plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
        violation = float(np.abs(plan.sum(axis=1) - np.exp(log_a)).sum()
                          + np.abs(plan.sum(axis=0) - np.exp(log_b)).sum())
        history.append(violation)
        if violation <= tol:
            return plan, history
    raise ComputeError(f"sinkhorn did not converge in {max_iters} iterations; "
                       f"final marginal violation {history[-1]:.3e}")


def sinkhorn_coupling(cost: np.ndarray, eps: float, max_iters: int = 10_000,
                      tol: float = 1e-6, n_pairs: int | None = None,
                      seed: int = 0) -> CouplingPlan:
    plan, _ = sinkhorn_plan(cost, eps, max_iters, tol)
    n, m = plan.shape
    if n_pairs is None:
        n_pairs = max(n, m)
    rng = spawn_rng(seed, "sinkhorn-pairs", n, m, n_pairs)
    flat = plan.ravel()
    draws = rng.choice(flat.size, size=n_pairs, p=flat / flat.sum())
    src, dst = np.divmod(draws, m)
    return CouplingPlan(src, dst, np.full(n_pairs, 1.0 / n_pairs), "sinkhorn")


def default_sinkhorn_eps(cost: np.ndarray) -> float:
    med = float(np.median(cost))
    return 0.05 * med if med > 0 else 0.05


def crossfit_coupling(pert_cells: np.ndarray, ctrl_cells: np.ndarray, mode: str,
                      n_pairs: int, seed: int) -> CouplingPlan:
    """Pair same-time perturbed and control cells by the requested coupling."""
    pert_cells = np.asarray(pert_cells, dtype=np.float64)
    ctrl_cells = np.asarray(ctrl_cells, dtype=np.float64)
    if pert_cells.shape[0] < 1 or ctrl_cells.shape[0] < 1:
        raise ValidationError("crossfit_coupling: populations must be nonempty")
    if mode == "independent":
        return independent_coupling(pert_cells.shape[0], ctrl_cells.shape[0], n_pairs, seed)
    if mode == "sinkhorn":
        sq_p = np.square(pert_cells).sum(axis=1)[:, None]
        sq_c = np.square(ctrl_cells).sum(axis=1)[None, :]
        cost = np.maximum(sq_p + sq_c - 2.0 * pert_cells @ ctrl_cells.T, 0.0)
        return sinkhorn_coupling(cost, default_sinkhorn_eps(cost), n_pairs=n_pairs, seed=seed)
    raise ValidationError(f"crossfit_coupling: unknown mode {mode!r}")


def save_plan(plan: CouplingPlan, path: str | Path) -> None:
    doc = {"src": plan.src.tolist(), "dst": plan.dst.tolist(),
           "w": plan.w.tolist(), "method": plan.method}
    Path(path).write_text(json.dumps(doc))


def load_plan(path: str | Path) -> CouplingPlan:
    doc = json.loads(Path(path).read_text())
    return CouplingPlan(np.asarray(doc["src"]), np.asarray(doc["dst"]),
                        np.asarray(doc["w"]), doc["method"])
