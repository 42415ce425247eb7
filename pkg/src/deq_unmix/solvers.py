"""Fixed-point iteration, Broyden root finding and a matrix-free linear solver.

All solvers operate on numpy arrays of arbitrary shape; residual norms are
the global L2 norm over every element. With ``batched=True`` the leading
axis indexes independent problems that share one stopping rule but keep
separate Broyden inverse-Jacobian estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DIVERGENCE_FACTOR = 1e6
DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1.0
    epsilon: float = 1e-3
    l_max: int = 6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.l_max) != self.l_max or self.l_max < 1:
            raise ValueError(f"l_max must be an integer >= 1, got {self.l_max}")


@dataclass
class SolverTrace:
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    skipped_updates: int = 0

    @property
    def l_stop(self) -> int:
        return len(self.residual_norms)


class SolverDivergenceError(RuntimeError):
    def __init__(self, message: str, trace: SolverTrace):
        super().__init__(message)
        self.trace = trace


class LinearSolveError(RuntimeError):
    def __init__(self, message: str, residual: float, trace: SolverTrace):
        super().__init__(message)
        self.residual = residual
        self.trace = trace


def residual_norm(r: np.ndarray) -> float:
    return float(np.sqrt(np.sum(r * r)))


def _check_divergence(trace: SolverTrace, norm: float) -> None:
    initial = trace.residual_norms[0]
    if norm > DIVERGENCE_FACTOR * initial:
        raise SolverDivergenceError(
            f"residual {norm:.3e} exceeds {DIVERGENCE_FACTOR:g} x initial residual {initial:.3e}",
            trace,
        )


def fixed_point_iterate(
    f: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    config: SolverConfig,
) -> tuple[np.ndarray, SolverTrace]:
    """Iterate ``z <- f(z)`` until ``||f(z) - z|| <= epsilon`` or ``l_max`` applications.

    Returns the last application's output; ``residual_norms[i]`` is the step
    size ``||f(z_i) - z_i||`` measured by application ``i + 1``.
    """
    trace = SolverTrace()
    z = np.asarray(z0, dtype=np.float64)
    for _ in range(config.l_max):
        fz = f(z)
        if fz.shape != z.shape:
            raise ValueError(f"f changed the state shape from {z.shape} to {fz.shape}")
        norm = residual_norm(fz - z)
        trace.residual_norms.append(norm)
        z = fz
        if norm <= config.epsilon:
            trace.converged = True
            break
        _check_divergence(trace, norm)
    return z, trace


class _LowRankInverse:
    """``B = -I + sum_k u_k v_k^T`` stored as factor stacks, one per problem."""

    def __init__(self, batch: int, dim: int, capacity: int):
        self.us = np.zeros((batch, capacity, dim))
        self.vs = np.zeros((batch, capacity, dim))
        self.rank = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return -x
        u, v = self.us[:, :self.rank], self.vs[:, :self.rank]
        return -x + np.einsum("bkd,bk->bd", u, np.einsum("bkd,bd->bk", v, x))

    def apply_t(self, x: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return -x
        u, v = self.us[:, :self.rank], self.vs[:, :self.rank]
        return -x + np.einsum("bkd,bk->bd", v, np.einsum("bkd,bd->bk", u, x))

    def push(self, u: np.ndarray, v: np.ndarray) -> None:
        self.us[:, self.rank] = u
        self.vs[:, self.rank] = v
        self.rank += 1

    def dense(self, b: int = 0) -> np.ndarray:
        dim = self.us.shape[-1]
        return -np.eye(dim) + self.us[b, :self.rank].T @ self.vs[b, :self.rank]


def broyden_solve(
    g: Callable[[np.ndarray], np.ndarray],
    z0: np.ndarray,
    config: SolverConfig,
    batched: bool = False,
    return_state: bool = False,
):
    """Find a root of ``g`` with Broyden's good method.

    Iterates ``z <- z - alpha * B g(z)`` where ``B`` approximates the inverse
    Jacobian of ``g``, starting from ``B = -I`` (so the first step is a plain
    fixed-point step when ``g(z) = f(z) - z``). Each evaluation of ``g``
    counts toward ``l_max``. The iterate with the smallest residual is
    returned.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    shape = z0.shape
    nb = shape[0] if batched else 1
    flat = lambda a: a.reshape(nb, -1)

    trace = SolverTrace()
    z = flat(z0).copy()
    gz = flat(np.asarray(g(z.reshape(shape)), dtype=np.float64))
    if gz.shape != z.shape:
        raise ValueError(f"g changed the state shape from {shape}")
    norm = residual_norm(gz)
    trace.residual_norms.append(norm)
    best_norm, best_z = norm, z.copy()
    inv = _LowRankInverse(nb, z.shape[1], config.l_max)

    while norm > config.epsilon and trace.l_stop < config.l_max:
        dz = -config.alpha * inv.apply(gz)
        z = z + dz
        g_new = flat(np.asarray(g(z.reshape(shape)), dtype=np.float64))
        dg = g_new - gz
        gz = g_new
        norm = residual_norm(gz)
        trace.residual_norms.append(norm)
        if norm < best_norm:
            best_norm, best_z = norm, z.copy()
        _check_divergence(trace, norm)
        if norm <= config.epsilon or trace.l_stop >= config.l_max:
            break
        # good Broyden: B += (dz - B dg) dz^T B / (dz^T B dg)
        b_dg = inv.apply(dg)
        vt = inv.apply_t(dz)
        denom = np.einsum("bd,bd->b", dz, b_dg)
        ok = np.abs(denom) >= DENOM_FLOOR
        trace.skipped_updates += int(np.sum(~ok))
        safe = np.where(ok, denom, 1.0)
        u = np.where(ok[:, None], (dz - b_dg) / safe[:, None], 0.0)
        inv.push(u, vt)

    trace.converged = best_norm <= config.epsilon
    out = best_z.reshape(shape)
    if return_state:
        return out, trace, inv
    return out, trace


def linear_solve_matfree(
    apply_At: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    config: SolverConfig,
    check_linear: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Solve ``A^T y + rhs = 0`` for ``y`` given only products ``v -> A^T v``.

    Runs :func:`broyden_solve` on the affine residual with tolerance
    ``epsilon * max(1, ||rhs||)``.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if check_linear:
        rng = rng or np.random.default_rng(0)
        u, v = rng.standard_normal(rhs.shape), rng.standard_normal(rhs.shape)
        lhs, rhs_sum = apply_At(u + v), apply_At(u) + apply_At(v)
        if np.max(np.abs(lhs - rhs_sum)) > 1e-10 * max(1.0, np.max(np.abs(rhs_sum))):
            raise ValueError("apply_At is not linear")
    tol = config.epsilon * max(1.0, residual_norm(rhs))
    inner = SolverConfig(alpha=config.alpha, epsilon=tol, l_max=config.l_max)
    y, trace = broyden_solve(lambda y: apply_At(y) + rhs, np.zeros_like(rhs), inner)
    if not trace.converged:
        achieved = min(trace.residual_norms)
        raise LinearSolveError(
            f"linear solve did not converge in {config.l_max} evaluations "
            f"(residual {achieved:.3e} > {tol:.3e})",
            achieved,
            trace,
        )
    return y
