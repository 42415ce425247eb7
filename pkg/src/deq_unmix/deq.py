"""Equilibrium layer: root-solved forward, implicit or Jacobian-free backward,
and the weight-tied unrolled variant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import Module
from .solvers import (
    LinearSolveError,
    SolverConfig,
    SolverTrace,
    broyden_solve,
    fixed_point_iterate,
    linear_solve_matfree,
    residual_norm,
)
from .tensor import Tape, Tensor

BACKWARD_MODES = ("implicit", "jfb")
FORWARD_SOLVERS = ("broyden", "plain")


@dataclass
class DeqOutput:
    z_star: Tensor
    trace: SolverTrace


class DeqLayer(Module):
    """Wraps a core ``f(z; x)`` whose output has the shape of ``z``.

    With ``unroll_l`` set the layer is a weight-tied network applying the
    core exactly ``unroll_l`` times from ``z = 0`` and differentiated by
    ordinary backpropagation. Otherwise it solves ``f(z; x) = z`` from
    ``z = 0`` and occupies a single tape node whose backward is either
    implicit differentiation or JFB.
    """

    def __init__(
        self,
        core,
        solver_config: SolverConfig | None = None,
        backward_mode: str = "jfb",
        unroll_l: int | None = None,
        solver: str = "broyden",
        backward_config: SolverConfig | None = None,
        implicit_fallback: bool = False,
    ):
        if backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}, got {backward_mode!r}")
        if solver not in FORWARD_SOLVERS:
            raise ValueError(f"solver must be one of {FORWARD_SOLVERS}, got {solver!r}")
        if unroll_l is not None and unroll_l < 1:
            raise ValueError(f"unroll_l must be >= 1, got {unroll_l}")
        self.core = core
        self.solver_config = solver_config or SolverConfig()
        self.backward_mode = backward_mode
        self.unroll_l = unroll_l
        self.solver = solver
        self.backward_config = backward_config
        self.implicit_fallback = implicit_fallback
        # rhs sign of the backward linear system; flipped only by mutation tests
        self._rhs_sign = 1.0
        self.last_backward_nodes = 0
        self.fallbacks = 0

    @property
    def weight_tied(self) -> bool:
        return self.unroll_l is not None

    def __call__(self, x: Tensor) -> DeqOutput:
        if self.weight_tied:
            return self.weight_tied_forward(x, self.unroll_l)
        return self.deq_forward(x)

    def _params(self) -> list[Tensor]:
        return [t for _, t in self.core.named_parameters()]

    def _f(self, x: Tensor):
        def f(z: np.ndarray) -> np.ndarray:
            return self.core(Tensor._wrap(z), x).data
        return f

    def weight_tied_forward(self, x: Tensor, L: int) -> DeqOutput:
        if L < 1:
            raise ValueError(f"L must be >= 1, got {L}")
        trace = SolverTrace()
        z = Tensor._wrap(np.zeros(x.shape))
        for _ in range(L):
            z_next = self.core(z, x)
            trace.residual_norms.append(residual_norm(z_next.data - z.data))
            z = z_next
        return DeqOutput(z, trace)

    def solve(self, x: Tensor) -> tuple[np.ndarray, SolverTrace]:
        """Run the forward solver without recording anything."""
        f = self._f(x)
        z0 = np.zeros(x.shape)
        with tn.no_grad():
            if self.solver == "plain":
                return fixed_point_iterate(f, z0, self.solver_config)
            return broyden_solve(lambda z: f(z) - z, z0, self.solver_config, batched=x.ndim > 2)

    def deq_forward(self, x: Tensor) -> DeqOutput:
        if self.weight_tied:
            raise RuntimeError("deq_forward called on a weight-tied layer")
        params = self._params()
        traces: list[SolverTrace] = []

        def forward(x_in, *_):
            z_star, trace = self.solve(x_in)
            traces.append(trace)
            return z_star

        def backward_rule(upstream, inputs, out):
            if self.backward_mode == "implicit":
                try:
                    return self.backward_implicit(upstream, out.data, inputs[0])
                except LinearSolveError:
                    if not self.implicit_fallback:
                        raise
                    self.fallbacks += 1
            return self.backward_jfb(upstream, out.data, inputs[0])

        op = tn.custom_gradient(forward, backward_rule, name="deq")
        z = op(x, *params)
        return DeqOutput(z, traces[0])

    def _record_core(self, z_star: np.ndarray, x: Tensor):
        with Tape() as tape:
            z = Tensor._wrap(z_star, requires_grad=True)
            xx = Tensor._wrap(x.data, requires_grad=True)
            out = self.core(z, xx)
        self.last_backward_nodes = len(tape)
        return tape, z, xx, out

    def backward_jfb(self, upstream: np.ndarray, z_star: np.ndarray, x: Tensor) -> list[np.ndarray]:
        """Gradients for ``(x, *params)`` through one core evaluation at ``z_star``."""
        tape, _, xx, out = self._record_core(z_star, x)
        return tape.gradient(out, [xx, *self._params()], upstream)

    def backward_implicit(self, upstream: np.ndarray, z_star: np.ndarray, x: Tensor) -> list[np.ndarray]:
        """Implicit-function-theorem gradients for ``(x, *params)``.

        Solves ``J_g^T y + upstream = 0`` with ``J_g = J_f - I`` at ``z_star``
        and backpropagates ``y`` through one core evaluation.
        """
        tape, z, xx, out = self._record_core(z_star, x)

        def apply_At(v: np.ndarray) -> np.ndarray:
            return tape.gradient(out, [z], v)[0] - v

        config = self.backward_config or self.solver_config
        y = linear_solve_matfree(apply_At, self._rhs_sign * upstream, config)
        return tape.gradient(out, [xx, *self._params()], y)
