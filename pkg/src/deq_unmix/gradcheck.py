"""Property suites for the equilibrium layer on random contraction-scaled cores.

Each suite draws independent instances, compares the layer against an
oracle that does not share its code path (long plain iteration, finite
differences through a tight solve, dense linear algebra) and reports the
worst instance so a failure can be replayed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .deq import DeqLayer
from .layers import FThetaCore
from .solvers import SolverConfig, fixed_point_iterate
from .tensor import Tape, Tensor, vjp

TIGHT = SolverConfig(epsilon=1e-10, l_max=100)


@dataclass
class Instance:
    seed: int
    width: int
    frames: int
    scale: float = 0.5

    def build(self) -> tuple[FThetaCore, Tensor, np.ndarray]:
        """Return ``(core, x, r)``; the loss is ``sum(r * z_star)``."""
        rng = np.random.default_rng(self.seed)
        core = FThetaCore(self.width, rng).scale_to_contraction(self.scale)
        x = Tensor(rng.standard_normal((self.frames, self.width)))
        r = rng.standard_normal((self.frames, self.width))
        return core, x, r


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    worst_value: float = 0.0
    worst_instance: dict = field(default_factory=dict)


def random_instances(n: int, seed: int, max_width: int = 16, max_frames: int = 12, dim: int | None = None):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        if dim is not None:
            width, frames = 2, max(dim // 2, 1)
        else:
            width = 2 * int(rng.integers(1, max_width // 2 + 1))
            frames = int(rng.integers(1, max_frames + 1))
        yield Instance(int(rng.integers(2**31)), width, frames)


def long_unroll(core, x: Tensor, steps: int = 1000, epsilon: float = 1e-300) -> np.ndarray:
    z, _ = fixed_point_iterate(lambda z: core(Tensor(z), x).data, np.zeros(x.shape),
                               SolverConfig(epsilon=epsilon, l_max=steps))
    return z


def layer_gradients(core, x: Tensor, r: np.ndarray, mode: str, config: SolverConfig = TIGHT,
                    rhs_sign: float = 1.0) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(r * z_star)`` through a :class:`DeqLayer`."""
    layer = DeqLayer(core, config, backward_mode=mode, backward_config=SolverConfig(epsilon=1e-12, l_max=200))
    layer._rhs_sign = rhs_sign
    params = core.parameters()
    params.zero_grad()
    with Tape() as tape:
        out = layer(x)
        loss = (out.z_star * Tensor(r)).sum()
        tape.backward(loss)
    return params.grads()


def fd_parameter_gradient(core, x: Tensor, r: np.ndarray, path: str, index: tuple, h: float = 1e-5) -> float:
    """Central difference of ``sum(r * z_star)`` w.r.t. one parameter entry, re-solving tightly each side."""
    param = core.parameters()[path]
    base = param.data.copy()
    values = []
    for sign in (1.0, -1.0):
        arr = base.copy()
        arr[index] += sign * h
        arr.flags.writeable = False
        param.data = arr
        values.append(float(np.sum(r * long_unroll(core, x, 2000, epsilon=1e-14))))
    base.flags.writeable = False
    param.data = base
    return (values[0] - values[1]) / (2 * h)


def check_unroll_equivalence(n: int = 20, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    worst, worst_inst = 0.0, None
    for inst in random_instances(n, seed):
        core, x, _ = inst.build()
        layer = DeqLayer(core, TIGHT)
        z = layer(x).z_star.data
        diff = float(np.max(np.abs(z - long_unroll(core, x))))
        if diff >= worst:
            worst, worst_inst = diff, inst
    return SuiteResult("unroll_equivalence", worst < tol, f"max |deq - unroll| = {worst:.2e} (tol {tol:g})",
                       worst, asdict(worst_inst))


def check_implicit_fd(n: int = 10, seed: int = 1, tol: float = 1e-5, n_probes: int = 10,
                      rhs_sign: float = 1.0) -> SuiteResult:
    rng = np.random.default_rng(seed + 7919)
    worst, worst_inst = 0.0, None
    for inst in random_instances(n, seed):
        core, x, r = inst.build()
        grads = layer_gradients(core, x, r, "implicit", rhs_sign=rhs_sign)
        names = list(grads)
        analytic, numeric = [], []
        for _ in range(n_probes):
            path = names[int(rng.integers(len(names)))]
            index = tuple(int(rng.integers(s)) for s in grads[path].shape)
            analytic.append(grads[path][index])
            numeric.append(fd_parameter_gradient(core, x, r, path, index))
        analytic, numeric = np.array(analytic), np.array(numeric)
        err = float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))
        if err >= worst:
            worst, worst_inst = err, inst
    return SuiteResult("implicit_vs_finite_differences", worst < tol,
                       f"max relative error = {worst:.2e} (tol {tol:g})", worst, asdict(worst_inst))


def check_jfb_descent(n: int = 200, seed: int = 2, min_fraction: float = 0.95) -> SuiteResult:
    positives, worst, worst_inst = 0, np.inf, None
    for inst in random_instances(n, seed):
        core, x, r = inst.build()
        gi = np.concatenate([g.ravel() for g in layer_gradients(core, x, r, "implicit").values()])
        gj = np.concatenate([g.ravel() for g in layer_gradients(core, x, r, "jfb").values()])
        cos = float(gi @ gj / max(np.linalg.norm(gi) * np.linalg.norm(gj), 1e-300))
        positives += cos > 0
        if cos < worst:
            worst, worst_inst = cos, inst
    frac = positives / n
    return SuiteResult("jfb_descent", frac >= min_fraction,
                       f"cosine > 0 on {positives}/{n} instances (min cosine {worst:.3f})", worst, asdict(worst_inst))


def check_dense_implicit(n: int = 10, seed: int = 3, dim: int = 8, tol: float = 1e-8,
                         rhs_sign: float = 1.0) -> SuiteResult:
    """Compare implicit input-gradients against ``-r (J_g)^-1 J_fx`` assembled densely."""
    worst, worst_inst = 0.0, None
    for inst in random_instances(n, seed, dim=dim):
        core, x, r = inst.build()
        layer = DeqLayer(core, TIGHT, backward_mode="implicit", backward_config=SolverConfig(epsilon=1e-13, l_max=200))
        layer._rhs_sign = rhs_sign
        with Tape() as tape:
            xx = Tensor(x.data, requires_grad=True)
            out = layer(xx)
            tape.backward((out.z_star * Tensor(r)).sum())
        z_star = out.z_star.data
        m = z_star.size
        eye = np.eye(m)
        Jz = np.stack([vjp(lambda z: core(z, x), z_star, e.reshape(z_star.shape)).ravel() for e in eye])
        Jx = np.stack([vjp(lambda v: core(Tensor(z_star), v), x.data, e.reshape(z_star.shape)).ravel() for e in eye])
        y = np.linalg.solve((Jz - eye).T, -r.ravel())
        expected = (y @ Jx).reshape(x.shape)
        err = float(np.max(np.abs(xx.grad.data - expected)) / max(np.max(np.abs(expected)), 1e-12))
        if err >= worst:
            worst, worst_inst = err, inst
    return SuiteResult("implicit_vs_dense_solve", worst < tol,
                       f"max relative error = {worst:.2e} (tol {tol:g})", worst, asdict(worst_inst))
