"""Independent finite-difference oracles shared by the test modules."""

import numpy as np


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def fd_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Dense Jacobian (out.size x x.size) of array-valued ``fn`` by central differences."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        cols.append((fn(x + e.reshape(x.shape)) - fn(x - e.reshape(x.shape))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# filled by test_acceptance, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"AC{number:02d} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
