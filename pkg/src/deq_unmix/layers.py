"""Network building blocks: linear, batch/group norm, (B)LSTM, the
equilibrium core and the stacked-BLSTM sequence model.

Sequences are laid out ``(..., T, features)``; any leading axes are batch.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import ParamSet, Tensor


class Module:
    """Container that discovers parameters and submodules from attributes."""

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state arrays (e.g. running statistics)."""
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def set_buffer(self, path: str, value: np.ndarray) -> None:
        owner, _, name = path.rpartition(".")
        module = self
        for part in owner.split(".") if owner else ():
            module = module[int(part)] if isinstance(module, (list, tuple)) else getattr(module, part)
        if name not in module._buffer_names:
            raise KeyError(f"no buffer {path!r}")
        setattr(module, name, np.array(value, dtype=np.float64))

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> ParamSet:
        return ParamSet(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    """Frame-wise affine map ``x @ W.T + b``."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.weight = _uniform(rng, (n_out, n_in), n_in)
        self.bias = _uniform(rng, (n_out,), n_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise tn.ShapeError(f"Linear: expected {self.n_in} input features, got shape {x.shape}")
        y = tn.matmul(x, tn.transpose(self.weight))
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    """Per-feature normalization with statistics over every leading axis.

    Training mode normalizes with the statistics of the current input and
    updates running estimates; evaluation mode uses the running estimates.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.features = features
        self.eps = eps
        self.momentum = momentum
        self.gamma = _param(np.ones(features))
        self.beta = _param(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def __call__(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = tn.mean(x, axis=axes)
            centered = x - mu
            var = tn.mean(centered * centered, axis=axes)
            m = self.momentum
            count = x.size // self.features
            unbiased = var.data * count / max(count - 1, 1)
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = (1 - m) * self.running_var + m * unbiased
            normed = centered / tn.sqrt(var + self.eps)
        else:
            normed = (x - Tensor(self.running_mean)) / Tensor(np.sqrt(self.running_var + self.eps))
        return normed * self.gamma + self.beta


class GroupNorm1(Module):
    """Group normalization with a single group: per-frame statistics over features."""

    def __init__(self, features: int, eps: float = 1e-5):
        if features < 2:
            raise ValueError("GroupNorm1 needs at least two features")
        self.features = features
        self.eps = eps
        self.gamma = _param(np.ones(features))
        self.beta = _param(np.zeros(features))

    def normalize(self, x: Tensor) -> Tensor:
        mu = tn.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = tn.mean(centered * centered, axis=-1, keepdims=True)
        return centered / tn.sqrt(var + self.eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.gamma + self.beta


class LSTM(Module):
    """One direction of an LSTM layer (i, f, g, o gate layout, two bias vectors)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None, reverse: bool = False):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.hidden, self.reverse = n_in, hidden, reverse
        self.w_ih = _uniform(rng, (4 * hidden, n_in), n_in)
        self.w_hh = _uniform(rng, (4 * hidden, hidden), hidden)
        self.b_ih = _uniform(rng, (4 * hidden,), hidden)
        self.b_hh = _uniform(rng, (4 * hidden,), hidden)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.lstm(x, self.w_ih, self.w_hh, self.b_ih, self.b_hh, reverse=self.reverse)


class BLSTM(Module):
    """Bidirectional LSTM layer; output is ``[forward, backward]`` per frame."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.hidden = n_in, hidden
        self.fwd = LSTM(n_in, hidden, rng)
        self.bwd = LSTM(n_in, hidden, rng, reverse=True)

    @property
    def n_out(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise tn.ShapeError(f"BLSTM: expected {self.n_in} input features, got shape {x.shape}")
        return tn.concat([self.fwd(x), self.bwd(x)], axis=-1)


class BLSTMStack(Module):
    def __init__(self, width: int, n_layers: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if width % 2:
            raise ValueError(f"BLSTM width must be even, got {width}")
        self.layers = [BLSTM(width, width // 2, rng) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class FThetaCore(Module):
    """Equilibrium core ``f(z; x) = BLSTM(tanh(GN(FC([z, x]))))``.

    Width ``p`` is preserved: the FC maps ``2p -> p`` and the BLSTM runs
    ``p/2`` units per direction.
    """

    def __init__(self, width: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if width % 2 or width < 2:
            raise ValueError(f"core width must be even and >= 2, got {width}")
        self.width = width
        self.fc = Linear(2 * width, width, bias=False, rng=rng)
        self.gn = GroupNorm1(width)
        self.blstm = BLSTM(width, width // 2, rng)

    def __call__(self, z: Tensor, x: Tensor) -> Tensor:
        if z.shape != x.shape:
            raise tn.ShapeError(f"FThetaCore: z shape {z.shape} != x shape {x.shape}")
        u = tn.concat([z, x], axis=-1)
        v = self.fc(u)
        return self.blstm(tn.tanh(self.gn(v)))

    def scale_to_contraction(self, spectral: float = 0.5) -> "FThetaCore":
        """Rescale every weight matrix (and the GN gain) to spectral norm ``spectral``."""
        for name, t in self.named_parameters():
            arr = t.data
            if arr.ndim == 2:
                norm = np.linalg.norm(arr, 2)
                if norm > 0:
                    _assign(t, arr * (spectral / norm))
            elif name == "gn.gamma":
                _assign(t, np.full_like(arr, spectral))
        return self


class UMXSequenceModel(Module):
    """``tanh(x) -> BLSTM stack -> [tanh(x), out] -> FC -> BN -> ReLU``."""

    def __init__(self, hidden: int, n_layers: int = 3, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden
        self.lstm = BLSTMStack(hidden, n_layers, rng)
        self.fc2 = Linear(2 * hidden, hidden, bias=False, rng=rng)
        self.bn2 = BatchNorm(hidden)

    def __call__(self, x: Tensor) -> Tensor:
        xt = tn.tanh(x)
        out = self.lstm(xt)
        return tn.relu(self.bn2(self.fc2(tn.concat([xt, out], axis=-1))))


class EquilibriumSequenceModel(Module):
    """``tanh(x) -> DEQ/weight-tied block -> [tanh(x), z] -> FC -> BN -> ReLU``."""

    def __init__(self, hidden: int, deq, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden
        self.deq = deq
        self.fc2 = Linear(2 * hidden, hidden, bias=False, rng=rng)
        self.bn2 = BatchNorm(hidden)
        self.last_output = None

    def __call__(self, x: Tensor) -> Tensor:
        xt = tn.tanh(x)
        out = self.deq(xt)
        self.last_output = out
        return tn.relu(self.bn2(self.fc2(tn.concat([xt, out.z_star], axis=-1))))


def _assign(t: Tensor, arr: np.ndarray) -> None:
    """Replace a parameter's values (never used on a recording tape)."""
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    t.data = arr


def blstm_param_count(n_in: int, hidden: int) -> int:
    return 2 * (4 * hidden * n_in + 4 * hidden * hidden + 8 * hidden)


def blstm_macs(n_in: int, hidden: int) -> int:
    """Matmul multiply-accumulates per frame for both directions."""
    return 2 * 4 * hidden * (n_in + hidden)
