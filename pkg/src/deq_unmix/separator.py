"""Separator assembly, model variants, parameter/MAC accounting, training
loop and checkpoint container.

Magnitudes are ``(batch, channels, frames, bins)``; a single example may
drop the batch axis.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tn
from .deq import BACKWARD_MODES, DeqLayer
from .dsp import n_frames
from .layers import (
    BatchNorm,
    EquilibriumSequenceModel,
    FThetaCore,
    Linear,
    Module,
    UMXSequenceModel,
    _assign,
    blstm_macs,
    blstm_param_count,
)
from .solvers import SolverConfig
from .tensor import ShapeError, Tape, Tensor

VARIANTS = ("umx", "umx_large4", "umx_large5", "umx_small", "wt_umx", "deq_umx")
UMX_LAYERS = {"umx": 3, "umx_large4": 4, "umx_large5": 5, "umx_small": 3}
FULL_SCALE_TARGETS = ("vocals", "drums", "bass", "other")
TOY_TARGETS = ("tonal", "noise")


def crop_bins(sample_rate: int, frame_len: int, max_hz: float) -> int:
    """Number of STFT bins whose center frequency is at most ``max_hz``."""
    freqs = np.linspace(0, sample_rate / 2, frame_len // 2 + 1)
    return int(np.max(np.nonzero(freqs <= max_hz)[0])) + 1


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    bins_total: int
    bins_cropped: int
    channels: int
    hidden: int
    targets: tuple[str, ...]
    sample_rate: int
    frame_len: int
    hop: int
    unroll_l: int | None = None
    solver_config: SolverConfig | None = None
    backward_mode: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.bins_cropped <= self.bins_total:
            raise ValueError(f"need 0 < bins_cropped <= bins_total, got {self.bins_cropped}, {self.bins_total}")
        if self.bins_total != self.frame_len // 2 + 1:
            raise ValueError(f"bins_total {self.bins_total} does not match frame length {self.frame_len}")
        if self.channels < 1 or self.hidden < 2 or self.hidden % 2:
            raise ValueError("channels must be >= 1 and hidden a positive even number")
        if not self.targets:
            raise ValueError("at least one target is required")
        object.__setattr__(self, "targets", tuple(self.targets))
        if (self.unroll_l is not None) != (self.variant == "wt_umx"):
            raise ValueError("unroll_l is required for wt_umx and only for wt_umx")
        if self.unroll_l is not None and self.unroll_l < 1:
            raise ValueError(f"unroll_l must be >= 1, got {self.unroll_l}")
        is_deq = self.variant == "deq_umx"
        if (self.solver_config is not None) != is_deq or (self.backward_mode is not None) != is_deq:
            raise ValueError("solver_config and backward_mode are required for deq_umx and only for deq_umx")
        if is_deq and self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}, got {self.backward_mode!r}")

    @property
    def n_layers(self) -> int | None:
        return UMX_LAYERS.get(self.variant)

    @property
    def is_equilibrium(self) -> bool:
        return self.variant in ("wt_umx", "deq_umx")

    @classmethod
    def build(cls, variant: str, unroll_l: int = 4, l_max: int = 6, epsilon: float = 1e-3,
              backward_mode: str = "jfb", **fields) -> "ModelSpec":
        """Fill in the variant-specific fields from keyword defaults."""
        extra: dict = {}
        if variant == "wt_umx":
            extra["unroll_l"] = unroll_l
        elif variant == "deq_umx":
            extra["solver_config"] = SolverConfig(epsilon=epsilon, l_max=l_max)
            extra["backward_mode"] = backward_mode
        return cls(variant=variant, **fields, **extra)

    @classmethod
    def full_scale(cls, variant: str, **kwargs) -> "ModelSpec":
        """44.1 kHz stereo, 4096/1024 framing, 16 kHz crop, four targets."""
        sr, n = 44100, 4096
        fields = dict(bins_total=n // 2 + 1, bins_cropped=crop_bins(sr, n, 16000.0), channels=2,
                      hidden=410 if variant == "umx_small" else 512, targets=FULL_SCALE_TARGETS,
                      sample_rate=sr, frame_len=n, hop=1024)
        fields.update({k: kwargs.pop(k) for k in list(kwargs) if k in fields})
        return cls.build(variant, **fields, **kwargs)

    @classmethod
    def toy(cls, variant: str = "deq_umx", **kwargs) -> "ModelSpec":
        """8 kHz mono, 128/32 framing (65 bins, no crop), hidden 32."""
        fields = dict(bins_total=65, bins_cropped=65, channels=1, hidden=32, targets=TOY_TARGETS,
                      sample_rate=8000, frame_len=128, hop=32)
        fields.update({k: kwargs.pop(k) for k in list(kwargs) if k in fields})
        return cls.build(variant, **fields, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        if self.solver_config is not None:
            d["solver_config"] = asdict(self.solver_config)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("solver_config") is not None:
            d["solver_config"] = SolverConfig(**d["solver_config"])
        d["targets"] = tuple(d["targets"])
        return cls(**d)


# --------------------------------------------------------------------------- model


def _plain_probe_config(L: int) -> SolverConfig:
    # tolerance below any attainable residual so exactly L evaluations run
    return SolverConfig(epsilon=1e-300, l_max=L)


class SeparatorModel(Module):
    """crop -> normalize -> FC+BN -> sequence model -> FC+BN -> output affine -> ReLU mask."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.spec = spec
        C, Fc, F, H = spec.channels, spec.bins_cropped, spec.bins_total, spec.hidden
        self.input_mean = Tensor(np.zeros(Fc), requires_grad=True)
        self.input_scale = Tensor(np.ones(Fc), requires_grad=True)
        self.fc1 = Linear(C * Fc, H, bias=False, rng=rng)
        self.bn1 = BatchNorm(H)
        if spec.is_equilibrium:
            core = FThetaCore(H, rng)
            if spec.variant == "wt_umx":
                deq = DeqLayer(core, unroll_l=spec.unroll_l)
            else:
                deq = DeqLayer(core, spec.solver_config, backward_mode=spec.backward_mode)
            self.seq = EquilibriumSequenceModel(H, deq, rng)
        else:
            self.seq = UMXSequenceModel(H, spec.n_layers, rng)
        self.fc3 = Linear(H, C * F, bias=False, rng=rng)
        self.bn3 = BatchNorm(C * F)
        self.output_scale = Tensor(np.ones(F), requires_grad=True)
        self.output_mean = Tensor(np.ones(F), requires_grad=True)

    # -- stage control for equilibrium variants

    @property
    def core(self) -> FThetaCore:
        if not self.spec.is_equilibrium:
            raise AttributeError(f"variant {self.spec.variant} has no equilibrium core")
        return self.seq.deq.core

    def set_weight_tied(self, L: int) -> None:
        self.seq.deq = DeqLayer(self.core, unroll_l=L)

    def set_equilibrium(self, solver_config: SolverConfig | None = None, backward_mode: str | None = None,
                        solver: str = "broyden", backward_config: SolverConfig | None = None) -> None:
        spec = self.spec
        config = solver_config or spec.solver_config or SolverConfig()
        mode = backward_mode or spec.backward_mode or "jfb"
        self.seq.deq = DeqLayer(self.core, config, backward_mode=mode, solver=solver, backward_config=backward_config)

    def set_plain_probe(self, L: int) -> None:
        """Equilibrium mode with plain iteration capped at ``L`` evaluations."""
        self.set_equilibrium(_plain_probe_config(L), solver="plain")

    @property
    def last_nfe(self) -> int:
        if not self.spec.is_equilibrium or self.seq.last_output is None:
            return 0
        return self.seq.last_output.trace.l_stop

    # -- forward

    def set_input_stats(self, mean: np.ndarray, scale: np.ndarray) -> None:
        _assign(self.input_mean, mean)
        _assign(self.input_scale, scale)

    def set_identity_mask(self) -> None:
        """Make the decoder emit a mask of exactly one everywhere (debug construction)."""
        _assign(self.fc3.weight, np.zeros(self.fc3.weight.shape))
        _assign(self.bn3.gamma, np.zeros(self.bn3.gamma.shape))
        _assign(self.bn3.beta, np.zeros(self.bn3.beta.shape))
        _assign(self.output_scale, np.ones(self.spec.bins_total))
        _assign(self.output_mean, np.ones(self.spec.bins_total))

    def _check(self, mag) -> Tensor:
        mag = tn.as_tensor(mag)
        if mag.ndim == 3:
            mag = tn.reshape(mag, (1, *mag.shape))
        C, F = self.spec.channels, self.spec.bins_total
        if mag.ndim != 4 or mag.shape[1] != C or mag.shape[3] != F:
            raise ShapeError(f"separator expects (batch, {C}, frames, {F}) magnitudes, got {mag.shape}")
        if np.any(mag.data < 0):
            raise ValueError("magnitudes must be nonnegative")
        return mag

    def mask(self, mag) -> Tensor:
        mag = self._check(mag)
        B, C, T, F = mag.shape
        Fc = self.spec.bins_cropped
        x = tn.getitem(mag, (Ellipsis, slice(0, Fc))) if Fc < F else mag
        x = (x - self.input_mean) * self.input_scale
        x = tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, T, C * Fc))
        h = self.seq(self.bn1(self.fc1(x)))
        y = tn.reshape(self.bn3(self.fc3(h)), (B, T, C, F))
        y = tn.relu(y * self.output_scale + self.output_mean)
        return tn.transpose(y, (0, 2, 1, 3))

    def __call__(self, mag) -> Tensor:
        mag = self._check(mag)
        return self.mask(mag) * mag

    def separate(self, mag: np.ndarray) -> np.ndarray:
        """Inference helper: evaluation mode, no tape; keeps the input's batch layout."""
        was_training = self.training
        self.eval()
        try:
            with tn.no_grad():
                out = self(mag).data
        finally:
            self.train(was_training)
        return out.reshape(np.shape(mag))

    # -- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": t.data for k, t in self.parameters().items()}
        state.update({f"buffer/{k}": v for k, v in sorted(self.named_buffers())})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.state_arrays().items()}
        got = {k: tuple(v.shape) for k, v in arrays.items() if k.startswith(("param/", "buffer/"))}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise CheckpointMismatch(f"state mismatch: missing={missing[:3]} unexpected={extra[:3]} shape={bad[:3]}")
        params = self.parameters()
        for k, v in arrays.items():
            if k.startswith("param/"):
                _assign(params[k[6:]], v)
            elif k.startswith("buffer/"):
                self.set_buffer(k[7:], v)


# --------------------------------------------------------------------------- accounting


@dataclass(frozen=True)
class Count:
    per_target: int
    total: int


def core_params(H: int) -> int:
    return 2 * H * H + 2 * H + blstm_param_count(H, H // 2)


def core_macs(H: int) -> int:
    """Per-frame MACs of one core evaluation."""
    return 2 * H * H + blstm_macs(H, H // 2)


def _params_per_target(spec: ModelSpec) -> int:
    C, Fc, F, H = spec.channels, spec.bins_cropped, spec.bins_total, spec.hidden
    io = 2 * Fc + C * Fc * H + 2 * H + H * C * F + 2 * C * F + 2 * F
    skip = 2 * H * H + 2 * H
    if spec.is_equilibrium:
        seq = core_params(H)
    else:
        seq = spec.n_layers * blstm_param_count(H, H // 2)
    return io + skip + seq


def count_params(spec: ModelSpec, instantiate: bool = False) -> Count:
    """Closed-form parameter count; ``instantiate`` cross-checks against a built model."""
    per = _params_per_target(spec)
    if instantiate:
        built = SeparatorModel(spec).parameters().total_count()
        if built != per:
            raise AssertionError(f"closed form {per} != instantiated {built} for {spec.variant}")
    return Count(per, per * len(spec.targets))


def frames_for(spec: ModelSpec, seconds: float) -> int:
    if seconds <= 0:
        raise ValueError(f"seconds must be positive, got {seconds}")
    return n_frames(int(round(seconds * spec.sample_rate)), spec.hop)


def count_macs(spec: ModelSpec, seconds: float, iterations: int | None = None) -> Count:
    """Matmul MACs (FC layers and LSTM gates) for ``seconds`` of audio, STFT/MWF excluded.

    Equilibrium variants run ``iterations`` core evaluations, defaulting to
    ``unroll_l`` for WT-UMX and ``l_max`` for DEQ-UMX.
    """
    C, Fc, F, H = spec.channels, spec.bins_cropped, spec.bins_total, spec.hidden
    base = C * Fc * H + 2 * H * H + H * C * F
    if spec.is_equilibrium:
        if iterations is None:
            iterations = spec.unroll_l if spec.variant == "wt_umx" else spec.solver_config.l_max
        if iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {iterations}")
        per_frame = base + iterations * core_macs(H)
    else:
        if iterations is not None:
            raise ValueError(f"variant {spec.variant} has no iteration count")
        per_frame = base + spec.n_layers * blstm_macs(H, H // 2)
    per = per_frame * frames_for(spec, seconds)
    return Count(per, per * len(spec.targets))


def per_iteration_core_macs(spec: ModelSpec, seconds: float) -> Count:
    per = core_macs(spec.hidden) * frames_for(spec, seconds)
    return Count(per, per * len(spec.targets))


# --------------------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointMismatch(ValueError):
    pass


CHECKPOINT_MAGIC = b"DEQCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        names = list(self.arrays)
        header = {
            "spec": self.spec.to_dict(),
            "meta": self.meta,
            "arrays": [{"name": k, "shape": list(np.shape(self.arrays[k]))} for k in names],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(self.arrays[k], dtype="<f8").tobytes() for k in names)
        return CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(head)) + head + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        m = len(CHECKPOINT_MAGIC)
        if raw[:m] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)", 0)
        if len(raw) < m + 5:
            raise CheckpointError("truncated header", len(raw))
        version, head_len = struct.unpack("<BI", raw[m:m + 5])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", m)
        start = m + 5
        if start + head_len > len(raw):
            raise CheckpointError(f"header declares {head_len} bytes but only {len(raw) - start} remain", start)
        try:
            header = json.loads(raw[start:start + head_len])
            spec = ModelSpec.from_dict(header["spec"])
            entries = [(e["name"], tuple(e["shape"])) for e in header["arrays"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt header: {exc}", start) from exc
        pos = start + head_len
        arrays = {}
        for name, shape in entries:
            n = math.prod(shape) * 8
            if pos + n > len(raw):
                raise CheckpointError(f"payload for {name!r} needs {n} bytes, {len(raw) - pos} remain", pos)
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += n
        if pos != len(raw):
            raise CheckpointError(f"{len(raw) - pos} trailing bytes after payload", pos)
        return cls(spec, arrays, header["meta"])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self) -> SeparatorModel:
        model = SeparatorModel(self.spec)
        model.load_state_arrays(self.arrays)
        stage = self.meta.get("stage")
        if stage == STAGE_PRETRAIN and self.spec.variant == "deq_umx":
            model.set_weight_tied(self.meta["train_config"]["pretrain_unroll_l"])
        return model


# --------------------------------------------------------------------------- training

STAGE_PRETRAIN = "pretrain_wt"
STAGE_DEQ = "deq"
STAGE_PLAIN = "train"


@dataclass
class TrainConfig:
    segment_seconds: float = 6.0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    lr_decay_factor: float = 0.3
    plateau_patience_epochs: int = 80
    early_stop_patience_epochs: int = 300
    pretrain_unroll_l: int = 4
    pretrain_epochs: int = 0
    l_max_after_pretrain: int = 6
    epochs: int = 1000
    batch_size: int = 16
    backward_mode: str = "jfb"
    seed: int = 0

    def __post_init__(self):
        positive = ("segment_seconds", "lr", "lr_decay_factor", "plateau_patience_epochs",
                    "early_stop_patience_epochs", "pretrain_unroll_l", "l_max_after_pretrain", "batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.pretrain_epochs < 0 or self.epochs < 0:
            raise ValueError("weight_decay, pretrain_epochs and epochs must be nonnegative")
        if self.lr_decay_factor >= 1:
            raise ValueError("lr_decay_factor must be below 1")
        if self.backward_mode not in BACKWARD_MODES:
            raise ValueError(f"backward_mode must be one of {BACKWARD_MODES}, got {self.backward_mode!r}")


@dataclass
class MagnitudeSet:
    """Paired mixture/target magnitudes, each ``(N, channels, frames, bins)``."""

    mixtures: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.mixtures.shape != self.targets.shape or self.mixtures.ndim != 4:
            raise ValueError(f"mixtures {self.mixtures.shape} and targets {self.targets.shape} must match and be 4-D")

    def __len__(self) -> int:
        return len(self.mixtures)


@dataclass
class EpochLog:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    lr: float
    nfe_mean: float

    def line(self) -> str:
        return (f"{self.epoch}, {self.stage}, {self.train_loss:.6e}, {self.val_loss:.6e}, "
                f"{self.lr:.3e}, {self.nfe_mean:.2f}")

    @classmethod
    def parse(cls, line: str) -> "EpochLog":
        e, s, tl, vl, lr, nfe = (p.strip() for p in line.split(","))
        return cls(int(e), s, float(tl), float(vl), float(lr), float(nfe))


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: tn.ParamSet, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = {k: np.zeros(t.shape) for k, t in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for k, t in self.params.items():
            g = t.grad.data + self.weight_decay * t.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            _assign(t, t.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"adam_m/{k}": v for k, v in self.m.items()}
        state.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam_m/{k}"])
            self.v[k] = np.array(arrays[f"adam_v/{k}"])


@dataclass
class _Progress:
    """Resumable loop state beyond parameters and moments."""

    epoch: int = 0
    stage: str = STAGE_PLAIN
    stage_epoch: int = 0
    best_val: float = math.inf
    plateau_bad: int = 0
    stop_bad: int = 0
    lr: float = 1e-3
    done: bool = False


def update_schedule(progress: _Progress, val: float, config: TrainConfig) -> None:
    """Plateau learning-rate decay and early-stopping bookkeeping after one epoch."""
    if val < progress.best_val:
        progress.best_val, progress.plateau_bad, progress.stop_bad = val, 0, 0
        return
    progress.plateau_bad += 1
    progress.stop_bad += 1
    if progress.plateau_bad > config.plateau_patience_epochs:
        progress.lr *= config.lr_decay_factor
        progress.plateau_bad = 0


def stage_plan(spec: ModelSpec, config: TrainConfig) -> list[tuple[str, int]]:
    if spec.variant == "deq_umx":
        plan = [(STAGE_PRETRAIN, config.pretrain_epochs)] if config.pretrain_epochs else []
        return plan + [(STAGE_DEQ, config.epochs)]
    return [(STAGE_PLAIN, config.epochs)]


def _configure_stage(model: SeparatorModel, stage: str, config: TrainConfig) -> None:
    if model.spec.variant != "deq_umx":
        return
    if stage == STAGE_PRETRAIN:
        model.set_weight_tied(config.pretrain_unroll_l)
    else:
        cfg = replace(model.spec.solver_config, l_max=config.l_max_after_pretrain)
        model.set_equilibrium(cfg, config.backward_mode)


def mse_loss(model: SeparatorModel, mixtures: np.ndarray, targets: np.ndarray) -> Tensor:
    Fc = model.spec.bins_cropped
    est = model(mixtures)
    diff = tn.getitem(est, (Ellipsis, slice(0, Fc))) - Tensor(targets[..., :Fc])
    return tn.mean(diff * diff)


def evaluate_loss(model: SeparatorModel, data: MagnitudeSet, batch_size: int) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with tn.no_grad():
            for i in range(0, len(data), batch_size):
                sl = slice(i, i + batch_size)
                n = len(data.mixtures[sl])
                total += mse_loss(model, data.mixtures[sl], data.targets[sl]).item() * n
    finally:
        model.train(was_training)
    return total / len(data)


def _segment_frames(spec: ModelSpec, config: TrainConfig) -> int:
    return n_frames(int(round(config.segment_seconds * spec.sample_rate)), spec.hop)


def _epoch_batches(data: MagnitudeSet, rng: np.random.Generator, seg: int, batch_size: int):
    order = rng.permutation(len(data))
    T = data.mixtures.shape[2]
    seg = min(seg, T)
    starts = rng.integers(0, T - seg + 1, size=len(data))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        mix = np.stack([data.mixtures[j, :, starts[j]:starts[j] + seg] for j in idx])
        tgt = np.stack([data.targets[j, :, starts[j]:starts[j] + seg] for j in idx])
        yield mix, tgt


def input_statistics(data: MagnitudeSet, bins_cropped: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and inverse standard deviation of the cropped mixture magnitudes."""
    x = data.mixtures[..., :bins_cropped].reshape(-1, bins_cropped)
    return x.mean(axis=0), 1.0 / np.maximum(x.std(axis=0), 1e-8)


def make_checkpoint(model: SeparatorModel, opt: Adam, progress: _Progress, config: TrainConfig,
                    target: str) -> Checkpoint:
    arrays = {**model.state_arrays(), **opt.state_arrays()}
    meta = {
        **asdict(progress),
        "best_val": progress.best_val if math.isfinite(progress.best_val) else None,
        "adam_step": opt.step_count,
        "train_config": asdict(config),
        "target": target,
    }
    return Checkpoint(model.spec, arrays, meta)


@dataclass
class TrainResult:
    model: SeparatorModel
    history: list[EpochLog]
    checkpoint: Checkpoint
    initial_loss: float
    final_loss: float


def train(
    model: SeparatorModel,
    train_set: MagnitudeSet,
    valid_set: MagnitudeSet,
    config: TrainConfig,
    target: str = "",
    log: Callable[[str], None] | None = None,
    resume: Checkpoint | None = None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Train one target network, optionally resuming from a checkpoint.

    ``max_epochs`` stops after that many epochs in this call (the returned
    checkpoint can resume the run).
    """
    log = log or (lambda line: None)
    params = model.parameters()
    opt = Adam(params, config.lr, config.weight_decay)
    plan = stage_plan(model.spec, config)
    if resume is not None:
        model.load_state_arrays(resume.arrays)
        opt.load_state_arrays(resume.arrays)
        meta = resume.meta
        opt.step_count = meta["adam_step"]
        best = meta["best_val"]
        progress = _Progress(meta["epoch"], meta["stage"], meta["stage_epoch"],
                             math.inf if best is None else best, meta["plateau_bad"], meta["stop_bad"],
                             meta["lr"])  # budgets are rechecked, so a larger epoch count extends a finished run
    else:
        model.set_input_stats(*input_statistics(train_set, model.spec.bins_cropped))
        progress = _Progress(stage=plan[0][0], lr=config.lr)
    opt.lr = progress.lr
    model.train()
    _configure_stage(model, progress.stage, config)
    initial = evaluate_loss(model, train_set, config.batch_size)
    seg = _segment_frames(model.spec, config)
    stage_names = [s for s, _ in plan]
    history: list[EpochLog] = []
    ran = 0

    while not progress.done and (max_epochs is None or ran < max_epochs):
        budget = dict(plan)[progress.stage]
        if progress.stage_epoch >= budget or progress.stop_bad >= config.early_stop_patience_epochs:
            k = stage_names.index(progress.stage)
            if k + 1 == len(stage_names):
                progress.done = True
                break
            # each stage gets its own scheduler and early-stopping budget
            progress = replace(progress, stage=stage_names[k + 1], stage_epoch=0, best_val=math.inf,
                               plateau_bad=0, stop_bad=0)
            _configure_stage(model, progress.stage, config)
            continue

        rng = np.random.default_rng([config.seed, progress.epoch])
        losses, nfes, counts = [], [], []
        try:
            for mix, tgt in _epoch_batches(train_set, rng, seg, config.batch_size):
                params.zero_grad()
                with Tape() as tape:
                    loss = mse_loss(model, mix, tgt)
                    tape.backward(loss)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
                opt.step()
                losses.append(loss.item())
                nfes.append(model.last_nfe)
                counts.append(len(mix))
            val = evaluate_loss(model, valid_set, config.batch_size)
            if not math.isfinite(val):
                raise FloatingPointError("validation loss is not finite")
        except FloatingPointError as exc:
            ckpt = make_checkpoint(model, opt, progress, config, target)
            raise TrainingAborted(f"numeric failure in epoch {progress.epoch} ({progress.stage}): {exc}", ckpt) from exc

        entry = EpochLog(progress.epoch, progress.stage, float(np.average(losses, weights=counts)), val,
                         opt.lr, float(np.mean(nfes)))
        history.append(entry)
        log(entry.line())

        update_schedule(progress, val, config)
        opt.lr = progress.lr
        progress.epoch += 1
        progress.stage_epoch += 1
        ran += 1

    # both endpoints are measured the same way: evaluation mode over the full training set
    final = evaluate_loss(model, train_set, config.batch_size)
    return TrainResult(model, history, make_checkpoint(model, opt, progress, config, target), initial, final)
