"""Signal pipeline around the separator: STFT, multichannel Wiener filter,
SDR, synthetic scenes and WAV files.

Waves are ``(channels, samples)`` float64 arrays; spectrograms are
``(channels, frames, bins)`` complex arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kvfile import parse_key_values

SDR_CAP_DB = 80.0


# --------------------------------------------------------------------------- STFT


class ColaError(ValueError):
    pass


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def check_cola(window: np.ndarray, hop: int, tol: float = 1e-10) -> None:
    """Raise unless the squared window overlap-adds to a constant at this hop."""
    n = len(window)
    if not 0 < hop <= n:
        raise ColaError(f"hop must be in (0, {n}], got {hop}")
    acc = np.zeros(hop)
    w2 = window**2
    for start in range(0, n, hop):
        seg = w2[start:start + hop]
        acc[: len(seg)] += seg
    if acc.min() <= 0 or np.ptp(acc) > tol * acc.max():
        raise ColaError(f"squared window of length {n} is not overlap-add constant at hop {hop}")


@dataclass
class Spectrogram:
    data: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int
    length: int
    window: str = "hann"

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[-1] != self.frame_len // 2 + 1:
            raise ValueError(f"expected (channels, frames, {self.frame_len // 2 + 1}) data, got {self.data.shape}")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    def with_data(self, data: np.ndarray) -> "Spectrogram":
        return Spectrogram(data, self.frame_len, self.hop, self.sample_rate, self.length, self.window)


def n_frames(samples: int, hop: int) -> int:
    """Frames produced by a centered STFT of ``samples`` samples."""
    return 1 + samples // hop


def _as_channels(wave: np.ndarray) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim == 1:
        wave = wave[None]
    if wave.ndim != 2:
        raise ValueError(f"wave must be (samples,) or (channels, samples), got {wave.shape}")
    return wave


def stft(wave: np.ndarray, frame_len: int = 512, hop: int = 128, sample_rate: int = 44100) -> Spectrogram:
    """Centered STFT (``frame_len // 2`` zeros on both sides) with a periodic Hann window."""
    wave = _as_channels(wave)
    window = hann(frame_len)
    check_cola(window, hop)
    length = wave.shape[1]
    T = n_frames(length, hop)
    pad = frame_len // 2
    total = (T - 1) * hop + frame_len
    padded = np.zeros((wave.shape[0], total))
    padded[:, pad:pad + length] = wave
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_len, axis=1)[:, ::hop][:, :T]
    return Spectrogram(np.fft.rfft(frames * window, axis=-1), frame_len, hop, sample_rate, length)


def istft(spec: Spectrogram) -> np.ndarray:
    """Weighted overlap-add inverse, normalized by the accumulated squared window."""
    window = hann(spec.frame_len)
    frames = np.fft.irfft(spec.data, n=spec.frame_len, axis=-1) * window
    C, T, _ = frames.shape
    total = (T - 1) * spec.hop + spec.frame_len
    out = np.zeros((C, total))
    norm = np.zeros(total)
    for t in range(T):
        sl = slice(t * spec.hop, t * spec.hop + spec.frame_len)
        out[:, sl] += frames[:, t]
        norm[sl] += window**2
    out /= np.where(norm > 1e-12, norm, 1.0)
    pad = spec.frame_len // 2
    return out[:, pad:pad + spec.length]


# --------------------------------------------------------------------------- MWF


def _hermitian(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def _wiener_gains(v: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Gains ``(J, T, F, C, C)`` whose sum over sources is the identity wherever any power is present."""
    J, C = v.shape[0], phi.shape[-1]
    eye = np.eye(C)
    R = v[..., None, None] * phi[:, None]  # (J, T, F, C, C)
    total = R.sum(axis=0)
    tr = np.real(np.trace(total, axis1=-2, axis2=-1))
    delta = 1e-10 * tr
    # the regularizer is shared out so that sum_j R_j' equals the inverted matrix exactly
    R = R + (delta / J)[..., None, None] * eye
    dead = tr <= 0
    inv = np.linalg.inv(np.where(dead[..., None, None], eye, total + delta[..., None, None] * eye))
    gains = R @ inv
    gains[:, dead] = eye / J
    return gains


def mwf(source_magnitudes: list[np.ndarray], mixture: Spectrogram) -> list[Spectrogram]:
    """Multichannel Wiener filter with one EM refinement of the spatial matrices.

    Source powers come from the magnitudes (averaged over channels); spatial
    covariance matrices start at the identity, are re-estimated once from the
    posterior statistics, and the final gains are applied to the mixture. The
    rounding residual of ``mixture - sum(estimates)`` is handed back in
    proportion to power, so the estimates sum to the mixture.
    """
    if not source_magnitudes:
        raise ValueError("mwf needs at least one source")
    mags = np.stack([np.asarray(m, dtype=np.float64) for m in source_magnitudes])
    if mags.shape[1:] != mixture.data.shape:
        raise ValueError(f"source magnitudes {mags.shape[1:]} do not match mixture {mixture.data.shape}")
    if np.any(mags < 0):
        raise ValueError("source magnitudes must be nonnegative")
    J, C = mags.shape[0], mags.shape[1]
    x = np.moveaxis(mixture.data, 0, -1)  # (T, F, C)
    v = np.mean(mags**2, axis=1)  # (J, T, F)
    phi = np.broadcast_to(np.eye(C, dtype=complex), (J, x.shape[1], C, C)).copy()

    # E step with identity spatial matrices, then M step for phi
    W = _wiener_gains(v, phi)
    s = np.einsum("jtfab,tfb->jtfa", W, x)
    R = v[..., None, None] * phi[:, None]
    post = s[..., :, None] * np.conj(s[..., None, :]) + R - W @ R
    weight = np.maximum(v.sum(axis=1), 1e-300)  # (J, F)
    phi_new = post.sum(axis=1) / weight[..., None, None]
    trace = np.real(np.trace(phi_new, axis1=-2, axis2=-1)) / C
    ok = trace > 1e-12
    phi = np.where(ok[..., None, None], phi_new / np.where(ok, trace, 1.0)[..., None, None], phi)
    phi = 0.5 * (phi + _hermitian(phi))

    W = _wiener_gains(v, phi)
    s = np.einsum("jtfab,tfb->jtfa", W, x)
    total_v = v.sum(axis=0)
    share = np.where(total_v > 0, v / np.where(total_v > 0, total_v, 1.0), 1.0 / J)
    s = s + share[..., None] * (x - s.sum(axis=0))
    return [mixture.with_data(np.moveaxis(s[j], -1, 0)) for j in range(J)]


def masked_estimates(source_magnitudes: list[np.ndarray], mixture: Spectrogram) -> list[Spectrogram]:
    """Magnitude estimates combined with the mixture phase."""
    phase = np.exp(1j * np.angle(mixture.data))
    return [mixture.with_data(np.asarray(m) * phase) for m in source_magnitudes]


# --------------------------------------------------------------------------- SDR


def sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Energy-ratio SDR in dB, capped at ``SDR_CAP_DB``."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"reference shape {s.shape} != estimate shape {e.shape}")
    num = float(np.sum(s**2))
    if num == 0:
        raise ValueError("reference signal is all zeros")
    den = float(np.sum((s - e) ** 2))
    if den == 0:
        return SDR_CAP_DB
    return min(10 * np.log10(num / den), SDR_CAP_DB)


# --------------------------------------------------------------------------- scenes


SOURCE_KINDS = ("tonal", "noise")


@dataclass
class SourceSpec:
    kind: str
    gain: float = 1.0
    pan: float = 0.0
    f0: float = 220.0
    harmonics: int = 4
    low_hz: float = 1500.0
    high_hz: float = 3000.0

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"source kind must be one of {SOURCE_KINDS}, got {self.kind!r}")
        if not 0 <= self.gain <= 1:
            raise ValueError(f"gain must be in [0, 1], got {self.gain}")
        if not -1 <= self.pan <= 1:
            raise ValueError(f"pan must be in [-1, 1], got {self.pan}")
        if self.f0 <= 0 or self.harmonics < 1 or not 0 <= self.low_hz < self.high_hz:
            raise ValueError("invalid tonal or band parameters")


@dataclass
class SceneSpec:
    sources: list[SourceSpec] = field(default_factory=lambda: [SourceSpec("tonal"), SourceSpec("noise")])
    duration: float = 1.0
    sample_rate: int = 8000
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ValueError("a scene needs at least one source")
        if self.duration <= 0 or self.sample_rate <= 0 or self.channels not in (1, 2):
            raise ValueError("invalid duration, sample rate or channel count")
        for s in self.sources:
            if s.kind == "tonal" and s.f0 * s.harmonics >= self.sample_rate / 2:
                raise ValueError(f"harmonics of {s.f0} Hz exceed the Nyquist frequency")
            if s.kind == "noise" and s.high_hz > self.sample_rate / 2:
                raise ValueError(f"noise band edge {s.high_hz} Hz exceeds the Nyquist frequency")

    @property
    def samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


_SCENE_KEYS = {"duration": float, "sample_rate": int, "channels": int, "seed": int}
_SOURCE_CASTS = {"kind": str, "gain": float, "pan": float, "f0": float, "harmonics": int,
                 "low_hz": float, "high_hz": float}


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse ``duration = 1.0`` / ``source.0.kind = tonal`` style lines."""
    scene: dict = {}
    sources: dict[int, dict] = {}
    for key, raw in parse_key_values(text).items():
        try:
            if key in _SCENE_KEYS:
                scene[key] = _SCENE_KEYS[key](raw)
                continue
            parts = key.split(".")
            if len(parts) == 3 and parts[0] == "source" and parts[1].isdigit() and parts[2] in _SOURCE_CASTS:
                sources.setdefault(int(parts[1]), {})[parts[2]] = _SOURCE_CASTS[parts[2]](raw)
                continue
        except ValueError as exc:
            raise ValueError(f"bad value for {key!r}: {raw!r}") from exc
        raise ValueError(f"unknown scene key {key!r}")
    if sources:
        if sorted(sources) != list(range(len(sources))):
            raise ValueError(f"source indices must be 0..{len(sources) - 1}, got {sorted(sources)}")
        for i, src in sources.items():
            if "kind" not in src:
                raise ValueError(f"source.{i}.kind is required")
        scene["sources"] = [SourceSpec(**sources[i]) for i in range(len(sources))]
    return SceneSpec(**scene)


def format_scene_spec(spec: SceneSpec) -> str:
    lines = [f"{k} = {getattr(spec, k)}" for k in _SCENE_KEYS]
    for i, src in enumerate(spec.sources):
        lines += [f"source.{i}.{k} = {getattr(src, k)}" for k in _SOURCE_CASTS]
    return "\n".join(lines) + "\n"


def _envelope(rng: np.random.Generator, n: int, sample_rate: int) -> np.ndarray:
    """Slow random amplitude envelope in [0.3, 1]."""
    knots = rng.uniform(0.3, 1.0, size=max(int(n / sample_rate * 8), 1) + 2)
    return np.interp(np.linspace(0, len(knots) - 1, n), np.arange(len(knots)), knots)


def _tonal(src: SourceSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    wave = np.zeros(n)
    for k in range(1, src.harmonics + 1):
        wave += np.sin(2 * np.pi * k * src.f0 * t + rng.uniform(0, 2 * np.pi)) / k
    return wave * _envelope(rng, n, sr)


def _band_noise(src: SourceSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sr)
    spec[(freqs < src.low_hz) | (freqs > src.high_hz)] = 0
    return np.fft.irfft(spec, n) * _envelope(rng, n, sr)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return ``(mixture, sources)``, each ``(channels, samples)``; the mixture is the exact sum."""
    rng = np.random.default_rng(spec.seed)
    n, sr = spec.samples, spec.sample_rate
    sources = []
    for src in spec.sources:
        mono = _tonal(src, n, sr, rng) if src.kind == "tonal" else _band_noise(src, n, sr, rng)
        peak = np.max(np.abs(mono))
        mono = mono / peak if peak > 0 else mono
        if spec.channels == 1:
            gains = np.array([src.gain])
        else:
            angle = (src.pan + 1) * np.pi / 4
            gains = src.gain * np.array([np.cos(angle), np.sin(angle)])
        sources.append(gains[:, None] * mono[None])
    mixture = np.zeros((spec.channels, n))
    for s in sources:
        mixture = mixture + s
    return mixture, sources


# --------------------------------------------------------------------------- WAV


class WavError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def write_wav(path: str | Path, wave: np.ndarray, sample_rate: int, fmt: str = "float32") -> None:
    """Write a RIFF/WAVE file as 16-bit PCM (``fmt="pcm16"``) or 32-bit float."""
    wave = _as_channels(wave)
    channels = wave.shape[0]
    interleaved = wave.T
    if fmt == "float32":
        code, width = _FLOAT, 4
        payload = interleaved.astype("<f4").tobytes()
    elif fmt == "pcm16":
        code, width = _PCM, 2
        q = np.round(np.clip(interleaved, -1.0, 32767 / 32768) * 32768)
        payload = q.astype("<i2").tobytes()
    else:
        raise ValueError(f"fmt must be 'float32' or 'pcm16', got {fmt!r}")
    fmt_chunk = struct.pack("<HHIIHH", code, channels, sample_rate, sample_rate * channels * width,
                            channels * width, 8 * width)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt_chunk)) + fmt_chunk
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\0"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(wave, sample_rate)`` with ``wave`` shaped ``(channels, samples)``."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavError("file too short for a RIFF header", len(raw))
    if raw[:4] != b"RIFF":
        raise WavError("missing RIFF tag", 0)
    if raw[8:12] != b"WAVE":
        raise WavError("missing WAVE tag", 8)
    pos, fmt, data = 12, None, None
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise WavError("truncated chunk header", pos)
        tag, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        start = pos + 8
        if start + size > len(raw):
            raise WavError(f"chunk {tag!r} declares {size} bytes but only {len(raw) - start} remain", start)
        if tag == b"fmt ":
            if size < 16:
                raise WavError("fmt chunk shorter than 16 bytes", start)
            fmt = struct.unpack("<HHIIHH", raw[start:start + 16])
            if fmt[0] == _EXTENSIBLE:
                if size < 26:
                    raise WavError("extensible fmt chunk without subformat", start)
                fmt = (struct.unpack("<H", raw[start + 24:start + 26])[0],) + fmt[1:]
            fmt_pos = start
        elif tag == b"data":
            data = (start, size)
        pos = start + size + (size % 2)
    if fmt is None:
        raise WavError("no fmt chunk", len(raw))
    if data is None:
        raise WavError("no data chunk", len(raw))
    code, channels, sample_rate, _, align, bits = fmt
    if (code, bits) == (_PCM, 16):
        dtype, scale = "<i2", 1 / 32768
    elif (code, bits) == (_FLOAT, 32):
        dtype, scale = "<f4", 1.0
    else:
        raise WavError(f"unsupported encoding (format {code}, {bits} bits)", fmt_pos)
    if channels < 1 or align != channels * bits // 8:
        raise WavError("inconsistent channel count or block alignment", fmt_pos)
    start, size = data
    if size % align:
        raise WavError(f"data size {size} is not a multiple of the frame size {align}", start - 4)
    samples = np.frombuffer(raw, dtype=dtype, count=size // (bits // 8), offset=start)
    return samples.reshape(-1, channels).T.astype(np.float64) * scale, sample_rate
