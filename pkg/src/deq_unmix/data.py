"""Synthetic tonal-vs-noise scenes turned into training magnitudes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import SceneSpec, SourceSpec, Spectrogram, generate_scene, istft, stft
from .separator import MagnitudeSet, ModelSpec

TOY_SOURCES = ("tonal", "noise")


def random_scene_spec(rng: np.random.Generator, duration: float, sample_rate: int, channels: int) -> SceneSpec:
    """A harmonic tone below roughly 1.3 kHz against a noise band that may overlap its top harmonic."""
    low = rng.uniform(1000.0, 2000.0)
    high = min(low + rng.uniform(800.0, 1600.0), 0.49 * sample_rate)
    pans = rng.uniform(-0.8, 0.8, size=2)
    tonal = SourceSpec("tonal", gain=rng.uniform(0.5, 1.0), pan=pans[0], f0=rng.uniform(120.0, 330.0), harmonics=4)
    noise = SourceSpec("noise", gain=rng.uniform(0.5, 1.0), pan=pans[1], low_hz=low, high_hz=high)
    return SceneSpec([tonal, noise], duration, sample_rate, channels, int(rng.integers(2**31)))


@dataclass
class SceneSet:
    """Waves and spectrograms of generated scenes, sources ordered as ``TOY_SOURCES``."""

    specs: list[SceneSpec]
    mixtures: list[np.ndarray]
    sources: list[list[np.ndarray]]
    mixture_stfts: list[Spectrogram]
    source_stfts: list[list[Spectrogram]]

    def __len__(self) -> int:
        return len(self.specs)

    def magnitudes(self, target: str) -> MagnitudeSet:
        j = TOY_SOURCES.index(target)
        mix = np.stack([s.magnitude for s in self.mixture_stfts])
        tgt = np.stack([s[j].magnitude for s in self.source_stfts])
        return MagnitudeSet(mix, tgt)

    def oracle_mask_sdr(self, target: str) -> list[float]:
        """SDR of the ideal ratio mask ``|S_j| / sum_k |S_k|`` applied to the mixture."""
        from .dsp import sdr

        j = TOY_SOURCES.index(target)
        out = []
        for mix, src, ref in zip(self.mixture_stfts, self.source_stfts, self.sources):
            den = sum(s.magnitude for s in src)
            mask = np.divide(src[j].magnitude, den, out=np.zeros_like(den), where=den > 0)
            out.append(sdr(ref[j], istft(mix.with_data(mask * mix.data))))
        return out


def make_scene_set(n: int, spec: ModelSpec, duration: float, seed: int) -> SceneSet:
    rng = np.random.default_rng(seed)
    specs = [random_scene_spec(rng, duration, spec.sample_rate, spec.channels) for _ in range(n)]
    mixtures, sources, mix_stfts, src_stfts = [], [], [], []
    for s in specs:
        mix, srcs = generate_scene(s)
        mixtures.append(mix)
        sources.append(srcs)
        mix_stfts.append(stft(mix, spec.frame_len, spec.hop, spec.sample_rate))
        src_stfts.append([stft(x, spec.frame_len, spec.hop, spec.sample_rate) for x in srcs])
    return SceneSet(specs, mixtures, sources, mix_stfts, src_stfts)
