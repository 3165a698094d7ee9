"""Deterministic synthetic speech corpus for desk-scale experiments.

Each character of the transcript is rendered as a stationary harmonic tone
shaped by a two-formant envelope; spaces are pauses. A speaker fixes the
fundamental and scales the formants. Everything derives from one seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import ManifestEntry, SpeechSample, Waveform, save_wav, write_manifest

LETTERS = "aeioumnlrw"
# (F1, F2) in Hz per letter
FORMANTS = {
    "a": (750, 1200), "e": (450, 1900), "i": (300, 2300), "o": (500, 900), "u": (330, 800),
    "m": (280, 1100), "n": (300, 1600), "l": (380, 1300), "r": (480, 1400), "w": (320, 700),
}


@dataclass(frozen=True)
class ToySpeaker:
    speaker_id: str
    f0_multiple: int      # fundamental = multiple * sample_rate / 256
    formant_scale: float


DEFAULT_SPEAKERS = (
    ToySpeaker("spk_a", 2, 1.0),
    ToySpeaker("spk_b", 3, 1.12),
)


def random_text(rng: np.random.Generator, n_chars: int = 8) -> str:
    first = int(rng.integers(3, n_chars - 3))
    words = ["".join(rng.choice(list(LETTERS), size=n)) for n in (first, n_chars - 1 - first)]
    return " ".join(words)


def render(text: str, speaker: ToySpeaker, sample_rate: int = 22050, char_samples: int = 1024,
           rng: Optional[np.random.Generator] = None, noise_floor: float = 0.01, rms: float = 0.2) -> Waveform:
    rng = np.random.default_rng(0) if rng is None else rng
    f0 = speaker.f0_multiple * sample_rate / 256
    n = len(text) * char_samples
    t = np.arange(char_samples) / sample_rate
    fade = min(64, char_samples // 4)
    env = np.ones(char_samples)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    env[:fade], env[-fade:] = ramp, ramp[::-1]
    out = np.zeros(n)
    n_harm = int(min(5000, sample_rate / 2 - 100) // f0)
    harm = np.arange(1, n_harm + 1)
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    for i, ch in enumerate(text):
        if ch not in FORMANTS:
            continue
        f1, f2 = (f * speaker.formant_scale for f in FORMANTS[ch])
        freqs = harm * f0
        amp = (np.exp(-0.5 * ((freqs - f1) / 120.0) ** 2) + 0.6 * np.exp(-0.5 * ((freqs - f2) / 180.0) ** 2)
               + 0.03) / np.sqrt(harm)
        tt = t + i * char_samples / sample_rate
        seg = (amp[:, None] * np.sin(2 * np.pi * freqs[:, None] * tt[None, :] + phases[:, None])).sum(0)
        out[i * char_samples:(i + 1) * char_samples] = seg * env
    voiced = np.sqrt(np.mean(out ** 2))
    if voiced > 0:
        out *= rms / voiced
    out += rng.normal(0.0, noise_floor, size=n)
    return Waveform.clipped(out, sample_rate)


def toy_corpus(n: int = 32, seed: int = 0, sample_rate: int = 22050, speakers=DEFAULT_SPEAKERS,
               n_chars: int = 8, char_samples: int = 1024, prefix: str = "utt") -> list[SpeechSample]:
    """``n`` utterances spread round-robin over ``speakers``."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        spk = speakers[i % len(speakers)]
        text = random_text(rng, n_chars)
        w = render(text, spk, sample_rate, char_samples, rng)
        samples.append(SpeechSample(w, text, spk.speaker_id, f"{prefix}{i:04d}"))
    return samples


def write_corpus(samples: list[SpeechSample], out_dir, name: str = "manifest.jsonl") -> Path:
    out_dir = Path(out_dir)
    entries = []
    for s in samples:
        rel = f"wavs/{s.id}.wav"
        save_wav(out_dir / rel, s.audio)
        entries.append(ManifestEntry(rel, s.text, s.speaker_id, s.id))
    path = out_dir / name
    write_manifest(path, entries)
    return path
