"""Adaptive-attacker transforms applied to protected audio before training.

Every stochastic transform draws from a generator seeded by the spec seed, so a
pipeline is reproducible per sample. Lengths are preserved except by
``mel_inversion`` rounding (trimmed back here) and external codecs.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import shutil
import subprocess
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import scipy.signal
from scipy.ndimage import uniform_filter

from .audio import (Manifest, ManifestEntry, Waveform, load_manifest, load_sample, load_wav, mel_filterbank,
                    resample, save_wav, wav_subtype, write_manifest)

logger = logging.getLogger(__name__)

# kind -> default params
KINDS: dict[str, dict] = {
    "resample_roundtrip": {"rates": [8000, 10000, 12000]},
    "mel_inversion": {"iterations": 32, "n_fft": 1024, "hop": 256, "n_mels": 80},
    "quantize_8bit": {},
    "speed_adjust": {"factors": [0.8, 0.9, 1.0, 1.1, 1.2]},
    "gaussian_noise": {"std": 0.01},
    "time_mask": {"min_fraction": 0.10, "max_fraction": 0.15},
    "pitch_shift": {"max_semitones": 4.0, "probability": 0.5},
    "codec_compress": {"command": None},
    "hybrid": {"std": 0.01, "command": None},
    "spec_freq_mask": {"max_fraction": 0.15, "n_fft": 1024, "hop": 256},
    "band_pass": {"low_hz": 100.0, "high_hz": 6000.0, "order": 4},
    "high_pass": {"cutoff_hz": 100.0, "order": 4},
    "low_pass": {"cutoff_hz": 6000.0, "order": 4},
    "spectral_gate": {"n_fft": 1024, "hop": 256, "quiet_fraction": 0.10, "n_std": 1.5, "floor_db": -30.0,
                      "smooth_frames": 3, "smooth_bins": 3},
}
LENGTH_PRESERVING = frozenset(KINDS) - {"codec_compress", "hybrid"}


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TransformError(f"unknown transform {self.kind!r}; choose from {sorted(KINDS)}")
        unknown = set(self.params) - set(KINDS[self.kind])
        if unknown:
            raise TransformError(f"{self.kind}: unknown params {sorted(unknown)}")
        merged = {**KINDS[self.kind], **self.params}
        _validate(self.kind, merged)
        object.__setattr__(self, "params", merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        unknown = set(d) - {"kind", "params", "seed"}
        if unknown:
            raise TransformError(f"unknown keys {sorted(unknown)}")
        if "kind" not in d:
            raise TransformError("transform record needs a 'kind'")
        return cls(d["kind"], dict(d.get("params") or {}), int(d.get("seed", 0)))


def _validate(kind: str, p: dict):
    def positive(*names):
        for n in names:
            if not (isinstance(p[n], (int, float)) and p[n] > 0):
                raise TransformError(f"{kind}: {n} must be positive, got {p[n]!r}")

    if kind == "resample_roundtrip":
        if not p["rates"] or any(r <= 0 for r in p["rates"]):
            raise TransformError(f"{kind}: rates must be positive")
    elif kind == "speed_adjust":
        if not p["factors"] or any(f <= 0 for f in p["factors"]):
            raise TransformError(f"{kind}: factors must be positive")
    elif kind in ("gaussian_noise", "hybrid"):
        if p["std"] < 0:
            raise TransformError(f"{kind}: std must be >= 0")
    elif kind == "time_mask":
        if not 0 <= p["min_fraction"] <= p["max_fraction"] <= 1:
            raise TransformError(f"{kind}: need 0 <= min_fraction <= max_fraction <= 1")
    elif kind == "pitch_shift":
        if p["max_semitones"] < 0 or not 0 <= p["probability"] <= 1:
            raise TransformError(f"{kind}: invalid max_semitones or probability")
    elif kind == "band_pass":
        positive("low_hz", "high_hz", "order")
        if p["low_hz"] >= p["high_hz"]:
            raise TransformError(f"{kind}: low_hz must be below high_hz")
    elif kind in ("high_pass", "low_pass"):
        positive("cutoff_hz", "order")
    elif kind == "mel_inversion":
        positive("iterations", "n_fft", "hop", "n_mels")
    elif kind == "spec_freq_mask":
        positive("n_fft", "hop")
        if not 0 < p["max_fraction"] <= 1:
            raise TransformError(f"{kind}: max_fraction must lie in (0, 1]")
    elif kind == "spectral_gate":
        positive("n_fft", "hop", "smooth_frames", "smooth_bins")
        if not 0 < p["quiet_fraction"] <= 1 or p["floor_db"] > 0:
            raise TransformError(f"{kind}: invalid quiet_fraction or floor_db")
    if kind in ("codec_compress", "hybrid") and p["command"] is not None:
        cmd = p["command"]
        if "{in}" not in cmd or "{out}" not in cmd:
            raise TransformError(f"{kind}: command must contain {{in}} and {{out}}")


# ---------------------------------------------------------------- helpers


def _fit_length(y: np.ndarray, n: int) -> np.ndarray:
    if len(y) >= n:
        return y[:n]
    return np.pad(y, (0, n - len(y)))


def _stft(x, n_fft, hop):
    return scipy.signal.stft(x, nperseg=n_fft, noverlap=n_fft - hop, window="hann", boundary="zeros", padded=True)[2]


def _istft(z, n_fft, hop, n):
    y = scipy.signal.istft(z, nperseg=n_fft, noverlap=n_fft - hop, window="hann", boundary=True)[1]
    return _fit_length(y, n)


def _butter(w: Waveform, btype: str, cutoff, order: int) -> Waveform:
    nyq = w.sample_rate / 2
    edges = np.atleast_1d(cutoff).astype(float)
    if np.any(edges >= nyq):
        raise TransformError(f"cutoff {cutoff} Hz is at or above Nyquist ({nyq} Hz)")
    wn = edges if edges.size > 1 else float(edges[0])
    sos = scipy.signal.butter(order, wn, btype=btype, fs=w.sample_rate, output="sos")
    return Waveform.clipped(scipy.signal.sosfiltfilt(sos, w.samples), w.sample_rate)


def time_stretch(x: np.ndarray, rate: float, n_fft: int = 1024, hop: int = 256) -> np.ndarray:
    """Phase-vocoder stretch; ``rate > 1`` shortens. Output length ``round(len / rate)``."""
    n_out = max(1, int(round(len(x) / rate)))
    if rate == 1.0:
        return x.copy()
    z = _stft(x, n_fft, hop)
    n_frames = z.shape[1]
    steps = np.arange(0, n_frames - 1, rate)
    omega = 2 * np.pi * hop * np.arange(z.shape[0]) / n_fft
    phase = np.angle(z[:, 0])
    out = np.empty((z.shape[0], len(steps)), dtype=complex)
    for i, t in enumerate(steps):
        k = int(t)
        frac = t - k
        mag = (1 - frac) * np.abs(z[:, k]) + frac * np.abs(z[:, k + 1])
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(z[:, k + 1]) - np.angle(z[:, k]) - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + omega + dphi
    y = scipy.signal.istft(out, nperseg=n_fft, noverlap=n_fft - hop, window="hann", boundary=True)[1]
    return _fit_length(y, n_out)


def _resample_to(x: np.ndarray, n: int) -> np.ndarray:
    return scipy.signal.resample(x, n) if len(x) != n else x


# ---------------------------------------------------------------- transforms


def _resample_roundtrip(w, p, rng):
    rate = int(rng.choice(p["rates"]))
    down = resample(w, rate)
    back = resample(down, w.sample_rate)
    return Waveform.clipped(_fit_length(back.samples, len(w)), w.sample_rate)


def _mel_inversion(w, p, rng):
    n_fft, hop = int(p["n_fft"]), int(p["hop"])
    fb = mel_filterbank(w.sample_rate, n_fft, int(p["n_mels"]), 0.0, w.sample_rate / 2)
    mel = fb @ np.abs(_stft(w.samples, n_fft, hop))
    mag = np.maximum(np.linalg.pinv(fb) @ mel, 0.0)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    y = _istft(mag * angles, n_fft, hop, len(w))
    for _ in range(int(p["iterations"])):
        z = _stft(y, n_fft, hop)
        y = _istft(mag * np.exp(1j * np.angle(z)), n_fft, hop, len(w))
    return Waveform.clipped(y, w.sample_rate)


def _quantize(w, p, rng):
    q = np.round(w.samples * 127.5 + 127.5)
    return Waveform.clipped((q - 127.5) / 127.5, w.sample_rate)


def _speed(w, p, rng):
    f = float(rng.choice(p["factors"]))
    if f == 1.0:
        return w
    fast = time_stretch(w.samples, f)
    back = time_stretch(fast, 1.0 / f)
    return Waveform.clipped(_fit_length(back, len(w)), w.sample_rate)


def _noise(w, p, rng):
    return Waveform.clipped(w.samples + rng.normal(0.0, p["std"], len(w)), w.sample_rate)


def _time_mask(w, p, rng):
    n = len(w)
    lo, hi = math.ceil(p["min_fraction"] * n), math.floor(p["max_fraction"] * n)
    span = int(rng.integers(lo, max(lo, hi) + 1))
    start = int(rng.integers(0, n - span + 1))
    y = w.samples.copy()
    y[start:start + span] = 0.0
    return Waveform(y, w.sample_rate)


def _pitch(w, p, rng):
    apply = rng.random() < p["probability"]
    semis = rng.uniform(-p["max_semitones"], p["max_semitones"])
    if not apply or semis == 0:
        return w
    ratio = 2.0 ** (semis / 12.0)
    stretched = time_stretch(w.samples, 1.0 / ratio)
    return Waveform.clipped(_resample_to(stretched, len(w)), w.sample_rate)


def _codec(w, p, rng):
    if not p["command"]:
        raise TransformError("codec_compress needs an encoder command with {in} and {out}")
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "in.wav", Path(tmp) / "out.wav"
        save_wav(src, w)
        args = [a.replace("{in}", str(src)).replace("{out}", str(dst)) for a in shlex.split(p["command"])]
        proc = subprocess.run(args, capture_output=True, text=True)
        if proc.returncode != 0:
            raise TransformError(f"codec command failed ({proc.returncode}): {proc.stderr.strip()[:200]}")
        out = load_wav(dst)
    return resample(out, w.sample_rate)


def _hybrid(w, p, rng):
    w = _speed(w, KINDS["speed_adjust"], rng)
    w = _noise(w, {"std": p["std"]}, rng)
    w = _time_mask(w, KINDS["time_mask"], rng)
    w = _pitch(w, KINDS["pitch_shift"], rng)
    if p["command"]:
        w = _codec(w, {"command": p["command"]}, rng)
    return w


def _freq_mask(w, p, rng):
    n_fft, hop = int(p["n_fft"]), int(p["hop"])
    z = _stft(w.samples, n_fft, hop)
    n_bins = z.shape[0]
    width = int(rng.integers(1, max(1, int(p["max_fraction"] * n_bins)) + 1))
    start = int(rng.integers(0, n_bins - width + 1))
    z[start:start + width] = 0
    return Waveform.clipped(_istft(z, n_fft, hop, len(w)), w.sample_rate)


def spectral_gate(w: Waveform, n_fft: int = 1024, hop: int = 256, quiet_fraction: float = 0.10, n_std: float = 1.5,
                  floor_db: float = -30.0, smooth_frames: int = 3, smooth_bins: int = 3) -> Waveform:
    """Attenuate time-frequency bins below a per-band noise threshold.

    The threshold of each band is mean + ``n_std`` std of its dB magnitude over
    the quietest ``quiet_fraction`` of frames; gated bins are scaled to
    ``floor_db``. The mask is box-smoothed over ``smooth_bins`` x ``smooth_frames``,
    which suppresses isolated noise bins that cross the threshold.
    """
    z = _stft(w.samples, n_fft, hop)
    mag_db = 20 * np.log10(np.abs(z) + 1e-10)
    energy = np.sum(np.abs(z) ** 2, axis=0)
    n_quiet = max(1, int(round(quiet_fraction * z.shape[1])))
    quiet = np.argsort(energy, kind="stable")[:n_quiet]
    ref = mag_db[:, quiet]
    thresh = ref.mean(1) + n_std * ref.std(1)
    floor = 10 ** (floor_db / 20)
    mask = np.where(mag_db > thresh[:, None], 1.0, floor)
    mask = uniform_filter(mask, size=(int(smooth_bins), int(smooth_frames)), mode="nearest")
    return Waveform.clipped(_istft(z * mask, n_fft, hop, len(w)), w.sample_rate)


_IMPL = {
    "resample_roundtrip": _resample_roundtrip,
    "mel_inversion": _mel_inversion,
    "quantize_8bit": _quantize,
    "speed_adjust": _speed,
    "gaussian_noise": _noise,
    "time_mask": _time_mask,
    "pitch_shift": _pitch,
    "codec_compress": _codec,
    "hybrid": _hybrid,
    "spec_freq_mask": _freq_mask,
    "band_pass": lambda w, p, rng: _butter(w, "bandpass", [p["low_hz"], p["high_hz"]], int(p["order"])),
    "high_pass": lambda w, p, rng: _butter(w, "highpass", p["cutoff_hz"], int(p["order"])),
    "low_pass": lambda w, p, rng: _butter(w, "lowpass", p["cutoff_hz"], int(p["order"])),
    "spectral_gate": lambda w, p, rng: spectral_gate(w, int(p["n_fft"]), int(p["hop"]), p["quiet_fraction"],
                                                     p["n_std"], p["floor_db"], int(p["smooth_frames"]),
                                                     int(p["smooth_bins"])),
}


def apply_transform(w: Waveform, t: TransformSpec, rng: Optional[np.random.Generator] = None) -> Waveform:
    rng = np.random.default_rng(t.seed) if rng is None else rng
    return _IMPL[t.kind](w, t.params, rng)


def sample_seed(seed: int, sample_id: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8")), index])


def apply_specs(w: Waveform, specs: Sequence[TransformSpec], sample_id: str, seed: int = 0) -> Waveform:
    """Apply ``specs`` in order with generators derived from (seed, spec seed, sample id, position)."""
    for i, t in enumerate(specs):
        w = apply_transform(w, t, sample_seed(seed + t.seed, sample_id, i))
    return w


def load_pipeline(path: Union[str, Path]) -> list[TransformSpec]:
    """One JSON transform record per line; blank lines and ``#`` comments are skipped."""
    specs = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            specs.append(TransformSpec.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TransformError, TypeError, ValueError) as exc:
            raise TransformError(f"{path}:{n}: {exc}") from exc
    return specs


def apply_pipeline(manifest_in: Union[Manifest, str, Path], specs: Sequence[TransformSpec], out_dir: Union[str, Path],
                   seed: int = 0, workers: int = 1) -> dict:
    """Transform every sample, write WAVs and a mirrored manifest under ``out_dir``.

    Returns a summary with per-sample length changes and failures. Failed
    samples are logged and left out of the output manifest.
    """
    manifest = manifest_in if isinstance(manifest_in, Manifest) else load_manifest(manifest_in)
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)

    def one(entry: ManifestEntry):
        rel = f"wavs/{entry.id}.wav"
        src = manifest.resolve(entry)
        try:
            if not specs:
                shutil.copyfile(src, out_dir / rel)
                return entry, rel, 0, None
            sample = load_sample(manifest, entry)
            y = apply_specs(sample.audio, specs, entry.id, seed)
            save_wav(out_dir / rel, y, wav_subtype(src))
            return entry, rel, len(y) - len(sample.audio), None
        except Exception as exc:  # reported per sample
            logger.error("sample %s failed: %s", entry.id, exc)
            return entry, rel, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, manifest.entries))
    entries, failures, deltas = [], [], {}
    for entry, rel, delta, err in results:
        if err is not None:
            failures.append({"id": entry.id, "error": err})
            continue
        entries.append(ManifestEntry(rel, entry.text, entry.speaker_id, entry.id))
        if delta:
            deltas[entry.id] = delta
    write_manifest(out_dir / "manifest.jsonl", entries, manifest.sample_rate)
    return {"transforms": [t.to_dict() for t in specs], "seed": seed, "n_samples": len(manifest.entries),
            "n_written": len(entries), "length_deltas": deltas, "failures": failures}
