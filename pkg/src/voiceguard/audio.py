"""Audio I/O, spectral features, manifests and patch cropping."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 22050
LOG_MEL_FLOOR = 1e-5


class AudioError(ValueError):
    """Raised for unreadable or invalid audio."""


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if x.size < 1:
            raise AudioError("waveform must contain at least one sample")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            raise AudioError("waveform contains non-finite samples")
        if np.max(np.abs(x)) > 1.0:
            raise AudioError("waveform samples must lie in [-1, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def clipped(cls, samples, sample_rate=DEFAULT_SAMPLE_RATE) -> "Waveform":
        return cls(np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0), sample_rate)


@dataclass(frozen=True)
class SpecConfig:
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: Optional[float] = None  # None -> sample_rate / 2
    window: str = "hann"
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"need 0 < hop <= n_fft, got hop={self.hop} n_fft={self.n_fft}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0 <= self.fmin < self.f_max <= self.sample_rate / 2:
            raise ValueError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.f_max}, sr={self.sample_rate}"
            )

    @property
    def f_max(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        if length < self.n_fft:
            raise AudioError(f"waveform of {length} samples is shorter than one window ({self.n_fft})")
        return 1 + (length - self.n_fft) // self.hop


@dataclass(frozen=True)
class SpeechSample:
    audio: Waveform
    text: str
    speaker_id: str
    id: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"sample {self.id!r}: transcript is empty")
        if not self.speaker_id:
            raise ValueError(f"sample {self.id!r}: speaker_id is empty")


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    text: str
    speaker_id: str
    id: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path
    sample_rate: Optional[int] = None  # resample target declared by the manifest
    path: Optional[Path] = field(default=None, compare=False)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.audio_path).resolve()


# ---------------------------------------------------------------- WAV I/O


def load_wav(path: Union[str, Path]) -> Waveform:
    """Read a PCM16 or float32 WAV file, downmixing to mono.

    Integer PCM is scaled by 1/32768; float data outside [-1, 1] is clipped.
    """
    path = Path(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: no such file") from None
    except (ValueError, OSError) as exc:
        raise AudioError(f"{path}: unreadable WAV ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported encoding {data.dtype}; expected PCM16 or float32")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"{path}: zero-length audio")
    if np.max(np.abs(x)) > 1.0:
        logger.warning("%s: clipping float samples outside [-1, 1]", path)
        x = np.clip(x, -1.0, 1.0)
    return Waveform(x, int(rate))


def wav_subtype(path: Union[str, Path]) -> str:
    """Return "pcm16" or "float32" for an existing WAV file."""
    _, data = scipy.io.wavfile.read(path, mmap=True)
    return "float32" if data.dtype == np.float32 else "pcm16"


def save_wav(path: Union[str, Path], w: Waveform, subtype: str = "pcm16") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if subtype == "pcm16":
        # inverse of the 1/32768 load scaling so PCM16 round trips are exact
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif subtype == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    scipy.io.wavfile.write(path, w.sample_rate, data)


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate).limit_denominator(1000)
    y = scipy.signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    return Waveform.clipped(y, target_rate)


# ---------------------------------------------------------------- features


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = x.samples
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.array(x))
    if dtype is not None:
        x = x.to(dtype)
    return x


def stft_magnitude(x: torch.Tensor, cfg: SpecConfig) -> torch.Tensor:
    """Differentiable no-padding STFT magnitude.

    ``x`` has shape ``(..., length)``; the result is ``(..., frames, n_fft // 2 + 1)``.
    """
    cfg.n_frames(x.shape[-1])
    frames = x.unfold(-1, cfg.n_fft, cfg.hop)
    window = torch.hann_window(cfg.n_fft, periodic=True, dtype=x.dtype, device=x.device)
    spec = torch.fft.rfft(frames * window, dim=-1)
    return spec.abs()


@lru_cache(maxsize=32)
def _mel_filterbank_np(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters with unit-area (slaney-style) normalization, shape (n_mels, n_bins)."""
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb *= (2.0 / (hi - lo))
    return fb


def filterbank_for(cfg: SpecConfig) -> np.ndarray:
    return _mel_filterbank_np(cfg.sample_rate, cfg.n_fft, cfg.n_mels, float(cfg.fmin), cfg.f_max)


def log_mel(x: torch.Tensor, cfg: SpecConfig) -> torch.Tensor:
    """Differentiable log-mel spectrogram, ``(..., frames, n_mels)``."""
    mag = stft_magnitude(x, cfg)
    fb = torch.from_numpy(filterbank_for(cfg)).to(mag.dtype)
    return torch.log(torch.clamp(mag @ fb.T, min=LOG_MEL_FLOOR))


def stft_linear(w: Waveform, cfg: SpecConfig) -> np.ndarray:
    with torch.no_grad():
        return stft_magnitude(_as_tensor(w, torch.float64), cfg).numpy()


def mel_spectrogram(w: Waveform, cfg: SpecConfig) -> np.ndarray:
    with torch.no_grad():
        return log_mel(_as_tensor(w, torch.float64), cfg).numpy()


# ---------------------------------------------------------------- manifests


def load_manifest(path: Union[str, Path], check_files: bool = True) -> Manifest:
    """Parse a JSON-lines manifest.

    Each line holds ``audio_path``, ``text`` and ``speaker_id`` (``id`` optional,
    defaulting to the audio file stem). A line of the form ``{"sample_rate": N}``
    declares a resampling target for every entry.
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    rate = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: record must be an object")
            if set(rec) == {"sample_rate"}:
                rate = int(rec["sample_rate"])
                continue
            for key in ("audio_path", "text", "speaker_id"):
                if key not in rec or not str(rec[key]).strip():
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            sid = str(rec.get("id") or Path(rec["audio_path"]).stem)
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            entry = ManifestEntry(str(rec["audio_path"]), str(rec["text"]), str(rec["speaker_id"]), sid)
            if check_files and not (root / entry.audio_path).is_file():
                raise ManifestError(f"{path}:{lineno}: audio file not found: {entry.audio_path}")
            entries.append(entry)
    return Manifest(entries, root, rate, path)


def write_manifest(path: Union[str, Path], entries: list[ManifestEntry], sample_rate: Optional[int] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if sample_rate is not None:
            fh.write(json.dumps({"sample_rate": sample_rate}) + "\n")
        for e in entries:
            rec = {"id": e.id, "audio_path": e.audio_path, "text": e.text, "speaker_id": e.speaker_id}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_sample(manifest: Manifest, entry: ManifestEntry) -> SpeechSample:
    w = load_wav(manifest.resolve(entry))
    if manifest.sample_rate is not None:
        w = resample(w, manifest.sample_rate)
    return SpeechSample(w, entry.text, entry.speaker_id, entry.id)


def iterate_dataset(manifest: Manifest) -> Iterator[SpeechSample]:
    for entry in manifest.entries:
        yield load_sample(manifest, entry)


# ---------------------------------------------------------------- patches


def crop_patch(w: Waveform, position: int, length: int) -> tuple[Waveform, int]:
    """Samples ``[position, position + length)``, zero-padded past the end.

    Returns the patch and the number of padded samples.
    """
    if position < 0:
        raise ValueError(f"position must be >= 0, got {position}")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if position >= len(w):
        raise ValueError(f"position {position} is beyond the waveform end ({len(w)} samples)")
    chunk = w.samples[position:position + length]
    pad = length - chunk.shape[0]
    if pad:
        chunk = np.concatenate([chunk, np.zeros(pad)])
    return Waveform(chunk, w.sample_rate), pad


def apply_patch(w: Waveform, patch: Waveform, position: int) -> Waveform:
    """Overwrite ``w`` at ``position`` with ``patch``; samples past the end are dropped."""
    out = w.samples.copy()
    n = min(len(patch), len(w) - position)
    out[position:position + n] = patch.samples[:n]
    return Waveform(out, w.sample_rate)

