"""Objective evaluation: MCD with DTW, WER, SNR and MSE similarity."""

from __future__ import annotations

import logging
import math
import shlex
import statistics
import string
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
from scipy.fft import dct

from .audio import Manifest, SpecConfig, Waveform, load_sample, mel_spectrogram, save_wav

logger = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
MSE_DYNAMIC_RANGE = 4.0  # largest mean-square difference between two [-1, 1] signals
_PUNCT = str.maketrans("", "", string.punctuation)


class MetricError(ValueError):
    pass


def mfcc(w: Waveform, n_coeffs: int = 13, cfg: Optional[SpecConfig] = None) -> np.ndarray:
    """DCT-II (orthonormal) of log-mel frames, ``(frames, n_coeffs)``; column 0 is energy."""
    cfg = cfg or SpecConfig(sample_rate=w.sample_rate)
    if len(w) < cfg.n_fft:
        raise MetricError(f"input of {len(w)} samples is shorter than n_fft={cfg.n_fft}")
    return mfcc_from_logmel(mel_spectrogram(w, cfg), n_coeffs)


def mfcc_from_logmel(logmel: np.ndarray, n_coeffs: int = 13) -> np.ndarray:
    return dct(logmel, type=2, axis=-1, norm="ortho")[..., :n_coeffs]


def frame_distances(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Pairwise MCD frame distance in dB, excluding coefficient 0."""
    diff = ref[:, None, 1:] - cand[None, :, 1:]
    return MCD_CONST * np.sqrt((diff ** 2).sum(-1))


def dtw_path_mean(cost: np.ndarray) -> float:
    """Boundary-to-boundary DTW with steps (1,0), (0,1), (1,1).

    Minimizes total cost, preferring the shorter path on ties, and returns
    total cost divided by path length.
    """
    n, m = cost.shape
    total = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    total[0, 0], length[0, 0] = cost[0, 0], 1
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = None
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                cand = (total[pi, pj], length[pi, pj])
                if best is None or cand < best:
                    best = cand
            total[i, j] = best[0] + cost[i, j]
            length[i, j] = best[1] + 1
    return float(total[-1, -1] / length[-1, -1])


def dtw_reference_length(cost: np.ndarray) -> float:
    """Same alignment as :func:`dtw_path_mean`, normalized by the reference frame count."""
    n, m = cost.shape
    total = np.full((n + 1, m + 1), np.inf)
    total[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            total[i, j] = cost[i - 1, j - 1] + min(total[i - 1, j - 1], total[i - 1, j], total[i, j - 1])
    return float(total[n, m] / n)


def mcd_dtw(reference: Waveform, candidate: Waveform, n_coeffs: int = 13, cfg: Optional[SpecConfig] = None,
            normalization: str = "path") -> float:
    if reference.sample_rate != candidate.sample_rate:
        raise MetricError("reference and candidate sample rates differ")
    cfg = cfg or SpecConfig(sample_rate=reference.sample_rate)
    cost = frame_distances(mfcc(reference, n_coeffs, cfg), mfcc(candidate, n_coeffs, cfg))
    if normalization == "path":
        return dtw_path_mean(cost)
    if normalization == "reference":
        return dtw_reference_length(cost)
    raise ValueError(f"unknown normalization {normalization!r}")


def normalize_words(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def edit_distance(ref: list, hyp: list) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference_text: str, hypothesis_text: str) -> float:
    """Word error rate in percent; may exceed 100."""
    ref = normalize_words(reference_text)
    if not ref:
        raise MetricError("reference transcript is empty after normalization")
    return 100.0 * edit_distance(ref, normalize_words(hypothesis_text)) / len(ref)


def snr(clean: Waveform, noisy: Waveform) -> float:
    """Signal-to-noise ratio in dB; ``math.inf`` when the residual is exactly zero."""
    if len(clean) != len(noisy):
        raise MetricError(f"length mismatch: {len(clean)} vs {len(noisy)}")
    signal = float(np.sum(clean.samples ** 2))
    if signal == 0.0:
        raise MetricError("clean signal is all zeros")
    noise = float(np.sum((noisy.samples - clean.samples) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def mse_similarity(a: Waveform, b: Waveform) -> float:
    """100 * (1 - MSE / 4), clamped to [0, 100]."""
    if len(a) != len(b):
        raise MetricError(f"length mismatch: {len(a)} vs {len(b)}")
    mse = float(np.mean((a.samples - b.samples) ** 2))
    return float(min(100.0, max(0.0, (1.0 - mse / MSE_DYNAMIC_RANGE) * 100.0)))


# ---------------------------------------------------------------- pluggable front ends


class Transcriber(Protocol):
    def __call__(self, w: Waveform) -> str: ...


class NullTranscriber:
    """Returns a fixed hypothesis; useful in tests."""

    def __init__(self, text: str = ""):
        self.text = text

    def __call__(self, w: Waveform) -> str:
        return self.text


class SubprocessTranscriber:
    """Runs an external ASR command.

    ``command`` is a template containing ``{in}``; the audio is written there as
    PCM16 WAV and the command's stdout is taken as the transcript.
    """

    def __init__(self, command: str, timeout: float = 600.0):
        if "{in}" not in command:
            raise ValueError("transcriber command must contain an {in} placeholder")
        self.command = command
        self.timeout = timeout

    def __call__(self, w: Waveform) -> str:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "input.wav"
            save_wav(path, w)
            args = [a.replace("{in}", str(path)) for a in shlex.split(self.command)]
            proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise RuntimeError(f"transcriber failed ({proc.returncode}): {proc.stderr.strip()[:200]}")
        return proc.stdout.strip()


def pesq(reference: Waveform, degraded: Waveform) -> float:
    """PESQ is licensed separately; attach an implementation via ``extra_metrics``."""
    raise NotImplementedError("PESQ is not bundled; pass a scorer through evaluate_pair_set(extra_metrics=...)")


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    mcd: Optional[float] = None
    wer_percent: Optional[float] = None
    snr_db: Optional[float] = None  # math.inf when identical
    mse_similarity_percent: Optional[float] = None

    def as_dict(self) -> dict:
        d = {"mcd": self.mcd, "wer_percent": self.wer_percent,
             "snr_db": None if self.snr_db is None or math.isinf(self.snr_db) else self.snr_db,
             "snr_infinite": self.snr_db is not None and math.isinf(self.snr_db),
             "mse_similarity_percent": self.mse_similarity_percent}
        return d


def evaluate_pair(ref: Waveform, cand: Waveform, ref_text: Optional[str] = None,
                  transcriber: Optional[Transcriber] = None, cfg: Optional[SpecConfig] = None) -> MetricReport:
    rep = MetricReport(mcd=mcd_dtw(ref, cand, cfg=cfg))
    if len(ref) == len(cand):
        rep.snr_db = snr(ref, cand)
        rep.mse_similarity_percent = mse_similarity(ref, cand)
    if transcriber is not None and ref_text is not None:
        rep.wer_percent = wer(ref_text, transcriber(cand))
    return rep


def _aggregate(values: list) -> Optional[dict]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if any(math.isinf(v) for v in vals):
        mean = median = math.inf
    else:
        mean, median = statistics.fmean(vals), statistics.median(vals)
    return {"mean": mean, "median": median, "n": len(vals)}


def _json_number(x):
    if x is None:
        return None
    return "inf" if math.isinf(x) else x


def evaluate_pair_set(manifest_ref: Manifest, manifest_cand: Manifest, transcriber: Optional[Transcriber] = None,
                      workers: int = 1, extra_metrics: Optional[dict[str, Callable]] = None) -> dict:
    """Score every candidate against the reference with the same id.

    Returns ``{"pairs": [...], "aggregate": {...}}``. WER is included only when a
    transcriber is given.
    """
    ref_by_id = {e.id: e for e in manifest_ref.entries}
    cand_by_id = {e.id: e for e in manifest_cand.entries}
    missing = sorted(set(ref_by_id) ^ set(cand_by_id))
    if missing:
        raise MetricError(f"ids present in only one manifest: {', '.join(missing)}")
    ids = [e.id for e in manifest_ref.entries]
    extra_metrics = extra_metrics or {}

    def score(sid):
        ref = load_sample(manifest_ref, ref_by_id[sid])
        cand = load_sample(manifest_cand, cand_by_id[sid])
        rep = evaluate_pair(ref.audio, cand.audio, ref.text, transcriber)
        row = {"id": sid, **rep.as_dict()}
        for name, fn in extra_metrics.items():
            row[name] = fn(ref.audio, cand.audio)
        row["_snr"] = rep.snr_db
        return row

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(score, ids))
    keys = ["mcd", "wer_percent", "mse_similarity_percent", *extra_metrics]
    aggregate = {k: _aggregate([r[k] for r in rows]) for k in keys}
    snr_agg = _aggregate([r.pop("_snr") for r in rows])
    if snr_agg is not None:
        snr_agg = {k: _json_number(v) if k != "n" else v for k, v in snr_agg.items()}
    aggregate["snr_db"] = snr_agg
    if transcriber is None:
        aggregate.pop("wer_percent")
        for r in rows:
            r.pop("wer_percent")
    return {"pairs": rows, "aggregate": aggregate}
