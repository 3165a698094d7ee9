"""Speaker ranking by voiceprint similarity to a reference speaker."""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .audio import Manifest, SpecConfig, SpeechSample, Waveform, load_sample, mel_spectrogram

logger = logging.getLogger(__name__)

# any callable mapping a waveform to a fixed-length vector
EmbeddingProvider = Callable[[Waveform], np.ndarray]


class EmbeddingError(ValueError):
    pass


class TooFewSpeakersWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    speaker_id: Optional[str]
    n_samples_used: int

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise EmbeddingError("embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", v)


def logmel_stats(w: Waveform, cfg: Optional[SpecConfig] = None) -> np.ndarray:
    """Default provider: per-band mean and std of the log-mel spectrogram."""
    m = mel_spectrogram(w, cfg or SpecConfig(sample_rate=w.sample_rate))
    return np.concatenate([m.mean(0), m.std(0)])


def embed_speaker(samples: Sequence[SpeechSample], provider: EmbeddingProvider = logmel_stats) -> SpeakerEmbedding:
    """Mean of the per-utterance embeddings of one speaker."""
    if not samples:
        raise EmbeddingError("no samples to embed")
    ids = {s.speaker_id for s in samples}
    if len(ids) > 1:
        raise EmbeddingError(f"samples mix speakers: {sorted(map(str, ids))}")
    vecs = [np.asarray(provider(s.audio), dtype=np.float64) for s in samples]
    if len({v.shape for v in vecs}) != 1:
        raise EmbeddingError("provider returned vectors of different shapes")
    return SpeakerEmbedding(np.mean(vecs, axis=0), samples[0].speaker_id, len(samples))


def embed_waveforms(waves: Sequence[Waveform], provider: EmbeddingProvider = logmel_stats,
                    speaker_id: Optional[str] = None) -> SpeakerEmbedding:
    # transcripts are irrelevant to the embedding; a placeholder keeps SpeechSample valid
    spk = speaker_id or "reference"
    return embed_speaker([SpeechSample(w, "-", spk, f"ref{i}") for i, w in enumerate(waves)], provider)


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise EmbeddingError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def select_speakers(manifest: Manifest, reference: SpeakerEmbedding, k: int, min_samples: int = 50,
                    provider: EmbeddingProvider = logmel_stats, workers: int = 1) -> list[tuple[str, float, int]]:
    """Top-``k`` eligible speakers as ``(speaker_id, similarity, n_samples)``.

    A speaker is eligible with at least ``min_samples`` utterances. Ranking is by
    similarity, descending, then by speaker id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_speaker: dict[str, list] = defaultdict(list)
    for e in manifest.entries:
        if e.speaker_id is not None:
            by_speaker[e.speaker_id].append(e)
    eligible = sorted(s for s, es in by_speaker.items() if len(es) >= min_samples)

    def embed(spk):
        samples = [load_sample(manifest, e) for e in by_speaker[spk]]
        return embed_speaker(samples, provider)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        embs = list(pool.map(embed, eligible))
    ranked = sorted(((spk, cosine_similarity(reference.vector, e.vector), e.n_samples_used)
                     for spk, e in zip(eligible, embs)), key=lambda r: (-r[1], r[0]))
    if len(ranked) < k:
        msg = f"only {len(ranked)} speakers have >= {min_samples} samples; returning all of them"
        warnings.warn(msg, TooFewSpeakersWarning, stacklevel=2)
        logger.warning(msg)
    return ranked[:k]
