import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voiceguard.audio import ManifestEntry, SpeechSample, Waveform, load_manifest, save_wav, write_manifest
from voiceguard.speakers import (EmbeddingError, SpeakerEmbedding, TooFewSpeakersWarning, cosine_similarity,
                                 embed_speaker, logmel_stats, select_speakers)
from voiceguard.toy import DEFAULT_SPEAKERS, ToySpeaker, render


def _sample(i, spk="a", n=4096):
    w = Waveform(np.random.default_rng(i).uniform(-0.3, 0.3, n))
    return SpeechSample(w, "text", spk, f"u{i}")


def test_single_sample_embedding():
    s = _sample(0)
    np.testing.assert_array_equal(embed_speaker([s]).vector, logmel_stats(s.audio))
    assert embed_speaker([s]).n_samples_used == 1


def test_duplicate_sample_mean_invariance():
    s = _sample(1)
    np.testing.assert_allclose(embed_speaker([s, s]).vector, embed_speaker([s]).vector, rtol=1e-12)


def test_mean_of_two_known_vectors():
    table = {"u0": np.array([1.0, 2.0, 3.0]), "u1": np.array([3.0, 0.0, -1.0])}
    samples = [_sample(0), _sample(1)]
    lookup = {id(s.audio): table[s.id] for s in samples}
    emb = embed_speaker(samples, provider=lambda w: lookup[id(w)])
    np.testing.assert_array_equal(emb.vector, [2.0, 1.0, 1.0])


def test_embedding_errors():
    with pytest.raises(EmbeddingError):
        embed_speaker([])
    with pytest.raises(EmbeddingError, match="mix"):
        embed_speaker([_sample(0, "a"), _sample(1, "b")])
    with pytest.raises(EmbeddingError):
        SpeakerEmbedding(np.array([np.inf]), "a", 1)


def test_default_embedding_dimension():
    assert logmel_stats(_sample(0).audio).shape == (160,)


@pytest.mark.parametrize("b,expected", [([1.0, 2.0, -3.0], 1.0), ([2.0, -1.0, 0.0], 0.0), ([-1.0, -2.0, 3.0], -1.0)])
def test_cosine_examples(b, expected):
    assert cosine_similarity([1.0, 2.0, -3.0], b) == pytest.approx(expected, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(EmbeddingError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(EmbeddingError):
        cosine_similarity([1.0], [1.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_bounded(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


# ---------------------------------------------------------------- selection


def _pool(tmp_path, counts, speakers):
    entries = []
    rng = np.random.default_rng(0)
    for spk, n in zip(speakers, counts):
        for i in range(n):
            rel = f"wavs/{spk.speaker_id}_{i}.wav"
            save_wav(tmp_path / rel, render("amal", spk, char_samples=1024, rng=rng))
            entries.append(ManifestEntry(rel, "amal", spk.speaker_id, f"{spk.speaker_id}_{i}"))
    write_manifest(tmp_path / "m.jsonl", entries)
    return load_manifest(tmp_path / "m.jsonl")


SPEAKERS = (ToySpeaker("s1", 2, 1.0), ToySpeaker("s2", 3, 1.12), ToySpeaker("s3", 2, 1.05), ToySpeaker("s4", 4, 0.9))


@pytest.fixture(scope="module")
def pool(tmp_path_factory):
    return _pool(tmp_path_factory.mktemp("pool"), [5, 5, 4, 5], SPEAKERS)


def _reference(manifest, spk):
    from voiceguard.audio import load_sample
    return embed_speaker([load_sample(manifest, e) for e in manifest.entries if e.speaker_id == spk])


def test_min_samples_exclusion(pool):
    ranked = select_speakers(pool, _reference(pool, "s1"), k=3, min_samples=5)
    assert "s3" not in [r[0] for r in ranked]  # 4 < 5 samples


def test_reference_ranks_first(pool):
    ranked = select_speakers(pool, _reference(pool, "s1"), k=3, min_samples=5)
    assert ranked[0][0] == "s1"
    assert ranked[0][1] == pytest.approx(1.0, abs=1e-12)
    sims = [r[1] for r in ranked]
    assert sims == sorted(sims, reverse=True)


def test_k_larger_than_pool_warns(pool):
    with pytest.warns(TooFewSpeakersWarning):
        ranked = select_speakers(pool, _reference(pool, "s1"), k=10, min_samples=5)
    assert len(ranked) == 3


def test_ties_broken_by_id(tmp_path):
    spk = ToySpeaker("x", 2, 1.0)
    entries = []
    save_wav(tmp_path / "a.wav", render("amal", spk, rng=np.random.default_rng(0)))
    for sid in ("zeta", "alpha", "mid"):
        entries.append(ManifestEntry("a.wav", "amal", sid, sid))
    write_manifest(tmp_path / "m.jsonl", entries)
    m = load_manifest(tmp_path / "m.jsonl")
    ranked = select_speakers(m, _reference(m, "mid"), k=3, min_samples=1)
    assert [r[0] for r in ranked] == ["alpha", "mid", "zeta"]


def test_ranking_invariant_under_positive_scaling(pool):
    ref = _reference(pool, "s2")
    base = select_speakers(pool, ref, k=4, min_samples=4)
    scaled = select_speakers(pool, SpeakerEmbedding(ref.vector * 7.5, None, 1), k=4, min_samples=4,
                             provider=lambda w: 3.0 * logmel_stats(w))
    assert [r[0] for r in base] == [r[0] for r in scaled]


def test_min_samples_default_is_fifty(tmp_path):
    m = _pool(tmp_path, [50, 49], DEFAULT_SPEAKERS)
    ref = _reference(m, "spk_a")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TooFewSpeakersWarning)
        ranked = select_speakers(m, ref, k=2)
    assert [r[0] for r in ranked] == ["spk_a"]
