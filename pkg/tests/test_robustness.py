import json

import numpy as np
import pytest
import scipy.signal

from voiceguard.audio import ManifestEntry, Waveform, load_manifest, load_wav, save_wav, write_manifest
from voiceguard.robustness import (LENGTH_PRESERVING, TransformError, TransformSpec, apply_pipeline,
                                   apply_specs, apply_transform, load_pipeline, spectral_gate, time_stretch)
from voiceguard.toy import toy_corpus

SR = 22050


@pytest.fixture(scope="module")
def speech():
    return toy_corpus(1, 0)[0].audio


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x) ** 2)))


def test_unknown_kind_and_params():
    with pytest.raises(TransformError):
        TransformSpec("reverb")
    with pytest.raises(TransformError, match="unknown params"):
        TransformSpec("low_pass", {"cutoff": 100})
    with pytest.raises(TransformError):
        TransformSpec("band_pass", {"low_hz": 7000.0})
    with pytest.raises(TransformError):
        TransformSpec("time_mask", {"min_fraction": 0.5, "max_fraction": 0.2})
    with pytest.raises(TransformError):
        TransformSpec("codec_compress", {"command": "lame in.wav"})


@pytest.mark.parametrize("kind", sorted(LENGTH_PRESERVING))
def test_length_rate_and_determinism(speech, kind):
    t = TransformSpec(kind, seed=11)
    a, b = apply_transform(speech, t), apply_transform(speech, t)
    assert len(a) == len(speech) and a.sample_rate == speech.sample_rate
    assert np.array_equal(a.samples, b.samples)
    assert np.all(np.abs(a.samples) <= 1.0)


def test_quantizer_bound():
    x = np.linspace(-1, 1, 2001)
    y = apply_transform(Waveform(x), TransformSpec("quantize_8bit")).samples
    assert np.max(np.abs(y - x)) <= 1 / 255 + 1e-12
    assert len(np.unique(y)) <= 256
    half = apply_transform(Waveform([0.5]), TransformSpec("quantize_8bit")).samples[0]
    assert half == (np.round(0.5 * 127.5 + 127.5) - 127.5) / 127.5


@pytest.mark.parametrize("seed", range(8))
def test_time_mask_span(seed):
    n = 10000
    y = apply_transform(Waveform(np.full(n, 0.5)), TransformSpec("time_mask", seed=seed)).samples
    zeros = np.flatnonzero(y == 0)
    assert 0.10 * n <= len(zeros) <= 0.15 * n
    assert zeros[-1] - zeros[0] + 1 == len(zeros)  # contiguous


def test_band_pass_rejects_50hz():
    t = np.arange(SR) / SR
    x = Waveform(0.5 * np.sin(2 * np.pi * 50 * t))
    assert _rms(apply_transform(x, TransformSpec("band_pass")).samples) < 0.05 * _rms(x.samples)


def test_low_and_high_pass():
    t = np.arange(SR) / SR
    hi = Waveform(0.5 * np.sin(2 * np.pi * 9000 * t))
    lo = Waveform(0.5 * np.sin(2 * np.pi * 40 * t))
    assert _rms(apply_transform(hi, TransformSpec("low_pass")).samples) < 0.05 * _rms(hi.samples)
    assert _rms(apply_transform(lo, TransformSpec("high_pass")).samples) < 0.2 * _rms(lo.samples)
    mid = Waveform(0.5 * np.sin(2 * np.pi * 1000 * t))
    assert _rms(apply_transform(mid, TransformSpec("low_pass")).samples) == pytest.approx(_rms(mid.samples), rel=0.01)


def test_resample_choice_is_seeded(speech):
    outs = {apply_transform(speech, TransformSpec("resample_roundtrip", seed=s)).samples.tobytes() for s in range(12)}
    assert 1 < len(outs) <= 3


def test_pitch_shift_probability(speech):
    changed = sum(not np.array_equal(apply_transform(speech, TransformSpec("pitch_shift", seed=s)).samples,
                                     speech.samples) for s in range(40))
    assert 8 <= changed <= 32


def test_time_stretch_length():
    x = np.random.default_rng(0).normal(size=20000) * 0.1
    assert len(time_stretch(x, 1.25)) == 16000
    assert len(time_stretch(x, 0.8)) == 25000


def test_codec_requires_command(speech):
    with pytest.raises(TransformError, match="command"):
        apply_transform(speech, TransformSpec("codec_compress"))


def test_codec_subprocess_round_trip(speech, tmp_path):
    script = tmp_path / "codec.py"
    script.write_text("import shutil, sys\nshutil.copyfile(sys.argv[1], sys.argv[2])\n")
    t = TransformSpec("codec_compress", {"command": f"python3 {script} {{in}} {{out}}"})
    y = apply_transform(speech, t)
    assert np.max(np.abs(y.samples - speech.samples)) <= 1 / 32768


def test_hybrid_skips_codec_without_encoder(speech):
    y = apply_transform(speech, TransformSpec("hybrid", seed=2))
    assert len(y) == len(speech)


def test_spectral_gate_tone_and_noise():
    n = 2 * SR
    t = np.arange(n) / SR
    rng = np.random.default_rng(0)
    # silent lead-in gives the gate noise-only frames to estimate its threshold from
    tone = np.where(t > 0.5, 0.3 * np.sin(2 * np.pi * 1000 * t), 0.0)
    x = Waveform(tone + 0.003 * rng.normal(size=n))
    y = spectral_gate(x)
    f, before = scipy.signal.welch(x.samples[SR:], SR, nperseg=1024)
    _, after = scipy.signal.welch(y.samples[SR:], SR, nperseg=1024)
    tone_band = np.abs(f - 1000) < 60
    # tone-free: outside the tone's window sidelobes that exceed the noise floor
    free = np.abs(f - 1000) > 2000
    assert 10 * np.log10(before[tone_band].sum() / after[tone_band].sum()) < 1.0
    assert 10 * np.log10(before[free].sum() / after[free].sum()) >= 10.0


# ---------------------------------------------------------------- pipelines


@pytest.fixture()
def corpus_manifest(tmp_path):
    entries = []
    for s in toy_corpus(3, 1):
        rel = f"in/{s.id}.wav"
        save_wav(tmp_path / rel, s.audio)
        entries.append(ManifestEntry(rel, s.text, s.speaker_id, s.id))
    write_manifest(tmp_path / "in.jsonl", entries)
    return tmp_path / "in.jsonl"


def test_empty_pipeline_is_identity(corpus_manifest, tmp_path):
    summary = apply_pipeline(corpus_manifest, [], tmp_path / "out")
    src = load_manifest(corpus_manifest)
    out = load_manifest(tmp_path / "out" / "manifest.jsonl")
    assert [e.id for e in out.entries] == [e.id for e in src.entries]
    for a, b in zip(src.entries, out.entries):
        assert src.resolve(a).read_bytes() == out.resolve(b).read_bytes()
    assert summary["failures"] == []


def test_pipeline_deterministic(corpus_manifest, tmp_path):
    specs = [TransformSpec("gaussian_noise"), TransformSpec("time_mask"), TransformSpec("low_pass")]
    apply_pipeline(corpus_manifest, specs, tmp_path / "a", seed=5)
    apply_pipeline(corpus_manifest, specs, tmp_path / "b", seed=5, workers=2)
    apply_pipeline(corpus_manifest, specs, tmp_path / "c", seed=6)
    a = sorted((tmp_path / "a" / "wavs").iterdir())
    b = sorted((tmp_path / "b" / "wavs").iterdir())
    c = sorted((tmp_path / "c" / "wavs").iterdir())
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert [p.read_bytes() for p in a] != [p.read_bytes() for p in c]


def test_per_sample_seeds_differ(corpus_manifest):
    m = load_manifest(corpus_manifest)
    w = load_wav(m.resolve(m.entries[0]))
    a = apply_specs(w, [TransformSpec("gaussian_noise")], "u1")
    b = apply_specs(w, [TransformSpec("gaussian_noise")], "u2")
    assert not np.array_equal(a.samples, b.samples)


def test_pipeline_failure_reported(corpus_manifest, tmp_path):
    summary = apply_pipeline(corpus_manifest, [TransformSpec("codec_compress")], tmp_path / "out")
    assert len(summary["failures"]) == 3 and summary["n_written"] == 0


def test_load_pipeline_file(tmp_path):
    path = tmp_path / "p.cfg"
    path.write_text("# attack\n" + json.dumps({"kind": "low_pass", "params": {"cutoff_hz": 4000}}) + "\n\n"
                    + json.dumps({"kind": "quantize_8bit", "seed": 3}) + "\n")
    specs = load_pipeline(path)
    assert [s.kind for s in specs] == ["low_pass", "quantize_8bit"]
    assert specs[0].params["cutoff_hz"] == 4000 and specs[1].seed == 3
    path.write_text(json.dumps({"kind": "low_pass", "extra": 1}) + "\n")
    with pytest.raises(TransformError, match=":1:"):
        load_pipeline(path)
