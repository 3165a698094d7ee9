import json
import math

import numpy as np
import pytest
import scipy.io.wavfile
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voiceguard.audio import (AudioError, ManifestError, SpecConfig, Waveform, apply_patch, crop_patch, iterate_dataset,
                              load_manifest, load_wav, log_mel, mel_filterbank, mel_spectrogram, save_wav, stft_linear)


def test_waveform_invariants():
    with pytest.raises(AudioError):
        Waveform(np.array([1.5]))
    with pytest.raises(AudioError):
        Waveform(np.array([]))
    with pytest.raises(AudioError):
        Waveform(np.array([np.nan]))
    with pytest.raises(AudioError):
        Waveform(np.zeros(4), 0)
    w = Waveform([0.1, -0.2])
    with pytest.raises(ValueError):
        w.samples[0] = 0.5


def test_spec_config_validation():
    with pytest.raises(ValueError):
        SpecConfig(n_fft=256, hop=512)
    with pytest.raises(ValueError):
        SpecConfig(fmin=100, fmax=50)
    with pytest.raises(ValueError):
        SpecConfig(fmax=20000)
    with pytest.raises(ValueError):
        SpecConfig(n_mels=0)


# ---------------------------------------------------------------- WAV


def test_load_pcm16_scaling(tmp_path):
    path = tmp_path / "a.wav"
    scipy.io.wavfile.write(path, 22050, np.array([16384], dtype=np.int16))
    w = load_wav(path)
    assert w.samples.tolist() == [0.5]


def test_load_stereo_downmix(tmp_path):
    path = tmp_path / "s.wav"
    scipy.io.wavfile.write(path, 22050, np.array([[1.0, -1.0]], dtype=np.float32))
    assert load_wav(path).samples.tolist() == [0.0]


def test_load_length_from_duration(tmp_path):
    path = tmp_path / "long.wav"
    scipy.io.wavfile.write(path, 22050, np.zeros(3 * 22050, dtype=np.int16))
    assert len(load_wav(path)) == 66150


def test_load_errors(tmp_path):
    with pytest.raises(AudioError):
        load_wav(tmp_path / "missing.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file")
    with pytest.raises(AudioError):
        load_wav(bad)
    i32 = tmp_path / "i32.wav"
    scipy.io.wavfile.write(i32, 22050, np.zeros(8, dtype=np.int32))
    with pytest.raises(AudioError, match="unsupported"):
        load_wav(i32)
    empty = tmp_path / "empty.wav"
    scipy.io.wavfile.write(empty, 22050, np.zeros(0, dtype=np.int16))
    with pytest.raises(AudioError, match="zero-length"):
        load_wav(empty)


@pytest.mark.parametrize("subtype", ["pcm16", "float32"])
def test_wav_round_trip(tmp_path, subtype):
    rng = np.random.default_rng(0)
    if subtype == "pcm16":
        x = rng.integers(-32768, 32767, 500) / 32768.0
    else:
        x = rng.uniform(-1, 1, 500).astype(np.float32).astype(np.float64)
    save_wav(tmp_path / "x.wav", Waveform(x), subtype)
    assert np.array_equal(load_wav(tmp_path / "x.wav").samples, x)


# ---------------------------------------------------------------- STFT / mel


def test_zero_waveform_single_zero_frame():
    cfg = SpecConfig()
    spec = stft_linear(Waveform(np.zeros(cfg.n_fft)), cfg)
    assert spec.shape == (1, cfg.n_bins)
    assert np.all(spec == 0)


def test_frame_count():
    cfg = SpecConfig()
    assert stft_linear(Waveform(np.zeros(cfg.n_fft + cfg.hop)), cfg).shape[0] == 2
    with pytest.raises(AudioError):
        stft_linear(Waveform(np.zeros(cfg.n_fft - 1)), cfg)


def test_bin_centre_sine_energy():
    # closed form: periodic Hann turns a bin-centred sine into amplitudes N/4 at k and N/8 at k +- 1
    cfg = SpecConfig()
    k, n = 40, cfg.n_fft
    x = 0.5 * np.sin(2 * np.pi * k * np.arange(n) / n)
    spec = stft_linear(Waveform(x), cfg)[0]
    energy = spec ** 2
    assert spec[k] == pytest.approx(0.5 * n / 4, rel=1e-9)
    assert spec[k + 1] == pytest.approx(0.5 * n / 8, rel=1e-9)
    assert energy[k] / energy.sum() == pytest.approx(2 / 3, rel=1e-9)
    assert energy[k - 1:k + 2].sum() / energy.sum() >= 0.9


def test_zero_waveform_log_floor():
    cfg = SpecConfig()
    m = mel_spectrogram(Waveform(np.zeros(2048)), cfg)
    assert np.all(m == math.log(1e-5))


def test_mel_deterministic():
    cfg = SpecConfig()
    w = Waveform(np.random.default_rng(1).uniform(-0.5, 0.5, 4096))
    assert np.array_equal(mel_spectrogram(w, cfg), mel_spectrogram(w, cfg))


def test_single_band_weighted_sum():
    # independent triangle: mel edges 0, mid, top of the HTK scale
    sr, n_fft = 8000, 64
    cfg = SpecConfig(n_fft=n_fft, hop=16, n_mels=1, sample_rate=sr)
    fb = mel_filterbank(sr, n_fft, 1, 0.0, sr / 2)
    top = 2595 * math.log10(1 + 4000 / 700)
    mid_hz = 700 * (10 ** (top / 2 / 2595) - 1)
    expected_row = []
    for b in range(n_fft // 2 + 1):
        f = b * sr / n_fft
        tri = f / mid_hz if f <= mid_hz else (4000 - f) / (4000 - mid_hz)
        expected_row.append(max(0.0, tri) * 2 / 4000)
    np.testing.assert_allclose(fb[0], expected_row, rtol=1e-12, atol=1e-15)
    x = np.random.default_rng(2).uniform(-0.3, 0.3, n_fft)
    spec = stft_linear(Waveform(x, sr), cfg)[0]
    m = mel_spectrogram(Waveform(x, sr), cfg)[0, 0]
    assert m == pytest.approx(math.log(max(np.dot(expected_row, spec), 1e-5)), rel=1e-12)


def test_mel_gradient_matches_finite_differences():
    cfg = SpecConfig(n_fft=256, hop=64)
    x = torch.from_numpy(np.random.default_rng(3).uniform(-0.5, 0.5, 1024)).requires_grad_(True)
    f = lambda v: log_mel(v, cfg).mean()
    grad, = torch.autograd.grad(f(x), x)
    idx = np.random.default_rng(4).choice(1024, 24, replace=False)
    h = 1e-6
    for i in idx:
        e = torch.zeros(1024, dtype=torch.float64)
        e[i] = h
        fd = (f(x.detach() + e) - f(x.detach() - e)) / (2 * h)
        assert abs(float(grad[i]) - float(fd)) <= 1e-3 * max(abs(float(fd)), 1e-6)


# ---------------------------------------------------------------- manifests


def _write(tmp_path, lines, wavs=("a.wav", "b.wav")):
    for name in wavs:
        save_wav(tmp_path / name, Waveform(np.zeros(16)))
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def test_manifest_order(tmp_path):
    path = _write(tmp_path, [json.dumps({"audio_path": "b.wav", "text": "x", "speaker_id": "s"}),
                             json.dumps({"audio_path": "a.wav", "text": "y", "speaker_id": "s"})])
    samples = list(iterate_dataset(load_manifest(path)))
    assert [s.id for s in samples] == ["b", "a"]
    assert [s.text for s in samples] == ["x", "y"]


def test_manifest_errors(tmp_path):
    good = json.dumps({"audio_path": "a.wav", "text": "x", "speaker_id": "s"})
    with pytest.raises(ManifestError, match=":2:.*speaker_id"):
        load_manifest(_write(tmp_path, [good, json.dumps({"audio_path": "b.wav", "text": "x"})]))
    with pytest.raises(ManifestError, match=":1: malformed"):
        load_manifest(_write(tmp_path, ["{not json"]))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(_write(tmp_path, [good, good]))
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(_write(tmp_path, [json.dumps({"audio_path": "c.wav", "text": "x", "speaker_id": "s"})]))


def test_empty_manifest(tmp_path):
    assert list(iterate_dataset(load_manifest(_write(tmp_path, [])))) == []


def test_manifest_resamples(tmp_path):
    save_wav(tmp_path / "a.wav", Waveform(np.zeros(441), 44100))
    (tmp_path / "m.jsonl").write_text(json.dumps({"sample_rate": 22050}) + "\n"
                                      + json.dumps({"audio_path": "a.wav", "text": "x", "speaker_id": "s"}) + "\n")
    s = next(iterate_dataset(load_manifest(tmp_path / "m.jsonl")))
    assert s.audio.sample_rate == 22050 and len(s.audio) == 221


# ---------------------------------------------------------------- patches


def test_crop_examples():
    w = Waveform([0.1, 0.2, 0.3, 0.4])
    p, pad = crop_patch(w, 1, 2)
    assert p.samples.tolist() == [0.2, 0.3] and pad == 0
    p, pad = crop_patch(Waveform([0.1, 0.2, 0.3]), 2, 3)
    assert p.samples.tolist() == [0.3, 0.0, 0.0] and pad == 2
    p, _ = crop_patch(w, 0, len(w))
    assert np.array_equal(p.samples, w.samples)
    with pytest.raises(ValueError):
        crop_patch(w, 4, 1)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 64), data=st.data())
def test_crop_is_left_inverse_of_patch_replacement(n, data):
    rng = np.random.default_rng(n)
    w = Waveform(rng.uniform(-1, 1, n))
    pos = data.draw(st.integers(0, n - 1))
    length = data.draw(st.integers(1, 80))
    replacement = Waveform(rng.uniform(-1, 1, length))
    patched = apply_patch(w, replacement, pos)
    got, pad = crop_patch(patched, pos, length)
    keep = length - pad
    assert np.array_equal(got.samples[:keep], replacement.samples[:keep])
    assert np.all(got.samples[keep:] == 0)
