import numpy as np
import pytest
import torch

from voiceguard.audio import SpeechSample, Waveform
from voiceguard.surrogate import (LOSS_NAMES, Batch, DivergenceError, SurrogateConfig, batch_tensors, count_parameters,
                                  encode_text, fit, forward_losses, gaussian_kl, init_surrogate, load_checkpoint,
                                  loss_terms, parameters_equal, predicted_durations, save_checkpoint, synthesize,
                                  train_step)
from voiceguard.toy import toy_corpus


@pytest.fixture(scope="module")
def corpus():
    return toy_corpus(6, seed=3)


def _model(corpus, seed=0, **kw):
    speakers = tuple(sorted({s.speaker_id for s in corpus}))
    return init_surrogate(SurrogateConfig(speakers=speakers, **kw), seed)


# ---------------------------------------------------------------- gradients


def test_duration_loss_has_exactly_zero_waveform_gradient():
    model = init_surrogate(SurrogateConfig(speakers=("s",)), 0).double()
    sample = SpeechSample(Waveform(np.random.default_rng(2).uniform(-0.5, 0.5, 1024)), "abc", "s", "d")
    bt = batch_tensors(model, Batch([sample], 0, 1024))
    w = bt.wave.clone().requires_grad_(True)
    val = loss_terms(model, bt.with_wave(w), components=("dur",))["dur"].sum()
    grad, = torch.autograd.grad(val, w, allow_unused=True)
    assert grad is None or torch.count_nonzero(grad) == 0


def test_gaussian_kl_closed_form():
    # KL(N(1, 2^2) || N(0, 1)) = -log 2 + (4 + 1) / 2 - 1/2
    v = gaussian_kl(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.0), torch.tensor(1.0))
    assert float(v) == pytest.approx(-np.log(2) + 2.0)
    assert float(gaussian_kl(torch.tensor(0.3), torch.tensor(0.7), torch.tensor(0.3), torch.tensor(0.7))) == 0.0


# ---------------------------------------------------------------- losses and training


def test_forward_losses_finite_and_modes(corpus):
    model = _model(corpus)
    out = forward_losses(model, Batch(corpus[:3]))
    assert set(out.as_dict()) == {*LOSS_NAMES, "total"}
    assert all(np.isfinite(v) for v in out.as_dict().values())
    with pytest.raises(ValueError):
        forward_losses(model, Batch(corpus[:3]), mode="eval")


def test_encode_text_rejects_empty():
    with pytest.raises(ValueError):
        encode_text("   ")


def test_zero_lr_leaves_parameters(corpus):
    model = _model(corpus)
    before = init_surrogate(model.config, 0)
    train_step(model, Batch(corpus[:2]), 0.0)
    assert parameters_equal(model, before)
    with pytest.raises(ValueError):
        train_step(model, Batch(corpus[:2]), -1.0)


def test_training_lowers_reconstruction(corpus):
    torch.manual_seed(0)
    model = _model(corpus)
    history = fit(model, corpus, 60, batch_size=4, lr=2e-3, seed=0)
    first = np.mean([h.recon for h in history[:5]])
    last = np.mean([h.recon for h in history[-5:]])
    assert last < first


def test_fit_is_deterministic(corpus):
    a, b = _model(corpus), _model(corpus)
    ha = fit(a, corpus, 3, batch_size=2, seed=4)
    hb = fit(b, corpus, 3, batch_size=2, seed=4)
    assert [h.as_dict() for h in ha] == [h.as_dict() for h in hb]
    assert parameters_equal(a, b)


def test_divergence_is_reported(corpus):
    model = _model(corpus)
    with torch.no_grad():
        model.duration.out.bias.fill_(1e4)
    with pytest.raises(DivergenceError):
        fit(model, corpus, 1, batch_size=2)


# ---------------------------------------------------------------- checkpoints and synthesis


def test_checkpoint_round_trip(tmp_path, corpus):
    model = _model(corpus, seed=5)
    fit(model, corpus, 2, batch_size=2)
    save_checkpoint(model, tmp_path / "m.pt")
    again = load_checkpoint(tmp_path / "m.pt")
    assert parameters_equal(model, again)
    assert again.config == model.config
    (tmp_path / "bad.pt").write_bytes(b"junk")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.pt")


def test_synthesis_length_follows_durations(corpus):
    model = _model(corpus)
    s = corpus[0]
    w = synthesize(model, s.text, s.speaker_id, seed=1)
    d = predicted_durations(model, s.text, s.speaker_id)
    assert len(w) == d.sum() * model.config.spec.hop
    assert np.all(d >= 1)
    assert np.array_equal(w.samples, synthesize(model, s.text, s.speaker_id, seed=1).samples)
    with pytest.raises(KeyError):
        synthesize(model, s.text, "nobody")


def test_parameter_count_positive(corpus):
    assert count_parameters(_model(corpus)) > count_parameters(init_surrogate(SurrogateConfig(hidden_dim=8)))
