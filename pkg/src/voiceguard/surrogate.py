"""Desk-scale differentiable TTS surrogate with a VITS-shaped objective.

The generator is a conditional VAE: a posterior encoder reads the linear
spectrogram, a text encoder produces a per-character Gaussian prior, and a
transposed-convolution decoder turns latents back into waveform. A two-scale
convolutional discriminator supplies the adversarial and feature-matching
terms. The duration predictor sees text only, so its loss has no path back
to the waveform.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import SpecConfig, SpeechSample, Waveform, log_mel, stft_magnitude

logger = logging.getLogger(__name__)

LOSS_NAMES = ("recon", "kl", "dur", "adv_g", "fm")
VOCAB = "  abcdefghijklmnopqrstuvwxyz'.,?!-0123456789"  # index 0 pad, 1 unknown
_CHAR_INDEX = {c: i for i, c in enumerate(VOCAB) if i >= 2}
SIGMA_FLOOR = 1e-4
DIVERGENCE_LIMIT = 1e6
CHECKPOINT_FORMAT = "voiceguard-surrogate"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class DivergenceError(RuntimeError):
    pass


def encode_text(text: str) -> list[int]:
    ids = [_CHAR_INDEX.get(c, 1) for c in text.lower().strip()]
    if not ids:
        raise ValueError("text is empty")
    return ids


@dataclass(frozen=True)
class SurrogateConfig:
    latent_dim: int = 16
    hidden_dim: int = 32
    n_layers: int = 2
    disc_channels: int = 16
    speakers: tuple[str, ...] = ()
    noise_scale: float = 0.667
    spec: SpecConfig = field(default_factory=SpecConfig)

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.n_layers < 1 or self.disc_channels < 1:
            raise ValueError("latent_dim, hidden_dim, n_layers and disc_channels must all be >= 1")
        if self.spec.n_fft % self.spec.hop:
            raise ValueError("the surrogate needs n_fft to be a multiple of hop")
        object.__setattr__(self, "speakers", tuple(self.speakers))

    @property
    def hops_per_window(self) -> int:
        return self.spec.n_fft // self.spec.hop

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speakers"] = list(self.speakers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        d = dict(d)
        d["spec"] = SpecConfig(**d["spec"])
        d["speakers"] = tuple(d.get("speakers", ()))
        return cls(**d)


@dataclass(frozen=True)
class LossBundle:
    recon: float
    kl: float
    dur: float
    adv_g: float
    fm: float

    @property
    def total(self) -> float:
        return self.recon + self.kl + self.dur + self.adv_g + self.fm

    def as_dict(self) -> dict:
        return {**{k: getattr(self, k) for k in LOSS_NAMES}, "total": self.total}


# ---------------------------------------------------------------- networks


def _upsample_factors(hop: int) -> list[int]:
    factors = []
    while hop % 4 == 0 and hop > 1:
        factors.append(4)
        hop //= 4
    while hop % 2 == 0 and hop > 1:
        factors.append(2)
        hop //= 2
    if hop > 1:
        factors.append(hop)
    return factors


def _gaussian_params(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mu, raw = x.chunk(2, dim=1)
    return mu, F.softplus(raw) + SIGMA_FLOOR


class ConvStack(nn.Module):
    def __init__(self, channels: int, n_layers: int, kernel: int = 3):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(channels, channels, kernel, padding=kernel // 2) for _ in range(n_layers))

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(F.silu(x))
        return x


class TextEncoder(nn.Module):
    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        self.embed = nn.Embedding(len(VOCAB), cfg.hidden_dim, padding_idx=0)
        self.body = ConvStack(cfg.hidden_dim, cfg.n_layers)
        self.proj = nn.Conv1d(cfg.hidden_dim, 2 * cfg.latent_dim, 1)

    def forward(self, tokens):
        h = self.body(self.embed(tokens).transpose(1, 2))
        mu, sigma = _gaussian_params(self.proj(h))
        return h, mu, sigma


class DurationPredictor(nn.Module):
    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        self.conv = nn.Conv1d(cfg.hidden_dim, cfg.hidden_dim, 3, padding=1)
        self.out = nn.Conv1d(cfg.hidden_dim, 1, 1)

    def forward(self, h, g=None):
        if g is not None:
            h = h + g
        return self.out(F.silu(self.conv(h))).squeeze(1)


class PosteriorEncoder(nn.Module):
    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        self.pre = nn.Conv1d(cfg.spec.n_bins, cfg.hidden_dim, 5, padding=2)
        self.body = ConvStack(cfg.hidden_dim, cfg.n_layers, kernel=5)
        self.proj = nn.Conv1d(cfg.hidden_dim, 2 * cfg.latent_dim, 1)

    def forward(self, lin, g=None):
        h = self.pre(torch.log(lin + 1e-5).transpose(1, 2))
        if g is not None:
            h = h + g
        h = self.body(h)
        return _gaussian_params(self.proj(F.silu(h)))


class Decoder(nn.Module):
    """Latent frames -> waveform, ``hop`` samples per frame, tanh output."""

    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        ch = cfg.hidden_dim
        self.pre = nn.Conv1d(cfg.latent_dim, ch, 3, padding=1)
        self.ups = nn.ModuleList()
        self.res = nn.ModuleList()
        for u in _upsample_factors(cfg.spec.hop):
            nxt = max(ch // 2, 8)
            if u % 2 == 0:
                self.ups.append(nn.ConvTranspose1d(ch, nxt, 2 * u, stride=u, padding=u // 2))
            else:
                self.ups.append(nn.ConvTranspose1d(ch, nxt, u, stride=u))
            self.res.append(nn.Conv1d(nxt, nxt, 3, padding=1))
            ch = nxt
        self.post = nn.Conv1d(ch, 1, 7, padding=3)

    def forward(self, z, g=None):
        x = self.pre(z)
        if g is not None:
            x = x + g
        for up, res in zip(self.ups, self.res):
            x = up(F.silu(x))
            x = x + res(F.silu(x))
        return torch.tanh(self.post(F.silu(x))).squeeze(1)


class ScaleDiscriminator(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(1, ch, 15, stride=2, padding=7),
            nn.Conv1d(ch, ch, 11, stride=4, padding=5),
            nn.Conv1d(ch, 2 * ch, 11, stride=4, padding=5),
            nn.Conv1d(2 * ch, 2 * ch, 5, padding=2),
        ])
        self.out = nn.Conv1d(2 * ch, 1, 3, padding=1)

    def forward(self, x):
        feats = []
        x = x.unsqueeze(1)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        return self.out(x).flatten(1), feats


class Discriminator(nn.Module):
    def __init__(self, cfg: SurrogateConfig):
        super().__init__()
        self.scales = nn.ModuleList([ScaleDiscriminator(cfg.disc_channels), ScaleDiscriminator(cfg.disc_channels)])

    def forward(self, x):
        outs = []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool1d(x.unsqueeze(1), 4, 2, padding=1).squeeze(1)
            outs.append(d(x))
        return outs


class SurrogateModel(nn.Module):
    def __init__(self, config: SurrogateConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        self.text_encoder = TextEncoder(config)
        # speaker conditioning of the acoustic path (posterior, decoder, durations)
        self.speaker = nn.Embedding(len(config.speakers), config.hidden_dim) if config.speakers else None
        self.duration = DurationPredictor(config)
        self.posterior = PosteriorEncoder(config)
        self.decoder = Decoder(config)
        self.discriminator = Discriminator(config)

    @property
    def dtype(self):
        return self.decoder.post.weight.dtype

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p

    def speaker_vector(self, speaker: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if self.speaker is None or speaker is None:
            return None
        return self.speaker(speaker)[:, :, None]

    def speaker_index(self, speaker_id: Optional[str]) -> Optional[int]:
        if not self.config.speakers:
            return None
        try:
            return self.config.speakers.index(speaker_id)
        except ValueError:
            raise KeyError(f"unknown speaker_id {speaker_id!r}; model knows {list(self.config.speakers)}") from None


def init_surrogate(config: SurrogateConfig, seed: int = 0) -> SurrogateModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SurrogateModel(config, seed)
    return model


def save_checkpoint(model: SurrogateModel, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": state,
    }, path)


def load_checkpoint(path: Union[str, Path]) -> SurrogateModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a surrogate checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = init_surrogate(SurrogateConfig.from_dict(blob["config"]), blob["seed"])
    model.load_state_dict(blob["params"])
    return model


def parameters_equal(a: SurrogateModel, b: SurrogateModel) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    """Samples cropped to a fixed window before the forward pass."""

    samples: Sequence[SpeechSample]
    patch_position: Union[int, Sequence[int]] = 0
    patch_length: int = 8192

    def positions(self) -> list[int]:
        if isinstance(self.patch_position, (int, np.integer)):
            return [int(self.patch_position)] * len(self.samples)
        return [int(p) for p in self.patch_position]


@dataclass
class BatchTensors:
    wave: torch.Tensor        # (B, patch_length) model input
    tokens: torch.Tensor      # (B, C) padded char ids
    n_chars: torch.Tensor     # (B,)
    full_len: torch.Tensor    # (B,) utterance length in samples
    position: torch.Tensor    # (B,) crop start in samples
    speaker: Optional[torch.Tensor]

    def with_wave(self, wave: torch.Tensor) -> "BatchTensors":
        return BatchTensors(wave, self.tokens, self.n_chars, self.full_len, self.position, self.speaker)

    def select(self, idx) -> "BatchTensors":
        idx = torch.as_tensor(idx, dtype=torch.long)
        spk = None if self.speaker is None else self.speaker[idx]
        return BatchTensors(self.wave[idx], self.tokens[idx], self.n_chars[idx], self.full_len[idx],
                            self.position[idx], spk)


def crop_array(x: np.ndarray, position: int, length: int) -> np.ndarray:
    chunk = x[position:position + length]
    if chunk.shape[0] < length:
        chunk = np.concatenate([chunk, np.zeros(length - chunk.shape[0])])
    return chunk


def text_tensors(model: SurrogateModel, samples: Sequence[SpeechSample]):
    ids = [encode_text(s.text) for s in samples]
    tokens = torch.zeros(len(ids), max(len(t) for t in ids), dtype=torch.long)
    for i, t in enumerate(ids):
        tokens[i, :len(t)] = torch.tensor(t)
    n_chars = torch.tensor([len(t) for t in ids])
    speaker = None
    if model.config.speakers:
        speaker = torch.tensor([model.speaker_index(s.speaker_id) for s in samples])
    return tokens, n_chars, speaker


def batch_tensors(model: SurrogateModel, batch: Batch) -> BatchTensors:
    if not batch.samples:
        raise ValueError("batch is empty")
    if batch.patch_length < model.config.spec.n_fft:
        raise ValueError("patch_length must be at least n_fft")
    positions = batch.positions()
    waves = np.stack([crop_array(s.audio.samples, p, batch.patch_length)
                      for s, p in zip(batch.samples, positions)])
    tokens, n_chars, speaker = text_tensors(model, batch.samples)
    return BatchTensors(
        wave=torch.from_numpy(waves).to(model.dtype),
        tokens=tokens,
        n_chars=n_chars,
        full_len=torch.tensor([len(s.audio) for s in batch.samples]),
        position=torch.tensor(positions),
        speaker=speaker,
    )


# ---------------------------------------------------------------- losses


def _frame_chars(cfg: SurrogateConfig, n_frames: int, bt: BatchTensors) -> torch.Tensor:
    # uniform allocation of utterance time over characters, sampled at frame centres
    centres = bt.position[:, None] + torch.arange(n_frames)[None, :] * cfg.spec.hop + cfg.spec.n_fft // 2
    idx = torch.div(centres * bt.n_chars[:, None], bt.full_len[:, None], rounding_mode="floor")
    return torch.minimum(idx, bt.n_chars[:, None] - 1)


def _gather_frames(stats: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(stats, 2, idx[:, None, :].expand(-1, stats.shape[1], -1))


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p) -> torch.Tensor:
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))."""
    return (torch.log(sigma_p / sigma_q)
            + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sigma_p ** 2) - 0.5)


def _per_sample_mean(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).mean(dim=1)


def _noise(shape, seed: Union[int, Sequence[int]], dtype) -> torch.Tensor:
    """Standard normal noise; a sequence of seeds gives each batch row its own stream."""
    if isinstance(seed, (int, np.integer)):
        g = torch.Generator().manual_seed(int(seed))
        return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)
    if len(seed) != shape[0]:
        raise ValueError(f"{len(seed)} noise seeds for a batch of {shape[0]}")
    rows = [torch.randn(shape[1:], generator=torch.Generator().manual_seed(int(s)), dtype=torch.float64)
            for s in seed]
    return torch.stack(rows).to(dtype)


def loss_terms(
    model: SurrogateModel,
    bt: BatchTensors,
    target: Optional[torch.Tensor] = None,
    seed: Union[int, Sequence[int]] = 0,
    components: Sequence[str] = LOSS_NAMES,
    with_outputs: bool = False,
):
    """Per-sample loss components as tensors of shape ``(B,)``.

    ``bt.wave`` is the model input; ``target`` is the reference waveform for the
    reconstruction and feature-matching terms and defaults to the input.
    """
    cfg = model.config
    wave = bt.wave
    target = wave if target is None else target
    need_gen = any(c in components for c in ("recon", "kl", "adv_g", "fm")) or with_outputs
    out: dict[str, torch.Tensor] = {}

    h, mu_p, sigma_p = model.text_encoder(bt.tokens)
    g = model.speaker_vector(bt.speaker)
    if "dur" in components:
        mask = (torch.arange(bt.tokens.shape[1])[None, :] < bt.n_chars[:, None]).to(wave.dtype)
        target_logdur = torch.log(bt.full_len.to(wave.dtype) / cfg.spec.hop / bt.n_chars.to(wave.dtype))
        err = (model.duration(h, g) - target_logdur[:, None]) ** 2 * mask
        out["dur"] = err.sum(1) / mask.sum(1)

    x_hat = None
    if need_gen:
        lin = stft_magnitude(wave, cfg.spec)
        mu_q, sigma_q = model.posterior(lin, g)
        n_frames = mu_q.shape[-1]
        if "kl" in components:
            idx = _frame_chars(cfg, n_frames, bt)
            kl = gaussian_kl(mu_q, sigma_q, _gather_frames(mu_p, idx), _gather_frames(sigma_p, idx))
            out["kl"] = kl.sum(1).mean(1)
        z = mu_q + sigma_q * _noise(mu_q.shape, seed, mu_q.dtype)
        k = cfg.hops_per_window
        z = F.pad(z, (k // 2, k - 1 - k // 2), mode="replicate")
        x_hat = model.decoder(z, g)
        covered = x_hat.shape[-1]
        real = target[:, :covered]
        if "recon" in components:
            # L1 norm over mel bands, averaged over frames
            out["recon"] = (log_mel(real, cfg.spec) - log_mel(x_hat, cfg.spec)).abs().sum(-1).mean(-1)
        if "adv_g" in components or "fm" in components:
            fake_outs = model.discriminator(x_hat)
            if "adv_g" in components:
                out["adv_g"] = sum(_per_sample_mean((score - 1) ** 2) for score, _ in fake_outs)
            if "fm" in components:
                real_outs = model.discriminator(real)
                fm = 0
                for (_, rf), (_, ff) in zip(real_outs, fake_outs):
                    for a, b in zip(rf, ff):
                        fm = fm + _per_sample_mean((a - b).abs())
                out["fm"] = fm
    for name, value in out.items():
        if not torch.all(torch.isfinite(value)):
            raise NonFiniteLossError(f"loss component {name!r} is not finite")
    if with_outputs:
        return out, x_hat
    return out


def _bundle(terms: dict) -> LossBundle:
    return LossBundle(**{k: float(terms[k].detach().mean()) if k in terms else 0.0 for k in LOSS_NAMES})


def forward_losses(model: SurrogateModel, batch: Batch, mode: str = "train", seed: int = 0,
                   target: Optional[Sequence[Waveform]] = None) -> LossBundle:
    """Evaluate all five loss components on a batch.

    ``mode="protect"`` evaluates the generator with gradients disabled for the
    parameters; ``target`` optionally supplies reference waveforms (cropped the
    same way as the batch) for the reconstruction and feature-matching terms.
    """
    if mode not in ("train", "protect"):
        raise ValueError(f"mode must be 'train' or 'protect', got {mode!r}")
    bt = batch_tensors(model, batch)
    tgt = None
    if target is not None:
        tgt = torch.from_numpy(np.stack([
            crop_array(t.samples, p, batch.patch_length) for t, p in zip(target, batch.positions())
        ])).to(model.dtype)
    with torch.no_grad():
        return _bundle(loss_terms(model, bt, tgt, seed))


# ---------------------------------------------------------------- training


def discriminator_loss(model: SurrogateModel, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    loss = 0
    for (rs, _), (fs, _) in zip(model.discriminator(real), model.discriminator(fake)):
        loss = loss + ((rs - 1) ** 2).mean() + (fs ** 2).mean()
    return loss


class Trainer:
    """Holds optimizer state for repeated generator/discriminator updates."""

    def __init__(self, model: SurrogateModel, lr: float = 1e-3, seed: int = 0):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        self.model = model
        self.lr = lr
        self.seed = seed
        self.step_count = 0
        self.g_opt = torch.optim.Adam(list(model.generator_parameters()), lr=lr, betas=(0.8, 0.99))
        self.d_opt = torch.optim.Adam(model.discriminator.parameters(), lr=lr, betas=(0.8, 0.99))

    def step_tensors(self, bt: BatchTensors) -> LossBundle:
        model = self.model
        seed = self.seed * 1_000_003 + self.step_count
        self.step_count += 1
        terms, x_hat = loss_terms(model, bt, seed=seed, with_outputs=True)
        bundle = _bundle(terms)
        if bundle.total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"total loss {bundle.total:.3g} exceeds {DIVERGENCE_LIMIT:g}")
        if self.lr == 0:
            return bundle
        total = sum(t.mean() for t in terms.values())
        self.g_opt.zero_grad(set_to_none=True)
        total.backward()
        self.g_opt.step()
        d_loss = discriminator_loss(model, bt.wave[:, :x_hat.shape[-1]], x_hat.detach())
        self.d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        self.d_opt.step()
        return bundle

    def step(self, batch: Batch) -> LossBundle:
        return self.step_tensors(batch_tensors(self.model, batch))


_TRAINERS: "dict[int, Trainer]" = {}


def train_step(model: SurrogateModel, batch: Batch, lr: float) -> tuple[SurrogateModel, LossBundle]:
    """One generator and one discriminator update; optimizer state persists per model."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    trainer = _TRAINERS.get(id(model))
    if trainer is None or trainer.model is not model or trainer.lr != lr:
        trainer = Trainer(model, lr)
        _TRAINERS[id(model)] = trainer
    return model, trainer.step(batch)


def fit(
    model: SurrogateModel,
    samples: Sequence[SpeechSample],
    steps: int,
    batch_size: int = 15,
    lr: float = 1e-3,
    patch_length: int = 8192,
    position: int = 0,
    random_segment: bool = False,
    seed: int = 0,
    log_every: int = 0,
) -> list[LossBundle]:
    """Train on ``samples`` with windowed crops; returns the per-step losses."""
    if not samples:
        raise ValueError("no training samples")
    rng = np.random.default_rng(seed)
    trainer = Trainer(model, lr, seed)
    full = batch_tensors(model, Batch(list(samples), position, patch_length))
    history = []
    for step in range(steps):
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        idx.sort()
        if random_segment:
            pos = [int(rng.integers(0, max(1, len(samples[i].audio) - patch_length + 1))) for i in idx]
            bt = batch_tensors(model, Batch([samples[i] for i in idx], pos, patch_length))
        else:
            bt = full.select(idx)
        history.append(trainer.step_tensors(bt))
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d: %s", step + 1, {k: round(v, 4) for k, v in history[-1].as_dict().items()})
    return history


# ---------------------------------------------------------------- synthesis


def synthesize(model: SurrogateModel, text: str, speaker_id: Optional[str] = None, seed: int = 0,
               noise_scale: Optional[float] = None) -> Waveform:
    """Sample a waveform from the text-conditioned prior.

    Output length is the predicted hop-frame count times ``hop``.
    """
    cfg = model.config
    spk = model.speaker_index(speaker_id)
    tokens = torch.tensor([encode_text(text)])
    speaker = None if spk is None else torch.tensor([spk])
    scale = cfg.noise_scale if noise_scale is None else noise_scale
    with torch.no_grad():
        h, mu_p, sigma_p = model.text_encoder(tokens)
        durations = predicted_durations(model, text, speaker_id)
        k = cfg.hops_per_window
        hop_chars = np.repeat(np.arange(len(durations)), durations)
        n_frames = len(hop_chars) - k + 1
        idx = torch.from_numpy(hop_chars[k // 2:k // 2 + n_frames])[None, :]
        mu = _gather_frames(mu_p, idx)
        sigma = _gather_frames(sigma_p, idx)
        z = mu + sigma * _noise(mu.shape, seed, mu.dtype) * scale
        z = F.pad(z, (k // 2, k - 1 - k // 2), mode="replicate")
        audio = model.decoder(z, model.speaker_vector(speaker))[0].to(torch.float64).numpy()
    return Waveform(np.clip(audio, -1.0, 1.0), cfg.spec.sample_rate)


def predicted_durations(model: SurrogateModel, text: str, speaker_id: Optional[str] = None) -> np.ndarray:
    """Hop-frame durations per character, at least one each, padded to cover one window."""
    spk = model.speaker_index(speaker_id)
    tokens = torch.tensor([encode_text(text)])
    speaker = None if spk is None else torch.tensor([spk])
    with torch.no_grad():
        h, _, _ = model.text_encoder(tokens)
        logdur = model.duration(h, model.speaker_vector(speaker))[0].to(torch.float64).numpy()
    durations = np.maximum(1, np.round(np.exp(logdur))).astype(int)
    short = model.config.hops_per_window - durations.sum()
    if short > 0:
        durations[-1] += short
    return durations


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
