"""Error-minimizing perturbations by projected sign-gradient descent.

The surrogate is frozen; only the additive noise is optimized. Three placement
strategies are supported:

* ``fixed_patch``: noise lives on ``[position, position + patch_length)``.
* ``random_segment``: a fresh window is drawn every iteration and the noise
  accumulates over every window visited.
* ``entire_segment``: the whole waveform is perturbed and evaluated at once.
"""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .audio import (ManifestEntry, Manifest, SpeechSample, Waveform, load_sample, save_wav, wav_subtype,
                    write_manifest)
from .metrics import mse_similarity, snr
from .surrogate import (LOSS_NAMES, Batch, BatchTensors, SurrogateModel, Trainer, loss_terms, text_tensors)

logger = logging.getLogger(__name__)

STRATEGIES = ("fixed_patch", "random_segment", "entire_segment")
STRATEGY_ALIASES = {"fixed": "fixed_patch", "rsp": "random_segment", "esp": "entire_segment"}
DEFAULT_EPSILON = 8 / 255


class ZeroGradientWarning(UserWarning):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ProtectionConfig:
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 200
    step_size: Optional[float] = None  # None -> epsilon / 10
    strategy: str = "fixed_patch"
    patch_position: int = 0
    patch_length: int = 8192
    objective: tuple[str, ...] = ("recon",)
    seed: int = 0
    target: str = "clean"  # reconstruction reference: the clean x, or the "perturbed" input x + delta

    def __post_init__(self):
        object.__setattr__(self, "strategy", STRATEGY_ALIASES.get(self.strategy, self.strategy))
        objective = (self.objective,) if isinstance(self.objective, str) else tuple(self.objective)
        object.__setattr__(self, "objective", objective)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not objective:
            raise ValueError("objective set is empty")
        unknown = set(objective) - set(LOSS_NAMES)
        if unknown:
            raise ValueError(f"unknown objective components {sorted(unknown)}; choose from {LOSS_NAMES}")
        # epsilon = 0 is accepted as an explicit no-op
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and self.epsilon > 0 and not 0 < self.step_size <= self.epsilon:
            raise ValueError(f"step size must lie in (0, epsilon], got {self.step_size}")
        if self.patch_position < 0:
            raise ValueError("patch_position must be >= 0")
        if self.target not in ("clean", "perturbed"):
            raise ValueError("target must be 'clean' or 'perturbed'")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size


@dataclass
class ProtectionResult:
    delta: np.ndarray
    protected: Waveform
    trace: list[float]
    snr_db: float
    position_used: int
    pad: int
    best_iteration: int = 0
    seconds: float = 0.0
    mse_sim: float = 100.0
    positions_visited: list[int] = field(default_factory=list)

    @property
    def objective_first(self) -> float:
        return self.trace[0]

    @property
    def objective_best(self) -> float:
        return self.trace[self.best_iteration]


def project_linf(delta, epsilon: float):
    """Clamp every entry to ``[-epsilon, epsilon]``."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if isinstance(delta, torch.Tensor):
        return delta.clamp(-epsilon, epsilon)
    return np.clip(delta, -epsilon, epsilon)


def pgd_step(delta, grad, alpha: float, epsilon: float, iteration: Optional[int] = None):
    """One descent step: ``project(delta - alpha * sign(grad))``."""
    if isinstance(grad, torch.Tensor):
        finite = bool(torch.all(torch.isfinite(grad)))
        sign = torch.sign(grad)
    else:
        finite = bool(np.all(np.isfinite(grad)))
        sign = np.sign(grad)
    if not finite:
        where = "" if iteration is None else f" at iteration {iteration}"
        raise NonFiniteGradientError(f"non-finite gradient{where}")
    return project_linf(delta - alpha * sign, epsilon)


# ---------------------------------------------------------------- engine


def _require_frozen(model: SurrogateModel):
    for p in model.parameters():
        p.requires_grad_(False)


def _sample_rngs(cfg: ProtectionConfig, samples: Sequence[SpeechSample]) -> list[np.random.Generator]:
    # one stream per sample so results do not depend on how samples are batched
    return [np.random.default_rng([cfg.seed, _stable_hash(s.id)]) for s in samples]


def _windows(cfg: ProtectionConfig, lengths: Sequence[int], rngs: Sequence[np.random.Generator]):
    """Window start and length per sample for one iteration."""
    if cfg.strategy == "entire_segment":
        return [0] * len(lengths), None
    if cfg.strategy == "fixed_patch":
        return [cfg.patch_position] * len(lengths), cfg.patch_length
    return [int(r.integers(0, max(1, n - cfg.patch_length + 1))) for n, r in zip(lengths, rngs)], cfg.patch_length


class _Problem:
    """Stacked tensors for a group of samples sharing one length."""

    def __init__(self, model: SurrogateModel, samples: Sequence[SpeechSample], cfg: ProtectionConfig):
        self.model = model
        self.cfg = cfg
        self.samples = list(samples)
        self.length = len(samples[0].audio)
        if any(len(s.audio) != self.length for s in samples):
            raise ValueError("samples in one problem must share a length")
        if cfg.strategy == "fixed_patch" and cfg.patch_position >= self.length:
            raise ValueError(f"patch_position {cfg.patch_position} is beyond the waveform end ({self.length} samples)")
        if cfg.strategy == "entire_segment":
            window = self.length
        else:
            window = cfg.patch_length
        if window < model.config.spec.n_fft:
            raise ValueError(f"protected window ({window} samples) is shorter than n_fft={model.config.spec.n_fft}")
        dtype = model.dtype
        self.dtype = dtype
        # noise and signal are kept in float64 so the budget holds exactly
        self.x = torch.from_numpy(np.stack([s.audio.samples for s in samples]))
        tokens, n_chars, speaker = text_tensors(model, samples)
        self.text = (tokens, n_chars, speaker)
        self.full_len = torch.full((len(samples),), self.length)
        # per-sample latent noise streams keep results independent of batching
        self.noise_seeds = [(int(cfg.seed) << 32) | _stable_hash(s.id) for s in samples]
        # support of delta: fixed_patch touches only its window; others may cover everything
        self.support = torch.zeros(self.length, dtype=torch.float64)
        if cfg.strategy == "fixed_patch":
            self.support[cfg.patch_position:cfg.patch_position + cfg.patch_length] = 1
        else:
            self.support[:] = 1

    def objective(self, delta: torch.Tensor, positions: list[int], window: Optional[int],
                  components: Sequence[str]) -> torch.Tensor:
        """Per-sample objective of ``x + delta`` evaluated on the given windows."""
        n = self.length if window is None else window
        inp = self.x + delta
        wave, target = [], []
        for b, p in enumerate(positions):
            seg = inp[b, p:p + n]
            ref = self.x[b, p:p + n]
            if seg.shape[0] < n:
                pad = n - seg.shape[0]
                seg = torch.nn.functional.pad(seg, (0, pad))
                ref = torch.nn.functional.pad(ref, (0, pad))
            wave.append(seg)
            target.append(ref)
        wave = torch.stack(wave).to(self.dtype)
        target = torch.stack(target).to(self.dtype) if self.cfg.target == "clean" else None
        tokens, n_chars, speaker = self.text
        bt = BatchTensors(wave, tokens, n_chars, self.full_len, torch.tensor(positions), speaker)
        terms = loss_terms(self.model, bt, target=target, seed=self.noise_seeds, components=components)
        return sum(terms[c] for c in components)


def _run(model: SurrogateModel, samples: Sequence[SpeechSample], cfg: ProtectionConfig,
         on_iteration: Optional[Callable[[int, np.ndarray], None]] = None) -> list[ProtectionResult]:
    """Optimize noise for samples of equal length; per-sample results are independent."""
    _require_frozen(model)
    start = time.perf_counter()
    prob = _Problem(model, samples, cfg)
    B, L = prob.x.shape
    rngs = _sample_rngs(cfg, samples)
    delta = torch.zeros(B, L, dtype=prob.x.dtype)
    best = delta.clone()
    best_val = torch.full((B,), math.inf, dtype=torch.float64)
    best_it = [0] * B
    traces: list[list[float]] = [[] for _ in range(B)]
    visited: list[list[int]] = [[] for _ in range(B)]
    components = list(cfg.objective)
    grad_free = all(c == "dur" for c in components)
    if grad_free:
        msg = "objective {dur} does not depend on the waveform; returning zero noise"
        warnings.warn(msg, ZeroGradientWarning, stacklevel=3)
        logger.warning(msg)
    alpha, eps = cfg.alpha, cfg.epsilon

    for it in range(cfg.iterations + 1):
        positions, window = _windows(cfg, [L] * B, rngs)
        for b in range(B):
            visited[b].append(positions[b])
        last = it == cfg.iterations
        d = delta.clone().requires_grad_(not (grad_free or last or eps == 0))
        values = prob.objective(d, positions, window, components)
        vals = values.detach().to(torch.float64)
        for b in range(B):
            traces[b].append(float(vals[b]))
            if vals[b] < best_val[b]:
                best_val[b] = vals[b]
                best[b] = delta[b]
                best_it[b] = it
        if last or grad_free or eps == 0:
            if not last and (grad_free or eps == 0):
                continue
            break
        grad, = torch.autograd.grad(values.sum(), d)
        mask = torch.zeros_like(delta)
        for b, p in enumerate(positions):
            n = L if window is None else window
            mask[b, p:p + n] = 1
        mask = mask * prob.support
        with torch.no_grad():
            delta = pgd_step(delta, grad * mask, alpha, eps, iteration=it) * mask + delta * (1 - mask)
        if on_iteration is not None:
            on_iteration(it, delta.detach().numpy())

    elapsed = (time.perf_counter() - start) / B
    results = []
    for b, s in enumerate(samples):
        dlt = best[b].numpy().copy()
        protected = Waveform.clipped(s.audio.samples + dlt, s.audio.sample_rate)
        pad = 0
        if cfg.strategy == "fixed_patch":
            pad = max(0, cfg.patch_position + cfg.patch_length - L)
        results.append(ProtectionResult(
            delta=dlt,
            protected=protected,
            trace=traces[b],
            snr_db=snr(s.audio, protected) if np.any(s.audio.samples) else math.nan,
            position_used=positions_used(cfg, visited[b][:len(traces[b])]),
            pad=pad,
            best_iteration=best_it[b],
            seconds=elapsed,
            mse_sim=mse_similarity(s.audio, protected),
            positions_visited=visited[b] if cfg.strategy == "random_segment" else [],
        ))
    return results


def positions_used(cfg: ProtectionConfig, visited: list[int]) -> int:
    if cfg.strategy == "fixed_patch":
        return cfg.patch_position
    if cfg.strategy == "entire_segment":
        return 0
    return min(visited) if visited else 0


def generate(model: SurrogateModel, sample: SpeechSample, cfg: ProtectionConfig,
             on_iteration: Optional[Callable[[int, np.ndarray], None]] = None) -> ProtectionResult:
    """Craft error-minimizing noise for one sample against a frozen surrogate.

    Runs ``cfg.iterations`` signed-gradient steps on the selected objective
    components and returns the iterate with the lowest objective; ``trace``
    holds the objective before each step plus the final iterate.
    """
    return _run(model, [sample], cfg, on_iteration)[0]


def generate_many(model: SurrogateModel, samples: Sequence[SpeechSample], cfg: ProtectionConfig,
                  batch_size: int = 16) -> list[ProtectionResult]:
    """Batch equal-length samples together; output order follows input order."""
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.audio), []).append(i)
    out: list[Optional[ProtectionResult]] = [None] * len(samples)
    for idx in by_len.values():
        for k in range(0, len(idx), batch_size):
            chunk = idx[k:k + batch_size]
            for i, r in zip(chunk, _run(model, [samples[i] for i in chunk], cfg)):
                out[i] = r
    return out


# ---------------------------------------------------------------- baselines


def random_noise(samples: Sequence[SpeechSample], cfg: ProtectionConfig, mode: str = "gaussian") -> list[ProtectionResult]:
    """Unoptimized noise in the same l-inf ball and region as ``cfg`` would use."""
    out = []
    for s in samples:
        rng = np.random.default_rng([cfg.seed, _stable_hash(s.id)])
        n = len(s.audio)
        if mode == "gaussian":
            noise = np.clip(rng.normal(0.0, cfg.epsilon, n), -cfg.epsilon, cfg.epsilon)
        elif mode == "uniform":
            noise = rng.uniform(-cfg.epsilon, cfg.epsilon, n)
        else:
            raise ValueError(f"unknown random noise mode {mode!r}")
        if cfg.strategy == "fixed_patch":
            support = np.zeros(n)
            support[cfg.patch_position:cfg.patch_position + cfg.patch_length] = 1
            noise = noise * support
        protected = Waveform.clipped(s.audio.samples + noise, s.audio.sample_rate)
        out.append(ProtectionResult(noise, protected, [], snr(s.audio, protected), cfg.patch_position, 0,
                                    mse_sim=mse_similarity(s.audio, protected)))
    return out


def error_minimizing_bilevel(model: SurrogateModel, samples: Sequence[SpeechSample], cfg: ProtectionConfig,
                             train_steps: int = 10, rounds: int = 10, lr: float = 1e-3, batch_size: int = 15,
                             objective: Sequence[str] = LOSS_NAMES) -> list[ProtectionResult]:
    """Bi-level error-minimizing baseline.

    Alternates ``train_steps`` surrogate updates on the currently protected
    data with ``iterations / rounds`` noise steps on the full objective. The
    caller's model is left untouched.
    """
    work = copy.deepcopy(model)
    for p in work.parameters():
        p.requires_grad_(True)
    trainer = Trainer(work, lr, cfg.seed)
    per_round = max(1, cfg.iterations // rounds)
    noise_cfg = replace(cfg, iterations=per_round, objective=tuple(objective))
    current = list(samples)
    deltas = [np.zeros(len(s.audio)) for s in samples]
    rng = np.random.default_rng(cfg.seed)
    traces: list[list[float]] = [[] for _ in samples]
    start = time.perf_counter()
    for r in range(rounds):
        for p in work.parameters():
            p.requires_grad_(True)
        for _ in range(train_steps):
            idx = np.sort(rng.choice(len(current), size=min(batch_size, len(current)), replace=False))
            trainer.step(Batch([current[i] for i in idx], cfg.patch_position, cfg.patch_length))
        work.zero_grad(set_to_none=True)
        # continue from the accumulated noise by protecting the clean sample with a warm start
        results = _warm_start_round(work, samples, deltas, replace(noise_cfg, seed=cfg.seed + r))
        for i, res in enumerate(results):
            deltas[i] = res.delta
            traces[i].extend(res.trace)
        current = [SpeechSample(Waveform.clipped(s.audio.samples + d, s.audio.sample_rate), s.text, s.speaker_id, s.id)
                   for s, d in zip(samples, deltas)]
    elapsed = (time.perf_counter() - start) / max(1, len(samples))
    out = []
    for s, d, tr in zip(samples, deltas, traces):
        protected = Waveform.clipped(s.audio.samples + d, s.audio.sample_rate)
        out.append(ProtectionResult(d, protected, tr, snr(s.audio, protected), cfg.patch_position, 0,
                                    best_iteration=int(np.argmin(tr)) if tr else 0, seconds=elapsed,
                                    mse_sim=mse_similarity(s.audio, protected)))
    return out


def _warm_start_round(model, samples, deltas, cfg):
    """One PGD round per sample starting from its accumulated noise."""
    return [_run_with_offset(model, s, d0, cfg) for s, d0 in zip(samples, deltas)]


def _run_with_offset(model, sample, delta0, cfg):
    _require_frozen(model)
    prob = _Problem(model, [sample], cfg)
    rngs = _sample_rngs(cfg, [sample])
    L = prob.length
    delta = torch.from_numpy(delta0[None, :].astype(np.float64))
    best, best_val, trace = delta.clone(), math.inf, []
    components = list(cfg.objective)
    for it in range(cfg.iterations + 1):
        positions, window = _windows(cfg, [L], rngs)
        last = it == cfg.iterations
        d = delta.clone().requires_grad_(not last)
        val = prob.objective(d, positions, window, components)
        v = float(val.detach()[0])
        trace.append(v)
        if v < best_val:
            best_val, best = v, delta.clone()
        if last:
            break
        grad, = torch.autograd.grad(val.sum(), d)
        n = L if window is None else window
        mask = torch.zeros_like(delta)
        mask[0, positions[0]:positions[0] + n] = 1
        mask = mask * prob.support
        with torch.no_grad():
            delta = pgd_step(delta, grad * mask, cfg.alpha, cfg.epsilon, iteration=it) * mask + delta * (1 - mask)
    dlt = best[0].numpy().copy()
    protected = Waveform.clipped(sample.audio.samples + dlt, sample.audio.sample_rate)
    return ProtectionResult(dlt, protected, trace, snr(sample.audio, protected), cfg.patch_position, 0)


def _stable_hash(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode("utf-8"))


# ---------------------------------------------------------------- datasets


def protect_dataset(model: SurrogateModel, manifest: Manifest, cfg: ProtectionConfig, out_dir,
                    workers: int = 1, batch_size: int = 16, method: str = "pop") -> dict:
    """Protect every sample of ``manifest`` and write WAVs plus a mirrored manifest.

    ``method`` is ``pop`` (frozen-surrogate PGD), ``em`` (bi-level baseline) or
    ``random`` (unoptimized noise). Output WAVs keep the input file names and
    encodings. The returned report has one row per sample; wall-clock timings go
    to a separate ``timings`` mapping so reports are reproducible.
    """
    out_dir = Path(out_dir)
    samples, failures = [], []
    for e in manifest.entries:
        try:
            samples.append(load_sample(manifest, e))
        except Exception as exc:
            logger.error("sample %s failed to load: %s", e.id, exc)
            failures.append({"id": e.id, "error": f"{type(exc).__name__}: {exc}"})
    entry_by_id = {e.id: e for e in manifest.entries}

    if method == "random":
        results = random_noise(samples, cfg)
    elif method == "em":
        results = error_minimizing_bilevel(model, samples, cfg)
    elif method == "pop":
        results = _protect_groups(model, samples, cfg, workers, batch_size, failures)
    else:
        raise ValueError(f"unknown protection method {method!r}")

    rows, timings, entries = [], {}, []
    for s, r in zip(samples, results):
        if r is None:
            continue
        src_entry = entry_by_id[s.id]
        rel = src_entry.audio_path
        if Path(rel).is_absolute():
            rel = f"wavs/{Path(rel).name}"
        save_wav(out_dir / rel, r.protected, wav_subtype(manifest.resolve(src_entry)))
        entries.append(ManifestEntry(rel, s.text, s.speaker_id, s.id))
        rows.append({"id": s.id, "snr_db": None if math.isinf(r.snr_db) else r.snr_db,
                     "snr_infinite": math.isinf(r.snr_db), "mse_sim": r.mse_sim,
                     "obj_first": r.trace[0] if r.trace else None,
                     "obj_best": r.objective_best if r.trace else None,
                     "best_iteration": r.best_iteration, "position_used": r.position_used, "pad": r.pad})
        timings[s.id] = r.seconds
    write_manifest(out_dir / "manifest.jsonl", entries, manifest.sample_rate)
    finite = [row["snr_db"] for row in rows if row["snr_db"] is not None]
    summary = {
        "method": method,
        "config": {**{k: v for k, v in cfg.__dict__.items()}, "objective": list(cfg.objective), "alpha": cfg.alpha},
        "rows": rows,
        "mean_snr_db": float(np.mean(finite)) if finite else None,
        "mean_mse_sim": float(np.mean([row["mse_sim"] for row in rows])) if rows else None,
        "failures": failures,
    }
    return {"report": summary, "timings": timings}


def _protect_groups(model, samples, cfg, workers, batch_size, failures):
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_len.setdefault(len(s.audio), []).append(i)
    chunks = [idx[k:k + batch_size] for idx in by_len.values() for k in range(0, len(idx), batch_size)]
    results: list[Optional[ProtectionResult]] = [None] * len(samples)

    def run(chunk):
        try:
            return chunk, _run(model, [samples[i] for i in chunk], cfg), None
        except Exception as exc:
            return chunk, None, exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for chunk, res, exc in pool.map(run, chunks):
            if exc is not None:
                for i in chunk:
                    logger.error("sample %s failed: %s", samples[i].id, exc)
                    failures.append({"id": samples[i].id, "error": f"{type(exc).__name__}: {exc}"})
                continue
            for i, r in zip(chunk, res):
                results[i] = r
    return results
