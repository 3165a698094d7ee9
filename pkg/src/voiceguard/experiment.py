"""End-to-end unlearnability experiment on a desk-scale corpus.

Stages:

1. pretrain   train a base surrogate on a disjoint corpus (skipped when
              ``n_pretrain`` is 0, in which case every model starts from init)
2. clean      fine-tune a copy on the clean training set, synthesize, score
3. protect    craft noise for the training set with each method at equal budget
4. retrain    fine-tune a fresh copy of the base model per protected set
5. score      synthesize the held-out sentences and compare with ground truth

MCD is reported as a ratio over the clean-trained model, so only the ordering
of rows is meaningful.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .audio import SpeechSample, iterate_dataset, load_manifest
from .metrics import Transcriber, mcd_dtw, wer
from .perturb import (ProtectionConfig, ProtectionResult, error_minimizing_bilevel, generate_many, random_noise)
from .robustness import TransformSpec, apply_specs
from .surrogate import SurrogateConfig, SurrogateModel, fit, init_surrogate, synthesize
from .toy import ToySpeaker, DEFAULT_SPEAKERS, toy_corpus

logger = logging.getLogger(__name__)

METHODS = ("random_noise", "em", "pop")
PRETRAIN_SPEAKER = ToySpeaker("spk_base", 2, 0.9)


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, partial: dict):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.partial = partial


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 32
    n_eval: int = 8
    n_pretrain: int = 48
    hidden_dim: int = 64
    latent_dim: int = 16
    n_layers: int = 2
    pretrain_steps: int = 800
    train_steps: int = 200
    batch_size: int = 8
    lr: float = 2e-3
    epsilon: float = 8 / 255
    iterations: int = 200
    strategy: str = "fixed_patch"
    patch_position: int = 0
    patch_length: int = 8192
    target: str = "clean"
    noise_source: str = "clean"  # or "pretrained": the base model crafts the noise
    methods: tuple = METHODS
    ablation: tuple = ("kl", "dur")
    attacks: tuple = ("hybrid", "low_pass", "spectral_gate")
    em_rounds: int = 10
    em_train_steps: int = 10
    train_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.ablation = tuple(self.ablation)
        self.attacks = tuple(self.attacks)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.noise_source not in ("pretrained", "clean"):
            raise ValueError("noise_source must be 'pretrained' or 'clean'")
        if self.noise_source == "pretrained" and self.n_pretrain == 0 and self.train_manifest is None:
            raise ValueError("noise_source 'pretrained' needs a pretraining corpus (n_pretrain > 0)")
        for a in self.attacks:
            TransformSpec(a)
        self.protection()  # validates the budget fields

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("methods", "ablation", "attacks"):
            d[k] = list(d[k])
        return d

    def protection(self, objective: Sequence[str] = ("recon",)) -> ProtectionConfig:
        return ProtectionConfig(epsilon=self.epsilon, iterations=self.iterations, strategy=self.strategy,
                                patch_position=self.patch_position, patch_length=self.patch_length,
                                objective=tuple(objective), seed=self.seed, target=self.target)


def _corpora(cfg: ExperimentConfig):
    if cfg.train_manifest:
        train = list(iterate_dataset(load_manifest(cfg.train_manifest)))
        evals = list(iterate_dataset(load_manifest(cfg.eval_manifest))) if cfg.eval_manifest else train[:cfg.n_eval]
        pre = toy_corpus(cfg.n_pretrain, cfg.seed + 2, speakers=(PRETRAIN_SPEAKER,), prefix="base") \
            if cfg.n_pretrain else []
        return pre, train, evals
    pre = toy_corpus(cfg.n_pretrain, cfg.seed + 2, speakers=(PRETRAIN_SPEAKER,), prefix="base") if cfg.n_pretrain else []
    train = toy_corpus(cfg.n_train, cfg.seed, speakers=DEFAULT_SPEAKERS, prefix="train")
    evals = toy_corpus(cfg.n_eval, cfg.seed + 1, speakers=DEFAULT_SPEAKERS, prefix="eval")
    return pre, train, evals


def _protected(samples: Sequence[SpeechSample], results: Sequence[ProtectionResult]) -> list[SpeechSample]:
    return [SpeechSample(r.protected, s.text, s.speaker_id, s.id) for s, r in zip(samples, results)]


class _Runner:
    def __init__(self, cfg: ExperimentConfig, transcriber: Optional[Transcriber], progress: Optional[Callable]):
        self.cfg = cfg
        self.transcriber = transcriber
        self.progress = progress or (lambda stage, info: None)
        self.timings: dict[str, float] = {}
        self.report: dict = {"config": cfg.to_dict(), "stages_completed": []}

    def stage(self, name: str, fn, *args):
        start = time.perf_counter()
        try:
            out = fn(*args)
        except Exception as exc:
            raise ExperimentError(name, exc, self.report) from exc
        self.timings[name] = time.perf_counter() - start
        self.report["stages_completed"].append(name)
        self.progress(name, self.timings[name])
        return out

    def base_model(self, speakers: Sequence[str]) -> SurrogateModel:
        c = self.cfg
        scfg = SurrogateConfig(latent_dim=c.latent_dim, hidden_dim=c.hidden_dim, n_layers=c.n_layers,
                               speakers=tuple(speakers))
        return init_surrogate(scfg, c.seed)

    def train(self, base: SurrogateModel, samples: Sequence[SpeechSample], steps: int) -> SurrogateModel:
        model = copy.deepcopy(base)
        for p in model.parameters():
            p.requires_grad_(True)
        fit(model, samples, steps, batch_size=self.cfg.batch_size, lr=self.cfg.lr, patch_length=self.cfg.patch_length,
            position=self.cfg.patch_position, seed=self.cfg.seed)
        return model

    def score(self, model: SurrogateModel, evals: Sequence[SpeechSample]) -> dict:
        mcds, wers = [], []
        for i, s in enumerate(evals):
            fake = synthesize(model, s.text, s.speaker_id, seed=self.cfg.seed + i)
            mcds.append(mcd_dtw(s.audio, fake))
            if self.transcriber is not None:
                wers.append(wer(s.text, self.transcriber(fake)))
        out = {"mcd": float(np.mean(mcds)), "mcd_per_sample": [float(v) for v in mcds]}
        if wers:
            out["wer_percent"] = float(np.mean(wers))
        return out


def _noise_stats(train, results) -> dict:
    snrs = [r.snr_db for r in results]
    finite = [v for v in snrs if not math.isinf(v)]
    return {
        "snr_db": float(np.mean(finite)) if finite else None,
        "mse_sim": float(np.mean([r.mse_sim for r in results])),
        "linf": float(max(np.max(np.abs(r.delta)) for r in results)),
        "delta_all_zero": bool(all(not np.any(r.delta) for r in results)),
    }


def run_experiment(cfg: ExperimentConfig, transcriber: Optional[Transcriber] = None,
                   progress: Optional[Callable[[str, float], None]] = None) -> tuple[dict, dict]:
    """Run every stage; returns ``(report, timings)``.

    The report contains only seed-determined values, so reruns with the same
    config are identical; wall-clock times are returned separately.
    """
    run = _Runner(cfg, transcriber, progress)
    report = run.report
    pre, train, evals = run.stage("corpus", _corpora, cfg)
    speakers = sorted({s.speaker_id for s in (*pre, *train, *evals)})
    base = run.base_model(speakers)
    if pre:
        base = run.stage("pretrain", run.train, base, pre, cfg.pretrain_steps)
        report["pretrained"] = run.stage("score_pretrained", run.score, base, evals)

    clean_model = run.stage("train_clean", run.train, base, train, cfg.train_steps)
    clean = run.stage("score_clean", run.score, clean_model, evals)
    rows = [{"name": "clean", "method": "clean", **clean, "mcd_ratio": 1.0}]
    report["rows"] = rows
    surrogate = base if cfg.noise_source == "pretrained" and pre else clean_model
    for p in surrogate.parameters():
        p.requires_grad_(False)

    def retrain_row(name, method, protected_results, extra=None):
        stats = _noise_stats(train, protected_results)
        if stats["delta_all_zero"]:
            # identical data and seeds reproduce the clean model exactly
            scored = clean
        else:
            model = run.stage(f"train_{name}", run.train, base, _protected(train, protected_results), cfg.train_steps)
            scored = run.stage(f"score_{name}", run.score, model, evals)
        row = {"name": name, "method": method, **(extra or {}), **scored, "mcd_ratio": scored["mcd"] / clean["mcd"],
               **stats}
        return row

    pcfg = cfg.protection()
    results: dict[str, list[ProtectionResult]] = {}
    for method in cfg.methods:
        if method == "random_noise":
            res = run.stage("protect_random_noise", random_noise, train, pcfg)
        elif method == "em":
            em_cfg = dataclasses.replace(pcfg, iterations=cfg.iterations)
            res = run.stage("protect_em", error_minimizing_bilevel, surrogate, train, em_cfg, cfg.em_train_steps,
                            cfg.em_rounds, cfg.lr, cfg.batch_size)
        else:
            res = run.stage("protect_pop", generate_many, surrogate, train, pcfg)
            report["pop_descent"] = {
                "median_relative_reduction": float(np.median([1 - r.objective_best / r.trace[0] for r in res])),
                "all_best_le_initial": bool(all(r.objective_best <= r.trace[0] for r in res)),
            }
        results[method] = res
        rows.append(retrain_row(method, method, res))

    ablation = []
    if cfg.ablation and "pop" in results:
        ablation.append({"objective": "recon", **{k: v for k, v in rows[-1].items() if k not in ("name", "method")}})
        for comp in cfg.ablation:
            res = run.stage(f"protect_ablation_{comp}", generate_many, surrogate, train, cfg.protection((comp,)))
            row = retrain_row(f"ablation_{comp}", "pop", res, {"objective": comp})
            ablation.append({k: v for k, v in row.items() if k not in ("name", "method")})
    report["ablation"] = ablation

    attacks = []
    if cfg.attacks and "pop" in results:
        pop_rows = [r for r in rows if r["name"] == "pop"][0]
        for kind in cfg.attacks:
            spec = TransformSpec(kind, seed=cfg.seed)
            attacked = run.stage(f"attack_{kind}", lambda: [
                SpeechSample(apply_specs(s.audio, [spec], s.id, cfg.seed), s.text, s.speaker_id, s.id)
                for s in _protected(train, results["pop"])])
            model = run.stage(f"train_attack_{kind}", run.train, base, attacked, cfg.train_steps)
            scored = run.stage(f"score_attack_{kind}", run.score, model, evals)
            attacks.append({"attack": kind, **scored, "mcd_ratio": scored["mcd"] / clean["mcd"],
                            "unattacked_ratio": pop_rows["mcd_ratio"]})
    report["attacks"] = attacks
    return report, run.timings


def format_table(report: dict) -> str:
    """Plain-text table with one row per method, ablation objective and attack."""
    lines = [f"{'row':<24}{'MCD':>9}{'ratio':>8}{'SNR dB':>9}{'MSE sim':>9}"]

    def line(name, r):
        snr_v = r.get("snr_db")
        mse = r.get("mse_sim")
        lines.append(f"{name:<24}{r['mcd']:>9.3f}{r['mcd_ratio']:>8.3f}"
                     f"{'' if snr_v is None else f'{snr_v:.2f}':>9}{'' if mse is None else f'{mse:.3f}':>9}")

    for r in report.get("rows", []):
        line(r["name"], r)
    for r in report.get("ablation", []):
        line(f"objective {r['objective']}", r)
    for r in report.get("attacks", []):
        line(f"attack {r['attack']}", r)
    return "\n".join(lines)


def write_report(report: dict, timings: dict, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "report.json", "table": out_dir / "table.txt", "timings": out_dir / "timings.json"}
    paths["report"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    paths["table"].write_text(format_table(report) + "\n")
    paths["timings"].write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}
