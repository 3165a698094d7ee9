"""Command-line entry point.

Every command accepts ``--config FILE`` (JSON) whose top level holds the global
keys ``seed``, ``workers`` and ``log_level`` plus one section named after the
command. Flags override the file, which overrides built-in defaults. Reports
go to ``--out`` as ``report.json`` next to ``timings.json`` and an
``artifacts.json`` listing every file written.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

logger = logging.getLogger("voiceguard")

GLOBAL_DEFAULTS = {"seed": 0, "workers": 1, "log_level": "INFO"}

COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "toy-corpus": {"out": None, "n": 32, "prefix": "utt"},
    "train-demo": {"out": None, "manifest": None, "n": 32, "steps": 200, "batch_size": 8, "lr": 2e-3,
                   "hidden_dim": 64, "patch_length": 8192, "log_every": 50},
    "protect": {"out": None, "manifest": None, "checkpoint": None, "method": "pop", "epsilon": 8 / 255,
                "iterations": 200, "step_size": None, "strategy": "fixed_patch", "patch_position": 0,
                "patch_length": 8192, "objective": ["recon"], "target": "clean", "batch_size": 16},
    "evaluate": {"out": None, "reference": None, "candidate": None, "transcriber": None},
    "robustness": {"out": None, "manifest": None, "pipeline": None},
    "select-speakers": {"out": None, "manifest": None, "reference": None, "reference_speaker": None, "k": 10,
                        "min_samples": 50},
    "experiment": {"out": None, "params": {}},
}
REQUIRED = {
    "toy-corpus": ("out",),
    "train-demo": ("out",),
    "protect": ("out", "manifest", "checkpoint"),
    "evaluate": ("out", "reference", "candidate"),
    "robustness": ("out", "manifest", "pipeline"),
    "select-speakers": ("out", "manifest", "reference"),
    "experiment": ("out",),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    workers: int = 1
    log_level: str = "INFO"
    section: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "workers": self.workers, "log_level": self.log_level,
                self.command: self.section}


def resolve_config(command: str, file_cfg: Optional[dict], flags: dict) -> RunConfig:
    """Merge defaults, the config file and explicit flags; reject unknown keys."""
    file_cfg = dict(file_cfg or {})
    allowed_top = set(GLOBAL_DEFAULTS) | set(COMMAND_DEFAULTS)
    unknown = sorted(set(file_cfg) - allowed_top)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    glob = {**GLOBAL_DEFAULTS, **{k: file_cfg[k] for k in GLOBAL_DEFAULTS if k in file_cfg}}
    section = dict(COMMAND_DEFAULTS[command])
    file_section = file_cfg.get(command) or {}
    if not isinstance(file_section, dict):
        raise ConfigError(f"config section {command!r} must be an object")
    bad = sorted(set(file_section) - set(section))
    if bad:
        raise ConfigError(f"unknown keys in section {command!r}: {', '.join(bad)}")
    section.update(file_section)
    for k, v in flags.items():
        if v is None:
            continue
        if k in GLOBAL_DEFAULTS:
            glob[k] = v
        else:
            section[k] = v
    missing = [k for k in REQUIRED[command] if section.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required setting(s) {', '.join(missing)}")
    if int(glob["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    return RunConfig(command, int(glob["seed"]), int(glob["workers"]), str(glob["log_level"]).upper(), section)


def _dump(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=False) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def _finish(out: Path, rc: RunConfig, report: dict, timings: dict, extra: list[Path] = ()) -> list[str]:
    report = {"config": rc.to_dict(), **report}
    paths = [_dump(out / "report.json", _finite(report)), _dump(out / "timings.json", timings), *extra]
    names = sorted(str(p.relative_to(out)) if p.is_relative_to(out) else str(p) for p in paths)
    _dump(out / "artifacts.json", names + ["artifacts.json"])
    return names


# ---------------------------------------------------------------- commands


def cmd_toy_corpus(rc: RunConfig) -> int:
    from .toy import toy_corpus, write_corpus
    c = rc.section
    out = Path(c["out"])
    samples = toy_corpus(int(c["n"]), rc.seed, prefix=c["prefix"])
    path = write_corpus(samples, out)
    _finish(out, rc, {"n_samples": len(samples), "manifest": path.name}, {}, [path])
    return 0


def cmd_train_demo(rc: RunConfig) -> int:
    import torch
    from .audio import iterate_dataset, load_manifest
    from .surrogate import SurrogateConfig, fit, init_surrogate, save_checkpoint
    from .toy import toy_corpus
    c = rc.section
    out = Path(c["out"])
    torch.set_num_threads(rc.workers)
    samples = list(iterate_dataset(load_manifest(c["manifest"]))) if c["manifest"] else toy_corpus(int(c["n"]), rc.seed)
    speakers = tuple(sorted({s.speaker_id for s in samples}))
    model = init_surrogate(SurrogateConfig(hidden_dim=int(c["hidden_dim"]), speakers=speakers), rc.seed)
    start = time.perf_counter()
    history = fit(model, samples, int(c["steps"]), batch_size=int(c["batch_size"]), lr=float(c["lr"]),
                  patch_length=int(c["patch_length"]), seed=rc.seed, log_every=int(c["log_every"]))
    elapsed = time.perf_counter() - start
    ckpt = out / "surrogate.pt"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    losses = [h.as_dict() for h in history]
    report = {"n_samples": len(samples), "speakers": list(speakers), "steps": len(losses),
              "first_losses": losses[0] if losses else None, "last_losses": losses[-1] if losses else None,
              "total_trace": [h["total"] for h in losses], "checkpoint": ckpt.name}
    _finish(out, rc, report, {"train": elapsed}, [ckpt])
    return 0


def cmd_protect(rc: RunConfig) -> int:
    import torch
    from .audio import load_manifest
    from .perturb import ProtectionConfig, protect_dataset
    from .surrogate import load_checkpoint
    c = rc.section
    out = Path(c["out"])
    torch.set_num_threads(1)
    pcfg = ProtectionConfig(epsilon=float(c["epsilon"]), iterations=int(c["iterations"]), step_size=c["step_size"],
                            strategy=c["strategy"], patch_position=int(c["patch_position"]),
                            patch_length=int(c["patch_length"]), objective=tuple(c["objective"]), seed=rc.seed,
                            target=c["target"])
    model = load_checkpoint(c["checkpoint"])
    manifest = load_manifest(c["manifest"])
    start = time.perf_counter()
    res = protect_dataset(model, manifest, pcfg, out, workers=rc.workers, batch_size=int(c["batch_size"]),
                          method=c["method"])
    timings = {"total": time.perf_counter() - start, "per_sample": res["timings"]}
    _finish(out, rc, {"protection": res["report"]}, timings, [out / "manifest.jsonl"])
    failures = res["report"]["failures"]
    if failures:
        logger.error("%d sample(s) failed", len(failures))
    return 1 if failures else 0


def cmd_evaluate(rc: RunConfig) -> int:
    from .audio import load_manifest
    from .metrics import SubprocessTranscriber, evaluate_pair_set
    c = rc.section
    out = Path(c["out"])
    transcriber = SubprocessTranscriber(c["transcriber"]) if c["transcriber"] else None
    start = time.perf_counter()
    res = evaluate_pair_set(load_manifest(c["reference"]), load_manifest(c["candidate"]), transcriber, rc.workers)
    _finish(out, rc, {"evaluation": res}, {"total": time.perf_counter() - start})
    return 0


def cmd_robustness(rc: RunConfig) -> int:
    from .robustness import apply_pipeline, load_pipeline
    c = rc.section
    out = Path(c["out"])
    specs = load_pipeline(c["pipeline"])
    start = time.perf_counter()
    summary = apply_pipeline(c["manifest"], specs, out, seed=rc.seed, workers=rc.workers)
    _finish(out, rc, {"pipeline": summary}, {"total": time.perf_counter() - start}, [out / "manifest.jsonl"])
    if summary["failures"]:
        logger.error("%d sample(s) failed", len(summary["failures"]))
    return 1 if summary["failures"] else 0


def cmd_select_speakers(rc: RunConfig) -> int:
    from .audio import iterate_dataset, load_manifest, load_wav
    from .speakers import embed_speaker, embed_waveforms, select_speakers
    c = rc.section
    out = Path(c["out"])
    start = time.perf_counter()
    if str(c["reference"]).endswith(".jsonl"):
        ref_samples = list(iterate_dataset(load_manifest(c["reference"])))
        if c["reference_speaker"] is not None:
            ref_samples = [s for s in ref_samples if s.speaker_id == c["reference_speaker"]]
        ref = embed_speaker(ref_samples)
    else:
        paths = c["reference"] if isinstance(c["reference"], list) else _csv(c["reference"])
        ref = embed_waveforms([load_wav(p) for p in paths], speaker_id=c["reference_speaker"] or "reference")
    ranked = select_speakers(load_manifest(c["manifest"]), ref, int(c["k"]), int(c["min_samples"]), workers=rc.workers)
    rows = [{"speaker_id": s, "similarity": sim, "n_samples": n} for s, sim, n in ranked]
    _finish(out, rc, {"reference_speaker": ref.speaker_id, "selected": rows}, {"total": time.perf_counter() - start})
    return 0


def cmd_experiment(rc: RunConfig) -> int:
    import torch
    from .experiment import ExperimentConfig, ExperimentError, format_table, run_experiment
    c = rc.section
    out = Path(c["out"])
    torch.set_num_threads(rc.workers)
    params = dict(c["params"])
    params["seed"] = rc.seed
    cfg = ExperimentConfig.from_dict(params)
    try:
        report, timings = run_experiment(cfg, progress=lambda stage, secs: logger.info("stage %s done in %.1fs",
                                                                                        stage, secs))
    except ExperimentError as exc:
        logger.error("%s", exc)
        _finish(out, rc, {"failed_stage": exc.stage, "error": str(exc), **exc.partial}, {})
        return 1
    table = out / "table.txt"
    out.mkdir(parents=True, exist_ok=True)
    table.write_text(format_table(report) + "\n")
    _finish(out, rc, {"experiment": report}, timings, [table])
    print(format_table(report))
    return 0


COMMANDS = {
    "toy-corpus": cmd_toy_corpus,
    "train-demo": cmd_train_demo,
    "protect": cmd_protect,
    "evaluate": cmd_evaluate,
    "robustness": cmd_robustness,
    "select-speakers": cmd_select_speakers,
    "experiment": cmd_experiment,
}


def _kv(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="voiceguard", description="Protect speech data against voice-cloning training.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy-corpus", parents=[common], help="write the synthetic toy corpus")
    s.add_argument("--n", type=int)
    s.add_argument("--prefix")

    s = sub.add_parser("train-demo", parents=[common], help="train a small surrogate and save a checkpoint")
    s.add_argument("--manifest", help="training manifest (default: built-in toy corpus)")
    s.add_argument("--n", type=int, help="toy corpus size")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--hidden-dim", dest="hidden_dim", type=int)

    s = sub.add_parser("protect", parents=[common], help="add protective perturbations to a dataset")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint", "--ckpt", dest="checkpoint")
    s.add_argument("--method", choices=["pop", "em", "random"])
    s.add_argument("--epsilon", type=float)
    s.add_argument("--iterations", "--iters", dest="iterations", type=int)
    s.add_argument("--step-size", dest="step_size", type=float)
    s.add_argument("--strategy", choices=["fixed_patch", "random_segment", "entire_segment", "fixed", "rsp", "esp"])
    s.add_argument("--patch-position", "--position", dest="patch_position", type=int)
    s.add_argument("--patch-length", "--patch-len", dest="patch_length", type=int)
    s.add_argument("--objective", type=_csv, help="comma-separated subset of recon,kl,dur,adv_g,fm")
    s.add_argument("--target", choices=["clean", "perturbed"])
    s.add_argument("--batch-size", dest="batch_size", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="score candidate audio against references")
    s.add_argument("--reference")
    s.add_argument("--candidate")
    s.add_argument("--transcriber", help="ASR command template containing {in}")

    s = sub.add_parser("robustness", parents=[common], help="apply a transform pipeline to a dataset")
    s.add_argument("--manifest")
    s.add_argument("--pipeline", help="JSONL file of transform specs")

    s = sub.add_parser("select-speakers", parents=[common], help="rank speakers by similarity to a reference")
    s.add_argument("--manifest")
    s.add_argument("--reference", help="reference WAVs (comma-separated) or a manifest (.jsonl)")
    s.add_argument("--reference-speaker", dest="reference_speaker", help="use only this speaker of the reference")
    s.add_argument("--k", type=int)
    s.add_argument("--min-samples", dest="min_samples", type=int)

    s = sub.add_parser("experiment", parents=[common], help="run the end-to-end unlearnability experiment")
    s.add_argument("--set", dest="overrides", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override an experiment parameter (value parsed as JSON when possible)")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "overrides")}
    try:
        file_cfg = json.loads(args.config.read_text()) if args.config else None
        if getattr(args, "overrides", None):
            base = dict(((file_cfg or {}).get("experiment") or {}).get("params", {}))
            base.update(dict(args.overrides))
            flags["params"] = base
        rc = resolve_config(args.command, file_cfg, flags)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"voiceguard: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=rc.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.info("resolved config: %s", json.dumps(rc.to_dict(), sort_keys=True, default=_json_default))
    try:
        return COMMANDS[rc.command](rc)
    except Exception as exc:
        logger.error("%s failed: %s: %s", rc.command, type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
