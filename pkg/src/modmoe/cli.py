"""Command-line pipeline: prepare -> tokenizer -> teacher -> distill -> router -> moe-train -> moe-eval, plus studies.

All artifacts live under ``--out``; each stage writes ``manifests/<stage>.json``
listing the config hash, seed, library versions and the files it produced.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corpus import LANGS, balance_corpus, by_language, corpus_stats, load_corpus, load_desk_corpus, save_corpus, \
    split_corpus
from .distill import DistillConfig, distill
from .experiments import (ALPHA_SETTINGS, curves_csv, fk_table_csv, run_alpha_study, run_forgetting_study,
                          run_loss_mode_study)
from .model import ModelConfig, TrainHyper, eval_windows, load_checkpoint, save_checkpoint, train_teacher
from .moe import (SETUPS, InferenceSettings, build_ple, evaluate_settings_grid, evaluate_system, grid_csv,
                  load_bundle, save_bundle, train_joint)
from .numerics.rng import Rng
from .router import Router, evaluate_router, router_split, train_router
from .tokenizer import Tokenizer, train_bpe

log = logging.getLogger("modmoe")

DEFAULTS: dict = {
    "corpus.path": None,
    "corpus.max_docs_per_lang": None,
    "corpus.val_fraction": 0.05,
    "tokenizer.vocab_size": 2048,
    "teacher.n_layers": 4,
    "teacher.n_heads": 4,
    "teacher.d_model": 128,
    "teacher.d_ff": 512,
    "teacher.context_len": 128,
    "teacher.steps": 300,
    "teacher.micro_batch": 8,
    "teacher.virtual_batch": 16,
    "teacher.lr": 3e-4,
    "teacher.min_lr": 3e-5,
    "teacher.warmup": 20,
    "teacher.weight_decay": 0.1,
    "teacher.clip": 1.0,
    "teacher.eval_every": 50,
    "teacher.eval_windows": 32,
    "student.n_layers": 2,
    "student.n_heads": 2,
    "student.d_model": 64,
    "student.d_ff": 256,
    "student.context_len": 128,
    "distill.langs": "en,fr,de,py",
    "distill.alpha_mode": "fixed",
    "distill.alpha_fixed": 0.5,
    "distill.alpha_start": 0.2,
    "distill.alpha_end": 0.8,
    "distill.loss_mode": "combined",
    "distill.alternation_period": 1,
    "distill.steps": 300,
    "distill.micro_batch": 8,
    "distill.lr": 3e-4,
    "distill.min_lr": 3e-5,
    "distill.warmup": 20,
    "distill.weight_decay": 0.1,
    "distill.clip": 1.0,
    "distill.eval_every": 50,
    "distill.eval_windows": 32,
    "router.trainer": "logreg_batch",
    "router.reg_lambda": 1e-4,
    "router.epochs": None,
    "router.test_fraction": 0.3,
    "moe.setup": "moe-ce",
    "moe.routable": "en,fr,de,py",
    "moe.use_common": True,
    "moe.eval_windows": 32,
    "study.per_phase_steps": 300,
}

TRAINING_COMMANDS = {"prepare", "tokenizer", "teacher", "distill", "router", "moe-train", "study"}


class CliError(Exception):
    pass


class MissingArtifact(CliError):
    def __init__(self, what: str):
        super().__init__(f"missing artifact: {what}")


# ---------------------------------------------------------------------------
# configuration


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise CliError(f"invalid value for config key {key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise CliError(f"invalid value for config key {key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise CliError(f"invalid value for config key {key}: expected a number, got {value!r}")
    if not isinstance(value, str):
        raise CliError(f"invalid value for config key {key}: expected a string, got {value!r}")
    return value


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise CliError(f"config file {path} is not valid JSON: {e.msg}") from None
        if not isinstance(raw, dict):
            raise CliError(f"config file {path} must hold a JSON object")
    for key, value in {**raw, **(overrides or {})}.items():
        if key not in DEFAULTS:
            raise CliError(f"invalid config key: {key}")
        cfg[key] = _coerce(key, value, DEFAULTS[key])
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _langs(text: str, key: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in LANGS]
    if bad:
        raise CliError(f"invalid value for {key}: unknown language {bad[0]!r}")
    return [l for l in LANGS if l in items]


def model_config(cfg: dict, role: str) -> ModelConfig:
    s = _section(cfg, role)
    return ModelConfig(vocab_size=cfg["tokenizer.vocab_size"], n_layers=s["n_layers"], n_heads=s["n_heads"],
                       d_model=s["d_model"], d_ff=s["d_ff"], context_len=s["context_len"])


def distill_config(cfg: dict) -> DistillConfig:
    s = _section(cfg, "distill")
    s.pop("langs")
    return DistillConfig(**s)


def train_hyper(cfg: dict) -> TrainHyper:
    s = _section(cfg, "teacher")
    return TrainHyper(**{k: s[k] for k in ("steps", "micro_batch", "virtual_batch", "lr", "min_lr", "warmup",
                                           "weight_decay", "clip", "eval_every", "eval_windows")})


# ---------------------------------------------------------------------------
# run context


class Run:
    def __init__(self, stage: str, args, cfg: dict):
        self.stage, self.cfg, self.seed = stage, cfg, args.seed
        self.out = Path(args.out)
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def require(self, rel: str, what: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(what)
        self.inputs.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.outputs.append(p)
        return p

    def produced(self, p: Path) -> None:
        if p.is_dir():
            self.outputs.extend(sorted(f for f in p.rglob("*") if f.is_file()))
        else:
            self.outputs.append(p)

    def rng_seed(self, name: str) -> int:
        return Rng(self.seed).substream(name).seed

    def finish(self, name: str | None = None) -> Path:
        rel = lambda p: p.relative_to(self.out).as_posix()
        manifest = {
            "stage": self.stage,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "versions": {"modmoe": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "inputs": sorted({rel(p) for p in self.inputs}),
            "outputs": sorted({rel(p) for p in self.outputs}),
        }
        p = self.path("manifests", f"{name or self.stage}.json")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return p

    # shared loaders
    def tokenizer(self) -> Tokenizer:
        return Tokenizer.load(self.require("tokenizer.json", "tokenizer"))

    def balanced(self):
        return load_corpus(self.require("data/train_balanced.jsonl", "balanced training corpus"))

    def val(self):
        return load_corpus(self.require("data/val.jsonl", "validation corpus"))

    def teacher(self):
        self.require("teacher/manifest.json", "teacher checkpoint")
        return load_checkpoint(self.require("teacher", "teacher checkpoint"))

    def router(self) -> Router:
        return Router.load(self.require("router/router.json", "router"))


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# stages


def cmd_prepare(run: Run, args) -> None:
    cfg = run.cfg
    if cfg["corpus.path"]:
        src = Path(cfg["corpus.path"])
        if not src.exists():
            raise MissingArtifact(f"corpus file {src}")
        docs = load_corpus(src)
        if cfg["corpus.max_docs_per_lang"]:
            docs = [d for g in by_language(docs).values() for d in g[:cfg["corpus.max_docs_per_lang"]]]
    else:
        docs = load_desk_corpus(max_docs_per_lang=cfg["corpus.max_docs_per_lang"])
    train, val = split_corpus(docs, cfg["corpus.val_fraction"], run.rng_seed("corpus"))
    for name, part in (("train", train), ("val", val)):
        p = run.path("data", f"{name}.jsonl")
        p.parent.mkdir(parents=True, exist_ok=True)
        save_corpus(part, p)
        run.produced(p)
    log.info("prepared %d training and %d validation documents", len(train), len(val))


def cmd_tokenizer(run: Run, args) -> None:
    train = load_corpus(run.require("data/train.jsonl", "prepared corpus"))
    tok = train_bpe(train, run.cfg["tokenizer.vocab_size"], seed=run.seed)
    p = run.path("tokenizer.json")
    tok.save(p)
    run.produced(p)
    balanced = balance_corpus(train, tok, run.rng_seed("corpus"))
    p = run.path("data", "train_balanced.jsonl")
    save_corpus(balanced, p)
    run.produced(p)
    run.write_text("data/stats.csv", corpus_stats(balanced, tok).to_csv())
    run.write_text("data/stats_raw.csv", corpus_stats(train, tok).to_csv())


def cmd_teacher(run: Run, args) -> None:
    tok, train, val = run.tokenizer(), run.balanced(), run.val()
    model, tlog = train_teacher(model_config(run.cfg, "teacher"), train, tok, train_hyper(run.cfg), run.seed, val,
                                log_fn=lambda r: log.debug("teacher step %d loss %.4f", r["step"], r["loss"]))
    run.produced(save_checkpoint(model, run.path("teacher"), seed=run.seed, step=len(tlog.steps)))
    run.write_text("teacher/train_log.csv", _rows_csv(
        ["step", "loss", "lr", "grad_norm"],
        [[r["step"], repr(r["loss"]), repr(r["lr"]), repr(r["grad_norm"])] for r in tlog.steps]))
    run.write_text("teacher/eval_log.csv", _rows_csv(
        ["step", *(f"val_{l}" for l in LANGS)],
        [[e["step"], *(repr(e.get(f"val_{l}", "")) for l in LANGS)] for e in tlog.evals]))


def cmd_distill(run: Run, args) -> None:
    teacher = run.teacher()
    tok, train, val = run.tokenizer(), run.balanced(), run.val()
    sc, dc = model_config(run.cfg, "student"), distill_config(run.cfg)
    groups, vgroups = by_language(train), by_language(val)
    for lang in _langs(run.cfg["distill.langs"], "distill.langs"):
        student, dlog = distill(teacher, sc, groups[lang], tok, dc, run.seed, vgroups[lang], phase_lang=lang)
        run.produced(save_checkpoint(student, run.path("students", lang), seed=run.seed, step=dc.steps))
        run.write_text(f"students/{lang}/metrics.csv", dlog.to_csv())
        run.write_text(f"students/{lang}/eval_log.csv", dlog.evals_csv())
        log.info("distilled %s student: final eval %s", lang, dlog.evals[-1] if dlog.evals else "n/a")


def cmd_router(run: Run, args) -> None:
    docs = load_corpus(run.require("data/train.jsonl", "prepared corpus")) + run.val()
    tr, te = router_split(docs, run.cfg["router.test_fraction"], run.rng_seed("corpus"))
    router = train_router(tr, run.cfg["router.trainer"], run.cfg["router.reg_lambda"], run.cfg["router.epochs"],
                          seed=run.rng_seed("sgd"))
    p = run.path("router", "router.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    router.save(p)
    run.produced(p)
    m = evaluate_router(router.classifier, router.tfidf, te)
    run.write_text("router/metrics.csv", m.to_csv())
    run.write_text("router/confusion.csv", m.confusion_csv())
    log.info("router accuracy %.4f on %d held-out documents", m.accuracy, int(m.confusion.sum()))


def _settings(cfg: dict) -> InferenceSettings:
    return InferenceSettings(frozenset(_langs(cfg["moe.routable"], "moe.routable")), cfg["moe.use_common"])


def cmd_moe_train(run: Run, args) -> None:
    setup = run.cfg["moe.setup"]
    if setup not in SETUPS:
        raise CliError(f"invalid value for moe.setup: {setup!r}")
    tok, router = run.tokenizer(), run.router()
    if setup == "ple":
        students = {}
        for lang in LANGS:
            run.require(f"students/{lang}/manifest.json", f"student checkpoint ({lang})")
            students[lang] = load_checkpoint(run.path("students", lang))
        system = build_ple(students, router, tok)
        jlog = None
    else:
        teacher = run.teacher()
        system, jlog = train_joint(teacher, model_config(run.cfg, "student"), run.balanced(), tok,
                                   distill_config(run.cfg), run.seed, setup, router)
    system.settings = InferenceSettings(system.settings.routable, system.common is not None)
    bundle = run.path("moe", setup)
    save_bundle(system, bundle, tokenizer_path=run.path("tokenizer.json"))
    run.produced(bundle)
    if jlog is not None:
        run.write_text(f"moe/{setup}/metrics.csv", jlog.to_csv())


def cmd_moe_eval(run: Run, args) -> None:
    setup = run.cfg["moe.setup"]
    tok = run.tokenizer()
    run.require(f"moe/{setup}/manifest.json", f"moe bundle ({setup})")
    system = load_bundle(run.path("moe", setup), tok)
    windows = eval_windows(run.val(), tok, system.experts["en"].model.config.context_len,
                           run.cfg["moe.eval_windows"])
    if args.settings_grid == "full":
        rows = evaluate_settings_grid(system, windows)
        run.write_text(f"moe/{setup}/eval/settings_grid.csv", grid_csv(rows))
        return
    s = _settings(run.cfg)
    if s.use_common and system.common is None:
        raise CliError(f"setup {setup} has no common expert; pass --use-common false")
    rows = evaluate_settings_grid(system, windows, [s])
    run.write_text(f"moe/{setup}/eval/{s.label}_{'ce' if s.use_common else 'noce'}.csv", grid_csv(rows))


def cmd_study(run: Run, args) -> None:
    teacher = run.teacher()
    tok, train, val = run.tokenizer(), run.balanced(), run.val()
    sc, dc = model_config(run.cfg, "student"), distill_config(run.cfg)
    names = ("forgetting", "alpha", "loss-mode") if args.study == "all" else (args.study,)
    for name in names:
        if name == "forgetting":
            recs = run_forgetting_study(teacher, sc, train, val, tok, dc, run.cfg["study.per_phase_steps"], run.seed)
            run.write_text("study/forgetting_fk.csv", fk_table_csv(recs))
            run.write_text("study/forgetting_curves.csv", curves_csv(recs))
        else:
            rep = run_alpha_study(teacher, sc, train, val, tok, ALPHA_SETTINGS, dc, run.seed) if name == "alpha" \
                else run_loss_mode_study(teacher, sc, train, val, tok, dc, run.seed)
            stem = name.replace("-", "_")
            run.write_text(f"study/{stem}.csv", rep.table_csv())
            run.write_text(f"study/{stem}_curves.csv", rep.curves_csv())
            run.write_text(f"study/{stem}_eval_curves.csv", rep.eval_curves_csv())
            run.write_text(f"study/{stem}.json", json.dumps(rep.annotations, indent=1, sort_keys=True) + "\n")


COMMANDS = {
    "prepare": cmd_prepare,
    "tokenizer": cmd_tokenizer,
    "teacher": cmd_teacher,
    "distill": cmd_distill,
    "router": cmd_router,
    "moe-train": cmd_moe_train,
    "moe-eval": cmd_moe_eval,
    "study": cmd_study,
}


# ---------------------------------------------------------------------------
# entry point


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config with dotted keys")
    common.add_argument("--seed", type=int, help="root seed (required for training stages)")
    common.add_argument("--out", default="modmoe-run", help="artifact directory (default: %(default)s)")
    common.add_argument("--vocab-size", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--alpha-mode", choices=("fixed", "adaptive"))
    common.add_argument("--loss-mode", choices=("combined", "alternating"))
    common.add_argument("--setup", choices=SETUPS)
    common.add_argument("--routable", help="comma-separated experts, e.g. en,py (empty string for none)")
    common.add_argument("--use-common", type=_bool)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="modmoe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"modmoe {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "moe-eval":
            sp.add_argument("--settings-grid", choices=("full",), help="evaluate every routable/common setting")
        if name == "study":
            sp.add_argument("study", choices=("forgetting", "alpha", "loss-mode", "all"))
    return p


def _overrides(args) -> dict:
    o = {}
    if args.vocab_size is not None:
        o["tokenizer.vocab_size"] = args.vocab_size
    if args.steps is not None:
        key = {"teacher": "teacher.steps", "study": "study.per_phase_steps"}.get(args.command, "distill.steps")
        o[key] = args.steps
    if args.alpha_mode:
        o["distill.alpha_mode"] = args.alpha_mode
    if args.loss_mode:
        o["distill.loss_mode"] = args.loss_mode
    if args.setup:
        o["moe.setup"] = args.setup
    if args.routable is not None:
        o["moe.routable"] = args.routable
    if args.use_common is not None:
        o["moe.use_common"] = args.use_common
    return o


def _limit_threads():
    n = os.environ.get("MODMOE_NUM_THREADS")
    if not n:
        return None
    try:
        k = int(n)
    except ValueError:
        raise CliError(f"MODMOE_NUM_THREADS must be a positive integer, got {n!r}") from None
    if k < 1:
        raise CliError(f"MODMOE_NUM_THREADS must be a positive integer, got {n!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command in TRAINING_COMMANDS and args.seed is None:
            raise CliError(f"--seed is required for '{args.command}'")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise CliError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, _overrides(args))
        limiter = _limit_threads()
        run = Run(args.command, args, cfg)
        COMMANDS[args.command](run, args)
        name = args.command
        if args.command in ("moe-train", "moe-eval"):
            name += "-" + cfg["moe.setup"]
        if args.command == "moe-eval":
            name += "-grid" if args.settings_grid else f"-{_settings(cfg).label}-{cfg['moe.use_common']}".lower()
        if args.command == "study":
            name += "-" + args.study
        manifest = run.finish(name)
        if limiter is not None:
            limiter.restore_original_limits()
        print(manifest)
        return 0
    except (CliError, ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, MissingArtifact) else 1


if __name__ == "__main__":
    sys.exit(main())
