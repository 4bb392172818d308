"""Modular mixtures of language experts: PLE, JEET and MoE-CE.

* PLE: four independently distilled students, frozen, behind the router.
* JEET: four students trained together on language batches, sharing one
  token-embedding table.
* MoE-CE: JEET plus a common expert that trains on every batch and, at
  inference, is averaged (in logit space) with the routed expert.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import LANGS, Document, by_language, make_batches
from .distill import DistillConfig, DistillLog, check_compatible, kd_losses, lr_schedule, teacher_logits
from .model import (ModelConfig, TrainingDiverged, TransformerLM, load_checkpoint, nll_from_logits,
                    save_checkpoint)
from .numerics import Rng, Tensor
from .router import COMMON, Router, RoutingDecision, decide
from .tokenizer import Tokenizer

SETUPS = ("ple", "jeet", "moe-ce")
BUNDLE_FORMAT = "modmoe-bundle-1"


class MoEError(ValueError):
    pass


@dataclass
class ExpertSlot:
    lang: str
    model: TransformerLM
    frozen: bool = False
    embedding_source: str = "owned"   # owned | shared


@dataclass(frozen=True)
class InferenceSettings:
    routable: frozenset = frozenset(LANGS)
    use_common: bool = False

    def __post_init__(self):
        object.__setattr__(self, "routable", frozenset(self.routable))
        bad = self.routable - set(LANGS)
        if bad:
            raise MoEError(f"unknown experts in routable set: {sorted(bad)}")
        if not self.routable and not self.use_common:
            raise MoEError("inference needs at least one routable expert or the common expert")

    @property
    def label(self) -> str:
        return "+".join(l for l in LANGS if l in self.routable) or "none"


def settings_grid() -> list[InferenceSettings]:
    """Full set, each language with Python, each singleton and the empty set; with and without CE."""
    subsets = [LANGS, ("en", "py"), ("fr", "py"), ("de", "py"), *((l,) for l in LANGS), ()]
    grid = []
    for s in subsets:
        for use_common in (True, False):
            if s or use_common:
                grid.append(InferenceSettings(frozenset(s), use_common))
    return grid


@dataclass
class MoESystem:
    setup: str
    experts: dict[str, ExpertSlot]
    router: Router | None = None
    common: ExpertSlot | None = None
    shared_embedding: Tensor | None = None
    settings: InferenceSettings = field(default_factory=InferenceSettings)
    tokenizer: Tokenizer | None = None

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise MoEError(f"unknown setup {self.setup!r}")
        if sorted(self.experts) != sorted(LANGS):
            raise MoEError(f"system needs one expert per language, got {sorted(self.experts)}")
        shared = self.shared_embedding is not None
        if self.setup == "ple" and (shared or self.common):
            raise MoEError("PLE has neither a shared embedding nor a common expert")
        if self.setup == "jeet" and (not shared or self.common):
            raise MoEError("JEET has a shared embedding and no common expert")
        if self.setup == "moe-ce" and not (shared and self.common):
            raise MoEError("MoE-CE needs a shared embedding and a common expert")

    def slots(self) -> list[ExpertSlot]:
        return [self.experts[l] for l in LANGS] + ([self.common] if self.common else [])

    def slot(self, name: str) -> ExpertSlot:
        return self.common if name == COMMON else self.experts[name]

    def check_settings(self, settings: InferenceSettings) -> None:
        if settings.use_common and self.common is None:
            raise MoEError(f"setup {self.setup} has no common expert")

    def parameter_hashes(self) -> dict[str, str]:
        """SHA-256 of each slot's non-shared parameters, plus the shared embedding if any."""
        out = {}
        for s in self.slots():
            h = hashlib.sha256()
            for name, p in s.model.named_parameters():
                if name == "wte" and s.embedding_source == "shared":
                    continue
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
            out[s.lang] = h.hexdigest()
        if self.shared_embedding is not None:
            out["shared_wte"] = hashlib.sha256(np.ascontiguousarray(self.shared_embedding.data).tobytes()).hexdigest()
        return out

    def trainable_parameters(self) -> list[Tensor]:
        seen, out = set(), []
        for s in self.slots():
            if s.frozen:
                continue
            for p in s.model.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out


def freeze(model: TransformerLM) -> None:
    """Make parameters read-only: any later in-place update raises."""
    for p in model.parameters():
        p.requires_grad = False
        p.grad = None
        p.data.flags.writeable = False


def combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise mean of two logit arrays (symmetric in its arguments)."""
    return (a + b) * a.dtype.type(0.5)


# ---------------------------------------------------------------------------
# assembly and training


def build_ple(students: Mapping[str, TransformerLM], router: Router | None = None,
              tokenizer: Tokenizer | None = None) -> MoESystem:
    vocab = {m.config.vocab_size for m in students.values()}
    if len(vocab) != 1:
        raise MoEError(f"students disagree on vocab size: {sorted(vocab)}")
    if tokenizer is not None and tokenizer.vocab_size not in vocab:
        raise MoEError("tokenizer vocab does not match the students")
    for m in students.values():
        freeze(m)
    experts = {l: ExpertSlot(l, students[l], frozen=True) for l in LANGS if l in students}
    return MoESystem("ple", experts, router, tokenizer=tokenizer)


def init_joint_system(student_config: ModelConfig, setup: str, seed: int, router: Router | None = None,
                      tokenizer: Tokenizer | None = None) -> MoESystem:
    if setup not in ("jeet", "moe-ce"):
        raise MoEError(f"joint training applies to jeet and moe-ce, not {setup!r}")
    root = Rng(seed).substream("init")
    wte = Tensor(root.substream("shared_wte").normal((student_config.vocab_size, student_config.d_model), 0.02,
                                                     nx.get_dtype()), requires_grad=True, name="wte")
    experts = {l: ExpertSlot(l, TransformerLM(student_config, root.substream(f"expert/{l}"), shared_wte=wte),
                             embedding_source="shared") for l in LANGS}
    common = None
    if setup == "moe-ce":
        common = ExpertSlot(COMMON, TransformerLM(student_config, root.substream("expert/common"), shared_wte=wte),
                            embedding_source="shared")
    return MoESystem(setup, experts, router, common=common, shared_embedding=wte,
                     settings=InferenceSettings(use_common=common is not None), tokenizer=tokenizer)


class JointTrainer:
    """Round-robin language-batched distillation for JEET and MoE-CE.

    Each call to :meth:`step` draws the next batch of one language, updates
    that language's expert and the shared embedding (and the common expert,
    when present), and leaves every other expert untouched.
    """

    def __init__(self, system: MoESystem, teacher: TransformerLM, docs: Sequence[Document],
                 tokenizer: Tokenizer, cfg: DistillConfig, seed: int, steps_per_expert: int | None = None):
        self.system, self.teacher, self.cfg = system, teacher, cfg
        self.steps_per_expert = steps_per_expert or cfg.steps
        ctx = system.experts["en"].model.config.context_len
        groups = by_language(docs)
        missing = [l for l in LANGS if not groups[l]]
        if missing:
            raise MoEError("missing language: " + ", ".join(missing))
        root = Rng(seed)
        self.streams = {l: make_batches(groups[l], tokenizer, ctx, cfg.micro_batch, mode="per_language",
                                        seed=root.substream(f"batching/{l}").seed, epochs=None, drop_last=True)
                        for l in LANGS}
        self.opt = nx.AdamW(system.trainable_parameters(), lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)
        self.rounds = {l: 0 for l in LANGS}
        self.log = DistillLog()
        self.global_step = 0

    def step(self, lang: str) -> dict:
        sysm, cfg = self.system, self.cfg
        batch = next(self.streams[lang])
        r = min(self.rounds[lang], self.steps_per_expert)
        t_logits = teacher_logits(self.teacher, batch.tokens)
        for p in self.opt.params:
            p.grad = None
        expert = sysm.experts[lang].model
        obj, lm, kd, alpha = kd_losses(expert, t_logits, batch, cfg, r, self.steps_per_expert)
        rec = {"step": self.global_step, "loss_lm": lm, "loss_kd": kd, "loss_total": float(obj.data),
               "alpha": alpha, "phase_lang": lang}
        if sysm.common is not None:
            c_obj, *_ = kd_losses(sysm.common.model, t_logits, batch, cfg, r, self.steps_per_expert)
            obj = nx.add(obj, c_obj)
            rec["loss_common"] = float(c_obj.data)
        if not np.isfinite(float(obj.data)):
            raise TrainingDiverged(f"joint training diverged at step {self.global_step}")
        nx.backward(obj)
        nx.clip_grad_norm(self.opt.params, cfg.clip)
        self.opt.step(lr_schedule(cfg, r, self.steps_per_expert))
        self.rounds[lang] += 1
        self.global_step += 1
        self.log.steps.append(rec)
        return rec

    def run(self) -> DistillLog:
        for _ in range(self.steps_per_expert):
            for lang in LANGS:
                self.step(lang)
        return self.log


def train_joint(teacher: TransformerLM, student_config: ModelConfig, docs: Sequence[Document],
                tokenizer: Tokenizer, cfg: DistillConfig | None = None, seed: int = 0, setup: str = "jeet",
                router: Router | None = None) -> tuple[MoESystem, DistillLog]:
    cfg = cfg or DistillConfig()
    check_compatible(teacher, student_config)
    system = init_joint_system(student_config, setup, seed, router, tokenizer)
    trainer = JointTrainer(system, teacher, docs, tokenizer, cfg, seed)
    return system, trainer.run()


def train_jeet(teacher, student_config, docs, tokenizer, cfg=None, seed=0, router=None):
    return train_joint(teacher, student_config, docs, tokenizer, cfg, seed, "jeet", router)


def train_moe_ce(teacher, student_config, docs, tokenizer, cfg=None, seed=0, router=None):
    return train_joint(teacher, student_config, docs, tokenizer, cfg, seed, "moe-ce", router)


# ---------------------------------------------------------------------------
# inference


def _single_logits(model: TransformerLM, tokens: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        return model.forward(tokens[None, :]).data[0]


def _texts(system: MoESystem, tokens: np.ndarray, mask: np.ndarray | None) -> list[str]:
    if system.tokenizer is None:
        raise MoEError("routing needs a tokenizer to recover the input text")
    mask = np.ones(tokens.shape, dtype=bool) if mask is None else mask
    return [system.tokenizer.decode(t[m]) for t, m in zip(tokens, mask)]


def route_batch(system: MoESystem, tokens: np.ndarray, settings: InferenceSettings, mask=None,
                true_langs: Sequence[str] | None = None) -> list[RoutingDecision]:
    """Routing decisions for each row; ``true_langs``, when given, replace the router as an oracle."""
    system.check_settings(settings)
    if true_langs is not None:
        P = np.array([[1.0 if c == l else 0.0 for c in LANGS] for l in true_langs])
        preds = list(true_langs)
    elif system.router is None:
        raise MoEError("system has no router; pass true_langs for oracle routing")
    else:
        preds, P = system.router.predict_many(_texts(system, tokens, mask))
    return [decide(p, row, settings.routable, settings.use_common) for p, row in zip(preds, P)]


def _logits_for(system: MoESystem, tokens: np.ndarray, decision: RoutingDecision,
                settings: InferenceSettings) -> np.ndarray:
    out = _single_logits(system.slot(decision.expert).model, tokens)
    if decision.expert != COMMON and settings.use_common:
        out = combine(_single_logits(system.common.model, tokens), out)
    return out


def moe_infer(system: MoESystem, tokens, settings: InferenceSettings | None = None, mask=None,
              true_langs: Sequence[str] | None = None) -> tuple[list[np.ndarray], list[RoutingDecision]]:
    """Per-sequence logits for a (possibly mixed-language) batch.

    Each row is routed on its own and run through its expert alone, so the
    result does not depend on which other rows share the batch.
    """
    settings = settings or system.settings
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    decisions = route_batch(system, tokens, settings, mask, true_langs)
    return [_logits_for(system, t, d, settings) for t, d in zip(tokens, decisions)], decisions


@dataclass
class WindowScore:
    lang: str
    decision: RoutingDecision
    nll: float
    count: int


def score_windows(system: MoESystem, windows: Mapping[str, tuple[np.ndarray, np.ndarray]],
                  settings: InferenceSettings | None = None, oracle: bool = False) -> list[WindowScore]:
    settings = settings or system.settings
    out = []
    for lang, (toks, mask) in windows.items():
        decisions = route_batch(system, toks, settings, mask, [lang] * len(toks) if oracle else None)
        for t, m, d in zip(toks, mask, decisions):
            s, c = nll_from_logits(_logits_for(system, t, d, settings), t, m)
            out.append(WindowScore(lang, d, s, c))
    return out


def _aggregate(scores: Iterable[WindowScore]) -> dict[str, float]:
    tot: dict[str, list[float]] = {}
    for s in scores:
        acc = tot.setdefault(s.lang, [0.0, 0])
        acc[0] += s.nll
        acc[1] += s.count
    return {l: tot[l][0] / tot[l][1] for l in LANGS if l in tot}


def evaluate_system(system: MoESystem, windows, settings: InferenceSettings | None = None,
                    oracle: bool = False) -> dict[str, float]:
    """Token-weighted cross-entropy (nats) per language through the routed system."""
    return _aggregate(score_windows(system, windows, settings, oracle))


@dataclass
class GridRow:
    settings: InferenceSettings
    ppl: dict[str, float]

    @property
    def overall(self) -> float:
        return sum(self.ppl[l] for l in LANGS) / len(LANGS)


def evaluate_settings_grid(system: MoESystem, windows, grid: Sequence[InferenceSettings] | None = None
                           ) -> list[GridRow]:
    """Per-language and overall perplexity for each inference setting.

    Every expert's log-likelihood on every window is computed once; each
    setting then only re-applies the routing rule.
    """
    grid = list(grid) if grid is not None else settings_grid()
    for s in grid:
        system.check_settings(s)
    names = list(LANGS) + ([COMMON] if system.common else [])
    cache = []   # (lang, probs, pred, {option: (nll, count)})
    for lang, (toks, mask) in windows.items():
        if system.router is None:
            raise MoEError("the settings grid needs a trained router")
        preds, P = system.router.predict_many(_texts(system, toks, mask))
        for t, m, pred, p in zip(toks, mask, preds, P):
            logits = {n: _single_logits(system.slot(n).model, t) for n in names}
            opts = {n: nll_from_logits(logits[n], t, m) for n in names}
            if system.common:
                for n in LANGS:
                    opts[(n, COMMON)] = nll_from_logits(combine(logits[COMMON], logits[n]), t, m)
            cache.append((lang, p, pred, opts))
    rows = []
    for s in grid:
        scores = []
        for lang, p, pred, opts in cache:
            d = decide(pred, p, s.routable, s.use_common)
            key = (d.expert, COMMON) if (s.use_common and d.expert != COMMON) else d.expert
            scores.append(WindowScore(lang, d, *opts[key]))
        ce = _aggregate(scores)
        rows.append(GridRow(s, {l: math.exp(v) for l, v in ce.items()}))
    return rows


def grid_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["routable", "use_common", "ppl_en", "ppl_fr", "ppl_de", "ppl_py", "ppl_all"])
    for r in rows:
        w.writerow([r.settings.label, str(r.settings.use_common).lower(),
                    *(f"{r.ppl[l]:.6f}" for l in LANGS), f"{r.overall:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# bundles


def save_bundle(system: MoESystem, path, tokenizer_path=None) -> Path:
    """Write expert checkpoints, the shared embedding, the router and a manifest into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    exclude = ("wte",) if system.shared_embedding is not None else ()
    experts = {}
    for s in system.slots():
        save_checkpoint(s.model, path / "experts" / s.lang, exclude=exclude)
        experts[s.lang] = f"experts/{s.lang}"
    manifest = {
        "format": BUNDLE_FORMAT,
        "setup": system.setup,
        "classes": list(LANGS),
        "experts": experts,
        "common": COMMON in experts,
        "frozen": system.setup == "ple",
        "shared_embedding": None,
        "router": None,
        "tokenizer": os.path.relpath(tokenizer_path, path) if tokenizer_path else None,
        "settings": {"routable": sorted(system.settings.routable, key=LANGS.index),
                     "use_common": system.settings.use_common},
    }
    if system.shared_embedding is not None:
        arr = np.ascontiguousarray(system.shared_embedding.data, dtype="<f4")
        (path / "shared_wte.bin").write_bytes(arr.tobytes())
        manifest["shared_embedding"] = {"file": "shared_wte.bin", "shape": list(arr.shape), "dtype": "<f4"}
    if system.router is not None:
        system.router.save(path / "router.json")
        manifest["router"] = "router.json"
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_bundle(path, tokenizer: Tokenizer | None = None) -> MoESystem:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MoEError(f"missing bundle manifest {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("format") != BUNDLE_FORMAT:
        raise MoEError(f"unrecognised bundle format {m.get('format')!r}")
    wte = None
    if m["shared_embedding"]:
        se = m["shared_embedding"]
        data = np.frombuffer((path / se["file"]).read_bytes(), dtype="<f4").reshape(se["shape"])
        wte = Tensor(data.astype(nx.get_dtype()), requires_grad=True, name="wte")
    models = {l: load_checkpoint(path / rel, shared_wte=wte) for l, rel in m["experts"].items()}
    router = Router.load(path / m["router"]) if m["router"] else None
    if tokenizer is None and m.get("tokenizer") and (path / m["tokenizer"]).exists():
        tokenizer = Tokenizer.load(path / m["tokenizer"])
    settings = InferenceSettings(frozenset(m["settings"]["routable"]), m["settings"]["use_common"])
    if m["setup"] == "ple":
        system = build_ple({l: models[l] for l in LANGS}, router, tokenizer)
        system.settings = settings
        return system
    src = "shared"
    experts = {l: ExpertSlot(l, models[l], embedding_source=src) for l in LANGS}
    common = ExpertSlot(COMMON, models[COMMON], embedding_source=src) if m["common"] else None
    return MoESystem(m["setup"], experts, router, common, wte, settings, tokenizer)
