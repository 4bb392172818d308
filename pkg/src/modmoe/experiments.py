"""Evaluation metrics and the end-to-end studies built on them."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .corpus import LANGS, Document, by_language
from .distill import DistillConfig, DistillLog, distill, sequential_distill
from .model import ModelConfig, TransformerLM, eval_windows, evaluate_ce, sequence_nll
from .moe import MoESystem, build_ple, evaluate_system
from .tokenizer import Tokenizer

SEQUENTIAL_ORDER = LANGS
ALPHA_SETTINGS = ("adaptive", 0.1, 0.3, 0.5, 0.7, 0.9)
FLAGGED_ALPHA = "fixed_0.5"
LOSS_MODE_REFERENCE = {"combined": 4.305, "alternating": 4.322}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# perplexity


@dataclass
class EvalReport:
    ce: dict[str, float]
    meta: dict = field(default_factory=dict)

    @property
    def ppl(self) -> dict[str, float]:
        return {l: math.exp(v) for l, v in self.ce.items()}

    @property
    def overall_ppl(self) -> float:
        """Plain mean of the per-language perplexities."""
        p = self.ppl
        return sum(p.values()) / len(p)


def perplexity(model_or_system, docs: Sequence[Document], tokenizer: Tokenizer, context_len: int | None = None,
               max_windows: int | None = None, langs: Sequence[str] | None = None, oracle: bool = False,
               meta: dict | None = None) -> EvalReport:
    """Token-weighted cross-entropy and perplexity per language for a model or an MoE system."""
    groups = by_language(docs)
    langs = [l for l in LANGS if groups[l]] if langs is None else list(langs)
    for l in langs:
        if not groups[l]:
            raise ValueError(f"no evaluation documents for language {l!r}")
    if isinstance(model_or_system, MoESystem):
        ctx = context_len or model_or_system.experts["en"].model.config.context_len
        windows = eval_windows([d for d in docs if d.lang in langs], tokenizer, ctx, max_windows)
        ce = evaluate_system(model_or_system, windows, oracle=oracle)
    else:
        ctx = context_len or model_or_system.config.context_len
        windows = eval_windows([d for d in docs if d.lang in langs], tokenizer, ctx, max_windows)
        ce = evaluate_ce(model_or_system, windows)
    return EvalReport(ce, dict(meta or {}))


def pooled_ce(model: TransformerLM, windows) -> float:
    """Token-weighted cross-entropy over all windows of all languages."""
    total, n = 0.0, 0
    for toks, mask in windows.values():
        for t, m in zip(toks, mask):
            s, c = sequence_nll(model, t, m)
            total += s
            n += c
    return total / n


# ---------------------------------------------------------------------------
# forgetting


def forgotten_knowledge(loss_at_phase_end: float, loss_final: float) -> tuple[float, float]:
    """Signed loss increase since the end of a language's phase, absolute (nats) and in percent."""
    if not loss_at_phase_end > 0:
        raise ValueError(f"phase-end loss must be positive, got {loss_at_phase_end}")
    diff = loss_final - loss_at_phase_end
    return diff, 100.0 * diff / loss_at_phase_end


@dataclass
class ForgettingRow:
    lang: str
    loss_at_phase_end: float | None
    loss_final: float | None

    @property
    def applicable(self) -> bool:
        return self.loss_at_phase_end is not None

    @property
    def fk(self) -> tuple[float, float] | None:
        return forgotten_knowledge(self.loss_at_phase_end, self.loss_final) if self.applicable else None


@dataclass
class ForgettingRecord:
    experiment: str          # A_sequential | B_single_session | C_moe
    rows: dict[str, ForgettingRow]
    curves: list[dict] = field(default_factory=list)

    def fk(self, lang: str):
        return self.rows[lang].fk


FK_HEADER = ("experiment", "language", "loss_at_phase_end", "loss_final", "forgotten_abs", "forgotten_pct",
             "forgotten_knowledge")


def fk_table_csv(records: Sequence[ForgettingRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FK_HEADER)
    for rec in records:
        for lang in LANGS:
            row = rec.rows[lang]
            if not row.applicable:
                w.writerow([rec.experiment, lang, "N/A", _fmt(row.loss_final), "N/A", "N/A", "N/A"])
                continue
            a, p = row.fk
            w.writerow([rec.experiment, lang, _fmt(row.loss_at_phase_end), _fmt(row.loss_final),
                        f"{a:.3f}", f"{p:.1f}", f"{a:.3f} ({p:.1f}%)"])
    return buf.getvalue()


def curves_csv(records: Sequence[ForgettingRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "step", "phase_lang", *(f"eval_{l}" for l in LANGS)])
    for rec in records:
        for c in rec.curves:
            w.writerow([rec.experiment, c["step"], c["phase_lang"],
                        *(_fmt(c[f"eval_{l}"]) if f"eval_{l}" in c else "" for l in LANGS)])
    return buf.getvalue()


def experiment_b(teacher, student_config, train_docs, val_docs, tokenizer, cfg, total_steps, seed
                 ) -> tuple[ForgettingRecord, TransformerLM]:
    """One mixed-batch session; every language's phase ends when training ends."""
    student, log = distill(teacher, student_config, train_docs, tokenizer, replace(cfg, steps=total_steps),
                           seed, val_docs, phase_lang="all", mode="mixed")
    windows = eval_windows(val_docs, tokenizer, student_config.context_len, cfg.eval_windows)
    end = evaluate_ce(student, windows)
    rows = {l: ForgettingRow(l, end[l], end[l]) for l in LANGS}
    return ForgettingRecord("B_single_session", rows, list(log.evals)), student


def experiment_c(teacher, student_config, train_docs, val_docs, tokenizer, cfg, per_phase_steps, seed
                 ) -> tuple[ForgettingRecord, MoESystem]:
    """Independent per-language students, frozen into a PLE system and re-evaluated."""
    groups, vgroups = by_language(train_docs), by_language(val_docs)
    windows = eval_windows(val_docs, tokenizer, student_config.context_len, cfg.eval_windows)
    students, phase_end, curves = {}, {}, []
    for i, lang in enumerate(LANGS):
        s, log = distill(teacher, student_config, groups[lang], tokenizer, replace(cfg, steps=per_phase_steps),
                         seed, vgroups[lang], phase_lang=lang)
        students[lang] = s
        phase_end[lang] = evaluate_ce(s, {lang: windows[lang]})[lang]
        curves.extend(dict(e, step=e["step"] + i * per_phase_steps) for e in log.evals)
    system = build_ple(students, router=None, tokenizer=tokenizer)
    final = evaluate_system(system, windows, oracle=True)
    rows = {l: ForgettingRow(l, phase_end[l], final[l]) for l in LANGS}
    return ForgettingRecord("C_moe", rows, curves), system


def run_forgetting_study(teacher: TransformerLM, student_config: ModelConfig, train_docs: Sequence[Document],
                         val_docs: Sequence[Document], tokenizer: Tokenizer, cfg: DistillConfig | None = None,
                         per_phase_steps: int = 300, seed: int = 0,
                         experiments: Sequence[str] = ("A", "B", "C"), checkpoint_dir=None
                         ) -> list[ForgettingRecord]:
    """Sequential (A), single-session mixed (B) and frozen-expert (C) training, equal step budgets."""
    cfg = cfg or DistillConfig()
    out = []
    if "A" in experiments:
        _, trail, log = sequential_distill(teacher, student_config, train_docs, tokenizer, val_docs,
                                           SEQUENTIAL_ORDER, per_phase_steps, cfg, seed, checkpoint_dir)
        out.append(_record_a(trail, log))
    if "B" in experiments:
        out.append(experiment_b(teacher, student_config, train_docs, val_docs, tokenizer, cfg,
                                per_phase_steps * len(LANGS), seed)[0])
    if "C" in experiments:
        out.append(experiment_c(teacher, student_config, train_docs, val_docs, tokenizer, cfg,
                                per_phase_steps, seed)[0])
    return out


def _record_a(trail, log: DistillLog | None = None) -> ForgettingRecord:
    final = trail[-1].eval_ce
    rows = {}
    for i, snap in enumerate(trail):
        last = i == len(trail) - 1
        rows[snap.lang] = ForgettingRow(snap.lang, None if last else snap.eval_ce[snap.lang], final[snap.lang])
    curves = list(log.evals) if log else [
        {"step": s.step, "phase_lang": s.lang, **{f"eval_{l}": v for l, v in s.eval_ce.items()}} for s in trail]
    return ForgettingRecord("A_sequential", rows, curves)


# ---------------------------------------------------------------------------
# controlled studies


@dataclass
class StudyRow:
    setting: str
    final_eval_ce: float
    curve: list[dict] = field(default_factory=list)
    log: DistillLog | None = None

    @property
    def final_eval_ppl(self) -> float:
        return math.exp(self.final_eval_ce)


@dataclass
class StudyReport:
    name: str
    rows: list[StudyRow]
    annotations: dict = field(default_factory=dict)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "final_eval_ce", "final_eval_ppl"])
        for r in self.rows:
            w.writerow([r.setting, _fmt(r.final_eval_ce), _fmt(r.final_eval_ppl)])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "step", "loss_lm", "loss_kd", "loss_total", "alpha"])
        for r in self.rows:
            for s in r.log.steps if r.log else ():
                w.writerow([r.setting, s["step"], _fmt(s["loss_lm"]), _fmt(s["loss_kd"]), _fmt(s["loss_total"]),
                            _fmt(s["alpha"])])
        return buf.getvalue()

    def eval_curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "step", *(f"eval_{l}" for l in LANGS)])
        for r in self.rows:
            for e in r.curve:
                w.writerow([r.setting, e["step"], *(_fmt(e[f"eval_{l}"]) if f"eval_{l}" in e else "" for l in LANGS)])
        return buf.getvalue()


def alpha_label(setting) -> str:
    return "adaptive" if setting == "adaptive" else f"fixed_{float(setting):g}"


def _controlled_run(teacher, student_config, train_docs, val_docs, tokenizer, cfg, seed, label) -> StudyRow:
    student, log = distill(teacher, student_config, train_docs, tokenizer, cfg, seed, val_docs)
    windows = eval_windows(val_docs, tokenizer, student_config.context_len, cfg.eval_windows)
    return StudyRow(label, pooled_ce(student, windows), list(log.evals), log)


def run_alpha_study(teacher: TransformerLM, student_config: ModelConfig, train_docs, val_docs,
                    tokenizer: Tokenizer, settings: Sequence = ALPHA_SETTINGS, cfg: DistillConfig | None = None,
                    seed: int = 0) -> StudyReport:
    """One student per alpha setting; all arms share the seed and hence the batch stream."""
    cfg = cfg or DistillConfig()
    labels = [alpha_label(s) for s in settings]
    if "adaptive" not in labels or not {alpha_label(a) for a in (0.1, 0.3, 0.5, 0.7, 0.9)} <= set(labels):
        raise ValueError("alpha settings must include 'adaptive' and fixed 0.1, 0.3, 0.5, 0.7, 0.9")
    rows = []
    for s, label in zip(settings, labels):
        arm = replace(cfg, alpha_mode="adaptive", loss_mode="combined") if s == "adaptive" else \
            replace(cfg, alpha_mode="fixed", alpha_fixed=float(s), loss_mode="combined")
        rows.append(_controlled_run(teacher, student_config, train_docs, val_docs, tokenizer, arm, seed, label))
    return StudyReport("alpha", rows, {"flagged_setting": FLAGGED_ALPHA})


def run_loss_mode_study(teacher: TransformerLM, student_config: ModelConfig, train_docs, val_docs,
                        tokenizer: Tokenizer, cfg: DistillConfig | None = None, seed: int = 0) -> StudyReport:
    cfg = cfg or DistillConfig()
    rows = [_controlled_run(teacher, student_config, train_docs, val_docs, tokenizer,
                            replace(cfg, loss_mode=mode), seed, mode) for mode in ("combined", "alternating")]
    return StudyReport("loss_mode", rows, {"reference_full_scale_eval_loss": dict(LOSS_MODE_REFERENCE)})


def records_by_name(records: Sequence[ForgettingRecord]) -> Mapping[str, ForgettingRecord]:
    return {r.experiment: r for r in records}
