"""Teacher-to-student distillation with a word-level reverse-KL term."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .corpus import LANGS, Batch, Document, make_batches
from .model import (IGNORE, ModelConfig, TrainingDiverged, TransformerLM, eval_windows, evaluate_ce,
                    lm_loss, save_checkpoint, shift_targets)
from .numerics import Rng, Tensor
from .tokenizer import Tokenizer

LOG_FIELDS = ("step", "loss_lm", "loss_kd", "loss_total", "alpha", "phase_lang")


@dataclass
class DistillConfig:
    alpha_mode: str = "fixed"          # fixed | adaptive
    alpha_fixed: float = 0.5
    alpha_start: float = 0.2
    alpha_end: float = 0.8
    loss_mode: str = "combined"        # combined | alternating
    alternation_period: int = 1
    steps: int = 300
    micro_batch: int = 8
    lr: float = 3e-4
    min_lr: float = 3e-5
    warmup: int = 20
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    clip: float = 1.0
    eval_every: int = 50
    eval_windows: int | None = 32

    def __post_init__(self):
        if self.alpha_mode not in ("fixed", "adaptive"):
            raise ValueError(f"alpha_mode must be 'fixed' or 'adaptive', got {self.alpha_mode!r}")
        if self.loss_mode not in ("combined", "alternating"):
            raise ValueError(f"loss_mode must be 'combined' or 'alternating', got {self.loss_mode!r}")
        for k in ("alpha_fixed", "alpha_start", "alpha_end"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")
        if self.alternation_period < 1:
            raise ValueError("alternation_period must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def rkl_loss(student_logits: Tensor, teacher_logits, pad_mask=None) -> Tensor:
    """Mean over kept positions of KL(q_student || p_teacher), from logits.

    The teacher side is a constant; only ``student_logits`` receives a gradient.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise nx.ShapeError(f"rkl_loss: student {student_logits.shape} vs teacher {t.shape}")
    V = t.shape[-1]
    dt = student_logits.data.dtype
    logq = nx.log_softmax_np(student_logits.data.reshape(-1, V))
    logp = nx.log_softmax_np(t.reshape(-1, V).astype(dt, copy=False))
    keep = np.ones(logq.shape[0], dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool).reshape(-1)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("rkl_loss: all positions are masked")
    q = np.exp(logq)
    diff = logq - logp
    per_pos = (q * diff).sum(axis=-1)
    value = per_pos[keep].sum() / dt.type(n)

    def bw(g):
        grad = q * (diff - per_pos[:, None])
        grad[~keep] = 0
        return ((grad * (g / dt.type(n))).reshape(student_logits.shape),)

    return nx.tensor._record(np.asarray(value, dtype=dt), (student_logits,), bw)


def total_loss(lm, kd, alpha: float):
    """``alpha * lm + (1 - alpha) * kd`` for Tensors or plain floats."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(lm, Tensor):
        return nx.add(nx.scale(lm, alpha), nx.scale(kd, 1.0 - alpha))
    return alpha * lm + (1.0 - alpha) * kd


def alpha_at(config: DistillConfig, step: int, total_steps: int) -> float:
    if config.alpha_mode == "fixed":
        return config.alpha_fixed
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps if total_steps else 1.0
    return config.alpha_start + (config.alpha_end - config.alpha_start) * frac


def effective_alpha(config: DistillConfig, step: int, total_steps: int) -> float:
    """Weight on the LM term actually used at ``step``.

    In alternating mode this is 0.0 (KD only) on even periods and 1.0 (LM only)
    on odd ones, so every logged total satisfies the same weighted identity.
    """
    if config.loss_mode == "alternating":
        return 0.0 if (step // config.alternation_period) % 2 == 0 else 1.0
    return alpha_at(config, step, total_steps)


def step_objective(config: DistillConfig, step: int, lm, kd, total_steps: int | None = None):
    total_steps = config.steps if total_steps is None else total_steps
    return total_loss(lm, kd, effective_alpha(config, step, total_steps))


def audit_total(lm: float, kd: float, alpha: float, dtype=np.float32) -> float:
    """Recompute a logged total in the working width (same operation order as :func:`total_loss`)."""
    dt = np.dtype(dtype).type
    return float(dt(lm) * dt(alpha) + dt(kd) * dt(1.0 - alpha))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class DistillLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.steps:
            w.writerow([r["step"], repr(r["loss_lm"]), repr(r["loss_kd"]), repr(r["loss_total"]),
                        repr(r["alpha"]), r["phase_lang"]])
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["step", "phase_lang"] + [f"eval_{l}" for l in LANGS]
        w.writerow(cols)
        for r in self.evals:
            w.writerow([r["step"], r["phase_lang"]] + [repr(r[c]) if c in r else "" for c in cols[2:]])
        return buf.getvalue()


def lr_schedule(cfg: DistillConfig, step: int, total: int) -> float:
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, total - cfg.warmup)
    frac = min(1.0, (step - cfg.warmup) / span)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + np.cos(np.pi * frac))


def teacher_logits(teacher: TransformerLM, tokens: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        return teacher.forward(tokens).data


def kd_losses(student: TransformerLM, t_logits: np.ndarray, batch: Batch,
              cfg: DistillConfig, step: int, total_steps: int) -> tuple[Tensor, float, float, float]:
    """Forward the student on ``batch``; return ``(objective, lm, kd, alpha)``."""
    tgt = shift_targets(batch.tokens, batch.mask)
    logits = student.forward(batch.tokens)
    lm = lm_loss(logits, tgt)
    kd = rkl_loss(logits, t_logits, tgt != IGNORE)
    alpha = effective_alpha(cfg, step, total_steps)
    return total_loss(lm, kd, alpha), float(lm.data), float(kd.data), alpha


def check_compatible(teacher: TransformerLM, student_config: ModelConfig) -> None:
    if teacher.config.vocab_size != student_config.vocab_size:
        raise ValueError(f"vocab mismatch: teacher {teacher.config.vocab_size} vs student {student_config.vocab_size}")
    if student_config.context_len > teacher.config.context_len:
        raise ValueError("student context_len exceeds the teacher's")


def _batch_stream(docs, tokenizer, cfg: DistillConfig, context_len: int, mode: str, seed: int) -> Iterator[Batch]:
    return make_batches(docs, tokenizer, context_len, cfg.micro_batch, mode=mode, seed=seed,
                        epochs=None, drop_last=True)


def train_phase(student: TransformerLM, teacher: TransformerLM, batches: Iterator[Batch], cfg: DistillConfig,
                steps: int, log: DistillLog, phase_lang: str, step_offset: int = 0,
                windows: dict | None = None) -> None:
    """Run ``steps`` distillation updates on ``student`` with a fresh optimizer and schedule."""
    opt = nx.AdamW(student.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    for step in range(steps):
        batch = next(batches)
        t_logits = teacher_logits(teacher, batch.tokens)
        student.zero_grad()
        obj, lm, kd, alpha = kd_losses(student, t_logits, batch, cfg, step, steps)
        total = float(obj.data)
        if not np.isfinite(total):
            raise TrainingDiverged(f"distillation diverged at step {step_offset + step}")
        nx.backward(obj)
        nx.clip_grad_norm(student.parameters(), cfg.clip)
        opt.step(lr_schedule(cfg, step, steps))
        log.steps.append({"step": step_offset + step, "loss_lm": lm, "loss_kd": kd, "loss_total": total,
                          "alpha": alpha, "phase_lang": phase_lang})
        if windows and ((step + 1) % cfg.eval_every == 0 or step + 1 == steps):
            ce = evaluate_ce(student, windows)
            log.evals.append({"step": step_offset + step + 1, "phase_lang": phase_lang,
                              **{f"eval_{l}": v for l, v in ce.items()}})


def distill(teacher: TransformerLM, student_config: ModelConfig, docs: Sequence[Document], tokenizer: Tokenizer,
            cfg: DistillConfig | None = None, seed: int = 0, val_docs: Sequence[Document] | None = None,
            phase_lang: str | None = None, mode: str | None = None) -> tuple[TransformerLM, DistillLog]:
    """Distil ``teacher`` into a freshly initialised student on ``docs``.

    Single-language corpora are batched per language; multi-language corpora
    default to mixed batches (single-session training).
    """
    cfg = cfg or DistillConfig()
    check_compatible(teacher, student_config)
    langs = sorted({d.lang for d in docs}, key=LANGS.index)
    phase_lang = phase_lang or (langs[0] if len(langs) == 1 else "all")
    mode = mode or ("per_language" if len(langs) == 1 else "mixed")
    root = Rng(seed)
    student = TransformerLM(student_config, root.substream("init"))
    batches = _batch_stream(docs, tokenizer, cfg, student_config.context_len, mode, root.substream("batching").seed)
    windows = eval_windows(val_docs, tokenizer, student_config.context_len, cfg.eval_windows) if val_docs else None
    log = DistillLog()
    train_phase(student, teacher, batches, cfg, cfg.steps, log, phase_lang, windows=windows)
    return student, log


@dataclass
class PhaseCheckpoint:
    lang: str
    step: int
    eval_ce: dict[str, float]
    path: Path | None = None
    state: dict[str, np.ndarray] | None = None


def sequential_distill(teacher: TransformerLM, student_config: ModelConfig, docs: Sequence[Document],
                       tokenizer: Tokenizer, val_docs: Sequence[Document],
                       language_order: Sequence[str] = LANGS, per_phase_steps: int | None = None,
                       cfg: DistillConfig | None = None, seed: int = 0, checkpoint_dir=None,
                       student: TransformerLM | None = None
                       ) -> tuple[TransformerLM, list[PhaseCheckpoint], DistillLog]:
    """Distil one student language by language, snapshotting at each phase boundary.

    At every boundary the student is evaluated on all four languages; the
    snapshot is written to ``checkpoint_dir/phase_<i>_<lang>`` when given and is
    always kept in memory.
    """
    cfg = cfg or DistillConfig()
    if sorted(language_order) != sorted(LANGS):
        raise ValueError(f"language_order must be a permutation of {LANGS}, got {tuple(language_order)}")
    check_compatible(teacher, student_config)
    steps = per_phase_steps or cfg.steps
    root = Rng(seed)
    student = student or TransformerLM(student_config, root.substream("init"))
    groups = {l: [d for d in docs if d.lang == l] for l in LANGS}
    windows = eval_windows(val_docs, tokenizer, student_config.context_len, cfg.eval_windows)
    log = DistillLog()
    trail: list[PhaseCheckpoint] = []
    for i, lang in enumerate(language_order):
        batches = _batch_stream(groups[lang], tokenizer, cfg, student_config.context_len, "per_language",
                                root.substream(f"batching/{lang}").seed)
        train_phase(student, teacher, batches, cfg, steps, log, lang, step_offset=i * steps, windows=windows)
        ce = evaluate_ce(student, windows)
        snap = PhaseCheckpoint(lang, (i + 1) * steps, ce,
                               state={n: p.data.copy() for n, p in student.named_parameters()})
        if checkpoint_dir is not None:
            snap.path = save_checkpoint(student, Path(checkpoint_dir) / f"phase_{i}_{lang}", seed=seed,
                                        step=(i + 1) * steps)
        trail.append(snap)
    return student, trail, log


def with_overrides(cfg: DistillConfig, **kw) -> DistillConfig:
    return replace(cfg, **kw)
