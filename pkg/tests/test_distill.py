import csv
import io
import math

import numpy as np
import pytest

from modmoe import numerics as nx
from modmoe.distill import (LOG_FIELDS, DistillConfig, alpha_at, audit_total, distill, rkl_loss,
                            sequential_distill, step_objective, total_loss)
from modmoe.model import ModelConfig, eval_windows, evaluate_ce, load_checkpoint
from modmoe.numerics import Tensor


def _rkl(s, t, mask=None):
    with nx.precision(np.float64):
        return float(rkl_loss(Tensor(np.asarray(s, dtype=np.float64)), np.asarray(t, dtype=np.float64), mask).data)


def test_rkl_hand_example():
    q, p = np.log([[[0.9, 0.1]]]), np.log([[[0.5, 0.5]]])
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert _rkl(q, p) == pytest.approx(expected, abs=1e-12)
    assert _rkl(q, p) == pytest.approx(0.3681, abs=1e-4)


def test_rkl_identity_and_nonnegativity():
    g = np.random.default_rng(0)
    x = g.standard_normal((2, 3, 9))
    assert abs(_rkl(x, x)) < 1e-7
    assert abs(_rkl(x, x + 4.0)) < 1e-7  # shift invariance of softmax
    for _ in range(100):
        assert _rkl(3 * g.standard_normal((1, 2, 6)), 3 * g.standard_normal((1, 2, 6))) >= 0


def test_rkl_direction_and_mask():
    s, t = np.log([[[0.7, 0.3], [0.2, 0.8]]]), np.log([[[0.4, 0.6], [0.2, 0.8]]])
    forward_kl = 0.4 * math.log(0.4 / 0.7) + 0.6 * math.log(0.6 / 0.3)
    reverse_kl = 0.7 * math.log(0.7 / 0.4) + 0.3 * math.log(0.3 / 0.6)
    assert _rkl(s[:, :1], t[:, :1]) == pytest.approx(reverse_kl)
    assert _rkl(s[:, :1], t[:, :1]) != pytest.approx(forward_kl)
    assert _rkl(s, t, np.array([[True, False]])) == pytest.approx(reverse_kl)
    assert _rkl(s, t) == pytest.approx(reverse_kl / 2)


def test_rkl_errors_and_teacher_constant():
    with pytest.raises(nx.ShapeError):
        rkl_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2, 4)))
    with pytest.raises(ValueError):
        rkl_loss(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=bool))
    s = Tensor(np.random.default_rng(1).standard_normal((1, 2, 3)), requires_grad=True)
    t = Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    nx.backward(rkl_loss(s, t))
    assert s.grad is not None and t.grad is None


def test_total_loss_examples():
    assert total_loss(2.0, 1.0, 0.5) == 1.5
    assert total_loss(2.7, 1.3, 1.0) == 2.7
    assert total_loss(2.7, 1.3, 0.0) == 1.3
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.2)
    t = total_loss(Tensor(np.float32(2.0)), Tensor(np.float32(1.0)), 0.25)
    assert float(t.data) == 0.25 * 2.0 + 0.75 * 1.0
    assert DistillConfig().alpha_fixed == 0.5


def test_alpha_schedule():
    ad = DistillConfig(alpha_mode="adaptive", alpha_start=0.2, alpha_end=0.8)
    assert alpha_at(ad, 50, 100) == pytest.approx(0.5)
    assert alpha_at(ad, 0, 100) == 0.2
    assert alpha_at(ad, 100, 100) == 0.8
    vals = [alpha_at(ad, s, 100) for s in range(101)]
    assert vals == sorted(vals)
    fx = DistillConfig(alpha_fixed=0.3)
    assert {alpha_at(fx, s, 100) for s in (0, 17, 100)} == {0.3}


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(alpha_fixed=1.5)
    with pytest.raises(ValueError):
        DistillConfig(loss_mode="interleaved")
    with pytest.raises(ValueError):
        DistillConfig(alternation_period=0)


def test_step_objective_modes():
    alt1 = DistillConfig(loss_mode="alternating", alternation_period=1)
    assert step_objective(alt1, 0, 2.0, 1.0) == 1.0
    assert step_objective(alt1, 1, 2.0, 1.0) == 2.0
    alt2 = DistillConfig(loss_mode="alternating", alternation_period=2)
    assert [step_objective(alt2, s, 2.0, 1.0) for s in range(4)] == [1.0, 1.0, 2.0, 2.0]
    comb = DistillConfig(alpha_mode="adaptive")
    for s in (0, 10, 300):
        a = alpha_at(comb, s, 300)
        assert step_objective(comb, s, 3.1, 0.4) == a * 3.1 + (1 - a) * 0.4


def test_distill_logs_and_teacher_untouched(small_split, small_tok, student_cfg, tiny_teacher):
    en = [d for d in small_split[0] if d.lang == "en"]
    before = tiny_teacher.state_bytes()
    cfg = DistillConfig(steps=12, micro_batch=4, lr=3e-3, warmup=2, eval_every=6, eval_windows=2,
                        alpha_mode="adaptive")
    student, log = distill(tiny_teacher, student_cfg, en, small_tok, cfg, seed=4, val_docs=small_split[1])
    assert tiny_teacher.state_bytes() == before
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == LOG_FIELDS == ("step", "loss_lm", "loss_kd", "loss_total", "alpha", "phase_lang")
    assert len(rows) == 13 and {r[5] for r in rows[1:]} == {"en"}
    for r in log.steps:
        assert r["loss_total"] == audit_total(r["loss_lm"], r["loss_kd"], r["alpha"])
        assert r["loss_kd"] >= 0
    assert [e["step"] for e in log.evals] == [6, 12]
    again, log2 = distill(tiny_teacher, student_cfg, en, small_tok, cfg, seed=4, val_docs=small_split[1])
    assert again.state_bytes() == student.state_bytes() and log2.to_csv() == log.to_csv()


def test_alternating_log_identity(small_split, small_tok, student_cfg, tiny_teacher):
    cfg = DistillConfig(steps=4, micro_batch=2, loss_mode="alternating", eval_windows=2)
    _, log = distill(tiny_teacher, student_cfg, small_split[0], small_tok, cfg, seed=1)
    assert [r["alpha"] for r in log.steps] == [0.0, 1.0, 0.0, 1.0]
    assert all(r["loss_total"] == (r["loss_kd"] if r["alpha"] == 0 else r["loss_lm"]) for r in log.steps)
    assert {r["phase_lang"] for r in log.steps} == {"all"}


def test_distill_rejects_incompatible_student(small_split, small_tok, tiny_teacher):
    bad = ModelConfig(vocab_size=500, n_layers=1, n_heads=2, d_model=16, d_ff=32, context_len=32)
    with pytest.raises(ValueError, match="vocab"):
        distill(tiny_teacher, bad, small_split[0], small_tok, DistillConfig(steps=1))
    long_ctx = ModelConfig(vocab_size=384, n_layers=1, n_heads=2, d_model=16, d_ff=32, context_len=64)
    with pytest.raises(ValueError, match="context"):
        distill(tiny_teacher, long_ctx, small_split[0], small_tok, DistillConfig(steps=1))


def test_sequential_distill_trail(tmp_path, small_split, small_tok, student_cfg, tiny_teacher):
    cfg = DistillConfig(steps=3, micro_batch=2, eval_every=100, eval_windows=2)
    student, trail, log = sequential_distill(tiny_teacher, student_cfg, small_split[0], small_tok,
                                             small_split[1], per_phase_steps=3, cfg=cfg, seed=2,
                                             checkpoint_dir=tmp_path)
    assert [c.lang for c in trail] == ["en", "fr", "de", "py"]
    assert [c.step for c in trail] == [3, 6, 9, 12]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["phase_0_en", "phase_1_fr", "phase_2_de", "phase_3_py"]
    assert [r["phase_lang"] for r in log.steps] == ["en"] * 3 + ["fr"] * 3 + ["de"] * 3 + ["py"] * 3
    windows = eval_windows(small_split[1], small_tok, student_cfg.context_len, 2)
    for c in trail:
        assert evaluate_ce(load_checkpoint(c.path), windows) == c.eval_ce
    assert evaluate_ce(student, windows) == trail[-1].eval_ce
    with pytest.raises(ValueError, match="permutation"):
        sequential_distill(tiny_teacher, student_cfg, small_split[0], small_tok, small_split[1],
                           language_order=("en", "fr", "de"), cfg=cfg)
