import csv
import hashlib
import io
import math

import numpy as np
import pytest

import modmoe.distill as distill_mod
from modmoe.corpus import LANGS
from modmoe.distill import DistillConfig
from modmoe.experiments import (EvalReport, ForgettingRecord, ForgettingRow, fk_table_csv, forgotten_knowledge,
                                perplexity, records_by_name, run_alpha_study, run_forgetting_study,
                                run_loss_mode_study)
from modmoe.model import TransformerLM
from modmoe.numerics import Rng

CFG = DistillConfig(steps=3, micro_batch=2, lr=3e-3, warmup=0, eval_every=100, eval_windows=2)


def test_forgotten_knowledge_examples():
    a, p = forgotten_knowledge(4.158, 4.657)
    assert round(a, 3) == 0.499 and round(p, 1) == 12.0
    a, p = forgotten_knowledge(3.424, 4.725)
    assert round(a, 3) == 1.301 and round(p, 1) == 38.0
    assert forgotten_knowledge(2.5, 2.5) == (0.0, 0.0)
    a, p = forgotten_knowledge(4.0, 3.0)
    assert a == -1.0 and p == -25.0
    assert p * 4.0 / 100 == pytest.approx(a, abs=1e-9)
    with pytest.raises(ValueError):
        forgotten_knowledge(0.0, 1.0)


def test_perplexity_conversions():
    assert EvalReport({"en": 0.0}).ppl["en"] == 1.0
    assert EvalReport({"en": 4.305}).ppl["en"] == pytest.approx(74.08, abs=0.05)
    assert EvalReport({"en": math.log(2048)}).ppl["en"] == pytest.approx(2048)
    r = EvalReport({"en": math.log(2.0), "fr": math.log(4.0)})
    assert r.overall_ppl == pytest.approx(3.0)


def test_perplexity_of_uniform_model(small_split, small_tok, student_cfg):
    m = TransformerLM(student_cfg, Rng(0))
    m.params["wte"].data[...] = 0  # tied head, so every logit is zero
    rep = perplexity(m, small_split[1], small_tok, max_windows=2)
    for l in LANGS:
        assert rep.ppl[l] == pytest.approx(small_tok.vocab_size, rel=1e-5)
    with pytest.raises(ValueError, match="py"):
        perplexity(m, [d for d in small_split[1] if d.lang != "py"], small_tok, langs=LANGS)


def test_fk_table_layout():
    rec = ForgettingRecord("A_sequential", {l: ForgettingRow(l, 4.0, 4.5) for l in LANGS[:3]})
    rec.rows["py"] = ForgettingRow("py", None, 3.0)
    rows = list(csv.reader(io.StringIO(fk_table_csv([rec]))))
    assert rows[0] == ["experiment", "language", "loss_at_phase_end", "loss_final", "forgotten_abs",
                       "forgotten_pct", "forgotten_knowledge"]
    assert rows[1] == ["A_sequential", "en", "4.000000", "4.500000", "0.500", "12.5", "0.500 (12.5%)"]
    assert rows[4][1:] == ["py", "N/A", "3.000000", "N/A", "N/A", "N/A"]


def test_forgetting_study_structure(tmp_path, tiny_teacher, student_cfg, small_split, small_tok):
    recs = records_by_name(run_forgetting_study(tiny_teacher, student_cfg, small_split[0], small_split[1],
                                                small_tok, CFG, per_phase_steps=3, seed=1,
                                                checkpoint_dir=tmp_path))
    assert set(recs) == {"A_sequential", "B_single_session", "C_moe"}
    a = recs["A_sequential"]
    assert a.fk("py") is None and all(a.fk(l) is not None for l in ("en", "fr", "de"))
    assert len(list(tmp_path.iterdir())) == 4
    for l in LANGS:
        assert recs["B_single_session"].fk(l) == (0.0, 0.0)
        assert recs["C_moe"].fk(l) == (0.0, 0.0)
        assert recs["C_moe"].rows[l].loss_final == recs["C_moe"].rows[l].loss_at_phase_end


def test_controlled_studies_share_batches(monkeypatch, tiny_teacher, student_cfg, small_split, small_tok):
    streams = []
    real = distill_mod._batch_stream

    def tee(*args, **kw):
        h = hashlib.sha256()
        streams.append(h)
        for b in real(*args, **kw):
            h.update(b.tokens.tobytes())
            yield b

    monkeypatch.setattr(distill_mod, "_batch_stream", tee)
    alpha = run_alpha_study(tiny_teacher, student_cfg, small_split[0], small_split[1], small_tok, cfg=CFG, seed=2)
    assert [r.setting for r in alpha.rows] == ["adaptive", "fixed_0.1", "fixed_0.3", "fixed_0.5", "fixed_0.7",
                                               "fixed_0.9"]
    assert alpha.annotations["flagged_setting"] == "fixed_0.5"
    assert len({h.hexdigest() for h in streams}) == 1 and len(streams) == 6
    assert list(csv.reader(io.StringIO(alpha.table_csv())))[0] == ["setting", "final_eval_ce", "final_eval_ppl"]
    with pytest.raises(ValueError):
        run_alpha_study(tiny_teacher, student_cfg, small_split[0], small_split[1], small_tok, settings=(0.5,))

    streams.clear()
    modes = run_loss_mode_study(tiny_teacher, student_cfg, small_split[0], small_split[1], small_tok, CFG, seed=2)
    assert [r.setting for r in modes.rows] == ["combined", "alternating"]
    assert len({h.hexdigest() for h in streams}) == 1
    assert modes.annotations["reference_full_scale_eval_loss"] == {"combined": 4.305, "alternating": 4.322}
    assert all(np.isfinite(r.final_eval_ce) for r in modes.rows)
    for s in modes.rows[0].log.steps:
        a = s["alpha"]
        assert s["loss_total"] == float(np.float32(s["loss_lm"]) * np.float32(a)
                                        + np.float32(s["loss_kd"]) * np.float32(1 - a))
