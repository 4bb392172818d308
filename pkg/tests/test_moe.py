import csv
import io

import numpy as np
import pytest

from modmoe.corpus import LANGS
from modmoe.distill import DistillConfig
from modmoe.model import TransformerLM, eval_windows, evaluate_ce
from modmoe.moe import (COMMON, score_windows, InferenceSettings, JointTrainer, MoEError, build_ple, combine,
                        evaluate_settings_grid, evaluate_system, grid_csv, init_joint_system, load_bundle,
                        moe_infer, save_bundle, settings_grid, train_moe_ce)
from modmoe.numerics import Rng
from modmoe.router import train_router

CFG = DistillConfig(steps=2, micro_batch=2, lr=3e-3, warmup=0, eval_windows=2)


@pytest.fixture(scope="module")
def router(small_docs):
    return train_router(small_docs, seed=0)


@pytest.fixture(scope="module")
def windows(small_split, small_tok):
    return eval_windows(small_split[1], small_tok, 32, 3)


@pytest.fixture
def ple(student_cfg, router, small_tok):
    students = {l: TransformerLM(student_cfg, Rng(i + 1)) for i, l in enumerate(LANGS)}
    return build_ple(students, router, small_tok)


@pytest.fixture(scope="module")
def moe_ce(tiny_teacher, student_cfg, small_split, small_tok, router):
    system, log = train_moe_ce(tiny_teacher, student_cfg, small_split[0], small_tok, CFG, seed=5, router=router)
    return system, log


def test_combine_mean():
    np.testing.assert_array_equal(combine(np.array([1.0, 3.0]), np.array([3.0, 1.0])), [2.0, 2.0])
    a, b = np.random.default_rng(0).standard_normal((2, 5, 7))
    assert combine(a, b).tobytes() == combine(b, a).tobytes()


def test_settings_validation_and_grid():
    with pytest.raises(MoEError):
        InferenceSettings(frozenset(), False)
    with pytest.raises(MoEError):
        InferenceSettings(frozenset({"es"}), True)
    grid = settings_grid()
    labels = [(s.label, s.use_common) for s in grid]
    assert len(set(labels)) == len(grid) == 17
    for lbl in ("en+fr+de+py", "en+py", "fr+py", "de+py", "en", "fr", "de", "py"):
        assert (lbl, True) in labels and (lbl, False) in labels
    assert ("none", True) in labels and ("none", False) not in labels


def test_setup_invariants(student_cfg):
    joint = init_joint_system(student_cfg, "jeet", 0)
    with pytest.raises(MoEError):
        build_ple({l: TransformerLM(student_cfg, Rng(0)) for l in LANGS[:3]})
    with pytest.raises(MoEError, match="common"):
        type(joint)("moe-ce", joint.experts, shared_embedding=joint.shared_embedding)
    assert joint.common is None and all(s.embedding_source == "shared" for s in joint.slots())
    assert all(s.model.params["wte"] is joint.shared_embedding for s in joint.slots())


def test_ple_matches_standalone(ple, windows):
    standalone = {l: evaluate_ce(ple.experts[l].model, {l: windows[l]})[l] for l in LANGS}
    assert evaluate_system(ple, windows, oracle=True) == standalone
    full = score_windows(ple, windows)
    reduced = score_windows(ple, windows, InferenceSettings(frozenset({"en", "de", "py"})))
    kept = [(a, b) for a, b in zip(full, reduced) if a.decision.expert != "fr"]
    assert len(kept) >= 9
    assert all(a.nll == b.nll and b.decision.expert == a.decision.expert for a, b in kept)
    assert all(b.decision.expert != "fr" for b in reduced)


def test_ple_mixed_batch_passthrough(ple, windows):
    toks = np.stack([windows[l][0][0] for l in LANGS])
    mask = np.stack([windows[l][1][0] for l in LANGS])
    logits, decisions = moe_infer(ple, toks, mask=mask)
    assert [d.expert for d in decisions] == list(LANGS)
    for l, out, row in zip(LANGS, logits, toks):
        ref = ple.experts[l].model.forward(row[None]).data[0]
        assert out.tobytes() == ref.tobytes()


def test_ple_experts_are_frozen(ple, windows):
    before = ple.parameter_hashes()
    assert all(s.frozen for s in ple.slots()) and ple.trainable_parameters() == []
    evaluate_system(ple, windows)
    with pytest.raises(ValueError):
        ple.experts["en"].model.params["wte"].data[0, 0] = 1.0
    assert ple.parameter_hashes() == before
    with pytest.raises(MoEError):
        evaluate_system(ple, windows, InferenceSettings(frozenset(LANGS), True))


def test_joint_step_isolation(tiny_teacher, student_cfg, small_split, small_tok):
    for setup in ("jeet", "moe-ce"):
        system = init_joint_system(student_cfg, setup, 3)
        trainer = JointTrainer(system, tiny_teacher, small_split[0], small_tok, CFG, seed=3)
        for lang in LANGS:
            before = system.parameter_hashes()
            trainer.step(lang)
            after = system.parameter_hashes()
            changed = {k for k in before if before[k] != after[k]}
            expected = {lang, "shared_wte"} | ({COMMON} if setup == "moe-ce" else set())
            assert changed == expected, (setup, lang)


def test_moe_ce_training_log(moe_ce):
    system, log = moe_ce
    assert [r["phase_lang"] for r in log.steps] == list(LANGS) * CFG.steps
    assert all("loss_common" in r for r in log.steps)


def test_none_setting_served_by_common(moe_ce, windows):
    system, _ = moe_ce
    toks = np.stack([windows[l][0][0] for l in LANGS])
    logits, decisions = moe_infer(system, toks, InferenceSettings(frozenset(), True))
    assert {d.expert for d in decisions} == {COMMON}
    ref = system.common.model.forward(toks[:1]).data[0]
    assert logits[0].tobytes() == ref.tobytes()
    logits, decisions = moe_infer(system, toks[:1], InferenceSettings(frozenset(LANGS), True))
    en = system.experts[decisions[0].expert].model.forward(toks[:1]).data[0]
    assert logits[0].tobytes() == combine(ref, en).tobytes()


def test_settings_grid_matches_direct_evaluation(moe_ce, windows):
    system, _ = moe_ce
    pick = [InferenceSettings(frozenset(LANGS), True), InferenceSettings(frozenset({"en", "py"}), False),
            InferenceSettings(frozenset(), True)]
    rows = evaluate_settings_grid(system, windows, pick)
    assert [r.settings for r in rows] == pick
    for r in rows:
        direct = evaluate_system(system, windows, r.settings)
        for l in LANGS:
            assert r.ppl[l] == pytest.approx(np.exp(direct[l]), rel=1e-12)
        assert r.overall == pytest.approx(sum(r.ppl.values()) / 4)
    lines = list(csv.reader(io.StringIO(grid_csv(rows))))
    assert lines[0] == ["routable", "use_common", "ppl_en", "ppl_fr", "ppl_de", "ppl_py", "ppl_all"]
    assert [x[:2] for x in lines[1:]] == [["en+fr+de+py", "true"], ["en+py", "false"], ["none", "true"]]


def test_bundle_roundtrip(tmp_path, moe_ce, ple, windows, small_tok):
    small_tok.save(tmp_path / "tok.json")
    for system in (moe_ce[0], ple):
        out = save_bundle(system, tmp_path / system.setup, tmp_path / "tok.json")
        back = load_bundle(out)
        assert back.setup == system.setup
        assert back.parameter_hashes() == system.parameter_hashes()
        assert evaluate_system(back, windows) == evaluate_system(system, windows)
        if system.shared_embedding is not None:
            assert all(s.model.params["wte"] is back.shared_embedding for s in back.slots())
    with pytest.raises(MoEError):
        load_bundle(tmp_path / "nowhere")
