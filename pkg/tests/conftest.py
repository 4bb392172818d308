import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from modmoe.corpus import load_desk_corpus, split_corpus  # noqa: E402
from modmoe.model import ModelConfig, TrainHyper, train_teacher  # noqa: E402
from modmoe.tokenizer import train_bpe  # noqa: E402

VOCAB = 384


@pytest.fixture(scope="session")
def small_docs():
    return load_desk_corpus(max_docs_per_lang=300)


@pytest.fixture(scope="session")
def small_split(small_docs):
    return split_corpus(small_docs, 0.05, seed=0)


@pytest.fixture(scope="session")
def small_tok(small_split):
    return train_bpe(small_split[0], VOCAB)


@pytest.fixture(scope="session")
def teacher_cfg():
    return ModelConfig(vocab_size=VOCAB, n_layers=2, n_heads=2, d_model=32, d_ff=64, context_len=32)


@pytest.fixture(scope="session")
def student_cfg():
    return ModelConfig(vocab_size=VOCAB, n_layers=1, n_heads=2, d_model=16, d_ff=32, context_len=32)


@pytest.fixture(scope="session")
def tiny_teacher(small_split, small_tok, teacher_cfg):
    hyper = TrainHyper(steps=40, micro_batch=4, virtual_batch=8, lr=3e-3, warmup=5, eval_windows=4)
    model, _ = train_teacher(teacher_cfg, small_split[0], small_tok, hyper, seed=11)
    return model


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
