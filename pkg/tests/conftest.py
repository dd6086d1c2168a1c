from pathlib import Path

import numpy as np
import pytest

from rankexperts import corpus
from rankexperts.factorizer import CompressionConfig, compress_model
from rankexperts.lm import ToyLM, ToyLMConfig, init_weights

TINY = ToyLMConfig(n_blocks=2, d_model=32, n_heads=4, n_kv_heads=4, d_ff=64, max_seq=64, seed=3)


def tiny_lm(cfg: ToyLMConfig = TINY, std: float = 0.3) -> ToyLM:
    # a large init std keeps the untrained model far from uniform logits; float32
    # values mirror trained weights, so checkpoints are lossless
    w = init_weights(cfg, np.random.default_rng(cfg.seed), std=std)
    return ToyLM(cfg, {k: v.astype(np.float32) for k, v in w.items()})


def calib(kind="markov_text", n=16, seq_len=48, seed=0):
    return corpus.sample_calibration(corpus.DomainSpec(kind, 0, 8192), n, seq_len, seed)


@pytest.fixture(scope="session")
def lm():
    return tiny_lm()


@pytest.fixture(scope="session")
def lm_gqa():
    return tiny_lm(ToyLMConfig(n_blocks=2, d_model=32, n_heads=4, n_kv_heads=2, d_ff=64, max_seq=64, seed=5))


@pytest.fixture(scope="session")
def fm(lm):
    return compress_model(lm, calib(), CompressionConfig(ratio=0.4))


@pytest.fixture(scope="session")
def fm_gqa(lm_gqa):
    return compress_model(lm_gqa, calib(), CompressionConfig(ratio=0.4))


@pytest.fixture(scope="session")
def fm_full(lm):
    return compress_model(lm, calib(n=24), CompressionConfig(ratio=0.0))


TINY_CONFIG = Path(__file__).parent / "data" / "tiny.json"


def tiny_config(out):
    from rankexperts.config import load_config

    cfg = load_config(TINY_CONFIG)
    cfg.out = Path(out)
    return cfg


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} {status}  {self.title}: {self.detail}"
        CRITERIA[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
