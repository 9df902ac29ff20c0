import numpy as np
import pytest
from hypothesis import settings

from taskhyper.transformer import ModelConfig

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


TINY = ModelConfig(layers=2, model_dim=8, heads=2, head_dim=4, ffn_dim=16, vocab_size=260,
                   adapter_bottleneck=4, prefix_length=3, embed_dim=8, max_seq_len=96, lora_rank=2)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
