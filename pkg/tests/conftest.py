import numpy as np
import pytest
import torch
from hypothesis import settings

from avsd.corpus import CorpusSpec, generate
from avsd.models import ModelConfig
from avsd.vocab import Vocabulary

settings.register_profile("avsd", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("avsd")

torch.set_num_threads(1)


TINY_MODEL = ModelConfig(width=16, heads=2, ffn=32, blocks=2, frontend_dim=16, conv_channels=(4, 8), pos_kernel=3, pos_groups=2, dec_blocks=1, max_target_len=16, dropout=0.0)


@pytest.fixture
def tiny_model_cfg():
    return TINY_MODEL


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


@pytest.fixture(scope="session")
def small_corpus():
    return generate(CorpusSpec(num_speakers=2, utterances_per_speaker=4, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
