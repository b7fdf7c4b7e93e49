import pytest

from advspeech.asr import AsrTrainingConfig, train_surrogate
from advspeech.corpus import asr_examples, gen_corpus
from advspeech.datatypes import CorpusSpec, UNetAtConfig

TINY_CORPUS = CorpusSpec(
    n_utterances=3,
    utterance_len=8192,
    phrases=["stop", "call home", "open"],
    snr_levels_db=[10.0],
)
TINY_UNET = UNetAtConfig(
    depth=2,
    base_filters=2,
    down_kernel=5,
    up_kernel=3,
    attention_dim=2,
    attention_window=4,
    input_len=64,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_corpus(TINY_CORPUS)


@pytest.fixture(scope="session")
def tiny_examples(tiny_corpus):
    return asr_examples(tiny_corpus.utterances)


@pytest.fixture(scope="session")
def tiny_asr(tiny_examples):
    return train_surrogate(tiny_examples, AsrTrainingConfig(epochs=40, widths=[8], lr=1e-2))
