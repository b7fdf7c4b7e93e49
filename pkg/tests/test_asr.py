import numpy as np
import pytest

from advspeech import tensorgrad as tg
from advspeech.asr import (
    adversarial_finetune,
    asr_forward,
    check_alignment,
    ctc_loss,
    encode_target,
    evaluate_wer,
    greedy_decode,
    init_asr,
    load_asr,
    save_asr,
    train_surrogate,
    transcribe,
)
from advspeech.corpus import asr_examples, gen_corpus
from advspeech.datatypes import CorpusSpec, TrainingConfig, Vocabulary, Waveform
from advspeech.errors import InfeasibleAlignmentError, ParameterError
from advspeech.utils.ntv1 import write_checkpoint


def test_forward_shape():
    model = init_asr()
    logits = asr_forward(model, Waveform(samples=np.zeros(16384) + 1e-3))
    assert logits.shape == (63, 28)


def test_target_encoding():
    vocab = Vocabulary()
    assert encode_target(vocab, "ab c") == [0, 1, 26, 2]
    with pytest.raises(ParameterError):
        encode_target(vocab, "Open")


def test_alignment_feasibility():
    check_alignment(4, [1, 2, 3, 4])
    with pytest.raises(InfeasibleAlignmentError, match="needs 5 frames"):
        check_alignment(4, [1, 1, 2, 3])
    logits = tg.Tensor(np.zeros((3, 28)))
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(logits, "abcd")


def test_greedy_decode_collapses_repeats_and_blanks():
    blank = 27
    path = [1, 1, blank, 1, 2, 2, blank, blank, 26, 0]
    logits = np.full((len(path), 28), -5.0)
    logits[np.arange(len(path)), path] = 5.0
    assert greedy_decode(logits).text == "bbc a"


def test_loss_gradient_reaches_the_samples():
    model = init_asr(widths=[4], seed=1)
    rng = np.random.default_rng(0)

    def f(x):
        return ctc_loss(asr_forward(model, x), "ab", model.vocab)

    assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=1024) * 0.1), h=1e-6) <= 1e-3


def test_training_reduces_the_loss(tiny_asr):
    history = tiny_asr.loss_history
    assert len(history) == 40
    assert history[-1] < 0.8 * history[0]
    assert tiny_asr.widths == [8]


def test_checkpoint_round_trip(tiny_asr, tiny_examples, tmp_path):
    path = save_asr(tiny_asr, tmp_path / "asr.ntv1")
    loaded = load_asr(path)
    w = tiny_examples[0][0]
    with tg.no_grad():
        assert np.array_equal(asr_forward(loaded, w).data, asr_forward(tiny_asr, w).data)
    assert transcribe(loaded, w) == transcribe(tiny_asr, w)
    assert np.array_equal(loaded.feature_std, tiny_asr.feature_std)


def test_load_rejects_other_checkpoints(tmp_path):
    params = tg.ParameterSet({"w": np.ones(2)})
    path = write_checkpoint(params, tmp_path / "x.ntv1", {"kind": "dnn"})
    with pytest.raises(ParameterError, match="not an asr checkpoint"):
        load_asr(path)


def test_evaluate_wer_is_a_percentage(tiny_asr, tiny_examples):
    score = evaluate_wer(tiny_asr, tiny_examples)
    assert 0.0 <= score
    with pytest.raises(ParameterError):
        evaluate_wer(tiny_asr, [])


def test_adversarial_finetune_leaves_the_input_alone(tiny_asr, tiny_examples):
    before = tiny_asr.params.copy()
    tuned = adversarial_finetune(
        tiny_asr, tiny_examples[:1], TrainingConfig(alpha=0.5, epochs=2, fgsm_epsilon=0.005)
    )
    assert len(tuned.loss_history) == 2
    for name in before.names():
        assert np.array_equal(before[name].data, tiny_asr.params[name].data)
    assert any(not np.array_equal(before[n].data, tuned.params[n].data) for n in before.names())


@pytest.mark.slow
def test_default_training_recognizes_held_out_commands():
    corpus = gen_corpus(CorpusSpec())
    train, held = corpus.split(10)
    model = train_surrogate(asr_examples(train, [10.0]))
    assert evaluate_wer(model, asr_examples(held)) <= 15.0
