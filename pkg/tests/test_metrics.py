import math

import numpy as np
import pytest

from advspeech.corpus import gen_corpus
from advspeech.datatypes import CorpusSpec, EvalReport, Waveform
from advspeech.errors import (
    ContractError,
    InfiniteSnrError,
    InsufficientModulationError,
    MetricError,
    ParameterError,
    SilentReferenceError,
    TooShortError,
)
from advspeech.metrics import (
    aggregate_reports,
    edit_similarity,
    evaluate_bundle,
    levenshtein,
    pesq_core,
    pesq_from_disturbances,
    residual_snr_db,
    snr_db,
    sti,
    sti_from_modulation_ratios,
    stoi,
    wer,
)
from advspeech.signal import add_white_noise, mix_at_snr, white_noise


@pytest.fixture(scope="module")
def speechlike():
    """One second of white noise under a slow syllable-rate envelope."""
    rng = np.random.default_rng(3)
    t = np.arange(16000) / 16000
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * 3.3 * t)
    return Waveform(samples=0.2 * envelope * rng.normal(size=16000))


@pytest.fixture(scope="module")
def noise():
    return np.random.default_rng(4).normal(size=16000)


def test_snr_of_a_known_ratio():
    x = np.ones(100)
    assert snr_db(x, 0.1 * np.ones(100)) == pytest.approx(20.0)


def test_snr_scaling_law(speechlike, noise):
    base = snr_db(speechlike, noise)
    for c in (0.5, 2.0, 10.0):
        assert snr_db(speechlike, c * noise) == pytest.approx(base - 20 * math.log10(c))


def test_snr_errors(speechlike):
    with pytest.raises(InfiniteSnrError):
        snr_db(speechlike, np.zeros(16000))
    with pytest.raises(SilentReferenceError):
        snr_db(np.zeros(16000), speechlike)
    with pytest.raises(ParameterError, match="length mismatch"):
        snr_db(speechlike, np.ones(10))


def test_residual_snr_of_identical_signals_is_infinite(speechlike):
    assert residual_snr_db(speechlike, speechlike) == math.inf


def test_identity_scores(speechlike):
    assert pesq_core(speechlike, speechlike) == 4.5
    assert stoi(speechlike, speechlike) == pytest.approx(1.0, abs=1e-9)
    assert sti(speechlike, speechlike) == pytest.approx(1.0, abs=1e-9)


def test_scores_fall_as_noise_rises(speechlike, noise):
    mild = mix_at_snr(speechlike, noise, 20.0)
    harsh = mix_at_snr(speechlike, noise, 0.0)
    for metric in (pesq_core, stoi, sti):
        perfect = metric(speechlike, speechlike)
        assert metric(speechlike, harsh) < metric(speechlike, mild) <= perfect


@pytest.fixture(scope="module")
def clips():
    corpus = gen_corpus(CorpusSpec(n_utterances=10))
    return [u.clean for u in corpus.utterances]


SIGMAS = [0.001, 0.003, 0.01, 0.03, 0.1]


@pytest.mark.parametrize(
    "metric", [pesq_core, stoi, sti, residual_snr_db], ids=["pesq", "stoi", "sti", "snr"]
)
def test_scores_never_rise_with_white_noise_level(clips, metric):
    for i, clip in enumerate(clips):
        scores = [metric(clip, add_white_noise(clip, sigma, seed=i)) for sigma in SIGMAS]
        assert all(b <= a + 1e-9 for a, b in zip(scores, scores[1:])), scores
        assert scores[-1] < scores[0]


def test_pesq_prefers_15_db_to_0_db(speechlike):
    for seed in range(5):
        noise = white_noise(len(speechlike), 1.0, seed)
        harsh = mix_at_snr(speechlike, noise, 0.0)
        mild = mix_at_snr(speechlike, noise, 15.0)
        assert pesq_core(speechlike, harsh) < pesq_core(speechlike, mild)


def test_pesq_is_clipped():
    assert pesq_from_disturbances(0.0, 0.0) == 4.5
    assert pesq_from_disturbances(1000.0, 1000.0) == -0.5
    assert pesq_from_disturbances(10.0, 20.0) == pytest.approx(2.882)


def test_sti_transfer_ratio_endpoints():
    assert sti_from_modulation_ratios(np.ones((6, 14))) == pytest.approx(1.0)
    assert sti_from_modulation_ratios(np.zeros((6, 14))) == pytest.approx(0.0)
    assert sti_from_modulation_ratios(np.full((6, 14), 0.5)) == pytest.approx(0.5)


def test_sti_needs_modulation():
    with pytest.raises(InsufficientModulationError):
        sti(np.zeros(16000), np.zeros(16000))


def test_stoi_needs_enough_frames(speechlike):
    short = speechlike.samples[:2000]
    with pytest.raises(TooShortError):
        stoi(short, short)
    with pytest.raises(SilentReferenceError):
        stoi(np.zeros(16000), speechlike)


def test_stoi_ignores_gain(speechlike):
    assert stoi(speechlike, 2.0 * speechlike.samples) == pytest.approx(1.0, abs=1e-9)


def test_stoi_of_independent_noise_is_low(speechlike):
    for seed in range(10):
        unrelated = white_noise(len(speechlike), 0.2, seed + 100)
        assert stoi(speechlike, unrelated) < 0.3


def test_wer():
    assert wer("open the door", "open the door") == 0.0
    assert wer("open the door", "open a door") == pytest.approx(100 / 3)
    assert wer(["a", "b"], []) == 100.0
    assert wer("a", "a b c") == 200.0
    with pytest.raises(ContractError):
        wer("", "anything")


def test_levenshtein_and_edit_similarity():
    assert levenshtein("kitten", "sitting") == 3
    assert edit_similarity("", "") == 1.0
    assert edit_similarity("abcd", "abcx") == pytest.approx(0.75)


def _edit_distance(a, b):
    """Unmemoized recursion over first elements."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        _edit_distance(a[1:], b) + 1,
        _edit_distance(a, b[1:]) + 1,
        _edit_distance(a[1:], b[1:]) + (a[0] != b[0]),
    )


def test_wer_matches_brute_force():
    rng = np.random.default_rng(21)
    words = ["go", "stop", "left", "up"]
    for _ in range(200):
        ref = list(rng.choice(words, size=rng.integers(1, 7)))
        hyp = list(rng.choice(words, size=rng.integers(0, 7)))
        expected = 100.0 * _edit_distance(ref, hyp) / len(ref)
        assert wer(" ".join(ref), " ".join(hyp)) == pytest.approx(expected)
        assert wer(ref, hyp) == pytest.approx(expected)


def test_edit_similarity_matches_brute_force():
    rng = np.random.default_rng(22)
    for _ in range(200):
        a = "".join(rng.choice(list("abc"), size=rng.integers(0, 7)))
        b = "".join(rng.choice(list("abc"), size=rng.integers(0, 7)))
        longest = max(len(a), len(b))
        expected = 1.0 if longest == 0 else 1.0 - _edit_distance(a, b) / longest
        assert edit_similarity(a, b) == pytest.approx(expected)
        assert levenshtein(a, b) == _edit_distance(a, b)


def test_evaluate_bundle_fills_text_fields(speechlike, noise):
    noisy = mix_at_snr(speechlike, noise, 10.0)
    report = evaluate_bundle(
        speechlike,
        noisy,
        reference_text="open the door",
        hypothesis_text="open the door",
        target_text="close the door",
        condition="noisy",
    )
    assert report.condition == "noisy"
    assert report.snr_db == pytest.approx(10.0)
    assert report.wer_pct == 0.0
    assert report.rosa_pct == 0.0
    assert 0.0 <= report.sti <= 1.0


def test_evaluate_bundle_attributes_failures(speechlike):
    with pytest.raises(MetricError) as info:
        evaluate_bundle(Waveform(samples=np.zeros(16000)), speechlike)
    assert info.value.field == "snr_db"
    assert isinstance(info.value.cause, SilentReferenceError)
    assert info.value.module == "metrics"


def test_aggregate_reports_propagates_infinity():
    merged = aggregate_reports(
        [
            EvalReport(condition="a", pesq=4.0, snr_db=math.inf),
            EvalReport(condition="b", pesq=3.0, snr_db=10.0),
        ],
        "mean",
    )
    assert merged.pesq == 3.5
    assert merged.snr_infinite
    assert merged.wer_pct is None
    with pytest.raises(ParameterError):
        aggregate_reports([], "mean")
