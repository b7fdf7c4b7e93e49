"""
Synthetic command corpus.

Every letter is a voiced segment of three harmonics placed near fixed formant targets on a
per-letter base frequency; spaces are short silences. Noisy variants mix white, pink or
babble-like noise into the clean utterance at each requested SNR.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from advspeech.datatypes import ArrayModel, CorpusSpec, Vocabulary, Waveform
from advspeech.errors import FormatError, ParameterError
from advspeech.signal import mix_at_snr, wav_read, wav_write

logger = logging.getLogger(__name__)

CHAR_LEN = 768
WORD_GAP = 512
FADE = 96
PEAK = 0.5
HARMONIC_GAINS = (1.0, 0.6, 0.35)
BABBLE_TALKERS = 4
CHAR_TABLE_SEED = 7919
LETTERS = "abcdefghijklmnopqrstuvwxyz"

CORPUS_FILE = "corpus.json"
TRANSCRIPTS_FILE = "transcripts.csv"


def _char_table() -> Dict[str, Tuple[float, Tuple[float, float, float]]]:
    rng = np.random.default_rng(CHAR_TABLE_SEED)
    f0s = np.linspace(120.0, 300.0, len(LETTERS))
    rng.shuffle(f0s)
    table = {}
    for letter, f0 in zip(LETTERS, f0s):
        formants = (rng.uniform(300, 900), rng.uniform(900, 2500), rng.uniform(2500, 3800))
        table[letter] = (float(f0), formants)
    return table


CHAR_TABLE = _char_table()


class NoisyVariant(ArrayModel):
    snr_db: float
    noise_kind: str
    waveform: Waveform


class Utterance(ArrayModel):
    utt_id: str
    text: str
    clean: Waveform
    noisy: List[NoisyVariant] = []

    def variant(self, snr_db: float) -> Waveform:
        for v in self.noisy:
            if v.snr_db == snr_db:
                return v.waveform
        raise ParameterError(f"{self.utt_id} has no {snr_db} dB variant", module="corpus")


class Corpus(ArrayModel):
    spec: CorpusSpec
    utterances: List[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def split(self, held_out: int) -> Tuple[List[Utterance], List[Utterance]]:
        """(train, held-out): the held-out part is the last `held_out` utterances."""
        if not 0 <= held_out < len(self.utterances):
            raise ParameterError(
                f"cannot hold out {held_out} of {len(self.utterances)} utterances", module="corpus"
            )
        cut = len(self.utterances) - held_out
        return self.utterances[:cut], self.utterances[cut:]


def asr_examples(
    utterances: Sequence[Utterance], noisy_snr_db: Sequence[float] = ()
) -> List[Tuple[Waveform, str]]:
    examples = [(u.clean, u.text) for u in utterances]
    for snr in noisy_snr_db:
        examples.extend((u.variant(snr), u.text) for u in utterances)
    return examples


def enhancer_pairs(
    utterances: Sequence[Utterance], snr_levels_db: Optional[Sequence[float]] = None
) -> List[Tuple[Waveform, Waveform]]:
    """(mixture, clean) pairs for every utterance at every selected SNR level."""
    pairs = []
    for u in utterances:
        for v in u.noisy:
            if snr_levels_db is None or v.snr_db in snr_levels_db:
                pairs.append((v.waveform, u.clean))
    return pairs


# synthesis


def _envelope(length: int) -> np.ndarray:
    env = np.ones(length)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(FADE) / FADE)
    env[:FADE] = ramp
    env[-FADE:] = ramp[::-1]
    return env


def synth_letter(letter: str, rng: np.random.Generator, sample_rate_hz: int) -> np.ndarray:
    f0, formants = CHAR_TABLE[letter]
    f0 = f0 * (1.0 + rng.uniform(-0.03, 0.03))
    t = np.arange(CHAR_LEN) / sample_rate_hz
    out = np.zeros(CHAR_LEN)
    for gain, formant in zip(HARMONIC_GAINS, formants):
        harmonic = max(1, round(formant / f0)) * f0
        out += gain * np.sin(2 * np.pi * harmonic * t + rng.uniform(0, 2 * np.pi))
    return out * _envelope(CHAR_LEN)


def synth_phrase(
    text: str, rng: np.random.Generator, length: int, sample_rate_hz: int = 16000
) -> np.ndarray:
    for ch in text:
        if ch != " " and ch not in CHAR_TABLE:
            raise ParameterError(f"phrase {text!r}: no sound for {ch!r}", module="corpus")
    lead = int(rng.integers(256, 1025))
    pieces = [np.zeros(lead)]
    for ch in text:
        pieces.append(np.zeros(WORD_GAP) if ch == " " else synth_letter(ch, rng, sample_rate_hz))
    body = np.concatenate(pieces)
    if body.shape[0] > length:
        raise ParameterError(
            f"phrase {text!r} needs {body.shape[0]} samples but utterances hold {length}",
            module="corpus",
        )
    out = np.zeros(length)
    out[: body.shape[0]] = body
    return out * (PEAK / np.max(np.abs(out)))


def make_noise(
    kind: str,
    length: int,
    rng: np.random.Generator,
    phrases: Sequence[str] = (),
    sample_rate_hz: int = 16000,
) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(length)
    if kind == "pink":
        spectrum = np.fft.rfft(rng.standard_normal(length))
        freqs = np.fft.rfftfreq(length)
        spectrum[0] = 0.0
        spectrum[1:] /= np.sqrt(freqs[1:])
        return np.fft.irfft(spectrum, n=length)
    if kind == "babble":
        if not phrases:
            raise ParameterError("babble noise needs a phrase inventory", module="corpus")
        out = np.zeros(length)
        for _ in range(BABBLE_TALKERS):
            phrase = phrases[int(rng.integers(len(phrases)))]
            talker = synth_phrase(phrase, rng, length, sample_rate_hz)
            out += np.roll(talker, int(rng.integers(length)))
        return out
    raise ParameterError(f"unknown noise kind {kind}", module="corpus")


def gen_corpus(spec: Optional[CorpusSpec] = None) -> Corpus:
    spec = spec or CorpusSpec()
    vocab = Vocabulary()
    for phrase in spec.phrases:
        try:
            vocab.encode(phrase)
        except ValueError as e:
            raise ParameterError(f"phrase {phrase!r}: {e}", module="corpus") from e
    rng = np.random.default_rng(spec.seed)
    utterances = []
    for i in range(spec.n_utterances):
        text = spec.phrases[i % len(spec.phrases)]
        clean = Waveform(
            samples=synth_phrase(text, rng, spec.utterance_len, spec.sample_rate_hz),
            sample_rate_hz=spec.sample_rate_hz,
        )
        kind = spec.noise_kinds[i % len(spec.noise_kinds)]
        mixtures = []
        for snr in spec.snr_levels_db:
            noise = make_noise(kind, len(clean), rng, spec.phrases, spec.sample_rate_hz)
            mixtures.append((snr, mix_at_snr(clean, noise, snr)))
        loudest = max([np.max(np.abs(m.samples)) for _, m in mixtures], default=0.0)
        if loudest > 1.0:
            # clean and mixtures share one gain, so every SNR is unchanged
            logger.debug(f"utt_{i:03d}: scaling by {1.0 / loudest:.3f} to stay within full scale")
            clean = clean.with_samples(clean.samples / loudest)
            mixtures = [(snr, m.with_samples(m.samples / loudest)) for snr, m in mixtures]
        noisy = [NoisyVariant(snr_db=snr, noise_kind=kind, waveform=m) for snr, m in mixtures]
        utterances.append(Utterance(utt_id=f"utt_{i:03d}", text=text, clean=clean, noisy=noisy))
    logger.info(
        f"Synthesized {len(utterances)} utterances x {len(spec.snr_levels_db)} noise levels"
    )
    return Corpus(spec=spec, utterances=utterances)


# persistence


def _noisy_name(utt_id: str, snr_db: float) -> str:
    return f"noisy/{utt_id}_snr{snr_db:g}.wav"


def write_corpus(corpus: Corpus, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    written = []
    entries = []
    for u in corpus.utterances:
        clean_name = f"clean/{u.utt_id}.wav"
        wav_write(u.clean, out_dir / clean_name)
        written.append(out_dir / clean_name)
        variants = []
        for v in u.noisy:
            name = _noisy_name(u.utt_id, v.snr_db)
            wav_write(v.waveform, out_dir / name)
            written.append(out_dir / name)
            variants.append({"snr_db": v.snr_db, "noise_kind": v.noise_kind, "file": name})
        entries.append({"id": u.utt_id, "text": u.text, "file": clean_name, "noisy": variants})
    transcripts = pd.DataFrame(
        [{"file": e["file"], "text": e["text"]} for e in entries], columns=["file", "text"]
    )
    transcripts.to_csv(out_dir / TRANSCRIPTS_FILE, index=False)
    (out_dir / CORPUS_FILE).write_text(
        json.dumps({"spec": corpus.spec.dict(), "utterances": entries}, indent=2)
    )
    written += [out_dir / TRANSCRIPTS_FILE, out_dir / CORPUS_FILE]
    logger.info(f"Wrote corpus of {len(corpus)} utterances to {out_dir}")
    return written


def read_corpus_index(corpus_dir: Union[str, Path]) -> dict:
    path = Path(corpus_dir) / CORPUS_FILE
    if not path.exists():
        raise FormatError(f"{path}: corpus index does not exist", module="corpus")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}", module="corpus") from e


def load_corpus(corpus_dir: Union[str, Path]) -> Corpus:
    corpus_dir = Path(corpus_dir)
    index = read_corpus_index(corpus_dir)
    utterances = []
    for entry in index["utterances"]:
        noisy = [
            NoisyVariant(
                snr_db=v["snr_db"],
                noise_kind=v["noise_kind"],
                waveform=wav_read(corpus_dir / v["file"]),
            )
            for v in entry["noisy"]
        ]
        utterances.append(
            Utterance(
                utt_id=entry["id"],
                text=entry["text"],
                clean=wav_read(corpus_dir / entry["file"]),
                noisy=noisy,
            )
        )
    return Corpus(spec=CorpusSpec(**index["spec"]), utterances=utterances)
