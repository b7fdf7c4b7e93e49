"""
Evaluation indices: SNR, PESQ-core, STI, STOI, WER, edit similarity and report bundling.

PESQ-core keeps the standard's aggregation (4.5 - 0.1 d_sym - 0.0309 d_asym) over a
simplified disturbance model; it is labelled pesq_core everywhere and makes no P.862 claim.
"""
import logging
import math
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.signal

from advspeech.datatypes import EvalReport, Waveform
from advspeech.errors import (
    AdvSpeechError,
    ContractError,
    InfiniteSnrError,
    InsufficientModulationError,
    MetricError,
    ParameterError,
    SilentReferenceError,
    TooShortError,
)
from advspeech.signal import frame_signal, hann

logger = logging.getLogger(__name__)

Signal = Union[Waveform, np.ndarray]

PESQ_A0, PESQ_A1, PESQ_A2 = 4.5, -0.1, -0.0309
PESQ_RANGE = (-0.5, 4.5)
PESQ_BANDS = 20
PESQ_EXPONENT = 0.23
PESQ_MASK_FRACTION = 0.1

STI_BANDS_HZ = [125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0]
STI_WEIGHTS = np.array([0.085, 0.127, 0.230, 0.233, 0.309, 0.224])
STI_WEIGHTS = STI_WEIGHTS / STI_WEIGHTS.sum()
STI_MODULATION_HZ = [0.63, 0.8, 1.0, 1.25, 1.6, 2.0, 2.5, 3.15, 4.0, 5.0, 6.3, 8.0, 10.0, 12.5]
STI_ENVELOPE_CUTOFF_HZ = 50.0

STOI_FRAME, STOI_HOP, STOI_NFFT = 400, 200, 512
STOI_BANDS, STOI_LOWEST_HZ = 15, 150.0
STOI_SEGMENT = 30
STOI_SILENCE_DB = 40.0
STOI_CLIP = 1.0 + 10.0 ** (15.0 / 20.0)


def _samples(x: Signal) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _rate(*signals: Signal) -> int:
    for s in signals:
        if isinstance(s, Waveform):
            return s.sample_rate_hz
    return 16000


def _same_length(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ParameterError(
            f"{op}: length mismatch {a.shape[0]} vs {b.shape[0]}", module="metrics"
        )


# SNR


def snr_db(reference: Signal, perturbation: Signal) -> float:
    x, v = _samples(reference), _samples(perturbation)
    _same_length(x, v, "snr_db")
    p_x, p_v = float(np.mean(x * x)), float(np.mean(v * v))
    if p_v == 0.0:
        raise InfiniteSnrError(
            "snr_db: perturbation has zero power (infinite SNR)", module="metrics"
        )
    if p_x == 0.0:
        raise SilentReferenceError("snr_db: reference has zero power", module="metrics")
    return 10.0 * math.log10(p_x / p_v)


# PESQ-core


def _bark(hz):
    return 26.81 * np.asarray(hz) / (1960.0 + np.asarray(hz)) - 0.53


def _bark_to_hz(bark):
    return 1960.0 * (np.asarray(bark) + 0.53) / (26.28 - np.asarray(bark))


def bark_band_matrix(frame_len: int, sample_rate_hz: int, n_bands: int = PESQ_BANDS) -> np.ndarray:
    """(bins, n_bands) 0/1 matrix grouping rfft bins into bands equally spaced in Bark."""
    freqs = np.fft.rfftfreq(frame_len, 1.0 / sample_rate_hz)
    edges = _bark_to_hz(np.linspace(_bark(50.0), _bark(sample_rate_hz / 2.0), n_bands + 1))
    edges[-1] = sample_rate_hz / 2.0 + 1.0
    matrix = np.zeros((freqs.shape[0], n_bands))
    for b in range(n_bands):
        matrix[(freqs >= edges[b]) & (freqs < edges[b + 1]), b] = 1.0
    return matrix


def _bark_loudness(samples: np.ndarray, sample_rate_hz: int, frame_len=512, hop=256):
    frames = frame_signal(samples, frame_len, hop) * hann(frame_len)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return (power @ bark_band_matrix(frame_len, sample_rate_hz)) ** PESQ_EXPONENT


def pesq_disturbances(clean: Signal, degraded: Signal):
    """Return (d_sym, d_asym) averaged over frames."""
    x, y = _samples(clean), _samples(degraded)
    _same_length(x, y, "pesq_core")
    rate = _rate(clean, degraded)
    ref, deg = _bark_loudness(x, rate), _bark_loudness(y, rate)
    diff = np.maximum(0.0, np.abs(deg - ref) - PESQ_MASK_FRACTION * np.maximum(deg, ref))
    d_sym = np.sqrt(np.sum(diff**2, axis=1))
    weight = np.minimum(3.0, ((deg + 50.0) / (ref + 50.0)) ** 1.2)
    added = np.where(deg > ref, weight * diff, 0.0)
    d_asym = np.sqrt(np.sum(added**2, axis=1))
    return float(np.mean(d_sym)), float(np.mean(d_asym))


def pesq_from_disturbances(d_sym: float, d_asym: float) -> float:
    score = PESQ_A0 + PESQ_A1 * d_sym + PESQ_A2 * d_asym
    return float(np.clip(score, *PESQ_RANGE))


def pesq_core(clean: Signal, degraded: Signal) -> float:
    return pesq_from_disturbances(*pesq_disturbances(clean, degraded))


# STI


def sti_from_modulation_ratios(m: np.ndarray) -> float:
    """m: (bands, modulation frequencies) transfer ratios."""
    m = np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        apparent = np.where(
            m >= 1.0, 15.0, np.where(m <= 0.0, -15.0, 10.0 * np.log10(m / (1.0 - m)))
        )
    ti = (np.clip(apparent, -15.0, 15.0) + 15.0) / 30.0
    return float(np.clip(np.sum(STI_WEIGHTS * ti.mean(axis=1)), 0.0, 1.0))


def _band_envelopes(samples: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    smoother = scipy.signal.butter(
        4, STI_ENVELOPE_CUTOFF_HZ, btype="lowpass", fs=sample_rate_hz, output="sos"
    )
    envelopes = []
    for centre in STI_BANDS_HZ:
        band = scipy.signal.butter(
            4,
            [centre / np.sqrt(2.0), centre * np.sqrt(2.0)],
            btype="bandpass",
            fs=sample_rate_hz,
            output="sos",
        )
        filtered = scipy.signal.sosfiltfilt(band, samples)
        envelopes.append(np.maximum(scipy.signal.sosfiltfilt(smoother, filtered**2), 0.0))
    return np.array(envelopes)


def _modulation_depths(envelopes: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    t = np.arange(envelopes.shape[1]) / sample_rate_hz
    total = envelopes.sum(axis=1)
    depths = np.empty((envelopes.shape[0], len(STI_MODULATION_HZ)))
    for i, f in enumerate(STI_MODULATION_HZ):
        depths[:, i] = np.abs(envelopes @ np.exp(-2j * np.pi * f * t)) / np.maximum(total, 1e-300)
    return depths


def sti(clean: Signal, degraded: Signal) -> float:
    x, y = _samples(clean), _samples(degraded)
    _same_length(x, y, "sti")
    rate = _rate(clean, degraded)
    clean_env = _band_envelopes(x, rate)
    silent = [STI_BANDS_HZ[i] for i, e in enumerate(clean_env) if e.sum() <= 1e-12]
    if silent:
        raise InsufficientModulationError(
            f"sti: clean signal is silent in the {silent} Hz bands", module="metrics"
        )
    clean_depth = _modulation_depths(clean_env, rate)
    if np.any(clean_depth <= 1e-12):
        raise InsufficientModulationError(
            "sti: clean signal carries no modulation", module="metrics"
        )
    ratios = _modulation_depths(_band_envelopes(y, rate), rate) / clean_depth
    return sti_from_modulation_ratios(ratios)


# STOI


def third_octave_matrix(sample_rate_hz: int, nfft: int = STOI_NFFT) -> np.ndarray:
    freqs = np.fft.rfftfreq(nfft, 1.0 / sample_rate_hz)
    centres = STOI_LOWEST_HZ * 2.0 ** (np.arange(STOI_BANDS) / 3.0)
    matrix = np.zeros((STOI_BANDS, freqs.shape[0]))
    for j, cf in enumerate(centres):
        matrix[j, (freqs >= cf * 2.0 ** (-1 / 6)) & (freqs < cf * 2.0 ** (1 / 6))] = 1.0
    return matrix


def _correlation(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    x = x - x.mean()
    y = y - y.mean()
    nx, ny = float(x @ x), float(y @ y)
    if nx == 0.0:
        return None
    if ny == 0.0:
        return 0.0
    return float(x @ y) / math.sqrt(nx * ny)


def stoi(clean: Signal, degraded: Signal) -> float:
    x, y = _samples(clean), _samples(degraded)
    _same_length(x, y, "stoi")
    rate = _rate(clean, degraded)
    window = hann(STOI_FRAME)
    x_frames = frame_signal(x, STOI_FRAME, STOI_HOP) * window
    y_frames = frame_signal(y, STOI_FRAME, STOI_HOP) * window
    energy = np.sqrt(np.sum(x_frames**2, axis=1))
    if energy.max() == 0.0:
        raise SilentReferenceError("stoi: clean signal is silent", module="metrics")
    with np.errstate(divide="ignore"):
        level = 20.0 * np.log10(energy)
    keep = level > level.max() - STOI_SILENCE_DB
    if keep.sum() < STOI_SEGMENT:
        raise TooShortError(
            f"stoi: {int(keep.sum())} frames after silence removal, need {STOI_SEGMENT}",
            module="metrics",
        )
    bands = third_octave_matrix(rate)
    x_bands = np.sqrt(bands @ (np.abs(np.fft.rfft(x_frames[keep], STOI_NFFT, axis=1)) ** 2).T)
    y_bands = np.sqrt(bands @ (np.abs(np.fft.rfft(y_frames[keep], STOI_NFFT, axis=1)) ** 2).T)
    scores = []
    for end in range(STOI_SEGMENT, x_bands.shape[1] + 1):
        x_seg = x_bands[:, end - STOI_SEGMENT : end]
        y_seg = y_bands[:, end - STOI_SEGMENT : end]
        for j in range(STOI_BANDS):
            norm_y = np.linalg.norm(y_seg[j])
            alpha = np.linalg.norm(x_seg[j]) / norm_y if norm_y > 0 else 0.0
            clipped = np.minimum(alpha * y_seg[j], STOI_CLIP * x_seg[j])
            score = _correlation(x_seg[j], clipped)
            if score is not None:
                scores.append(score)
    if not scores:
        raise TooShortError("stoi: no band segment carries clean energy", module="metrics")
    return float(np.mean(scores))


# text


def levenshtein(a: Sequence, b: Sequence) -> int:
    previous = list(range(len(b) + 1))
    for i, item_a in enumerate(a, start=1):
        current = [i]
        for j, item_b in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (item_a != item_b))
            )
        previous = current
    return previous[-1]


def _words(text: Union[str, Sequence[str]]) -> List[str]:
    return text.split() if isinstance(text, str) else list(text)


def wer(reference: Union[str, Sequence[str]], hypothesis: Union[str, Sequence[str]]) -> float:
    ref, hyp = _words(reference), _words(hypothesis)
    if not ref:
        raise ContractError("wer: reference is empty", module="metrics")
    return 100.0 * levenshtein(ref, hyp) / len(ref)


def edit_similarity(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


# reports


def residual_snr_db(clean: Signal, degraded: Signal) -> float:
    """SNR of clean against (degraded - clean); identical signals give +inf."""
    x, y = _samples(clean), _samples(degraded)
    _same_length(x, y, "snr_db")
    if np.array_equal(x, y):
        return math.inf
    return snr_db(x, y - x)


def _attributed(field: str, fn, *args):
    try:
        return fn(*args)
    except AdvSpeechError as e:
        raise MetricError(field, e) from e


def evaluate_bundle(
    clean: Waveform,
    degraded: Waveform,
    reference_text: Optional[str] = None,
    hypothesis_text: Optional[str] = None,
    target_text: Optional[str] = None,
    condition: str = "degraded",
) -> EvalReport:
    snr = _attributed("snr_db", residual_snr_db, clean, degraded)
    report = EvalReport(
        condition=condition,
        pesq=_attributed("pesq", pesq_core, clean, degraded),
        sti=_attributed("sti", sti, clean, degraded),
        stoi=_attributed("stoi", stoi, clean, degraded),
        snr_db=snr,
    )
    if reference_text is not None and hypothesis_text is not None:
        report.wer_pct = _attributed("wer_pct", wer, reference_text, hypothesis_text)
    if target_text is not None and hypothesis_text is not None:
        report.rosa_pct = 100.0 if hypothesis_text == target_text else 0.0
    logger.debug(f"Evaluated {condition}: {report}")
    return report


def aggregate_reports(reports: Sequence[EvalReport], condition: str) -> EvalReport:
    """Average each populated field over the reports; infinite SNRs propagate."""
    if not reports:
        raise ParameterError("aggregate_reports: no reports", module="metrics")
    merged = {}
    for field in ("pesq", "sti", "stoi", "snr_db", "wer_pct", "rosa_pct"):
        values = [getattr(r, field) for r in reports if getattr(r, field) is not None]
        merged[field] = float(np.mean(values)) if values else None
    return EvalReport(condition=condition, **merged)
