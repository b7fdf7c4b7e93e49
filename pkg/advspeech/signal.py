"""
DSP kernel shared by the recognizer, the attacks, the enhancers and the metrics.

Array-level functions take and return `Waveform` records. The `*_graph` variants build the
same transforms out of `tensorgrad` ops (framing gather, window-folded cosine/sine bases,
mel matrix, DCT matrix) so gradients reach the waveform.
"""
import json
import logging
import struct
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal
from pydantic import BaseModel, ValidationError

from advspeech import tensorgrad as tg
from advspeech.datatypes import ChannelModel, FeatureMatrix, MfccConfig, Spectrogram, Waveform
from advspeech.errors import FormatError, ParameterError, TooShortError

logger = logging.getLogger(__name__)

PCM_SCALE = 32767.0
BAND_TRANSITION_HZ = 100.0
CHANNEL_DESCRIPTOR = "channel.json"


def _fail(message: str, error=ParameterError):
    return error(message, module="signal")


# framing


def n_frames(length: int, frame_len: int, hop: int) -> int:
    if frame_len < 1 or hop < 1:
        raise _fail(f"frame_len and hop must be >= 1, got {frame_len} and {hop}")
    if length < frame_len:
        raise _fail(
            f"signal too short: {length} samples, one frame needs {frame_len}", TooShortError
        )
    return 1 + (length - frame_len) // hop


@lru_cache(maxsize=None)
def hann(frame_len: int) -> np.ndarray:
    """Periodic Hann window."""
    window = scipy.signal.get_window("hann", frame_len)
    window.setflags(write=False)
    return window


def frame_signal(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    count = n_frames(samples.shape[0], frame_len, hop)
    index = hop * np.arange(count)[:, None] + np.arange(frame_len)[None, :]
    return samples[index]


def stft(w: Waveform, frame_len: int = 512, hop: int = 256) -> Spectrogram:
    frames = frame_signal(w.samples, frame_len, hop) * hann(frame_len)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    return Spectrogram(values=power, frame_len=frame_len, hop=hop)


def log_power(s: Spectrogram, floor: float = 1e-10) -> Spectrogram:
    if floor <= 0:
        raise _fail(f"floor must be positive, got {floor}")
    return Spectrogram(
        values=np.log(np.maximum(s.values, floor)), frame_len=s.frame_len, hop=s.hop, log_scale=True
    )


# fixed matrices


@lru_cache(maxsize=None)
def dft_bases(frame_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Window-folded real DFT bases, each (frame_len, frame_len // 2 + 1)."""
    n = np.arange(frame_len)[:, None]
    k = np.arange(frame_len // 2 + 1)[None, :]
    phase = 2.0 * np.pi * n * k / frame_len
    window = hann(frame_len)[:, None]
    cos, sin = window * np.cos(phase), -window * np.sin(phase)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int, frame_len: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters on the mel scale spanning 0..sample_rate/2, shape (bins, n_mels)."""
    freqs = np.fft.rfftfreq(frame_len, 1.0 / sample_rate_hz)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    bank = np.zeros((freqs.shape[0], n_mels))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - left) / (centre - left)
        falling = (right - freqs) / (right - centre)
        bank[:, m] = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


@lru_cache(maxsize=None)
def dct_matrix(n_mels: int, n_coeff: int) -> np.ndarray:
    """Orthonormal type-II DCT truncated to n_coeff, shape (n_mels, n_coeff)."""
    basis = scipy.fft.dct(np.eye(n_mels), type=2, norm="ortho", axis=0)[:n_coeff].T.copy()
    basis.setflags(write=False)
    return basis


# differentiable transforms


def power_spectrum_graph(x: tg.Tensor, frame_len: int = 512, hop: int = 256) -> tg.Tensor:
    n_frames(x.shape[0], frame_len, hop)
    cos, sin = dft_bases(frame_len)
    frames = tg.frame(x, frame_len, hop)
    real = tg.matmul(frames, tg.Tensor(cos))
    imag = tg.matmul(frames, tg.Tensor(sin))
    return real * real + imag * imag


def mfcc_graph(x: tg.Tensor, cfg: Optional[MfccConfig] = None) -> tg.Tensor:
    cfg = cfg or MfccConfig()
    if cfg.n_coeff > cfg.n_mels:
        raise _fail(f"n_coeff {cfg.n_coeff} exceeds n_mels {cfg.n_mels}")
    power = power_spectrum_graph(x, cfg.frame_len, cfg.hop)
    mel = tg.matmul(power, tg.Tensor(mel_filterbank(cfg.n_mels, cfg.frame_len, cfg.sample_rate_hz)))
    log_mel = tg.log(tg.clamp_min(mel, cfg.floor))
    return tg.matmul(log_mel, tg.Tensor(dct_matrix(cfg.n_mels, cfg.n_coeff)))


def mfcc(
    w: Waveform, frame_len: int = 512, hop: int = 256, n_mels: int = 26, n_coeff: int = 13
) -> FeatureMatrix:
    cfg = MfccConfig(
        frame_len=frame_len,
        hop=hop,
        n_mels=n_mels,
        n_coeff=n_coeff,
        sample_rate_hz=w.sample_rate_hz,
    )
    with tg.no_grad():
        values = mfcc_graph(tg.Tensor(w.samples), cfg).data
    return FeatureMatrix(values=values, n_coeff=n_coeff)


def istft_graph(
    log_pow: tg.Tensor, phase: np.ndarray, frame_len: int, hop: int, length: int
) -> tg.Tensor:
    """
    Rebuild a waveform from a (bins, frames) log-power tensor and a fixed (frames, bins) phase
    by windowed overlap-add, normalized by the summed squared window.
    """
    n_bins = frame_len // 2 + 1
    if log_pow.shape[0] != n_bins or phase.shape != (log_pow.shape[1], n_bins):
        raise _fail(f"istft: log-power {log_pow.shape} does not match phase {phase.shape}")
    magnitude = tg.transpose(tg.exp(tg.mul_scalar(log_pow, 0.5)))
    real = magnitude * tg.Tensor(np.cos(phase))
    imag = magnitude * tg.Tensor(np.sin(phase))
    cos_synth, sin_synth = _synthesis_bases(frame_len)
    frames = tg.matmul(real, tg.Tensor(cos_synth)) + tg.matmul(imag, tg.Tensor(sin_synth))
    frames = frames * tg.Tensor(np.tile(hann(frame_len), (phase.shape[0], 1)))
    signal = tg.overlap_add(frames, hop, length)
    norm = _window_norm(frame_len, hop, phase.shape[0], length)
    return signal * tg.Tensor(norm)


@lru_cache(maxsize=None)
def _synthesis_bases(frame_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse real DFT as two (bins, frame_len) matrices."""
    k = np.arange(frame_len // 2 + 1)[:, None]
    n = np.arange(frame_len)[None, :]
    weight = np.full((frame_len // 2 + 1, 1), 2.0)
    weight[0] = 1.0
    if frame_len % 2 == 0:
        weight[-1] = 1.0
    phase = 2.0 * np.pi * k * n / frame_len
    cos = weight * np.cos(phase) / frame_len
    sin = -weight * np.sin(phase) / frame_len
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _window_norm(frame_len: int, hop: int, count: int, length: int) -> np.ndarray:
    index = hop * np.arange(count)[:, None] + np.arange(frame_len)[None, :]
    squared = np.tile(hann(frame_len) ** 2, (count, 1))
    total = np.bincount(index.ravel(), weights=squared.ravel(), minlength=length)
    return np.where(total > 1e-8, 1.0 / np.maximum(total, 1e-8), 0.0)


# filtering


def _check_band(low_hz: float, high_hz: float, sample_rate_hz: int):
    nyquist = sample_rate_hz / 2.0
    if not 0.0 <= low_hz < high_hz <= nyquist:
        raise _fail(f"band edges must satisfy 0 <= {low_hz} < {high_hz} <= {nyquist}")


def band_mask(length: int, sample_rate_hz: int, low_hz: float, high_hz: float) -> np.ndarray:
    """
    Zero-phase rfft-domain gain with raised-cosine transitions centred on each edge.

    An edge at 0 Hz or at Nyquist leaves that side of the band open.
    """
    _check_band(low_hz, high_hz, sample_rate_hz)
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate_hz)
    half = BAND_TRANSITION_HZ / 2.0
    mask = np.ones_like(freqs)
    if low_hz > 0.0:
        rise = np.clip((freqs - (low_hz - half)) / BAND_TRANSITION_HZ, 0.0, 1.0)
        mask *= 0.5 - 0.5 * np.cos(np.pi * rise)
    if high_hz < sample_rate_hz / 2.0:
        fall = np.clip(((high_hz + half) - freqs) / BAND_TRANSITION_HZ, 0.0, 1.0)
        mask *= 0.5 - 0.5 * np.cos(np.pi * fall)
    return mask


def bandpass_array(samples: np.ndarray, sample_rate_hz: int, low_hz: float, high_hz: float):
    mask = band_mask(samples.shape[0], sample_rate_hz, low_hz, high_hz)
    if np.all(mask == 1.0):
        return samples.copy()
    return np.fft.irfft(np.fft.rfft(samples) * mask, n=samples.shape[0])


def bandpass(w: Waveform, low_hz: float = 1000.0, high_hz: float = 4000.0) -> Waveform:
    return w.with_samples(bandpass_array(w.samples, w.sample_rate_hz, low_hz, high_hz))


def bandpass_graph(x: tg.Tensor, sample_rate_hz: int, low_hz: float, high_hz: float) -> tg.Tensor:
    # a real, even mask makes the operator symmetric, so it is its own adjoint
    def apply(values):
        return bandpass_array(values, sample_rate_hz, low_hz, high_hz)

    return tg.linear_map(x, apply, apply, name="bandpass")


def convolve_array(samples: np.ndarray, h: np.ndarray) -> np.ndarray:
    if h.shape[0] == 0:
        raise _fail("impulse response is empty")
    if h.shape[0] == 1:
        return samples * h[0]
    return scipy.signal.fftconvolve(samples, h)[: samples.shape[0]]


def convolve_ir(w: Waveform, h: Waveform) -> Waveform:
    return w.with_samples(convolve_array(w.samples, h.samples))


def convolve_ir_graph(x: tg.Tensor, h: np.ndarray) -> tg.Tensor:
    length = x.shape[0]

    def adjoint(g):
        return scipy.signal.fftconvolve(g[::-1], h)[:length][::-1]

    return tg.linear_map(x, lambda values: convolve_array(values, h), adjoint, name="convolve_ir")


# noise and channel


def white_noise(length: int, sigma: float, seed: int) -> np.ndarray:
    """Gaussian draws from numpy's PCG64 generator seeded with `seed`."""
    if sigma < 0:
        raise _fail(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(length)
    return sigma * np.random.default_rng(seed).standard_normal(length)


def add_white_noise(w: Waveform, sigma: float, seed: int) -> Waveform:
    return w.with_samples(w.samples + white_noise(len(w), sigma, seed))


def _check_channel_inputs(x_len: int, v_len: int, channel: ChannelModel, ir_index: int):
    if x_len != v_len:
        raise _fail(f"perturbation length {v_len} does not match signal length {x_len}")
    if not 0 <= ir_index < len(channel.impulse_responses):
        raise _fail(
            f"ir_index {ir_index} outside bank of {len(channel.impulse_responses)} responses"
        )


def apply_channel(
    x: Waveform, v: Waveform, channel: ChannelModel, ir_index: int, seed: int
) -> Waveform:
    """Conv(x + BPF(v), h) + noise, with the band-pass on the perturbation only."""
    _check_channel_inputs(len(x), len(v), channel, ir_index)
    if x.sample_rate_hz != channel.sample_rate_hz:
        raise _fail(
            f"signal rate {x.sample_rate_hz} does not match channel rate {channel.sample_rate_hz}"
        )
    filtered = bandpass(v, channel.bpf_low_hz, channel.bpf_high_hz)
    played = x.with_samples(x.samples + filtered.samples)
    recorded = convolve_ir(played, channel.impulse_responses[ir_index])
    return add_white_noise(recorded, channel.noise_sigma, seed)


def channel_graph(
    x: np.ndarray, v: tg.Tensor, channel: ChannelModel, ir_index: int, seed: int
) -> tg.Tensor:
    _check_channel_inputs(x.shape[0], v.shape[0], channel, ir_index)
    filtered = bandpass_graph(v, channel.sample_rate_hz, channel.bpf_low_hz, channel.bpf_high_hz)
    played = tg.Tensor(x) + filtered
    recorded = convolve_ir_graph(played, channel.impulse_responses[ir_index].samples)
    noise = white_noise(x.shape[0], channel.noise_sigma, seed)
    return recorded + tg.Tensor(noise)


def identity_channel(sample_rate_hz: int = 16000) -> ChannelModel:
    """Unit impulse, open band, no noise: apply_channel gives x + v exactly."""
    return ChannelModel(
        impulse_responses=[Waveform(samples=[1.0], sample_rate_hz=sample_rate_hz)],
        bpf_low_hz=0.0,
        bpf_high_hz=sample_rate_hz / 2.0,
        noise_sigma=0.0,
        sample_rate_hz=sample_rate_hz,
    )


def default_channel(
    seed: int = 0,
    n_responses: int = 8,
    length: int = 256,
    noise_sigma: float = 0.002,
    sample_rate_hz: int = 16000,
) -> ChannelModel:
    """Bank of synthetic sparse-echo responses: direct path of 1 plus decaying echoes."""
    rng = np.random.default_rng(seed)
    responses = []
    for _ in range(n_responses):
        h = np.zeros(length)
        h[0] = 1.0
        n_echoes = int(rng.integers(3, 7))
        lags = rng.choice(np.arange(8, length), size=n_echoes, replace=False)
        for lag in lags:
            amplitude = rng.uniform(0.1, 0.5) * np.exp(-3.0 * lag / length)
            h[lag] += amplitude * rng.choice([-1.0, 1.0])
        responses.append(Waveform(samples=h, sample_rate_hz=sample_rate_hz))
    return ChannelModel(
        impulse_responses=responses, noise_sigma=noise_sigma, sample_rate_hz=sample_rate_hz
    )


class ChannelDescriptor(BaseModel):
    bpf_low_hz: float = 1000.0
    bpf_high_hz: float = 4000.0
    noise_sigma: float = 0.0
    ir_files: List[str]


def save_channel(channel: ChannelModel, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, h in enumerate(channel.impulse_responses):
        name = f"ir_{i:03d}.wav"
        wav_write(h, directory / name)
        files.append(name)
    descriptor = ChannelDescriptor(
        bpf_low_hz=channel.bpf_low_hz,
        bpf_high_hz=channel.bpf_high_hz,
        noise_sigma=channel.noise_sigma,
        ir_files=files,
    )
    path = directory / CHANNEL_DESCRIPTOR
    path.write_text(json.dumps(descriptor.dict(), indent=2))
    logger.info(f"Wrote channel bank of {len(files)} responses to {directory}")
    return path


def load_channel(path: Union[str, Path]) -> ChannelModel:
    path = Path(path)
    if path.is_dir():
        path = path / CHANNEL_DESCRIPTOR
    if not path.exists():
        raise _fail(f"channel descriptor {path} does not exist", FormatError)
    try:
        descriptor = ChannelDescriptor(**json.loads(path.read_text()))
    except (json.JSONDecodeError, ValidationError) as e:
        raise _fail(f"{path}: {e}", FormatError)
    responses = [wav_read(path.parent / name) for name in descriptor.ir_files]
    if not responses:
        raise _fail(f"{path}: ir_files is empty")
    return ChannelModel(
        impulse_responses=responses,
        bpf_low_hz=descriptor.bpf_low_hz,
        bpf_high_hz=descriptor.bpf_high_hz,
        noise_sigma=descriptor.noise_sigma,
        sample_rate_hz=responses[0].sample_rate_hz,
    )


# levels


def mean_power(samples: np.ndarray) -> float:
    return float(np.mean(samples * samples))


def rms(w: Waveform) -> float:
    return float(np.sqrt(mean_power(w.samples)))


def mix_at_snr(clean: Waveform, noise: np.ndarray, snr_db: float) -> Waveform:
    """Scale `noise` so that 10*log10(P_clean / P_noise) equals snr_db, then add it."""
    if noise.shape[0] != len(clean):
        raise _fail(f"noise length {noise.shape[0]} does not match signal length {len(clean)}")
    p_clean, p_noise = mean_power(clean.samples), mean_power(noise)
    if p_clean == 0.0 or p_noise == 0.0:
        raise _fail("cannot mix at a target SNR with a silent signal or silent noise")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean.with_samples(clean.samples + scale * noise)


# WAV I/O


def _read_chunks(data: bytes, path: Path) -> dict:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise _fail(f"{path}: riff header: not a RIFF/WAVE file", FormatError)
    chunks = {}
    offset = 12
    while offset + 8 <= len(data):
        chunk_id, size = struct.unpack("<4sI", data[offset : offset + 8])
        body = data[offset + 8 : offset + 8 + size]
        chunks.setdefault(chunk_id, (size, body))
        offset += 8 + size + (size & 1)
    return chunks


def wav_read(path: Union[str, Path]) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise _fail(f"{path}: file does not exist", FormatError)
    chunks = _read_chunks(path.read_bytes(), path)
    if b"fmt " not in chunks:
        raise _fail(f"{path}: fmt chunk: missing", FormatError)
    _, fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise _fail(f"{path}: fmt chunk: truncated to {len(fmt)} bytes", FormatError)
    audio_format, channels, sample_rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1:
        raise _fail(f"{path}: audio_format: expected 1 (PCM), got {audio_format}", FormatError)
    if channels != 1:
        raise _fail(f"{path}: channels: expected 1, got {channels}", FormatError)
    if bits != 16:
        raise _fail(f"{path}: bits_per_sample: expected 16, got {bits}", FormatError)
    if b"data" not in chunks:
        raise _fail(f"{path}: data chunk: missing", FormatError)
    declared, body = chunks[b"data"]
    if declared != len(body) or declared % 2:
        raise _fail(
            f"{path}: data chunk: header declares {declared} bytes but {len(body)} are present",
            FormatError,
        )
    rate, pcm = scipy.io.wavfile.read(path)
    return Waveform(samples=pcm.astype(np.float64) / PCM_SCALE, sample_rate_hz=rate)


def wav_write(w: Waveform, path: Union[str, Path]):
    clipped = int(np.count_nonzero(np.abs(w.samples) > 1.0))
    if clipped:
        logger.warning(
            f"{path}: clipping {clipped} samples beyond full scale "
            f"(peak {np.max(np.abs(w.samples)):.3f})"
        )
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * PCM_SCALE).astype(np.int16)
    scipy.io.wavfile.write(Path(path), w.sample_rate_hz, pcm)
