import math
from datetime import datetime
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, validator


class ArrayModel(BaseModel):
    class Config:
        arbitrary_types_allowed = True


class Waveform(ArrayModel):
    """Mono audio. Samples are nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = 16000

    @validator("samples", pre=True)
    def parse_samples(cls, value):
        samples = np.asarray(value, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be one-dimensional, got shape {samples.shape}")
        if samples.size < 1:
            raise ValueError("samples must hold at least one value")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        return samples

    @validator("sample_rate_hz")
    def positive_rate(cls, value):
        if value <= 0:
            raise ValueError("sample_rate_hz must be positive")
        return value

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples=samples, sample_rate_hz=self.sample_rate_hz)


class Spectrogram(ArrayModel):
    values: np.ndarray
    frame_len: int
    hop: int
    log_scale: bool = False

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[1])


class FeatureMatrix(ArrayModel):
    values: np.ndarray
    n_coeff: int = 13

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])


class ChannelModel(ArrayModel):
    """Playback/recording channel: impulse-response bank, band-pass edges and noise level."""

    impulse_responses: List[Waveform]
    bpf_low_hz: float = 1000.0
    bpf_high_hz: float = 4000.0
    noise_sigma: float = 0.0
    sample_rate_hz: int = 16000

    @validator("impulse_responses")
    def non_empty_bank(cls, value):
        if not value:
            raise ValueError("impulse_responses must not be empty")
        return value

    @validator("noise_sigma")
    def non_negative_sigma(cls, value):
        if value < 0:
            raise ValueError("noise_sigma must be >= 0")
        return value

    @validator("sample_rate_hz")
    def band_inside_nyquist(cls, value, values):
        low, high = values.get("bpf_low_hz"), values.get("bpf_high_hz")
        if low is not None and high is not None and not 0 <= low < high <= value / 2:
            raise ValueError(f"band edges must satisfy 0 <= {low} < {high} <= {value / 2}")
        return value


class Transcript(BaseModel):
    text: str

    def words(self) -> List[str]:
        return self.text.split()


class Vocabulary(BaseModel):
    characters: List[str] = Field(
        default_factory=lambda: list("abcdefghijklmnopqrstuvwxyz ") + ["_"]
    )
    blank_index: int = 27

    @validator("characters")
    def unique_characters(cls, value):
        if len(value) < 2:
            raise ValueError("vocabulary needs at least two symbols")
        if len(set(value)) != len(value):
            raise ValueError("vocabulary symbols must be unique")
        return value

    @validator("blank_index")
    def blank_in_range(cls, value, values):
        characters = values.get("characters") or []
        if not 0 <= value < len(characters):
            raise ValueError(f"blank_index {value} outside vocabulary of {len(characters)}")
        return value

    @property
    def size(self) -> int:
        return len(self.characters)

    def encode(self, text: str) -> List[int]:
        lookup = {ch: i for i, ch in enumerate(self.characters) if i != self.blank_index}
        missing = sorted({ch for ch in text if ch not in lookup})
        if missing:
            raise ValueError(f"characters {missing} are not in the vocabulary")
        return [lookup[ch] for ch in text]

    def decode(self, indices) -> str:
        return "".join(self.characters[i] for i in indices if i != self.blank_index)


class MfccConfig(BaseModel):
    frame_len: int = 512
    hop: int = 256
    n_mels: int = 26
    n_coeff: int = 13
    floor: float = 1e-10
    sample_rate_hz: int = 16000


class PerturbationBudget(BaseModel):
    delta_inf: float = 0.05
    penalty_weight: float = 0.0
    max_iters: int = 2000

    @validator("delta_inf")
    def finite_delta(cls, value):
        if not math.isfinite(value) or value < 0:
            raise ValueError("delta_inf must be finite and >= 0")
        return value

    @validator("penalty_weight")
    def non_negative_penalty(cls, value):
        if value < 0:
            raise ValueError("penalty_weight must be >= 0")
        return value

    @validator("max_iters")
    def at_least_one_iteration(cls, value):
        if value < 1:
            raise ValueError("max_iters must be >= 1")
        return value


class AdversarialResult(ArrayModel):
    attack: str
    perturbation: Waveform
    adversarial: Waveform
    decoded: Transcript
    target: Transcript
    success: bool
    snr_db: float
    iterations: int
    objective_history: List[float] = []
    fitness_history: List[float] = []
    channel_success_rate: Optional[float] = None


class EvoConfig(BaseModel):
    population: int = 40
    generations: int = 200
    mutation_sigma: float = 0.01
    crossover_rate: float = 0.5
    elite_count: int = 2
    weights: List[float] = [0.5, 0.5]
    channel_draws: int = 1
    delta_inf: float = 0.1
    block_len: int = 256
    tournament_size: int = 3
    selection: str = "scalar"
    workers: int = 1

    @validator("crossover_rate")
    def rate_in_unit_interval(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("crossover_rate must be in [0, 1]")
        return value

    @validator("elite_count")
    def elites_below_population(cls, value, values):
        population = values.get("population")
        if population is not None and value >= population:
            raise ValueError("elite_count must be smaller than population")
        return value

    @validator("weights")
    def weights_sum_to_one(cls, value):
        if len(value) != 2 or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("weights must be two values summing to 1")
        return value

    @validator("selection")
    def known_selection(cls, value):
        if value not in ("scalar", "pareto"):
            raise ValueError("selection must be 'scalar' or 'pareto'")
        return value


class UNetAtConfig(BaseModel):
    depth: int = 4
    base_filters: int = 8
    down_kernel: int = 15
    up_kernel: int = 5
    attention_dim: int = 16
    attention_window: int = 32
    input_len: int = 16384
    upsample_mode: str = "linear"

    @validator("input_len")
    def divisible_by_depth(cls, value, values):
        depth = values.get("depth")
        if depth is not None and value % (2**depth) != 0:
            raise ValueError(f"input_len {value} must be divisible by 2**{depth}")
        return value

    @validator("attention_dim", "attention_window")
    def at_least_one(cls, value):
        if value < 1:
            raise ValueError("attention sizes must be >= 1")
        return value

    @classmethod
    def full_scale(cls) -> "UNetAtConfig":
        return cls(depth=17, base_filters=8, input_len=2**17)


class DnnConfig(BaseModel):
    frame_len: int = 512
    hop: int = 256
    context: int = 3
    hidden: int = 256
    n_hidden_layers: int = 3
    floor: float = 1e-10


class TrainingConfig(BaseModel):
    alpha: float = 0.34
    fgsm_epsilon: float = 0.01
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    augment_with_attacks: bool = False

    @validator("alpha")
    def alpha_in_unit_interval(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        return value


class EvalReport(BaseModel):
    """One row of a quality/ASR table."""

    condition: str
    pesq: Optional[float] = None
    sti: Optional[float] = None
    stoi: Optional[float] = None
    snr_db: Optional[float] = None
    wer_pct: Optional[float] = None
    rosa_pct: Optional[float] = None

    @validator("sti")
    def sti_in_unit_interval(cls, value):
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError("sti must be in [0, 1]")
        return value

    @validator("pesq")
    def pesq_upper_bound(cls, value):
        if value is not None and value > 4.5:
            raise ValueError("pesq must be <= 4.5")
        return value

    @property
    def snr_infinite(self) -> bool:
        return self.snr_db is not None and math.isinf(self.snr_db)


class CorpusSpec(BaseModel):
    n_utterances: int = 40
    utterance_len: int = 16384
    phrases: List[str] = [
        "open the window",
        "close the door",
        "turn on the radio",
        "stop the music",
        "call home",
        "read the news",
        "play a song",
        "lock the gate",
        "dim the lights",
        "start the car",
    ]
    snr_levels_db: List[float] = [15.0, 10.0, 5.0, 0.0]
    noise_kinds: List[str] = ["white", "pink", "babble"]
    sample_rate_hz: int = 16000
    seed: int = 0

    @validator("phrases")
    def phrases_present(cls, value):
        if not value:
            raise ValueError("phrases must not be empty")
        return value

    @validator("snr_levels_db", each_item=True)
    def finite_levels(cls, value):
        if not math.isfinite(value):
            raise ValueError("snr levels must be finite")
        return value

    @validator("noise_kinds", each_item=True)
    def known_noise(cls, value):
        if value not in ("white", "pink", "babble"):
            raise ValueError(f"unknown noise kind {value}")
        return value


class ExperimentManifest(BaseModel):
    command: str
    argv: List[str]
    config_hash: str
    config: dict
    seeds: Dict[str, int] = {}
    checkpoint_hashes: Dict[str, str] = {}
    outputs: List[str] = []
    started_at: datetime
    finished_at: Optional[datetime] = None
