"""
Toy CTC recognizer: standardized MFCC frames -> three 1-D convolutions -> per-frame logits.

The whole path from waveform to loss is a tensorgrad graph, so attacks can differentiate
the CTC loss with respect to the input samples.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, validator

from advspeech import tensorgrad as tg
from advspeech.datatypes import MfccConfig, TrainingConfig, Transcript, Vocabulary, Waveform
from advspeech.errors import InfeasibleAlignmentError, ParameterError
from advspeech.metrics import wer
from advspeech.signal import mfcc_graph
from advspeech.utils.ntv1 import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

Example = Tuple[Waveform, str]


class AsrTrainingConfig(BaseModel):
    epochs: int = 400
    lr: float = 3e-3
    seed: int = 0
    widths: List[int] = [32, 32]
    kernel: int = 5
    noisy_snr_db: List[float] = [10.0]

    @validator("epochs")
    def at_least_one_epoch(cls, value):
        if value < 1:
            raise ValueError("epochs must be >= 1")
        return value


class SurrogateAsr:
    def __init__(
        self,
        params: tg.ParameterSet,
        vocab: Vocabulary,
        mfcc_cfg: MfccConfig,
        feature_mean: np.ndarray,
        feature_std: np.ndarray,
        kernel: int = 5,
    ):
        self.params = params
        self.vocab = vocab
        self.mfcc_cfg = mfcc_cfg
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.kernel = kernel
        self.loss_history: List[float] = []

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def widths(self) -> List[int]:
        return [self.params[f"conv{i}.weight"].shape[0] for i in range(self.n_layers - 1)]


def init_asr(
    vocab: Optional[Vocabulary] = None,
    mfcc_cfg: Optional[MfccConfig] = None,
    widths: Sequence[int] = (32, 32),
    kernel: int = 5,
    seed: int = 0,
) -> SurrogateAsr:
    vocab = vocab or Vocabulary()
    mfcc_cfg = mfcc_cfg or MfccConfig()
    rng = np.random.default_rng(seed)
    channels = [mfcc_cfg.n_coeff, *widths, vocab.size]
    params = tg.ParameterSet()
    for i, (c_in, c_out) in enumerate(zip(channels, channels[1:])):
        scale = np.sqrt(2.0 / (c_in * kernel))
        params.add(f"conv{i}.weight", rng.normal(0.0, scale, size=(c_out, c_in, kernel)))
        params.add(f"conv{i}.bias", np.zeros(c_out))
    return SurrogateAsr(
        params,
        vocab,
        mfcc_cfg,
        np.zeros(mfcc_cfg.n_coeff),
        np.ones(mfcc_cfg.n_coeff),
        kernel,
    )


def _as_tensor(w: Union[Waveform, tg.Tensor, np.ndarray]) -> tg.Tensor:
    if isinstance(w, Waveform):
        return tg.Tensor(w.samples)
    return tg.as_tensor(w)


def features_graph(model: SurrogateAsr, x: tg.Tensor) -> tg.Tensor:
    """Standardized MFCC as a (n_coeff, frames) tensor."""
    feats = mfcc_graph(x, model.mfcc_cfg)
    n = feats.shape[0]
    centred = feats - tg.Tensor(np.tile(model.feature_mean, (n, 1)))
    scaled = centred * tg.Tensor(np.tile(1.0 / model.feature_std, (n, 1)))
    return tg.transpose(scaled)


def conv_stack(params: tg.ParameterSet, feats: tg.Tensor) -> tg.Tensor:
    """(n_coeff, frames) features -> (frames, k) logits."""
    h = feats
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = tg.conv1d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        if i < n_layers - 1:
            h = tg.leaky_relu(h)
    return tg.transpose(h)


def asr_forward(model: SurrogateAsr, w: Union[Waveform, tg.Tensor]) -> tg.Tensor:
    return conv_stack(model.params, features_graph(model, _as_tensor(w)))


def encode_target(vocab: Vocabulary, target: Union[Transcript, str]) -> List[int]:
    text = target.text if isinstance(target, Transcript) else target
    try:
        return vocab.encode(text)
    except ValueError as e:
        raise ParameterError(str(e), module="asr") from e


def check_alignment(n_frames: int, labels: Sequence[int]):
    needed = tg.ctc_min_frames(list(labels))
    if needed > n_frames:
        raise InfeasibleAlignmentError(
            f"target needs {needed} frames but only {n_frames} are available", module="asr"
        )


def ctc_loss(
    logits: tg.Tensor, target: Union[Transcript, str], vocab: Optional[Vocabulary] = None
) -> tg.Tensor:
    vocab = vocab or Vocabulary()
    labels = encode_target(vocab, target)
    check_alignment(logits.shape[0], labels)
    return tg.ctc_nll(tg.log_softmax(logits), labels, vocab.blank_index)


def greedy_decode(logits: Union[tg.Tensor, np.ndarray], vocab: Optional[Vocabulary] = None):
    vocab = vocab or Vocabulary()
    values = logits.data if isinstance(logits, tg.Tensor) else np.asarray(logits)
    best = np.argmax(values, axis=1)
    collapsed = [int(label) for i, label in enumerate(best) if i == 0 or label != best[i - 1]]
    return Transcript(text=vocab.decode(collapsed))


def transcribe(model: SurrogateAsr, w: Waveform) -> Transcript:
    with tg.no_grad():
        return greedy_decode(asr_forward(model, w), model.vocab)


def evaluate_wer(model: SurrogateAsr, examples: Sequence[Example]) -> float:
    if not examples:
        raise ParameterError("no examples to evaluate", module="asr")
    scores = [wer(text, transcribe(model, w).text) for w, text in examples]
    return float(np.mean(scores))


def _standardization(model: SurrogateAsr, examples: Sequence[Example]):
    with tg.no_grad():
        stacked = np.concatenate(
            [mfcc_graph(tg.Tensor(w.samples), model.mfcc_cfg).data for w, _ in examples]
        )
    std = stacked.std(axis=0)
    return stacked.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def _prepare(model: SurrogateAsr, examples: Sequence[Example]):
    prepared = []
    with tg.no_grad():
        for w, text in examples:
            feats = features_graph(model, tg.Tensor(w.samples))
            labels = encode_target(model.vocab, text)
            check_alignment(feats.shape[1], labels)
            prepared.append((feats.detach(), labels))
    return prepared


def _batch_loss(model: SurrogateAsr, prepared) -> tg.Tensor:
    total = None
    for feats, labels in prepared:
        logits = conv_stack(model.params, feats)
        loss = tg.ctc_nll(tg.log_softmax(logits), labels, model.vocab.blank_index)
        total = loss if total is None else total + loss
    return total * (1.0 / len(prepared))


def train_surrogate(
    examples: Sequence[Example],
    cfg: Optional[AsrTrainingConfig] = None,
    vocab: Optional[Vocabulary] = None,
    mfcc_cfg: Optional[MfccConfig] = None,
) -> SurrogateAsr:
    """Full-batch Adam on the mean CTC loss; one step per epoch."""
    cfg = cfg or AsrTrainingConfig()
    if not examples:
        raise ParameterError("cannot train on an empty corpus", module="asr")
    model = init_asr(vocab, mfcc_cfg, cfg.widths, cfg.kernel, cfg.seed)
    model.feature_mean, model.feature_std = _standardization(model, examples)
    prepared = _prepare(model, examples)
    state = tg.AdamState(model.params, lr=cfg.lr)
    for epoch in range(cfg.epochs):
        model.params.zero_grad()
        loss = _batch_loss(model, prepared)
        model.loss_history.append(loss.item())
        tg.backward(loss)
        tg.adam_step(model.params, state)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            logger.info(f"asr epoch {epoch}: mean ctc loss {model.loss_history[-1]:.4f}")
    return model


def adversarial_finetune(
    model: SurrogateAsr, examples: Sequence[Example], cfg: Optional[TrainingConfig] = None
) -> SurrogateAsr:
    """
    Fine-tune on alpha * J(x) + (1 - alpha) * J(x + eps * sign(grad_x J)) with the CTC loss as J.
    Returns a new model; the input model is left untouched.
    """
    from advspeech.attack import fgsm_perturb

    cfg = cfg or TrainingConfig()
    if not examples:
        raise ParameterError("cannot fine-tune on an empty corpus", module="asr")
    tuned = SurrogateAsr(
        model.params.copy(),
        model.vocab,
        model.mfcc_cfg,
        model.feature_mean,
        model.feature_std,
        model.kernel,
    )
    state = tg.AdamState(tuned.params, lr=cfg.lr)
    for epoch in range(cfg.epochs):
        perturbed = [None] * len(examples)
        if cfg.alpha < 1.0:
            perturbed = [
                fgsm_perturb(
                    lambda x, text=text: ctc_loss(asr_forward(tuned, x), text, tuned.vocab),
                    w,
                    cfg.fgsm_epsilon,
                )
                for w, text in examples
            ]
        tuned.params.zero_grad()
        total = None
        for (w, text), adv in zip(examples, perturbed):
            clean_loss = ctc_loss(asr_forward(tuned, w), text, tuned.vocab)
            loss = clean_loss * cfg.alpha
            if cfg.alpha < 1.0:
                adv_loss = ctc_loss(asr_forward(tuned, adv), text, tuned.vocab)
                loss = loss + adv_loss * (1.0 - cfg.alpha)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(examples))
        tuned.loss_history.append(total.item())
        tg.backward(total)
        tg.adam_step(tuned.params, state)
        logger.info(f"asr adversarial epoch {epoch}: objective {tuned.loss_history[-1]:.4f}")
    return tuned


def save_asr(model: SurrogateAsr, path: Union[str, Path]) -> Path:
    sidecar = {
        "kind": "asr",
        "vocab": model.vocab.characters,
        "blank_index": model.vocab.blank_index,
        "mfcc": model.mfcc_cfg.dict(),
        "widths": model.widths,
        "kernel": model.kernel,
        "feature_mean": model.feature_mean.tolist(),
        "feature_std": model.feature_std.tolist(),
    }
    return write_checkpoint(model.params, path, sidecar)


def load_asr(path: Union[str, Path]) -> SurrogateAsr:
    params, sidecar = read_checkpoint(path)
    if sidecar.get("kind") != "asr":
        raise ParameterError(f"{path} is not an asr checkpoint", module="asr")
    return SurrogateAsr(
        params,
        Vocabulary(characters=sidecar["vocab"], blank_index=sidecar["blank_index"]),
        MfccConfig(**sidecar["mfcc"]),
        np.array(sidecar["feature_mean"]),
        np.array(sidecar["feature_std"]),
        sidecar["kernel"],
    )
