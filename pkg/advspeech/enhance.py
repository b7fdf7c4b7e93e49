"""
Speech-enhancement defenses.

unet_at: 1-D U-Net whose up blocks gate the skip connection with causal windowed attention
(queries from the upsampled decoder features, keys from the encoder skip, values = the skip);
unet_w: the same topology with a plain crop-and-concatenate skip; dnn: a log-power spectral
regressor with +/- context frames that resynthesizes with the noisy phase.

The two U-Nets end in a 1x1 convolution with two filters and tanh, giving (s_clean, s_adv).
"""
import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from advspeech import tensorgrad as tg
from advspeech.attack import fgsm_perturb
from advspeech.datatypes import DnnConfig, TrainingConfig, UNetAtConfig, Waveform
from advspeech.errors import ParameterError, ShapeError
from advspeech.signal import frame_signal, hann, istft_graph, power_spectrum_graph
from advspeech.utils.ntv1 import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

KINDS = ("dnn", "unet_w", "unet_at")
Pair = Tuple[Waveform, Waveform]


class EnhancerModel:
    def __init__(
        self,
        kind: str,
        params: tg.ParameterSet,
        config: Union[UNetAtConfig, DnnConfig],
        training: Optional[dict] = None,
    ):
        if kind not in KINDS:
            raise ParameterError(f"unknown enhancer kind {kind}", module="enhance")
        self.kind = kind
        self.params = params
        self.config = config
        self.training = training or {}
        self.loss_history: List[float] = []

    @property
    def two_source(self) -> bool:
        return self.kind != "dnn"

    def copy(self) -> "EnhancerModel":
        return EnhancerModel(self.kind, self.params.copy(), self.config, dict(self.training))


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = shape[1] * shape[2]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_enhancer(
    kind: str, config: Optional[Union[UNetAtConfig, DnnConfig]] = None, seed: int = 0
) -> EnhancerModel:
    rng = np.random.default_rng(seed)
    params = tg.ParameterSet()
    if kind == "dnn":
        cfg = config or DnnConfig()
        bins = cfg.frame_len // 2 + 1
        channels = [bins] + [cfg.hidden] * cfg.n_hidden_layers
        kernels = [2 * cfg.context + 1] + [1] * (cfg.n_hidden_layers - 1)
        for i, k in enumerate(kernels):
            params.add(f"hidden{i}.weight", _he(rng, (channels[i + 1], channels[i], k)))
            params.add(f"hidden{i}.bias", np.zeros(channels[i + 1]))
        # zero correction: the untrained model returns its input spectrum
        params.add("out.weight", np.zeros((bins, cfg.hidden, 1)))
        params.add("out.bias", np.zeros(bins))
        return EnhancerModel(kind, params, cfg)
    if kind not in KINDS:
        raise ParameterError(f"unknown enhancer kind {kind}", module="enhance")
    cfg = config or UNetAtConfig()
    base, depth = cfg.base_filters, cfg.depth
    for i in range(depth):
        c_in = 1 if i == 0 else base * i
        params.add(f"down{i}.weight", _he(rng, (base * (i + 1), c_in, cfg.down_kernel)))
        params.add(f"down{i}.bias", np.zeros(base * (i + 1)))
    params.add("bottleneck.weight", _he(rng, (base * (depth + 1), base * depth, cfg.down_kernel)))
    params.add("bottleneck.bias", np.zeros(base * (depth + 1)))
    for i in reversed(range(depth)):
        c_skip, c_up = base * (i + 1), base * (i + 2)
        if kind == "unet_at":
            params.add(f"att{i}.query", _he(rng, (cfg.attention_dim, c_up, 1)))
            params.add(f"att{i}.key", _he(rng, (cfg.attention_dim, c_skip, 1)))
        params.add(f"up{i}.weight", _he(rng, (c_skip, c_skip + c_up, cfg.up_kernel)))
        params.add(f"up{i}.bias", np.zeros(c_skip))
    params.add("out.weight", _he(rng, (2, base, 1)))
    params.add("out.bias", np.zeros(2))
    return EnhancerModel(kind, params, cfg)


# forward passes


def attention_gate(
    query: tg.Tensor, key: tg.Tensor, values: tg.Tensor, window: int
) -> tg.Tensor:
    """c_t = sum_k softmax_k(q_t . h_k / sqrt(d)) x_c[k] over t-window < k <= t."""
    if query.shape[0] != key.shape[0]:
        raise ShapeError(
            f"attention_gate: query/key feature mismatch {query.shape} vs {key.shape}",
            module="enhance",
        )
    return tg.windowed_attention(query, key, values, window)


def _unet_forward(model: EnhancerModel, m: tg.Tensor) -> Tuple[tg.Tensor, tg.Tensor]:
    cfg: UNetAtConfig = model.config
    p = model.params
    if m.shape != (cfg.input_len,):
        raise ShapeError(
            f"{model.kind}: expected input of {cfg.input_len} samples, got {m.shape}",
            module="enhance",
        )
    h = tg.reshape(m, (1, cfg.input_len))
    skips = []
    for i in range(cfg.depth):
        h = tg.leaky_relu(tg.conv1d(h, p[f"down{i}.weight"], p[f"down{i}.bias"]))
        skips.append(h)
        h = tg.slice_axis(h, 1, 0, h.shape[1], 2)
        logger.debug(f"{model.kind} down{i}: skip {skips[-1].shape}, decimated {h.shape}")
    h = tg.leaky_relu(tg.conv1d(h, p["bottleneck.weight"], p["bottleneck.bias"]))
    logger.debug(f"{model.kind} bottleneck: {h.shape}")
    for i in reversed(range(cfg.depth)):
        up = tg.upsample2(h, cfg.upsample_mode)
        skip = tg.crop(skips[i], up.shape[1])
        if model.kind == "unet_at":
            query = tg.conv1d(up, p[f"att{i}.query"])
            key = tg.conv1d(skip, p[f"att{i}.key"])
            skip = attention_gate(query, key, skip, cfg.attention_window)
        h = tg.concatenate([skip, up], axis=0)
        h = tg.leaky_relu(tg.conv1d(h, p[f"up{i}.weight"], p[f"up{i}.bias"]))
        logger.debug(f"{model.kind} up{i}: {h.shape}")
    out = tg.tanh(tg.conv1d(h, p["out.weight"], p["out.bias"]))
    s_clean = tg.reshape(tg.slice_axis(out, 0, 0, 1), (cfg.input_len,))
    s_adv = tg.reshape(tg.slice_axis(out, 0, 1, 2), (cfg.input_len,))
    return s_clean, s_adv


def unet_at_forward(model: EnhancerModel, m: tg.Tensor) -> Tuple[tg.Tensor, tg.Tensor]:
    if model.kind != "unet_at":
        raise ParameterError(f"unet_at_forward on a {model.kind} model", module="enhance")
    return _unet_forward(model, m)


def unet_w_forward(model: EnhancerModel, m: tg.Tensor) -> Tuple[tg.Tensor, tg.Tensor]:
    if model.kind != "unet_w":
        raise ParameterError(f"unet_w_forward on a {model.kind} model", module="enhance")
    return _unet_forward(model, m)


def noisy_phase(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    frames = frame_signal(samples, frame_len, hop) * hann(frame_len)
    return np.angle(np.fft.rfft(frames, axis=1))


def dnn_log_power(model: EnhancerModel, m: tg.Tensor) -> Tuple[tg.Tensor, tg.Tensor]:
    """(input, enhanced) log-power, each (bins, frames)."""
    cfg: DnnConfig = model.config
    p = model.params
    power = power_spectrum_graph(m, cfg.frame_len, cfg.hop)
    log_pow = tg.transpose(tg.log(tg.clamp_min(power, cfg.floor)))
    h = log_pow
    for i in range(cfg.n_hidden_layers):
        padding = cfg.context if i == 0 else 0
        h = tg.conv1d(h, p[f"hidden{i}.weight"], p[f"hidden{i}.bias"], padding=padding)
        h = tg.leaky_relu(h)
    correction = tg.conv1d(h, p["out.weight"], p["out.bias"])
    return log_pow, log_pow + correction


def dnn_forward(model: EnhancerModel, m: tg.Tensor) -> tg.Tensor:
    if model.kind != "dnn":
        raise ParameterError(f"dnn_forward on a {model.kind} model", module="enhance")
    cfg: DnnConfig = model.config
    _, enhanced = dnn_log_power(model, m)
    phase = noisy_phase(m.data, cfg.frame_len, cfg.hop)
    return istft_graph(enhanced, phase, cfg.frame_len, cfg.hop, m.shape[0])


def separate(model: EnhancerModel, m: tg.Tensor) -> Tuple[tg.Tensor, Optional[tg.Tensor]]:
    if model.kind == "dnn":
        return dnn_forward(model, m), None
    return _unet_forward(model, m)


# chunked enhancement


def chunk_starts(length: int, chunk: int) -> List[int]:
    if length <= chunk:
        return [0]
    hop = chunk // 2
    last = -(-(length - chunk) // hop) * hop
    return list(range(0, last + 1, hop))


def triangular_weights(chunk: int) -> np.ndarray:
    n = np.arange(chunk)
    return 1.0 - np.abs(2.0 * (n + 0.5) / chunk - 1.0)


def enhance_graph(model: EnhancerModel, x: tg.Tensor) -> tg.Tensor:
    """
    Differentiable s_clean for a signal of any length. U-Nets run on input_len chunks at 50%
    overlap joined by normalized triangular overlap-add; the DNN runs on the whole signal.
    """
    length = x.shape[0]
    if model.kind == "dnn":
        frame_len = model.config.frame_len
        if length >= frame_len:
            return dnn_forward(model, x)
        return tg.slice_axis(dnn_forward(model, tg.pad(x, 0, frame_len - length)), 0, 0, length)
    chunk = model.config.input_len
    starts = chunk_starts(length, chunk)
    total = starts[-1] + chunk
    padded = tg.pad(x, 0, total - length) if total > length else x
    weights = triangular_weights(chunk)
    weight_sum = np.zeros(total)
    acc = None
    for start in starts:
        s_clean, _ = _unet_forward(model, tg.slice_axis(padded, 0, start, start + chunk))
        placed = tg.pad(s_clean * tg.Tensor(weights), start, total - start - chunk)
        acc = placed if acc is None else acc + placed
        weight_sum[start : start + chunk] += weights
    out = acc * tg.Tensor(1.0 / weight_sum)
    return tg.slice_axis(out, 0, 0, length) if total > length else out


def enhance_waveform(model: EnhancerModel, w: Waveform) -> Waveform:
    with tg.no_grad():
        return w.with_samples(enhance_graph(model, tg.Tensor(w.samples)).data)


def additivity_residual(model: EnhancerModel, m: Waveform) -> float:
    """RMS of (s_clean + s_adv) - m; monitored, never enforced."""
    if not model.two_source:
        raise ParameterError("additivity residual needs a two-source model", module="enhance")
    with tg.no_grad():
        s_clean, s_adv = _unet_forward(model, tg.Tensor(m.samples))
    residual = s_clean.data + s_adv.data - m.samples
    return float(np.sqrt(np.mean(residual**2)))


# training


def _mse(a: tg.Tensor, target: np.ndarray) -> tg.Tensor:
    diff = a - tg.Tensor(target)
    return tg.mean(diff * diff)


def separation_loss(
    model: EnhancerModel, m: tg.Tensor, clean: np.ndarray, mixture: Optional[np.ndarray] = None
) -> tg.Tensor:
    """MSE(s_clean, clean) + MSE(s_adv, mixture - clean); MSE(s_clean, clean) for the DNN."""
    mixture = m.data if mixture is None else mixture
    s_clean, s_adv = separate(model, m)
    loss = _mse(s_clean, clean)
    if s_adv is not None:
        loss = loss + _mse(s_adv, mixture - clean)
    return loss


def _check_dataset(model: EnhancerModel, dataset: Sequence[Pair]):
    if not dataset:
        raise ParameterError("cannot train on an empty dataset", module="enhance")
    for mixture, clean in dataset:
        if len(mixture) != len(clean):
            raise ShapeError(
                f"mixture of {len(mixture)} samples paired with clean of {len(clean)}",
                module="enhance",
            )
        if model.two_source and len(mixture) != model.config.input_len:
            raise ShapeError(
                f"{model.kind} trains on {model.config.input_len}-sample pairs, got {len(mixture)}",
                module="enhance",
            )


def dataset_hash(dataset: Sequence[Pair]) -> str:
    digest = hashlib.sha256()
    for mixture, clean in dataset:
        digest.update(mixture.samples.tobytes())
        digest.update(clean.samples.tobytes())
    return digest.hexdigest()


def _standard_objective(model: EnhancerModel, batch: Sequence[Pair], cfg: TrainingConfig):
    total = None
    for mixture, clean in batch:
        loss = separation_loss(model, tg.Tensor(mixture.samples), clean.samples)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def _adversarial_objective(model: EnhancerModel, batch: Sequence[Pair], cfg: TrainingConfig):
    perturbed = [
        fgsm_perturb(
            lambda z, clean=clean, mixture=mixture: separation_loss(
                model, z, clean.samples, mixture.samples
            ),
            mixture.samples,
            cfg.fgsm_epsilon,
        )
        for mixture, clean in batch
    ]
    model.params.zero_grad()
    total = None
    for (mixture, clean), adv in zip(batch, perturbed):
        j_clean = separation_loss(model, tg.Tensor(mixture.samples), clean.samples)
        j_adv = separation_loss(model, tg.Tensor(adv), clean.samples, mixture.samples)
        loss = j_clean * cfg.alpha + j_adv * (1.0 - cfg.alpha)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def _fit(
    model: EnhancerModel, dataset: Sequence[Pair], cfg: TrainingConfig, objective, label: str
) -> EnhancerModel:
    trained = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state = tg.AdamState(trained.params, lr=cfg.lr)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            trained.params.zero_grad()
            loss = objective(trained, batch, cfg)
            losses.append(loss.item())
            tg.backward(loss)
            tg.adam_step(trained.params, state)
        trained.loss_history.append(float(np.mean(losses)))
        logger.info(f"{label} {trained.kind} epoch {epoch}: loss {trained.loss_history[-1]:.6f}")
    trained.training = {
        "alpha": cfg.alpha,
        "fgsm_epsilon": cfg.fgsm_epsilon,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "adversarial": label == "adversarial",
        "augment_with_attacks": cfg.augment_with_attacks,
        "dataset_hash": dataset_hash(dataset),
    }
    return trained


def _with_augmentation(
    dataset: Sequence[Pair], cfg: TrainingConfig, augmentation: Optional[Sequence[Pair]]
) -> List[Pair]:
    pairs = list(dataset)
    if cfg.augment_with_attacks:
        if not augmentation:
            raise ParameterError(
                "augment_with_attacks is set but no attack outputs were supplied", module="enhance"
            )
        pairs.extend(augmentation)
        logger.info(f"Augmented {len(dataset)} pairs with {len(augmentation)} attack outputs")
    return pairs


def train_enhancer(
    model: EnhancerModel,
    dataset: Sequence[Pair],
    cfg: Optional[TrainingConfig] = None,
    augmentation: Optional[Sequence[Pair]] = None,
) -> EnhancerModel:
    """Adam on the separation loss; dataset pairs are (mixture, clean)."""
    cfg = cfg or TrainingConfig()
    pairs = _with_augmentation(dataset, cfg, augmentation)
    _check_dataset(model, pairs)
    return _fit(model, pairs, cfg, _standard_objective, "standard")


def adversarial_train(
    model: EnhancerModel,
    dataset: Sequence[Pair],
    cfg: Optional[TrainingConfig] = None,
    augmentation: Optional[Sequence[Pair]] = None,
) -> EnhancerModel:
    """alpha * J(m) + (1 - alpha) * J(m + eps * sign(grad_m J)); alpha = 1 is plain training."""
    cfg = cfg or TrainingConfig()
    pairs = _with_augmentation(dataset, cfg, augmentation)
    _check_dataset(model, pairs)
    objective = _standard_objective if cfg.alpha == 1.0 else _adversarial_objective
    return _fit(model, pairs, cfg, objective, "adversarial")


# checkpoints


def save_enhancer(model: EnhancerModel, path: Union[str, Path]) -> Path:
    sidecar = {
        "kind": model.kind,
        "config": model.config.dict(),
        "training": model.training,
    }
    return write_checkpoint(model.params, path, sidecar)


def load_enhancer(path: Union[str, Path]) -> EnhancerModel:
    params, sidecar = read_checkpoint(path)
    kind = sidecar.get("kind")
    if kind not in KINDS:
        raise ParameterError(f"{path} is not an enhancer checkpoint", module="enhance")
    config = DnnConfig(**sidecar["config"]) if kind == "dnn" else UNetAtConfig(**sidecar["config"])
    return EnhancerModel(kind, params, config, sidecar.get("training"))
