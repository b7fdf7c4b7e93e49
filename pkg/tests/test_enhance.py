import numpy as np
import pytest

from advspeech import tensorgrad as tg
from advspeech.asr import init_asr, save_asr
from advspeech.datatypes import DnnConfig, TrainingConfig, Waveform
from advspeech.enhance import (
    _adversarial_objective,
    _standard_objective,
    adversarial_train,
    additivity_residual,
    attention_gate,
    chunk_starts,
    dataset_hash,
    enhance_graph,
    enhance_waveform,
    init_enhancer,
    load_enhancer,
    save_enhancer,
    separation_loss,
    train_enhancer,
    triangular_weights,
    unet_at_forward,
    unet_w_forward,
)
from advspeech.errors import ParameterError, ShapeError
from advspeech.utils.ntv1 import dumps

from .conftest import TINY_UNET

rng = np.random.default_rng(21)
SMALL_DNN = DnnConfig(hidden=16, n_hidden_layers=2, context=1)


def _pairs(count, length=64):
    pairs = []
    for _ in range(count):
        clean = 0.3 * np.sin(np.linspace(0, 8 * np.pi, length) + rng.uniform(0, np.pi))
        noise = 0.05 * rng.normal(size=length)
        pairs.append((Waveform(samples=clean + noise), Waveform(samples=clean)))
    return pairs


@pytest.mark.parametrize("kind", ["unet_at", "unet_w"])
def test_unet_outputs_two_sources(kind):
    model = init_enhancer(kind, TINY_UNET, seed=1)
    forward = unet_at_forward if kind == "unet_at" else unet_w_forward
    s_clean, s_adv = forward(model, tg.Tensor(rng.normal(size=64) * 0.1))
    assert s_clean.shape == s_adv.shape == (64,)
    assert np.max(np.abs(s_clean.data)) < 1.0
    with pytest.raises(ShapeError):
        forward(model, tg.Tensor(np.zeros(60)))


def test_forward_checks_the_model_kind():
    with pytest.raises(ParameterError):
        unet_at_forward(init_enhancer("unet_w", TINY_UNET), tg.Tensor(np.zeros(64)))
    with pytest.raises(ParameterError):
        init_enhancer("wiener")


def test_only_unet_at_has_attention_weights():
    at = init_enhancer("unet_at", TINY_UNET)
    w = init_enhancer("unet_w", TINY_UNET)
    assert "att0.query" in at.params and "att0.query" not in w.params
    assert at.params.count() > w.params.count()


@pytest.mark.parametrize("kind", ["unet_at", "unet_w"])
def test_unet_gradients_match_finite_differences(kind):
    model = init_enhancer(kind, TINY_UNET, seed=2)
    weights = tg.Tensor(rng.normal(size=64))
    forward = unet_at_forward if kind == "unet_at" else unet_w_forward

    def f(m):
        s_clean, s_adv = forward(model, m)
        return tg.sum(s_clean * weights) + tg.sum(s_adv * s_adv)

    assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=64) * 0.2), h=1e-6) <= 1e-3


def test_attention_gate_is_causal():
    query, key = rng.normal(size=(2, 32)), rng.normal(size=(2, 32))
    values = rng.normal(size=(3, 32))
    base = attention_gate(tg.Tensor(query), tg.Tensor(key), tg.Tensor(values), 4).data
    key[:, 20:] += 5.0
    values[:, 20:] = 0.0
    moved = attention_gate(tg.Tensor(query), tg.Tensor(key), tg.Tensor(values), 4).data
    assert np.array_equal(base[:, :20], moved[:, :20])
    with pytest.raises(ShapeError):
        attention_gate(tg.Tensor(query), tg.Tensor(np.zeros((3, 32))), tg.Tensor(values), 4)


def test_untrained_dnn_passes_the_signal_through():
    model = init_enhancer("dnn", SMALL_DNN)
    w = Waveform(samples=rng.normal(size=4096) * 0.1)
    out = enhance_waveform(model, w)
    assert len(out) == len(w)
    assert np.allclose(out.samples[256:-256], w.samples[256:-256], atol=1e-9)


def test_dnn_handles_inputs_shorter_than_a_frame():
    model = init_enhancer("dnn", SMALL_DNN)
    out = enhance_waveform(model, Waveform(samples=rng.normal(size=300) * 0.1))
    assert len(out) == 300


def test_chunking():
    assert chunk_starts(64, 64) == [0]
    assert chunk_starts(40, 64) == [0]
    assert chunk_starts(100, 64) == [0, 32, 64]
    weights = triangular_weights(8)
    assert np.allclose(weights, weights[::-1])
    assert np.all(weights > 0)


@pytest.mark.parametrize("length", [40, 64, 150])
def test_enhance_any_length(length):
    model = init_enhancer("unet_at", TINY_UNET)
    out = enhance_waveform(model, Waveform(samples=rng.normal(size=length) * 0.1))
    assert len(out) == length
    assert np.all(np.isfinite(out.samples))


def test_enhance_graph_is_differentiable_across_chunks():
    model = init_enhancer("unet_w", TINY_UNET, seed=3)

    def f(x):
        return tg.sum(enhance_graph(model, x) * 2.0)

    assert tg.finite_diff_check(f, tg.Tensor(rng.normal(size=100) * 0.2), h=1e-6) <= 1e-3


def test_additivity_residual():
    model = init_enhancer("unet_at", TINY_UNET)
    residual = additivity_residual(model, Waveform(samples=rng.normal(size=64) * 0.1))
    assert residual >= 0.0
    with pytest.raises(ParameterError):
        additivity_residual(init_enhancer("dnn", SMALL_DNN), Waveform(samples=np.zeros(64)))


def test_untrained_dnn_has_a_small_separation_loss():
    model = init_enhancer("dnn", SMALL_DNN)
    x = rng.normal(size=2048) * 0.1
    loss = separation_loss(model, tg.Tensor(x), x)
    # the untrained DNN reproduces its input
    assert loss.item() < np.mean(x**2)


def test_training_lowers_the_separation_loss():
    model = init_enhancer("unet_at", TINY_UNET, seed=4)
    trained = train_enhancer(model, _pairs(4), TrainingConfig(epochs=6, lr=1e-2, batch_size=2))
    assert len(trained.loss_history) == 6
    assert trained.loss_history[-1] < trained.loss_history[0]
    assert trained.training["adversarial"] is False
    # the input model is left untouched
    assert np.array_equal(model.params["out.bias"].data, np.zeros(2))


def test_alpha_one_matches_standard_training_bit_for_bit():
    model = init_enhancer("unet_at", TINY_UNET, seed=5)
    pairs = _pairs(3)
    cfg = TrainingConfig(alpha=1.0, epochs=2, lr=1e-2, batch_size=2)
    standard = train_enhancer(model, pairs, cfg)
    adversarial = adversarial_train(model, pairs, cfg)
    assert dumps(standard.params) == dumps(adversarial.params)
    assert adversarial.training["adversarial"] is True


def _objective_and_grads(objective, model, batch, cfg):
    model.params.zero_grad()
    loss = objective(model, batch, cfg)
    tg.backward(loss)
    grads = {name: t.grad.copy() for name, t in model.params.items() if t.grad is not None}
    return loss.item(), grads


def test_blended_objective_at_alpha_one_is_the_plain_objective():
    model = init_enhancer("unet_at", TINY_UNET, seed=7)
    batch = _pairs(2)
    cfg = TrainingConfig(alpha=1.0, fgsm_epsilon=0.05)
    plain, plain_grads = _objective_and_grads(_standard_objective, model, batch, cfg)
    blended, blended_grads = _objective_and_grads(_adversarial_objective, model, batch, cfg)
    assert blended == pytest.approx(plain, rel=1e-12)
    assert blended_grads.keys() == plain_grads.keys()
    for name, grad in plain_grads.items():
        assert np.allclose(blended_grads[name], grad, rtol=1e-10, atol=1e-14), name
    half_cfg = cfg.copy(update={"alpha": 0.5})
    half, _ = _objective_and_grads(_adversarial_objective, model, batch, half_cfg)
    assert half != plain


def test_adversarial_training_changes_the_result():
    model = init_enhancer("unet_w", TINY_UNET, seed=6)
    pairs = _pairs(2)
    cfg = TrainingConfig(alpha=0.5, fgsm_epsilon=0.01, epochs=1, lr=1e-2, batch_size=2)
    standard = train_enhancer(model, pairs, cfg)
    adversarial = adversarial_train(model, pairs, cfg)
    assert dumps(standard.params) != dumps(adversarial.params)
    assert np.isfinite(adversarial.loss_history[0])


def test_dataset_checks():
    model = init_enhancer("unet_at", TINY_UNET)
    with pytest.raises(ParameterError):
        train_enhancer(model, [])
    bad = [(Waveform(samples=np.zeros(64)), Waveform(samples=np.zeros(32)))]
    with pytest.raises(ShapeError):
        train_enhancer(model, bad)
    with pytest.raises(ShapeError):
        train_enhancer(model, _pairs(1, length=128))
    with pytest.raises(ParameterError, match="augment_with_attacks"):
        train_enhancer(model, _pairs(1), TrainingConfig(augment_with_attacks=True))


def test_augmentation_extends_the_dataset():
    model = init_enhancer("unet_w", TINY_UNET)
    pairs, extra = _pairs(2), _pairs(1)
    cfg = TrainingConfig(augment_with_attacks=True, epochs=1, batch_size=4)
    trained = train_enhancer(model, pairs, cfg, augmentation=extra)
    assert trained.training["dataset_hash"] == dataset_hash(pairs + extra)
    assert trained.training["augment_with_attacks"] is True


def test_dataset_hash_depends_on_content():
    pairs = _pairs(2)
    assert dataset_hash(pairs) == dataset_hash(list(pairs))
    assert dataset_hash(pairs) != dataset_hash(pairs[:1])


@pytest.mark.parametrize("kind", ["dnn", "unet_at"])
def test_checkpoint_round_trip(kind, tmp_path):
    config = SMALL_DNN if kind == "dnn" else TINY_UNET
    model = init_enhancer(kind, config, seed=7)
    model.training = {"adversarial": True, "alpha": 0.34}
    loaded = load_enhancer(save_enhancer(model, tmp_path / f"{kind}.ntv1"))
    assert loaded.kind == kind
    assert loaded.config == config
    assert loaded.training == model.training
    w = Waveform(samples=rng.normal(size=600) * 0.1)
    assert np.array_equal(enhance_waveform(loaded, w).samples, enhance_waveform(model, w).samples)


def test_load_rejects_asr_checkpoints(tmp_path):
    path = save_asr(init_asr(widths=[4]), tmp_path / "asr.ntv1")
    with pytest.raises(ParameterError, match="not an enhancer checkpoint"):
        load_enhancer(path)
