"""
Adversarial-example generators.

gradient_attack and ota_gradient_attack run Adam on an additive perturbation v, clamped to
[-delta, delta] after every step. evolutionary_attack only sees a text oracle. The adaptive
sweep reruns either attack under a perturbation-power constraint given as an SNR floor.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from advspeech import tensorgrad as tg
from advspeech.asr import (
    SurrogateAsr,
    asr_forward,
    check_alignment,
    ctc_loss,
    encode_target,
    greedy_decode,
)
from advspeech.datatypes import (
    AdversarialResult,
    ChannelModel,
    EvoConfig,
    MfccConfig,
    PerturbationBudget,
    Transcript,
    Vocabulary,
    Waveform,
)
from advspeech.errors import ParameterError
from advspeech.metrics import edit_similarity, snr_db
from advspeech.signal import apply_channel, channel_graph, mfcc, n_frames

logger = logging.getLogger(__name__)

Front = Callable[[tg.Tensor], tg.Tensor]
DecodeOracle = Callable[[Waveform], Transcript]

CHECK_EVERY = 10
EVAL_DRAWS = 10
EVAL_STREAM = 2**31 - 1


class Pipeline:
    """Recognizer with an optional differentiable front end (an enhancer) in the loop."""

    def __init__(self, asr_model: SurrogateAsr, front: Optional[Front] = None, name: str = "asr"):
        self.asr_model = asr_model
        self.front = front
        self.name = name

    @property
    def vocab(self) -> Vocabulary:
        return self.asr_model.vocab

    def logits(self, x: tg.Tensor) -> tg.Tensor:
        if self.front is not None:
            x = self.front(x)
        return asr_forward(self.asr_model, x)

    def decode(self, samples: np.ndarray) -> Transcript:
        with tg.no_grad():
            return greedy_decode(self.logits(tg.Tensor(samples)), self.vocab)

    def oracle(self) -> DecodeOracle:
        return lambda w: self.decode(w.samples)


def _pipeline(model: Union[SurrogateAsr, Pipeline]) -> Pipeline:
    return model if isinstance(model, Pipeline) else Pipeline(model)


def _target(y_target: Union[Transcript, str]) -> Transcript:
    return y_target if isinstance(y_target, Transcript) else Transcript(text=y_target)


def _check_feasible(pipeline: Pipeline, x: Waveform, target: Transcript):
    cfg = pipeline.asr_model.mfcc_cfg
    check_alignment(n_frames(len(x), cfg.frame_len, cfg.hop), encode_target(pipeline.vocab, target))


def keep_in_range(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Largest part of v for which x + v stays inside [-1, 1]."""
    return np.clip(x + v, -1.0, 1.0) - x


def clamp_linf(v: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(v, -delta, delta)


def project_power(x: np.ndarray, v: np.ndarray, snr_floor_db: Optional[float]) -> np.ndarray:
    """Scale v down until 10*log10(P_x / P_v) >= snr_floor_db."""
    if snr_floor_db is None:
        return v
    p_v = float(np.mean(v * v))
    limit = float(np.mean(x * x)) * 10.0 ** (-snr_floor_db / 10.0)
    if p_v <= limit or p_v == 0.0:
        return v
    return v * math.sqrt(limit / p_v) * (1.0 - 1e-12)


def build_result(
    attack: str,
    x: Waveform,
    v: np.ndarray,
    decoded: Transcript,
    target: Transcript,
    iterations: int,
    objective_history: Optional[List[float]] = None,
    fitness_history: Optional[List[float]] = None,
    channel_success_rate: Optional[float] = None,
) -> AdversarialResult:
    adversarial = np.clip(x.samples + v, -1.0, 1.0)
    return AdversarialResult(
        attack=attack,
        perturbation=x.with_samples(v),
        adversarial=x.with_samples(adversarial),
        decoded=decoded,
        target=target,
        success=decoded.text == target.text,
        snr_db=snr_db(x, v) if np.any(v) else math.inf,
        iterations=iterations,
        objective_history=objective_history or [],
        fitness_history=fitness_history or [],
        channel_success_rate=channel_success_rate,
    )


def _optimize(
    objective: Callable[[tg.Tensor, int], tg.Tensor],
    succeeded: Callable[[np.ndarray, int], bool],
    x: np.ndarray,
    budget: PerturbationBudget,
    lr: float,
    project: Callable[[np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, int, List[float], bool]:
    """
    Adam on v with best-so-far tracking; lr halves whenever the objective goes up.
    Returns (v, iterations, best-so-far objective per step, success).
    """
    params = tg.ParameterSet({"v": np.zeros_like(x)})
    v = params["v"]
    state = tg.AdamState(params, lr=lr)
    best_value, best_v = math.inf, v.data.copy()
    previous = math.inf
    history: List[float] = []
    for step in range(budget.max_iters):
        params.zero_grad()
        loss = objective(v, step)
        value = loss.item()
        if value < best_value:
            best_value, best_v = value, v.data.copy()
        history.append(best_value)
        if value > previous:
            state.lr *= 0.5
            logger.debug(f"objective rose to {value:.5f} at step {step}; lr now {state.lr:.2e}")
        previous = value
        tg.backward(loss)
        tg.adam_step(params, state)
        v.data = project(v.data)
        if (step + 1) % CHECK_EVERY == 0 and succeeded(v.data, step):
            return v.data.copy(), step + 1, history, True
    if succeeded(v.data, budget.max_iters):
        return v.data.copy(), budget.max_iters, history, True
    return best_v, budget.max_iters, history, False


def gradient_attack(
    model: Union[SurrogateAsr, Pipeline],
    x: Waveform,
    y_target: Union[Transcript, str],
    budget: Optional[PerturbationBudget] = None,
    lr: float = 1e-3,
    seed: int = 0,
    snr_floor_db: Optional[float] = None,
) -> AdversarialResult:
    """
    Minimize ctc_loss(model(x + v), target) + penalty_weight * ||v||_2 under |v| <= delta.
    The optimizer starts from v = 0, so `seed` only enters the run manifest.
    """
    pipeline = _pipeline(model)
    budget = budget or PerturbationBudget()
    target = _target(y_target)
    _check_feasible(pipeline, x, target)
    samples = x.samples
    logger.debug(f"gradient attack seed {seed}, delta {budget.delta_inf}, {budget.max_iters} steps")

    def objective(v: tg.Tensor, step: int) -> tg.Tensor:
        loss = ctc_loss(pipeline.logits(tg.Tensor(samples) + v), target, pipeline.vocab)
        if budget.penalty_weight > 0:
            loss = loss + tg.l2_norm(v) * budget.penalty_weight
        return loss

    def succeeded(v: np.ndarray, step: int) -> bool:
        return pipeline.decode(samples + v).text == target.text

    def project(v: np.ndarray) -> np.ndarray:
        v = keep_in_range(samples, clamp_linf(v, budget.delta_inf))
        return project_power(samples, v, snr_floor_db)

    if budget.delta_inf == 0.0:
        v, iterations, history = np.zeros_like(samples), 0, []
    else:
        v, iterations, history, _ = _optimize(objective, succeeded, samples, budget, lr, project)
    decoded = pipeline.decode(np.clip(samples + v, -1.0, 1.0))
    result = build_result("grad", x, v, decoded, target, iterations, history)
    logger.info(
        f"gradient attack: success={result.success} after {iterations} steps, "
        f"decoded {decoded.text!r}"
    )
    return result


# over-the-air


def channel_draws(channel: ChannelModel, seed: int, step: int, count: int) -> List[Tuple[int, int]]:
    """(impulse-response index, noise seed) pairs, uniform over the bank."""
    draws = []
    for j in range(count):
        rng = np.random.default_rng([seed, step, j])
        draws.append(
            (int(rng.integers(len(channel.impulse_responses))), int(rng.integers(2**31 - 1)))
        )
    return draws


def ota_objective(
    pipeline: Pipeline,
    x: np.ndarray,
    v: tg.Tensor,
    target: Transcript,
    channel: ChannelModel,
    draws: Sequence[Tuple[int, int]],
    penalty_weight: float = 0.0,
) -> tg.Tensor:
    total = None
    for ir_index, noise_seed in draws:
        received = channel_graph(x, v, channel, ir_index, noise_seed)
        loss = ctc_loss(pipeline.logits(received), target, pipeline.vocab)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(draws))
    if penalty_weight > 0:
        total = total + tg.l2_norm(v) * penalty_weight
    return total


def channel_success_rate(
    pipeline: Pipeline,
    x: Waveform,
    v: np.ndarray,
    target: Transcript,
    channel: ChannelModel,
    seed: int,
    n_draws: int = EVAL_DRAWS,
) -> float:
    hits = 0
    for ir_index, noise_seed in channel_draws(channel, seed, EVAL_STREAM, n_draws):
        received = apply_channel(x, x.with_samples(v), channel, ir_index, noise_seed)
        hits += pipeline.decode(received.samples).text == target.text
    return hits / n_draws


def ota_gradient_attack(
    model: Union[SurrogateAsr, Pipeline],
    x: Waveform,
    y_target: Union[Transcript, str],
    channel: ChannelModel,
    budget: Optional[PerturbationBudget] = None,
    mc_samples: int = 4,
    lr: float = 1e-3,
    seed: int = 0,
) -> AdversarialResult:
    """Expectation over channel draws of the gradient-attack objective; band-pass acts on v only."""
    if not channel.impulse_responses:
        raise ParameterError("channel bank is empty", module="attack")
    if mc_samples < 1:
        raise ParameterError(f"mc_samples must be >= 1, got {mc_samples}", module="attack")
    pipeline = _pipeline(model)
    budget = budget or PerturbationBudget()
    target = _target(y_target)
    _check_feasible(pipeline, x, target)
    samples = x.samples

    def objective(v: tg.Tensor, step: int) -> tg.Tensor:
        draws = channel_draws(channel, seed, step, mc_samples)
        return ota_objective(pipeline, samples, v, target, channel, draws, budget.penalty_weight)

    def succeeded(v: np.ndarray, step: int) -> bool:
        for ir_index, noise_seed in channel_draws(channel, seed, step, mc_samples):
            received = apply_channel(x, x.with_samples(v), channel, ir_index, noise_seed)
            if pipeline.decode(received.samples).text != target.text:
                return False
        return True

    def project(v: np.ndarray) -> np.ndarray:
        return keep_in_range(samples, clamp_linf(v, budget.delta_inf))

    v, iterations, history, _ = _optimize(objective, succeeded, samples, budget, lr, project)
    decoded = pipeline.decode(np.clip(samples + v, -1.0, 1.0))
    rate = channel_success_rate(pipeline, x, v, target, channel, seed)
    result = build_result(
        "ota", x, v, decoded, target, iterations, history, channel_success_rate=rate
    )
    logger.info(
        f"over-the-air attack: direct success={result.success}, "
        f"channel success rate {rate:.2f} after {iterations} steps"
    )
    return result


# evolutionary


class _Scored(BaseModel):
    fitness: float
    f1: float
    f2: float


def _individual_rng(seed: int, generation: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, generation, index]))


def _score(
    decode_oracle: DecodeOracle,
    x: Waveform,
    reference_mfcc: np.ndarray,
    v: np.ndarray,
    target: Transcript,
    cfg: EvoConfig,
    channel: Optional[ChannelModel],
    mfcc_cfg: MfccConfig,
    rng_seed: Tuple[int, int, int],
) -> _Scored:
    candidate = x.with_samples(np.clip(x.samples + v, -1.0, 1.0))
    features = mfcc(candidate, mfcc_cfg.frame_len, mfcc_cfg.hop, mfcc_cfg.n_mels, mfcc_cfg.n_coeff)
    f1 = 1.0 / (1.0 + float(np.linalg.norm(features.values - reference_mfcc)))
    if channel is None:
        f2 = edit_similarity(decode_oracle(candidate).text, target.text)
    else:
        rng = _individual_rng(*rng_seed)
        similarities = []
        for _ in range(cfg.channel_draws):
            ir_index = int(rng.integers(len(channel.impulse_responses)))
            noise_seed = int(rng.integers(2**31 - 1))
            received = apply_channel(
                x, x.with_samples(candidate.samples - x.samples), channel, ir_index, noise_seed
            )
            similarities.append(edit_similarity(decode_oracle(received).text, target.text))
        f2 = float(np.mean(similarities))
    w1, w2 = cfg.weights
    return _Scored(fitness=w1 * f1 + w2 * f2, f1=f1, f2=f2)


def _rank_key(scored: _Scored) -> Tuple[float, float]:
    return scored.fitness, scored.f2


def pareto_ranks(scores: Sequence[_Scored]) -> List[int]:
    """Non-domination front index per individual (0 = first front) over (f1, f2)."""
    remaining = set(range(len(scores)))
    ranks = [0] * len(scores)
    front = 0
    while remaining:
        current = {
            i
            for i in remaining
            if not any(
                scores[j].f1 >= scores[i].f1
                and scores[j].f2 >= scores[i].f2
                and (scores[j].f1 > scores[i].f1 or scores[j].f2 > scores[i].f2)
                for j in remaining
            )
        }
        for i in current:
            ranks[i] = front
        remaining -= current
        front += 1
    return ranks


def _tournament(
    rng: np.random.Generator, scores: Sequence[_Scored], ranks: Optional[List[int]], size: int
) -> int:
    entrants = rng.integers(len(scores), size=size)

    def key(i):
        if ranks is None:
            return _rank_key(scores[i])
        return (-ranks[i], *_rank_key(scores[i]))

    return int(max(entrants, key=key))


def _block_crossover(
    rng: np.random.Generator, a: np.ndarray, b: np.ndarray, block_len: int
) -> np.ndarray:
    n_blocks = -(-a.shape[0] // block_len)
    from_b = np.repeat(rng.random(n_blocks) < 0.5, block_len)[: a.shape[0]]
    return np.where(from_b, b, a)


def evolutionary_attack(
    decode_oracle: DecodeOracle,
    x: Waveform,
    y_target: Union[Transcript, str],
    cfg: Optional[EvoConfig] = None,
    seed: int = 0,
    channel: Optional[ChannelModel] = None,
    mfcc_cfg: Optional[MfccConfig] = None,
    snr_floor_db: Optional[float] = None,
) -> AdversarialResult:
    """
    Black-box genetic search over perturbations. Fitness = w1 / (1 + ||MFCC(x~) - MFCC(x)||)
    + w2 * edit_similarity(decode(x~), target); the oracle sees waveforms and returns text only.
    """
    cfg = cfg or EvoConfig()
    mfcc_cfg = mfcc_cfg or MfccConfig(sample_rate_hz=x.sample_rate_hz)
    if cfg.population < 2 and cfg.crossover_rate > 0:
        raise ParameterError("crossover needs a population of at least 2", module="attack")
    target = _target(y_target)
    samples = x.samples
    reference = mfcc(x, mfcc_cfg.frame_len, mfcc_cfg.hop, mfcc_cfg.n_mels, mfcc_cfg.n_coeff).values

    def constrain(v: np.ndarray) -> np.ndarray:
        v = keep_in_range(samples, clamp_linf(v, cfg.delta_inf))
        return project_power(samples, v, snr_floor_db)

    population = [np.zeros_like(samples)]
    for i in range(1, cfg.population):
        rng = _individual_rng(seed, 0, i)
        population.append(constrain(rng.normal(0.0, cfg.mutation_sigma, samples.shape)))

    def evaluate(generation: int, members: Sequence[np.ndarray], offset: int) -> List[_Scored]:
        context = (decode_oracle, x, reference)
        jobs = [
            (*context, v, target, cfg, channel, mfcc_cfg, (seed, generation, offset + i))
            for i, v in enumerate(members)
        ]
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(lambda job: _score(*job), jobs))
        return [_score(*job) for job in jobs]

    scores = evaluate(0, population, 0)
    history: List[float] = []
    generation = 0
    for generation in range(cfg.generations):
        order = sorted(range(len(population)), key=lambda i: _rank_key(scores[i]), reverse=True)
        best = scores[order[0]]
        history.append(best.fitness)
        logger.debug(
            f"generation {generation}: best fitness {best.fitness:.4f} "
            f"(f1 {best.f1:.4f}, f2 {best.f2:.4f})"
        )
        if best.f2 == 1.0:
            break
        ranks = pareto_ranks(scores) if cfg.selection == "pareto" else None
        elites = order[: cfg.elite_count]
        children = []
        for index in range(cfg.elite_count, cfg.population):
            rng = _individual_rng(seed, generation + 1, index)
            a = population[_tournament(rng, scores, ranks, cfg.tournament_size)]
            child = a.copy()
            if rng.random() < cfg.crossover_rate:
                b = population[_tournament(rng, scores, ranks, cfg.tournament_size)]
                child = _block_crossover(rng, a, b, cfg.block_len)
            if cfg.mutation_sigma > 0:
                child = child + rng.normal(0.0, cfg.mutation_sigma, samples.shape)
            children.append(constrain(child))
        child_scores = evaluate(generation + 1, children, cfg.elite_count)
        population = [population[i] for i in elites] + children
        scores = [scores[i] for i in elites] + child_scores
    else:
        order = sorted(range(len(population)), key=lambda i: _rank_key(scores[i]), reverse=True)
        history.append(scores[order[0]].fitness)
    v = population[order[0]]
    decoded = decode_oracle(x.with_samples(np.clip(samples + v, -1.0, 1.0)))
    result = build_result("evo", x, v, decoded, target, generation + 1, fitness_history=history)
    logger.info(
        f"evolutionary attack: success={result.success} after {generation + 1} generations, "
        f"best fitness {history[-1]:.4f}"
    )
    return result


# FGSM


def fgsm_perturb(
    loss_fn: Callable[[tg.Tensor], tg.Tensor],
    x: Union[Waveform, np.ndarray],
    epsilon: float,
) -> Union[Waveform, np.ndarray]:
    """
    x + epsilon * sign(grad_x loss_fn(x)), clamped to [-1, 1]. Any parameters reached by
    loss_fn accumulate gradients; callers training those parameters zero them afterwards.
    """
    if epsilon < 0:
        raise ParameterError(f"epsilon must be >= 0, got {epsilon}", module="attack")
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        out = samples.copy()
    else:
        leaf = tg.Tensor(samples, requires_grad=True)
        tg.backward(loss_fn(leaf))
        out = np.clip(samples + epsilon * np.sign(leaf.grad), -1.0, 1.0)
    return x.with_samples(out) if isinstance(x, Waveform) else out


# adaptive sweep


class SweepPoint(BaseModel):
    pipeline: str
    attack: str
    budget_db: Optional[float]
    tasr: float
    successes: int
    trials: int


class SweepResult(BaseModel):
    points: List[SweepPoint]
    full_success_budget_db: Optional[float] = None
    per_utterance_budget_db: List[Optional[float]] = []


def adaptive_attack_sweep(
    pipeline: Pipeline,
    utterances: Sequence[Waveform],
    y_target: Union[Transcript, str],
    snr_budgets_db: Sequence[Optional[float]],
    attack: str = "grad",
    budget: Optional[PerturbationBudget] = None,
    evo_cfg: Optional[EvoConfig] = None,
    lr: float = 1e-3,
    seed: int = 0,
) -> SweepResult:
    """
    TASR per SNR budget; a budget of None leaves only the l-inf clamp. Budgets are tried in the
    given order. full_success_budget_db is the highest budget (least noise) with TASR = 1, and
    per_utterance_budget_db the highest budget at which each utterance was attacked successfully.
    """
    if not snr_budgets_db:
        raise ParameterError("snr_budgets_db is empty", module="attack")
    if not utterances:
        raise ParameterError("no utterances to attack", module="attack")
    if attack not in ("grad", "evo"):
        raise ParameterError(f"adaptive sweep supports grad and evo, not {attack}", module="attack")
    budget = budget or PerturbationBudget(delta_inf=1.0)
    target = _target(y_target)
    points = []
    per_utterance: List[Optional[float]] = [None] * len(utterances)
    for b in snr_budgets_db:
        successes = 0
        for i, x in enumerate(utterances):
            if attack == "grad":
                result = gradient_attack(pipeline, x, target, budget, lr, seed + i, snr_floor_db=b)
            else:
                result = evolutionary_attack(
                    pipeline.oracle(), x, target, evo_cfg, seed + i, snr_floor_db=b
                )
            successes += result.success
            if result.success and b is not None:
                current = per_utterance[i]
                per_utterance[i] = b if current is None else max(current, b)
        tasr = successes / len(utterances)
        points.append(
            SweepPoint(
                pipeline=pipeline.name,
                attack=attack,
                budget_db=b,
                tasr=tasr,
                successes=successes,
                trials=len(utterances),
            )
        )
        logger.info(f"{pipeline.name}/{attack} budget {b} dB: TASR {tasr:.2f}")
    full = [p.budget_db for p in points if p.tasr == 1.0 and p.budget_db is not None]
    return SweepResult(
        points=points,
        full_success_budget_db=max(full) if full else None,
        per_utterance_budget_db=per_utterance,
    )


def rosa(results: Sequence[AdversarialResult]) -> float:
    if not results:
        raise ParameterError("rosa needs at least one trial", module="attack")
    return 100.0 * sum(r.success for r in results) / len(results)
