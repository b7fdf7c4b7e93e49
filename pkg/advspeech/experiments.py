"""
Experiment orchestration: the enhancement-quality tables, the recognizer robustness table, the
perturbation-budget sweep, spectrogram panels and attack campaign dumps.

Quality tables put metrics on rows and conditions on columns. Directional expectations are
written to checks.csv as pass/fail rows.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from advspeech.asr import SurrogateAsr
from advspeech.attack import (
    Pipeline,
    SweepResult,
    adaptive_attack_sweep,
    evolutionary_attack,
    gradient_attack,
)
from advspeech.datatypes import (
    AdversarialResult,
    EvalReport,
    EvoConfig,
    PerturbationBudget,
    Waveform,
)
from advspeech.enhance import EnhancerModel, enhance_graph, enhance_waveform
from advspeech.errors import AdvSpeechError, ParameterError
from advspeech.metrics import aggregate_reports, evaluate_bundle, wer
from advspeech.reports import Check, write_checks, write_frame, write_quality_table
from advspeech.signal import log_power, stft, wav_read, wav_write

logger = logging.getLogger(__name__)

SPECTROGRAM_FLOOR = 1e-10
CAMPAIGN_COLUMNS = ["utterance", "attack", "success", "snr_db", "iterations", "decoded"]
ASR_COLUMNS = ["attack", "adversarial_training", "defense", "rosa_pct", "wer_pct", "trials"]
SWEEP_COLUMNS = ["pipeline", "attack", "budget_db", "tasr", "successes", "trials"]


def enhancer_pipeline(asr: SurrogateAsr, model: Optional[EnhancerModel], name: str) -> Pipeline:
    if model is None:
        return Pipeline(asr, name=name)
    return Pipeline(asr, front=lambda x: enhance_graph(model, x), name=name)


def _fan_out(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """Map fn over items, in parallel when workers > 1; results keep the input order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def craft_attacks(
    asr: SurrogateAsr,
    inputs: Sequence[Waveform],
    target_text: str,
    attacks: Sequence[str] = ("grad", "evo"),
    budget: Optional[PerturbationBudget] = None,
    evo_cfg: Optional[EvoConfig] = None,
    lr: float = 1e-3,
    seed: int = 0,
) -> Dict[str, List[AdversarialResult]]:
    """Adversarial examples against the undefended recognizer, one per input and attack."""
    pipeline = Pipeline(asr, name="none")
    crafted = {}
    for attack in attacks:
        if attack == "grad":
            crafted[attack] = [
                gradient_attack(pipeline, x, target_text, budget, lr, seed + i)
                for i, x in enumerate(inputs)
            ]
        elif attack == "evo":
            crafted[attack] = [
                evolutionary_attack(pipeline.oracle(), x, target_text, evo_cfg, seed + i)
                for i, x in enumerate(inputs)
            ]
        else:
            raise ParameterError(
                f"tables support grad and evo attacks, not {attack}", module="experiments"
            )
        rate = 100.0 * np.mean([r.success for r in crafted[attack]])
        logger.info(f"{attack}: {rate:.1f}% of {len(inputs)} inputs reach {target_text!r}")
    return crafted


# quality tables


def quality_report(
    pairs: Sequence[Tuple[Waveform, Waveform]], condition: str, workers: int = 1
) -> EvalReport:
    """Mean PESQ/STI/STOI/SNR over (degraded, clean) pairs."""
    try:
        reports = _fan_out(
            lambda pair: evaluate_bundle(pair[1], pair[0], condition=condition), pairs, workers
        )
    except AdvSpeechError as e:
        logger.error(f"Evaluating {condition} failed: {e}")
        raise
    return aggregate_reports(reports, condition)


def _enhanced_pairs(model: EnhancerModel, pairs: Sequence[Tuple[Waveform, Waveform]]):
    return [(enhance_waveform(model, degraded), clean) for degraded, clean in pairs]


def _by_condition(reports: Sequence[EvalReport]) -> Dict[str, EvalReport]:
    return {r.condition: r for r in reports}


def _fmt(value: Optional[float]) -> str:
    return "none" if value is None else f"{value:.4f}"


def standard_enhancer_checks(reports: Sequence[EvalReport], baseline: str) -> List[Check]:
    """Enhancers trained on ordinary noise should not improve quality on adversarial inputs."""
    rows = _by_condition(reports)
    base = rows[baseline]
    checks = []
    for name, report in rows.items():
        if name == baseline:
            continue
        for metric in ("pesq", "stoi", "sti"):
            observed, reference = getattr(report, metric), getattr(base, metric)
            checks.append(
                Check(
                    check=f"standard_{name}_on_adversarial",
                    metric=metric,
                    observed=_fmt(observed),
                    expected=f"<= {baseline} {_fmt(reference)}",
                    passed=observed <= reference,
                )
            )
        checks.append(
            Check(
                check=f"standard_{name}_on_adversarial",
                metric="snr_db",
                observed=_fmt(report.snr_db),
                expected=f"> {baseline} {_fmt(base.snr_db)}",
                passed=report.snr_db > base.snr_db,
            )
        )
    return checks


def adversarial_enhancer_checks(
    reports: Sequence[EvalReport], better: str = "unet_at", worse: str = "dnn"
) -> List[Check]:
    rows = _by_condition(reports)
    if better not in rows or worse not in rows:
        logger.warning(f"Skipping {better} vs {worse} check: both must be evaluated")
        return []
    checks = []
    for metric in ("pesq", "sti", "stoi"):
        a, b = getattr(rows[better], metric), getattr(rows[worse], metric)
        checks.append(
            Check(
                check=f"adversarial_{better}_vs_{worse}",
                metric=metric,
                observed=_fmt(a),
                expected=f">= {worse} {_fmt(b)}",
                passed=a >= b,
            )
        )
    return checks


def run_quality_tables(
    clean: Sequence[Waveform],
    noisy: Sequence[Waveform],
    adversarial: Sequence[Waveform],
    enhancers: Dict[str, EnhancerModel],
    adv_enhancers: Dict[str, EnhancerModel],
    out_dir: Union[str, Path],
    workers: int = 1,
) -> Dict[str, List[EvalReport]]:
    """
    table1: clean control, noisy baseline and each enhancer on ordinary noise.
    table2: noisy_adv baseline and each standard enhancer on adversarial inputs.
    table3: noisy_adv baseline and each adversarially trained enhancer on adversarial inputs.
    """
    if not (len(clean) == len(noisy) == len(adversarial)) or not clean:
        raise ParameterError(
            f"need matching non-empty inputs, got {len(clean)} clean, {len(noisy)} noisy "
            f"and {len(adversarial)} adversarial",
            module="experiments",
        )
    out_dir = Path(out_dir)
    noisy_pairs = list(zip(noisy, clean))
    adv_pairs = list(zip(adversarial, clean))

    table1 = [
        quality_report(list(zip(clean, clean)), "clean", workers),
        quality_report(noisy_pairs, "noisy", workers),
    ]
    table1 += [
        quality_report(_enhanced_pairs(m, noisy_pairs), name, workers)
        for name, m in enhancers.items()
    ]
    adv_baseline = quality_report(adv_pairs, "noisy_adv", workers)
    table2 = [adv_baseline] + [
        quality_report(_enhanced_pairs(m, adv_pairs), name, workers)
        for name, m in enhancers.items()
    ]
    table3 = [adv_baseline] + [
        quality_report(_enhanced_pairs(m, adv_pairs), name, workers)
        for name, m in adv_enhancers.items()
    ]
    write_quality_table(table1, out_dir / "table1_noise")
    write_quality_table(table2, out_dir / "table2_adversarial")
    write_quality_table(table3, out_dir / "table3_adversarial_training")
    checks = standard_enhancer_checks(table2, "noisy_adv") + adversarial_enhancer_checks(table3)
    write_checks(checks, out_dir / "checks_quality")
    return {"table1": table1, "table2": table2, "table3": table3}


# recognizer robustness table


def decode_rates(
    pipeline: Pipeline, inputs: Sequence[Waveform], references: Sequence[str], target_text: str
) -> Tuple[float, float]:
    """(RoSA %, mean WER %) of the pipeline's transcripts."""
    decoded = [pipeline.decode(w.samples).text for w in inputs]
    rosa_pct = 100.0 * np.mean([text == target_text for text in decoded])
    wer_pct = float(np.mean([wer(ref, text) for ref, text in zip(references, decoded)]))
    return float(rosa_pct), wer_pct


def asr_table_checks(
    frame: pd.DataFrame, better: str = "unet_at", worse: str = "dnn"
) -> List[Check]:
    checks = []
    for attack in frame["attack"].unique():
        if attack == "none":
            continue
        block = frame[frame["attack"] == attack]
        base = block[(block["defense"] == "none") & ~block["adversarial_training"]].iloc[0]
        for _, row in block[block["adversarial_training"]].iterrows():
            for metric in ("rosa_pct", "wer_pct"):
                checks.append(
                    Check(
                        check=f"{attack}_advt_{row['defense']}_vs_undefended",
                        metric=metric,
                        observed=_fmt(row[metric]),
                        expected=f"< undefended {_fmt(base[metric])}",
                        passed=bool(row[metric] < base[metric]),
                    )
                )
        advt = block[block["adversarial_training"]].set_index("defense")
        if better in advt.index and worse in advt.index:
            a, b = advt.loc[better, "wer_pct"], advt.loc[worse, "wer_pct"]
            checks.append(
                Check(
                    check=f"{attack}_advt_{better}_vs_{worse}",
                    metric="wer_pct",
                    observed=_fmt(a),
                    expected=f"<= {worse} {_fmt(b)}",
                    passed=bool(a <= b),
                )
            )
    return checks


def run_asr_table(
    asr: SurrogateAsr,
    enhancers: Dict[str, EnhancerModel],
    adv_enhancers: Dict[str, EnhancerModel],
    crafted: Dict[str, Sequence[AdversarialResult]],
    references: Sequence[str],
    target_text: str,
    out_dir: Union[str, Path],
    asr_advt: Optional[SurrogateAsr] = None,
    clean: Optional[Sequence[Waveform]] = None,
) -> pd.DataFrame:
    """
    RoSA and WER for {no enhancement, each enhancer} x {standard, adversarially trained} per
    attack. Examples are crafted once against the undefended recognizer and replayed through
    every defended pipeline. The AdvT row without enhancement uses the fine-tuned recognizer.
    """
    rows = []
    if clean is not None:
        rosa_pct, wer_pct = decode_rates(Pipeline(asr), clean, references, target_text)
        rows.append(["none", False, "none", rosa_pct, wer_pct, len(clean)])
    for attack, results in crafted.items():
        inputs = [r.adversarial for r in results]
        if len(inputs) != len(references):
            raise ParameterError(
                f"{attack}: {len(inputs)} examples for {len(references)} references",
                module="experiments",
            )
        for adversarial_training, models in ((False, enhancers), (True, adv_enhancers)):
            recognizer = asr_advt if adversarial_training else asr
            settings: List[Tuple[str, Optional[Pipeline]]] = [
                ("none", Pipeline(recognizer) if recognizer is not None else None)
            ]
            settings += [(name, enhancer_pipeline(asr, m, name)) for name, m in models.items()]
            for defense, pipeline in settings:
                if pipeline is None:
                    logger.warning(f"Skipping {attack}/none+AdvT: no fine-tuned recognizer")
                    continue
                rosa_pct, wer_pct = decode_rates(pipeline, inputs, references, target_text)
                rows.append([attack, adversarial_training, defense, rosa_pct, wer_pct, len(inputs)])
                logger.info(
                    f"{attack} advt={adversarial_training} {defense}: "
                    f"RoSA {rosa_pct:.1f}%, WER {wer_pct:.1f}%"
                )
    frame = pd.DataFrame(rows, columns=ASR_COLUMNS)
    out_dir = Path(out_dir)
    write_frame(frame, out_dir / "table4_asr")
    write_checks(asr_table_checks(frame), out_dir / "checks_asr")
    return frame


# budget sweep


def _budget_key(value: Optional[float]) -> float:
    return -math.inf if value is None else value


def sweep_checks(undefended: SweepResult, defended: SweepResult, attack: str) -> List[Check]:
    """With the enhancer in the loop, full success should need a lower (noisier) SNR budget."""
    a, b = undefended.full_success_budget_db, defended.full_success_budget_db
    checks = [
        Check(
            check=f"sweep_{attack}_{defended.points[0].pipeline}",
            metric="full_success_budget_db",
            observed=f"{_fmt(b)} defended",
            expected=f"<= undefended {_fmt(a)}",
            passed=_budget_key(a) >= _budget_key(b),
        )
    ]
    pairs = list(zip(undefended.per_utterance_budget_db, defended.per_utterance_budget_db))
    lower = sum(_budget_key(u) > _budget_key(d) for u, d in pairs)
    checks.append(
        Check(
            check=f"sweep_{attack}_{defended.points[0].pipeline}",
            metric="per_utterance_budget_db",
            observed=f"{lower}/{len(pairs)} utterances need a noisier budget",
            expected=">= 80%",
            passed=lower >= 0.8 * len(pairs),
        )
    )
    return checks


def run_budget_sweep(
    pipelines: Sequence[Pipeline],
    utterances: Sequence[Waveform],
    target_text: str,
    budgets_db: Sequence[Optional[float]],
    out_dir: Union[str, Path],
    attacks: Sequence[str] = ("grad",),
    budget: Optional[PerturbationBudget] = None,
    evo_cfg: Optional[EvoConfig] = None,
    lr: float = 1e-3,
    seed: int = 0,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    TASR per budget for every pipeline. The first pipeline is the undefended reference; the
    curve holds |budgets| x |pipelines| rows per attack.
    """
    if not pipelines:
        raise ParameterError("run_budget_sweep: no pipelines", module="experiments")
    points, summary, checks = [], [], []
    for attack in attacks:
        results = [
            adaptive_attack_sweep(
                p, utterances, target_text, budgets_db, attack, budget, evo_cfg, lr, seed
            )
            for p in pipelines
        ]
        for p, result in zip(pipelines, results):
            points += [point.dict() for point in result.points]
            summary.append(
                {
                    "pipeline": p.name,
                    "attack": attack,
                    "full_success_budget_db": result.full_success_budget_db,
                    "per_utterance_budget_db": " ".join(
                        _fmt(b) for b in result.per_utterance_budget_db
                    ),
                }
            )
        for result in results[1:]:
            checks += sweep_checks(results[0], result, attack)
    curve = pd.DataFrame(points, columns=SWEEP_COLUMNS)
    summary_frame = pd.DataFrame(summary)
    out_dir = Path(out_dir)
    write_frame(curve, out_dir / "sweep_curve")
    write_frame(summary_frame, out_dir / "sweep_summary")
    write_checks(checks, out_dir / "checks_sweep")
    return curve, summary_frame


# spectrograms


def spectrogram_image(w: Waveform, frame_len: int = 512, hop: int = 256) -> np.ndarray:
    """
    8-bit log-power image, frequency on rows (low at the bottom) and time on columns. The ramp
    is fixed: the floor maps to 0 and a full-scale sinusoid's peak bin to 255.
    """
    values = log_power(stft(w, frame_len, hop), SPECTROGRAM_FLOOR).values.T[::-1]
    low = math.log(SPECTROGRAM_FLOOR)
    high = math.log((frame_len / 4.0) ** 2)
    scaled = np.clip((values - low) / (high - low), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def export_spectrogram(w: Waveform, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(spectrogram_image(w), mode="L").convert("RGB")
    image.save(path, format="PPM")
    return path


def export_figure_panels(panels: Dict[str, Waveform], out_dir: Union[str, Path]) -> List[Path]:
    """One PPM per condition, e.g. clean, noisy, adversarial, enhanced and the AdvT outputs."""
    out_dir = Path(out_dir)
    return [
        export_spectrogram(w, out_dir / f"spectrogram_{name}.ppm") for name, w in panels.items()
    ]


# campaigns


def campaign_frame(results: Sequence[AdversarialResult], utterance_ids: Sequence[str]):
    rows = [
        [utt, r.attack, r.success, r.snr_db, r.iterations, r.decoded.text]
        for utt, r in zip(utterance_ids, results)
    ]
    return pd.DataFrame(rows, columns=CAMPAIGN_COLUMNS)


def write_campaign(
    results: Sequence[AdversarialResult],
    utterance_ids: Sequence[str],
    out_dir: Union[str, Path],
) -> List[Path]:
    """Adversarial and perturbation WAVs per result plus results.csv."""
    if len(results) != len(utterance_ids):
        raise ParameterError(
            f"{len(results)} results for {len(utterance_ids)} utterance ids", module="experiments"
        )
    out_dir = Path(out_dir)
    (out_dir / "adversarial").mkdir(parents=True, exist_ok=True)
    (out_dir / "perturbation").mkdir(parents=True, exist_ok=True)
    written = []
    for utt, r in zip(utterance_ids, results):
        for kind, w in (("adversarial", r.adversarial), ("perturbation", r.perturbation)):
            path = out_dir / kind / f"{utt}_{r.attack}.wav"
            wav_write(w, path)
            written.append(path)
    csv_path = out_dir / "results.csv"
    campaign_frame(results, utterance_ids).to_csv(csv_path, index=False)
    written.append(csv_path)
    logger.info(f"Wrote {len(results)} attack results to {out_dir}")
    return written


def read_campaign(out_dir: Union[str, Path]) -> List[Tuple[str, str, Waveform]]:
    """(utterance id, attack, adversarial waveform) for every row of a written campaign."""
    out_dir = Path(out_dir)
    frame = pd.read_csv(out_dir / "results.csv")
    folder = out_dir / "adversarial"
    return [
        (row.utterance, row.attack, wav_read(folder / f"{row.utterance}_{row.attack}.wav"))
        for row in frame.itertuples()
    ]

