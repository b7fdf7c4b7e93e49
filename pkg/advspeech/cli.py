"""
Command-line entry point.

    advspeech <command> [--config c.json] [--seed N] [--out DIR] [--log-level LEVEL]

Every command reads a JSON config into its pydantic model, writes its artifacts under --out and
finishes by writing manifest.json there. Failures print one line, `error: <module>: <message>`,
and exit 1.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Type

import pandas as pd
from pydantic import BaseModel, ValidationError, validator

from advspeech.asr import (
    AsrTrainingConfig,
    adversarial_finetune,
    evaluate_wer,
    load_asr,
    save_asr,
    train_surrogate,
)
from advspeech.attack import (
    Pipeline,
    evolutionary_attack,
    gradient_attack,
    ota_gradient_attack,
    rosa,
)
from advspeech.corpus import (
    Utterance,
    asr_examples,
    enhancer_pairs,
    gen_corpus,
    load_corpus,
    write_corpus,
)
from advspeech.datatypes import (
    CorpusSpec,
    DnnConfig,
    EvoConfig,
    ExperimentManifest,
    PerturbationBudget,
    TrainingConfig,
    UNetAtConfig,
)
from advspeech.enhance import (
    EnhancerModel,
    adversarial_train,
    enhance_waveform,
    init_enhancer,
    load_enhancer,
    save_enhancer,
    train_enhancer,
)
from advspeech.errors import AdvSpeechError, ConfigurationError
from advspeech.experiments import (
    craft_attacks,
    enhancer_pipeline,
    export_figure_panels,
    export_spectrogram,
    read_campaign,
    run_asr_table,
    run_budget_sweep,
    run_quality_tables,
    write_campaign,
)
from advspeech.metrics import evaluate_bundle
from advspeech.reports import reports_frame, write_frame
from advspeech.signal import default_channel, load_channel, wav_read, wav_write
from advspeech.utils.manifest import record_checkpoint, start_manifest, write_manifest

logger = logging.getLogger(__name__)


# configs


class TrainAsrConfig(BaseModel):
    corpus_dir: str
    held_out: int = 20
    training: AsrTrainingConfig = AsrTrainingConfig()
    finetune: Optional[TrainingConfig] = None
    max_held_out_wer_pct: float = 15.0
    seed: int = 0


class AttackConfig(BaseModel):
    corpus_dir: str
    asr_checkpoint: str
    enhancer_checkpoint: Optional[str] = None
    attack: str = "grad"
    target_text: str = "open the door"
    held_out: int = 20
    n_utterances: Optional[int] = None
    snr_db: Optional[float] = None
    budget: PerturbationBudget = PerturbationBudget()
    lr: float = 1e-3
    mc_samples: int = 4
    channel_dir: Optional[str] = None
    evo: EvoConfig = EvoConfig()
    seed: int = 0

    @validator("attack")
    def known_attack(cls, value):
        if value not in ("grad", "ota", "evo"):
            raise ValueError("attack must be one of grad, ota, evo")
        return value


class TrainEnhancerConfig(BaseModel):
    corpus_dir: str
    kind: str = "unet_at"
    unet: UNetAtConfig = UNetAtConfig()
    dnn: DnnConfig = DnnConfig()
    training: TrainingConfig = TrainingConfig()
    adversarial: bool = False
    held_out: int = 20
    snr_levels_db: Optional[List[float]] = None
    augment_campaign_dir: Optional[str] = None
    seed: int = 0

    @validator("kind")
    def known_kind(cls, value):
        if value not in ("dnn", "unet_w", "unet_at"):
            raise ValueError("kind must be one of dnn, unet_w, unet_at")
        return value


class EnhanceConfig(BaseModel):
    checkpoint: str
    inputs: List[str] = []


class EvaluateConfig(BaseModel):
    clean: str
    degraded: str
    reference_text: Optional[str] = None
    hypothesis_text: Optional[str] = None
    target_text: Optional[str] = None
    condition: str = "degraded"


class TablesConfig(BaseModel):
    corpus_dir: str
    asr_checkpoint: str
    asr_advt_checkpoint: Optional[str] = None
    enhancers: Dict[str, str] = {}
    adv_enhancers: Dict[str, str] = {}
    target_text: str = "open the door"
    held_out: int = 20
    n_utterances: Optional[int] = None
    snr_db: float = 5.0
    attacks: List[str] = ["grad", "evo"]
    budget: PerturbationBudget = PerturbationBudget()
    lr: float = 1e-3
    evo: EvoConfig = EvoConfig()
    workers: int = 1
    seed: int = 0


class SweepConfig(BaseModel):
    corpus_dir: str
    asr_checkpoint: str
    enhancer_checkpoint: str
    target_text: str = "open the door"
    budgets_db: List[Optional[float]] = [20.0, 15.0, 10.0, 5.0, 0.0, -5.0, None]
    attacks: List[str] = ["grad"]
    held_out: int = 20
    n_utterances: Optional[int] = 10
    budget: PerturbationBudget = PerturbationBudget(delta_inf=1.0)
    lr: float = 1e-3
    evo: EvoConfig = EvoConfig()
    seed: int = 0


class SpectrogramConfig(BaseModel):
    inputs: List[str] = []


class ServeConfig(BaseModel):
    host: str = "0.0.0.0"
    port: int = 8000


# helpers


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def load_config(model: Type[BaseModel], path: Optional[str], overrides: dict) -> BaseModel:
    data = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError(f"config file {config_path} does not exist", module="config")
        try:
            data = json.loads(config_path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{config_path}: {e}", module="config") from e
    data.update(overrides)
    try:
        return model(**data)
    except ValidationError as e:
        raise ConfigurationError(_one_line(e), module="config") from e


def apply_seed(config: BaseModel, seed: int):
    """Set every `seed` field, nested configs included."""
    for name, value in config:
        if name == "seed":
            setattr(config, name, seed)
        elif isinstance(value, BaseModel):
            apply_seed(value, seed)


def collect_seeds(config: BaseModel, prefix: str = "") -> Dict[str, int]:
    seeds = {}
    for name, value in config:
        if name == "seed":
            seeds[prefix + name] = value
        elif isinstance(value, BaseModel):
            seeds.update(collect_seeds(value, f"{prefix}{name}."))
    return seeds


def require_file(path: str, label: str) -> Path:
    if not Path(path).exists():
        raise ConfigurationError(f"{label} {path} does not exist", module="config")
    return Path(path)


def _selected(corpus_dir: str, held_out: int, n: Optional[int]) -> List[Utterance]:
    _, held = load_corpus(corpus_dir).split(held_out)
    return held[:n] if n else held


def _load_enhancers(paths: Dict[str, str], label: str) -> Dict[str, EnhancerModel]:
    return {
        name: load_enhancer(require_file(path, f"{label} checkpoint {name}"))
        for name, path in paths.items()
    }


# commands


def run_gen_corpus(cfg: CorpusSpec, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    return write_corpus(gen_corpus(cfg), out_dir)


def run_train_asr(cfg: TrainAsrConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    train, held = load_corpus(cfg.corpus_dir).split(cfg.held_out)
    model = train_surrogate(asr_examples(train, cfg.training.noisy_snr_db), cfg.training)
    rows = []
    outputs = [save_asr(model, out_dir / "asr.ntv1")]
    record_checkpoint(manifest, "asr", outputs[0])
    models = [("asr", model)]
    if cfg.finetune is not None:
        tuned = adversarial_finetune(model, asr_examples(train), cfg.finetune)
        outputs.append(save_asr(tuned, out_dir / "asr_advt.ntv1"))
        record_checkpoint(manifest, "asr_advt", outputs[-1])
        models.append(("asr_advt", tuned))
    for label, m in models:
        held_wer = evaluate_wer(m, asr_examples(held)) if held else None
        rows.append(
            {"model": label, "held_out_wer_pct": held_wer, "final_loss": m.loss_history[-1]}
        )
        logger.info(f"{label}: held-out WER {held_wer}")
        if held_wer is not None and held_wer > cfg.max_held_out_wer_pct:
            logger.warning(
                f"{label} held-out WER {held_wer:.1f}% exceeds {cfg.max_held_out_wer_pct}%"
            )
    outputs += write_frame(pd.DataFrame(rows), out_dir / "asr_eval")
    return outputs


def run_attack(cfg: AttackConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    asr = load_asr(require_file(cfg.asr_checkpoint, "asr checkpoint"))
    pipeline = Pipeline(asr)
    if cfg.enhancer_checkpoint:
        enhancer = load_enhancer(require_file(cfg.enhancer_checkpoint, "enhancer checkpoint"))
        pipeline = enhancer_pipeline(asr, enhancer, enhancer.kind)
    utterances = _selected(cfg.corpus_dir, cfg.held_out, cfg.n_utterances)
    channel = None
    if cfg.attack == "ota":
        channel = load_channel(cfg.channel_dir) if cfg.channel_dir else default_channel(cfg.seed)
    results = []
    for i, u in enumerate(utterances):
        x = u.clean if cfg.snr_db is None else u.variant(cfg.snr_db)
        seed = cfg.seed + i
        if cfg.attack == "grad":
            result = gradient_attack(pipeline, x, cfg.target_text, cfg.budget, cfg.lr, seed)
        elif cfg.attack == "ota":
            result = ota_gradient_attack(
                pipeline, x, cfg.target_text, channel, cfg.budget, cfg.mc_samples, cfg.lr, seed
            )
        else:
            result = evolutionary_attack(pipeline.oracle(), x, cfg.target_text, cfg.evo, seed)
        results.append(result)
    logger.info(f"{cfg.attack}: success rate {rosa(results):.1f}% over {len(results)} utterances")
    return write_campaign(results, [u.utt_id for u in utterances], out_dir)


def _augmentation(campaign_dir: str, train: List[Utterance]):
    clean_by_id = {u.utt_id: u.clean for u in train}
    pairs = []
    for utt_id, _, adversarial in read_campaign(require_file(campaign_dir, "campaign directory")):
        if utt_id not in clean_by_id:
            logger.warning(f"Skipping attack output for {utt_id}: not a training utterance")
            continue
        pairs.append((adversarial, clean_by_id[utt_id]))
    return pairs


def run_train_enhancer(
    cfg: TrainEnhancerConfig, out_dir: Path, manifest: ExperimentManifest
) -> List[Path]:
    corpus = load_corpus(cfg.corpus_dir)
    train, _ = corpus.split(cfg.held_out)
    dataset = enhancer_pairs(train, cfg.snr_levels_db)
    augmentation = None
    if cfg.augment_campaign_dir:
        augmentation = _augmentation(cfg.augment_campaign_dir, train)
    model = init_enhancer(cfg.kind, cfg.dnn if cfg.kind == "dnn" else cfg.unet, cfg.seed)
    fit = adversarial_train if cfg.adversarial else train_enhancer
    trained = fit(model, dataset, cfg.training, augmentation)
    label = f"{cfg.kind}_advt" if cfg.adversarial else cfg.kind
    path = save_enhancer(trained, out_dir / f"enhancer_{label}.ntv1")
    record_checkpoint(manifest, label, path)
    return [path]


def run_enhance(cfg: EnhanceConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    model = load_enhancer(require_file(cfg.checkpoint, "enhancer checkpoint"))
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in cfg.inputs:
        path = out_dir / f"{Path(name).stem}_enhanced.wav"
        wav_write(enhance_waveform(model, wav_read(name)), path)
        outputs.append(path)
    return outputs


def run_evaluate(cfg: EvaluateConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    report = evaluate_bundle(
        wav_read(cfg.clean),
        wav_read(cfg.degraded),
        cfg.reference_text,
        cfg.hypothesis_text,
        cfg.target_text,
        cfg.condition,
    )
    logger.info(f"{report}")
    return write_frame(reports_frame([report]), out_dir / "evaluation")


def run_tables(cfg: TablesConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    asr = load_asr(require_file(cfg.asr_checkpoint, "asr checkpoint"))
    asr_advt = None
    if cfg.asr_advt_checkpoint:
        asr_advt = load_asr(require_file(cfg.asr_advt_checkpoint, "asr_advt checkpoint"))
    enhancers = _load_enhancers(cfg.enhancers, "enhancer")
    adv_enhancers = _load_enhancers(cfg.adv_enhancers, "adversarially trained enhancer")
    utterances = _selected(cfg.corpus_dir, cfg.held_out, cfg.n_utterances)
    clean = [u.clean for u in utterances]
    noisy = [u.variant(cfg.snr_db) for u in utterances]
    references = [u.text for u in utterances]

    crafted = craft_attacks(
        asr, noisy, cfg.target_text, cfg.attacks, cfg.budget, cfg.evo, cfg.lr, cfg.seed
    )
    outputs = []
    for attack, results in crafted.items():
        ids = [u.utt_id for u in utterances]
        outputs += write_campaign(results, ids, out_dir / f"campaign_{attack}")
    adversarial = [r.adversarial for r in crafted[cfg.attacks[0]]]
    run_quality_tables(clean, noisy, adversarial, enhancers, adv_enhancers, out_dir, cfg.workers)
    run_asr_table(
        asr,
        enhancers,
        adv_enhancers,
        crafted,
        references,
        cfg.target_text,
        out_dir,
        asr_advt=asr_advt,
        clean=clean,
    )

    panels = {"clean": clean[0], "noisy": noisy[0], "adversarial": adversarial[0]}
    for name, model in enhancers.items():
        panels[f"enhanced_{name}"] = enhance_waveform(model, adversarial[0])
    for name, model in adv_enhancers.items():
        panels[f"advt_{name}"] = enhance_waveform(model, adversarial[0])
    outputs += export_figure_panels(panels, out_dir / "spectrograms")
    return outputs + sorted(out_dir.glob("*.csv"))


def run_sweep(cfg: SweepConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    asr = load_asr(require_file(cfg.asr_checkpoint, "asr checkpoint"))
    enhancer = load_enhancer(require_file(cfg.enhancer_checkpoint, "enhancer checkpoint"))
    utterances = _selected(cfg.corpus_dir, cfg.held_out, cfg.n_utterances)
    pipelines = [Pipeline(asr, name="none"), enhancer_pipeline(asr, enhancer, enhancer.kind)]
    run_budget_sweep(
        pipelines,
        [u.clean for u in utterances],
        cfg.target_text,
        cfg.budgets_db,
        out_dir,
        cfg.attacks,
        cfg.budget,
        cfg.evo,
        cfg.lr,
        cfg.seed,
    )
    return sorted(out_dir.glob("sweep_*.csv"))


def run_spectrogram(
    cfg: SpectrogramConfig, out_dir: Path, manifest: ExperimentManifest
) -> List[Path]:
    return [
        export_spectrogram(wav_read(name), out_dir / f"{Path(name).stem}.ppm")
        for name in cfg.inputs
    ]


def run_serve(cfg: ServeConfig, out_dir: Path, manifest: ExperimentManifest) -> List[Path]:
    import uvicorn

    write_manifest(manifest, out_dir)
    uvicorn.run("main:app", host=cfg.host, port=cfg.port)
    return []


Handler = Callable[[BaseModel, Path, ExperimentManifest], List[Path]]

COMMANDS: Dict[str, Tuple[Type[BaseModel], Handler, str]] = {
    "gen-corpus": (CorpusSpec, run_gen_corpus, "synthesize the command corpus"),
    "train-asr": (TrainAsrConfig, run_train_asr, "train the surrogate recognizer"),
    "attack": (AttackConfig, run_attack, "craft adversarial examples"),
    "train-enhancer": (TrainEnhancerConfig, run_train_enhancer, "train a speech enhancer"),
    "enhance": (EnhanceConfig, run_enhance, "enhance WAV files with a checkpoint"),
    "evaluate": (EvaluateConfig, run_evaluate, "score a degraded WAV against its clean source"),
    "tables": (TablesConfig, run_tables, "quality and robustness tables"),
    "sweep": (SweepConfig, run_sweep, "perturbation budget sweep"),
    "spectrogram": (SpectrogramConfig, run_spectrogram, "log-power spectrogram images"),
    "serve": (ServeConfig, run_serve, "run the HTTP service"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advspeech", description=__doc__.strip().splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")
    common.add_argument("--out", type=str, default="out", help="output directory")
    common.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        command = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("enhance", "spectrogram"):
            command.add_argument("inputs", nargs="*", help="WAV files")
        if name == "evaluate":
            command.add_argument("clean", nargs="?", help="clean WAV")
            command.add_argument("degraded", nargs="?", help="degraded WAV")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for key in ("inputs", "clean", "degraded"):
        value = getattr(args, key, None)
        if value:
            overrides[key] = value
    return overrides


def run_command(args: argparse.Namespace, argv: List[str]) -> ExperimentManifest:
    model, handler, _ = COMMANDS[args.command]
    cfg = load_config(model, args.config, _overrides(args))
    if args.seed is not None:
        apply_seed(cfg, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = start_manifest(args.command, argv, cfg, collect_seeds(cfg))
    outputs = handler(cfg, out_dir, manifest)
    manifest.outputs = [str(p) for p in outputs]
    write_manifest(manifest, out_dir)
    return manifest


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        run_command(args, argv)
    except AdvSpeechError as e:
        print(f"error: {e.module}: {_one_line(e.message)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
