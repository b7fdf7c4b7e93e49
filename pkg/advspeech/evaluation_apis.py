import logging
import math
import os
from functools import lru_cache
from typing import List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, ValidationError

from advspeech.asr import SurrogateAsr, load_asr, transcribe
from advspeech.datatypes import Waveform
from advspeech.errors import AdvSpeechError
from advspeech.metrics import evaluate_bundle

logger = logging.getLogger(__name__)

router = APIRouter()


class EvaluateRequest(BaseModel):
    clean: List[float]
    degraded: List[float]
    sample_rate_hz: int = 16000
    reference_text: Optional[str] = None
    hypothesis_text: Optional[str] = None
    target_text: Optional[str] = None
    condition: str = "degraded"


class EvaluateResponse(BaseModel):
    condition: str
    pesq: Optional[float] = None
    sti: Optional[float] = None
    stoi: Optional[float] = None
    # JSON has no infinity; identical signals report snr_db = null with snr_infinite set
    snr_db: Optional[float] = None
    snr_infinite: bool = False
    wer_pct: Optional[float] = None
    rosa_pct: Optional[float] = None


class TranscribeRequest(BaseModel):
    samples: List[float]
    sample_rate_hz: int = 16000


class TranscribeResponse(BaseModel):
    text: str
    n_samples: int


def _waveform(samples: List[float], sample_rate_hz: int) -> Waveform:
    try:
        return Waveform(samples=samples, sample_rate_hz=sample_rate_hz)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=f"waveform: {e}")


@lru_cache(maxsize=4)
def _load_model(path: str) -> SurrogateAsr:
    logger.info(f"Loading ASR checkpoint {path}")
    return load_asr(path)


def get_asr_model() -> SurrogateAsr:
    path = os.environ.get("ADVSPEECH_ASR_CHECKPOINT")
    if not path:
        raise HTTPException(status_code=503, detail="ADVSPEECH_ASR_CHECKPOINT is not set")
    try:
        return _load_model(path)
    except AdvSpeechError as e:
        raise HTTPException(status_code=503, detail=f"{e.module}: {e.message}")


@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate(request: EvaluateRequest):
    clean = _waveform(request.clean, request.sample_rate_hz)
    degraded = _waveform(request.degraded, request.sample_rate_hz)
    try:
        report = evaluate_bundle(
            clean,
            degraded,
            request.reference_text,
            request.hypothesis_text,
            request.target_text,
            request.condition,
        )
    except AdvSpeechError as e:
        raise HTTPException(status_code=400, detail=f"{e.module}: {e.message}")
    body = report.dict()
    if report.snr_db is not None and math.isinf(report.snr_db):
        body.update(snr_db=None, snr_infinite=True)
    return EvaluateResponse(**body)


@router.post("/transcribe", response_model=TranscribeResponse)
def transcribe_samples(request: TranscribeRequest):
    model = get_asr_model()
    w = _waveform(request.samples, request.sample_rate_hz)
    try:
        transcript = transcribe(model, w)
    except AdvSpeechError as e:
        raise HTTPException(status_code=400, detail=f"{e.module}: {e.message}")
    return TranscribeResponse(text=transcript.text, n_samples=len(w))
