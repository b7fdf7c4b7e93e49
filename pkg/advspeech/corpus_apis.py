import os
from typing import Generic, List, TypeVar

from fastapi import APIRouter, HTTPException, Query
from fastapi_pagination.default import Page as BasePage
from fastapi_pagination.default import Params as BaseParams
from pydantic import BaseModel

from advspeech.corpus import read_corpus_index
from advspeech.errors import AdvSpeechError

T = TypeVar("T", bound=BaseModel)


class Params(BaseParams):
    size: int = Query(20, ge=1, le=500, description="Page size")


class Page(BasePage[T], Generic[T]):
    __params_type__ = Params


class UtteranceSummary(BaseModel):
    id: str
    text: str
    n_samples: int
    snr_levels_db: List[float]


router = APIRouter()


def get_corpus_index() -> dict:
    corpus_dir = os.environ.get("ADVSPEECH_CORPUS_DIR")
    if not corpus_dir:
        raise HTTPException(status_code=503, detail="ADVSPEECH_CORPUS_DIR is not set")
    try:
        return read_corpus_index(corpus_dir)
    except AdvSpeechError as e:
        raise HTTPException(status_code=404, detail=f"{e.module}: {e.message}")


@router.get("/corpus/utterances", response_model=Page[UtteranceSummary])
def list_utterances(
    page: int = Query(1, ge=1, description="Page number (1-indexed)"),
    size: int = Query(20, ge=1, le=500, description="Page size"),
) -> Page[UtteranceSummary]:
    index = get_corpus_index()
    n_samples = index["spec"]["utterance_len"]
    entries = index["utterances"]
    items = [
        UtteranceSummary(
            id=entry["id"],
            text=entry["text"],
            n_samples=n_samples,
            snr_levels_db=[v["snr_db"] for v in entry["noisy"]],
        )
        for entry in entries[(page - 1) * size : page * size]
    ]
    pages = -(-len(entries) // size)
    return Page(items=items, total=len(entries), page=page, size=size, pages=pages)
