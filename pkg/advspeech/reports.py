"""CSV and markdown emission for every table the harness produces."""
import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd
from pydantic import BaseModel

from advspeech.datatypes import EvalReport

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["condition", "pesq", "sti", "stoi", "snr_db", "wer_pct", "rosa_pct"]
QUALITY_METRICS = ["pesq", "sti", "stoi", "snr_db"]
CHECK_COLUMNS = ["check", "metric", "observed", "expected", "passed"]


class Check(BaseModel):
    """One directional comparison; failures are reported, never raised."""

    check: str
    metric: str
    observed: str
    expected: str
    passed: bool


def reports_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.dict() for r in reports], columns=REPORT_COLUMNS)


def quality_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Rows = metrics, columns = conditions in the order given."""
    frame = reports_frame(reports).set_index("condition")[QUALITY_METRICS].T
    frame.index.name = "metric"
    frame.columns.name = None
    return frame


def checks_frame(checks: Sequence[Check]) -> pd.DataFrame:
    return pd.DataFrame([c.dict() for c in checks], columns=CHECK_COLUMNS)


def write_frame(frame: pd.DataFrame, stem: Union[str, Path], index: bool = False) -> List[Path]:
    """Write <stem>.csv and an aligned <stem>.md next to it."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = stem.with_suffix(".csv"), stem.with_suffix(".md")
    frame.to_csv(csv_path, index=index)
    md_path.write_text(frame.to_markdown(index=index, floatfmt=".3f") + "\n")
    logger.info(f"Wrote {csv_path} ({len(frame)} rows)")
    return [csv_path, md_path]


def write_quality_table(reports: Sequence[EvalReport], stem: Union[str, Path]) -> List[Path]:
    return write_frame(quality_frame(reports), stem, index=True)


def write_checks(checks: Sequence[Check], stem: Union[str, Path]) -> List[Path]:
    failed = [c for c in checks if not c.passed]
    for c in failed:
        logger.warning(
            f"check {c.check} on {c.metric}: observed {c.observed}, expected {c.expected}"
        )
    return write_frame(checks_frame(checks), stem)
