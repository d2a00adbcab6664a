"""
Per-step closed-loop records and their text format.
"""
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List

import numpy as np
import pandas as pd

from .exceptions import ArtifactError
from .models import TraceFlag
from .utils.logger import get_logger

logger = get_logger(__name__)

TRACE_COLUMNS = (
    "step",
    "t_s",
    "u_W",
    "yvol_meas_K",
    "yvol_true_K",
    "ypeak_true_K",
    "ypeak_est_K",
    "alpha_hat",
    "u_ref_W",
    "qp_iters",
    "qp_time_ns",
    "loop_time_ns",
    "flags",
)
FLAG_SEPARATOR = "|"


def format_flags(flags: Iterable[TraceFlag]) -> str:
    return FLAG_SEPARATOR.join(sorted(flag.value for flag in flags))


@dataclass
class TraceRow:
    step: int
    t_s: float
    u_W: float
    yvol_meas_K: float
    yvol_true_K: float
    ypeak_true_K: float
    ypeak_est_K: float
    alpha_hat: float
    u_ref_W: float
    qp_iters: int
    qp_time_ns: int
    loop_time_ns: int
    flags: FrozenSet[TraceFlag] = frozenset()


@dataclass
class ClosedLoopTrace:
    """Rows in step order plus the scenario name they came from."""
    scenario: str = ""
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.t_s <= self.rows[-1].t_s:
            raise ValueError("trace times must increase")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(row, name) for row in self.rows])

    def to_frame(self) -> pd.DataFrame:
        records = [astuple(row)[:-1] + (format_flags(row.flags),) for row in self.rows]
        frame = pd.DataFrame.from_records(records, columns=list(TRACE_COLUMNS))
        ints = ["step", "qp_iters", "qp_time_ns", "loop_time_ns"]
        frame[ints] = frame[ints].astype(np.int64)
        floats = [name for name in TRACE_COLUMNS if name not in ints and name != "flags"]
        frame[floats] = frame[floats].astype(float)
        frame["flags"] = frame["flags"].astype(str)
        return frame

    def rows_with(self, flag: TraceFlag) -> List[TraceRow]:
        return [row for row in self.rows if flag in row.flags]


def export_trace(trace: ClosedLoopTrace, path: Path) -> Path:
    """Comma-separated text with one header row; floats in round-trip precision."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        trace.to_frame().to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise ArtifactError(f"cannot write trace to {path}: {e}") from e
    logger.info(f"Wrote {len(trace)} trace rows to {path}")
    return path


def read_trace(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, dtype={"flags": str})
    except (OSError, pd.errors.ParserError) as e:
        raise ArtifactError(f"cannot read trace {path}: {e}") from e


def parse_flags(text: str) -> FrozenSet[TraceFlag]:
    return frozenset(TraceFlag(part) for part in text.split(FLAG_SEPARATOR) if part)


def summarize(trace: ClosedLoopTrace, y_peak_ref: float, y_peak_max: float, alpha_true: float) -> Dict[str, float]:
    """Headline numbers of a run."""
    if not trace.rows:
        return {}
    peak = trace.column("ypeak_true_K")
    within = np.flatnonzero(np.abs(peak - y_peak_ref) <= 1.0)
    return {
        "steps": len(trace),
        "max_peak_K": float(peak.max()),
        "bound_violation_K": float(max(peak.max() - y_peak_max, 0.0)),
        "final_peak_error_K": float(peak[-1] - y_peak_ref),
        "final_alpha_error": float(trace.rows[-1].alpha_hat - alpha_true),
        "first_step_within_1K": int(trace.rows[within[0]].step) if within.size else -1,
        "deadline_misses": len(trace.rows_with(TraceFlag.DEADLINE_MISS)),
        "fallbacks": len(trace.rows_with(TraceFlag.FALLBACK)),
        "max_qp_iters": int(trace.column("qp_iters").max()),
    }
