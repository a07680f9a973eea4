"""
Plain-text file formats
=======================

CSV tables written and read with pandas, plus ``key = value`` text for
``.meta`` sidecars (same basename as the CSV), manifests and fit reports.
Malformed input raises ``TraceFormatError`` with the 1-based file line.
"""

import math
import re
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from analysis import SCALING_COLUMNS, FluctuationSeries, ScalingPoint
from errors import TraceFormatError
from meanfield import TRAJECTORY_COLUMNS, Trajectory
from stochastic import COUNT_COLUMNS, ENSEMBLE_COLUMNS, CountRecord

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]
FLOAT_FORMAT = "%.12g"


def meta_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".meta")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    return str(value).replace("\n", " ")


def _parse_value(text: str) -> Any:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def write_key_values(path: PathLike, values: Mapping[str, Any], header: Optional[str] = None) -> Path:
    """Write ``key = value`` lines; ``None`` values are skipped."""
    path = Path(path)
    lines = [f"# {line}" for line in (header or "").splitlines()]
    lines += [f"{key} = {_format_value(value)}" for key, value in values.items() if value is not None]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug("key_values.written", path=str(path), keys=len(values))
    return path


def parse_key_values(text: str, source: str = "<text>") -> List[Tuple[int, str, str]]:
    """Split ``key = value`` text into (line, key, raw value); blank lines and ``#`` comments skipped."""
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise TraceFormatError(source, number, f"expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise TraceFormatError(source, number, "missing key")
        entries.append((number, key, value))
    return entries


def read_key_values(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    return {key: _parse_value(value) for _, key, value in parse_key_values(path.read_text(encoding="utf-8"), str(path))}


def read_meta(path: PathLike) -> Dict[str, Any]:
    """Sidecar of a CSV file, empty when there is none."""
    sidecar = meta_path(path)
    return read_key_values(sidecar) if sidecar.exists() else {}


def _write_table(frame: pd.DataFrame, path: PathLike, meta: Optional[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="nan")
    if meta is not None:
        write_key_values(meta_path(path), meta)
    logger.info("table.written", path=str(path), rows=len(frame))
    return path


def read_header(path: PathLike) -> List[str]:
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first:
        raise TraceFormatError(str(path), 1, "empty file or missing header")
    return [name.strip() for name in first.split(",")]


def read_table(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    """
    Read a numeric CSV whose header starts with ``columns``

    Raises:
        TraceFormatError: Wrong header, ragged row or non-numeric cell
    """
    path = Path(path)
    header = read_header(path)
    if header[: len(columns)] != list(columns):
        raise TraceFormatError(str(path), 1, f"expected header {','.join(columns)}, got {','.join(header)}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise TraceFormatError(str(path), int(match.group(1)) if match else 0, str(exc)) from exc

    frame = pd.DataFrame(index=raw.index)
    for name in columns:
        values = pd.to_numeric(raw[name].str.strip(), errors="coerce")
        bad = values.isna() & ~raw[name].str.strip().str.lower().isin(["nan"])
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            cell = raw[name].iloc[row]
            raise TraceFormatError(str(path), row + 2, f"column '{name}': '{cell}' is not a number")
        frame[name] = values.astype(float)
    if frame.empty:
        raise TraceFormatError(str(path), 2, "no data rows")
    return frame


def write_trajectory(trajectory: Trajectory, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    return _write_table(trajectory.to_frame(), path, meta)


def read_trajectory(path: PathLike) -> Trajectory:
    frame = read_table(path, TRAJECTORY_COLUMNS)
    try:
        return Trajectory.from_frame(frame, read_meta(path))
    except ValueError as exc:
        raise TraceFormatError(str(path), 2, str(exc)) from exc


def write_counts(record: CountRecord, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    info = {"bin_time": record.bin_time, "calibration": record.calibration}
    info.update(record.metadata)
    info.update(meta or {})
    return _write_table(record.to_frame(), path, info)


def read_counts(path: PathLike) -> CountRecord:
    """Count record; calibration and bin time come from the sidecar when present."""
    frame = read_table(path, COUNT_COLUMNS)
    counts = frame["counts"].to_numpy()
    if np.any(counts < 0) or np.any(counts != np.round(counts)):
        row = int(np.flatnonzero((counts < 0) | (counts != np.round(counts)))[0])
        raise TraceFormatError(str(path), row + 2, "counts must be non-negative integers")
    meta = read_meta(path)
    t = frame["t_us"].to_numpy()
    bin_time = float(meta.get("bin_time") or (t[1] - t[0] if t.size > 1 else 1.0))
    calibration = meta.get("calibration")
    if calibration is None:
        logger.warning("counts_uncalibrated", path=str(path))
        calibration = 1.0
    return CountRecord(t=t, counts=counts.astype(np.int64), calibration=float(calibration),
                       bin_time=bin_time, metadata=meta)


def write_fluctuations(series: FluctuationSeries, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    return _write_table(series.to_frame(), path, meta)


def write_ensemble_mean(frame: pd.DataFrame, path: PathLike, meta: Optional[Mapping[str, Any]] = None) -> Path:
    return _write_table(frame[ENSEMBLE_COLUMNS], path, meta)


def write_scaling_points(points: Iterable[ScalingPoint], path: PathLike) -> Path:
    frame = pd.DataFrame([point.as_row() for point in points], columns=SCALING_COLUMNS)
    return _write_table(frame, path, None)


def table_kind(path: PathLike) -> str:
    """``"trajectory"`` or ``"counts"`` from the CSV header."""
    header = read_header(path)
    if header[: len(TRAJECTORY_COLUMNS)] == TRAJECTORY_COLUMNS:
        return "trajectory"
    if header[: len(COUNT_COLUMNS)] == COUNT_COLUMNS:
        return "counts"
    raise TraceFormatError(str(path), 1, f"unrecognized header {','.join(header)}")
