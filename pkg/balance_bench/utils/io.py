"""
I/O utilities for balance-bench.

Dataset files are CSV with header ``x1,...,xd,t,y`` and 1-based treatments.
Line numbers in errors count the header as line 1.
"""

import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from ..data import LoggedDataset, validate_dataset
from ..errors import DataError

logger = logging.getLogger(__name__)

HEADER_LINES = 1


def ensure_dir(path: Union[str, Path]) -> Path:
    """Ensure directory exists, create if it doesn't."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def dumps_json(data: Any) -> str:
    """Deterministic JSON text; pydantic models are dumped through their schema."""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode='json')
    return json.dumps(data, indent=2, ensure_ascii=False, default=str) + "\n"


def save_json(data: Any, file_path: Union[str, Path]) -> Path:
    """Save data (dict or pydantic model) as a JSON file."""
    file_path = Path(file_path)
    ensure_dir(file_path.parent)
    file_path.write_text(dumps_json(data), encoding='utf-8')
    logger.debug(f"Saved JSON to {file_path}")
    return file_path


def load_json(file_path: Union[str, Path]) -> Any:
    """Load data from JSON file."""
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataError(f"JSON file {file_path} not found")
    try:
        return json.loads(file_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise DataError(f"{file_path}: invalid JSON ({exc.msg})", line=exc.lineno) from exc


def save_csv(data: Union[pd.DataFrame, List[Dict[str, Any]]], file_path: Union[str, Path]) -> Path:
    """Save a DataFrame or a list of records as CSV."""
    frame = data if isinstance(data, pd.DataFrame) else pd.DataFrame.from_records(data)
    if frame.empty:
        logger.warning(f"Writing empty CSV to {file_path}")
    file_path = Path(file_path)
    ensure_dir(file_path.parent)
    frame.to_csv(file_path, index=False, lineterminator="\n")
    logger.debug(f"Saved CSV to {file_path}")
    return file_path


def _read_text_frame(file_path: Path) -> pd.DataFrame:
    if not file_path.exists():
        raise DataError(f"file {file_path} not found")
    try:
        return pd.read_csv(file_path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{file_path} is empty", line=1) from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"{file_path}: {exc}") from exc


def _parse_numeric(frame: pd.DataFrame, columns: List[str], header_lines: int = HEADER_LINES) -> np.ndarray:
    """Convert string columns to floats, reporting the first malformed cell by line."""
    values = np.empty((len(frame), len(columns)))
    for j, column in enumerate(columns):
        text = frame[column].str.strip()
        parsed = pd.to_numeric(text, errors='coerce')
        bad = parsed.isna() & (text.str.lower() != 'nan')
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"cannot parse {column}={frame[column].iloc[row]!r} as a number",
                line=row + header_lines + 1
            )
        values[:, j] = parsed.to_numpy(dtype=float)
    return values


def dataset_columns(d: int) -> List[str]:
    return [f"x{j + 1}" for j in range(d)] + ["t", "y"]


def load_dataset_csv(
    file_path: Union[str, Path],
    maximize: bool = False,
    m: Optional[int] = None
) -> LoggedDataset:
    """
    Load a logged dataset.

    Args:
        file_path: CSV with header x1..xd,t,y
        maximize: Outcomes are rewards; negate them so everything minimizes
        m: Arm count; defaults to the largest t in the file

    Returns:
        LoggedDataset with 0-based treatments

    Raises:
        DataError: bad header, unparseable cell or invalid row (with line number)
    """
    file_path = Path(file_path)
    frame = _read_text_frame(file_path)
    columns = list(frame.columns)
    d = len(columns) - 2
    if d < 1 or columns != dataset_columns(d):
        raise DataError(f"expected header x1,...,xd,t,y, got {','.join(columns)}", line=1)
    if frame.empty:
        raise DataError(f"{file_path} has no data rows", line=2)

    values = _parse_numeric(frame, columns)
    t = values[:, d]
    not_integer = np.flatnonzero(~np.isfinite(t) | (t != np.round(t)))
    if not_integer.size:
        row = int(not_integer[0])
        raise DataError(f"treatment {frame['t'].iloc[row]!r} is not an integer", line=row + HEADER_LINES + 1)

    T = t.astype(int) - 1
    Y = -values[:, d + 1] if maximize else values[:, d + 1]
    ds = LoggedDataset(X=values[:, :d], T=T, Y=Y, m=m if m is not None else int(T.max()) + 1)

    result = validate_dataset(ds)
    if not result.ok:
        first = result.violations[0]
        line = None if first.row is None else first.row + HEADER_LINES + 1
        raise DataError("; ".join(result.messages()), line=line)

    logger.info(
        f"Loaded {ds.n} rows, {ds.d} covariates, {ds.m} arms from {file_path}",
        extra={'event': 'dataset_loaded', 'n': ds.n, 'd': ds.d, 'm': ds.m, 'maximize': maximize}
    )
    return ds


def dataset_frame(ds: LoggedDataset) -> pd.DataFrame:
    """DataFrame in file layout (1-based t)."""
    frame = pd.DataFrame(ds.X, columns=dataset_columns(ds.d)[:-2])
    frame["t"] = ds.T + 1
    frame["y"] = ds.Y
    return frame


def write_dataset_csv(ds: LoggedDataset, file_path: Union[str, Path]) -> Path:
    return save_csv(dataset_frame(ds), file_path)


def dataset_csv_text(ds: LoggedDataset) -> str:
    buffer = io.StringIO()
    dataset_frame(ds).to_csv(buffer, index=False, lineterminator="\n")
    return buffer.getvalue()


def load_matrix_csv(file_path: Union[str, Path], shape: Optional[tuple] = None, header: bool = False) -> np.ndarray:
    """
    Load a numeric matrix (scale matrix, propensities, assignments).

    Raises:
        DataError: missing file, non-numeric cell or shape mismatch
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataError(f"file {file_path} not found")
    try:
        frame = pd.read_csv(file_path, header=0 if header else None, dtype=str, keep_default_na=False)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        raise DataError(f"{file_path}: {exc}") from exc
    matrix = _parse_numeric(frame, list(frame.columns), header_lines=1 if header else 0)
    if shape is not None and matrix.shape != tuple(shape):
        raise DataError(f"{file_path}: expected a {shape[0]} x {shape[1]} matrix, got {matrix.shape}")
    return matrix
