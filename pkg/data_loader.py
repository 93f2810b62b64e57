"""
CSV ingestion for observation series.
Handles header checks, numeric parsing, label columns and concatenation.
"""

import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import DataParseError, InvariantError
from model_core import TimeSeries

logger = logging.getLogger(__name__)


class SeriesLoader:
    """Reads rectangular CSV files with a header row into TimeSeries."""

    def __init__(self, label_column: Optional[str] = None):
        self.label_column = label_column

    def load(self, file_path: str) -> TimeSeries:
        """
        Load one CSV file.

        Args:
            file_path: path to a CSV file with a header row of feature names

        Returns:
            TimeSeries with the label column (if configured) split off
        """
        frame = self._read_frame(file_path)
        if self.label_column is not None and self.label_column not in frame.columns:
            raise DataParseError(f"{file_path}: label column {self.label_column!r} not found")
        features = frame.drop(columns=[self.label_column]) if self.label_column else frame
        if features.shape[1] == 0:
            raise DataParseError(f"{file_path}: no feature columns")
        values = self._parse_numeric(file_path, features)
        labels = frame[self.label_column].astype(str).to_numpy() if self.label_column else None
        try:
            series = TimeSeries(values=values, feature_names=tuple(features.columns), state_labels=labels)
        except InvariantError as e:
            raise DataParseError(f"{file_path}: {e}")
        logger.debug("Loaded %s: %d rows x %d features", file_path, series.n_rows, series.n_vars)
        return series

    def _read_frame(self, file_path: str) -> pd.DataFrame:
        if not os.path.isfile(file_path):
            raise DataParseError(f"{file_path}: file not found")
        try:
            frame = pd.read_csv(file_path, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError:
            raise DataParseError(f"{file_path}: file is empty")
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise DataParseError(f"{file_path}: cannot parse CSV ({e})")
        if frame.shape[0] == 0:
            raise DataParseError(f"{file_path}: header but no data rows")
        unnamed = [c for c in frame.columns if str(c).startswith("Unnamed:")]
        if unnamed:
            raise DataParseError(f"{file_path}: header is missing a column name")
        return frame

    def _parse_numeric(self, file_path: str, features: pd.DataFrame) -> np.ndarray:
        values = np.empty(features.shape, dtype=float)
        for j, column in enumerate(features.columns):
            raw = features[column].str.strip()
            parsed = pd.to_numeric(raw, errors="coerce")
            bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=float, na_value=np.nan))
            if bad.any():
                row = int(np.nonzero(bad.to_numpy())[0][0])
                raise DataParseError(f"{file_path}: column {column!r}, data row {row + 1}: "
                                     f"{raw.iloc[row]!r} is not a finite number")
            values[:, j] = parsed.to_numpy(dtype=float)
        return values


def load_series(file_path: str, label_column: Optional[str] = None) -> TimeSeries:
    return SeriesLoader(label_column).load(file_path)


def load_series_folder(directory: str, label_column: Optional[str] = None) -> Dict[str, TimeSeries]:
    """Every *.csv in directory, keyed by file stem, in sorted order."""
    if not os.path.isdir(directory):
        raise DataParseError(f"{directory}: not a directory")
    loader = SeriesLoader(label_column)
    out = {path.stem: loader.load(str(path)) for path in sorted(Path(directory).glob("*.csv"))}
    if not out:
        raise DataParseError(f"{directory}: no CSV files found")
    return out


def concat_series(series: Sequence[TimeSeries]) -> TimeSeries:
    """Stack records row-wise; feature names must agree."""
    if not series:
        raise InvariantError("Nothing to concatenate")
    names = series[0].feature_names
    for s in series[1:]:
        if s.feature_names != names:
            raise InvariantError("Cannot concatenate series with different feature names")
    labels: Optional[List[np.ndarray]] = [s.state_labels for s in series]
    if any(lab is None for lab in labels):
        labels = None
    return TimeSeries(values=np.vstack([s.values for s in series]), feature_names=names,
                      state_labels=np.concatenate(labels) if labels else None)
