"""Raw sensor/TAC CSV parsing, session segmentation, and window labeling.

CSV schemas (header required, comma-separated):
  sensor stream: ``t,ax,ay,az,gx,gy,gz,hr``  (hr cells may be empty)
  TAC stream:    ``t,tac``

Timestamps are seconds since the stream epoch. A session is a gap-free run
of samples longer than one minute; windows are labeled intoxicated when the
zero-order-held TAC at the window end strictly exceeds the threshold.
"""

from __future__ import annotations

import csv
import io
import os
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz", "hr")
HR_CHANNEL = 6

SENSOR_COLUMNS = ("t", "ax", "ay", "az", "gx", "gy", "gz", "hr")
TAC_COLUMNS = ("t", "tac")

DEFAULT_GAP_THRESHOLD_S = 0.5
DEFAULT_MIN_DURATION_S = 60.0
DEFAULT_TAC_THRESHOLD_UGL = 35.0
NOMINAL_SAMPLE_RATE_HZ = 50.0

HR_VALID_RANGE = (20.0, 260.0)


class IngestError(ValueError):
    """Base error for malformed input streams."""


class SchemaError(IngestError):
    """Header is missing a required column."""


class ParseError(IngestError):
    """A data cell could not be parsed; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LabelingError(IngestError):
    """Window labeling was requested without usable TAC data."""


@dataclass(slots=True)
class SensorSample:
    """One timestamped multi-channel wearable reading; hr may be absent."""

    t: float
    ax: float
    ay: float
    az: float
    gx: float
    gy: float
    gz: float
    hr: float | None = None


@dataclass(slots=True)
class TacReading:
    """One transdermal alcohol concentration reading in µg/L."""

    t: float
    tac: float


@dataclass
class Session:
    """A gap-free, time-ordered run of samples for one user (> 60 s)."""

    user_id: str
    samples: list[SensorSample] = field(default_factory=list)
    sample_rate_nominal: float = NOMINAL_SAMPLE_RATE_HZ

    @property
    def start(self) -> float:
        return self.samples[0].t

    @property
    def end(self) -> float:
        return self.samples[-1].t

    @property
    def duration(self) -> float:
        return self.end - self.start

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LabeledWindow:
    """A channels-by-samples matrix with a binary intoxication label."""

    user_id: str
    channels: np.ndarray  # (7, N), rows ordered as CHANNELS
    label: int
    window_start: float


def _open_text(source: str | bytes | os.PathLike | IO) -> IO[str]:
    if isinstance(source, os.PathLike):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return io.StringIO(data)
    raise TypeError(f"unsupported source type: {type(source).__name__}")


def _header_indices(header: Sequence[str], required: Sequence[str]) -> dict[str, int]:
    names = [h.strip() for h in header]
    missing = [c for c in required if c not in names]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    return {c: names.index(c) for c in required}


def _parse_float(cell: str, line: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(line, f"malformed numeric cell in column '{column}': {cell!r}") from None
    if not np.isfinite(value):
        raise ParseError(line, f"non-finite value in column '{column}': {cell!r}")
    return value


def parse_sensor_csv(source: str | bytes | os.PathLike | IO) -> list[SensorSample]:
    """Parse a sensor CSV stream into samples, preserving file order.

    Empty hr cells become ``hr=None``. Raises SchemaError for a missing
    column and ParseError (with line number) for malformed cells or values
    violating sample invariants.
    """
    samples: list[SensorSample] = []
    with _open_text(source) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: header row required") from None
        idx = _header_indices(header, SENSOR_COLUMNS)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ParseError(line, f"expected {len(header)} cells, got {len(row)}")
            t = _parse_float(row[idx["t"]], line, "t")
            if t < 0:
                raise ParseError(line, f"negative timestamp: {t}")
            motion = [_parse_float(row[idx[c]], line, c) for c in CHANNELS[:HR_CHANNEL]]
            hr_cell = row[idx["hr"]].strip()
            hr: float | None = None
            if hr_cell:
                hr = _parse_float(hr_cell, line, "hr")
                if not (HR_VALID_RANGE[0] < hr < HR_VALID_RANGE[1]):
                    raise ParseError(line, f"heart rate out of range {HR_VALID_RANGE}: {hr}")
            samples.append(SensorSample(t, *motion, hr=hr))
    return samples


def parse_tac_csv(source: str | bytes | os.PathLike | IO) -> list[TacReading]:
    """Parse a TAC CSV stream; timestamps must be strictly increasing."""
    readings: list[TacReading] = []
    with _open_text(source) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file: header row required") from None
        idx = _header_indices(header, TAC_COLUMNS)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            t = _parse_float(row[idx["t"]], line, "t")
            tac = _parse_float(row[idx["tac"]], line, "tac")
            if tac < 0:
                raise ParseError(line, f"negative TAC value: {tac}")
            if readings and t <= readings[-1].t:
                raise ParseError(line, f"timestamps not strictly increasing: {t}")
            readings.append(TacReading(t, tac))
    return readings


def segment_sessions(
    samples: Iterable[SensorSample],
    gap_threshold: float = DEFAULT_GAP_THRESHOLD_S,
    min_duration: float = DEFAULT_MIN_DURATION_S,
    user_id: str = "",
) -> list[Session]:
    """Split samples into gap-free sessions longer than ``min_duration``.

    Samples are sorted by time if needed; duplicate timestamps keep the
    first occurrence. Runs separated by gaps larger than ``gap_threshold``
    are split, and runs of duration <= ``min_duration`` are discarded.
    Degenerate input yields an empty list.
    """
    if gap_threshold <= 0:
        raise IngestError(f"gap_threshold must be positive, got {gap_threshold}")
    ordered = sorted(samples, key=lambda s: s.t)
    sessions: list[Session] = []
    run: list[SensorSample] = []

    def flush(run: list[SensorSample]) -> None:
        if len(run) >= 2 and run[-1].t - run[0].t > min_duration:
            sessions.append(Session(user_id=user_id, samples=run))

    for sample in ordered:
        if run:
            dt = sample.t - run[-1].t
            if dt == 0:
                continue
            if dt > gap_threshold:
                flush(run)
                run = []
        run.append(sample)
    flush(run)
    return sessions


def label_windows(
    window_starts: Sequence[float],
    window_seconds: float,
    tac: Sequence[TacReading],
    threshold_ugL: float = DEFAULT_TAC_THRESHOLD_UGL,
) -> tuple[list[int], int]:
    """Label windows by the zero-order-held TAC value at each window end.

    ``window_starts`` must be non-decreasing. A window is labeled 1 iff the
    most recent TAC reading at or before its end strictly exceeds
    ``threshold_ugL``; ties are sober. Windows ending before the first TAC
    reading are dropped, and their count is returned alongside the labels
    (the skipped windows are always a prefix of the sorted starts).
    """
    if not tac:
        raise LabelingError("cannot label windows: TAC list is empty")
    starts = list(window_starts)
    if any(b < a for a, b in zip(starts, starts[1:])):
        raise IngestError("window_starts must be non-decreasing")
    tac_times = [r.t for r in tac]
    labels: list[int] = []
    skipped = 0
    for start in starts:
        end = start + window_seconds
        pos = bisect_right(tac_times, end) - 1
        if pos < 0:
            skipped += 1
            continue
        labels.append(1 if tac[pos].tac > threshold_ugL else 0)
    return labels, skipped


def session_to_channels(session: Session) -> tuple[np.ndarray, float]:
    """Stack a session into a (7, n) float matrix plus the start time.

    Row order follows CHANNELS; absent heart-rate cells become NaN.
    """
    n = len(session.samples)
    out = np.empty((len(CHANNELS), n), dtype=np.float64)
    for i, s in enumerate(session.samples):
        out[0, i] = s.ax
        out[1, i] = s.ay
        out[2, i] = s.az
        out[3, i] = s.gx
        out[4, i] = s.gy
        out[5, i] = s.gz
        out[HR_CHANNEL, i] = np.nan if s.hr is None else s.hr
    return out, session.start
