"""Signal preprocessing: low-pass filtering, resampling, windowing, scaling.

The chain mirrors the ingestion contract: 50 Hz multi-channel sessions are
low-pass filtered at 5 Hz, resampled to 40 Hz, and cut into non-overlapping
20-second windows (7x800 matrices). Per-channel z-score statistics are
fitted on training windows only.

Preprocessed windows serialize to a flat binary container (magic ``TWW1``);
the exact byte layout is documented in docs/FORMATS.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import fsum
from typing import Sequence

import numpy as np

from .ingest import HR_CHANNEL

DEFAULT_CUTOFF_HZ = 5.0
DEFAULT_INPUT_RATE_HZ = 50.0
DEFAULT_TAPS = 101
DEFAULT_OUTPUT_RATE_HZ = 40.0
DEFAULT_WINDOW_SECONDS = 20.0

CONTAINER_MAGIC = b"TWW1"


class DspError(ValueError):
    """Base error for preprocessing failures."""


class DesignError(DspError):
    """Filter specification is unrealizable."""


class LengthError(DspError):
    """Signal too short for the requested operation."""


class ResampleError(DspError):
    """Resampling input is degenerate."""


class FitError(DspError):
    """Normalizer fitting received no data."""


class ContainerError(DspError):
    """Window container bytes do not match the documented layout."""


@dataclass(frozen=True)
class FilterSpec:
    """Windowed-sinc low-pass design parameters (Hamming window)."""

    cutoff_hz: float = DEFAULT_CUTOFF_HZ
    input_rate_hz: float = DEFAULT_INPUT_RATE_HZ
    taps: int = DEFAULT_TAPS


@dataclass(frozen=True)
class PreprocessConfig:
    """Resampling/windowing parameters; normalization is fitted separately."""

    output_rate_hz: float = DEFAULT_OUTPUT_RATE_HZ
    window_seconds: float = DEFAULT_WINDOW_SECONDS
    hop_seconds: float = DEFAULT_WINDOW_SECONDS
    normalization: "NormStats | None" = None

    @property
    def window_samples(self) -> int:
        n = self.window_seconds * self.output_rate_hz
        if abs(n - round(n)) > 1e-9:
            raise DspError(
                f"window_seconds x output_rate_hz must be an integer, got {n}"
            )
        return int(round(n))

    @property
    def hop_samples(self) -> int:
        n = self.hop_seconds * self.output_rate_hz
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise DspError(f"hop_seconds x output_rate_hz must be a positive integer, got {n}")
        return int(round(n))


def design_lowpass(spec: FilterSpec) -> np.ndarray:
    """Design linear-phase windowed-sinc taps with DC gain exactly 1.

    The half-amplitude point sits at ``cutoff_hz``. After normalizing by the
    coefficient sum, the residual is folded into the smallest-magnitude tap
    so the exact (fsum) coefficient sum equals 1.0.
    """
    if not spec.cutoff_hz > 0 or not spec.cutoff_hz < spec.input_rate_hz / 2:
        raise DesignError(
            f"cutoff {spec.cutoff_hz} Hz must lie in (0, {spec.input_rate_hz / 2}) Hz"
        )
    if spec.taps < 3 or spec.taps % 2 == 0:
        raise DesignError(f"taps must be odd and >= 3, got {spec.taps}")
    n = np.arange(spec.taps) - (spec.taps - 1) / 2
    fc = spec.cutoff_hz / spec.input_rate_hz
    h = 2 * fc * np.sinc(2 * fc * n) * np.hamming(spec.taps)
    h /= h.sum()
    j = int(np.argmin(np.abs(h)))
    for _ in range(4):
        residual = fsum(h) - 1.0
        if residual == 0.0:
            break
        h[j] -= residual
    return h


def filter_signal(signal: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Zero-phase filter via reflection padding; output length == input length."""
    x = np.asarray(signal, dtype=np.float64)
    taps = len(coeffs)
    if x.ndim != 1:
        raise DspError(f"expected 1-D signal, got shape {x.shape}")
    if len(x) < taps:
        raise LengthError(f"signal length {len(x)} is shorter than {taps} taps")
    pad = (taps - 1) // 2
    padded = np.pad(x, pad, mode="reflect")
    return np.convolve(padded, coeffs, mode="valid")


def resampled_length(n_in: int, input_rate_hz: float, output_rate_hz: float) -> int:
    """Output grid length: floor(duration * output_rate) + 1, with a 1e-9 snap."""
    duration = (n_in - 1) / input_rate_hz
    grid_count = duration * output_rate_hz
    n = int(np.floor(grid_count))
    if grid_count - n > 1 - 1e-9:
        n += 1
    return n + 1


def resample_to(
    signal: np.ndarray, input_rate_hz: float, output_rate_hz: float
) -> np.ndarray:
    """Linearly interpolate onto a uniform grid spanning the same time range.

    Output length follows resampled_length; the grid never extends past the
    input span, so endpoints are preserved within one output period.
    """
    x = np.asarray(signal, dtype=np.float64)
    if input_rate_hz <= 0 or output_rate_hz <= 0:
        raise ResampleError("rates must be positive")
    if len(x) < 2:
        raise ResampleError(f"need at least 2 samples to resample, got {len(x)}")
    n_out = resampled_length(len(x), input_rate_hz, output_rate_hz)
    t_out = np.arange(n_out) / output_rate_hz
    t_in = np.arange(len(x)) / input_rate_hz
    return np.interp(t_out, t_in, x)


def make_windows(
    channels: np.ndarray, config: PreprocessConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Cut a (C, M) channel matrix into fixed windows with start offsets.

    Returns (windows, starts): windows has shape (k, C, W) and starts are
    seconds relative to the matrix start. Trailing partial windows are
    dropped; M < W yields zero windows.
    """
    x = np.asarray(channels)
    if x.ndim != 2:
        raise DspError(f"expected (channels, samples) matrix, got shape {x.shape}")
    w = config.window_samples
    step = config.hop_samples
    m = x.shape[1]
    if m < w:
        return np.empty((0, x.shape[0], w), dtype=x.dtype), np.empty(0)
    count = (m - w) // step + 1
    windows = np.stack([x[:, i * step : i * step + w] for i in range(count)])
    starts = np.arange(count) * (step / config.output_rate_hz)
    return windows, starts


def _forward_fill(row: np.ndarray) -> np.ndarray:
    """Forward-fill NaN runs in place; leading NaNs are left untouched."""
    mask = np.isnan(row)
    if not mask.any():
        return row
    idx = np.where(~mask, np.arange(len(row)), 0)
    np.maximum.accumulate(idx, out=idx)
    row[:] = row[idx]
    return row


def fill_hr_gaps(channels: np.ndarray) -> np.ndarray:
    """Impute sparse heart-rate readings at session level.

    Forward-fills absences, then backfills any leading gap with the first
    present value. A row with no readings at all stays NaN so the caller
    can drop the session.
    """
    out = np.array(channels, dtype=np.float64, copy=True)
    hr = out[HR_CHANNEL]
    _forward_fill(hr)
    finite = np.isfinite(hr)
    if finite.any() and not finite.all():
        hr[: np.argmax(finite)] = hr[finite][0]
    return out


@dataclass
class NormStats:
    """Per-channel z-score statistics fitted on training windows."""

    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask; constant channels are scaled by 1

    @property
    def effective_std(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.std)


def fit_normalizer(train_windows: Sequence[np.ndarray] | np.ndarray) -> NormStats:
    """Fit per-channel mean/std over training windows.

    Heart-rate absences are forward-filled within each window first; cells
    still absent are excluded from the statistics. Channels with (near-)zero
    spread are flagged constant and later scaled by 1.
    """
    arr = np.asarray(train_windows, dtype=np.float64)
    if arr.size == 0:
        raise FitError("cannot fit normalizer on an empty training set")
    if arr.ndim == 2:
        arr = arr[None]
    arr = arr.copy()
    for w in arr:
        _forward_fill(w[HR_CHANNEL])
    n_channels = arr.shape[1]
    mean = np.zeros(n_channels)
    std = np.ones(n_channels)
    constant = np.zeros(n_channels, dtype=bool)
    for c in range(n_channels):
        values = arr[:, c, :].ravel()
        values = values[np.isfinite(values)]
        if values.size == 0:
            constant[c] = True
            continue
        mean[c] = values.mean()
        std[c] = values.std()
        if std[c] < 1e-12:
            std[c] = 1.0
            constant[c] = True
    return NormStats(mean=mean, std=std, constant=constant)


def apply_normalizer(window: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score one window; imputes hr absences before scaling."""
    out = np.array(window, dtype=np.float64, copy=True)
    _forward_fill(out[HR_CHANNEL])
    hr = out[HR_CHANNEL]
    hr[np.isnan(hr)] = stats.mean[HR_CHANNEL]
    out -= stats.mean[:, None]
    out /= stats.effective_std[:, None]
    return out


def normalize_windows(windows: np.ndarray, stats: NormStats) -> np.ndarray:
    """Vectorized apply_normalizer over a (N, C, W) stack."""
    out = np.array(windows, dtype=np.float64, copy=True)
    for w in out:
        _forward_fill(w[HR_CHANNEL])
    hr = out[:, HR_CHANNEL, :]
    hr[np.isnan(hr)] = stats.mean[HR_CHANNEL]
    out -= stats.mean[None, :, None]
    out /= stats.effective_std[None, :, None]
    return out


def preprocess_channels(
    channels: np.ndarray,
    filter_spec: FilterSpec,
    config: PreprocessConfig,
) -> np.ndarray:
    """Run hr imputation, low-pass filtering, and resampling on a session."""
    filled = fill_hr_gaps(channels)
    coeffs = design_lowpass(filter_spec)
    rows = []
    for c in range(filled.shape[0]):
        row = filled[c]
        if np.isnan(row).all():
            # no hr coverage at all: propagate NaN so the caller can drop it
            duration = (len(row) - 1) / filter_spec.input_rate_hz
            n = int(np.floor(duration * config.output_rate_hz))
            rows.append(np.full(n + 1, np.nan))
            continue
        rows.append(
            resample_to(
                filter_signal(row, coeffs),
                filter_spec.input_rate_hz,
                config.output_rate_hz,
            )
        )
    return np.stack(rows)


@dataclass
class WindowContainer:
    """Preprocessed labeled windows plus per-user metadata and provenance."""

    windows: np.ndarray  # (N, C, W) float32
    labels: np.ndarray  # (N,) uint8
    user_ids: list[str]
    window_starts: np.ndarray  # (N,) float64, seconds since stream epoch
    user_tac: dict[str, float]  # per-user TAC feature (mean of session maxima)
    meta: dict

    def __post_init__(self):
        n = len(self.windows)
        if not (len(self.labels) == len(self.user_ids) == len(self.window_starts) == n):
            raise ContainerError("window/label/user/start lengths disagree")


def save_window_container(path, container: WindowContainer) -> None:
    """Serialize windows to the TWW1 layout (see docs/FORMATS.md)."""
    windows = np.ascontiguousarray(container.windows, dtype="<f4")
    n, c, w = windows.shape
    users = sorted(container.user_tac)
    user_index = {u: i for i, u in enumerate(users)}
    meta_bytes = json.dumps(container.meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<III", c, w, n))
        fh.write(np.asarray(container.labels, dtype=np.uint8).tobytes())
        fh.write(windows.tobytes())
        fh.write(struct.pack("<I", len(users)))
        for u in users:
            encoded = u.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<d", container.user_tac[u]))
        fh.write(
            np.asarray([user_index[u] for u in container.user_ids], dtype="<u2").tobytes()
        )
        fh.write(np.asarray(container.window_starts, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def load_window_container(path) -> WindowContainer:
    """Read a TWW1 container back into memory."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CONTAINER_MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {CONTAINER_MAGIC!r}")
    offset = 4
    c, w, n = struct.unpack_from("<III", data, offset)
    offset += 12
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset).copy()
    offset += n
    windows = (
        np.frombuffer(data, dtype="<f4", count=n * c * w, offset=offset)
        .reshape(n, c, w)
        .copy()
    )
    offset += n * c * w * 4
    (user_count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    users: list[str] = []
    user_tac: dict[str, float] = {}
    for _ in range(user_count):
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + length].decode()
        offset += length
        (tac,) = struct.unpack_from("<d", data, offset)
        offset += 8
        users.append(name)
        user_tac[name] = tac
    indices = np.frombuffer(data, dtype="<u2", count=n, offset=offset)
    offset += 2 * n
    starts = np.frombuffer(data, dtype="<f8", count=n, offset=offset).copy()
    offset += 8 * n
    (meta_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    meta = json.loads(data[offset : offset + meta_len].decode())
    return WindowContainer(
        windows=windows,
        labels=labels,
        user_ids=[users[i] for i in indices],
        window_starts=starts,
        user_tac=user_tac,
        meta=meta,
    )
