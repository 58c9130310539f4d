"""Deterministic synthetic wearable dataset with controllable separability.

Every user is generated independently from (seed, user_index), emitting the
exact CSV schemas the ingest module consumes. Sober motion is a fixed-
amplitude mix of gait sinusoids (0.5-3 Hz, random frequencies and phases
per session) plus white noise; intoxicated stretches add low-frequency
sway, gait phase jitter, extra noise, and an elevated heart rate, all
scaled by the separability knob. At separability 0 the two classes are
distributionally identical by construction (only amplitudes of the added
effects change, and those are zero).

TAC traces rise linearly during a drinking episode and decay exponentially
with a 45-minute half-life, sampled every 30 minutes. Sessions are placed
so that the zero-order-held TAC at every window end is deterministically
above or below the 35 µg/L label threshold, which lets the generator hit a
requested intoxicated-window prevalence exactly (one "transition" session
per user straddles a held-TAC boundary to absorb the remainder windows).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import resampled_length

TAC_LABEL_THRESHOLD = 35.0
EPISODE_RISE_S = 900.0
TAC_HALF_LIFE_S = 2700.0  # 45 minutes
PEAK_RANGE_UGL = (95.0, 120.0)
USER_TOLERANCE_RANGE = (0.95, 1.3)

# placement zones relative to an episode onset, in seconds; derived from the
# pulse shape so held TAC is safely above/below the threshold inside them
DRUNK_ZONE = (1800.0, 5400.0)
EXCLUSION_ZONE = (-400.0, 7600.0)
DRUNK_HELD_FLOOR = 40.0
SOBER_HELD_CEILING = 33.0

SESSION_GAP_S = 150.0
WINDOW_SECONDS = 20.0
WINDOW_SAMPLES_40HZ = 800

# fixed marginal-amplitude profile: per-session randomness is confined to
# frequencies and phases so class-conditional distributions match at sep=0
ACCEL_GAIT_AMPS = (0.18, 0.10, 0.06)
GYRO_GAIT_AMPS = (0.45, 0.25, 0.12)
GAIT_FREQ_RANGE = (0.5, 3.0)
SWAY_FREQ_RANGE = (0.3, 0.9)
ACCEL_SWAY_AMP = 0.55
GYRO_SWAY_AMP = 1.20
ACCEL_NOISE = 0.04
GYRO_NOISE = 0.08
DRUNK_NOISE_GAIN = 1.0
JITTER_RAD = 2.0
JITTER_FREQ_HZ = 0.2
GRAVITY_G = -0.98

HR_BASE_RANGE = (60.0, 68.0)
HR_WANDER_BPM = 3.0
HR_WANDER_PERIOD_S = 60.0  # short enough that one session mixes all phases
HR_NOISE_BPM = 0.8
HR_DRUNK_SHIFT_BPM = 15.0


class SynthError(ValueError):
    """Invalid generator configuration or impossible placement."""


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 14
    session_seconds: tuple[float, float] = (160.0, 280.0)
    sessions_per_user: int = 6
    episodes_per_day: float = 1.5
    days: float = 3.0
    separability: float = 1.0
    target_prevalence: float = 0.37
    seed: int = 0
    sample_rate_hz: float = 50.0
    tac_period_s: float = 1800.0
    hr_period_s: float = 1.0
    inject_gaps: bool = False

    def validate(self) -> None:
        if self.n_users < 1:
            raise SynthError("n_users must be >= 1")
        if not 0.0 <= self.separability <= 1.0:
            raise SynthError(f"separability must be in [0, 1], got {self.separability}")
        if not 0.0 <= self.target_prevalence <= 1.0:
            raise SynthError("target_prevalence must be in [0, 1]")
        for name in ("episodes_per_day", "days", "sample_rate_hz", "tac_period_s", "hr_period_s"):
            if getattr(self, name) <= 0:
                raise SynthError(f"{name} must be positive")
        lo, hi = self.session_seconds
        if not 90.0 <= lo <= hi:
            raise SynthError("session_seconds must satisfy 90 <= lo <= hi")
        if self.sessions_per_user < 2:
            raise SynthError("sessions_per_user must be >= 2")
        if self.tac_period_s != 1800.0 or self.sample_rate_hz != 50.0:
            # placement zone constants are derived for the default cadences
            raise SynthError("non-default tac_period_s/sample_rate_hz are unsupported")

    @property
    def timeline_seconds(self) -> float:
        return self.days * 86400.0


@dataclass
class _SessionPlan:
    t0: float
    n50: int  # samples at 50 Hz
    windows: int
    drunk_windows: int


@dataclass
class _UserPlan:
    user_id: str
    sessions: list[_SessionPlan] = field(default_factory=list)
    episode_times: list[float] = field(default_factory=list)
    episode_peaks: list[float] = field(default_factory=list)
    tac_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hr_base: float = 65.0
    hr_shift: float = 0.0

    @property
    def windows(self) -> int:
        return sum(s.windows for s in self.sessions)

    @property
    def drunk_windows(self) -> int:
        return sum(s.drunk_windows for s in self.sessions)


def _tac_pulse(tau: np.ndarray, peak: float) -> np.ndarray:
    rising = np.clip(tau / EPISODE_RISE_S, 0.0, 1.0)
    decay = np.exp2(-np.maximum(tau - EPISODE_RISE_S, 0.0) / TAC_HALF_LIFE_S)
    return np.where(tau < 0, 0.0, peak * rising * decay)


def _tac_trace(times: np.ndarray, episode_times, episode_peaks) -> np.ndarray:
    out = np.zeros_like(times, dtype=np.float64)
    for e, peak in zip(episode_times, episode_peaks):
        out += _tac_pulse(times - e, peak)
    return out


def _session_window_count(n50: int, config: SynthConfig) -> int:
    m40 = resampled_length(n50, config.sample_rate_hz, 40.0)
    if m40 < WINDOW_SAMPLES_40HZ:
        return 0
    return (m40 - WINDOW_SAMPLES_40HZ) // WINDOW_SAMPLES_40HZ + 1


def _held_tac(t: float, tac_samples: np.ndarray, period: float) -> float:
    return float(tac_samples[int(t // period)])


def _count_drunk_windows(plan_t0: float, windows: int, tac_samples: np.ndarray, period: float) -> int:
    ends = plan_t0 + WINDOW_SECONDS * (np.arange(windows) + 1)
    held = tac_samples[(ends // period).astype(int)]
    return int((held > TAC_LABEL_THRESHOLD).sum())


def _plan_user(config: SynthConfig, user_index: int, rng: np.random.Generator) -> _UserPlan:
    plan = _UserPlan(user_id=f"user{user_index:02d}")
    plan.hr_base = float(rng.uniform(*HR_BASE_RANGE))
    plan.hr_shift = HR_DRUNK_SHIFT_BPM * config.separability * float(rng.uniform(0.8, 1.0))
    tolerance = float(rng.uniform(*USER_TOLERANCE_RANGE))

    # session sizes on the 50 Hz grid
    lengths = rng.uniform(config.session_seconds[0], config.session_seconds[1], config.sessions_per_user)
    n50s = [int(round(s * config.sample_rate_hz)) + 1 for s in lengths]
    window_counts = [_session_window_count(n, config) for n in n50s]

    # drinking episodes, evenly spread with per-user peak scaling
    total = config.timeline_seconds
    n_ep = max(1, int(round(config.episodes_per_day * config.days)))
    lead = 12000.0
    spacing = (total - 2 * lead) / n_ep
    if spacing < EXCLUSION_ZONE[1] - EXCLUSION_ZONE[0]:
        raise SynthError("timeline too short for the requested episode rate")
    for j in range(n_ep):
        onset = lead + j * spacing + float(rng.uniform(0.0, 600.0))
        onset = float(np.floor(onset / config.tac_period_s) * config.tac_period_s)
        plan.episode_times.append(onset)
        plan.episode_peaks.append(tolerance * float(rng.uniform(*PEAK_RANGE_UGL)))

    n_tac = int(total // config.tac_period_s) + 2
    grid = np.arange(n_tac) * config.tac_period_s
    plan.tac_samples = _tac_trace(grid, plan.episode_times, plan.episode_peaks)

    # allocate per-session classes to hit the target drunk window count exactly
    target = int(round(config.target_prevalence * sum(window_counts)))
    order = sorted(range(len(n50s)), key=lambda i: -window_counts[i])
    drunk_full: list[int] = []
    remainder = target
    for i in order:
        if window_counts[i] <= remainder:
            drunk_full.append(i)
            remainder -= window_counts[i]
    transition: tuple[int, int] | None = None
    if remainder > 0:
        candidates = [i for i in order if i not in drunk_full and window_counts[i] > remainder]
        transition = (candidates[0], remainder)

    # place sessions: drunk ones inside held-above zones, the transition one
    # straddling a zone start, sober ones clear of all episode exclusions
    episode_cursor = [e + DRUNK_ZONE[0] + 40.0 for e in plan.episode_times]
    placements: list[tuple[int, float]] = []

    def next_episode_with_room(span: float) -> int:
        for k in range(len(episode_cursor)):
            j = (len(placements) + k) % len(episode_cursor)
            if episode_cursor[j] + span <= plan.episode_times[j] + DRUNK_ZONE[1] - 120.0:
                return j
        raise SynthError("no drunk zone can host the session; lower sessions or prevalence")

    if transition is not None:
        i, m = transition
        w = window_counts[i]
        span = (n50s[i] - 1) / config.sample_rate_hz
        j = next_episode_with_room(span + 40.0)
        boundary = plan.episode_times[j] + DRUNK_ZONE[0]
        t0 = boundary + 19.0 - WINDOW_SECONDS * (w - m + 1)
        placements.append((i, t0))
        episode_cursor[j] = max(episode_cursor[j], t0 + span + SESSION_GAP_S)

    for i in drunk_full:
        span = (n50s[i] - 1) / config.sample_rate_hz
        j = next_episode_with_room(span)
        t0 = episode_cursor[j]
        placements.append((i, t0))
        episode_cursor[j] = t0 + span + SESSION_GAP_S

    exclusions = sorted(
        (e + EXCLUSION_ZONE[0], e + EXCLUSION_ZONE[1]) for e in plan.episode_times
    )
    cursor = 200.0
    assigned = {i for i, _ in placements}
    for i in range(len(n50s)):
        if i in assigned:
            continue
        span = (n50s[i] - 1) / config.sample_rate_hz
        placed = False
        while not placed:
            for lo, hi in exclusions:
                if cursor < hi and cursor + span > lo:
                    cursor = hi
                    break
            else:
                placed = True
        if cursor + span > total:
            raise SynthError("timeline too short to place all sober sessions")
        placements.append((i, float(np.ceil(cursor))))
        cursor = np.ceil(cursor) + span + SESSION_GAP_S

    for i, t0 in sorted(placements, key=lambda p: p[1]):
        windows = window_counts[i]
        drunk = _count_drunk_windows(t0, windows, plan.tac_samples, config.tac_period_s)
        plan.sessions.append(_SessionPlan(t0=t0, n50=n50s[i], windows=windows, drunk_windows=drunk))

    if plan.drunk_windows != target:
        raise SynthError(
            f"placement produced {plan.drunk_windows} drunk windows, wanted {target}"
        )

    if config.inject_gaps:
        _split_longest_sober_session(plan, config)
    return plan


def _split_longest_sober_session(plan: _UserPlan, config: SynthConfig) -> None:
    """Cut one sober session in two with a 10 s dropout between the halves."""
    candidates = [
        (s.n50, idx)
        for idx, s in enumerate(plan.sessions)
        if s.drunk_windows == 0 and s.n50 >= int(200 * config.sample_rate_hz)
    ]
    if not candidates:
        return
    _, idx = max(candidates)
    old = plan.sessions.pop(idx)
    half = old.n50 // 2
    parts = []
    for t0, n50 in ((old.t0, half), (old.t0 + half / config.sample_rate_hz + 10.0, old.n50 - half)):
        w = _session_window_count(n50, config)
        drunk = _count_drunk_windows(t0, w, plan.tac_samples, config.tac_period_s)
        parts.append(_SessionPlan(t0=t0, n50=n50, windows=w, drunk_windows=drunk))
    plan.sessions[idx:idx] = parts


def _render_session(
    config: SynthConfig,
    plan: _UserPlan,
    session: _SessionPlan,
    rng: np.random.Generator,
) -> list[str]:
    sep = config.separability
    n = session.n50
    rate = config.sample_rate_hz
    t_rel = np.arange(n) / rate
    t_abs = session.t0 + t_rel
    held = plan.tac_samples[(t_abs // config.tac_period_s).astype(int)]
    drunk = (held > TAC_LABEL_THRESHOLD).astype(np.float64)

    channels = np.empty((6, n))
    for c in range(6):
        amps = ACCEL_GAIT_AMPS if c < 3 else GYRO_GAIT_AMPS
        noise_sigma = ACCEL_NOISE if c < 3 else GYRO_NOISE
        sway_amp = ACCEL_SWAY_AMP if c < 3 else GYRO_SWAY_AMP
        jitter_phase = float(rng.uniform(0, 2 * np.pi))
        jitter = sep * JITTER_RAD * drunk * np.sin(
            2 * np.pi * JITTER_FREQ_HZ * t_rel + jitter_phase
        )
        signal = np.zeros(n)
        for amp in amps:
            f = float(rng.uniform(*GAIT_FREQ_RANGE))
            phase = float(rng.uniform(0, 2 * np.pi))
            signal += amp * np.sin(2 * np.pi * f * t_rel + phase + jitter)
        sway_f = float(rng.uniform(*SWAY_FREQ_RANGE))
        sway_phase = float(rng.uniform(0, 2 * np.pi))
        signal += sep * sway_amp * drunk * np.sin(2 * np.pi * sway_f * t_rel + sway_phase)
        noise = rng.normal(0.0, 1.0, n) * noise_sigma * (1.0 + DRUNK_NOISE_GAIN * sep * drunk)
        channels[c] = signal + noise
    channels[2] += GRAVITY_G

    hr_phase = float(rng.uniform(0, 2 * np.pi))
    hr = (
        plan.hr_base
        + HR_WANDER_BPM * np.sin(2 * np.pi * t_rel / HR_WANDER_PERIOD_S + hr_phase)
        + rng.normal(0.0, HR_NOISE_BPM, n)
        + plan.hr_shift * drunk
    )
    hr_stride = max(1, int(round(config.hr_period_s * rate)))

    lines = []
    for i in range(n):
        hr_cell = f"{hr[i]:.2f}" if i % hr_stride == 0 else ""
        lines.append(
            f"{t_abs[i]:.2f},{channels[0, i]:.6f},{channels[1, i]:.6f},{channels[2, i]:.6f},"
            f"{channels[3, i]:.6f},{channels[4, i]:.6f},{channels[5, i]:.6f},{hr_cell}"
        )
    return lines


def generate_user(config: SynthConfig, user_index: int) -> tuple[str, str]:
    """Render one user's (sensor CSV, TAC CSV); byte-identical per (seed, index)."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, user_index])))
    plan = _plan_user(config, user_index, rng)
    sensor_lines = ["t,ax,ay,az,gx,gy,gz,hr"]
    for session in plan.sessions:
        sensor_lines.extend(_render_session(config, plan, session, rng))
    tac_lines = ["t,tac"]
    for k, value in enumerate(plan.tac_samples):
        tac_lines.append(f"{k * config.tac_period_s:.1f},{value:.4f}")
    return "\n".join(sensor_lines) + "\n", "\n".join(tac_lines) + "\n"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write per-user CSV pairs plus a manifest; returns the manifest dict.

    The manifest records file hashes and the exact planned window counts;
    regenerating with the same config reproduces it byte for byte.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    users = []
    total_windows = 0
    total_drunk = 0
    for idx in range(config.n_users):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, idx])))
        plan = _plan_user(config, idx, rng)
        sensor_lines = ["t,ax,ay,az,gx,gy,gz,hr"]
        for session in plan.sessions:
            sensor_lines.extend(_render_session(config, plan, session, rng))
        sensor_csv = "\n".join(sensor_lines) + "\n"
        tac_csv = "t,tac\n" + "".join(
            f"{k * config.tac_period_s:.1f},{v:.4f}\n" for k, v in enumerate(plan.tac_samples)
        )
        sensor_file = f"{plan.user_id}_sensor.csv"
        tac_file = f"{plan.user_id}_tac.csv"
        (out / sensor_file).write_bytes(sensor_csv.encode())
        (out / tac_file).write_bytes(tac_csv.encode())
        users.append(
            {
                "user_id": plan.user_id,
                "sensor_file": sensor_file,
                "tac_file": tac_file,
                "sensor_sha256": _sha256(sensor_csv.encode()),
                "tac_sha256": _sha256(tac_csv.encode()),
                "windows": plan.windows,
                "drunk_windows": plan.drunk_windows,
            }
        )
        total_windows += plan.windows
        total_drunk += plan.drunk_windows
    manifest = {
        "schema": "tacsense-dataset-v1",
        "library_version": __version__,
        "config": _config_dict(config),
        "users": users,
        "totals": {
            "windows": total_windows,
            "drunk_windows": total_drunk,
            "prevalence": total_drunk / total_windows if total_windows else 0.0,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _config_dict(config: SynthConfig) -> dict:
    d = asdict(config)
    d["session_seconds"] = list(config.session_seconds)
    return d


def verify_dataset(dataset_dir) -> dict:
    """Check every file hash against the manifest; raises SynthError on mismatch."""
    root = Path(dataset_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    for user in manifest["users"]:
        for key in ("sensor", "tac"):
            path = root / user[f"{key}_file"]
            digest = _sha256(path.read_bytes())
            if digest != user[f"{key}_sha256"]:
                raise SynthError(f"hash mismatch for {path.name}")
    return manifest
